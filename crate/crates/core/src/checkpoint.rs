//! Safetensors-compatible checkpoint reading and writing, plus schema
//! alignment across a pre-trained model and its fine-tunes.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header mapping
//! tensor names to `{dtype, shape, data_offsets}`, then the raw tensor bytes.
//! `F32` and `F16` are accepted on read (F16 is promoted), `F32` is written.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{MergeError, Result};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub key: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorEntry {
    pub fn new(key: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let key = key.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(MergeError::Integrity {
                key,
                message: format!(
                    "shape {shape:?} holds {expected} elements but {} were given",
                    data.len()
                ),
            });
        }
        Ok(TensorEntry {
            key,
            dtype: Dtype::F32,
            shape,
            data,
        })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Bit-level equality, so that NaN payloads and signed zeros count.
    pub fn bit_eq(&self, other: &TensorEntry) -> bool {
        self.key == other.key
            && self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// A named collection of tensors. Iteration is lexicographic by key.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, TensorEntry>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entry: TensorEntry) {
        self.entries.insert(entry.key.clone(), entry);
    }

    pub fn insert_tensor(&mut self, key: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        self.insert(TensorEntry::new(key, shape, data)?);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&TensorEntry> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.meta == other.meta
            && self.entries.len() == other.entries.len()
            && self
                .entries
                .values()
                .zip(other.entries.values())
                .all(|(a, b)| a.bit_eq(b))
    }

    /// Serialises to container bytes. Keys are written in lexicographic
    /// order and the header is space-padded to an 8-byte boundary.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        if !self.meta.is_empty() {
            let meta = self
                .meta
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                .collect();
            header.insert(METADATA_KEY.to_string(), serde_json::Value::Object(meta));
        }
        let mut offset = 0usize;
        for (key, entry) in &self.entries {
            let len = entry.numel() * 4;
            let info = HeaderEntry {
                dtype: "F32".to_string(),
                shape: entry.shape.clone(),
                data_offsets: [offset, offset + len],
            };
            header.insert(
                key.clone(),
                serde_json::to_value(info).expect("header entry serialises"),
            );
            offset += len;
        }
        let mut json = serde_json::to_vec(&header).expect("header serialises");
        while !(json.len() + 8).is_multiple_of(8) {
            json.push(b' ');
        }

        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for entry in self.entries.values() {
            for v in &entry.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 8 {
            return Err(MergeError::Format {
                offset: bytes.len(),
                message: "file shorter than the 8-byte header length prefix".into(),
            });
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let header_end = 8u64
            .checked_add(header_len)
            .filter(|end| *end <= bytes.len() as u64)
            .ok_or_else(|| MergeError::Format {
                offset: 0,
                message: format!(
                    "header length {header_len} exceeds file size {}",
                    bytes.len()
                ),
            })? as usize;
        let header_bytes = &bytes[8..header_end];
        let text = std::str::from_utf8(header_bytes).map_err(|e| MergeError::Format {
            offset: 8 + e.valid_up_to(),
            message: "header is not valid UTF-8".into(),
        })?;
        let raw: BTreeMap<String, serde_json::Value> =
            serde_json::from_str(text).map_err(|e| MergeError::Format {
                offset: 8 + byte_offset(text, e.line(), e.column()),
                message: format!("invalid header JSON: {e}"),
            })?;

        let data = &bytes[header_end..];
        let mut ckpt = Checkpoint::new();
        for (key, value) in raw {
            if key == METADATA_KEY {
                ckpt.meta = serde_json::from_value(value).map_err(|e| MergeError::Format {
                    offset: 8,
                    message: format!("metadata must map strings to strings: {e}"),
                })?;
                continue;
            }
            let info: HeaderEntry =
                serde_json::from_value(value).map_err(|e| MergeError::Format {
                    offset: 8,
                    message: format!("tensor `{key}` has a malformed header entry: {e}"),
                })?;
            let width = match info.dtype.as_str() {
                "F32" => 4,
                "F16" => 2,
                other => {
                    return Err(MergeError::Capability {
                        dtype: other.to_string(),
                    })
                }
            };
            let numel = info
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| MergeError::Integrity {
                    key: key.clone(),
                    message: format!("shape {:?} overflows", info.shape),
                })?;
            let [begin, end] = info.data_offsets;
            if begin > end || end > data.len() {
                return Err(MergeError::Integrity {
                    key,
                    message: format!(
                        "byte range [{begin}, {end}) lies outside the {}-byte data section",
                        data.len()
                    ),
                });
            }
            if end - begin != numel * width {
                return Err(MergeError::Integrity {
                    key,
                    message: format!(
                        "byte range holds {} bytes but shape {:?} of {} needs {}",
                        end - begin,
                        info.shape,
                        info.dtype,
                        numel * width
                    ),
                });
            }
            let raw = &data[begin..end];
            let values: Vec<f32> = if width == 4 {
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            } else {
                raw.chunks_exact(2)
                    .map(|c| half::f16::from_le_bytes(c.try_into().unwrap()).to_f32())
                    .collect()
            };
            ckpt.insert(TensorEntry::new(key, info.shape, values)?);
        }
        Ok(ckpt)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len();
    }
    offset
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| MergeError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| MergeError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedKey {
    pub key: String,
    pub reason: String,
}

/// Keys shared by every checkpoint with one common shape.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemaAlignment {
    pub common_keys: Vec<String>,
    pub matrix_keys: Vec<String>,
    pub skipped_keys: Vec<SkippedKey>,
}

impl SchemaAlignment {
    pub fn is_matrix(&self, key: &str) -> bool {
        self.matrix_keys
            .binary_search_by(|k| k.as_str().cmp(key))
            .is_ok()
    }
}

/// Aligns the pre-trained checkpoint (index 0) with the fine-tunes
/// (indices 1..=n). `linear_filter` restricts which rank-2 keys count as
/// linear layers; `None` accepts every rank-2 tensor.
pub fn align_schemas(
    pretrained: &Checkpoint,
    finetuned: &[Checkpoint],
    linear_filter: Option<&Regex>,
) -> Result<SchemaAlignment> {
    if finetuned.is_empty() {
        return Err(MergeError::Config(
            "at least one fine-tuned checkpoint is required".into(),
        ));
    }
    let all: Vec<&Checkpoint> = std::iter::once(pretrained).chain(finetuned).collect();
    let keys: BTreeSet<&String> = all.iter().flat_map(|c| c.entries.keys()).collect();

    let mut common_keys = Vec::new();
    let mut matrix_keys = Vec::new();
    let mut skipped_keys = Vec::new();
    'keys: for key in keys {
        let mut shape: Option<(usize, &Vec<usize>)> = None;
        for (idx, ckpt) in all.iter().enumerate() {
            let Some(entry) = ckpt.get(key) else {
                skipped_keys.push(SkippedKey {
                    key: key.clone(),
                    reason: format!("absent in checkpoint {idx}"),
                });
                continue 'keys;
            };
            match shape {
                None => shape = Some((idx, &entry.shape)),
                Some((first, s)) if s != &entry.shape => {
                    skipped_keys.push(SkippedKey {
                        key: key.clone(),
                        reason: format!(
                            "shape {:?} in checkpoint {first} conflicts with {:?} in checkpoint {idx}",
                            s, entry.shape
                        ),
                    });
                    continue 'keys;
                }
                Some(_) => {}
            }
        }
        let (_, s) = shape.expect("key came from some checkpoint");
        if s.len() == 2 && linear_filter.is_none_or(|re| re.is_match(key)) {
            matrix_keys.push(key.clone());
        }
        common_keys.push(key.clone());
    }

    if common_keys.is_empty() {
        return Err(MergeError::Structural(
            "no parameter is shared by every checkpoint; nothing to merge".into(),
        ));
    }
    Ok(SchemaAlignment {
        common_keys,
        matrix_keys,
        skipped_keys,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt(entries: &[(&str, Vec<usize>)]) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (k, shape) in entries {
            let n = shape.iter().product();
            c.insert_tensor(k, shape.clone(), vec![0.5; n]).unwrap();
        }
        c
    }

    /// Hand-assembled container: one tensor "w", shape [2,2], values 1..4.
    fn fixture() -> Vec<u8> {
        let header = br#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes
    }

    #[test]
    fn loads_hand_written_fixture() {
        let c = Checkpoint::from_bytes(&fixture()).unwrap();
        let w = c.get("w").unwrap();
        assert_eq!(w.shape, vec![2, 2]);
        assert_eq!(w.data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn byte_count_mismatch_is_integrity_error() {
        let header = br#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,12]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 12]);
        match Checkpoint::from_bytes(&bytes) {
            Err(MergeError::Integrity { key, .. }) => assert_eq!(key, "w"),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_data_is_integrity_error() {
        let mut bytes = fixture();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(MergeError::Integrity { .. })
        ));
    }

    #[test]
    fn malformed_header_reports_offset() {
        let header = br#"{"w": nope}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        match Checkpoint::from_bytes(&bytes) {
            Err(MergeError::Format { offset, .. }) => {
                assert!((8..8 + header.len()).contains(&offset))
            }
            other => panic!("expected format error, got {other:?}"),
        }
        match Checkpoint::from_bytes(&[1, 2, 3]) {
            Err(MergeError::Format { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("expected format error, got {other:?}"),
        }
        let mut huge = 1000u64.to_le_bytes().to_vec();
        huge.extend_from_slice(b"{}");
        assert!(matches!(
            Checkpoint::from_bytes(&huge),
            Err(MergeError::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn unsupported_dtype_is_capability_error() {
        let header = br#"{"w":{"dtype":"BF16","shape":[1],"data_offsets":[0,2]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0, 0]);
        match Checkpoint::from_bytes(&bytes) {
            Err(MergeError::Capability { dtype }) => assert_eq!(dtype, "BF16"),
            other => panic!("expected capability error, got {other:?}"),
        }
    }

    #[test]
    fn f16_is_promoted() {
        let header = br#"{"h":{"dtype":"F16","shape":[2],"data_offsets":[0,4]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&half::f16::from_f32(1.5).to_le_bytes());
        bytes.extend_from_slice(&half::f16::from_f32(-2.0).to_le_bytes());
        let c = Checkpoint::from_bytes(&bytes).unwrap();
        let h = c.get("h").unwrap();
        assert_eq!(h.dtype, Dtype::F32);
        assert_eq!(h.data, vec![1.5, -2.0]);
    }

    #[test]
    fn header_lists_keys_in_order_and_is_aligned() {
        let c = ckpt(&[("b", vec![1]), ("a", vec![2])]);
        let bytes = c.to_bytes();
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!((8 + len) % 8, 0);
        let header = std::str::from_utf8(&bytes[8..8 + len]).unwrap();
        assert!(header.find("\"a\"").unwrap() < header.find("\"b\"").unwrap());
    }

    #[test]
    fn empty_checkpoint_round_trips() {
        let c = Checkpoint::new();
        let bytes = c.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn save_load_save_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ckpt(&[("x", vec![3, 2]), ("y", vec![])]);
        c.meta.insert("format".into(), "pt".into());
        let p1 = dir.path().join("a.safetensors");
        let p2 = dir.path().join("b.safetensors");
        save_checkpoint(&c, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert!(loaded.bit_eq(&c));
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_checkpoint("/nonexistent/model.safetensors").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/model.safetensors"));
    }

    #[test]
    fn alignment_identical_schema() {
        let base = ckpt(&[("w", vec![4, 4]), ("b", vec![4])]);
        let a = align_schemas(&base, &[base.clone(), base.clone()], None).unwrap();
        assert_eq!(a.common_keys, vec!["b", "w"]);
        assert_eq!(a.matrix_keys, vec!["w"]);
        assert!(a.skipped_keys.is_empty());
    }

    #[test]
    fn alignment_missing_key() {
        let base = ckpt(&[("w", vec![4, 4]), ("b", vec![4])]);
        let partial = ckpt(&[("w", vec![4, 4])]);
        let a = align_schemas(&base, &[partial, base.clone()], None).unwrap();
        assert_eq!(a.common_keys, vec!["w"]);
        assert_eq!(a.skipped_keys[0].key, "b");
        assert_eq!(a.skipped_keys[0].reason, "absent in checkpoint 1");
    }

    #[test]
    fn alignment_shape_conflict() {
        let base = ckpt(&[("w", vec![4, 4]), ("b", vec![4])]);
        let wide = ckpt(&[("w", vec![4, 8]), ("b", vec![4])]);
        let a = align_schemas(&base, &[base.clone(), wide], None).unwrap();
        assert_eq!(a.common_keys, vec!["b"]);
        let reason = &a.skipped_keys[0].reason;
        assert!(
            reason.contains("[4, 4]") && reason.contains("[4, 8]"),
            "{reason}"
        );
    }

    #[test]
    fn alignment_filter_and_empty() {
        let base = ckpt(&[("attn.w", vec![2, 2]), ("mlp.w", vec![2, 2])]);
        let re = Regex::new("^mlp").unwrap();
        let a = align_schemas(&base, std::slice::from_ref(&base), Some(&re)).unwrap();
        assert_eq!(a.matrix_keys, vec!["mlp.w"]);
        assert_eq!(a.common_keys.len(), 2);

        let other = ckpt(&[("z", vec![1])]);
        assert!(matches!(
            align_schemas(&base, &[other], None),
            Err(MergeError::Structural(_))
        ));
        assert!(align_schemas(&base, &[], None).is_err());
    }
}
