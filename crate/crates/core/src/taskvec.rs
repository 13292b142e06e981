//! Task vectors: construction, magnitude trimming, norm-adaptive merging
//! coefficients, and the weighted combination that produces the merged update.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, SchemaAlignment, TensorEntry};
use crate::error::{MergeError, Result};
use crate::linalg::Matrix;

/// `θ_i − θ_0` over the aligned keys of one fine-tuned checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    /// 1-based task index.
    pub task_id: usize,
    pub layers: BTreeMap<String, TensorEntry>,
}

impl TaskVector {
    pub fn numel(&self) -> usize {
        self.layers.values().map(TensorEntry::numel).sum()
    }

    /// Frobenius norm of one layer, accumulated in `f64`.
    pub fn layer_norm(&self, key: &str) -> f64 {
        self.layers.get(key).map_or(0.0, |t| norm(&t.data))
    }

    /// Norm of the whole flattened task vector.
    pub fn global_norm(&self) -> f64 {
        self.layers
            .values()
            .flat_map(|t| t.data.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// The layer as an `f64` matrix; `None` unless it is rank-2.
    pub fn layer_matrix(&self, key: &str) -> Option<Matrix> {
        let t = self.layers.get(key)?;
        if !t.is_matrix() {
            return None;
        }
        Some(Matrix::from_f32(t.shape[0], t.shape[1], &t.data))
    }
}

fn norm(data: &[f32]) -> f64 {
    data.iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

pub fn compute_task_vector(
    pretrained: &Checkpoint,
    finetuned: &Checkpoint,
    alignment: &SchemaAlignment,
    task_id: usize,
) -> Result<TaskVector> {
    let mut layers = BTreeMap::new();
    for key in &alignment.common_keys {
        let (Some(base), Some(tuned)) = (pretrained.get(key), finetuned.get(key)) else {
            return Err(MergeError::Structural(format!(
                "aligned key `{key}` missing from checkpoint for task {task_id}"
            )));
        };
        if base.shape != tuned.shape {
            return Err(MergeError::Structural(format!(
                "aligned key `{key}` has shape {:?} vs {:?} for task {task_id}",
                base.shape, tuned.shape
            )));
        }
        let diff: Vec<f32> = tuned
            .data
            .iter()
            .zip(&base.data)
            .map(|(t, b)| t - b)
            .collect();
        if let Some(pos) = diff.iter().position(|v| !v.is_finite()) {
            return Err(MergeError::data(
                key.clone(),
                format!("task {task_id} difference is non-finite at flat index {pos}"),
            ));
        }
        layers.insert(
            key.clone(),
            TensorEntry::new(key.clone(), base.shape.clone(), diff)?,
        );
    }
    Ok(TaskVector { task_id, layers })
}

/// Number of elements kept out of `total` at `keep_fraction`, rounding up
/// but ignoring floating-point fuzz such as `0.3 * 10 = 3.0000000000000004`.
pub fn keep_count(total: usize, keep_fraction: f64) -> usize {
    let raw = keep_fraction * total as f64;
    let rounded = raw.round();
    let count = if (raw - rounded).abs() <= 1e-9 * raw.max(1.0) {
        rounded
    } else {
        raw.ceil()
    };
    (count as usize).min(total)
}

/// Keeps the `ceil(keep_fraction · total)` largest-magnitude elements across
/// the whole task vector and zeroes the rest. Ties go to the smaller
/// `(key, flat index)` pair.
pub fn trim_by_magnitude(tv: &TaskVector, keep_fraction: f64) -> Result<TaskVector> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(MergeError::Config(format!(
            "trim keep fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    let total = tv.numel();
    let keep = keep_count(total, keep_fraction);
    if keep == total {
        return Ok(tv.clone());
    }

    // (layer ordinal, flat index, |value|)
    let mut ranked: Vec<(u32, u32, f32)> = Vec::with_capacity(total);
    for (ordinal, t) in tv.layers.values().enumerate() {
        for (i, v) in t.data.iter().enumerate() {
            ranked.push((ordinal as u32, i as u32, v.abs()));
        }
    }
    let order = |a: &(u32, u32, f32), b: &(u32, u32, f32)| -> Ordering {
        b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
    };
    if keep > 0 {
        ranked.select_nth_unstable_by(keep - 1, order);
    }

    let mut layers: Vec<TensorEntry> = tv
        .layers
        .values()
        .map(|t| TensorEntry {
            data: vec![0.0; t.numel()],
            ..t.clone()
        })
        .collect();
    let sources: Vec<&TensorEntry> = tv.layers.values().collect();
    for &(ordinal, idx, _) in &ranked[..keep] {
        let (o, i) = (ordinal as usize, idx as usize);
        layers[o].data[i] = sources[o].data[i];
    }
    Ok(TaskVector {
        task_id: tv.task_id,
        layers: layers.into_iter().map(|t| (t.key.clone(), t)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaGranularity {
    Uniform,
    TaskWise,
    LayerWise,
}

/// Merging coefficients per `(task_id, key)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaTable {
    pub granularity: LambdaGranularity,
    pub eta: f64,
    pub values: BTreeMap<(usize, String), f64>,
}

impl LambdaTable {
    pub fn get(&self, task_id: usize, key: &str) -> f64 {
        self.values
            .get(&(task_id, key.to_string()))
            .copied()
            .unwrap_or(0.0)
    }

    /// Builds a uniform table with `lambda` for every task and key.
    pub fn uniform(task_vectors: &[TaskVector], keys: &[String], lambda: f64) -> LambdaTable {
        let values = task_vectors
            .iter()
            .flat_map(|tv| keys.iter().map(move |k| ((tv.task_id, k.clone()), lambda)))
            .collect();
        LambdaTable {
            granularity: LambdaGranularity::Uniform,
            eta: lambda,
            values,
        }
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.values().sum::<f64>() / self.values.len() as f64
    }
}

/// Norm-adaptive coefficients: `η / ‖τ_i^l‖_F` per layer (layer-wise),
/// `η / ‖τ_i‖` replicated over keys (task-wise), or `η` everywhere (uniform).
/// A zero norm yields a zero coefficient.
pub fn compute_lambda(
    task_vectors: &[TaskVector],
    eta: f64,
    granularity: LambdaGranularity,
    alignment: &SchemaAlignment,
) -> Result<LambdaTable> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(MergeError::Config(format!(
            "eta must be positive, got {eta}"
        )));
    }
    let ratio = |n: f64| if n > 0.0 { eta / n } else { 0.0 };
    let mut values = BTreeMap::new();
    for tv in task_vectors {
        let task_norm = match granularity {
            LambdaGranularity::TaskWise => Some(tv.global_norm()),
            _ => None,
        };
        for key in &alignment.common_keys {
            let lambda = match granularity {
                LambdaGranularity::Uniform => eta,
                LambdaGranularity::TaskWise => ratio(task_norm.unwrap_or(0.0)),
                LambdaGranularity::LayerWise => ratio(tv.layer_norm(key)),
            };
            values.insert((tv.task_id, key.clone()), lambda);
        }
    }
    Ok(LambdaTable {
        granularity,
        eta,
        values,
    })
}

/// Merged update for one key, kept in `f64` until it is added to `θ_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLayer {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// `Σ_i λ_i^l (τ_i^l + Δ^l)` for every key, with `Δ^l = 0` where absent.
pub fn combine(
    task_vectors: &[TaskVector],
    lambdas: &LambdaTable,
    delta: Option<&BTreeMap<String, Matrix>>,
) -> Result<BTreeMap<String, CombinedLayer>> {
    let Some(first) = task_vectors.first() else {
        return Ok(BTreeMap::new());
    };
    let mut out = BTreeMap::new();
    for (key, proto) in &first.layers {
        let d = delta.and_then(|d| d.get(key));
        if let Some(d) = d {
            if proto.shape.len() != 2 || d.shape() != (proto.shape[0], proto.shape[1]) {
                return Err(MergeError::Structural(format!(
                    "delta for `{key}` has shape {:?} but the layer is {:?}",
                    d.shape(),
                    proto.shape
                )));
            }
        }
        let mut acc = vec![0.0f64; proto.numel()];
        for tv in task_vectors {
            let t = tv
                .layers
                .get(key)
                .filter(|t| t.shape == proto.shape)
                .ok_or_else(|| {
                    MergeError::Structural(format!(
                        "task {} has no layer `{key}` of shape {:?}",
                        tv.task_id, proto.shape
                    ))
                })?;
            let lambda = lambdas.get(tv.task_id, key);
            match d {
                Some(d) => {
                    for ((a, &x), &dx) in acc.iter_mut().zip(&t.data).zip(d.as_slice()) {
                        *a += lambda * (x as f64 + dx);
                    }
                }
                None => {
                    for (a, &x) in acc.iter_mut().zip(&t.data) {
                        *a += lambda * (x as f64 + 0.0);
                    }
                }
            }
        }
        out.insert(
            key.clone(),
            CombinedLayer {
                shape: proto.shape.clone(),
                data: acc,
            },
        );
    }
    if let Some(delta) = delta {
        if let Some(stray) = delta.keys().find(|k| !first.layers.contains_key(*k)) {
            return Err(MergeError::Structural(format!(
                "delta provided for unknown key `{stray}`"
            )));
        }
    }
    Ok(out)
}

/// `θ_0 + update` on the combined keys; every other key is copied from
/// `θ_0` untouched.
pub fn apply_update(
    pretrained: &Checkpoint,
    update: &BTreeMap<String, CombinedLayer>,
) -> Result<Checkpoint> {
    let mut merged = pretrained.clone();
    for (key, layer) in update {
        let entry = merged.entries.get_mut(key).ok_or_else(|| {
            MergeError::Structural(format!(
                "update key `{key}` missing from the base checkpoint"
            ))
        })?;
        if entry.shape != layer.shape {
            return Err(MergeError::Structural(format!(
                "update for `{key}` has shape {:?} but the base is {:?}",
                layer.shape, entry.shape
            )));
        }
        for (w, u) in entry.data.iter_mut().zip(&layer.data) {
            *w = (*w as f64 + u) as f32;
        }
    }
    Ok(merged)
}
