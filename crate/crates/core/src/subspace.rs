//! Per-task and shared subspace bases, and projections onto them.

use serde::Serialize;

use crate::error::{MergeError, Result};
use crate::linalg::{svd, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisSource {
    PerTask(usize),
    Shared,
}

/// Orthonormal columns spanning a subspace of one layer's column space.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    pub key: String,
    pub columns: Matrix,
    pub source: BasisSource,
    /// Full spectrum of the SVD the basis was cut from.
    pub singular_values: Vec<f64>,
}

impl SubspaceBasis {
    pub fn rows(&self) -> usize {
        self.columns.rows()
    }

    pub fn rank(&self) -> usize {
        self.columns.cols()
    }

    /// Fraction of the source spectrum's singular-value mass retained by the
    /// basis.
    pub fn explained_fraction(&self) -> f64 {
        explained_fraction(&self.singular_values, self.rank())
    }
}

pub fn explained_fraction(singular_values: &[f64], k: usize) -> f64 {
    let total: f64 = singular_values.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    singular_values.iter().take(k).sum::<f64>() / total
}

/// Subspace size for a layer: `floor(ratio · min(rows, cols))`, at least 1.
pub fn rank_from_ratio(rows: usize, cols: usize, ratio: f64) -> usize {
    let full = rows.min(cols);
    let raw = ratio * full as f64;
    let k = (raw + 1e-9 * raw.max(1.0)).floor() as usize;
    k.clamp(1, full.max(1))
}

/// The leading `k` left singular vectors of `tau`.
pub fn extract_task_basis(
    key: &str,
    tau: &Matrix,
    k: usize,
    task_id: usize,
) -> Result<SubspaceBasis> {
    let full = tau.rows().min(tau.cols());
    if k == 0 || k > full {
        return Err(MergeError::Config(format!(
            "basis size {k} for `{key}` must lie in [1, {full}]"
        )));
    }
    let decomposition = svd(tau).map_err(|e| rekey(e, key))?;
    Ok(SubspaceBasis {
        key: key.to_string(),
        columns: decomposition.u.leading_columns(k),
        source: BasisSource::PerTask(task_id),
        singular_values: decomposition.singular_values,
    })
}

/// Deduplicates the concatenated per-task bases with a second SVD and keeps
/// the leading `k_share` directions. Returns a warning when `k_share` had to
/// be clamped.
pub fn build_shared_basis(
    per_task: &[SubspaceBasis],
    k_share: usize,
) -> Result<(SubspaceBasis, Option<String>)> {
    let Some(first) = per_task.first() else {
        return Err(MergeError::Structural("no per-task bases to share".into()));
    };
    let key = first.key.clone();
    if let Some(bad) = per_task.iter().find(|b| b.rows() != first.rows()) {
        return Err(MergeError::Structural(format!(
            "bases for `{key}` disagree on row count ({} vs {})",
            first.rows(),
            bad.rows()
        )));
    }
    if k_share == 0 {
        return Err(MergeError::Config(format!(
            "shared basis size for `{key}` must be positive"
        )));
    }
    let parts: Vec<&Matrix> = per_task.iter().map(|b| &b.columns).collect();
    let stacked = Matrix::hstack(&parts);
    let limit = stacked.rows().min(stacked.cols());
    let mut warning = None;
    let k = if k_share > limit {
        warning = Some(format!(
            "shared basis size {k_share} for `{key}` clamped to {limit} (concatenated basis is {}x{})",
            stacked.rows(),
            stacked.cols()
        ));
        limit
    } else {
        k_share
    };
    let decomposition = svd(&stacked).map_err(|e| rekey(e, &key))?;
    Ok((
        SubspaceBasis {
            key,
            columns: decomposition.u.leading_columns(k),
            source: BasisSource::Shared,
            singular_values: decomposition.singular_values,
        },
        warning,
    ))
}

fn check_rows(basis: &SubspaceBasis, a: &Matrix) -> Result<()> {
    if basis.rows() != a.rows() {
        return Err(MergeError::Structural(format!(
            "cannot project a {}x{} matrix onto a basis with {} rows (`{}`)",
            a.rows(),
            a.cols(),
            basis.rows(),
            basis.key
        )));
    }
    Ok(())
}

/// `B Bᵀ A`
pub fn project(basis: &SubspaceBasis, a: &Matrix) -> Result<Matrix> {
    check_rows(basis, a)?;
    let coeffs = basis.columns.t_matmul(a);
    Ok(basis.columns.matmul(&coeffs))
}

/// `A − B Bᵀ A`
pub fn project_out(basis: &SubspaceBasis, a: &Matrix) -> Result<Matrix> {
    Ok(a.sub(&project(basis, a)?))
}

fn rekey(err: MergeError, key: &str) -> MergeError {
    match err {
        MergeError::Data { message, .. } => MergeError::data(key, message),
        other => other,
    }
}
