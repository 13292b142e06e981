//! Merge strategies: weight averaging, task arithmetic, and the full
//! adaptive projective pipeline, all producing a checkpoint plus a report.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{align_schemas, Checkpoint, SchemaAlignment, SkippedKey};
use crate::error::{MergeError, Result};
use crate::linalg::Matrix;
use crate::objective::{optimize_layer_with, AdamParams, LayerProblem, ProjectionMode, StepRule};
use crate::subspace::{
    build_shared_basis, explained_fraction, extract_task_basis, project, rank_from_ratio,
};
use crate::taskvec::{
    apply_update, combine, compute_lambda, compute_task_vector, trim_by_magnitude,
    LambdaGranularity, LambdaTable, TaskVector,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Average,
    TaskArithmetic,
    Doge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub method: MergeMethod,
    /// Global scale of the norm-adaptive coefficients.
    pub eta: f64,
    /// Coefficient of the task-arithmetic baseline.
    pub uniform_lambda: f64,
    pub lambda_granularity: LambdaGranularity,
    /// Fraction of each task vector's elements kept by magnitude trimming.
    pub trim_fraction: f64,
    /// Trim before computing coefficients (the default) or after.
    pub trim_before_lambda: bool,
    /// Per-task basis size as a fraction of `min(rows, cols)`; unset means
    /// `1 / n_tasks`.
    pub k_ratio: Option<f64>,
    pub k_share_ratio: f64,
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub projection_mode: ProjectionMode,
    /// Regex selecting which rank-2 keys count as linear layers.
    pub linear_layer_filter: Option<String>,
}

impl Default for MergeConfig {
    fn default() -> Self {
        let adam = AdamParams::default();
        MergeConfig {
            method: MergeMethod::Doge,
            eta: 0.07,
            uniform_lambda: 0.3,
            lambda_granularity: LambdaGranularity::LayerWise,
            trim_fraction: 0.3,
            trim_before_lambda: true,
            k_ratio: None,
            k_share_ratio: 1.0 / 6.0,
            iterations: 400,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            projection_mode: ProjectionMode::Orthogonal,
            linear_layer_filter: None,
        }
    }
}

impl MergeConfig {
    pub fn task_arithmetic(lambda: f64) -> Self {
        MergeConfig {
            method: MergeMethod::TaskArithmetic,
            uniform_lambda: lambda,
            ..Default::default()
        }
    }

    pub fn average() -> Self {
        MergeConfig {
            method: MergeMethod::Average,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, field: &str, value: impl std::fmt::Display, range: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(MergeError::Config(format!(
                    "`{field}` = {value} must be {range}"
                )))
            }
        }
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        check(
            self.eta > 0.0 && self.eta.is_finite(),
            "eta",
            self.eta,
            "positive",
        )?;
        check(
            self.uniform_lambda >= 0.0 && self.uniform_lambda.is_finite(),
            "uniform_lambda",
            self.uniform_lambda,
            "non-negative",
        )?;
        check(
            unit(self.trim_fraction),
            "trim_fraction",
            self.trim_fraction,
            "in (0, 1]",
        )?;
        if let Some(k) = self.k_ratio {
            check(unit(k), "k_ratio", k, "in (0, 1]")?;
        }
        check(
            unit(self.k_share_ratio),
            "k_share_ratio",
            self.k_share_ratio,
            "in (0, 1]",
        )?;
        check(
            self.lr > 0.0 && self.lr.is_finite(),
            "lr",
            self.lr,
            "positive",
        )?;
        check(
            (0.0..1.0).contains(&self.beta1),
            "beta1",
            self.beta1,
            "in [0, 1)",
        )?;
        check(
            (0.0..1.0).contains(&self.beta2),
            "beta2",
            self.beta2,
            "in [0, 1)",
        )?;
        check(self.epsilon > 0.0, "epsilon", self.epsilon, "positive")?;
        self.linear_filter()?;
        Ok(())
    }

    pub fn linear_filter(&self) -> Result<Option<Regex>> {
        self.linear_layer_filter
            .as_deref()
            .map(|p| {
                Regex::new(p).map_err(|e| {
                    MergeError::Config(format!("`linear_layer_filter` is not a valid pattern: {e}"))
                })
            })
            .transpose()
    }

    fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlobalReport {
    pub method: MergeMethod,
    pub config: MergeConfig,
    pub n_tasks: usize,
    pub common_keys: usize,
    pub matrix_keys: usize,
    pub skipped_keys: Vec<SkippedKey>,
    pub mean_lambda: f64,
    pub aborted_layers: usize,
    pub output_path: Option<String>,
    pub warnings: Vec<String>,
    /// Kept out of the JSON document so that repeated runs emit identical bytes.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub key: String,
    pub shape: [usize; 2],
    pub k: usize,
    pub k_share: usize,
    pub lambdas: Vec<f64>,
    /// Leading singular value of each task's layer.
    pub task_top_singular_values: Vec<f64>,
    /// Singular-value mass captured by each task's rank-k basis.
    pub task_explained_fractions: Vec<f64>,
    /// Spectrum of the concatenated per-task bases.
    pub shared_singular_values: Vec<f64>,
    pub shared_explained_fraction: f64,
    pub iterations_run: usize,
    pub loss_first: Option<f64>,
    pub loss_last: Option<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub max_residual: f64,
    pub delta_norm: f64,
    /// `‖Proj_shared(Δ)‖_F` of the applied modification.
    pub delta_shared_norm: f64,
    pub aborted: Option<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeReport {
    pub global: GlobalReport,
    pub layers: Vec<LayerReport>,
}

impl MergeReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn layer(&self, key: &str) -> Option<&LayerReport> {
        self.layers.iter().find(|l| l.key == key)
    }
}

fn base_report(
    config: &MergeConfig,
    alignment: &SchemaAlignment,
    n_tasks: usize,
    mean_lambda: f64,
) -> GlobalReport {
    GlobalReport {
        method: config.method,
        config: config.clone(),
        n_tasks,
        common_keys: alignment.common_keys.len(),
        matrix_keys: alignment.matrix_keys.len(),
        skipped_keys: alignment.skipped_keys.clone(),
        mean_lambda,
        aborted_layers: 0,
        output_path: None,
        warnings: Vec::new(),
        wall_time_secs: 0.0,
    }
}

fn task_vectors(
    pretrained: &Checkpoint,
    finetuned: &[Checkpoint],
    alignment: &SchemaAlignment,
) -> Result<Vec<TaskVector>> {
    finetuned
        .iter()
        .enumerate()
        .map(|(i, ft)| compute_task_vector(pretrained, ft, alignment, i + 1))
        .collect()
}

/// Element-wise mean of the fine-tuned checkpoints on the common keys.
pub fn merge_average(
    pretrained: &Checkpoint,
    finetuned: &[Checkpoint],
) -> Result<(Checkpoint, MergeReport)> {
    let started = Instant::now();
    let alignment = align_schemas(pretrained, finetuned, None)?;
    let mut merged = pretrained.clone();
    let n = finetuned.len() as f64;
    for key in &alignment.common_keys {
        let entry = merged.entries.get_mut(key).expect("aligned key present");
        let mut acc = vec![0.0f64; entry.numel()];
        for ft in finetuned {
            for (a, &v) in acc.iter_mut().zip(&ft.entries[key].data) {
                *a += v as f64;
            }
        }
        for (w, a) in entry.data.iter_mut().zip(acc) {
            *w = (a / n) as f32;
        }
    }
    let mut global = base_report(
        &MergeConfig::average(),
        &alignment,
        finetuned.len(),
        1.0 / n,
    );
    global.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((
        merged,
        MergeReport {
            global,
            layers: Vec::new(),
        },
    ))
}

/// `θ_0 + λ Σ_i τ_i` on the common keys.
pub fn merge_task_arithmetic(
    pretrained: &Checkpoint,
    finetuned: &[Checkpoint],
    lambda: f64,
) -> Result<(Checkpoint, MergeReport)> {
    let started = Instant::now();
    let config = MergeConfig::task_arithmetic(lambda);
    config.validate()?;
    let alignment = align_schemas(pretrained, finetuned, None)?;
    let tvs = task_vectors(pretrained, finetuned, &alignment)?;
    let lambdas = LambdaTable::uniform(&tvs, &alignment.common_keys, lambda);
    let update = combine(&tvs, &lambdas, None)?;
    let merged = apply_update(pretrained, &update)?;
    let mut global = base_report(&config, &alignment, finetuned.len(), lambda);
    global.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((
        merged,
        MergeReport {
            global,
            layers: Vec::new(),
        },
    ))
}

struct LayerResult {
    delta: Matrix,
    report: LayerReport,
}

fn process_layer(
    key: &str,
    tvs: &[TaskVector],
    lambdas: &LambdaTable,
    config: &MergeConfig,
) -> Result<LayerResult> {
    let taus: Vec<Matrix> = tvs
        .iter()
        .map(|tv| {
            tv.layer_matrix(key).ok_or_else(|| {
                MergeError::Structural(format!("`{key}` is not a matrix in task {}", tv.task_id))
            })
        })
        .collect::<Result<_>>()?;
    let (rows, cols) = taus[0].shape();
    let n = tvs.len();
    let k_ratio = config.k_ratio.unwrap_or(1.0 / n as f64);
    let k = rank_from_ratio(rows, cols, k_ratio);
    let k_share = rank_from_ratio(rows, cols, config.k_share_ratio);

    let bases = taus
        .iter()
        .zip(tvs)
        .map(|(tau, tv)| extract_task_basis(key, tau, k, tv.task_id))
        .collect::<Result<Vec<_>>>()?;
    let (shared, clamp_warning) = build_shared_basis(&bases, k_share)?;
    let mut warnings: Vec<String> = clamp_warning.into_iter().collect();
    if cols > rows * 4 {
        warnings.push(format!(
            "layer is much wider than tall ({rows}x{cols}); bases live in the {rows}-dimensional row space"
        ));
    }

    let layer_lambdas: Vec<f64> = tvs.iter().map(|tv| lambdas.get(tv.task_id, key)).collect();
    let problem = LayerProblem::new(
        key,
        taus,
        layer_lambdas.clone(),
        shared.clone(),
        config.projection_mode,
    )?;
    let outcome = optimize_layer_with(problem, config.iterations, StepRule::Adam(config.adam()))?;
    let delta = if outcome.aborted.is_some() {
        Matrix::zeros(rows, cols)
    } else {
        outcome.delta
    };
    let delta_shared_norm = project(&shared, &delta)?.frobenius();

    let report = LayerReport {
        key: key.to_string(),
        shape: [rows, cols],
        k,
        k_share: shared.rank(),
        lambdas: layer_lambdas,
        task_top_singular_values: bases
            .iter()
            .map(|b| b.singular_values.first().copied().unwrap_or(0.0))
            .collect(),
        task_explained_fractions: bases.iter().map(|b| b.explained_fraction()).collect(),
        shared_explained_fraction: explained_fraction(&shared.singular_values, shared.rank()),
        shared_singular_values: shared.singular_values.clone(),
        iterations_run: outcome.trace.len(),
        loss_first: outcome.trace.losses.first().copied(),
        loss_last: outcome.trace.losses.last().copied(),
        initial_loss: outcome.initial_loss,
        final_loss: outcome.final_loss,
        max_residual: outcome.trace.max_residual(),
        delta_norm: delta.frobenius(),
        delta_shared_norm,
        aborted: outcome.aborted,
        warnings,
    };
    Ok(LayerResult { delta, report })
}

/// The full pipeline: task vectors, trimming, norm-adaptive coefficients,
/// per-layer shared subspaces and projected optimisation of `Δ`, then
/// `θ_0 + Σ_i λ_i (τ_i + Δ)`. Non-matrix keys get `Δ = 0`.
pub fn merge_doge(
    pretrained: &Checkpoint,
    finetuned: &[Checkpoint],
    config: &MergeConfig,
) -> Result<(Checkpoint, MergeReport)> {
    let started = Instant::now();
    config.validate()?;
    let filter = config.linear_filter()?;
    let alignment = align_schemas(pretrained, finetuned, filter.as_ref())?;
    let raw = task_vectors(pretrained, finetuned, &alignment)?;

    let trim = |tvs: &[TaskVector]| -> Result<Vec<TaskVector>> {
        tvs.iter()
            .map(|tv| trim_by_magnitude(tv, config.trim_fraction))
            .collect()
    };
    let (tvs, lambdas) = if config.trim_before_lambda {
        let trimmed = trim(&raw)?;
        let lambdas = compute_lambda(&trimmed, config.eta, config.lambda_granularity, &alignment)?;
        (trimmed, lambdas)
    } else {
        let lambdas = compute_lambda(&raw, config.eta, config.lambda_granularity, &alignment)?;
        (trim(&raw)?, lambdas)
    };
    drop(raw);

    let results = alignment
        .matrix_keys
        .par_iter()
        .map(|key| process_layer(key, &tvs, &lambdas, config))
        .collect::<Result<Vec<_>>>()?;

    let mut deltas = BTreeMap::new();
    let mut layers = Vec::with_capacity(results.len());
    for r in results {
        deltas.insert(r.report.key.clone(), r.delta);
        layers.push(r.report);
    }
    let update = combine(&tvs, &lambdas, Some(&deltas))?;
    let merged = apply_update(pretrained, &update)?;

    let mut global = base_report(config, &alignment, finetuned.len(), lambdas.mean());
    global.aborted_layers = layers.iter().filter(|l| l.aborted.is_some()).count();
    global.warnings = layers
        .iter()
        .flat_map(|l| l.warnings.iter().map(move |w| format!("{}: {w}", l.key)))
        .collect();
    if finetuned.len() == 1 {
        global
            .warnings
            .push("only one fine-tuned checkpoint; merge is degenerate".into());
    }
    global.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((merged, MergeReport { global, layers }))
}

/// Dispatches on `config.method`.
pub fn merge(
    pretrained: &Checkpoint,
    finetuned: &[Checkpoint],
    config: &MergeConfig,
) -> Result<(Checkpoint, MergeReport)> {
    config.validate()?;
    let (merged, mut report) = match config.method {
        MergeMethod::Average => merge_average(pretrained, finetuned)?,
        MergeMethod::TaskArithmetic => {
            merge_task_arithmetic(pretrained, finetuned, config.uniform_lambda)?
        }
        MergeMethod::Doge => return merge_doge(pretrained, finetuned, config),
    };
    report.global.config = config.clone();
    Ok((merged, report))
}
