//! Synthetic multi-task least-squares suites.
//!
//! Each task is a linear regression whose expert is the closed-form
//! least-squares solution, so the per-task loss gap between a merged model and
//! the expert can be computed exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{MergeError, Result};
use crate::linalg::{solve_spd, Matrix};
use crate::merge::{merge, merge_doge, MergeConfig, MergeMethod};
use crate::subspace::explained_fraction;

const RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub n_tasks: usize,
    /// Input dimension.
    pub d: usize,
    /// Output dimension.
    pub m: usize,
    /// Samples per task.
    pub s: usize,
    /// Weight of the shared perturbation in every task's target map.
    pub overlap: f64,
    pub noise_std: f64,
    /// Standard deviation of the shared and per-task weight perturbations.
    pub task_scale: f64,
    /// 1 for a single linear map, 2 for two stacked maps.
    pub layers: usize,
    /// Width of the hidden layer when `layers == 2`.
    pub hidden: usize,
    /// Adds a bias vector per layer (a non-matrix parameter).
    pub bias: bool,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            n_tasks: 8,
            d: 64,
            m: 32,
            s: 256,
            overlap: 0.5,
            noise_std: 0.01,
            task_scale: 0.01,
            layers: 1,
            hidden: 32,
            bias: false,
            seed: 0,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(MergeError::Config(msg));
        if self.n_tasks == 0 || self.d == 0 || self.m == 0 || self.s == 0 {
            return fail("suite dimensions `n_tasks`, `d`, `m`, `s` must all be at least 1".into());
        }
        if !(1..=2).contains(&self.layers) {
            return fail(format!("`layers` = {} must be 1 or 2", self.layers));
        }
        if self.layers == 2 && self.hidden == 0 {
            return fail("`hidden` must be at least 1".into());
        }
        let unknowns = self.solved_input_dim() + usize::from(self.bias);
        if self.s < unknowns {
            return fail(format!(
                "`s` = {} samples cannot determine {unknowns} coefficients per output",
                self.s
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return fail(format!("`overlap` = {} must lie in [0, 1]", self.overlap));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!(
                "`noise_std` = {} must be non-negative",
                self.noise_std
            ));
        }
        if !(self.task_scale >= 0.0 && self.task_scale.is_finite()) {
            return fail(format!(
                "`task_scale` = {} must be non-negative",
                self.task_scale
            ));
        }
        Ok(())
    }

    /// Input width of the layer the expert solves in closed form.
    fn solved_input_dim(&self) -> usize {
        if self.layers == 2 {
            self.hidden
        } else {
            self.d
        }
    }

    /// `(input, output)` per layer.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        if self.layers == 2 {
            vec![(self.d, self.hidden), (self.hidden, self.m)]
        } else {
            vec![(self.d, self.m)]
        }
    }
}

pub fn weight_key(layer: usize) -> String {
    format!("layers.{layer}.weight")
}

pub fn bias_key(layer: usize) -> String {
    format!("layers.{layer}.bias")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: MatrixRecord,
    pub y: MatrixRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Matrix> for MatrixRecord {
    fn from(m: &Matrix) -> Self {
        MatrixRecord {
            rows: m.rows(),
            cols: m.cols(),
            data: m.as_slice().to_vec(),
        }
    }
}

impl MatrixRecord {
    pub fn to_matrix(&self) -> Result<Matrix> {
        if self.rows * self.cols != self.data.len() {
            return Err(MergeError::Structural(format!(
                "{}x{} matrix record holds {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(Matrix::from_vec(self.rows, self.cols, self.data.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// A linear model as stored in a checkpoint: per layer a `[out, in]` weight
/// and optionally an `[out]` bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub tensors: std::collections::BTreeMap<String, TensorRecord>,
}

impl ModelRecord {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        for (k, t) in &self.tensors {
            c.insert_tensor(k, t.shape.clone(), t.data.clone())?;
        }
        Ok(c)
    }

    fn from_checkpoint(c: &Checkpoint) -> Self {
        ModelRecord {
            tensors: c
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        TensorRecord {
                            shape: e.shape.clone(),
                            data: e.data.clone(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Everything needed to re-evaluate merges: data, pre-trained model, experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSuite {
    pub config: SuiteConfig,
    pub datasets: Vec<Dataset>,
    pub pretrained: ModelRecord,
    pub experts: Vec<ModelRecord>,
}

struct Gaussian {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Gaussian {
    fn new(seed: u64) -> Self {
        Gaussian {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, 1.0).expect("unit normal"),
        }
    }

    fn matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| std * self.normal.sample(&mut self.rng))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

/// One linear layer in `f64`: `y = x Wᵀ + b`.
#[derive(Debug, Clone)]
struct Layer {
    weight: Matrix,
    bias: Option<Matrix>,
}

impl Layer {
    fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.weight.transpose());
        if let Some(b) = &self.bias {
            for r in 0..y.rows() {
                for c in 0..y.cols() {
                    y.set(r, c, y.get(r, c) + b.get(0, c));
                }
            }
        }
        y
    }

    /// Perturbs towards a task: `self + overlap · shared + (1 − overlap) · own`.
    fn blend(&self, shared: &Layer, own: &Layer, overlap: f64) -> Layer {
        let mix = |base: &Matrix, s: &Matrix, o: &Matrix| {
            base.add(&s.scale(overlap)).add(&o.scale(1.0 - overlap))
        };
        Layer {
            weight: mix(&self.weight, &shared.weight, &own.weight),
            bias: match (&self.bias, &shared.bias, &own.bias) {
                (Some(b), Some(s), Some(o)) => Some(mix(b, s, o)),
                _ => None,
            },
        }
    }
}

fn draw_layer(g: &mut Gaussian, input: usize, output: usize, std: f64, bias: bool) -> Layer {
    Layer {
        weight: g.matrix(output, input, std),
        bias: bias.then(|| g.matrix(1, output, std)),
    }
}

fn forward(layers: &[Layer], x: &Matrix) -> Matrix {
    layers.iter().fold(x.clone(), |h, l| l.forward(&h))
}

/// Ridge-regularised least squares `argmin ‖[X 1] Θ − Y‖²` via the normal
/// equations.
fn least_squares(x: &Matrix, y: &Matrix, bias: bool) -> Result<Layer> {
    let (s, d) = x.shape();
    let width = d + usize::from(bias);
    let mut design = Matrix::zeros(s, width);
    for r in 0..s {
        for c in 0..d {
            design.set(r, c, x.get(r, c));
        }
        if bias {
            design.set(r, d, 1.0);
        }
    }
    let mut gram = design.t_matmul(&design);
    for i in 0..width {
        gram.set(i, i, gram.get(i, i) + RIDGE);
    }
    let theta = solve_spd(&gram, &design.t_matmul(y))?;
    let m = y.cols();
    let mut weight = Matrix::zeros(m, d);
    for o in 0..m {
        for i in 0..d {
            weight.set(o, i, theta.get(i, o));
        }
    }
    let bias = bias.then(|| Matrix::from_vec(1, m, (0..m).map(|o| theta.get(d, o)).collect()));
    Ok(Layer { weight, bias })
}

fn layers_to_checkpoint(layers: &[Layer]) -> Result<Checkpoint> {
    let mut c = Checkpoint::new();
    for (i, l) in layers.iter().enumerate() {
        let (r, cols) = l.weight.shape();
        c.insert_tensor(
            &weight_key(i),
            vec![r, cols],
            l.weight.as_slice().iter().map(|&v| v as f32).collect(),
        )?;
        if let Some(b) = &l.bias {
            c.insert_tensor(
                &bias_key(i),
                vec![b.cols()],
                b.as_slice().iter().map(|&v| v as f32).collect(),
            )?;
        }
    }
    Ok(c)
}

fn checkpoint_to_layers(c: &Checkpoint, config: &SuiteConfig) -> Result<Vec<Layer>> {
    config
        .layer_dims()
        .iter()
        .enumerate()
        .map(|(i, &(input, output))| {
            let key = weight_key(i);
            let w = c
                .get(&key)
                .ok_or_else(|| MergeError::Structural(format!("checkpoint lacks `{key}`")))?;
            if w.shape != [output, input] {
                return Err(MergeError::Structural(format!(
                    "`{key}` has shape {:?}, expected [{output}, {input}]",
                    w.shape
                )));
            }
            let bias = if config.bias {
                let key = bias_key(i);
                let b = c
                    .get(&key)
                    .ok_or_else(|| MergeError::Structural(format!("checkpoint lacks `{key}`")))?;
                if b.shape != [output] {
                    return Err(MergeError::Structural(format!(
                        "`{key}` has shape {:?}, expected [{output}]",
                        b.shape
                    )));
                }
                Some(Matrix::from_f32(1, output, &b.data))
            } else {
                None
            };
            Ok(Layer {
                weight: Matrix::from_f32(output, input, &w.data),
                bias,
            })
        })
        .collect()
}

pub fn generate_suite(config: &SuiteConfig) -> Result<SyntheticSuite> {
    config.validate()?;
    let mut g = Gaussian::new(config.seed);
    let dims = config.layer_dims();

    let base: Vec<Layer> = dims
        .iter()
        .map(|&(i, o)| draw_layer(&mut g, i, o, 1.0 / (i as f64).sqrt(), config.bias))
        .collect();
    let shared: Vec<Layer> = dims
        .iter()
        .map(|&(i, o)| draw_layer(&mut g, i, o, config.task_scale, config.bias))
        .collect();

    let mut datasets = Vec::with_capacity(config.n_tasks);
    let mut experts = Vec::with_capacity(config.n_tasks);
    let noise = config.noise_std;
    for _ in 0..config.n_tasks {
        let target: Vec<Layer> = base
            .iter()
            .zip(&shared)
            .zip(&dims)
            .map(|((b, s), &(i, o))| {
                let own = draw_layer(&mut g, i, o, config.task_scale, config.bias);
                b.blend(s, &own, config.overlap)
            })
            .collect();
        let x = g.matrix(config.s, config.d, 1.0);
        let y = forward(&target, &x).add(&g.matrix(config.s, config.m, noise));

        // All but the last layer are taken from the target map; the last is
        // the closed-form least-squares optimum given their features.
        let mut expert: Vec<Layer> = target[..target.len() - 1].to_vec();
        let features = forward(&expert, &x);
        expert.push(least_squares(&features, &y, config.bias)?);

        datasets.push(Dataset {
            x: (&x).into(),
            y: (&y).into(),
        });
        experts.push(ModelRecord::from_checkpoint(&layers_to_checkpoint(
            &expert,
        )?));
    }

    Ok(SyntheticSuite {
        config: config.clone(),
        datasets,
        pretrained: ModelRecord::from_checkpoint(&layers_to_checkpoint(&base)?),
        experts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapResult {
    /// `L_j(merged) − L_j(expert_j)` per task.
    pub gaps: Vec<f64>,
    pub mean_gap: f64,
    /// `Σ_j gap_j²`.
    pub squared_gap_sum: f64,
    pub task_losses: Vec<f64>,
    pub expert_losses: Vec<f64>,
    pub mean_task_loss: f64,
}

fn mse(pred: &Matrix, y: &Matrix) -> f64 {
    let diff = pred.sub(y);
    diff.dot(&diff) / (y.rows() * y.cols()) as f64
}

impl SyntheticSuite {
    pub fn pretrained_checkpoint(&self) -> Result<Checkpoint> {
        self.pretrained.to_checkpoint()
    }

    pub fn expert_checkpoints(&self) -> Result<Vec<Checkpoint>> {
        self.experts
            .iter()
            .map(ModelRecord::to_checkpoint)
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("suite serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let suite: SyntheticSuite = serde_json::from_str(text)
            .map_err(|e| MergeError::Config(format!("malformed suite JSON: {e}")))?;
        suite.config.validate()?;
        if suite.datasets.len() != suite.config.n_tasks
            || suite.experts.len() != suite.config.n_tasks
        {
            return Err(MergeError::Structural(format!(
                "suite declares {} tasks but holds {} datasets and {} experts",
                suite.config.n_tasks,
                suite.datasets.len(),
                suite.experts.len()
            )));
        }
        Ok(suite)
    }

    /// Mean squared error of `model` on task `task` (0-based).
    pub fn task_loss(&self, model: &Checkpoint, task: usize) -> Result<f64> {
        let layers = checkpoint_to_layers(model, &self.config)?;
        let data = &self.datasets[task];
        let x = data.x.to_matrix()?;
        let y = data.y.to_matrix()?;
        Ok(mse(&forward(&layers, &x), &y))
    }
}

pub fn evaluate_gap(suite: &SyntheticSuite, merged: &Checkpoint) -> Result<GapResult> {
    let experts = suite.expert_checkpoints()?;
    let mut task_losses = Vec::with_capacity(experts.len());
    let mut expert_losses = Vec::with_capacity(experts.len());
    for (j, expert) in experts.iter().enumerate() {
        task_losses.push(suite.task_loss(merged, j)?);
        expert_losses.push(suite.task_loss(expert, j)?);
    }
    let gaps: Vec<f64> = task_losses
        .iter()
        .zip(&expert_losses)
        .map(|(l, e)| l - e)
        .collect();
    let n = gaps.len() as f64;
    Ok(GapResult {
        mean_gap: gaps.iter().sum::<f64>() / n,
        squared_gap_sum: gaps.iter().map(|g| g * g).sum(),
        mean_task_loss: task_losses.iter().sum::<f64>() / n,
        gaps,
        task_losses,
        expert_losses,
    })
}

pub fn method_label(config: &MergeConfig) -> String {
    match config.method {
        MergeMethod::Average => "average".into(),
        MergeMethod::TaskArithmetic => format!("task_arithmetic(lambda={})", config.uniform_lambda),
        MergeMethod::Doge => format!(
            "doge(eta={}, k_share_ratio={:.4}, iterations={}, projection={})",
            config.eta,
            config.k_share_ratio,
            config.iterations,
            serde_json::to_value(config.projection_mode)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default()
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub label: String,
    pub config: MergeConfig,
    pub result: Option<GapResult>,
    pub mean_lambda: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub suite: SuiteConfig,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, method: MergeMethod) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.config.method == method)
    }
}

/// Runs every merger on the suite's checkpoints. A failing method is recorded
/// in its row and the others still run.
pub fn run_comparison(suite: &SyntheticSuite, methods: &[MergeConfig]) -> Result<ComparisonTable> {
    let pretrained = suite.pretrained_checkpoint()?;
    let experts = suite.expert_checkpoints()?;
    let rows = methods
        .iter()
        .map(|config| {
            let label = method_label(config);
            let outcome = merge(&pretrained, &experts, config).and_then(|(merged, report)| {
                Ok((evaluate_gap(suite, &merged)?, report.global.mean_lambda))
            });
            match outcome {
                Ok((result, mean_lambda)) => ComparisonRow {
                    label,
                    config: config.clone(),
                    result: Some(result),
                    mean_lambda: Some(mean_lambda),
                    error: None,
                },
                Err(e) => ComparisonRow {
                    label,
                    config: config.clone(),
                    result: None,
                    mean_lambda: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(ComparisonTable {
        suite: suite.config.clone(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepLayer {
    pub key: String,
    pub k_share: usize,
    pub explained_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub mean_gap: f64,
    pub squared_gap_sum: f64,
    pub layers: Vec<SweepLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub suite: SuiteConfig,
    pub base: MergeConfig,
    pub rows: Vec<SweepRow>,
}

/// Re-runs the projective merge once per shared-subspace ratio.
pub fn rank_sweep(
    suite: &SyntheticSuite,
    base: &MergeConfig,
    ratios: &[f64],
) -> Result<SweepTable> {
    let pretrained = suite.pretrained_checkpoint()?;
    let experts = suite.expert_checkpoints()?;
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(MergeError::Config(format!(
                "sweep ratio {ratio} must lie in (0, 1]"
            )));
        }
        let config = MergeConfig {
            method: MergeMethod::Doge,
            k_share_ratio: ratio,
            ..base.clone()
        };
        let (merged, report) = merge_doge(&pretrained, &experts, &config)?;
        let gap = evaluate_gap(suite, &merged)?;
        rows.push(SweepRow {
            ratio,
            mean_gap: gap.mean_gap,
            squared_gap_sum: gap.squared_gap_sum,
            layers: report
                .layers
                .iter()
                .map(|l| SweepLayer {
                    key: l.key.clone(),
                    k_share: l.k_share,
                    explained_fraction: explained_fraction(&l.shared_singular_values, l.k_share),
                })
                .collect(),
        });
    }
    Ok(SweepTable {
        suite: suite.config.clone(),
        base: base.clone(),
        rows,
    })
}
