//! The data-free per-layer objective and its projected optimisation.
//!
//! For one layer with task vectors `τ_1..τ_n`, coefficients `λ_i` and a
//! shared modification `Δ`, the merged update is `x = Σ_i λ_i (τ_i + Δ)` and
//!
//! ```text
//! loss(Δ) = Σ_j s_j²,   s_j = ⟨−τ_j, x − τ_j⟩_F
//! ∇_Δ loss = −2 (Σ_i λ_i) Σ_j s_j τ_j
//! ```
//!
//! The loss is a convex quadratic in `Δ`; its gradient always lies in
//! `span{τ_j}`.

use serde::{Deserialize, Serialize};

use crate::error::{MergeError, Result};
use crate::linalg::Matrix;
use crate::subspace::{project, project_out, SubspaceBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// Remove the component inside the shared subspace.
    Orthogonal,
    None,
    /// Keep only the component inside the shared subspace.
    Along,
}

#[derive(Debug, Clone)]
pub struct LayerProblem {
    pub key: String,
    pub taus: Vec<Matrix>,
    pub lambdas: Vec<f64>,
    pub shared_basis: SubspaceBasis,
    pub delta: Matrix,
    pub projection_mode: ProjectionMode,
}

impl LayerProblem {
    /// Starts from `Δ = 0`.
    pub fn new(
        key: impl Into<String>,
        taus: Vec<Matrix>,
        lambdas: Vec<f64>,
        shared_basis: SubspaceBasis,
        projection_mode: ProjectionMode,
    ) -> Result<Self> {
        let key = key.into();
        let Some(first) = taus.first() else {
            return Err(MergeError::Structural(format!(
                "layer `{key}` has no task vectors"
            )));
        };
        let shape = first.shape();
        if taus.iter().any(|t| t.shape() != shape) {
            return Err(MergeError::Structural(format!(
                "task vectors for `{key}` disagree on shape"
            )));
        }
        if lambdas.len() != taus.len() {
            return Err(MergeError::Structural(format!(
                "layer `{key}` has {} task vectors but {} coefficients",
                taus.len(),
                lambdas.len()
            )));
        }
        if shared_basis.rows() != shape.0 {
            return Err(MergeError::Structural(format!(
                "shared basis for `{key}` has {} rows, layer has {}",
                shared_basis.rows(),
                shape.0
            )));
        }
        Ok(LayerProblem {
            key,
            delta: Matrix::zeros(shape.0, shape.1),
            taus,
            lambdas,
            shared_basis,
            projection_mode,
        })
    }

    pub fn lambda_sum(&self) -> f64 {
        self.lambdas.iter().sum()
    }

    /// `Σ_i λ_i (τ_i + Δ)`
    pub fn merged_update(&self) -> Matrix {
        let (r, c) = self.delta.shape();
        let mut x = Matrix::zeros(r, c);
        for (tau, &lambda) in self.taus.iter().zip(&self.lambdas) {
            x.axpy(lambda, tau);
        }
        x.axpy(self.lambda_sum(), &self.delta);
        x
    }

    /// The per-task residual inner products `s_j`.
    pub fn residuals(&self) -> Vec<f64> {
        let x = self.merged_update();
        self.taus
            .iter()
            .map(|tau| -(tau.dot(&x) - tau.dot(tau)))
            .collect()
    }

    /// Upper bound on the Lipschitz constant of the gradient:
    /// `2 (Σλ)² Σ_j ‖τ_j‖²`.
    pub fn lipschitz_bound(&self) -> f64 {
        let lambda = self.lambda_sum();
        2.0 * lambda * lambda * self.taus.iter().map(|t| t.dot(t)).sum::<f64>()
    }
}

pub fn loss(problem: &LayerProblem) -> f64 {
    problem.residuals().iter().map(|s| s * s).sum()
}

pub fn grad_delta(problem: &LayerProblem) -> Matrix {
    let s = problem.residuals();
    let (r, c) = problem.delta.shape();
    let mut g = Matrix::zeros(r, c);
    let scale = -2.0 * problem.lambda_sum();
    for (tau, s_j) in problem.taus.iter().zip(s) {
        g.axpy(scale * s_j, tau);
    }
    g
}

pub fn apply_projection(gradient: &Matrix, problem: &LayerProblem) -> Result<Matrix> {
    project_by_mode(gradient, &problem.shared_basis, problem.projection_mode)
}

fn project_by_mode(a: &Matrix, basis: &SubspaceBasis, mode: ProjectionMode) -> Result<Matrix> {
    match mode {
        ProjectionMode::Orthogonal => project_out(basis, a),
        ProjectionMode::None => Ok(a.clone()),
        ProjectionMode::Along => project(basis, a),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub params: AdamParams,
}

impl OptimizerState {
    pub fn new(rows: usize, cols: usize, params: AdamParams) -> Self {
        OptimizerState {
            step: 0,
            first_moment: Matrix::zeros(rows, cols),
            second_moment: Matrix::zeros(rows, cols),
            params,
        }
    }

    /// Advances the moments with `gradient` and returns the bias-corrected
    /// step `lr · m̂ / (√v̂ + ε)` to subtract from the parameters.
    pub fn advance(&mut self, gradient: &Matrix) -> Matrix {
        let AdamParams {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.params;
        self.step += 1;
        let t = self.step as i32;
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);
        let (r, c) = gradient.shape();
        let mut step = Matrix::zeros(r, c);
        let m = self.first_moment.as_mut_slice();
        let v = self.second_moment.as_mut_slice();
        for (((mi, vi), &g), out) in m
            .iter_mut()
            .zip(v.iter_mut())
            .zip(gradient.as_slice())
            .zip(step.as_mut_slice())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            let m_hat = *mi / correction1;
            let v_hat = *vi / correction2;
            *out = lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        step
    }
}

/// One Adam update: returns the new `Δ` and the advanced state.
pub fn adam_step(
    state: &OptimizerState,
    gradient: &Matrix,
    delta: &Matrix,
) -> (Matrix, OptimizerState) {
    let mut next = state.clone();
    let step = next.advance(gradient);
    (delta.sub(&step), next)
}

/// How the (projected) gradient becomes a parameter step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    Adam(AdamParams),
    /// Plain gradient descent with a fixed step size.
    Fixed(f64),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LossTrace {
    pub losses: Vec<f64>,
    /// `‖Bᵀ G‖_F / ‖g‖_F` per iteration, where `G` is the applied gradient and
    /// `g` the raw one (zero when `g = 0`).
    pub residuals: Vec<f64>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().cloned().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct LayerOutcome {
    pub delta: Matrix,
    pub trace: LossTrace,
    pub initial_loss: f64,
    /// Loss at the returned `Δ`.
    pub final_loss: f64,
    /// Set when a non-finite value stopped the loop early.
    pub aborted: Option<String>,
}

/// Adam with default moment constants at learning rate `lr`.
pub fn optimize_layer(problem: LayerProblem, iterations: usize, lr: f64) -> Result<LayerOutcome> {
    optimize_layer_with(problem, iterations, StepRule::Adam(AdamParams::with_lr(lr)))
}

/// Runs `iterations` rounds of loss → gradient → projection → step.
///
/// The step itself is projected with the same mode as the gradient, so that
/// in orthogonal mode `Δ` never acquires a component inside the shared
/// subspace even though Adam rescales coordinates individually.
pub fn optimize_layer_with(
    mut problem: LayerProblem,
    iterations: usize,
    rule: StepRule,
) -> Result<LayerOutcome> {
    let (r, c) = problem.delta.shape();
    let mut adam = match rule {
        StepRule::Adam(params) => Some(OptimizerState::new(r, c, params)),
        StepRule::Fixed(_) => None,
    };
    let mut trace = LossTrace::default();
    let initial_loss = loss(&problem);
    let mut aborted = None;
    let mut previous = problem.delta.clone();

    for iteration in 0..iterations {
        let current = loss(&problem);
        if !current.is_finite() {
            problem.delta = previous;
            aborted = Some(format!("non-finite loss at iteration {iteration}"));
            break;
        }
        let raw = grad_delta(&problem);
        let applied = apply_projection(&raw, &problem)?;
        let residual = match problem.projection_mode {
            ProjectionMode::Orthogonal => {
                let raw_norm = raw.frobenius();
                if raw_norm > 0.0 {
                    problem.shared_basis.columns.t_matmul(&applied).frobenius() / raw_norm
                } else {
                    0.0
                }
            }
            _ => 0.0,
        };
        trace.losses.push(current);
        trace.residuals.push(residual);

        let step = match (&mut adam, rule) {
            (Some(state), _) => state.advance(&applied),
            (None, StepRule::Fixed(eta)) => applied.scale(eta),
            (None, StepRule::Adam(_)) => unreachable!("adam state exists for adam rule"),
        };
        let step = project_by_mode(&step, &problem.shared_basis, problem.projection_mode)?;
        previous = problem.delta.clone();
        problem.delta = problem.delta.sub(&step);
        if !problem.delta.is_finite() {
            problem.delta = previous.clone();
            aborted = Some(format!("non-finite update at iteration {iteration}"));
            break;
        }
    }

    let final_loss = loss(&problem);
    Ok(LayerOutcome {
        delta: problem.delta,
        trace,
        initial_loss,
        final_loss,
        aborted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subspace::BasisSource;

    fn col(v: &[f64]) -> Matrix {
        Matrix::from_vec(v.len(), 1, v.to_vec())
    }

    fn basis(cols: &[Vec<f64>]) -> SubspaceBasis {
        SubspaceBasis {
            key: "w".into(),
            columns: Matrix::from_columns(cols[0].len(), cols),
            source: BasisSource::Shared,
            singular_values: vec![],
        }
    }

    fn problem(taus: Vec<Matrix>, lambdas: Vec<f64>, mode: ProjectionMode) -> LayerProblem {
        let rows = taus[0].rows();
        let mut e = vec![0.0; rows];
        e[0] = 1.0;
        LayerProblem::new("w", taus, lambdas, basis(&[e]), mode).unwrap()
    }

    /// Direct evaluation of the loss formula, one task at a time, as an
    /// oracle independent of the cached `merged_update`.
    fn loss_oracle(p: &LayerProblem) -> f64 {
        let mut total = 0.0;
        for tj in &p.taus {
            let mut r = tj.scale(-1.0);
            for (ti, &l) in p.taus.iter().zip(&p.lambdas) {
                r = r.add(&ti.add(&p.delta).scale(l));
            }
            let s = -tj.dot(&r);
            total += s * s;
        }
        total
    }

    #[test]
    fn orthogonal_tasks_have_zero_loss() {
        let p = problem(
            vec![col(&[1.0, 0.0]), col(&[0.0, 1.0])],
            vec![1.0, 1.0],
            ProjectionMode::None,
        );
        assert_eq!(loss(&p), 0.0);
        assert_eq!(loss_oracle(&p), 0.0);
    }

    #[test]
    fn shared_task_with_unit_lambda_sum_is_exact() {
        let e1 = col(&[1.0, 0.0]);
        let p = problem(vec![e1.clone(), e1], vec![0.5, 0.5], ProjectionMode::None);
        assert_eq!(loss(&p), 0.0);
    }

    #[test]
    fn overshooting_shared_task() {
        let e1 = col(&[1.0, 0.0]);
        let p = problem(vec![e1.clone(), e1], vec![1.0, 1.0], ProjectionMode::None);
        assert_eq!(loss(&p), 2.0);
        assert_eq!(loss_oracle(&p), 2.0);
    }

    #[test]
    fn single_task_zero_delta_is_stationary() {
        let p = problem(vec![col(&[1.0, 0.0])], vec![1.0], ProjectionMode::None);
        assert_eq!(grad_delta(&p).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn single_task_shifted_delta_gradient() {
        let mut p = problem(vec![col(&[1.0, 0.0])], vec![1.0], ProjectionMode::None);
        p.delta = col(&[1.0, 0.0]);
        let g = grad_delta(&p);
        assert_eq!(g.as_slice(), &[2.0, 0.0]);
        // Central differences agree exactly up to rounding on a quadratic.
        let h = 1e-4 * 2.0;
        let mut plus = p.clone();
        plus.delta.set(0, 0, 1.0 + h);
        let mut minus = p.clone();
        minus.delta.set(0, 0, 1.0 - h);
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        assert!((fd - 2.0).abs() < 1e-8);
    }

    #[test]
    fn projection_modes() {
        let p = problem(vec![col(&[1.0, 0.0])], vec![1.0], ProjectionMode::None);
        let g = col(&[3.0, -2.0]);
        assert_eq!(apply_projection(&g, &p).unwrap(), g);

        let orth = LayerProblem {
            projection_mode: ProjectionMode::Orthogonal,
            ..p.clone()
        };
        let in_span = col(&[5.0, 0.0]);
        assert!(apply_projection(&in_span, &orth).unwrap().frobenius() < 1e-15);

        let along = LayerProblem {
            projection_mode: ProjectionMode::Along,
            ..p
        };
        let sum = apply_projection(&g, &orth)
            .unwrap()
            .add(&apply_projection(&g, &along).unwrap());
        assert_eq!(sum, g);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let state = OptimizerState::new(2, 1, AdamParams::default());
        let delta = col(&[0.25, -1.0]);
        let (next, s) = adam_step(&state, &Matrix::zeros(2, 1), &delta);
        assert_eq!(next, delta);
        assert_eq!(s.first_moment, Matrix::zeros(2, 1));
        assert_eq!(s.second_moment, Matrix::zeros(2, 1));
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let params = AdamParams::default();
        let state = OptimizerState::new(3, 1, params);
        let g = col(&[0.5, -2.0, 1e-3]);
        let (next, _) = adam_step(&state, &g, &Matrix::zeros(3, 1));
        // Closed form: m̂ = g, v̂ = g², so the step is lr · g / (|g| + ε).
        for (d, gi) in next.as_slice().iter().zip(g.as_slice()) {
            let expected = -params.lr * gi / (gi.abs() + params.epsilon);
            assert!((d - expected).abs() < 1e-18, "{d} vs {expected}");
            assert!((d + params.lr * gi.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let state = OptimizerState::new(2, 1, AdamParams::default());
        let g = col(&[0.3, 0.7]);
        let d = col(&[1.0, 1.0]);
        assert_eq!(adam_step(&state, &g, &d), adam_step(&state, &g, &d));
    }

    #[test]
    fn stationary_start_stays_put() {
        let e1 = col(&[1.0, 0.0]);
        let p = problem(vec![e1.clone(), e1], vec![0.5, 0.5], ProjectionMode::None);
        let out = optimize_layer(p, 50, 1e-4).unwrap();
        assert!(out.delta.frobenius() < 1e-12);
        assert!(out.trace.losses.iter().all(|l| *l < 1e-20));
        assert_eq!(out.trace.len(), 50);
    }

    #[test]
    fn fixed_step_descent_is_monotone() {
        let e1 = col(&[1.0, 0.0]);
        let p = problem(vec![e1.clone(), e1], vec![1.0, 1.0], ProjectionMode::None);
        let step = 0.5 / p.lipschitz_bound();
        let out = optimize_layer_with(p, 200, StepRule::Fixed(step)).unwrap();
        assert!(out.trace.losses.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.trace.losses[1] < out.trace.losses[0]);
        assert!(out.final_loss < 1e-6);
    }

    #[test]
    fn full_shared_span_freezes_delta() {
        let e1 = col(&[1.0, 0.0]);
        let p = problem(
            vec![e1.clone(), e1],
            vec![1.0, 1.0],
            ProjectionMode::Orthogonal,
        );
        let out = optimize_layer(p, 100, 1e-2).unwrap();
        assert!(out.delta.frobenius() < 1e-12);
        assert!(out.trace.losses.iter().all(|l| *l == 2.0));
        assert!(out.trace.max_residual() < 1e-12);
    }

    #[test]
    fn non_finite_aborts_with_last_state() {
        let p = problem(
            vec![col(&[1e200, 0.0]), col(&[0.0, 1.0])],
            vec![1.0, 1.0],
            ProjectionMode::None,
        );
        let out = optimize_layer(p, 10, 1e-4).unwrap();
        assert!(out.aborted.is_some());
        assert!(out.delta.is_finite());
    }

    #[test]
    fn constructor_checks_shapes() {
        let b = basis(&[vec![1.0, 0.0]]);
        assert!(LayerProblem::new("w", vec![], vec![], b.clone(), ProjectionMode::None).is_err());
        assert!(LayerProblem::new(
            "w",
            vec![col(&[1.0, 0.0]), col(&[1.0, 0.0, 0.0])],
            vec![1.0, 1.0],
            b.clone(),
            ProjectionMode::None
        )
        .is_err());
        assert!(LayerProblem::new(
            "w",
            vec![col(&[1.0, 0.0])],
            vec![],
            b.clone(),
            ProjectionMode::None
        )
        .is_err());
        assert!(LayerProblem::new(
            "w",
            vec![col(&[1.0, 0.0, 0.0])],
            vec![1.0],
            b,
            ProjectionMode::None
        )
        .is_err());
    }
}
