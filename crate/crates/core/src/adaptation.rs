//! Context-only adaptation to new environments.

use crate::analysis::mape;
use crate::error::{CodaError, Result};
use crate::hypernet::{decode, decode_var, HyperParams};
use crate::model::ModelConfig;
use crate::numeric::{grad, program, ScalarProgram, Solver, Tape, Tensor, Var};
use crate::systems::EnvironmentDataset;
use crate::training::{rollout, trajectory_loss, AdamConfig, OptimizerState};
use log::debug;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Update rule for the context.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptOptimizer {
    #[default]
    Adam,
    GradientDescent,
}

/// Regularizer on the context during adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextPenalty {
    /// `λ‖ξ‖²`
    Context(f64),
    /// `λ‖Wξ‖²`
    Offset(f64),
}

impl ContextPenalty {
    fn eval<'t>(&self, w: Var<'t>, xi: Var<'t>) -> Result<Option<Var<'t>>> {
        Ok(match *self {
            ContextPenalty::Context(l) if l != 0.0 => Some(xi.sq_sum().scale(l)),
            ContextPenalty::Offset(l) if l != 0.0 => {
                let dxi = xi.with_value(|t| t.len());
                Some(w.matmul(xi.reshape(&[dxi, 1])?)?.sq_sum().scale(l))
            }
            _ => None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub learning_rate: f64,
    pub max_steps: usize,
    /// Stop when the objective has not improved by `min_delta` for this many steps.
    pub patience: usize,
    pub min_delta: f64,
    /// Stop once the context gradient norm falls below this value.
    pub grad_tol: f64,
    pub optimizer: AdaptOptimizer,
    pub penalty: ContextPenalty,
    pub solver: Solver,
    pub model_substeps: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            max_steps: 500,
            patience: 50,
            min_delta: 1e-12,
            grad_tol: 0.0,
            optimizer: AdaptOptimizer::Adam,
            penalty: ContextPenalty::Context(1e-4),
            solver: Solver::Rk4,
            model_substeps: 1,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(CodaError::Config("adaptation learning rate must be > 0".into()));
        }
        let l = match self.penalty {
            ContextPenalty::Context(l) | ContextPenalty::Offset(l) => l,
        };
        if !(l >= 0.0) {
            return Err(CodaError::Config("adaptation penalty weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Fitted context of one new environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationResult {
    pub env_id: u32,
    pub xi: Vec<f64>,
    /// Loss of the decoded parameters (penalty excluded).
    pub loss: f64,
    pub iterations: usize,
}

/// Outcome of a generic context fit.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextFit {
    pub xi: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

/// Minimizes `loss(θc + Wξ) + penalty(ξ)` over `ξ` from `ξ = 0`.
///
/// `w` is row-major `[d_θ, d_ξ]`.
pub fn optimize_context<P: ScalarProgram + ?Sized>(
    theta_c: &[f64],
    w: &[f64],
    context_dim: usize,
    loss: &P,
    cfg: &AdaptConfig,
) -> Result<ContextFit> {
    cfg.validate()?;
    if context_dim == 0 || w.len() != theta_c.len() * context_dim {
        return Err(CodaError::Shape(format!(
            "W has {} entries, expected {} x {context_dim}",
            w.len(),
            theta_c.len()
        )));
    }
    let wt = Tensor::new(vec![theta_c.len(), context_dim], w.to_vec())?;
    let tct = Tensor::vector(theta_c);
    let eval = |xi: &[f64]| -> Result<(f64, Vec<f64>)> {
        let tape = Tape::new();
        let tc = tape.constant(tct.clone());
        let wv = tape.constant(wt.clone());
        let x = tape.var(Tensor::vector(xi));
        let theta = decode_var(tc, wv, x)?;
        let mut obj = loss.eval(&tape, theta)?;
        if let Some(p) = cfg.penalty.eval(wv, x)? {
            obj = obj.add(p)?;
        }
        let v = obj.item()?;
        Ok((v, tape.backward(obj)?.flat(x)))
    };
    let adam = AdamConfig::new(cfg.learning_rate);
    let mut state = OptimizerState::new(context_dim);
    let mut xi = vec![0.0; context_dim];
    let mut best = (f64::INFINITY, xi.clone());
    let mut wait = 0;
    let mut iterations = 0;
    for it in 0..cfg.max_steps {
        let (v, g) = eval(&xi).map_err(|e| CodaError::Adaptation(format!("step {it}: {e}")))?;
        if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(CodaError::Adaptation(format!("non-finite objective at step {it}")));
        }
        if v < best.0 - cfg.min_delta {
            best = (v, xi.clone());
            wait = 0;
        } else {
            wait += 1;
            if cfg.optimizer == AdaptOptimizer::Adam && wait >= cfg.patience {
                break;
            }
        }
        let gnorm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if gnorm <= cfg.grad_tol {
            break;
        }
        iterations = it + 1;
        match cfg.optimizer {
            AdaptOptimizer::Adam => adam_step_ctx(&mut state, &mut xi, &g, &adam),
            AdaptOptimizer::GradientDescent => {
                for (x, gi) in xi.iter_mut().zip(&g) {
                    *x -= cfg.learning_rate * gi;
                }
            }
        }
    }
    let (objective, xi) = match cfg.optimizer {
        AdaptOptimizer::Adam => {
            let (v, _) = eval(&xi).map_err(|e| CodaError::Adaptation(e.to_string()))?;
            if v < best.0 {
                (v, xi)
            } else {
                best
            }
        }
        AdaptOptimizer::GradientDescent => {
            let (v, _) = eval(&xi).map_err(|e| CodaError::Adaptation(e.to_string()))?;
            (v, xi)
        }
    };
    if !objective.is_finite() {
        return Err(CodaError::Adaptation("non-finite final objective".into()));
    }
    Ok(ContextFit {
        xi,
        objective,
        iterations,
    })
}

fn adam_step_ctx(state: &mut OptimizerState, xi: &mut [f64], g: &[f64], adam: &AdamConfig) {
    crate::training::adam_step(state, xi, g, adam).expect("context shapes agree");
}

/// Fits the context of a new environment with `θc` and `W` frozen.
pub fn adapt(
    params: &HyperParams,
    model: &ModelConfig,
    data: &EnvironmentDataset,
    cfg: &AdaptConfig,
) -> Result<AdaptationResult> {
    params.validate()?;
    if data.is_empty() {
        return Err(CodaError::Config("adaptation needs at least one trajectory".into()));
    }
    let loss = program(|_: &Tape, theta: Var| trajectory_loss(model, theta, data, cfg.solver, cfg.model_substeps, None));
    let fit = optimize_context(&params.theta_c, &params.w, params.context_dim, &loss, cfg)?;
    let theta = decode(&params.theta_c, &params.w, &fit.xi)?;
    let loss = crate::training::trajectory_loss_value(model, &theta, data, cfg.solver, cfg.model_substeps)
        .map_err(|e| CodaError::Adaptation(e.to_string()))?;
    debug!(
        "adapted env {} in {} steps: loss {loss:.3e}",
        data.environment.id, fit.iterations
    );
    Ok(AdaptationResult {
        env_id: data.environment.id,
        xi: fit.xi,
        loss,
        iterations: fit.iterations,
    })
}

/// Closed-form minimizer of the second-order expansion of the loss around `θc`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClosedFormContext {
    pub xi: Vec<f64>,
    /// Condition number of `H̄ + 2λWᵀW`.
    pub condition: f64,
}

/// Largest condition number accepted by [`closed_form_context`].
pub const MAX_CONDITION: f64 = 1e12;

/// `ξ* = -(WᵀHW + 2λWᵀW)⁻¹ Wᵀ∇L(θc)` for the objective `L(θc + Wξ) + λ‖Wξ‖²`.
///
/// Hessian-vector products are central differences of gradients with step
/// `1e-4 (1 + ‖θc‖∞)`.
pub fn closed_form_context<P: ScalarProgram + ?Sized>(
    theta_c: &[f64],
    w: &[f64],
    context_dim: usize,
    loss: &P,
    lambda: f64,
) -> Result<ClosedFormContext> {
    let d = theta_c.len();
    if context_dim == 0 || w.len() != d * context_dim {
        return Err(CodaError::Shape(format!(
            "W has {} entries, expected {d} x {context_dim}",
            w.len()
        )));
    }
    let wm = DMatrix::from_row_slice(d, context_dim, w);
    let (_, g0) = grad(loss, theta_c)?;
    let h = 1e-4 * (1.0 + theta_c.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let mut hbar = DMatrix::zeros(context_dim, context_dim);
    for j in 0..context_dim {
        let col = wm.column(j);
        let plus: Vec<f64> = theta_c.iter().zip(col.iter()).map(|(t, v)| t + h * v).collect();
        let minus: Vec<f64> = theta_c.iter().zip(col.iter()).map(|(t, v)| t - h * v).collect();
        let (_, gp) = grad(loss, &plus)?;
        let (_, gm) = grad(loss, &minus)?;
        let hv = nalgebra::DVector::from_iterator(d, gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)));
        let proj = wm.transpose() * hv;
        hbar.set_column(j, &proj);
    }
    let hbar = (&hbar + hbar.transpose()) * 0.5;
    let a = hbar + wm.transpose() * &wm * (2.0 * lambda);
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let smin = sv.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition < MAX_CONDITION) {
        return Err(CodaError::SingularHessian { condition });
    }
    let rhs = -(wm.transpose() * nalgebra::DVector::from_vec(g0));
    let xi = a
        .lu()
        .solve(&rhs)
        .ok_or(CodaError::SingularHessian { condition })?;
    Ok(ClosedFormContext {
        xi: xi.iter().copied().collect(),
        condition,
    })
}

/// Forecast accuracy of one parameter vector on a set of trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastMetrics {
    pub per_trajectory_mse: Vec<f64>,
    /// Percent.
    pub per_trajectory_mape: Vec<f64>,
    pub mse: f64,
    /// Percent.
    pub mape: f64,
}

/// Rolls out from each initial condition over the full horizon and scores the
/// frames `1..=K` against the observations.
pub fn eval_forecast(
    model: &ModelConfig,
    theta: &[f64],
    data: &EnvironmentDataset,
    solver: Solver,
    substeps: usize,
) -> Result<ForecastMetrics> {
    let tape = Tape::new();
    let t = tape.constant(Tensor::vector(theta));
    let preds = rollout(model, t, data, solver, substeps, None)?;
    let n = data.len();
    let sl: usize = data.state_shape.iter().product();
    let mut pred_traj = vec![Vec::with_capacity(preds.len() * sl); n];
    let mut true_traj = vec![Vec::with_capacity(preds.len() * sl); n];
    for (k, p) in preds.iter().enumerate() {
        let v = p.value();
        let truth = data.frame_batch(k + 1);
        for i in 0..n {
            pred_traj[i].extend_from_slice(&v.data()[i * sl..(i + 1) * sl]);
            true_traj[i].extend_from_slice(&truth.data()[i * sl..(i + 1) * sl]);
        }
    }
    let mut per_mse = Vec::with_capacity(n);
    let mut per_mape = Vec::with_capacity(n);
    for i in 0..n {
        let se: f64 = pred_traj[i]
            .iter()
            .zip(&true_traj[i])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let mse = se / pred_traj[i].len() as f64;
        if !mse.is_finite() {
            return Err(CodaError::Numerical {
                locus: format!("forecast of env {} trajectory {i}", data.environment.id),
            });
        }
        per_mse.push(mse);
        per_mape.push(100.0 * mape(&pred_traj[i], &true_traj[i]));
    }
    Ok(ForecastMetrics {
        mse: per_mse.iter().sum::<f64>() / n as f64,
        mape: per_mape.iter().sum::<f64>() / n as f64,
        per_trajectory_mse: per_mse,
        per_trajectory_mape: per_mape,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(target: Vec<f64>) -> impl for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>> {
        let c = Tensor::vector(&target);
        program(move |_: &Tape, t: Var| t.sq_err_sum(&c))
    }

    #[test]
    fn orthonormal_quadratic_projection() {
        // W columns e0, e1 in R^3; θ* = (1, 2, 3), θc = 0.
        let w = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let f = program(quadratic(vec![1.0, 2.0, 3.0]));
        let cf = closed_form_context(&[0.0; 3], &w, 2, &f, 0.0).unwrap();
        assert!((cf.xi[0] - 1.0).abs() < 1e-9 && (cf.xi[1] - 2.0).abs() < 1e-9, "{:?}", cf.xi);
        assert!((cf.condition - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ridge_shrinks_context() {
        let w = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let f = program(quadratic(vec![1.0, 2.0, 3.0]));
        let norms: Vec<f64> = [0.0, 1.0, 100.0]
            .iter()
            .map(|&l| {
                let x = closed_form_context(&[0.0; 3], &w, 2, &f, l).unwrap().xi;
                x.iter().map(|v| v * v).sum::<f64>().sqrt()
            })
            .collect();
        assert!(norms[0] > norms[1] && norms[1] > norms[2]);
    }

    #[test]
    fn singular_system_reported() {
        let w = vec![0.0; 6];
        let f = program(quadratic(vec![1.0, 2.0, 3.0]));
        assert!(matches!(
            closed_form_context(&[0.0; 3], &w, 2, &f, 0.0),
            Err(CodaError::SingularHessian { .. })
        ));
    }

    #[test]
    fn zero_w_keeps_zero_context() {
        let f = program(quadratic(vec![1.0, 2.0]));
        let fit = optimize_context(&[0.5, 0.5], &[0.0; 4], 2, &f, &AdaptConfig::default()).unwrap();
        assert_eq!(fit.xi, vec![0.0, 0.0]);
        assert!((fit.objective - 2.5).abs() < 1e-12);
    }
}
