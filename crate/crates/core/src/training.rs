//! Trajectory loss, the multi-environment objective, Adam and the training loops.

use crate::error::{CodaError, Result};
use crate::exec::Execution;
use crate::hypernet::{self, decode_var, penalty_var, HyperParams, PenaltyConfig, PenaltyVariant};
use crate::model::ModelConfig;
use crate::numeric::{ode, Solver, Tape, Tensor, Var};
use crate::rng;
use crate::systems::{EnvironmentDataset, SystemKind};
use log::{debug, info};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Optimization settings for training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub penalty: PenaltyConfig,
    pub epochs: usize,
    /// Epochs without improvement before stopping.
    pub patience: usize,
    pub min_delta: f64,
    /// Scheduled-sampling decay: teacher-forcing probability `exp(-epoch / tau)`.
    pub tf_decay: f64,
    /// Early stopping only watches epochs whose teacher-forcing probability is
    /// at most this value.
    pub tf_monitor_threshold: f64,
    /// Weight of the previous value in the moving average watched by early
    /// stopping; 0 watches the raw objective.
    pub ema_factor: f64,
    pub solver: Solver,
    /// Solver steps of the learned model per observation interval.
    pub model_substeps: usize,
    pub context_dim: usize,
    /// `W` starts uniform in `±w_init_scale`.
    pub w_init_scale: f64,
    /// Handle the `l1` row penalty with a proximal shrinkage step instead of
    /// its subgradient, which lets rows of `W` become exactly zero.
    pub proximal_l1: bool,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_system(SystemKind::Lv, PenaltyVariant::L1)
    }
}

impl TrainConfig {
    /// Per-system regularization weights; `d_ξ = d_p = 2` for every family.
    pub fn for_system(kind: SystemKind, variant: PenaltyVariant) -> Self {
        let (lambda_xi, l1, l2) = match kind {
            SystemKind::Lv => (1e-4, 1e-6, 1e-5),
            SystemKind::Go => (1e-3, 1e-7, 1e-7),
            SystemKind::Gs => (1e-2, 1e-5, 1e-5),
        };
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            penalty: PenaltyConfig {
                variant,
                lambda_xi,
                lambda_omega: match variant {
                    PenaltyVariant::L1 => l1,
                    PenaltyVariant::L2 => l2,
                },
            },
            epochs: 2000,
            patience: 50,
            min_delta: 1e-9,
            tf_decay: 25.0,
            tf_monitor_threshold: 1e-3,
            ema_factor: 0.99,
            solver: Solver::Rk4,
            model_substeps: 1,
            context_dim: 2,
            w_init_scale: 1e-2,
            proximal_l1: true,
            seed: 0,
            execution: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(CodaError::Config("learning rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(CodaError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.tf_decay > 0.0) {
            return Err(CodaError::Config("teacher-forcing decay must be > 0".into()));
        }
        self.penalty.validate()
    }

    /// Teacher-forcing probability at `epoch`.
    pub fn teacher_forcing(&self, epoch: usize) -> f64 {
        (-(epoch as f64) / self.tf_decay).exp()
    }

    fn uses_prox(&self) -> bool {
        self.proximal_l1 && self.penalty.variant == PenaltyVariant::L1 && self.penalty.lambda_omega > 0.0
    }
}

/// Rolls the learned model out over a dataset's observation grid.
///
/// Returns predicted frames `1..=K`, each `[N, state...]`. With teacher forcing
/// `(p, rng)`, each trajectory's segment `k -> k+1` starts from the observed
/// state `x(t_k)` with probability `p`.
pub fn rollout<'t>(
    model: &ModelConfig,
    theta: Var<'t>,
    data: &EnvironmentDataset,
    solver: Solver,
    substeps: usize,
    mut teacher: Option<(f64, &mut dyn rand::RngCore)>,
) -> Result<Vec<Var<'t>>> {
    let tape = theta.tape();
    let n_frames = data.n_frames();
    if data.is_empty() || n_frames < 2 {
        return Err(CodaError::Config("dataset has no observation intervals".into()));
    }
    let n = data.len();
    let state_len: usize = data.state_shape.iter().product();
    let substeps = substeps.max(1);
    let h = data.dt() / substeps as f64;
    let mut x = tape.constant(data.frame_batch(0));
    let mut preds = Vec::with_capacity(n_frames - 1);
    let mut rhs = |s: &Var<'t>| model.forward(theta, *s);
    for k in 1..n_frames {
        if k > 1 {
            if let Some((p, rng)) = teacher.as_mut() {
                let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(p.clamp(0.0, 1.0))).collect();
                if mask.iter().all(|&m| m) {
                    x = tape.constant(data.frame_batch(k - 1));
                } else if mask.iter().any(|&m| m) {
                    let truth = data.frame_batch(k - 1);
                    let mut keep = vec![0.0; n * state_len];
                    let mut forced = vec![0.0; n * state_len];
                    for (i, &m) in mask.iter().enumerate() {
                        let r = i * state_len..(i + 1) * state_len;
                        if m {
                            forced[r.clone()].copy_from_slice(&truth.data()[r]);
                        } else {
                            keep[r].fill(1.0);
                        }
                    }
                    let shape = truth.shape().to_vec();
                    let keep = tape.constant(Tensor::new(shape.clone(), keep)?);
                    let forced = tape.constant(Tensor::new(shape, forced)?);
                    x = x.mul(keep)?.add(forced)?;
                }
            }
        }
        for s in 0..substeps {
            x = ode::step(&mut rhs, &x, h, solver).map_err(|e| match e {
                CodaError::Integration { stage, context, .. } => CodaError::Integration {
                    step: (k - 1) * substeps + s,
                    stage,
                    context: format!("{context} [env {}]", data.environment.id),
                },
                other => other,
            })?;
        }
        preds.push(x);
    }
    Ok(preds)
}

/// Mean squared error between observed frames `1..=K` and the learned rollout,
/// averaged over trajectories, frames and state entries.
pub fn trajectory_loss<'t>(
    model: &ModelConfig,
    theta: Var<'t>,
    data: &EnvironmentDataset,
    solver: Solver,
    substeps: usize,
    teacher: Option<(f64, &mut dyn rand::RngCore)>,
) -> Result<Var<'t>> {
    let preds = rollout(model, theta, data, solver, substeps, teacher)?;
    let mut acc: Option<Var<'t>> = None;
    for (k, p) in preds.iter().enumerate() {
        let e = p.sq_err_sum(&data.frame_batch(k + 1))?;
        acc = Some(match acc {
            None => e,
            Some(a) => a.add(e)?,
        });
    }
    let count = (preds.len() * data.len() * data.state_shape.iter().product::<usize>()) as f64;
    Ok(acc.expect("at least one frame").scale(1.0 / count))
}

/// Plain-valued [`trajectory_loss`] with teacher forcing disabled.
pub fn trajectory_loss_value(
    model: &ModelConfig,
    theta: &[f64],
    data: &EnvironmentDataset,
    solver: Solver,
    substeps: usize,
) -> Result<f64> {
    let tape = Tape::new();
    let t = tape.constant(Tensor::vector(theta));
    let l = trajectory_loss(model, t, data, solver, substeps, None)?;
    tape.check_finite()?;
    l.item()
}

/// Loss value and gradient for one environment of the multi-environment objective.
#[derive(Clone, Debug)]
pub struct EnvTerm {
    pub loss: f64,
    pub penalty: f64,
    pub grad_theta_c: Vec<f64>,
    pub grad_w: Vec<f64>,
    pub grad_xi: Vec<f64>,
}

/// `L(θc + Wξ, D) + R(W, ξ)` and its gradient. When `smooth_only`, Ω(W) is left
/// out of the gradient (it is still part of `penalty`).
#[allow(clippy::too_many_arguments)]
pub fn env_term(
    model: &ModelConfig,
    hp: &HyperParams,
    xi: &[f64],
    data: &EnvironmentDataset,
    cfg: &TrainConfig,
    teacher: Option<(f64, &mut dyn rand::RngCore)>,
    smooth_only: bool,
) -> Result<EnvTerm> {
    let tape = Tape::new();
    let tc = tape.var(Tensor::vector(&hp.theta_c));
    let w = tape.var(hp.w_matrix());
    let xv = tape.var(Tensor::vector(xi));
    let theta = decode_var(tc, w, xv)?;
    let loss = trajectory_loss(model, theta, data, cfg.solver, cfg.model_substeps, teacher)?;
    let (pen, pen_value) = if smooth_only {
        let smooth = PenaltyConfig {
            lambda_omega: 0.0,
            ..cfg.penalty
        };
        let p = penalty_var(w, xv, &smooth)?;
        let full = hypernet::penalty(&hp.w, xi, &cfg.penalty);
        (p, full)
    } else {
        let p = penalty_var(w, xv, &cfg.penalty)?;
        let v = p.item()?;
        (p, v)
    };
    let total = loss.add(pen)?;
    let loss_value = loss.item()?;
    let grads = tape.backward(total)?;
    Ok(EnvTerm {
        loss: loss_value,
        penalty: pen_value,
        grad_theta_c: grads.flat(tc),
        grad_w: grads.flat(w),
        grad_xi: grads.flat(xv),
    })
}

/// `Σ_e [L(θc + Wξ^e, D^e) + R(W, ξ^e)]` without teacher forcing.
pub fn coda_objective(
    model: &ModelConfig,
    hp: &HyperParams,
    datasets: &[EnvironmentDataset],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for d in datasets {
        let xi = hp.context(d.environment.id)?;
        let theta = hypernet::decode(&hp.theta_c, &hp.w, xi)?;
        total += trajectory_loss_value(model, &theta, d, cfg.solver, cfg.model_substeps)?
            + hypernet::penalty(&hp.w, xi, &cfg.penalty);
    }
    Ok(total)
}

/// Flat layout of the trainable vector: `[θc, W (row-major), ξ per dataset order]`.
pub fn pack(hp: &HyperParams, datasets: &[EnvironmentDataset]) -> Result<Vec<f64>> {
    let mut v = hp.theta_c.clone();
    v.extend_from_slice(&hp.w);
    for d in datasets {
        v.extend_from_slice(hp.context(d.environment.id)?);
    }
    Ok(v)
}

/// Inverse of [`pack`].
pub fn unpack(flat: &[f64], template: &HyperParams, datasets: &[EnvironmentDataset]) -> HyperParams {
    let dt = template.theta_c.len();
    let dx = template.context_dim;
    let mut hp = template.clone();
    hp.theta_c.copy_from_slice(&flat[..dt]);
    hp.w.copy_from_slice(&flat[dt..dt + dt * dx]);
    for (i, d) in datasets.iter().enumerate() {
        let o = dt + dt * dx + i * dx;
        hp.contexts.insert(d.environment.id, flat[o..o + dx].to_vec());
    }
    hp
}

/// Objective value and gradient over the packed vector (see [`pack`]).
pub fn coda_objective_grad(
    model: &ModelConfig,
    hp: &HyperParams,
    datasets: &[EnvironmentDataset],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    let terms = cfg.execution.try_map(datasets.len(), |i| {
        let d = &datasets[i];
        env_term(model, hp, hp.context(d.environment.id)?, d, cfg, None, false)
    })?;
    Ok(reduce_terms(hp, &terms))
}

fn reduce_terms(hp: &HyperParams, terms: &[EnvTerm]) -> (f64, Vec<f64>) {
    let dt = hp.theta_c.len();
    let dx = hp.context_dim;
    let mut g = vec![0.0; dt + dt * dx + terms.len() * dx];
    let mut value = 0.0;
    for (i, t) in terms.iter().enumerate() {
        value += t.loss + t.penalty;
        for (a, b) in g[..dt].iter_mut().zip(&t.grad_theta_c) {
            *a += b;
        }
        for (a, b) in g[dt..dt + dt * dx].iter_mut().zip(&t.grad_w) {
            *a += b;
        }
        let o = dt + dt * dx + i * dx;
        g[o..o + dx].copy_from_slice(&t.grad_xi);
    }
    (value, g)
}

/// First and second moment estimates of Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// Bias-corrected second moment of coordinate `i`.
    pub fn v_hat(&self, i: usize, beta2: f64) -> f64 {
        self.v[i] / (1.0 - beta2.powi(self.step as i32))
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut OptimizerState, params: &mut [f64], grads: &[f64], cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(CodaError::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub objective: f64,
    pub env_losses: Vec<f64>,
    pub penalty: f64,
    pub teacher_forcing_prob: f64,
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: HyperParams,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// CSV rendering of a training log.
pub fn history_csv(history: &[EpochRecord], env_ids: &[u32]) -> String {
    let mut s = String::from("epoch,objective");
    for id in env_ids {
        let _ = write!(s, ",loss_env{id}");
    }
    s.push_str(",penalty,teacher_forcing_prob\n");
    for r in history {
        let _ = write!(s, "{},{:e}", r.epoch, r.objective);
        for l in &r.env_losses {
            let _ = write!(s, ",{l:e}");
        }
        let _ = writeln!(s, ",{:e},{}", r.penalty, r.teacher_forcing_prob);
    }
    s
}

/// Random `θc` (model initialization) and `W`, zero contexts for `env_ids`.
pub fn init_hyper(model: &ModelConfig, env_ids: &[u32], cfg: &TrainConfig) -> Result<HyperParams> {
    let theta_c = model.init_params(rng::derive_seed(cfg.seed, &[0xC0DA]));
    let mut r = rng::stream(cfg.seed, &[0x3]);
    let w = (0..theta_c.len() * cfg.context_dim)
        .map(|_| r.gen_range(-cfg.w_init_scale..=cfg.w_init_scale))
        .collect();
    HyperParams::new(theta_c, w, cfg.context_dim, env_ids)
}

struct EarlyStop {
    best: f64,
    best_epoch: usize,
    ema: Option<f64>,
    best_ema: f64,
    wait: usize,
    active: bool,
}

impl EarlyStop {
    fn new() -> Self {
        Self {
            best: f64::INFINITY,
            best_epoch: 0,
            ema: None,
            best_ema: f64::INFINITY,
            wait: 0,
            active: false,
        }
    }

    /// Returns `(new raw best, stop)`. Stopping watches the moving average.
    fn observe(&mut self, epoch: usize, value: f64, monitored: bool, cfg: &TrainConfig) -> (bool, bool) {
        if !monitored {
            return (false, false);
        }
        self.active = true;
        let improved = value < self.best;
        if improved {
            self.best = value;
            self.best_epoch = epoch;
        }
        let a = cfg.ema_factor.clamp(0.0, 1.0);
        let ema = match self.ema {
            None => value,
            Some(e) => a * e + (1.0 - a) * value,
        };
        self.ema = Some(ema);
        if ema < self.best_ema - cfg.min_delta {
            self.best_ema = ema;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        (improved, self.wait >= cfg.patience)
    }
}

fn check_datasets(datasets: &[EnvironmentDataset]) -> Result<()> {
    if datasets.is_empty() {
        return Err(CodaError::Config("training needs at least one environment".into()));
    }
    Ok(())
}

/// Joint training of `θc`, `W` and the training contexts.
pub fn train(
    datasets: &[EnvironmentDataset],
    model: &ModelConfig,
    init: HyperParams,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    check_datasets(datasets)?;
    cfg.validate()?;
    model.validate()?;
    init.validate()?;
    if init.param_dim() != model.param_count() {
        return Err(CodaError::Config("θc does not match the model".into()));
    }
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
    };
    let dt = init.param_dim();
    let dx = init.context_dim;
    let prox = cfg.uses_prox();
    let mut flat = pack(&init, datasets)?;
    let mut state = OptimizerState::new(flat.len());
    let mut hp = init;
    let mut best = hp.clone();
    let mut stop = EarlyStop::new();
    let mut history = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let p = cfg.teacher_forcing(epoch);
        let terms = cfg.execution.try_map(datasets.len(), |i| {
            let d = &datasets[i];
            let mut r = rng::stream(cfg.seed, &[0x7F, epoch as u64, i as u64]);
            let teacher = (p > 0.0).then_some((p, &mut r as &mut dyn rand::RngCore));
            env_term(model, &hp, hp.context(d.environment.id)?, d, cfg, teacher, prox)
        });
        let terms = terms.map_err(|e| match e {
            CodaError::Numerical { locus } => CodaError::Training {
                epoch,
                reason: format!("non-finite value at {locus}"),
            },
            CodaError::Integration { .. } => CodaError::Training {
                epoch,
                reason: e.to_string(),
            },
            other => other,
        })?;
        let (objective, grad) = reduce_terms(&hp, &terms);
        if !objective.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(CodaError::Training {
                epoch,
                reason: "non-finite objective".into(),
            });
        }
        history.push(EpochRecord {
            epoch,
            objective,
            env_losses: terms.iter().map(|t| t.loss).collect(),
            penalty: terms.iter().map(|t| t.penalty).sum(),
            teacher_forcing_prob: p,
        });
        let (improved, halt) = stop.observe(epoch, objective, p <= cfg.tf_monitor_threshold, cfg);
        if improved {
            best = hp.clone();
        }
        if halt {
            stopped_early = true;
            info!("early stop at epoch {epoch} (best {:.3e} at {})", stop.best, stop.best_epoch);
            break;
        }
        if epoch % 100 == 0 {
            debug!("epoch {epoch}: objective {objective:.4e}, tf {p:.3}");
        }
        adam_step(&mut state, &mut flat, &grad, &adam)?;
        if prox {
            let thresh_base = cfg.penalty.lambda_omega * datasets.len() as f64;
            for i in 0..dt {
                let row = dt + i * dx..dt + (i + 1) * dx;
                let step: f64 = row
                    .clone()
                    .map(|j| cfg.learning_rate / (state.v_hat(j, cfg.beta2).sqrt() + cfg.eps))
                    .sum::<f64>()
                    / dx as f64;
                let norm = flat[row.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                let shrink = if norm > 0.0 {
                    (1.0 - step * thresh_base / norm).max(0.0)
                } else {
                    0.0
                };
                for v in &mut flat[row] {
                    *v *= shrink;
                }
            }
        }
        hp = unpack(&flat, &hp, datasets);
    }
    let (params, best_epoch) = if stop.active {
        (best, stop.best_epoch)
    } else {
        (hp, history.len().saturating_sub(1))
    };
    Ok(TrainReport {
        params,
        history,
        best_epoch,
        stopped_early,
    })
}

/// Outcome of [`train_erm`].
#[derive(Clone, Debug)]
pub struct ErmReport {
    pub theta: Vec<f64>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Single shared parameter vector minimizing `Σ_e L(θ, D^e)`.
pub fn train_erm(
    datasets: &[EnvironmentDataset],
    model: &ModelConfig,
    theta0: Vec<f64>,
    cfg: &TrainConfig,
) -> Result<ErmReport> {
    check_datasets(datasets)?;
    cfg.validate()?;
    model.validate()?;
    if theta0.len() != model.param_count() {
        return Err(CodaError::Config("θ does not match the model".into()));
    }
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
    };
    let mut theta = theta0;
    let mut state = OptimizerState::new(theta.len());
    let mut best = theta.clone();
    let mut stop = EarlyStop::new();
    let mut history = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let p = cfg.teacher_forcing(epoch);
        let terms = cfg.execution.try_map(datasets.len(), |i| {
            let mut r = rng::stream(cfg.seed, &[0x7F, epoch as u64, i as u64]);
            let teacher = (p > 0.0).then_some((p, &mut r as &mut dyn rand::RngCore));
            let tape = Tape::new();
            let t = tape.var(Tensor::vector(&theta));
            let l = trajectory_loss(model, t, &datasets[i], cfg.solver, cfg.model_substeps, teacher)?;
            let v = l.item()?;
            Ok::<_, CodaError>((v, tape.backward(l)?.flat(t)))
        });
        let terms = terms.map_err(|e| CodaError::Training {
            epoch,
            reason: e.to_string(),
        })?;
        let mut grad = vec![0.0; theta.len()];
        let mut objective = 0.0;
        for (v, g) in &terms {
            objective += v;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        if !objective.is_finite() {
            return Err(CodaError::Training {
                epoch,
                reason: "non-finite objective".into(),
            });
        }
        history.push(EpochRecord {
            epoch,
            objective,
            env_losses: terms.iter().map(|t| t.0).collect(),
            penalty: 0.0,
            teacher_forcing_prob: p,
        });
        let (improved, halt) = stop.observe(epoch, objective, p <= cfg.tf_monitor_threshold, cfg);
        if improved {
            best = theta.clone();
        }
        if halt {
            stopped_early = true;
            break;
        }
        adam_step(&mut state, &mut theta, &grad, &adam)?;
    }
    let (theta, best_epoch) = if stop.active {
        (best, stop.best_epoch)
    } else {
        (theta, history.len().saturating_sub(1))
    };
    Ok(ErmReport {
        theta,
        history,
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut s = OptimizerState::new(2);
        let mut p = vec![1.0, -2.0];
        adam_step(&mut s, &mut p, &[0.0, 0.0], &AdamConfig::new(0.1)).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_first_step_is_learning_rate() {
        let mut s = OptimizerState::new(1);
        let mut p = vec![0.0];
        adam_step(&mut s, &mut p, &[1.0], &AdamConfig::new(0.1)).unwrap();
        // m_hat = 1, v_hat = 1
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn adam_abs_descends_through_zero() {
        let mut s = OptimizerState::new(1);
        let mut x = vec![5.0];
        let cfg = AdamConfig::new(0.01);
        let mut prev = x[0];
        let mut crossed = false;
        for _ in 0..1000 {
            let g = if x[0] > 0.0 { 1.0 } else if x[0] < 0.0 { -1.0 } else { 0.0 };
            adam_step(&mut s, &mut x, &[g], &cfg).unwrap();
            if !crossed {
                assert!(x[0] < prev);
                assert!((prev - x[0] - 0.01).abs() < 1e-6);
            }
            crossed |= x[0] <= 0.0;
            prev = x[0];
        }
        assert!(crossed);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut s = OptimizerState::new(2);
        assert!(adam_step(&mut s, &mut [0.0, 0.0], &[1.0], &AdamConfig::new(0.1)).is_err());
    }

    #[test]
    fn teacher_forcing_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.teacher_forcing(0), 1.0);
        assert!((cfg.teacher_forcing(25) - (-1.0f64).exp()).abs() < 1e-15);
    }
}
