//! Fixed-step explicit integrators over plain tensors and tape variables.

use super::autodiff::Var;
use super::tensor::Tensor;
use crate::error::{CodaError, Result};
use serde::{Deserialize, Serialize};

/// Fixed-step integration scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    #[default]
    Rk4,
    Euler,
}

/// State algebra needed by the integrators.
pub trait OdeState: Sized {
    /// `self + c * other`
    fn axpy(&self, other: &Self, c: f64) -> Result<Self>;
    fn all_finite(&self) -> bool;
}

impl OdeState for Tensor {
    fn axpy(&self, other: &Self, c: f64) -> Result<Self> {
        Tensor::axpy(self, other, c)
    }

    fn all_finite(&self) -> bool {
        self.is_finite()
    }
}

impl OdeState for Var<'_> {
    fn axpy(&self, other: &Self, c: f64) -> Result<Self> {
        Var::axpy(*self, *other, c)
    }

    fn all_finite(&self) -> bool {
        self.is_finite()
    }
}

fn stage<S: OdeState>(rhs: &mut impl FnMut(&S) -> Result<S>, x: &S, stage: usize) -> Result<S> {
    let k = rhs(x).map_err(|e| match e {
        CodaError::Numerical { .. } => CodaError::Integration {
            step: 0,
            stage,
            context: String::new(),
        },
        other => other,
    })?;
    if !k.all_finite() {
        return Err(CodaError::Integration {
            step: 0,
            stage,
            context: String::new(),
        });
    }
    Ok(k)
}

/// Classical fourth-order Runge-Kutta step.
pub fn rk4_step<S: OdeState>(rhs: &mut impl FnMut(&S) -> Result<S>, x: &S, dt: f64) -> Result<S> {
    let k1 = stage(rhs, x, 1)?;
    let k2 = stage(rhs, &x.axpy(&k1, 0.5 * dt)?, 2)?;
    let k3 = stage(rhs, &x.axpy(&k2, 0.5 * dt)?, 3)?;
    let k4 = stage(rhs, &x.axpy(&k3, dt)?, 4)?;
    x.axpy(&k1, dt / 6.0)?
        .axpy(&k2, dt / 3.0)?
        .axpy(&k3, dt / 3.0)?
        .axpy(&k4, dt / 6.0)
}

pub fn euler_step<S: OdeState>(rhs: &mut impl FnMut(&S) -> Result<S>, x: &S, dt: f64) -> Result<S> {
    let k1 = stage(rhs, x, 1)?;
    x.axpy(&k1, dt)
}

/// One step of `method`.
pub fn step<S: OdeState>(
    rhs: &mut impl FnMut(&S) -> Result<S>,
    x: &S,
    dt: f64,
    method: Solver,
) -> Result<S> {
    if !(dt > 0.0) {
        return Err(CodaError::Config(format!("step size {dt} must be > 0")));
    }
    match method {
        Solver::Rk4 => rk4_step(rhs, x, dt),
        Solver::Euler => euler_step(rhs, x, dt),
    }
}

fn tag_step(e: CodaError, index: usize) -> CodaError {
    match e {
        CodaError::Integration { stage, context, .. } => CodaError::Integration {
            step: index,
            stage,
            context,
        },
        other => other,
    }
}

/// Returns `n_steps + 1` states starting at `x0`.
pub fn integrate<S: OdeState + Clone>(
    mut rhs: impl FnMut(&S) -> Result<S>,
    x0: &S,
    dt: f64,
    n_steps: usize,
    method: Solver,
) -> Result<Vec<S>> {
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(x0.clone());
    for i in 0..n_steps {
        let next = step(&mut rhs, &states[i], dt, method).map_err(|e| tag_step(e, i))?;
        states.push(next);
    }
    Ok(states)
}

/// Integrates over `n_obs` observation intervals of length `dt_obs`, taking
/// `substeps` internal steps per interval and keeping only observation frames.
pub fn integrate_observed<S: OdeState + Clone>(
    mut rhs: impl FnMut(&S) -> Result<S>,
    x0: &S,
    dt_obs: f64,
    n_obs: usize,
    substeps: usize,
    method: Solver,
) -> Result<Vec<S>> {
    let substeps = substeps.max(1);
    let h = dt_obs / substeps as f64;
    let mut frames = Vec::with_capacity(n_obs + 1);
    frames.push(x0.clone());
    let mut x = x0.clone();
    for k in 0..n_obs {
        for s in 0..substeps {
            x = step(&mut rhs, &x, h, method).map_err(|e| tag_step(e, k * substeps + s))?;
        }
        frames.push(x.clone());
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_rhs(x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }

    #[test]
    fn zero_field_is_fixed_point() {
        let x = Tensor::vector(&[1.5, -2.0]);
        let y = rk4_step(&mut |x: &Tensor| Ok(Tensor::zeros(x.shape())), &x, 0.3).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn rk4_exponential_single_step() {
        let y = rk4_step(&mut identity_rhs, &Tensor::scalar(1.0), 0.1).unwrap();
        let err = (y.item().unwrap() - 0.1_f64.exp()).abs();
        assert!(err < 1e-7 && err > 1e-8, "err {err}");
    }

    #[test]
    fn rk4_exponential_integration() {
        let states = integrate(identity_rhs, &Tensor::scalar(1.0), 0.01, 100, Solver::Rk4).unwrap();
        assert_eq!(states.len(), 101);
        assert!((states[100].item().unwrap() - std::f64::consts::E).abs() < 1e-7);
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let s = integrate(identity_rhs, &Tensor::scalar(2.0), 0.1, 0, Solver::Euler).unwrap();
        assert_eq!(s, vec![Tensor::scalar(2.0)]);
    }

    #[test]
    fn blow_up_reports_step() {
        let err = integrate(
            |x: &Tensor| Ok(x.map(|v| v * v * 1e150)),
            &Tensor::scalar(1e100),
            1.0,
            5,
            Solver::Rk4,
        )
        .unwrap_err();
        assert!(matches!(err, CodaError::Integration { step: 0, .. }), "{err}");
    }
}
