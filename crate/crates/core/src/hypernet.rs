//! Linear hypernetwork `θ^e = θc + W ξ^e` and the locality penalties.

use crate::error::{CodaError, Result};
use crate::numeric::{Tensor, Var};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Largest supported context dimension.
pub const MAX_CONTEXT_DIM: usize = 16;

/// Trainable state: shared parameters, decoder matrix and one context per environment.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams {
    pub theta_c: Vec<f64>,
    /// Row-major `d_θ x d_ξ`.
    pub w: Vec<f64>,
    pub context_dim: usize,
    pub contexts: BTreeMap<u32, Vec<f64>>,
}

impl HyperParams {
    /// `θc` and `W` given, every listed environment starting at `ξ = 0`.
    pub fn new(theta_c: Vec<f64>, w: Vec<f64>, context_dim: usize, env_ids: &[u32]) -> Result<Self> {
        let hp = Self {
            contexts: env_ids.iter().map(|&id| (id, vec![0.0; context_dim])).collect(),
            theta_c,
            w,
            context_dim,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn param_dim(&self) -> usize {
        self.theta_c.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_dim == 0 || self.context_dim > MAX_CONTEXT_DIM {
            return Err(CodaError::Config(format!(
                "context dimension {} outside 1..={MAX_CONTEXT_DIM}",
                self.context_dim
            )));
        }
        if self.context_dim >= self.theta_c.len() {
            return Err(CodaError::Config("context dimension must be far below d_theta".into()));
        }
        if self.w.len() != self.theta_c.len() * self.context_dim {
            return Err(CodaError::Shape(format!(
                "W has {} entries, expected {} x {}",
                self.w.len(),
                self.theta_c.len(),
                self.context_dim
            )));
        }
        for (id, xi) in &self.contexts {
            if xi.len() != self.context_dim {
                return Err(CodaError::Shape(format!("context of env {id} has length {}", xi.len())));
            }
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.theta_c) || !finite(&self.w) || !self.contexts.values().all(|x| finite(x)) {
            return Err(CodaError::Numerical {
                locus: "hypernetwork parameters".into(),
            });
        }
        Ok(())
    }

    pub fn context(&self, env_id: u32) -> Result<&[f64]> {
        self.contexts
            .get(&env_id)
            .map(Vec::as_slice)
            .ok_or_else(|| CodaError::Config(format!("no context for environment {env_id}")))
    }

    /// `θ^e` for a stored environment.
    pub fn decode_env(&self, env_id: u32) -> Result<Vec<f64>> {
        decode(&self.theta_c, &self.w, self.context(env_id)?)
    }

    /// `W ξ^e` for a stored environment.
    pub fn offset(&self, env_id: u32) -> Result<Vec<f64>> {
        matvec(&self.w, self.context_dim, self.context(env_id)?)
    }

    pub fn w_matrix(&self) -> Tensor {
        Tensor::new(vec![self.theta_c.len(), self.context_dim], self.w.clone()).expect("validated W shape")
    }

    /// Column `j` of `W`.
    pub fn w_column(&self, j: usize) -> Vec<f64> {
        self.w.chunks_exact(self.context_dim).map(|row| row[j]).collect()
    }
}

fn matvec(w: &[f64], cols: usize, xi: &[f64]) -> Result<Vec<f64>> {
    if xi.len() != cols || cols == 0 || !w.len().is_multiple_of(cols) {
        return Err(CodaError::Shape(format!(
            "W with {cols} columns applied to a context of length {}",
            xi.len()
        )));
    }
    Ok(w
        .chunks_exact(cols)
        .map(|row| row.iter().zip(xi).map(|(a, b)| a * b).sum())
        .collect())
}

/// `θc + W ξ`, with `W` row-major `|θc| x |ξ|`.
pub fn decode(theta_c: &[f64], w: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
    if w.len() != theta_c.len() * xi.len() {
        return Err(CodaError::Shape(format!(
            "decode: |θc| = {}, |ξ| = {}, |W| = {}",
            theta_c.len(),
            xi.len(),
            w.len()
        )));
    }
    let off = matvec(w, xi.len(), xi)?;
    Ok(theta_c.iter().zip(off).map(|(a, b)| a + b).collect())
}

/// [`decode`] on the tape: `theta_c` `[d_θ]`, `w` `[d_θ, d_ξ]`, `xi` `[d_ξ]`.
pub fn decode_var<'t>(theta_c: Var<'t>, w: Var<'t>, xi: Var<'t>) -> Result<Var<'t>> {
    let d_xi = xi.with_value(|v| v.len());
    let d_theta = theta_c.with_value(|v| v.len());
    let off = w.matmul(xi.reshape(&[d_xi, 1])?)?.reshape(&[d_theta])?;
    theta_c.add(off)
}

/// Row-sparsity (`l1`, Ω = Σ_i ||W_i,:||_2) or spherical (`l2`, Ω = ||W||_F²) locality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyVariant {
    #[default]
    L1,
    L2,
}

impl std::str::FromStr for PenaltyVariant {
    type Err = CodaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(PenaltyVariant::L1),
            "l2" => Ok(PenaltyVariant::L2),
            other => Err(CodaError::Config(format!("unknown penalty variant '{other}'"))),
        }
    }
}

/// `R(W, ξ) = λ_ξ ||ξ||² + λ_Ω Ω(W)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    pub variant: PenaltyVariant,
    pub lambda_xi: f64,
    pub lambda_omega: f64,
}

impl PenaltyConfig {
    pub fn zero(variant: PenaltyVariant) -> Self {
        Self {
            variant,
            lambda_xi: 0.0,
            lambda_omega: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_xi >= 0.0 && self.lambda_omega >= 0.0) {
            return Err(CodaError::Config("penalty weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Ω(W) for a row-major matrix with `cols` columns.
pub fn omega(w: &[f64], cols: usize, variant: PenaltyVariant) -> f64 {
    match variant {
        PenaltyVariant::L2 => w.iter().map(|v| v * v).sum(),
        PenaltyVariant::L1 => w
            .chunks_exact(cols)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum(),
    }
}

/// `λ_ξ ||ξ||² + λ_Ω Ω(W)`.
pub fn penalty(w: &[f64], xi: &[f64], cfg: &PenaltyConfig) -> f64 {
    let cols = xi.len().max(1);
    let sq: f64 = xi.iter().map(|v| v * v).sum();
    let mut r = cfg.lambda_xi * sq;
    if cfg.lambda_omega != 0.0 {
        r += cfg.lambda_omega * omega(w, cols, cfg.variant);
    }
    r
}

/// [`penalty`] on the tape; `w` is `[d_θ, d_ξ]`.
pub fn penalty_var<'t>(w: Var<'t>, xi: Var<'t>, cfg: &PenaltyConfig) -> Result<Var<'t>> {
    let mut r = xi.sq_sum().scale(cfg.lambda_xi);
    if cfg.lambda_omega != 0.0 {
        let om = match cfg.variant {
            PenaltyVariant::L2 => w.sq_sum(),
            PenaltyVariant::L1 => w.row_norm_sum()?,
        };
        r = r.axpy(om, cfg.lambda_omega)?;
    }
    Ok(r)
}

/// Operator 2-norm (largest singular value) of a row-major matrix.
pub fn operator_norm(w: &[f64], cols: usize) -> f64 {
    if w.is_empty() || cols == 0 {
        return 0.0;
    }
    nalgebra::DMatrix::from_row_slice(w.len() / cols, cols, w)
        .singular_values()
        .max()
}

/// Both sides of the two locality upper bounds:
/// `||Wξ||₂² <= ||W||₂² ||ξ||₂²` and `||Wξ||₁ <= ||ξ||₂ Σ_i ||W_i,:||₂`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalityBounds {
    pub lhs_l2: f64,
    pub rhs_l2: f64,
    pub lhs_l1: f64,
    pub rhs_l1: f64,
}

pub fn locality_bounds_check(w: &[f64], xi: &[f64]) -> Result<LocalityBounds> {
    let off = matvec(w, xi.len(), xi)?;
    let xi_sq: f64 = xi.iter().map(|v| v * v).sum();
    let op = operator_norm(w, xi.len());
    Ok(LocalityBounds {
        lhs_l2: off.iter().map(|v| v * v).sum(),
        rhs_l2: op * op * xi_sq,
        lhs_l1: off.iter().map(|v| v.abs()).sum(),
        rhs_l1: xi_sq.sqrt() * omega(w, xi.len(), PenaltyVariant::L1),
    })
}
