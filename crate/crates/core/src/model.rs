//! Dynamics models `g_θ` as pure functions of one flat parameter vector.
//!
//! The flat layout lets the hypernetwork offset every layer at once. Layers are
//! stored in order, each as its weight followed by its bias.

use crate::error::{CodaError, Result};
use crate::numeric::{Tape, Tensor, Var};
use crate::rng;
use crate::systems::SystemKind;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Swish,
    Identity,
}

/// Architecture of the dynamics model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// `depth` dense layers `input -> width -> ... -> width -> input`.
    Mlp {
        input: usize,
        width: usize,
        depth: usize,
        #[serde(default)]
        activation: Activation,
    },
    /// `depth` same-size periodic convolutions `channels -> hidden -> ... -> channels`.
    Conv2d {
        channels: usize,
        hidden: usize,
        depth: usize,
        kernel: usize,
        height: usize,
        width: usize,
        #[serde(default)]
        activation: Activation,
    },
    /// `g(x) = Φ(x) Θ` with Φ the monomials of the state up to `degree`.
    Polynomial { state_dim: usize, degree: usize },
}

/// One contiguous block of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlice {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl LayerSlice {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Exponent tuples of all monomials in `dim` variables of total degree `<= degree`,
/// graded then lexicographic (constant first).
pub fn monomials(dim: usize, degree: usize) -> Vec<Vec<usize>> {
    fn rec(dim: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == dim {
            if left == 0 {
                out.push(prefix.clone());
            }
            return;
        }
        for e in (0..=left).rev() {
            prefix.push(e);
            rec(dim, left - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for d in 0..=degree {
        rec(dim, d, &mut Vec::new(), &mut out);
    }
    out
}

impl ModelConfig {
    /// 4-layer width-64 swish MLP over a `dim`-dimensional state.
    pub fn mlp(dim: usize) -> Self {
        ModelConfig::Mlp {
            input: dim,
            width: 64,
            depth: 4,
            activation: Activation::Swish,
        }
    }

    /// 4-layer 3x3 periodic ConvNet with `hidden` channels on a 2-channel grid.
    pub fn conv(hidden: usize, height: usize, width: usize) -> Self {
        ModelConfig::Conv2d {
            channels: 2,
            hidden,
            depth: 4,
            kernel: 3,
            height,
            width,
            activation: Activation::Swish,
        }
    }

    /// Default model per system; Gray-Scott uses 16 hidden channels.
    pub fn for_system(kind: SystemKind) -> Self {
        match kind {
            SystemKind::Lv => Self::mlp(2),
            SystemKind::Go => Self::mlp(7),
            SystemKind::Gs => Self::conv(16, 32, 32),
        }
    }

    /// Full-width Gray-Scott ConvNet (64 hidden channels).
    pub fn gs_full() -> Self {
        Self::conv(64, 32, 32)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ModelConfig::Mlp { input, width, depth, .. } => {
                if depth < 2 || input == 0 || width == 0 {
                    return Err(CodaError::Config(format!("invalid mlp {self:?} (depth >= 2)")));
                }
            }
            ModelConfig::Conv2d {
                channels,
                hidden,
                depth,
                kernel,
                height,
                width,
                ..
            } => {
                if depth < 2 || channels == 0 || hidden == 0 || kernel % 2 == 0 || kernel > height || kernel > width
                {
                    return Err(CodaError::Config(format!("invalid conv2d {self:?}")));
                }
            }
            ModelConfig::Polynomial { state_dim, .. } => {
                if state_dim == 0 {
                    return Err(CodaError::Config("polynomial model needs state_dim >= 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Shape of one (unbatched) state.
    pub fn state_shape(&self) -> Vec<usize> {
        match *self {
            ModelConfig::Mlp { input, .. } => vec![input],
            ModelConfig::Conv2d {
                channels,
                height,
                width,
                ..
            } => vec![channels, height, width],
            ModelConfig::Polynomial { state_dim, .. } => vec![state_dim],
        }
    }

    fn widths(&self) -> Vec<usize> {
        match *self {
            ModelConfig::Mlp {
                input, width, depth, ..
            } => layer_widths(input, width, depth),
            ModelConfig::Conv2d {
                channels,
                hidden,
                depth,
                ..
            } => layer_widths(channels, hidden, depth),
            ModelConfig::Polynomial { .. } => Vec::new(),
        }
    }

    /// Parameter blocks in storage order.
    pub fn layout(&self) -> Vec<LayerSlice> {
        let mut out = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            out.push(LayerSlice {
                name,
                offset,
                shape,
            });
            offset += len;
        };
        match *self {
            ModelConfig::Mlp { .. } => {
                for (l, w) in self.widths().windows(2).enumerate() {
                    push(format!("dense{l}.weight"), vec![w[0], w[1]]);
                    push(format!("dense{l}.bias"), vec![w[1]]);
                }
            }
            ModelConfig::Conv2d { kernel, .. } => {
                for (l, w) in self.widths().windows(2).enumerate() {
                    push(format!("conv{l}.weight"), vec![w[1], w[0], kernel, kernel]);
                    push(format!("conv{l}.bias"), vec![w[1]]);
                }
            }
            ModelConfig::Polynomial { state_dim, degree } => {
                let f = monomials(state_dim, degree).len();
                push("coefficients".into(), vec![f, state_dim]);
            }
        }
        out
    }

    /// Number of scalars across all weights and biases.
    pub fn param_count(&self) -> usize {
        match *self {
            ModelConfig::Mlp { .. } => self.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum(),
            ModelConfig::Conv2d { kernel, .. } => self
                .widths()
                .windows(2)
                .map(|w| w[0] * w[1] * kernel * kernel + w[1])
                .sum(),
            ModelConfig::Polynomial { state_dim, degree } => {
                monomials(state_dim, degree).len() * state_dim
            }
        }
    }

    fn activation(&self) -> Activation {
        match *self {
            ModelConfig::Mlp { activation, .. } | ModelConfig::Conv2d { activation, .. } => activation,
            ModelConfig::Polynomial { .. } => Activation::Identity,
        }
    }

    /// `g_θ(x)` for a batch `x` of shape `[B, state...]`; the output has the same shape.
    pub fn forward<'t>(&self, theta: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let n = self.param_count();
        let tlen = theta.with_value(|t| t.len());
        if tlen != n {
            return Err(CodaError::Shape(format!("model takes {n} parameters, got {tlen}")));
        }
        let xs = x.shape();
        let state = self.state_shape();
        if xs.len() != state.len() + 1 || xs[1..] != state[..] {
            return Err(CodaError::Shape(format!(
                "model state is [B, {state:?}], got {xs:?}"
            )));
        }
        let layout = self.layout();
        let act = self.activation();
        match self {
            ModelConfig::Mlp { .. } | ModelConfig::Conv2d { .. } => {
                let layers = layout.len() / 2;
                let mut h = x;
                for l in 0..layers {
                    let (ws, bs) = (&layout[2 * l], &layout[2 * l + 1]);
                    let w = theta.slice(ws.offset, &ws.shape)?;
                    let b = theta.slice(bs.offset, &bs.shape)?;
                    h = match self {
                        ModelConfig::Mlp { .. } => h.matmul(w)?.add_row(b)?,
                        _ => h.conv2d_periodic(w, b)?,
                    };
                    if l + 1 < layers && act == Activation::Swish {
                        h = h.swish();
                    }
                }
                Ok(h)
            }
            ModelConfig::Polynomial { state_dim, degree } => {
                let coeffs = theta.slice(layout[0].offset, &layout[0].shape)?;
                let feats = polynomial_features(x, *state_dim, *degree)?;
                feats.matmul(coeffs)
            }
        }
    }

    /// Evaluates `g_θ` on a plain batch without keeping the tape.
    pub fn eval(&self, theta: &[f64], x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let t = tape.constant(Tensor::vector(theta));
        let xv = tape.constant(x.clone());
        let y = self.forward(t, xv)?;
        tape.check_finite()?;
        Ok(y.value())
    }

    /// Uniform `±1/sqrt(fan_in)` initialization of weights and biases,
    /// deterministic per seed. Polynomial coefficients start in `±0.1`.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, &[0x1417]);
        let mut theta = vec![0.0; self.param_count()];
        let layout = self.layout();
        for block in &layout {
            let bound = match self {
                ModelConfig::Polynomial { .. } => 0.1,
                _ => 1.0 / (self.fan_in(block) as f64).sqrt(),
            };
            for v in &mut theta[block.offset..block.offset + block.len()] {
                *v = r.gen_range(-bound..=bound);
            }
        }
        theta
    }

    /// Inputs feeding one unit of the layer owning `block`.
    pub fn fan_in(&self, block: &LayerSlice) -> usize {
        match self {
            ModelConfig::Mlp { .. } => {
                if block.name.ends_with(".bias") {
                    // bias of layer l shares the fan-in of dense{l}.weight
                    let w = self
                        .layout()
                        .into_iter()
                        .find(|b| b.name == block.name.replace(".bias", ".weight"))
                        .expect("weight for bias");
                    w.shape[0]
                } else {
                    block.shape[0]
                }
            }
            ModelConfig::Conv2d { kernel, .. } => {
                if block.name.ends_with(".bias") {
                    let w = self
                        .layout()
                        .into_iter()
                        .find(|b| b.name == block.name.replace(".bias", ".weight"))
                        .expect("weight for bias");
                    w.shape[1] * kernel * kernel
                } else {
                    block.shape[1] * kernel * kernel
                }
            }
            ModelConfig::Polynomial { .. } => block.shape[0],
        }
    }
}

fn layer_widths(io: usize, hidden: usize, depth: usize) -> Vec<usize> {
    let mut w = vec![io];
    w.extend(std::iter::repeat_n(hidden, depth.saturating_sub(1)));
    w.push(io);
    w
}

/// Monomial features `[B, F]` of a state batch `[B, dim]`.
pub fn polynomial_features<'t>(x: Var<'t>, dim: usize, degree: usize) -> Result<Var<'t>> {
    let b = x.shape()[0];
    let tape = x.tape();
    let cols: Vec<Var<'t>> = (0..dim).map(|j| x.select_cols(&[j])).collect::<Result<_>>()?;
    let mut feats = Vec::new();
    for exps in monomials(dim, degree) {
        let mut term: Option<Var<'t>> = None;
        for (j, &e) in exps.iter().enumerate() {
            for _ in 0..e {
                term = Some(match term {
                    None => cols[j],
                    Some(t) => t.mul(cols[j])?,
                });
            }
        }
        feats.push(term.unwrap_or_else(|| tape.constant(Tensor::full(&[b, 1], 1.0))));
    }
    Var::concat_cols(&feats)
}

/// Monomial features of one plain state.
pub fn polynomial_features_plain(x: &[f64], degree: usize) -> Vec<f64> {
    monomials(x.len(), degree)
        .iter()
        .map(|exps| exps.iter().zip(x).map(|(&e, &v)| v.powi(e as i32)).product())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_param_count() {
        assert_eq!(ModelConfig::mlp(2).param_count(), 8642);
        let small = ModelConfig::Mlp {
            input: 1,
            width: 4,
            depth: 2,
            activation: Activation::Swish,
        };
        assert_eq!(small.param_count(), 13);
    }

    #[test]
    fn conv_param_count_matches_layout() {
        let c = ModelConfig::Conv2d {
            channels: 2,
            hidden: 8,
            depth: 4,
            kernel: 3,
            height: 8,
            width: 8,
            activation: Activation::Swish,
        };
        let layout = c.layout();
        let enumerated: usize = layout.iter().map(LayerSlice::len).sum();
        assert_eq!(enumerated, c.param_count());
        assert_eq!(c.param_count(), 1466);
        // layout is a bijection onto 0..d_theta
        let mut next = 0;
        for b in &layout {
            assert_eq!(b.offset, next);
            next += b.len();
        }
        assert_eq!(next, c.param_count());
    }

    #[test]
    fn zero_params_give_zero_output() {
        let c = ModelConfig::mlp(2);
        let y = c
            .eval(&vec![0.0; c.param_count()], &Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_composition() {
        let c = ModelConfig::Mlp {
            input: 1,
            width: 1,
            depth: 2,
            activation: Activation::Identity,
        };
        let y = c.eval(&[2.0, 1.0, 2.0, 1.0], &Tensor::new(vec![1, 1], vec![1.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let c = ModelConfig::mlp(2);
        let a = c.init_params(5);
        assert_eq!(a, c.init_params(5));
        assert_ne!(a, c.init_params(6));
        for block in c.layout() {
            let bound = (6.0 / c.fan_in(&block) as f64).sqrt();
            assert!(a[block.offset..block.offset + block.len()].iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn monomial_enumeration() {
        assert_eq!(
            monomials(2, 2),
            vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]]
        );
        let f = polynomial_features_plain(&[2.0, 3.0], 2);
        assert_eq!(f, vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let c = ModelConfig::mlp(2);
        let theta = c.init_params(0);
        assert!(c.eval(&theta, &Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap()).is_err());
        assert!(c.eval(&theta[1..], &Tensor::new(vec![1, 2], vec![0.0; 2]).unwrap()).is_err());
    }
}
