//! Ground-truth dynamics families, environment grids and dataset generation.
//!
//! Three families are provided: Lotka-Volterra predator-prey (`Lv`), the
//! seven-species glycolytic oscillator (`Go`) and the Gray-Scott
//! reaction-diffusion PDE on a periodic 32x32 grid (`Gs`). Each environment
//! fixes the two varying parameters of its family.

use crate::error::{CodaError, Result};
use crate::exec::Execution;
use crate::numeric::{integrate_observed, Solver, Tensor};
use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    Lv,
    Go,
    Gs,
}

impl SystemKind {
    pub fn name(self) -> &'static str {
        match self {
            SystemKind::Lv => "lv",
            SystemKind::Go => "go",
            SystemKind::Gs => "gs",
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SystemKind {
    type Err = CodaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lv" | "lotka-volterra" => Ok(SystemKind::Lv),
            "go" | "glycolytic-oscillator" => Ok(SystemKind::Go),
            "gs" | "gray-scott" => Ok(SystemKind::Gs),
            other => Err(CodaError::Config(format!("unknown system '{other}' (expected lv, go or gs)"))),
        }
    }
}

/// Dataset split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Adapt,
    Eval,
}

impl Split {
    pub fn code(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Adapt => 2,
            Split::Eval => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Adapt => "adapt",
            Split::Eval => "eval",
        }
    }
}

/// Distribution of initial states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InitialCondition {
    /// Independent uniform draw per state component.
    UniformBox { low: Vec<f64>, high: Vec<f64> },
    /// `count` non-overlapping `size x size` squares on a periodic grid set to
    /// `inside` (u, v); every other cell is `outside`.
    Squares {
        count: usize,
        size: usize,
        inside: [f64; 2],
        outside: [f64; 2],
    },
}

/// Per-species initial ranges of the glycolytic oscillator, transcribed from
/// Table 2 of Daniels & Nemenman (2015), "Efficient inference of parsimonious
/// phenomenological models of cellular dynamics using S-systems and
/// alternating regression".
pub const GO_INITIAL_RANGES: [(f64, f64); 7] = [
    (0.15, 1.60),
    (0.19, 2.16),
    (0.04, 0.20),
    (0.10, 0.35),
    (0.08, 0.30),
    (0.14, 2.67),
    (0.05, 0.10),
];

/// A dynamics family with its fixed constants, observation grid and
/// initial-condition distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub kind: SystemKind,
    pub constants: BTreeMap<String, f64>,
    pub param_names: Vec<String>,
    pub state_shape: Vec<usize>,
    /// Observation step.
    pub dt: f64,
    pub horizon: f64,
    /// Ground-truth solver step; must divide `dt`.
    pub internal_dt: f64,
    /// Grid spacing for PDE families.
    pub spatial_step: Option<f64>,
    pub initial_condition: InitialCondition,
}

fn constants(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

impl SystemSpec {
    pub fn new(kind: SystemKind) -> Self {
        match kind {
            SystemKind::Lv => Self::lotka_volterra(),
            SystemKind::Go => Self::glycolytic_oscillator(),
            SystemKind::Gs => Self::gray_scott(),
        }
    }

    pub fn lotka_volterra() -> Self {
        Self {
            kind: SystemKind::Lv,
            constants: constants(&[("alpha", 0.5), ("gamma", 0.5)]),
            param_names: vec!["beta".into(), "delta".into()],
            state_shape: vec![2],
            dt: 0.5,
            horizon: 10.0,
            internal_dt: 0.1,
            spatial_step: None,
            initial_condition: InitialCondition::UniformBox {
                low: vec![1.0, 1.0],
                high: vec![3.0, 3.0],
            },
        }
    }

    pub fn glycolytic_oscillator() -> Self {
        Self {
            kind: SystemKind::Go,
            constants: constants(&[
                ("J0", 2.5),
                ("k2", 6.0),
                ("k3", 16.0),
                ("k4", 100.0),
                ("k5", 1.28),
                ("k6", 12.0),
                ("q", 4.0),
                ("N", 1.0),
                ("A", 4.0),
                ("kappa", 13.0),
                ("psi", 0.1),
                ("k", 1.8),
            ]),
            param_names: vec!["k1".into(), "K1".into()],
            state_shape: vec![7],
            dt: 0.05,
            horizon: 1.0,
            internal_dt: 0.0025,
            spatial_step: None,
            initial_condition: InitialCondition::UniformBox {
                low: GO_INITIAL_RANGES.iter().map(|r| r.0).collect(),
                high: GO_INITIAL_RANGES.iter().map(|r| r.1).collect(),
            },
        }
    }

    pub fn gray_scott() -> Self {
        Self {
            kind: SystemKind::Gs,
            constants: constants(&[("Du", 0.2097), ("Dv", 0.105)]),
            param_names: vec!["F".into(), "k".into()],
            state_shape: vec![2, 32, 32],
            dt: 40.0,
            horizon: 400.0,
            internal_dt: 0.5,
            spatial_step: Some(2.0),
            initial_condition: InitialCondition::Squares {
                count: 3,
                size: 2,
                inside: [0.95, 0.05],
                outside: [0.0, 1.0],
            },
        }
    }

    pub fn param_dim(&self) -> usize {
        self.param_names.len()
    }

    pub fn state_len(&self) -> usize {
        self.state_shape.iter().product()
    }

    /// Number of observation intervals `T / dt`.
    pub fn n_intervals(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    /// Internal solver steps per observation interval.
    pub fn substeps(&self) -> usize {
        ((self.dt / self.internal_dt).round() as usize).max(1)
    }

    fn constant(&self, name: &str) -> Result<f64> {
        self.constants
            .get(name)
            .copied()
            .ok_or_else(|| CodaError::Config(format!("{} is missing constant '{name}'", self.kind)))
    }

    /// Training and adaptation parameter lists, one list per varying parameter.
    fn grid_values(&self, split: Split) -> Result<[Vec<f64>; 2]> {
        Ok(match (self.kind, split) {
            (SystemKind::Lv, Split::Train) => [vec![0.5, 0.75, 1.0], vec![0.5, 0.75, 1.0]],
            (SystemKind::Lv, Split::Adapt) => [vec![0.625, 1.125], vec![0.625, 1.125]],
            (SystemKind::Go, Split::Train) => [vec![100.0, 90.0, 80.0], vec![1.0, 0.75, 0.5]],
            (SystemKind::Go, Split::Adapt) => [vec![85.0, 95.0], vec![0.625, 0.875]],
            (SystemKind::Gs, Split::Train) => [vec![0.030, 0.039], vec![0.058, 0.062]],
            (SystemKind::Gs, Split::Adapt) => [vec![0.033, 0.036], vec![0.059, 0.061]],
            (_, Split::Eval) => {
                return Err(CodaError::Config(
                    "environment grids exist for the train and adapt splits only".into(),
                ))
            }
        })
    }
}

/// One member of a family: its id and varying parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub id: u32,
    pub params: Vec<f64>,
}

/// Observed states `[T/dt + 1, state...]` of one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub env_id: u32,
    pub dt: f64,
    pub states: Tensor,
}

impl Trajectory {
    pub fn n_frames(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        let len = self.states.len() / self.n_frames();
        &self.states.data()[k * len..(k + 1) * len]
    }
}

/// All trajectories observed in one environment.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentDataset {
    pub environment: Environment,
    pub split: Split,
    pub state_shape: Vec<usize>,
    pub trajectories: Vec<Trajectory>,
}

impl EnvironmentDataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn n_frames(&self) -> usize {
        self.trajectories.first().map_or(0, Trajectory::n_frames)
    }

    pub fn dt(&self) -> f64 {
        self.trajectories.first().map_or(0.0, |t| t.dt)
    }

    /// Frame `k` of every trajectory stacked as `[N, state...]`.
    pub fn frame_batch(&self, k: usize) -> Tensor {
        let mut shape = vec![self.trajectories.len()];
        shape.extend_from_slice(&self.state_shape);
        let mut data = Vec::with_capacity(shape.iter().product());
        for t in &self.trajectories {
            data.extend_from_slice(t.frame(k));
        }
        Tensor::new(shape, data).expect("consistent trajectory shapes")
    }

    /// Copy restricted to the first `n` trajectories.
    pub fn take(&self, n: usize) -> Self {
        Self {
            trajectories: self.trajectories.iter().take(n).cloned().collect(),
            ..self.clone()
        }
    }
}

fn check_params(spec: &SystemSpec, p: &[f64]) -> Result<()> {
    if p.len() != spec.param_dim() {
        return Err(CodaError::Shape(format!(
            "{} takes {} parameters, got {}",
            spec.kind,
            spec.param_dim(),
            p.len()
        )));
    }
    Ok(())
}

/// Exact right-hand side of `spec` with varying parameters `p` at state `x`.
pub fn rhs(spec: &SystemSpec, p: &[f64], x: &Tensor) -> Result<Tensor> {
    check_params(spec, p)?;
    if x.shape() != spec.state_shape.as_slice() {
        return Err(CodaError::Shape(format!(
            "{} state must be {:?}, got {:?}",
            spec.kind,
            spec.state_shape,
            x.shape()
        )));
    }
    let s = x.data();
    let out = match spec.kind {
        SystemKind::Lv => {
            let (alpha, gamma) = (spec.constant("alpha")?, spec.constant("gamma")?);
            let (beta, delta) = (p[0], p[1]);
            let (u, v) = (s[0], s[1]);
            vec![alpha * u - beta * u * v, delta * u * v - gamma * v]
        }
        SystemKind::Go => go_rhs(spec, p, s)?,
        SystemKind::Gs => gs_rhs(spec, p, s)?,
    };
    Tensor::new(spec.state_shape.clone(), out)
}

fn go_rhs(spec: &SystemSpec, p: &[f64], s: &[f64]) -> Result<Vec<f64>> {
    let c = |n: &str| spec.constant(n);
    let (j0, k2, k3, k4, k5, k6) = (c("J0")?, c("k2")?, c("k3")?, c("k4")?, c("k5")?, c("k6")?);
    let (q, n, a, kappa, psi, k) = (c("q")?, c("N")?, c("A")?, c("kappa")?, c("psi")?, c("k")?);
    let (k1, big_k1) = (p[0], p[1]);
    let (s1, s2, s3, s4, s5, s6, s7) = (s[0], s[1], s[2], s[3], s[4], s[5], s[6]);
    let v1 = k1 * s1 * s6 / (1.0 + (s6 / big_k1).powf(q));
    let v2 = k2 * s2 * (n - s5);
    let v3 = k3 * s3 * (a - s6);
    let v4 = k4 * s4 * s5;
    let v6 = k6 * s2 * s5;
    let leak = kappa * (s4 - s7);
    Ok(vec![
        j0 - v1,
        2.0 * v1 - v2 - v6,
        v2 - v3,
        v3 - v4 - leak,
        v2 - v4 - v6,
        -2.0 * v1 + 2.0 * v3 - k5 * s6,
        psi * leak - k * s7,
    ])
}

/// Five-point periodic Laplacian (unscaled) of one `h x w` channel.
pub fn periodic_laplacian(field: &[f64], h: usize, w: usize, out: &mut [f64]) {
    for i in 0..h {
        let up = (i + h - 1) % h;
        let down = (i + 1) % h;
        for j in 0..w {
            let left = (j + w - 1) % w;
            let right = (j + 1) % w;
            out[i * w + j] = field[up * w + j] + field[down * w + j] + field[i * w + left]
                + field[i * w + right]
                - 4.0 * field[i * w + j];
        }
    }
}

fn gs_rhs(spec: &SystemSpec, p: &[f64], s: &[f64]) -> Result<Vec<f64>> {
    let (du, dv) = (spec.constant("Du")?, spec.constant("Dv")?);
    let ds = spec
        .spatial_step
        .ok_or_else(|| CodaError::Config("gray-scott needs a spatial step".into()))?;
    let (feed, kill) = (p[0], p[1]);
    let (h, w) = (spec.state_shape[1], spec.state_shape[2]);
    let hw = h * w;
    let (u, v) = s.split_at(hw);
    let mut lap_u = vec![0.0; hw];
    let mut lap_v = vec![0.0; hw];
    periodic_laplacian(u, h, w, &mut lap_u);
    periodic_laplacian(v, h, w, &mut lap_v);
    let inv = 1.0 / (ds * ds);
    let mut out = vec![0.0; 2 * hw];
    for i in 0..hw {
        let uvv = u[i] * v[i] * v[i];
        out[i] = du * lap_u[i] * inv - uvv + feed * (1.0 - u[i]);
        out[hw + i] = dv * lap_v[i] * inv + uvv - (feed + kill) * v[i];
    }
    Ok(out)
}

/// Draws one initial state.
pub fn sample_initial_condition(spec: &SystemSpec, rng: &mut impl Rng) -> Result<Tensor> {
    match &spec.initial_condition {
        InitialCondition::UniformBox { low, high } => {
            if low.len() != spec.state_len() || high.len() != low.len() {
                return Err(CodaError::Config("initial box does not match the state".into()));
            }
            let data = low
                .iter()
                .zip(high)
                .map(|(&l, &h)| rng.gen_range(l..=h))
                .collect();
            Tensor::new(spec.state_shape.clone(), data)
        }
        InitialCondition::Squares {
            count,
            size,
            inside,
            outside,
        } => {
            let (h, w) = (spec.state_shape[1], spec.state_shape[2]);
            if count * size * size > h * w {
                return Err(CodaError::Config("squares do not fit on the grid".into()));
            }
            let hw = h * w;
            let mut marked = vec![false; hw];
            let mut placed = 0;
            while placed < *count {
                let (ci, cj) = (rng.gen_range(0..h), rng.gen_range(0..w));
                let cells: Vec<usize> = (0..*size)
                    .flat_map(|di| (0..*size).map(move |dj| ((ci + di) % h) * w + (cj + dj) % w))
                    .collect();
                // rejection keeps the squares disjoint
                if cells.iter().any(|&c| marked[c]) {
                    continue;
                }
                for c in cells {
                    marked[c] = true;
                }
                placed += 1;
            }
            let mut data = vec![0.0; 2 * hw];
            for (i, &m) in marked.iter().enumerate() {
                let (u, v) = if m { (inside[0], inside[1]) } else { (outside[0], outside[1]) };
                data[i] = u;
                data[hw + i] = v;
            }
            Tensor::new(spec.state_shape.clone(), data)
        }
    }
}

/// Cartesian product of the split's parameter lists, first parameter outermost.
///
/// Train environments get ids `0..n_train`; adaptation environments continue
/// from `n_train`.
pub fn environment_grid(spec: &SystemSpec, split: Split) -> Result<Vec<Environment>> {
    let first_id = match split {
        Split::Train => 0,
        _ => {
            let [a, b] = spec.grid_values(Split::Train)?;
            (a.len() * b.len()) as u32
        }
    };
    let [a, b] = spec.grid_values(split)?;
    let mut envs = Vec::with_capacity(a.len() * b.len());
    for &pa in &a {
        for &pb in &b {
            envs.push(Environment {
                id: first_id + envs.len() as u32,
                params: vec![pa, pb],
            });
        }
    }
    Ok(envs)
}

/// Simulates one trajectory from `x0` with the ground-truth solver.
pub fn simulate(spec: &SystemSpec, env: &Environment, x0: &Tensor) -> Result<Trajectory> {
    let frames = integrate_observed(
        |x: &Tensor| rhs(spec, &env.params, x),
        x0,
        spec.dt,
        spec.n_intervals(),
        spec.substeps(),
        Solver::Rk4,
    )
    .map_err(|e| e.with_context(format!("{} env {}", spec.kind, env.id)))?;
    Ok(Trajectory {
        env_id: env.id,
        dt: spec.dt,
        states: Tensor::stack(&frames)?,
    })
}

/// `n` trajectories of `env`, initial conditions drawn from the stream
/// `(seed, split, env id, trajectory index)`.
pub fn generate_dataset(
    spec: &SystemSpec,
    env: &Environment,
    n: usize,
    seed: u64,
    split: Split,
    exec: Execution,
) -> Result<EnvironmentDataset> {
    if n == 0 {
        return Err(CodaError::Config("a dataset needs at least one trajectory".into()));
    }
    check_params(spec, &env.params)?;
    let trajectories = exec.try_map(n, |i| {
        let mut r = rng::stream(seed, &[split.code(), u64::from(env.id), i as u64]);
        let x0 = sample_initial_condition(spec, &mut r)?;
        simulate(spec, env, &x0)
    })?;
    Ok(EnvironmentDataset {
        environment: env.clone(),
        split,
        state_shape: spec.state_shape.clone(),
        trajectories,
    })
}

/// Lotka-Volterra first integral `delta x - gamma ln x + beta y - alpha ln y`.
pub fn lv_first_integral(spec: &SystemSpec, p: &[f64], x: &[f64]) -> Result<f64> {
    let (alpha, gamma) = (spec.constant("alpha")?, spec.constant("gamma")?);
    let (beta, delta) = (p[0], p[1]);
    Ok(delta * x[0] - gamma * x[0].ln() + beta * x[1] - alpha * x[1].ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn lv_equilibrium_and_hand_value() {
        let mut spec = SystemSpec::lotka_volterra();
        let f = rhs(&spec, &[0.5, 0.5], &Tensor::vector(&[1.0, 1.0])).unwrap();
        assert_eq!(f.data(), &[0.0, 0.0]);
        let f = rhs(&spec, &[0.75, 0.75], &Tensor::vector(&[1.0, 3.0])).unwrap();
        assert!((f.data()[0] + 1.75).abs() < 1e-15 && (f.data()[1] - 0.75).abs() < 1e-15);
        spec.constants.insert("alpha".into(), 0.5);
        assert!(rhs(&spec, &[0.5], &Tensor::vector(&[1.0, 1.0])).is_err());
        assert!(rhs(&spec, &[0.5, 0.5], &Tensor::vector(&[1.0, 1.0, 1.0])).is_err());
    }

    #[test]
    fn gs_homogeneous_steady_state() {
        let spec = SystemSpec::gray_scott();
        let mut data = vec![1.0; 1024];
        data.extend(vec![0.0; 1024]);
        let x = Tensor::new(vec![2, 32, 32], data).unwrap();
        let f = rhs(&spec, &[0.03, 0.06], &x).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lv_samples_in_box() {
        let spec = SystemSpec::lotka_volterra();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let x = sample_initial_condition(&spec, &mut r).unwrap();
            assert!(x.data().iter().all(|&v| (1.0..=3.0).contains(&v)));
        }
    }

    #[test]
    fn gs_initial_squares() {
        let spec = SystemSpec::gray_scott();
        for seed in 0..50 {
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = sample_initial_condition(&spec, &mut r).unwrap();
            let (u, v) = x.data().split_at(1024);
            let inside = u.iter().zip(v).filter(|&(&a, &b)| a == 0.95 && b == 0.05).count();
            let outside = u.iter().zip(v).filter(|&(&a, &b)| a == 0.0 && b == 1.0).count();
            assert_eq!(inside, 12);
            assert_eq!(outside, 1024 - 12);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = SystemSpec::glycolytic_oscillator();
        let a = sample_initial_condition(&spec, &mut rng::stream(17, &[])).unwrap();
        let b = sample_initial_condition(&spec, &mut rng::stream(17, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grids() {
        let lv = SystemSpec::lotka_volterra();
        let train = environment_grid(&lv, Split::Train).unwrap();
        assert_eq!(train.len(), 9);
        assert_eq!(train[0].params, vec![0.5, 0.5]);
        assert_eq!(train[1].params, vec![0.5, 0.75]);
        let adapt = environment_grid(&lv, Split::Adapt).unwrap();
        assert_eq!(adapt.len(), 4);
        assert_eq!(adapt[0].id, 9);
        let go = SystemSpec::glycolytic_oscillator();
        assert_eq!(environment_grid(&go, Split::Adapt).unwrap().len(), 4);
        assert!(environment_grid(&go, Split::Eval).is_err());
        for kind in [SystemKind::Lv, SystemKind::Go, SystemKind::Gs] {
            let spec = SystemSpec::new(kind);
            let tr = environment_grid(&spec, Split::Train).unwrap();
            let ad = environment_grid(&spec, Split::Adapt).unwrap();
            for a in &ad {
                assert!(tr.iter().all(|t| t.params != a.params), "{kind}");
                assert!(a.params.iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn lv_dataset_shape_and_determinism() {
        let spec = SystemSpec::lotka_volterra();
        let env = environment_grid(&spec, Split::Train).unwrap().remove(0);
        let d = generate_dataset(&spec, &env, 4, 3, Split::Train, Execution::Sequential).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(d.trajectories[0].states.shape(), &[21, 2]);
        let d2 = generate_dataset(&spec, &env, 4, 3, Split::Train, Execution::Parallel).unwrap();
        assert_eq!(d, d2);
        assert!(generate_dataset(&spec, &env, 0, 3, Split::Train, Execution::Sequential).is_err());
    }
}
