//! Metrics, parameter estimation from contexts, gradient spectra and loss landscapes.

use crate::error::{CodaError, Result};
use crate::exec::Execution;
use crate::model::ModelConfig;
use crate::numeric::{Solver, Tape, Tensor, Var};
use crate::rng;
use crate::systems::{rhs, Environment, EnvironmentDataset, SystemSpec};
use crate::training::trajectory_loss;
use log::warn;
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// `(1/d) Σ_{j: y_j ≠ 0} |z_j - y_j| / |y_j|`, as a fraction.
///
/// Zero targets are skipped but still counted in `d`.
pub fn mape(z: &[f64], y: &[f64]) -> f64 {
    assert_eq!(z.len(), y.len(), "mape: length mismatch");
    if y.is_empty() {
        return 0.0;
    }
    let s: f64 = z
        .iter()
        .zip(y)
        .filter(|(_, &t)| t != 0.0)
        .map(|(a, b)| (a - b).abs() / b.abs())
        .sum();
    s / y.len() as f64
}

/// Affine map from contexts to system parameters, `p̂ = Aξ + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEstimator {
    /// Row-major `[d_p, d_ξ]`.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub context_dim: usize,
    pub param_dim: usize,
    /// Largest absolute error on the fitting pairs.
    pub residual: f64,
    /// Parameters of the fitting environments.
    pub training_params: Vec<Vec<f64>>,
}

/// Least-squares affine fit of `params` on `contexts`.
pub fn fit_param_estimator(contexts: &[Vec<f64>], params: &[Vec<f64>]) -> Result<ParamEstimator> {
    let n = contexts.len();
    if n == 0 || n != params.len() {
        return Err(CodaError::DegenerateFit(format!(
            "{n} contexts for {} parameter vectors",
            params.len()
        )));
    }
    let dx = contexts[0].len();
    let dp = params[0].len();
    if contexts.iter().any(|c| c.len() != dx) || params.iter().any(|p| p.len() != dp) {
        return Err(CodaError::Shape("ragged estimator inputs".into()));
    }
    if n < dx + 1 {
        return Err(CodaError::DegenerateFit(format!(
            "{n} pairs cannot determine an affine map from {dx} dims"
        )));
    }
    let x = DMatrix::from_fn(n, dx + 1, |i, j| if j < dx { contexts[i][j] } else { 1.0 });
    let y = DMatrix::from_fn(n, dp, |i, j| params[i][j]);
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > smax * 1e-10).count();
    if rank < dx + 1 {
        return Err(CodaError::DegenerateFit(format!(
            "design matrix has rank {rank} < {}",
            dx + 1
        )));
    }
    let coef = svd
        .solve(&y, smax * 1e-12)
        .map_err(|e| CodaError::DegenerateFit(e.to_string()))?;
    let mut a = vec![0.0; dp * dx];
    let mut b = vec![0.0; dp];
    for k in 0..dp {
        for j in 0..dx {
            a[k * dx + j] = coef[(j, k)];
        }
        b[k] = coef[(dx, k)];
    }
    let pred = &x * &coef;
    let residual = (pred - &y).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(ParamEstimator {
        a,
        b,
        context_dim: dx,
        param_dim: dp,
        residual,
        training_params: params.to_vec(),
    })
}

impl ParamEstimator {
    pub fn estimate(&self, xi: &[f64]) -> Vec<f64> {
        (0..self.param_dim)
            .map(|k| {
                self.b[k]
                    + (0..self.context_dim)
                        .map(|j| self.a[k * self.context_dim + j] * xi[j])
                        .sum::<f64>()
            })
            .collect()
    }
}

/// Parameter estimate of one environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub env_id: u32,
    pub p_true: Option<Vec<f64>>,
    pub p_hat: Vec<f64>,
    /// Percent, when the truth is known.
    pub mape: Option<f64>,
    pub in_hull: bool,
}

/// Estimates parameters for each `(env_id, ξ, truth)`.
pub fn estimate_params(est: &ParamEstimator, envs: &[(u32, Vec<f64>, Option<Vec<f64>>)]) -> Result<Vec<Estimate>> {
    let hull = Hull::new(&est.training_params)?;
    envs.iter()
        .map(|(id, xi, truth)| {
            if xi.len() != est.context_dim {
                return Err(CodaError::Shape(format!(
                    "context of env {id} has {} entries, expected {}",
                    xi.len(),
                    est.context_dim
                )));
            }
            let p_hat = est.estimate(xi);
            let in_hull = match truth {
                Some(p) => hull.contains(p),
                None => hull.contains(&p_hat),
            };
            Ok(Estimate {
                env_id: *id,
                mape: truth.as_ref().map(|p| 100.0 * mape(&p_hat, p)),
                p_true: truth.clone(),
                p_hat,
                in_hull,
            })
        })
        .collect()
}

/// Convex hull of points in the plane (first two coordinates).
#[derive(Clone, Debug, PartialEq)]
pub struct Hull {
    /// Counter-clockwise vertices, or the bounding box corners for degenerate sets.
    vertices: Vec<[f64; 2]>,
    bbox: Option<([f64; 2], [f64; 2])>,
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

impl Hull {
    pub fn new(points: &[Vec<f64>]) -> Result<Self> {
        if points.iter().any(|p| p.len() != 2) {
            return Err(CodaError::Config("hull membership is defined for 2-D parameters".into()));
        }
        let mut pts: Vec<[f64; 2]> = points.iter().map(|p| [p[0], p[1]]).collect();
        pts.sort_by(|a, b| a.partial_cmp(b).expect("finite parameters"));
        pts.dedup();
        let mut hull: Vec<[f64; 2]> = Vec::new();
        for pass in 0..2 {
            let start = hull.len();
            let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
                Box::new(pts.iter())
            } else {
                Box::new(pts.iter().rev())
            };
            for &p in iter {
                while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                    hull.pop();
                }
                hull.push(p);
            }
            hull.pop();
        }
        if hull.len() < 3 {
            warn!("training parameters are collinear; falling back to bounding-box membership");
            let lo = pts.iter().fold([f64::INFINITY; 2], |m, p| [m[0].min(p[0]), m[1].min(p[1])]);
            let hi = pts.iter().fold([f64::NEG_INFINITY; 2], |m, p| [m[0].max(p[0]), m[1].max(p[1])]);
            return Ok(Self {
                vertices: Vec::new(),
                bbox: Some((lo, hi)),
            });
        }
        Ok(Self {
            vertices: hull,
            bbox: None,
        })
    }

    /// Boundary points count as inside.
    pub fn contains(&self, p: &[f64]) -> bool {
        let q = [p[0], p[1]];
        if let Some((lo, hi)) = self.bbox {
            return (lo[0]..=hi[0]).contains(&q[0]) && (lo[1]..=hi[1]).contains(&q[1]);
        }
        let scale = self
            .vertices
            .iter()
            .fold(1.0f64, |m, v| m.max(v[0].abs()).max(v[1].abs()));
        let tol = 1e-12 * scale * scale;
        let n = self.vertices.len();
        (0..n).all(|i| cross(self.vertices[i], self.vertices[(i + 1) % n], q) >= -tol)
    }
}

/// Singular values of the columns `grads`, descending. With `differences`, the
/// last column is subtracted from the others first (and dropped).
pub fn gradient_svd(grads: &[Vec<f64>], differences: bool) -> Result<Vec<f64>> {
    if grads.len() < 2 {
        return Err(CodaError::Config("gradient spectra need >= 2 environments".into()));
    }
    let d = grads[0].len();
    if grads.iter().any(|g| g.len() != d) {
        return Err(CodaError::Shape("gradient lengths differ".into()));
    }
    let m = if differences {
        let base = &grads[grads.len() - 1];
        DMatrix::from_fn(d, grads.len() - 1, |i, j| grads[j][i] - base[i])
    } else {
        DMatrix::from_fn(d, grads.len(), |i, j| grads[j][i])
    };
    let mut s: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    Ok(s)
}

/// Two leading left singular vectors of the gradient columns.
pub fn principal_directions(grads: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if grads.len() < 2 {
        return Err(CodaError::Config("principal directions need >= 2 environments".into()));
    }
    let d = grads[0].len();
    let m = DMatrix::from_fn(d, grads.len(), |i, j| grads[j][i]);
    let svd = m.svd(true, false);
    let u = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].partial_cmp(&svd.singular_values[a]).unwrap());
    Ok((
        u.column(order[0]).iter().copied().collect(),
        u.column(order[1]).iter().copied().collect(),
    ))
}

/// Which loss the per-environment gradients come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean of `‖f^e(x) - g_θ(x)‖²` over a fixed set of states.
    VectorField,
    Trajectory,
}

impl std::str::FromStr for LossKind {
    type Err = CodaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vector_field" => Ok(Self::VectorField),
            "trajectory" => Ok(Self::Trajectory),
            other => Err(CodaError::Config(format!("unknown loss kind '{other}'"))),
        }
    }
}

/// `n` states drawn uniformly from the observed frames of all `datasets`.
pub fn sample_states(datasets: &[EnvironmentDataset], n: usize, seed: u64) -> Result<Tensor> {
    let frames: Vec<(usize, usize, usize)> = datasets
        .iter()
        .enumerate()
        .flat_map(|(e, d)| {
            d.trajectories
                .iter()
                .enumerate()
                .flat_map(move |(i, t)| (0..t.n_frames()).map(move |k| (e, i, k)))
        })
        .collect();
    if frames.is_empty() || n == 0 {
        return Err(CodaError::Config("no states to sample".into()));
    }
    let mut r = rng::stream(seed, &[0x5A]);
    let shape = datasets[0].state_shape.clone();
    let mut data = Vec::new();
    for _ in 0..n {
        let (e, i, k) = frames[r.gen_range(0..frames.len())];
        data.extend_from_slice(datasets[e].trajectories[i].frame(k));
    }
    let mut full = vec![n];
    full.extend(shape);
    Tensor::new(full, data)
}

/// True vector field of `env` at each state of the batch.
pub fn true_vector_field(spec: &SystemSpec, env: &Environment, states: &Tensor) -> Result<Tensor> {
    let sl = spec.state_len();
    let n = states.shape()[0];
    let mut out = Vec::with_capacity(n * sl);
    for i in 0..n {
        let x = Tensor::new(spec.state_shape.clone(), states.data()[i * sl..(i + 1) * sl].to_vec())?;
        out.extend_from_slice(rhs(spec, &env.params, &x)?.data());
    }
    Tensor::new(states.shape().to_vec(), out)
}

/// Mean squared vector-field error of `g_θ` against `targets` at `states`.
pub fn vector_field_loss<'t>(model: &ModelConfig, theta: Var<'t>, states: &Tensor, targets: &Tensor) -> Result<Var<'t>> {
    let x = theta.tape().constant(states.clone());
    let g = model.forward(theta, x)?;
    Ok(g.sq_err_sum(targets)?.scale(1.0 / targets.len() as f64))
}

/// Source of per-environment losses for gradient spectra.
pub enum GradientSource<'a> {
    VectorField {
        spec: &'a SystemSpec,
        envs: &'a [Environment],
        states: &'a Tensor,
    },
    Trajectory {
        datasets: &'a [EnvironmentDataset],
        solver: Solver,
        substeps: usize,
    },
}

/// `∇_θ L(θ, D^e)` for every environment, in environment order.
pub fn env_gradients(model: &ModelConfig, theta: &[f64], source: &GradientSource<'_>, exec: Execution) -> Result<Vec<Vec<f64>>> {
    let n = match source {
        GradientSource::VectorField { envs, .. } => envs.len(),
        GradientSource::Trajectory { datasets, .. } => datasets.len(),
    };
    exec.try_map(n, |e| {
        let tape = Tape::new();
        let t = tape.var(Tensor::vector(theta));
        let l = match source {
            GradientSource::VectorField { spec, envs, states } => {
                let target = true_vector_field(spec, &envs[e], states)?;
                vector_field_loss(model, t, states, &target)?
            }
            GradientSource::Trajectory {
                datasets,
                solver,
                substeps,
            } => trajectory_loss(model, t, &datasets[e], *solver, *substeps, None)?,
        };
        Ok(tape.backward(l)?.flat(t))
    })
}

/// Loss values on a plane through `center`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub center: Vec<f64>,
    pub directions: [Vec<f64>; 2],
    pub extent: f64,
    /// Coordinates along each axis.
    pub coords: Vec<f64>,
    /// `values[i * n + j]` is the loss at `center + coords[i] d1 + coords[j] d2`;
    /// blown-up cells are `+inf`.
    pub values: Vec<f64>,
    pub argmin: (usize, usize),
    pub min: f64,
}

impl LandscapeGrid {
    pub fn resolution(&self) -> usize {
        self.coords.len()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.coords.len() + j]
    }

    pub fn center_value(&self) -> f64 {
        let c = self.coords.len() / 2;
        self.at(c, c)
    }

    /// Whether the argmin lies within `|a|, |b| <= fraction * extent`.
    pub fn argmin_within(&self, fraction: f64) -> bool {
        let lim = fraction * self.extent + 1e-12;
        self.coords[self.argmin.0].abs() <= lim && self.coords[self.argmin.1].abs() <= lim
    }
}

/// Evaluates `loss` on a `resolution x resolution` grid spanning `±extent`.
pub fn loss_landscape<F>(
    center: &[f64],
    directions: [&[f64]; 2],
    extent: f64,
    resolution: usize,
    loss: F,
    exec: Execution,
) -> Result<LandscapeGrid>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if resolution == 0 || resolution.is_multiple_of(2) {
        return Err(CodaError::Config(format!("landscape resolution {resolution} must be odd")));
    }
    if !(extent >= 0.0) {
        return Err(CodaError::Config("landscape extent must be >= 0".into()));
    }
    let [d1, d2] = directions;
    if d1.len() != center.len() || d2.len() != center.len() {
        return Err(CodaError::Shape("landscape directions must match the center".into()));
    }
    let n1: f64 = d1.iter().map(|v| v * v).sum::<f64>();
    let n2: f64 = d2.iter().map(|v| v * v).sum::<f64>();
    let dot: f64 = d1.iter().zip(d2).map(|(a, b)| a * b).sum();
    if resolution > 1 && !(n1 * n2 - dot * dot > 1e-12 * n1 * n2) {
        return Err(CodaError::Config("landscape directions are linearly dependent".into()));
    }
    let half = (resolution / 2) as f64;
    let coords: Vec<f64> = (0..resolution)
        .map(|i| if resolution == 1 { 0.0 } else { extent * (i as f64 - half) / half })
        .collect();
    let c = resolution / 2;
    let values = exec.try_map(resolution * resolution, |idx| {
        let (i, j) = (idx / resolution, idx % resolution);
        if i == c && j == c {
            return loss(center);
        }
        let (a, b) = (coords[i], coords[j]);
        let p: Vec<f64> = center
            .iter()
            .zip(d1.iter().zip(d2))
            .map(|(t, (u, v))| t + a * u + b * v)
            .collect();
        match loss(&p) {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(_) | Err(CodaError::Integration { .. }) | Err(CodaError::Numerical { .. }) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    })?;
    if !values[c * resolution + c].is_finite() {
        return Err(CodaError::Numerical {
            locus: "landscape center".into(),
        });
    }
    let (best, min) = values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
    Ok(LandscapeGrid {
        center: center.to_vec(),
        directions: [d1.to_vec(), d2.to_vec()],
        extent,
        coords,
        values,
        argmin: (best / resolution, best % resolution),
        min,
    })
}

/// Long-form `a,b,env,loss` rows for each `(env_id, grid)`.
pub fn landscape_csv(grids: &[(u32, &LandscapeGrid)]) -> String {
    let mut s = String::from("a,b,env,loss\n");
    for (env, g) in grids {
        let n = g.resolution();
        for i in 0..n {
            for j in 0..n {
                let _ = writeln!(s, "{:e},{:e},{env},{:e}", g.coords[i], g.coords[j], g.at(i, j));
            }
        }
    }
    s
}

/// `rank,sigma` rows, rank starting at 1.
pub fn svd_csv(sigma: &[f64]) -> String {
    let mut s = String::from("rank,sigma\n");
    for (i, v) in sigma.iter().enumerate() {
        let _ = writeln!(s, "{},{v:e}", i + 1);
    }
    s
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(";")
}

/// `env_id,p_true,p_hat,mape,in_hull` rows; vectors are `;`-separated.
pub fn estimation_csv(rows: &[Estimate]) -> String {
    let mut s = String::from("env_id,p_true,p_hat,mape,in_hull\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.env_id,
            r.p_true.as_deref().map(join).unwrap_or_default(),
            join(&r.p_hat),
            r.mape.map(|m| format!("{m:e}")).unwrap_or_default(),
            r.in_hull
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mape_examples() {
        assert_eq!(mape(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(mape(&[2.0], &[1.0]), 1.0);
        assert_eq!(mape(&[2.0, 5.0], &[1.0, 0.0]), 0.5);
        assert_eq!(mape(&[2.0, 5.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn identity_and_affine_fits() {
        let p: Vec<Vec<f64>> = vec![vec![0.5, 0.5], vec![1.0, 0.5], vec![0.5, 1.0], vec![1.0, 1.0]];
        let est = fit_param_estimator(&p, &p).unwrap();
        assert!(est.residual < 1e-12);
        assert!((est.estimate(&[0.7, 0.9])[1] - 0.9).abs() < 1e-12);
        let c: Vec<Vec<f64>> = p.iter().map(|v| v.iter().map(|x| 2.0 * x + 1.0).collect()).collect();
        let est = fit_param_estimator(&c, &p).unwrap();
        assert!(est.residual < 1e-10);
        assert!((est.a[0] - 0.5).abs() < 1e-10 && (est.b[0] + 0.5).abs() < 1e-10);
    }

    #[test]
    fn degenerate_fit_rejected() {
        let p = vec![vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]];
        assert!(matches!(fit_param_estimator(&p, &p), Err(CodaError::DegenerateFit(_))));
    }

    #[test]
    fn hull_membership() {
        let pts: Vec<Vec<f64>> = [0.5, 0.75, 1.0]
            .iter()
            .flat_map(|&a| [0.5, 0.75, 1.0].iter().map(move |&b| vec![a, b]))
            .collect();
        let h = Hull::new(&pts).unwrap();
        assert!(h.contains(&[0.625, 0.9]));
        assert!(h.contains(&[1.0, 0.5]));
        assert!(!h.contains(&[1.125, 0.625]));
        let line = Hull::new(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert!(line.contains(&[0.5, 0.2]));
    }

    #[test]
    fn identical_gradients_are_rank_one() {
        let g = vec![vec![1.0, 2.0, 3.0]; 4];
        let s = gradient_svd(&g, false).unwrap();
        assert!(s[1] / s[0] < 1e-10);
        assert!(gradient_svd(&g[..1], false).is_err());
    }

    #[test]
    fn quadratic_landscape() {
        let center = vec![0.0, 0.0, 1.0];
        let d1 = [1.0, 0.0, 0.0];
        let d2 = [0.0, 1.0, 0.0];
        let f = |t: &[f64]| Ok(t.iter().map(|v| v * v).sum::<f64>());
        let g = loss_landscape(&center, [&d1, &d2], 2.0, 5, f, Execution::Sequential).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let (a, b) = (g.coords[i], g.coords[j]);
                assert!((g.at(i, j) - (a * a + b * b + 1.0)).abs() < 1e-10);
            }
        }
        assert_eq!(g.argmin, (2, 2));
        let one = loss_landscape(&center, [&d1, &d2], 0.0, 1, f, Execution::Sequential).unwrap();
        assert_eq!(one.values, vec![1.0]);
    }
}
