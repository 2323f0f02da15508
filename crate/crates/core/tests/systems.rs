use coda::exec::Execution;
use coda::numeric::{integrate, Solver, Tensor};
use coda::systems::{
    environment_grid, generate_dataset, lv_first_integral, rhs, sample_initial_condition, simulate, Split,
    SystemKind, SystemSpec,
};
use rand::SeedableRng;

fn x0(spec: &SystemSpec, seed: u64) -> Tensor {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    sample_initial_condition(spec, &mut r).unwrap()
}

#[test]
fn lv_first_integral_is_conserved() {
    let spec = SystemSpec::lotka_volterra();
    for env in environment_grid(&spec, Split::Train).unwrap() {
        let t = simulate(&spec, &env, &x0(&spec, u64::from(env.id))).unwrap();
        let v0 = lv_first_integral(&spec, &env.params, t.frame(0)).unwrap();
        for k in 1..t.n_frames() {
            let v = lv_first_integral(&spec, &env.params, t.frame(k)).unwrap();
            assert!(((v - v0) / v0).abs() < 1e-4, "env {} frame {k}: {v} vs {v0}", env.id);
        }
    }
}

#[test]
fn gray_scott_stays_in_band() {
    let spec = SystemSpec::gray_scott();
    let mut envs = environment_grid(&spec, Split::Train).unwrap();
    envs.extend(environment_grid(&spec, Split::Adapt).unwrap());
    for env in envs.iter().step_by(3) {
        let d = generate_dataset(&spec, env, 1, 3, Split::Train, Execution::default()).unwrap();
        assert_eq!(d.trajectories[0].n_frames(), 11);
        for v in d.trajectories[0].states.data() {
            assert!((-0.1..=1.5).contains(v), "env {}: {v}", env.id);
        }
    }
}

fn max_rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    let scale = b.max_abs().max(1e-300);
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

#[test]
fn half_internal_step_changes_little() {
    for kind in [SystemKind::Lv, SystemKind::Go, SystemKind::Gs] {
        let spec = SystemSpec::new(kind);
        let mut fine = spec.clone();
        fine.internal_dt /= 2.0;
        let env = &environment_grid(&spec, Split::Train).unwrap()[0];
        let x = x0(&spec, 9);
        let a = simulate(&spec, env, &x).unwrap();
        let b = simulate(&fine, env, &x).unwrap();
        let d = max_rel_diff(&a.states, &b.states);
        assert!(d < 1e-6, "{kind}: relative change {d:e}");
    }
}

#[test]
fn train_and_adapt_grids_are_disjoint() {
    for kind in [SystemKind::Lv, SystemKind::Go, SystemKind::Gs] {
        let spec = SystemSpec::new(kind);
        let tr = environment_grid(&spec, Split::Train).unwrap();
        let ad = environment_grid(&spec, Split::Adapt).unwrap();
        assert_eq!(ad.len(), 4);
        for a in &ad {
            assert!(tr.iter().all(|t| t.params != a.params));
            assert!(a.params.iter().all(|&p| p > 0.0));
        }
        assert!(environment_grid(&spec, Split::Eval).is_err());
    }
}

#[test]
fn trajectories_start_at_sampled_state() {
    let spec = SystemSpec::glycolytic_oscillator();
    let env = &environment_grid(&spec, Split::Adapt).unwrap()[2];
    let x = x0(&spec, 4);
    let t = simulate(&spec, env, &x).unwrap();
    assert_eq!(t.frame(0), x.data());
    assert_eq!(t.n_frames(), 21);
}

fn lv_final(dt: f64, method: Solver) -> Tensor {
    let spec = SystemSpec::lotka_volterra();
    let env = &environment_grid(&spec, Split::Train).unwrap()[4];
    let n = (10.0 / dt).round() as usize;
    integrate(|x: &Tensor| rhs(&spec, &env.params, x), &Tensor::vector(&[2.0, 1.5]), dt, n, method)
        .unwrap()
        .pop()
        .unwrap()
}

#[test]
fn solver_orders_on_lotka_volterra() {
    let reference = lv_final(0.1 / 64.0, Solver::Rk4);
    let err = |dt: f64, m: Solver| lv_final(dt, m).sub(&reference).unwrap().sq_norm().sqrt();
    let rk4 = (err(0.2, Solver::Rk4) / err(0.1, Solver::Rk4)).log2();
    assert!((3.7..=4.3).contains(&rk4), "rk4 order {rk4}");
    let euler_ref = lv_final(1e-4, Solver::Rk4);
    let e = |dt: f64| lv_final(dt, Solver::Euler).sub(&euler_ref).unwrap().sq_norm().sqrt();
    let eu = (e(0.01) / e(0.005)).log2();
    assert!((0.8..=1.2).contains(&eu), "euler order {eu}");
}
