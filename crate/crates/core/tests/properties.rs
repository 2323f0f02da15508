use coda::analysis::{gradient_svd, mape};
use coda::exec::Execution;
use coda::format::DatasetFile;
use coda::hypernet::{decode, locality_bounds_check, penalty, PenaltyConfig, PenaltyVariant};
use coda::model::{Activation, ModelConfig};
use coda::numeric::{finite_diff_grad, grad, max_relative_error, program, Tape, Tensor, Var};
use coda::systems::{environment_grid, generate_dataset, Split, SystemSpec};
use coda::training::{adam_step, AdamConfig, OptimizerState};
use proptest::prelude::*;

fn vec_in(len: usize, r: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-r..r, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn decode_is_affine(
        tc in vec_in(6, 2.0),
        w in vec_in(12, 2.0),
        x1 in vec_in(2, 3.0),
        x2 in vec_in(2, 3.0),
        a in -2.0f64..2.0,
    ) {
        let mix: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| a * p + (1.0 - a) * q).collect();
        let lhs = decode(&tc, &w, &mix).unwrap();
        let d1 = decode(&tc, &w, &x1).unwrap();
        let d2 = decode(&tc, &w, &x2).unwrap();
        for i in 0..6 {
            let rhs = a * d1[i] + (1.0 - a) * d2[i];
            prop_assert!((lhs[i] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()) * (1.0 + a.abs()) * 10.0);
        }
        prop_assert_eq!(decode(&tc, &w, &[0.0, 0.0]).unwrap(), tc);
    }

    #[test]
    fn penalty_is_non_negative(
        w in vec_in(12, 5.0),
        xi in vec_in(3, 5.0),
        lx in 0.0f64..10.0,
        lo in 0.0f64..10.0,
        l1 in any::<bool>(),
    ) {
        let cfg = PenaltyConfig {
            variant: if l1 { PenaltyVariant::L1 } else { PenaltyVariant::L2 },
            lambda_xi: lx,
            lambda_omega: lo,
        };
        prop_assert!(penalty(&w, &xi, &cfg) >= 0.0);
    }

    #[test]
    fn locality_bounds_hold(
        rows in 1usize..40,
        cols in 1usize..5,
        seed in any::<u64>(),
        scale in 1e-3f64..1e3,
    ) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..rows * cols).map(|_| scale * r.gen_range(-1.0..1.0)).collect();
        let xi: Vec<f64> = (0..cols).map(|_| r.gen_range(-1.0..1.0)).collect();
        let b = locality_bounds_check(&w, &xi).unwrap();
        prop_assert!(b.lhs_l2 <= b.rhs_l2 * (1.0 + 1e-12) + 1e-300);
        prop_assert!(b.lhs_l1 <= b.rhs_l1 * (1.0 + 1e-12) + 1e-300);
    }

    #[test]
    fn mape_non_negative_and_zero_on_identity(y in vec_in(8, 10.0), z in vec_in(8, 10.0)) {
        prop_assert_eq!(mape(&y, &y), 0.0);
        prop_assert!(mape(&z, &y) >= 0.0);
    }

    #[test]
    fn adam_moves_against_gradient_sign(g in vec_in(5, 10.0), lr in 1e-4f64..1e-1) {
        let mut s = OptimizerState::new(5);
        let mut p = vec![0.0; 5];
        adam_step(&mut s, &mut p, &g, &AdamConfig::new(lr)).unwrap();
        for (pi, gi) in p.iter().zip(&g) {
            prop_assert!(pi * gi <= 0.0);
            prop_assert!(pi.abs() <= lr * (1.0 + 1e-12));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn svd_descending_and_order_invariant(seed in any::<u64>(), n in 2usize..6) {
        use rand::{seq::SliceRandom, Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut g: Vec<Vec<f64>> = (0..n).map(|_| (0..20).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let s1 = gradient_svd(&g, false).unwrap();
        prop_assert!(s1.windows(2).all(|w| w[0] >= w[1]) && s1.iter().all(|&v| v >= 0.0));
        g.shuffle(&mut r);
        let s2 = gradient_svd(&g, false).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + s1[0]));
        }
    }

    #[test]
    fn gradient_is_linear_in_the_program(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let model = ModelConfig::Mlp { input: 2, width: 8, depth: 3, activation: Activation::Swish };
        let theta = model.init_params(seed);
        let x = Tensor::new(vec![4, 2], vec![0.1, 0.2, -0.3, 0.4, 1.0, -1.0, 0.5, 0.5]).unwrap();
        let f = program(|_: &Tape, t: Var| Ok(model.forward(t, t.tape().constant(x.clone()))?.sq_sum()));
        let g = program(|_: &Tape, t: Var| model.forward(t, t.tape().constant(x.clone()))?.sum().mul(t.sum()));
        let h = program(|_: &Tape, t: Var| {
            let fx = model.forward(t, t.tape().constant(x.clone()))?;
            fx.sq_sum().scale(a).add(fx.sum().mul(t.sum())?.scale(b))
        });
        let (_, gf) = grad(&f, &theta).unwrap();
        let (_, gg) = grad(&g, &theta).unwrap();
        let (_, gh) = grad(&h, &theta).unwrap();
        for i in 0..theta.len() {
            let e = a * gf[i] + b * gg[i];
            prop_assert!((gh[i] - e).abs() <= 1e-10 * (1.0 + e.abs()));
        }
    }

    #[test]
    fn conv_is_translation_equivariant(seed in any::<u64>(), dy in 0usize..6, dx in 0usize..6) {
        use rand::{Rng, SeedableRng};
        let model = ModelConfig::conv(4, 6, 6);
        let theta = model.init_params(seed);
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x: Vec<f64> = (0..72).map(|_| r.gen_range(0.0..1.0)).collect();
        let shift = |v: &[f64]| -> Vec<f64> {
            let mut o = vec![0.0; v.len()];
            for c in 0..2 {
                for i in 0..6 {
                    for j in 0..6 {
                        o[c * 36 + ((i + dy) % 6) * 6 + (j + dx) % 6] = v[c * 36 + i * 6 + j];
                    }
                }
            }
            o
        };
        let a = model.eval(&theta, &Tensor::new(vec![1, 2, 6, 6], shift(&x)).unwrap()).unwrap();
        let b = model.eval(&theta, &Tensor::new(vec![1, 2, 6, 6], x.clone()).unwrap()).unwrap();
        let b = shift(b.data());
        for (p, q) in a.data().iter().zip(&b) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn small_mlp_gradient_matches_fd(seed in any::<u64>()) {
        let model = ModelConfig::Mlp { input: 2, width: 6, depth: 3, activation: Activation::Swish };
        let theta = model.init_params(seed);
        let x = Tensor::new(vec![3, 2], vec![0.3, -0.2, 1.1, 0.7, -0.5, 0.9]).unwrap();
        let t = Tensor::new(vec![3, 2], vec![0.1, 0.1, -0.2, 0.3, 0.0, 0.5]).unwrap();
        let f = program(|_: &Tape, th: Var| model.forward(th, th.tape().constant(x.clone()))?.sq_err_sum(&t));
        let (_, g) = grad(&f, &theta).unwrap();
        let fd = finite_diff_grad(|p| coda::numeric::value(&f, p), &theta, 1e-5).unwrap();
        prop_assert!(max_relative_error(&g, &fd, 1e-4) <= 1e-5);
    }
}

#[test]
fn dataset_roundtrip_is_bitwise() {
    let spec = SystemSpec::lotka_volterra();
    let envs = environment_grid(&spec, Split::Train).unwrap();
    let datasets: Vec<_> = envs
        .iter()
        .take(3)
        .map(|e| generate_dataset(&spec, e, 2, 11, Split::Train, Execution::Sequential).unwrap())
        .collect();
    let file = DatasetFile {
        system: spec,
        seed: 11,
        split: Split::Train,
        datasets,
    };
    let bytes = file.to_bytes().unwrap();
    let back = DatasetFile::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    for (a, b) in file.datasets.iter().zip(&back.datasets) {
        for (ta, tb) in a.trajectories.iter().zip(&b.trajectories) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&ta.states), bits(&tb.states));
        }
    }
    assert_eq!(file, back);
}

#[test]
fn generation_is_thread_count_independent() {
    let spec = SystemSpec::lotka_volterra();
    let env = &environment_grid(&spec, Split::Adapt).unwrap()[1];
    let a = generate_dataset(&spec, env, 6, 5, Split::Adapt, Execution::Sequential).unwrap();
    let b = generate_dataset(&spec, env, 6, 5, Split::Adapt, Execution::Parallel).unwrap();
    assert_eq!(a, b);
    let c = generate_dataset(&spec, env, 3, 5, Split::Adapt, Execution::Sequential).unwrap();
    assert_eq!(c.trajectories[..], a.trajectories[..3]);
}
