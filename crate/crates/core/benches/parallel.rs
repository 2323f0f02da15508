use coda::analysis::{env_gradients, loss_landscape, GradientSource};
use coda::exec::Execution;
use coda::model::ModelConfig;
use coda::numeric::Solver;
use coda::systems::{environment_grid, generate_dataset, EnvironmentDataset, Split, SystemKind, SystemSpec};
use coda::training::trajectory_loss_value;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn lv_data() -> (SystemSpec, Vec<EnvironmentDataset>) {
    let spec = SystemSpec::lotka_volterra();
    let data = environment_grid(&spec, Split::Train)
        .unwrap()
        .iter()
        .map(|e| generate_dataset(&spec, e, 4, 1, Split::Train, Execution::Sequential).unwrap())
        .collect();
    (spec, data)
}

fn generation(c: &mut Criterion) {
    let spec = SystemSpec::glycolytic_oscillator();
    let env = environment_grid(&spec, Split::Train).unwrap().remove(0);
    let mut g = c.benchmark_group("generate_go_32_traj");
    g.sample_size(10);
    for (name, ex) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_dataset(&spec, &env, 32, black_box(3), Split::Train, ex).unwrap())
        });
    }
    g.finish();
}

fn gradients(c: &mut Criterion) {
    let (_, data) = lv_data();
    let model = ModelConfig::for_system(SystemKind::Lv);
    let theta = model.init_params(0);
    let src = GradientSource::Trajectory {
        datasets: &data,
        solver: Solver::Rk4,
        substeps: 1,
    };
    let mut g = c.benchmark_group("lv_env_gradients");
    g.sample_size(10);
    for (name, ex) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| env_gradients(&model, black_box(&theta), &src, ex).unwrap())
        });
    }
    g.finish();
}

fn landscape(c: &mut Criterion) {
    let (_, data) = lv_data();
    let model = ModelConfig::for_system(SystemKind::Lv);
    let theta = model.init_params(0);
    let d1: Vec<f64> = (0..theta.len()).map(|i| if i % 2 == 0 { 1e-2 } else { 0.0 }).collect();
    let d2: Vec<f64> = (0..theta.len()).map(|i| if i % 2 == 1 { 1e-2 } else { 0.0 }).collect();
    let mut g = c.benchmark_group("lv_landscape_9x9");
    g.sample_size(10);
    for (name, ex) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                loss_landscape(&theta, [&d1, &d2], 1.0, 9, |p| trajectory_loss_value(&model, p, &data[0], Solver::Rk4, 1), ex)
                    .unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, generation, gradients, landscape);
criterion_main!(benches);
