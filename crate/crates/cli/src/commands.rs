use coda::adaptation::{adapt, eval_forecast};
use coda::analysis::{
    env_gradients, estimate_params, estimation_csv, fit_param_estimator, gradient_svd, landscape_csv, loss_landscape,
    principal_directions, sample_states, svd_csv, GradientSource, LossKind,
};
use coda::exec::Execution;
use coda::format::{Checkpoint, DatasetFile};
use coda::hypernet::{decode, HyperParams};
use coda::systems::{environment_grid, generate_dataset, Environment, Split};
use coda::training::{history_csv, init_hyper, train, train_erm, trajectory_loss_value};
use serde_json::{json, Map, Value};
use std::path::{Path, PathBuf};

use crate::config::{self, Directions, ExperimentConfig, Overrides};
use crate::manifest::Run;
use crate::{CliError, Command, Common};

pub fn run(common: &Common, command: &Command) -> Result<(), CliError> {
    let ov = Overrides {
        seed: common.seed,
        out: common.out.clone(),
        variant: common.variant,
        dxi: common.dxi,
    };
    let mut cfg = config::load(common.config.as_deref(), &ov)?;
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.train.execution = if n == 1 { Execution::Sequential } else { Execution::Parallel };
    }
    match command {
        Command::Generate => generate(&cfg),
        Command::Train { erm, data } => cmd_train(&cfg, *erm, data.as_deref()),
        Command::Adapt {
            checkpoint,
            data,
            trajectories,
        } => cmd_adapt(&cfg, checkpoint.as_deref(), data.as_deref(), *trajectories),
        Command::Eval {
            checkpoint,
            data,
            metrics,
        } => cmd_eval(&cfg, checkpoint.as_deref(), data.as_deref(), metrics),
        Command::Estimate {
            checkpoint,
            train_data,
            adapt_data,
        } => cmd_estimate(&cfg, checkpoint.as_deref(), train_data.as_deref(), adapt_data.as_deref()),
        Command::Landscape { checkpoint, data } => cmd_landscape(&cfg, checkpoint.as_deref(), data.as_deref()),
        Command::Svd {
            checkpoint,
            data,
            absolute,
        } => cmd_svd(&cfg, checkpoint.as_deref(), data.as_deref(), *absolute),
    }
}

fn or_default(p: Option<&Path>, default: PathBuf) -> PathBuf {
    p.map(Path::to_path_buf).unwrap_or(default)
}

fn read_data(run: &mut Run, cfg: &ExperimentConfig, path: &Path) -> Result<DatasetFile, CliError> {
    let file = DatasetFile::from_bytes(&run.read(path)?)?;
    if file.system.kind != cfg.system {
        return Err(CliError::Usage(format!(
            "{} holds {} data but the config is for {}",
            path.display(),
            file.system.kind,
            cfg.system
        )));
    }
    Ok(file)
}

fn read_checkpoint(run: &mut Run, cfg: &ExperimentConfig, path: &Path) -> Result<Checkpoint, CliError> {
    let ck = Checkpoint::from_bytes(&run.read(path)?)?;
    if ck.system.kind != cfg.system {
        return Err(CliError::Usage(format!(
            "{} was trained on {} but the config is for {}",
            path.display(),
            ck.system.kind,
            cfg.system
        )));
    }
    Ok(ck)
}

fn require_contexts(ck: &Checkpoint) -> Result<(), CliError> {
    if ck.erm {
        return Err(CliError::Usage("the ERM baseline has no contexts".into()));
    }
    Ok(())
}

fn generate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let mut run = Run::start("generate", cfg)?;
    let spec = cfg.spec();
    let train_envs = environment_grid(&spec, Split::Train)?;
    let adapt_envs = environment_grid(&spec, Split::Adapt)?;
    let eval_envs: Vec<Environment> = train_envs.iter().chain(&adapt_envs).cloned().collect();
    for (split, n, envs) in [
        (Split::Train, cfg.splits.train, &train_envs),
        (Split::Adapt, cfg.splits.adapt, &adapt_envs),
        (Split::Eval, cfg.splits.eval, &eval_envs),
    ] {
        let datasets = envs
            .iter()
            .map(|e| generate_dataset(&spec, e, n, cfg.seed, split, cfg.train.execution))
            .collect::<coda::Result<Vec<_>>>()?;
        let file = DatasetFile {
            system: spec.clone(),
            seed: cfg.seed,
            split,
            datasets,
        };
        let name = format!("{}_{}.coda", cfg.system.name(), split.name());
        run.write(&name, &file.to_bytes()?)?;
    }
    run.finish()
}

fn zero_rows(hp: &HyperParams) -> usize {
    hp.w.chunks(hp.context_dim).filter(|r| r.iter().all(|&x| x == 0.0)).count()
}

fn cmd_train(cfg: &ExperimentConfig, erm: bool, data: Option<&Path>) -> Result<(), CliError> {
    let mut run = Run::start(if erm { "train_erm" } else { "train" }, cfg)?;
    let file = read_data(&mut run, cfg, &or_default(data, cfg.data_file("train")))?;
    let ids: Vec<u32> = file.datasets.iter().map(|d| d.environment.id).collect();
    let init = init_hyper(&cfg.model, &ids, &cfg.train)?;
    let (params, history, best_epoch, stopped_early) = if erm {
        let r = train_erm(&file.datasets, &cfg.model, init.theta_c, &cfg.train)?;
        let w = vec![0.0; r.theta.len() * cfg.context_dim];
        let hp = HyperParams::new(r.theta, w, cfg.context_dim, &ids)?;
        (hp, r.history, r.best_epoch, r.stopped_early)
    } else {
        let r = train(&file.datasets, &cfg.model, init, &cfg.train)?;
        (r.params, r.history, r.best_epoch, r.stopped_early)
    };
    let ck = Checkpoint {
        system: file.system.clone(),
        model: cfg.model.clone(),
        penalty: cfg.train.penalty,
        erm,
        params,
        adapted: Vec::new(),
    };
    let prefix = if erm { "erm" } else { "checkpoint" };
    run.write(&format!("{prefix}.coda"), &ck.to_bytes()?)?;
    let hist_name = if erm { "erm_history.csv" } else { "history.csv" };
    run.write(hist_name, history_csv(&history, &ids).as_bytes())?;
    let best = &history[best_epoch];
    log::info!(
        "{} epochs, best epoch {best_epoch} objective {:.4e}",
        history.len(),
        best.objective
    );
    run.write_json(
        &format!("{prefix}_summary.json"),
        &json!({
            "erm": erm,
            "epochs_run": history.len(),
            "best_epoch": best_epoch,
            "stopped_early": stopped_early,
            "objective": best.objective,
            "env_losses": best.env_losses,
            "param_dim": ck.params.param_dim(),
            "zero_rows": zero_rows(&ck.params),
        }),
    )?;
    run.finish()
}

fn cmd_adapt(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    trajectories: Option<usize>,
) -> Result<(), CliError> {
    let mut run = Run::start("adapt", cfg)?;
    let mut ck = read_checkpoint(&mut run, cfg, &or_default(checkpoint, cfg.out("checkpoint.coda")))?;
    require_contexts(&ck)?;
    let file = read_data(&mut run, cfg, &or_default(data, cfg.data_file("adapt")))?;
    let datasets: Vec<_> = match trajectories {
        Some(0) => return Err(CliError::Usage("--trajectories must be at least 1".into())),
        Some(n) => file.datasets.iter().map(|d| d.take(n)).collect(),
        None => file.datasets,
    };
    let results = cfg.train.execution.try_map(datasets.len(), |i| {
        adapt(&ck.params, &ck.model, &datasets[i], &cfg.adapt)
    })?;
    let mut csv = String::from("env_id");
    for j in 0..ck.params.context_dim {
        csv.push_str(&format!(",xi_{j}"));
    }
    csv.push_str(",loss,iterations\n");
    for r in &results {
        let xi: Vec<String> = r.xi.iter().map(|x| format!("{x:e}")).collect();
        csv.push_str(&format!("{},{},{:e},{}\n", r.env_id, xi.join(","), r.loss, r.iterations));
    }
    ck.adapted = results;
    run.write("adapted.coda", &ck.to_bytes()?)?;
    run.write("adaptation.csv", csv.as_bytes())?;
    run.finish()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    metrics: &[String],
) -> Result<(), CliError> {
    let metrics: Vec<&str> = metrics.iter().map(|m| m.trim()).filter(|m| !m.is_empty()).collect();
    if metrics.is_empty() || metrics.iter().any(|m| *m != "mse" && *m != "mape") {
        return Err(CliError::Usage(format!("--metrics takes a subset of mse,mape, got {metrics:?}")));
    }
    let mut run = Run::start("eval", cfg)?;
    let default_ck = if cfg.out("adapted.coda").exists() { "adapted.coda" } else { "checkpoint.coda" };
    let ck = read_checkpoint(&mut run, cfg, &or_default(checkpoint, cfg.out(default_ck)))?;
    let file = read_data(&mut run, cfg, &or_default(data, cfg.data_file("eval")))?;
    let hp = &ck.params;
    let mut rows = Vec::new();
    for d in &file.datasets {
        let id = d.environment.id;
        let (domain, theta) = if hp.contexts.contains_key(&id) {
            ("in_domain", hp.decode_env(id)?)
        } else if ck.erm {
            ("adaptation", hp.theta_c.clone())
        } else if let Some(a) = ck.adapted.iter().find(|a| a.env_id == id) {
            ("adaptation", decode(&hp.theta_c, &hp.w, &a.xi)?)
        } else {
            log::warn!("env {id}: no context in the checkpoint, skipped");
            continue;
        };
        let m = eval_forecast(&ck.model, &theta, d, cfg.train.solver, cfg.train.model_substeps)?;
        rows.push((id, domain, m.mse, m.mape));
    }
    let pick = |mse: f64, mape: f64| -> Map<String, Value> {
        metrics
            .iter()
            .map(|&m| (m.to_string(), json!(if m == "mse" { mse } else { mape })))
            .collect()
    };
    let mut csv = format!("env_id,domain,{}\n", metrics.join(","));
    let mut envs = Vec::new();
    for &(id, domain, mse, mape) in &rows {
        let vals: Vec<String> = metrics.iter().map(|&m| format!("{:e}", if m == "mse" { mse } else { mape })).collect();
        csv.push_str(&format!("{id},{domain},{}\n", vals.join(",")));
        let mut e = pick(mse, mape);
        e.insert("env_id".into(), json!(id));
        e.insert("domain".into(), json!(domain));
        envs.push(Value::Object(e));
    }
    let mut summary = Map::new();
    summary.insert("erm".into(), json!(ck.erm));
    for domain in ["in_domain", "adaptation"] {
        let sel: Vec<_> = rows.iter().filter(|r| r.1 == domain).collect();
        if !sel.is_empty() {
            let mse: Vec<f64> = sel.iter().map(|r| r.2).collect();
            let mape: Vec<f64> = sel.iter().map(|r| r.3).collect();
            summary.insert(domain.into(), Value::Object(pick(mean(&mse), mean(&mape))));
        }
    }
    summary.insert("envs".into(), Value::Array(envs));
    run.write("metrics.csv", csv.as_bytes())?;
    run.write_json("metrics.json", &summary)?;
    run.finish()
}

fn cmd_estimate(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    train_data: Option<&Path>,
    adapt_data: Option<&Path>,
) -> Result<(), CliError> {
    let mut run = Run::start("estimate", cfg)?;
    let ck = read_checkpoint(&mut run, cfg, &or_default(checkpoint, cfg.out("adapted.coda")))?;
    require_contexts(&ck)?;
    let train = read_data(&mut run, cfg, &or_default(train_data, cfg.data_file("train")))?;
    let adapt_path = or_default(adapt_data, cfg.data_file("adapt"));
    let adapt_envs: Vec<Environment> = if ck.adapted.is_empty() {
        Vec::new()
    } else {
        read_data(&mut run, cfg, &adapt_path)?
            .datasets
            .into_iter()
            .map(|d| d.environment)
            .collect()
    };
    let mut contexts = Vec::new();
    let mut params = Vec::new();
    let mut rows = Vec::new();
    for d in &train.datasets {
        let xi = ck.params.context(d.environment.id)?.to_vec();
        contexts.push(xi.clone());
        params.push(d.environment.params.clone());
        rows.push((d.environment.id, xi, Some(d.environment.params.clone())));
    }
    let est = fit_param_estimator(&contexts, &params)?;
    for a in &ck.adapted {
        let truth = adapt_envs.iter().find(|e| e.id == a.env_id).map(|e| e.params.clone());
        rows.push((a.env_id, a.xi.clone(), truth));
    }
    let estimates = estimate_params(&est, &rows)?;
    let ad: Vec<f64> = estimates
        .iter()
        .filter(|e| ck.adapted.iter().any(|a| a.env_id == e.env_id))
        .filter_map(|e| e.mape)
        .collect();
    run.write("estimation.csv", estimation_csv(&estimates).as_bytes())?;
    run.write_json(
        "estimation.json",
        &json!({
            "residual": est.residual,
            "a": est.a,
            "b": est.b,
            "adaptation_mape": if ad.is_empty() { Value::Null } else { json!(mean(&ad)) },
            "estimates": estimates,
        }),
    )?;
    run.finish()
}

fn cmd_landscape(cfg: &ExperimentConfig, checkpoint: Option<&Path>, data: Option<&Path>) -> Result<(), CliError> {
    let mut run = Run::start("landscape", cfg)?;
    let ck = read_checkpoint(&mut run, cfg, &or_default(checkpoint, cfg.out("checkpoint.coda")))?;
    let file = read_data(&mut run, cfg, &or_default(data, cfg.data_file("train")))?;
    let hp = &ck.params;
    let (solver, substeps) = (cfg.train.solver, cfg.train.model_substeps);
    let exec = cfg.train.execution;
    let (d1, d2) = match cfg.analysis.directions {
        Directions::W => {
            require_contexts(&ck)?;
            if hp.context_dim < 2 {
                return Err(CliError::Usage("W directions need a context dimension of at least 2".into()));
            }
            (hp.w_column(0), hp.w_column(1))
        }
        Directions::Svd => {
            let src = GradientSource::Trajectory {
                datasets: &file.datasets,
                solver,
                substeps,
            };
            principal_directions(&env_gradients(&ck.model, &hp.theta_c, &src, exec)?)?
        }
    };
    let mut grids = Vec::new();
    for d in &file.datasets {
        let g = loss_landscape(
            &hp.theta_c,
            [&d1, &d2],
            cfg.analysis.extent,
            cfg.analysis.resolution,
            |theta| trajectory_loss_value(&ck.model, theta, d, solver, substeps),
            exec,
        )?;
        grids.push((d.environment.id, g));
    }
    let refs: Vec<(u32, _)> = grids.iter().map(|(id, g)| (*id, g)).collect();
    let summary: Vec<Value> = grids
        .iter()
        .map(|(id, g)| {
            json!({
                "env_id": id,
                "center": g.center_value(),
                "min": g.min,
                "argmin": [g.coords[g.argmin.0], g.coords[g.argmin.1]],
                "argmin_in_central_quarter": g.argmin_within(0.25),
            })
        })
        .collect();
    run.write("landscape.csv", landscape_csv(&refs).as_bytes())?;
    run.write_json("landscape.json", &summary)?;
    run.finish()
}

fn cmd_svd(cfg: &ExperimentConfig, checkpoint: Option<&Path>, data: Option<&Path>, absolute: bool) -> Result<(), CliError> {
    let mut run = Run::start("svd", cfg)?;
    let (model, theta) = match checkpoint {
        Some(p) => {
            let ck = read_checkpoint(&mut run, cfg, p)?;
            (ck.model, ck.params.theta_c)
        }
        None => (cfg.model.clone(), init_hyper(&cfg.model, &[0], &cfg.train)?.theta_c),
    };
    let file = read_data(&mut run, cfg, &or_default(data, cfg.data_file("train")))?;
    if file.datasets.len() < 2 {
        return Err(CliError::Usage(format!(
            ">= 2 environments required, {} has {}",
            file.system.kind,
            file.datasets.len()
        )));
    }
    let envs: Vec<Environment> = file.datasets.iter().map(|d| d.environment.clone()).collect();
    let states;
    let src = match cfg.analysis.loss {
        LossKind::VectorField => {
            states = sample_states(&file.datasets, cfg.analysis.states, cfg.seed)?;
            GradientSource::VectorField {
                spec: &file.system,
                envs: &envs,
                states: &states,
            }
        }
        LossKind::Trajectory => GradientSource::Trajectory {
            datasets: &file.datasets,
            solver: cfg.train.solver,
            substeps: cfg.train.model_substeps,
        },
    };
    let grads = env_gradients(&model, &theta, &src, cfg.train.execution)?;
    let sigma = gradient_svd(&grads, !absolute)?;
    let ratios: Vec<f64> = sigma.iter().map(|s| s / sigma[0]).collect();
    run.write("svd.csv", svd_csv(&sigma).as_bytes())?;
    run.write_json(
        "svd.json",
        &json!({
            "loss": cfg.analysis.loss,
            "differences": !absolute,
            "param_dim": theta.len(),
            "singular_values": sigma,
            "ratios": ratios,
        }),
    )?;
    run.finish()
}
