use coda::adaptation::{AdaptConfig, ContextPenalty};
use coda::analysis::LossKind;
use coda::hypernet::PenaltyVariant;
use coda::model::ModelConfig;
use coda::systems::{SystemKind, SystemSpec};
use coda::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

use crate::CliError;

pub const FORMAT_VERSION: u8 = 1;

/// Trajectories per environment in each generated split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: usize,
    pub adapt: usize,
    pub eval: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directions {
    /// The two leading columns of `W`.
    W,
    /// Leading left singular vectors of the per-environment gradients.
    Svd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub loss: LossKind,
    /// Sampled states for the vector-field loss.
    pub states: usize,
    pub directions: Directions,
    pub extent: f64,
    pub resolution: usize,
}

/// The single configuration object of a run; see `schema/experiment.schema.json`.
///
/// `seed`, `context_dim` and `variant` are copied into `train` after loading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u8,
    pub system: SystemKind,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub splits: Splits,
    pub variant: PenaltyVariant,
    pub context_dim: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub analysis: AnalysisConfig,
}

impl ExperimentConfig {
    pub fn defaults(system: SystemKind, variant: PenaltyVariant) -> Self {
        let train = TrainConfig::for_system(system, variant);
        Self {
            format_version: FORMAT_VERSION,
            system,
            seed: 0,
            output_dir: PathBuf::from(format!("runs/{}", system.name())),
            splits: Splits {
                train: match system {
                    SystemKind::Lv => 4,
                    SystemKind::Go => 32,
                    SystemKind::Gs => 1,
                },
                adapt: 1,
                eval: 32,
            },
            variant,
            context_dim: train.context_dim,
            model: ModelConfig::for_system(system),
            adapt: AdaptConfig {
                penalty: ContextPenalty::Context(train.penalty.lambda_xi),
                ..AdaptConfig::default()
            },
            train,
            analysis: AnalysisConfig {
                loss: LossKind::Trajectory,
                states: 1024,
                directions: Directions::W,
                extent: 1.0,
                resolution: 41,
            },
        }
    }

    pub fn spec(&self) -> SystemSpec {
        SystemSpec::new(self.system)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.format_version != FORMAT_VERSION {
            return Err(CliError::Usage(format!(
                "config format_version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.splits.train == 0 || self.splits.adapt == 0 || self.splits.eval == 0 {
            return Err(CliError::Usage("splits need at least one trajectory each".into()));
        }
        if self.analysis.resolution.is_multiple_of(2) || !(self.analysis.extent >= 0.0) {
            return Err(CliError::Usage(
                "analysis.resolution must be odd and analysis.extent non-negative".into(),
            ));
        }
        let spec = self.spec();
        if self.model.state_shape() != spec.state_shape {
            return Err(CliError::Usage(format!(
                "model state shape {:?} does not match the {} system {:?}",
                self.model.state_shape(),
                self.system,
                spec.state_shape
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.adapt.validate()?;
        Ok(())
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    pub fn data_file(&self, split: &str) -> PathBuf {
        self.out(&format!("{}_{split}.coda", self.system.name()))
    }
}

/// Flag values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub variant: Option<PenaltyVariant>,
    pub dxi: Option<usize>,
}

/// Tagged values that are replaced as a whole rather than merged key by key.
const REPLACED: [&str; 2] = ["model", "adapt.penalty"];

fn merge(base: &mut Value, user: Value, path: &str) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) if !REPLACED.contains(&sub.as_str()) => merge(slot, v, &sub),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("invalid config: {e}"))
}

fn field<T: serde::de::DeserializeOwned>(v: &Value, k: &str) -> Result<Option<T>, CliError> {
    v.get(k).cloned().map(serde_json::from_value).transpose().map_err(usage)
}

/// Builds the effective config: per-system defaults, then the file, then flags.
pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<ExperimentConfig, CliError> {
    let user = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str::<Value>(&text).map_err(usage)?
        }
        None => Value::Object(Default::default()),
    };
    if !user.is_object() {
        return Err(usage("top level must be an object"));
    }
    let system: SystemKind = field(&user, "system")?.unwrap_or(SystemKind::Lv);
    let variant: PenaltyVariant = match ov.variant {
        Some(v) => v,
        None => field(&user, "variant")?.unwrap_or_default(),
    };
    let mut value = serde_json::to_value(ExperimentConfig::defaults(system, variant)).map_err(usage)?;
    merge(&mut value, user, "");
    let mut cfg: ExperimentConfig = serde_json::from_value(value).map_err(usage)?;
    cfg.variant = variant;
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(o) = &ov.out {
        cfg.output_dir = o.clone();
    }
    if let Some(d) = ov.dxi {
        cfg.context_dim = d;
    }
    cfg.train.seed = cfg.seed;
    cfg.train.context_dim = cfg.context_dim;
    cfg.train.penalty.variant = cfg.variant;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load_str(s: &str) -> Result<ExperimentConfig, CliError> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, s).unwrap();
        load(Some(&p), &Overrides::default())
    }

    #[test]
    fn defaults_roundtrip() {
        let d = ExperimentConfig::defaults(SystemKind::Go, PenaltyVariant::L2);
        let back: ExperimentConfig = serde_json::from_value(serde_json::to_value(&d).unwrap()).unwrap();
        assert_eq!(back, d);
        d.validate().unwrap();
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = load_str(r#"{"system": "go", "train": {"epochs": 7}}"#).unwrap();
        assert_eq!(c.system, SystemKind::Go);
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.learning_rate, 1e-3);
        assert_eq!(c.model, ModelConfig::for_system(SystemKind::Go));
        let c = load_str(r#"{"adapt": {"penalty": {"offset": 0.5}}}"#).unwrap();
        assert_eq!(c.adapt.penalty, ContextPenalty::Offset(0.5));
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(matches!(load_str(r#"{"sytem": "lv"}"#), Err(CliError::Usage(_))));
        assert!(matches!(load_str(r#"{"train": {"epoch": 3}}"#), Err(CliError::Usage(_))));
        assert!(matches!(load_str(r#"{"system": "pendulum"}"#), Err(CliError::Usage(_))));
        assert!(matches!(load_str(r#"{"analysis": {"resolution": 10}}"#), Err(CliError::Usage(_))));
    }

    #[test]
    fn flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 3, "context_dim": 4, "variant": "l1"}"#).unwrap();
        let ov = Overrides {
            seed: Some(9),
            dxi: Some(1),
            variant: Some(PenaltyVariant::L2),
            ..Overrides::default()
        };
        let c = load(Some(&p), &ov).unwrap();
        assert_eq!((c.seed, c.train.seed, c.context_dim, c.train.context_dim), (9, 9, 1, 1));
        assert_eq!(c.train.penalty.variant, PenaltyVariant::L2);
        assert_eq!(c.train.penalty.lambda_omega, 1e-5);
    }

    fn same_keys(value: &Value, schema: &Value, path: &str) {
        let (Some(obj), Some(props)) = (value.as_object(), schema.get("properties").and_then(Value::as_object)) else {
            return;
        };
        let mut a: Vec<&String> = obj.keys().collect();
        let mut b: Vec<&String> = props.keys().collect();
        a.sort();
        b.sort();
        assert_eq!(a, b, "keys at {path:?}");
        for (k, v) in obj {
            same_keys(v, &props[k], &format!("{path}.{k}"));
        }
    }

    #[test]
    fn schema_lists_every_key() {
        let schema: Value = serde_json::from_str(include_str!("../schema/experiment.schema.json")).unwrap();
        for kind in [SystemKind::Lv, SystemKind::Go, SystemKind::Gs] {
            let d = serde_json::to_value(ExperimentConfig::defaults(kind, PenaltyVariant::L1)).unwrap();
            same_keys(&d, &schema, "");
        }
    }
}
