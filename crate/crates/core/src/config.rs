//! Experiment configuration: one JSON document, with command-line overrides
//! addressed by dotted path (`training.epochs=5`, `attacks.0.config.iterations=50`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attacks::{AttackConfig, AttackSpec};
use crate::data::{load_idx, make_two_gaussians, make_two_point, Dataset};
use crate::geometry::{l2_radius_matching_linf_volume, Norm, ThreatModel};
use crate::rng::{stream_key, Purpose};
use crate::training::{Regime, TrainConfig};
use crate::{Error, Result};

/// Environment variable supplying the default seed.
pub const SEED_ENV: &str = "CCATLAB_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    TwoGaussians {
        train_n: usize,
        test_n: usize,
        separation: f64,
    },
    TwoPoint {
        p0: f64,
        epsilon: f64,
        n: usize,
    },
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

/// Train and test sets.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
}

impl DatasetSpec {
    /// Relative MNIST paths are resolved against `base`.
    pub fn load(&self, seed: u64, base: Option<&Path>) -> Result<LoadedData> {
        match self {
            DatasetSpec::TwoGaussians { train_n, test_n, separation } => Ok(LoadedData {
                train: make_two_gaussians(*train_n, *separation, stream_key(seed, Purpose::Data, 0, 0))?,
                test: make_two_gaussians(*test_n, *separation, stream_key(seed, Purpose::Data, 1, 0))?,
            }),
            DatasetSpec::TwoPoint { p0, epsilon, n } => {
                let d = make_two_point(*p0, *epsilon, *n)?;
                Ok(LoadedData { train: d.clone(), test: d })
            }
            DatasetSpec::Mnist { train_images, train_labels, test_images, test_labels, train_limit, test_limit } => {
                let resolve = |p: &PathBuf| match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                let limit = |d: Dataset, n: &Option<usize>| match n {
                    Some(n) => d.head((*n).min(d.len())),
                    None => d,
                };
                Ok(LoadedData {
                    train: limit(load_idx(resolve(train_images), resolve(train_labels))?, train_limit),
                    test: limit(load_idx(resolve(test_images), resolve(test_labels))?, test_limit),
                })
            }
        }
    }
}

/// Sizes of the attacked split and the threshold holdout, both taken from
/// the test set (attacked first, holdout last, TE in between).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub rte: usize,
    pub holdout: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
}

impl ModelSpec {
    pub fn dims(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(&self.hidden);
        dims.push(classes);
        dims
    }
}

fn default_seed() -> u64 {
    std::env::var(SEED_ENV).ok().and_then(|s| s.trim().parse().ok()).unwrap_or(0)
}

fn default_tpr() -> Vec<f64> {
    vec![0.95, 0.98, 0.99]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub splits: SplitSpec,
    pub model: ModelSpec,
    pub training: TrainConfig,
    pub attacks: Vec<AttackSpec>,
    #[serde(default = "default_tpr")]
    pub tpr_targets: Vec<f64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Small two-Gaussians setup: 32-32 MLP, L∞ ε = 0.1 and a desk-scale
    /// attack suite (PGD-Conf at ε and 4/3·ε, L2 at matched volume).
    pub fn two_gaussians_default(regime: Regime) -> Result<Self> {
        let eps = 0.1;
        let mut training = TrainConfig::new(regime, eps, 60, 0)?;
        training.batch_size = 50;
        training.lr = 0.5;
        training.attack.iterations = 10;
        training.attack.base_lr = 0.05;
        Ok(Self {
            dataset: DatasetSpec::TwoGaussians { train_n: 1000, test_n: 600, separation: 6.0 },
            splits: SplitSpec { rte: 200, holdout: 200 },
            model: ModelSpec { hidden: vec![32, 32] },
            training,
            attacks: default_suite(eps, 2, 100, 2)?,
            tpr_targets: default_tpr(),
            seed: default_seed(),
            output_dir: None,
        })
    }

    /// MNIST from the four standard IDX files in `dir`: 64-64 MLP, L∞ ε = 0.1,
    /// 20 epochs and the same suite as the two-Gaussians setup.
    pub fn mnist_default(regime: Regime, dir: impl AsRef<Path>) -> Result<Self> {
        let eps = 0.1;
        let dir = dir.as_ref();
        let mut training = TrainConfig::new(regime, eps, 20, 0)?;
        training.batch_size = 50;
        training.lr = 0.5;
        training.attack.iterations = 10;
        training.attack.base_lr = 0.05;
        Ok(Self {
            dataset: DatasetSpec::Mnist {
                train_images: dir.join("train-images-idx3-ubyte"),
                train_labels: dir.join("train-labels-idx1-ubyte"),
                test_images: dir.join("t10k-images-idx3-ubyte"),
                test_labels: dir.join("t10k-labels-idx1-ubyte"),
                train_limit: None,
                test_limit: None,
            },
            splits: SplitSpec { rte: 200, holdout: 200 },
            model: ModelSpec { hidden: vec![64, 64] },
            training,
            attacks: default_suite(eps, 784, 100, 1)?,
            tpr_targets: default_tpr(),
            seed: default_seed(),
            output_dir: None,
        })
    }

    /// Parses JSON, applies `path=value` overrides and validates.
    pub fn from_json_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        Self::from_json_with_overrides(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")))
            }
        };
        if self.training.regime != Regime::Normal {
            positive("training.epsilon", self.training.epsilon)?;
            positive("training.rho", self.training.rho)?;
            check_attack(&self.training.attack)?;
        }
        for spec in &self.attacks {
            if let AttackSpec::Pgd { config, .. } = spec {
                check_attack(config)?;
            }
            positive("attack epsilon", spec.threat_model().epsilon)?;
        }
        if self.tpr_targets.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::InvalidConfig("TPR targets must be in (0,1]".into()));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::InvalidConfig("hidden layers must be non-empty".into()));
        }
        Ok(())
    }

    /// Replaces every seed with one derived from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.training.seed = stream_key(seed, Purpose::Shuffle, u64::MAX, 0);
        for (i, spec) in self.attacks.iter_mut().enumerate() {
            let s = stream_key(seed, Purpose::Attack, u64::MAX, i as u64);
            match spec {
                AttackSpec::Pgd { config, .. } => config.seed = s,
                AttackSpec::Random { seed, .. } => *seed = s,
            }
        }
    }
}

fn check_attack(cfg: &AttackConfig) -> Result<()> {
    if !(cfg.base_lr >= 0.0) || !(0.0..1.0).contains(&cfg.momentum) || !(cfg.lr_factor > 1.0) {
        return Err(Error::InvalidConfig(format!(
            "attack needs γ ≥ 0, β in [0,1) and α > 1 (got γ={}, β={}, α={})",
            cfg.base_lr, cfg.momentum, cfg.lr_factor
        )));
    }
    if cfg.iterations == 0 {
        return Err(Error::InvalidConfig("attack needs T ≥ 1".into()));
    }
    Ok(())
}

/// PGD-Conf on L∞ at ε and 4/3·ε, and on L2 at the radius whose ball has the
/// same volume as the 4/3·ε L∞ ball.
pub fn default_suite(eps: f64, dim: usize, iterations: usize, restarts: usize) -> Result<Vec<AttackSpec>> {
    let conf = |tm: ThreatModel, lr: f64| {
        let mut c = AttackConfig::pgd_conf(tm);
        c.iterations = iterations;
        c.restarts = restarts;
        c.base_lr = lr;
        c
    };
    let unseen = 4.0 / 3.0 * eps;
    let l2 = l2_radius_matching_linf_volume(unseen, dim);
    Ok(vec![
        AttackSpec::Pgd { name: "pgd_conf_linf".into(), config: conf(ThreatModel::linf(eps)?, 0.005) },
        AttackSpec::Pgd { name: "pgd_conf_linf_unseen".into(), config: conf(ThreatModel::linf(unseen)?, 0.005) },
        AttackSpec::Pgd { name: "pgd_conf_l2".into(), config: conf(ThreatModel::new(Norm::L2, l2)?, 0.05) },
    ])
}

/// Sets the field at a dotted path. The value is parsed as JSON and falls
/// back to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override {assignment:?} is not path=value")))?;
    let new: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let missing = || Error::InvalidConfig(format!("override path {path:?} does not exist"));
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), new);
                    return Ok(());
                }
                map.get_mut(*part).ok_or_else(missing)?
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| missing())?;
                let slot = items.get_mut(idx).ok_or_else(missing)?;
                if last {
                    *slot = new;
                    return Ok(());
                }
                slot
            }
            _ => return Err(missing()),
        };
    }
    Err(Error::InvalidConfig("empty override path".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let cfg = ExperimentConfig::two_gaussians_default(Regime::Ccat).unwrap();
        let back = ExperimentConfig::from_json_with_overrides(&cfg.to_json().unwrap(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn dotted_overrides() {
        let cfg = ExperimentConfig::two_gaussians_default(Regime::At50).unwrap();
        let over = vec![
            "training.epochs=3".to_string(),
            "attacks.1.config.iterations=7".to_string(),
            "training.regime=ccat".to_string(),
            "model.hidden=[4]".to_string(),
        ];
        let out = ExperimentConfig::from_json_with_overrides(&cfg.to_json().unwrap(), &over).unwrap();
        assert_eq!(out.training.epochs, 3);
        assert_eq!(out.training.regime, Regime::Ccat);
        assert_eq!(out.model.hidden, vec![4]);
        match &out.attacks[1] {
            AttackSpec::Pgd { config, .. } => assert_eq!(config.iterations, 7),
            other => panic!("unexpected {other:?}"),
        }
        let json = cfg.to_json().unwrap();
        assert!(ExperimentConfig::from_json_with_overrides(&json, &["nope.x=1".into()]).is_err());
        assert!(ExperimentConfig::from_json_with_overrides(&json, &["training.epochs".into()]).is_err());
        assert!(ExperimentConfig::from_json_with_overrides(&json, &["training.lr=-1".into()]).is_err());
    }

    #[test]
    fn reseed_changes_every_seed() {
        let mut a = ExperimentConfig::two_gaussians_default(Regime::Ccat).unwrap();
        let mut b = a.clone();
        a.reseed(1);
        b.reseed(2);
        assert_ne!(a.training.seed, b.training.seed);
        for (x, y) in a.attacks.iter().zip(&b.attacks) {
            assert_ne!(x, y);
        }
    }
}
