//! Training loops: normal training, adversarial training on 100% or 50%
//! adversarial examples, and confidence-calibrated adversarial training
//! (CCAT).
//!
//! CCAT attacks the first half of every shuffled batch with PGD-Conf and
//! trains those examples towards
//!
//! ```text
//! ỹ = λ(δ)·one_hot(y) + (1 − λ(δ))·1/K,   λ(δ) = (1 − min(1, ‖δ‖∞/ε))^ρ
//! ```
//!
//! while the clean half keeps its one-hot labels. The loss is the mean
//! cross-entropy over the whole batch.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_attack, AttackConfig, Objective};
use crate::data::{fmt_f64, permutation, Dataset};
use crate::geometry::{lp_norm, InitMode, Norm};
use crate::netcore::{cross_entropy_logits, one_hot, Matrix, Network, Wrt};
use crate::rng::{stream, stream_key, Purpose};
use crate::{Error, Result};

/// Power transition `λ = (1 − min(1, ‖δ‖∞/ε))^ρ` from a precomputed
/// `‖δ‖∞`.
pub fn lambda_power_from_norm(delta_inf: f64, epsilon: f64, rho: f64) -> f64 {
    (1.0 - (delta_inf / epsilon).min(1.0)).powf(rho)
}

pub fn lambda_power(delta: &[f64], epsilon: f64, rho: f64) -> Result<f64> {
    if !(epsilon > 0.0) || !(rho > 0.0) {
        return Err(Error::InvalidConfig(format!("need ε > 0 and ρ > 0, got ε={epsilon} ρ={rho}")));
    }
    Ok(lambda_power_from_norm(lp_norm(delta, Norm::Inf), epsilon, rho))
}

/// `λ·one_hot(y) + (1 − λ)/K`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    pub probs: Vec<f64>,
    pub lambda: f64,
}

pub fn make_target(y: usize, lambda: f64, num_classes: usize) -> Result<TargetDistribution> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!("λ must be in [0,1], got {lambda}")));
    }
    if num_classes < 2 || y >= num_classes {
        return Err(Error::InvalidConfig(format!("label {y} with {num_classes} classes")));
    }
    let base = (1.0 - lambda) / num_classes as f64;
    let mut probs = vec![base; num_classes];
    probs[y] = lambda + base;
    Ok(TargetDistribution { probs, lambda })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Normal,
    At50,
    At100,
    Ccat,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Regime::Normal),
            "at50" => Ok(Regime::At50),
            "at100" => Ok(Regime::At100),
            "ccat" => Ok(Regime::Ccat),
            _ => Err(Error::InvalidConfig(format!("unknown regime {s:?}"))),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Normal => "normal",
            Regime::At50 => "at50",
            Regime::At100 => "at100",
            Regime::Ccat => "ccat",
        })
    }
}

/// Hyperparameters for every regime. `epsilon`, `rho` and `attack` only
/// matter for the adversarial regimes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    /// L∞ training radius.
    pub epsilon: f64,
    /// Power-transition exponent (CCAT).
    pub rho: f64,
    pub attack: AttackConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults: batch 100, lr 0.1 decayed by 0.95 per epoch, ρ = 10 and a
    /// 40-iteration training attack (PGD-Conf for CCAT, PGD-CE otherwise).
    pub fn new(regime: Regime, epsilon: f64, epochs: usize, seed: u64) -> Result<Self> {
        let attack = match regime {
            Regime::Ccat => AttackConfig::training_conf(epsilon)?,
            _ => AttackConfig::training_ce(epsilon, 0.05)?,
        };
        Ok(Self {
            regime,
            epochs,
            batch_size: 100,
            lr: 0.1,
            lr_decay: 0.95,
            epsilon,
            rho: 10.0,
            attack,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be ≥ 0 and decay > 0".into()));
        }
        if self.regime != Regime::Normal {
            if self.attack.tm.norm != Norm::Inf {
                return Err(Error::InvalidConfig("adversarial training uses L∞ attacks".into()));
            }
            if self.regime == Regime::Ccat && (!(self.rho > 0.0) || !(self.epsilon > 0.0)) {
                return Err(Error::InvalidConfig("CCAT needs ρ > 0 and ε > 0".into()));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

/// `λ` emitted for one adversarial training example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaEvent {
    pub epoch: usize,
    pub example: usize,
    pub delta_inf: f64,
    pub lambda: f64,
}

/// Summary of one training epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_clean_loss: Option<f64>,
    pub mean_adv_loss: Option<f64>,
    pub mean_lambda: Option<f64>,
    /// Accuracy of the pre-update predictions on the clean examples.
    pub train_accuracy: f64,
    pub lr: f64,
    /// Every per-example loss term of the epoch.
    pub loss_terms: Vec<f64>,
    pub lambdas: Vec<LambdaEvent>,
}

impl EpochStats {
    pub fn mean_loss(&self) -> f64 {
        self.loss_terms.iter().sum::<f64>() / self.loss_terms.len().max(1) as f64
    }
}

/// How the adversarial part of a batch is produced and labelled.
#[derive(Debug, Clone, Copy)]
enum AdvMode<'a> {
    None,
    OneHot { fraction: f64, attack: &'a AttackConfig },
    Ccat { attack: &'a AttackConfig, epsilon: f64, rho: f64 },
}

struct EpochCtx<'a> {
    data: &'a Dataset,
    lr: f64,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    mode: AdvMode<'a>,
}

fn run_epoch(net: &mut Network, ctx: EpochCtx<'_>) -> Result<EpochStats> {
    let EpochCtx { data, lr, batch_size, seed, epoch, mode } = ctx;
    if data.dim() != net.input_dim() || data.num_classes() != net.num_classes() {
        return Err(Error::Shape("dataset does not match network".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let k = net.num_classes();
    let order = permutation(data.len(), &mut stream(seed, Purpose::Shuffle, epoch as u64, 0));
    let attack_seed = stream_key(seed, Purpose::Attack, epoch as u64, 0);

    let mut clean_losses = Vec::new();
    let mut adv_losses = Vec::new();
    let mut lambdas = Vec::new();
    let mut correct = 0usize;
    let mut clean_seen = 0usize;

    for batch in order.chunks(batch_size) {
        let b = batch.len();
        let n_adv = match mode {
            AdvMode::None => 0,
            AdvMode::OneHot { fraction, .. } => (fraction * b as f64).floor() as usize,
            AdvMode::Ccat { .. } => b / 2,
        };
        let mut rows = Vec::with_capacity(b);
        let mut targets = Vec::with_capacity(b);
        for (pos, &i) in batch.iter().enumerate() {
            let (x, y) = (data.x(i), data.y(i));
            if pos >= n_adv {
                rows.push(x.to_vec());
                targets.push(one_hot(y, k));
                continue;
            }
            match mode {
                AdvMode::None => unreachable!("no adversarial slots"),
                AdvMode::OneHot { attack, .. } => {
                    if attack.tm.epsilon == 0.0 {
                        rows.push(x.to_vec());
                    } else {
                        let cfg = AttackConfig { seed: attack_seed, ..attack.clone() };
                        let out = pgd_attack(net, x, y, &cfg, i as u64)?;
                        rows.push(x.iter().zip(&out.delta).map(|(a, d)| a + d).collect());
                    }
                    targets.push(one_hot(y, k));
                }
                AdvMode::Ccat { attack, epsilon, rho } => {
                    let zero = stream(seed, Purpose::InitSwitch, epoch as u64, i as u64).random::<bool>();
                    let cfg = AttackConfig {
                        seed: attack_seed,
                        init: if zero { InitMode::Zero } else { InitMode::Random },
                        restarts: 1,
                        zero_init_restart: false,
                        ..attack.clone()
                    };
                    let out = pgd_attack(net, x, y, &cfg, i as u64)?;
                    let delta_inf = lp_norm(&out.delta, Norm::Inf);
                    let lambda = lambda_power_from_norm(delta_inf, epsilon, rho);
                    lambdas.push(LambdaEvent { epoch, example: i, delta_inf, lambda });
                    rows.push(x.iter().zip(&out.delta).map(|(a, d)| a + d).collect());
                    targets.push(make_target(y, lambda, k)?.probs);
                }
            }
        }

        let trace = net.forward(&Matrix::from_rows(&rows)?)?;
        for (pos, &i) in batch.iter().enumerate() {
            let logits = trace.logits().row(pos);
            let loss = cross_entropy_logits(logits, &targets[pos]);
            if pos < n_adv {
                adv_losses.push(loss);
            } else {
                clean_losses.push(loss);
                clean_seen += 1;
                if crate::attacks::argmax(logits) == data.y(i) {
                    correct += 1;
                }
            }
        }
        if lr > 0.0 {
            let grads = net.backward(&trace, &Matrix::from_rows(&targets)?, Wrt::Params)?;
            net.sgd_step(&grads, lr)?;
        }
    }

    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let lambda_values: Vec<f64> = lambdas.iter().map(|e| e.lambda).collect();
    let mut loss_terms = adv_losses.clone();
    loss_terms.extend(&clean_losses);
    Ok(EpochStats {
        epoch,
        mean_clean_loss: mean(&clean_losses),
        mean_adv_loss: mean(&adv_losses),
        mean_lambda: mean(&lambda_values),
        train_accuracy: if clean_seen == 0 { 0.0 } else { correct as f64 / clean_seen as f64 },
        lr,
        loss_terms,
        lambdas,
    })
}

/// One pass of shuffled minibatch SGD on clean cross-entropy.
pub fn train_epoch_normal(
    net: &mut Network,
    data: &Dataset,
    lr: f64,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<EpochStats> {
    run_epoch(net, EpochCtx { data, lr, batch_size, seed, epoch, mode: AdvMode::None })
}

/// Adversarial training: the first `⌊fraction·B⌋` examples of each shuffled
/// batch are replaced by PGD-CE adversarial examples with one-hot targets.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch_at(
    net: &mut Network,
    data: &Dataset,
    fraction: f64,
    attack: &AttackConfig,
    lr: f64,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<EpochStats> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!("adversarial fraction {fraction} outside [0,1]")));
    }
    if attack.objective != Objective::Ce {
        return Err(Error::InvalidConfig("adversarial training attacks with PGD-CE".into()));
    }
    run_epoch(
        net,
        EpochCtx { data, lr, batch_size, seed, epoch, mode: AdvMode::OneHot { fraction, attack } },
    )
}

/// One CCAT epoch. Each attacked example uses zero or random initialisation
/// with equal probability.
pub fn train_epoch_ccat(net: &mut Network, data: &Dataset, cfg: &TrainConfig, epoch: usize) -> Result<EpochStats> {
    cfg.validate()?;
    if cfg.attack.objective != Objective::Conf {
        return Err(Error::InvalidConfig("CCAT attacks with PGD-Conf".into()));
    }
    run_epoch(
        net,
        EpochCtx {
            data,
            lr: cfg.lr_at(epoch),
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            epoch,
            mode: AdvMode::Ccat { attack: &cfg.attack, epsilon: cfg.epsilon, rho: cfg.rho },
        },
    )
}

/// Runs `cfg.epochs` epochs of the configured regime.
pub fn train(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    (0..cfg.epochs)
        .map(|epoch| {
            let lr = cfg.lr_at(epoch);
            match cfg.regime {
                Regime::Normal => train_epoch_normal(net, data, lr, cfg.batch_size, cfg.seed, epoch),
                Regime::At50 | Regime::At100 => {
                    let fraction = if cfg.regime == Regime::At50 { 0.5 } else { 1.0 };
                    train_epoch_at(net, data, fraction, &cfg.attack, lr, cfg.batch_size, cfg.seed, epoch)
                }
                Regime::Ccat => train_epoch_ccat(net, data, cfg, epoch),
            }
        })
        .collect()
}

/// `epoch, mean_clean_loss, mean_adv_loss, mean_lambda, train_accuracy, lr`;
/// absent values are left empty.
pub fn write_train_log<W: Write>(writer: W, stats: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "mean_clean_loss", "mean_adv_loss", "mean_lambda", "train_accuracy", "lr"])?;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for s in stats {
        w.write_record([
            s.epoch.to_string(),
            opt(s.mean_clean_loss),
            opt(s.mean_adv_loss),
            opt(s.mean_lambda),
            fmt_f64(s.train_accuracy),
            fmt_f64(s.lr),
        ])?;
    }
    w.flush()?;
    Ok(())
}
