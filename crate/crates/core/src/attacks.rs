//! White-box PGD with momentum and backtracking, black-box random sampling,
//! distal adversarial examples, adversarial frames, and per-example
//! worst-case merging.
//!
//! PGD maximises either the cross-entropy loss (`PGD-CE`) or the highest
//! confidence in any wrong class (`PGD-Conf`):
//!
//! ```text
//! F_ce(x+δ, y)   = −log f_y(x+δ)
//! F_conf(x+δ, y) = max_{k≠y} f_k(x+δ)
//! ```
//!
//! Each iteration projects δ, evaluates the objective and its gradient, keeps
//! the best δ seen so far, blends the normalised gradient into a momentum
//! buffer and tries the step. The step is kept only if the objective does not
//! decrease; otherwise the learning rate is divided by `α`. The last iteration
//! only evaluates, so the final accepted step is also considered.
//!
//! Random streams are derived from `(seed, example_id, restart)`, so results
//! do not depend on the order in which examples are attacked.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    init_perturbation, lp_norm, normalize_gradient, project_feasible, InitMode, ThreatModel,
};
use crate::netcore::{softmax, ForwardTrace, Matrix, Network, Wrt};
use crate::rng::{stream, Purpose};
use crate::{Error, Result};

/// Learning rates never shrink below this floor under backtracking.
pub const LR_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Cross-entropy against the true label.
    Ce,
    /// Maximum confidence over wrong classes.
    Conf,
    /// Maximum confidence over all classes (no label; distal examples).
    MaxConf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub objective: Objective,
    pub tm: ThreatModel,
    /// Number of update iterations `T`; iteration `T` only evaluates.
    pub iterations: usize,
    /// Initial learning rate `γ`.
    pub base_lr: f64,
    /// Momentum `β ∈ [0,1)`.
    pub momentum: f64,
    /// Backtracking factor `α > 1`.
    pub lr_factor: f64,
    pub init: InitMode,
    /// Restarts using `init`.
    pub restarts: usize,
    /// Adds one extra zero-initialised restart before the others.
    #[serde(default)]
    pub zero_init_restart: bool,
    /// When false every trial step is accepted (plain projected ascent).
    #[serde(default = "default_true")]
    pub backtracking: bool,
    /// Clears the momentum buffer whenever a trial step is rejected.
    #[serde(default)]
    pub reset_momentum_on_reject: bool,
    /// Coordinates that may be perturbed (adversarial frames).
    #[serde(default)]
    pub mask: Option<Vec<bool>>,
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl AttackConfig {
    fn base(objective: Objective, tm: ThreatModel, iterations: usize, base_lr: f64) -> Self {
        Self {
            objective,
            tm,
            iterations,
            base_lr,
            momentum: 0.9,
            lr_factor: 1.1,
            init: InitMode::Random,
            restarts: 1,
            zero_init_restart: false,
            backtracking: true,
            reset_momentum_on_reject: false,
            mask: None,
            seed: 0,
        }
    }

    /// Test-time PGD-Conf: `T=1000, γ=0.001, β=0.9, α=1.1`, 10 random restarts
    /// plus one zero-initialised restart.
    pub fn pgd_conf(tm: ThreatModel) -> Self {
        Self { restarts: 10, zero_init_restart: true, ..Self::base(Objective::Conf, tm, 1000, 0.001) }
    }

    /// Test-time PGD-CE: `T=200, γ=0.05, β=0.9, α=1.25`, 50 random restarts
    /// plus one zero-initialised restart.
    pub fn pgd_ce(tm: ThreatModel) -> Self {
        Self {
            lr_factor: 1.25,
            restarts: 50,
            zero_init_restart: true,
            ..Self::base(Objective::Ce, tm, 200, 0.05)
        }
    }

    /// Training-time PGD-Conf (CCAT): `T=40, γ=0.005, β=0.9, α=1.5`, one run.
    pub fn training_conf(epsilon: f64) -> Result<Self> {
        Ok(Self { lr_factor: 1.5, ..Self::base(Objective::Conf, ThreatModel::linf(epsilon)?, 40, 0.005) })
    }

    /// Training-time PGD-CE (adversarial training): `T=40, β=0.9, α=1.5`.
    pub fn training_ce(epsilon: f64, lr: f64) -> Result<Self> {
        Ok(Self { lr_factor: 1.5, ..Self::base(Objective::Ce, ThreatModel::linf(epsilon)?, 40, lr) })
    }

    /// Adversarial frames: `border`-pixel frame of an `h×w×c` image, free
    /// within `[0,1]`, everything else fixed.
    pub fn frames(h: usize, w: usize, c: usize, border: usize, iterations: usize, base_lr: f64) -> Result<Self> {
        Ok(Self {
            mask: Some(frame_mask(h, w, c, border)?),
            restarts: 10,
            zero_init_restart: true,
            ..Self::base(Objective::Conf, ThreatModel::linf(1.0)?, iterations, base_lr)
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        self.tm.validate(Some(dim))?;
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("attack needs at least one iteration".into()));
        }
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(Error::InvalidConfig(format!("attack lr must be ≥ 0, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if !(self.lr_factor > 1.0) {
            return Err(Error::InvalidConfig(format!("lr factor must exceed 1, got {}", self.lr_factor)));
        }
        if self.restarts == 0 && !self.zero_init_restart {
            return Err(Error::InvalidConfig("attack needs at least one restart".into()));
        }
        if let Some(m) = &self.mask {
            if m.len() != dim {
                return Err(Error::Shape(format!("mask has {} entries, input {dim}", m.len())));
            }
        }
        Ok(())
    }

    fn total_restarts(&self) -> usize {
        self.restarts + usize::from(self.zero_init_restart)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub delta: Vec<f64>,
    /// Objective value at `delta`.
    pub objective: f64,
    /// `max_k f_k(x + δ)`.
    pub adv_confidence: f64,
    pub adv_label: usize,
    /// `adv_label ≠ y` (for distal examples: confidence reached the threshold).
    pub success: bool,
    pub iterations_used: usize,
    pub restarts_used: usize,
    /// Index of the restart that produced `delta`.
    pub restart: usize,
    /// The raw input gradient vanished and the run stopped early.
    pub stalled: bool,
    /// Best objective after each evaluated iteration of the winning restart.
    #[serde(skip)]
    pub best_trace: Vec<f64>,
}

/// Objective value, class confidences and (optionally) the input gradient at
/// one point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub probs: Vec<f64>,
    pub gradient: Option<Vec<f64>>,
}

/// Index of the largest entry, skipping `exclude`; ties go to the lowest index.
fn argmax_excluding(p: &[f64], exclude: Option<usize>) -> usize {
    let mut best = None;
    for (k, &v) in p.iter().enumerate() {
        if Some(k) == exclude {
            continue;
        }
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((k, v)),
        }
    }
    best.map(|(k, _)| k).expect("at least two classes")
}

pub fn argmax(p: &[f64]) -> usize {
    argmax_excluding(p, None)
}

fn check_label(net: &Network, y: Option<usize>, objective: Objective) -> Result<()> {
    match (objective, y) {
        (Objective::MaxConf, _) => Ok(()),
        (_, Some(y)) if y < net.num_classes() => Ok(()),
        (_, Some(y)) => Err(Error::InvalidConfig(format!("label {y} out of range"))),
        (_, None) => Err(Error::InvalidConfig("objective needs a label".into())),
    }
}

fn objective_from_trace(
    net: &Network,
    trace: &ForwardTrace,
    y: Option<usize>,
    objective: Objective,
    want_grad: bool,
) -> Result<Evaluation> {
    let logits = trace.logits().row(0);
    let probs = softmax(logits);
    let k = probs.len();
    let (value, dlogits) = match objective {
        Objective::Ce => {
            let y = y.expect("checked");
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            let d: Vec<f64> = (0..k).map(|j| probs[j] - f64::from(u8::from(j == y))).collect();
            (lse - logits[y], d)
        }
        Objective::Conf | Objective::MaxConf => {
            let target = argmax_excluding(&probs, if objective == Objective::Conf { y } else { None });
            let pk = probs[target];
            let d: Vec<f64> = (0..k)
                .map(|j| pk * (f64::from(u8::from(j == target)) - probs[j]))
                .collect();
            (pk, d)
        }
    };
    let gradient = if want_grad {
        let g = net.backward_from_logits(trace, &Matrix::row_vector(&dlogits), Wrt::Input)?;
        Some(g.input.expect("input gradient requested").into_vec())
    } else {
        None
    };
    Ok(Evaluation { value, probs, gradient })
}

/// Evaluates an attack objective at `x + delta`, optionally with its input
/// gradient.
pub fn evaluate_objective(
    net: &Network,
    x: &[f64],
    delta: &[f64],
    y: Option<usize>,
    objective: Objective,
    want_grad: bool,
) -> Result<Evaluation> {
    check_label(net, y, objective)?;
    let point: Vec<f64> = x.iter().zip(delta).map(|(a, b)| a + b).collect();
    let trace = net.forward(&Matrix::row_vector(&point))?;
    objective_from_trace(net, &trace, y, objective, want_grad)
}

/// Cross-entropy of `f(x+δ)` against one-hot `y`.
pub fn objective_ce(net: &Network, x: &[f64], delta: &[f64], y: usize) -> Result<f64> {
    Ok(evaluate_objective(net, x, delta, Some(y), Objective::Ce, false)?.value)
}

/// `max_{k≠y} f_k(x+δ)`.
pub fn objective_conf(net: &Network, x: &[f64], delta: &[f64], y: usize) -> Result<f64> {
    Ok(evaluate_objective(net, x, delta, Some(y), Objective::Conf, false)?.value)
}

/// Wrong class attaining [`objective_conf`]; ties go to the lowest index.
pub fn conf_target_class(probs: &[f64], y: usize) -> usize {
    argmax_excluding(probs, Some(y))
}

struct RunResult {
    delta: Vec<f64>,
    value: f64,
    probs: Vec<f64>,
    iterations_used: usize,
    stalled: bool,
    trace: Vec<f64>,
}

/// A single PGD run from a given initial perturbation.
fn pgd_run(
    net: &Network,
    x: &[f64],
    y: Option<usize>,
    cfg: &AttackConfig,
    init: Vec<f64>,
) -> Result<RunResult> {
    let mask = cfg.mask.as_deref();
    let project = |d: &[f64]| project_feasible(x, d, &cfg.tm, mask);
    let forward = |d: &[f64]| -> Result<ForwardTrace> {
        let point: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + b).collect();
        net.forward(&Matrix::row_vector(&point))
    };

    let mut delta = init;
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let mut lr = cfg.base_lr;
    let mut momentum = vec![0.0; x.len()];
    let mut cached: Option<(Vec<f64>, ForwardTrace)> = None;
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut stalled = false;
    let mut iterations_used = 0;

    for t in 0..=cfg.iterations {
        iterations_used = t;
        delta = project(&delta);
        let fwd = match cached.take() {
            Some((d, tr)) if d == delta => tr,
            _ => forward(&delta)?,
        };
        let eval = objective_from_trace(net, &fwd, y, cfg.objective, t < cfg.iterations)?;
        if best.as_ref().is_none_or(|(v, _, _)| eval.value > *v) {
            best = Some((eval.value, delta.clone(), eval.probs.clone()));
        }
        trace.push(best.as_ref().map(|b| b.0).expect("set above"));
        if t == cfg.iterations {
            break;
        }

        let dir = normalize_gradient(eval.gradient.as_deref().expect("requested"), cfg.tm.norm);
        if dir.stalled {
            stalled = true;
            break;
        }
        for (m, g) in momentum.iter_mut().zip(&dir.values) {
            *m = cfg.momentum * *m + (1.0 - cfg.momentum) * g;
        }
        let step: Vec<f64> = delta.iter().zip(&momentum).map(|(d, m)| d + lr * m).collect();
        let trial = project(&step);
        if !cfg.backtracking {
            delta = trial;
            continue;
        }
        let trial_fwd = forward(&trial)?;
        let trial_value = objective_from_trace(net, &trial_fwd, y, cfg.objective, false)?.value;
        if trial_value >= eval.value {
            cached = Some((trial.clone(), trial_fwd));
            delta = trial;
        } else {
            lr = (lr / cfg.lr_factor).max(LR_FLOOR);
            if cfg.reset_momentum_on_reject {
                momentum.iter_mut().for_each(|m| *m = 0.0);
            }
        }
    }
    let (value, delta, probs) = best.expect("at least one evaluation");
    Ok(RunResult { delta, value, probs, iterations_used, stalled, trace })
}

fn outcome_from(
    run: RunResult,
    y: Option<usize>,
    restart: usize,
    restarts_used: usize,
) -> AttackOutcome {
    let adv_label = argmax(&run.probs);
    AttackOutcome {
        adv_confidence: run.probs[adv_label],
        adv_label,
        success: y.is_some_and(|y| adv_label != y),
        objective: run.value,
        delta: run.delta,
        iterations_used: run.iterations_used,
        restarts_used,
        restart,
        stalled: run.stalled,
        best_trace: run.trace,
    }
}

/// Whether `a` should replace `b` as the best restart of one attack.
/// Successful outcomes beat unsuccessful ones; among successful outcomes the
/// higher adversarial confidence wins, otherwise the higher objective.
/// Ties keep the earlier outcome.
fn restart_improves(a: &AttackOutcome, b: &AttackOutcome) -> bool {
    match (a.success, b.success) {
        (true, false) => true,
        (false, true) => false,
        (true, true) => a.adv_confidence > b.adv_confidence,
        (false, false) => a.objective > b.objective,
    }
}

fn pgd_impl(
    net: &Network,
    x: &[f64],
    y: Option<usize>,
    cfg: &AttackConfig,
    example_id: u64,
) -> Result<AttackOutcome> {
    if x.len() != net.input_dim() {
        return Err(Error::Shape(format!("input has {} entries, network expects {}", x.len(), net.input_dim())));
    }
    check_label(net, y, cfg.objective)?;
    cfg.validate(x.len())?;
    let total = cfg.total_restarts();
    let mut best: Option<AttackOutcome> = None;
    let mut best_so_far = f64::NEG_INFINITY;
    for r in 0..total {
        let mode = if cfg.zero_init_restart && r == 0 { InitMode::Zero } else { cfg.init };
        let mut rng = stream(cfg.seed, Purpose::Attack, example_id, r as u64);
        let init = init_perturbation(&cfg.tm, x, mode, &mut rng);
        let init = project_feasible(x, &init, &cfg.tm, cfg.mask.as_deref());
        let mut run = pgd_run(net, x, y, cfg, init)?;
        // Best objective tracked across restarts as well.
        for v in run.trace.iter_mut() {
            best_so_far = best_so_far.max(*v);
            *v = best_so_far;
        }
        let outcome = outcome_from(run, y, r, total);
        if best.as_ref().is_none_or(|b| restart_improves(&outcome, b)) {
            best = Some(outcome);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// PGD with momentum and backtracking over all configured restarts.
pub fn pgd_attack(
    net: &Network,
    x: &[f64],
    y: usize,
    cfg: &AttackConfig,
    example_id: u64,
) -> Result<AttackOutcome> {
    pgd_impl(net, x, Some(y), cfg, example_id)
}

/// Best of `samples` random feasible perturbations under the confidence
/// objective. All draws come from one stream, so a larger `samples` extends
/// the same sequence.
pub fn random_sampling_attack(
    net: &Network,
    x: &[f64],
    y: usize,
    tm: &ThreatModel,
    samples: usize,
    seed: u64,
    example_id: u64,
) -> Result<AttackOutcome> {
    if samples == 0 {
        return Err(Error::InvalidConfig("random sampling needs at least one sample".into()));
    }
    tm.validate(Some(x.len()))?;
    let mut rng = stream(seed, Purpose::Sampling, example_id, 0);
    let mut best: Option<(f64, Vec<f64>, Vec<f64>, usize)> = None;
    let mut trace = Vec::with_capacity(samples);
    for s in 0..samples {
        let delta = init_perturbation(tm, x, InitMode::Random, &mut rng);
        let eval = evaluate_objective(net, x, &delta, Some(y), Objective::Conf, false)?;
        if best.as_ref().is_none_or(|b| eval.value > b.0) {
            best = Some((eval.value, delta, eval.probs, s));
        }
        trace.push(best.as_ref().map(|b| b.0).expect("set above"));
    }
    let (value, delta, probs, sample) = best.expect("samples ≥ 1");
    let mut out = outcome_from(
        RunResult { delta, value, probs, iterations_used: samples, stalled: false, trace },
        Some(y),
        sample,
        samples,
    );
    out.restarts_used = samples;
    Ok(out)
}

/// A distal adversarial example together with the random starting image.
#[derive(Debug, Clone, PartialEq)]
pub struct DistalOutcome {
    pub origin: Vec<f64>,
    pub outcome: AttackOutcome,
}

/// Starts from `x₀ ~ U[0,1]^d` and maximises the highest confidence over all
/// classes within the threat model. Success means the confidence reached
/// `threshold`.
pub fn distal_attack(
    net: &Network,
    cfg: &AttackConfig,
    threshold: f64,
    example_id: u64,
) -> Result<DistalOutcome> {
    let mut rng = stream(cfg.seed, Purpose::Distal, example_id, 0);
    let origin: Vec<f64> = (0..net.input_dim()).map(|_| rng.random()).collect();
    let cfg = AttackConfig { objective: Objective::MaxConf, ..cfg.clone() };
    let mut outcome = pgd_impl(net, &origin, None, &cfg, example_id)?;
    outcome.success = outcome.adv_confidence >= threshold;
    Ok(DistalOutcome { origin, outcome })
}

/// Mask selecting the `border`-wide frame of an `h×w×c` image stored
/// row-major with interleaved channels.
pub fn frame_mask(h: usize, w: usize, c: usize, border: usize) -> Result<Vec<bool>> {
    if border == 0 || 2 * border >= h.min(w) || c == 0 {
        return Err(Error::InvalidConfig(format!(
            "frame border {border} does not fit a {h}x{w} image"
        )));
    }
    let mut mask = Vec::with_capacity(h * w * c);
    for r in 0..h {
        for col in 0..w {
            let on = r < border || r >= h - border || col < border || col >= w - border;
            mask.extend(std::iter::repeat_n(on, c));
        }
    }
    Ok(mask)
}

/// Per-example worst case across attacks and restarts.
///
/// Successful outcomes take precedence over unsuccessful ones; within each
/// group the highest adversarial confidence wins and ties keep the first
/// occurrence.
pub fn worst_case_merge(outcomes: &[AttackOutcome]) -> Result<&AttackOutcome> {
    let mut iter = outcomes.iter();
    let mut best = iter.next().ok_or(Error::Empty("attack outcomes"))?;
    for o in iter {
        let better = match (o.success, best.success) {
            (true, false) => true,
            (false, true) => false,
            _ => o.adv_confidence > best.adv_confidence,
        };
        if better {
            best = o;
        }
    }
    Ok(best)
}

/// One named attack in an evaluation suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackSpec {
    Pgd { name: String, config: AttackConfig },
    Random { name: String, tm: ThreatModel, samples: usize, seed: u64 },
}

impl AttackSpec {
    pub fn name(&self) -> &str {
        match self {
            AttackSpec::Pgd { name, .. } | AttackSpec::Random { name, .. } => name,
        }
    }

    pub fn threat_model(&self) -> &ThreatModel {
        match self {
            AttackSpec::Pgd { config, .. } => &config.tm,
            AttackSpec::Random { tm, .. } => tm,
        }
    }

    pub fn run(&self, net: &Network, x: &[f64], y: usize, example_id: u64) -> Result<AttackOutcome> {
        match self {
            AttackSpec::Pgd { config, .. } => pgd_attack(net, x, y, config, example_id),
            AttackSpec::Random { tm, samples, seed, .. } => {
                random_sampling_attack(net, x, y, tm, *samples, *seed, example_id)
            }
        }
    }
}

/// Persistable attack result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub example_id: u64,
    pub attack_name: String,
    pub restart: usize,
    pub p: String,
    pub epsilon: f64,
    pub objective: f64,
    pub adv_confidence: f64,
    pub adv_label: usize,
    pub success: bool,
    pub delta_norm: f64,
}

impl AttackRecord {
    pub fn new(example_id: u64, attack_name: &str, tm: &ThreatModel, outcome: &AttackOutcome) -> Self {
        Self {
            example_id,
            attack_name: attack_name.to_string(),
            restart: outcome.restart,
            p: tm.norm.to_string(),
            epsilon: tm.epsilon,
            objective: outcome.objective,
            adv_confidence: outcome.adv_confidence,
            adv_label: outcome.adv_label,
            success: outcome.success,
            delta_norm: lp_norm(&outcome.delta, tm.norm),
        }
    }
}

pub fn write_attack_records<W: Write>(writer: W, records: &[AttackRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "example_id", "attack_name", "restart", "p", "epsilon", "objective",
        "adv_confidence", "adv_label", "success", "delta_norm",
    ])?;
    for r in records {
        w.write_record([
            r.example_id.to_string(),
            r.attack_name.clone(),
            r.restart.to_string(),
            r.p.clone(),
            crate::data::fmt_f64(r.epsilon),
            crate::data::fmt_f64(r.objective),
            crate::data::fmt_f64(r.adv_confidence),
            r.adv_label.to_string(),
            r.success.to_string(),
            crate::data::fmt_f64(r.delta_norm),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_attack_records<R: std::io::Read>(reader: R) -> Result<Vec<AttackRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
