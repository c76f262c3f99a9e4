//! The two-point problem: `x = 0` with class 2 (probability `p0`) and
//! `x = ε` with class 1. Classifiers are described by their logit gaps
//! `a = g₁(0) − g₂(0)` and `b = g₁(ε) − g₂(ε)`.
//!
//! Adversarial training on this problem ends at `a = b`, so one of the two
//! points is always misclassified. CCAT trains adversarial inputs towards a
//! λ-mixed target and keeps `a < 0 < b` as long as
//! `λ(ε) < min{p0/(1−p0), (1−p0)/p0}`.
//!
//! Class 1 is network output 0 and class 2 is output 1, so a tie between
//! the logits predicts class 1 (the lower index).

use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::data::{fmt_f64, make_two_point};
use crate::geometry::InitMode;
use crate::netcore::{Activation, DenseLayer, Network};
use crate::training::{train_epoch_at, train_epoch_ccat, Regime, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyProblem {
    pub p0: f64,
    pub epsilon: f64,
    /// `λ(ε)`, the CCAT target weight at the full perturbation.
    pub lambda: f64,
}

impl ToyProblem {
    pub fn new(p0: f64, epsilon: f64, lambda: f64) -> Result<Self> {
        check_p0(p0)?;
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::InvalidConfig(format!("toy ε must be in (0, 1], got {epsilon}")));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidConfig(format!("λ must be in [0,1], got {lambda}")));
        }
        Ok(Self { p0, epsilon, lambda })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyParams {
    pub a: f64,
    pub b: f64,
}

fn check_p0(p0: f64) -> Result<()> {
    if p0 > 0.0 && p0 < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("p0 must be in (0,1), got {p0}")))
    }
}

/// `a* = b* = log((1 − p0)/p0)`, for both 100% and 50% adversarial training.
pub fn at_optimal_params(p0: f64) -> Result<ToyParams> {
    check_p0(p0)?;
    let a = ((1.0 - p0) / p0).ln();
    Ok(ToyParams { a, b: a })
}

pub fn ccat_optimal_params(p0: f64, lambda: f64) -> Result<ToyParams> {
    check_p0(p0)?;
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!(
            "CCAT closed form needs λ in [0,1), got {lambda} (λ = 1 is adversarial training)"
        )));
    }
    let hi = (1.0 + lambda) / 2.0;
    let lo = (1.0 - lambda) / 2.0;
    let a = (hi * (1.0 - p0) / (p0 + lo * (1.0 - p0))).ln();
    let b = ((lo * p0 + (1.0 - p0)) / (hi * p0)).ln();
    Ok(ToyParams { a, b })
}

/// Expected error: `x = 0` is wrong when `a ≥ 0`, `x = ε` is wrong when
/// `b < 0`.
pub fn toy_error(params: ToyParams, p0: f64) -> f64 {
    let wrong0 = if params.a >= 0.0 { p0 } else { 0.0 };
    let wrong_eps = if params.b < 0.0 { 1.0 - p0 } else { 0.0 };
    wrong0 + wrong_eps
}

pub fn ccat_zero_error_condition(p0: f64, lambda: f64) -> bool {
    lambda < (p0 / (1.0 - p0)).min((1.0 - p0) / p0)
}

/// `log(1 + eᶻ)` and its derivative.
fn softplus(z: f64) -> (f64, f64) {
    let value = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    (value, 1.0 / (1.0 + (-z).exp()))
}

/// Loss and gradient of one smooth piece: `upper` is the `a ≥ b` side.
fn branch_loss(problem: &ToyProblem, regime: Regime, a: f64, b: f64, upper: bool) -> (f64, [f64; 2]) {
    let p0 = problem.p0;
    let q = 1.0 - p0;
    // Class-2 loss at gap z is softplus(z), class-1 loss is softplus(−z).
    let class2 = softplus;
    let class1 = |z: f64| {
        let (v, d) = softplus(-z);
        (v, -d)
    };
    let (mut loss, mut grad) = match (regime, upper) {
        // max{ℓ₂(a), ℓ₂(b)}·p0 + max{ℓ₁(a), ℓ₁(b)}·(1 − p0); on the upper
        // side neither CCAT point gains confidence by moving, so λ = 1.
        (_, true) => {
            let ((l2, d2), (l1, d1)) = (class2(a), class1(b));
            (p0 * l2 + q * l1, [p0 * d2, q * d1])
        }
        (Regime::Ccat, false) => {
            let lam = problem.lambda;
            let (hi, lo) = ((1.0 + lam) / 2.0, (1.0 - lam) / 2.0);
            let ((l2b, d2b), (l1b, d1b)) = (class2(b), class1(b));
            let ((l1a, d1a), (l2a, d2a)) = (class1(a), class2(a));
            let at0 = hi * l2b + lo * l1b;
            let at_eps = hi * l1a + lo * l2a;
            (p0 * at0 + q * at_eps, [q * (hi * d1a + lo * d2a), p0 * (hi * d2b + lo * d1b)])
        }
        (_, false) => {
            let ((l2, d2), (l1, d1)) = (class2(b), class1(a));
            (p0 * l2 + q * l1, [q * d1, p0 * d2])
        }
    };
    if matches!(regime, Regime::At50 | Regime::Ccat) {
        // Clean half of the batch.
        let ((l2, d2), (l1, d1)) = (class2(a), class1(b));
        loss += p0 * l2 + q * l1;
        grad[0] += p0 * d2;
        grad[1] += q * d1;
    }
    (loss, grad)
}

fn check_regime(regime: Regime) -> Result<()> {
    if regime == Regime::Normal {
        Err(Error::InvalidConfig("expected loss is defined for at100, at50 and ccat".into()))
    } else {
        Ok(())
    }
}

/// Expected loss (up to a constant factor) and its (sub)gradient. At `a = b`
/// the gradient is the mean of the two branch gradients.
pub fn expected_loss(problem: &ToyProblem, regime: Regime, a: f64, b: f64) -> Result<(f64, [f64; 2])> {
    check_regime(regime)?;
    Ok(if a > b {
        branch_loss(problem, regime, a, b, true)
    } else if a < b {
        branch_loss(problem, regime, a, b, false)
    } else {
        let (lu, gu) = branch_loss(problem, regime, a, b, true);
        let (_, gl) = branch_loss(problem, regime, a, b, false);
        (lu, [(gu[0] + gl[0]) / 2.0, (gu[1] + gl[1]) / 2.0])
    })
}

pub const MINIMIZER_MAX_STEPS: usize = 100_000;
pub const MINIMIZER_TOL: f64 = 1e-8;

/// Gradient descent on [`expected_loss`]. Steps that would cross the
/// diagonal `a = b` are cut at the diagonal. On the diagonal, if both
/// branches point back across it, the averaged gradient is projected onto
/// the diagonal.
pub fn numeric_minimize_expected_loss(problem: &ToyProblem, regime: Regime) -> Result<ToyParams> {
    check_regime(regime)?;
    let step = 1.0;
    // Off the diagonal, on the side where the CCAT optimum lies.
    let (mut a, mut b) = (-0.5, 0.5);
    let mut norm = f64::INFINITY;
    for _ in 0..MINIMIZER_MAX_STEPS {
        let (_, mut g) = expected_loss(problem, regime, a, b)?;
        if a == b {
            let (_, gu) = branch_loss(problem, regime, a, b, true);
            let (_, gl) = branch_loss(problem, regime, a, b, false);
            if gu[0] >= gu[1] && gl[0] <= gl[1] {
                let along = (g[0] + g[1]) / 2.0;
                g = [along, along];
            }
        }
        norm = g[0].hypot(g[1]);
        if norm < MINIMIZER_TOL {
            return Ok(ToyParams { a, b });
        }
        let (na, nb) = (a - step * g[0], b - step * g[1]);
        let before = a - b;
        let after = na - nb;
        if before != 0.0 && (after == 0.0 || (before > 0.0) != (after > 0.0)) {
            let t = before / (before - after);
            let c = a + t * (na - a);
            a = c;
            b = c;
        } else {
            a = na;
            b = nb;
        }
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite("toy minimiser iterate"));
        }
    }
    Err(Error::NoConvergence { iterations: MINIMIZER_MAX_STEPS, a, b, grad_norm: norm })
}

/// Closed-form optimum for a regime (normal training has no adversary and
/// is not covered).
pub fn closed_form_params(problem: &ToyProblem, regime: Regime) -> Result<ToyParams> {
    match regime {
        Regime::At50 | Regime::At100 => at_optimal_params(problem.p0),
        Regime::Ccat => ccat_optimal_params(problem.p0, problem.lambda),
        Regime::Normal => Err(Error::InvalidConfig("no closed form for normal training".into())),
    }
}

/// Settings for training the 1→2 linear network on the two-point data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainConfig {
    pub n: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Per-epoch learning-rate decay.
    pub lr_decay: f64,
    pub attack_iterations: usize,
    /// CCAT power-transition exponent.
    pub rho: f64,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self { n: 100, epochs: 800, lr: 8.0, lr_decay: 0.99, attack_iterations: 3, rho: 10.0, seed: 0 }
    }
}

/// Result of end-to-end training on the two-point problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainResult {
    pub params: ToyParams,
    /// Training-set error of the network's own predictions.
    pub error: f64,
}

pub fn toy_network() -> Network {
    let layer = DenseLayer::new(1, 2, Activation::Identity, vec![0.0; 2], vec![0.0; 2]).expect("valid shape");
    Network::from_layers(vec![layer]).expect("valid network")
}

/// Trains the two-logit linear model with the real training loops.
///
/// Inputs are measured in units of ε: the points sit at 0 and 1, so the
/// image box confines every attack to the segment between them, exactly
/// the adversary of the proposition. The attack step is 10 (ten times the
/// radius), so the first momentum-damped step already reaches the other
/// point. For CCAT the transition radius ε' is chosen so that
/// `(1 − 1/ε')^ρ = λ(ε)`.
pub fn train_two_point(problem: &ToyProblem, regime: Regime, cfg: &ToyTrainConfig) -> Result<ToyTrainResult> {
    let eps = 1.0;
    let data = make_two_point(problem.p0, eps, cfg.n)?;
    let mut net = toy_network();
    match regime {
        Regime::At50 | Regime::At100 | Regime::Normal => {
            let mut attack = AttackConfig::training_ce(eps, 10.0 * eps)?;
            attack.iterations = cfg.attack_iterations;
            attack.init = InitMode::Zero;
            attack.restarts = 1;
            attack.zero_init_restart = false;
            attack.seed = cfg.seed;
            let fraction = match regime {
                Regime::At100 => 1.0,
                Regime::At50 => 0.5,
                _ => 0.0,
            };
            for epoch in 0..cfg.epochs {
                let lr = cfg.lr * cfg.lr_decay.powi(epoch as i32);
                train_epoch_at(&mut net, &data, fraction, &attack, lr, cfg.n, cfg.seed, epoch)?;
            }
        }
        Regime::Ccat => {
            if !(problem.lambda < 1.0) {
                return Err(Error::InvalidConfig("CCAT toy training needs λ(ε) < 1".into()));
            }
            let transition = eps / (1.0 - problem.lambda.powf(1.0 / cfg.rho));
            let mut tc = TrainConfig::new(Regime::Ccat, transition, cfg.epochs, cfg.seed)?;
            tc.attack.tm.epsilon = eps;
            tc.attack.base_lr = 10.0 * eps;
            tc.attack.iterations = cfg.attack_iterations;
            tc.rho = cfg.rho;
            tc.batch_size = cfg.n;
            tc.lr = cfg.lr;
            tc.lr_decay = cfg.lr_decay;
            for epoch in 0..cfg.epochs {
                train_epoch_ccat(&mut net, &data, &tc, epoch)?;
            }
        }
    }
    let g0 = net.logits(&[0.0])?;
    let ge = net.logits(&[eps])?;
    let params = ToyParams { a: g0[0] - g0[1], b: ge[0] - ge[1] };
    // Where the optimum is the tie itself (p0 = 0.5) training stops a few
    // ulps to either side; those margins count as the tie.
    let snap = |v: f64| if v.abs() <= TOY_TIE_TOL { 0.0 } else { v };
    let error = toy_error(ToyParams { a: snap(params.a), b: snap(params.b) }, problem.p0);
    Ok(ToyTrainResult { params, error })
}

/// Logit margins at most this large are treated as exact ties when scoring
/// a trained toy model.
pub const TOY_TIE_TOL: f64 = 1e-9;

/// One row of the `toy` sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToySweepRow {
    pub p0: f64,
    pub lambda: f64,
    pub condition: bool,
    pub at_error: f64,
    pub ccat_error: f64,
    pub numeric_at_error: f64,
    pub numeric_ccat_error: f64,
    pub trained_at_error: Option<f64>,
    pub trained_ccat_error: Option<f64>,
}

pub fn toy_sweep_row(problem: &ToyProblem, train: Option<&ToyTrainConfig>) -> Result<ToySweepRow> {
    let p0 = problem.p0;
    let numeric_at = numeric_minimize_expected_loss(problem, Regime::At100)?;
    let numeric_ccat = numeric_minimize_expected_loss(problem, Regime::Ccat)?;
    let (trained_at_error, trained_ccat_error) = match train {
        Some(cfg) => (
            Some(train_two_point(problem, Regime::At100, cfg)?.error),
            Some(train_two_point(problem, Regime::Ccat, cfg)?.error),
        ),
        None => (None, None),
    };
    Ok(ToySweepRow {
        p0,
        lambda: problem.lambda,
        condition: ccat_zero_error_condition(p0, problem.lambda),
        at_error: toy_error(at_optimal_params(p0)?, p0),
        ccat_error: toy_error(ccat_optimal_params(p0, problem.lambda)?, p0),
        numeric_at_error: toy_error(numeric_at, p0),
        numeric_ccat_error: toy_error(numeric_ccat, p0),
        trained_at_error,
        trained_ccat_error,
    })
}

/// Columns follow the fields of [`ToySweepRow`]; untrained entries are empty.
pub fn write_toy_sweep<W: std::io::Write>(writer: W, rows: &[ToySweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "p0",
        "lambda",
        "condition",
        "at_error",
        "ccat_error",
        "numeric_at_error",
        "numeric_ccat_error",
        "trained_at_error",
        "trained_ccat_error",
    ])?;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for r in rows {
        w.write_record([
            fmt_f64(r.p0),
            fmt_f64(r.lambda),
            r.condition.to_string(),
            fmt_f64(r.at_error),
            fmt_f64(r.ccat_error),
            fmt_f64(r.numeric_at_error),
            fmt_f64(r.numeric_ccat_error),
            opt(r.trained_at_error),
            opt(r.trained_ccat_error),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use rand::Rng;

    fn close(x: f64, y: f64, tol: f64) -> bool {
        (x - y).abs() <= tol
    }

    #[test]
    fn at_examples() {
        assert_eq!(at_optimal_params(0.5).unwrap(), ToyParams { a: 0.0, b: 0.0 });
        let p = at_optimal_params(0.3).unwrap();
        assert!(close(p.a, (7.0f64 / 3.0).ln(), 1e-15) && close(p.a, 0.8473, 1e-4));
        assert!(at_optimal_params(0.999).unwrap().a < at_optimal_params(0.99).unwrap().a);
        assert!(at_optimal_params(1.0).is_err());
    }

    #[test]
    fn ccat_examples() {
        let p = ccat_optimal_params(0.5, 0.0).unwrap();
        assert!(close(p.a, -(3.0f64).ln(), 1e-15) && close(p.b, (3.0f64).ln(), 1e-15));
        let p = ccat_optimal_params(0.3, 0.2).unwrap();
        assert!(close(p.a, (0.42f64 / 0.58).ln(), 1e-12) && close(p.a, -0.3228, 1e-4));
        assert!(close(p.b, (0.82f64 / 0.18).ln(), 1e-12) && close(p.b, 1.5163, 1e-4));
        assert!(ccat_optimal_params(0.3, 1.0).is_err());
    }

    #[test]
    fn error_examples() {
        assert_eq!(toy_error(at_optimal_params(0.3).unwrap(), 0.3), 0.3);
        assert_eq!(toy_error(ccat_optimal_params(0.3, 0.2).unwrap(), 0.3), 0.0);
        assert_eq!(toy_error(ToyParams { a: -1.0, b: 1.0 }, 0.77), 0.0);
        assert!(ccat_zero_error_condition(0.5, 0.999));
        assert!(ccat_zero_error_condition(0.3, 0.2));
        assert!(!ccat_zero_error_condition(0.1, 0.2));
    }

    #[test]
    fn random_errors_follow_the_proposition() {
        let mut rng = stream(10, Purpose::Data, 0, 0);
        for _ in 0..100 {
            let p0: f64 = rng.random_range(0.01..0.99);
            let lam: f64 = rng.random_range(0.0..1.0);
            let min = p0.min(1.0 - p0);
            assert_eq!(toy_error(at_optimal_params(p0).unwrap(), p0), min);
            let c = ccat_optimal_params(p0, lam).unwrap();
            assert!(c.a < c.b);
            let e = toy_error(c, p0);
            if ccat_zero_error_condition(p0, lam) {
                assert_eq!(e, 0.0, "p0={p0} λ={lam}");
            } else {
                assert_eq!(e, min, "p0={p0} λ={lam}");
            }
        }
    }

    fn finite_difference(problem: &ToyProblem, regime: Regime, a: f64, b: f64) -> [f64; 2] {
        let h = 1e-6;
        let f = |a, b| expected_loss(problem, regime, a, b).unwrap().0;
        [(f(a + h, b) - f(a - h, b)) / (2.0 * h), (f(a, b + h) - f(a, b - h)) / (2.0 * h)]
    }

    #[test]
    fn loss_gradients_match_finite_differences_off_the_diagonal() {
        let problem = ToyProblem::new(0.35, 0.3, 0.4).unwrap();
        for regime in [Regime::At100, Regime::At50, Regime::Ccat] {
            for (a, b) in [(-1.0, 2.0), (1.5, -0.3), (0.2, 0.9), (3.0, 1.0)] {
                let g = expected_loss(&problem, regime, a, b).unwrap().1;
                let fd = finite_difference(&problem, regime, a, b);
                assert!(close(g[0], fd[0], 1e-7) && close(g[1], fd[1], 1e-7), "{regime} {a} {b}");
            }
        }
    }

    #[test]
    fn minimiser_matches_closed_forms() {
        for p0 in [0.1, 0.3, 0.5, 0.7] {
            for lam in [0.0, 0.2, 0.6] {
                let problem = ToyProblem::new(p0, 0.3, lam).unwrap();
                for regime in [Regime::At100, Regime::At50, Regime::Ccat] {
                    let num = numeric_minimize_expected_loss(&problem, regime).unwrap();
                    let cf = closed_form_params(&problem, regime).unwrap();
                    assert!(close(num.a, cf.a, 1e-3) && close(num.b, cf.b, 1e-3), "{regime} p0={p0} λ={lam}: {num:?} vs {cf:?}");
                }
            }
        }
    }

    #[test]
    fn at50_and_at100_coincide() {
        let problem = ToyProblem::new(0.3, 0.3, 0.0).unwrap();
        let a = numeric_minimize_expected_loss(&problem, Regime::At100).unwrap();
        let b = numeric_minimize_expected_loss(&problem, Regime::At50).unwrap();
        assert!(close(a.a, b.a, 1e-3) && close(a.b, b.b, 1e-3));
    }

    #[test]
    fn normal_regime_has_no_expected_loss() {
        let problem = ToyProblem::new(0.3, 0.3, 0.0).unwrap();
        assert!(expected_loss(&problem, Regime::Normal, 0.0, 0.0).is_err());
    }
}
