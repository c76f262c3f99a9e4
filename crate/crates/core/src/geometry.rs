//! Lp geometry for perturbations: norms, projections, steepest-ascent
//! directions and random initialisation, for `p ∈ {∞, 2, 1, 0}`.
//!
//! Inputs live in the box `[0,1]^d`. A perturbation `δ` is feasible for a
//! threat model when `‖δ‖_p ≤ ε` and `x + δ ∈ [0,1]^d`.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const BOX_LOW: f64 = 0.0;
pub const BOX_HIGH: f64 = 1.0;

/// Slack allowed when checking ball feasibility.
pub const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "inf")]
    Inf,
    #[serde(rename = "2")]
    L2,
    #[serde(rename = "1")]
    L1,
    #[serde(rename = "0")]
    L0,
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::Inf => "inf",
            Norm::L2 => "2",
            Norm::L1 => "1",
            Norm::L0 => "0",
        })
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().trim_start_matches('l') {
            "inf" | "infinity" | "∞" => Ok(Norm::Inf),
            "2" => Ok(Norm::L2),
            "1" => Ok(Norm::L1),
            "0" => Ok(Norm::L0),
            _ => Err(Error::InvalidConfig(format!("unknown norm {s:?}"))),
        }
    }
}

/// An Lp ball of radius `epsilon` intersected with the `[0,1]` box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreatModel {
    pub norm: Norm,
    pub epsilon: f64,
}

impl ThreatModel {
    pub fn new(norm: Norm, epsilon: f64) -> Result<Self> {
        let tm = Self { norm, epsilon };
        tm.validate(None)?;
        Ok(tm)
    }

    pub fn linf(epsilon: f64) -> Result<Self> {
        Self::new(Norm::Inf, epsilon)
    }

    /// Checks `ε > 0` and, for `p = 0`, that `ε` is an integer no larger than
    /// the input dimension (when known).
    pub fn validate(&self, dim: Option<usize>) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        if self.norm == Norm::L0 {
            if self.epsilon.fract() != 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "L0 epsilon must be an integer, got {}",
                    self.epsilon
                )));
            }
            if let Some(d) = dim {
                if self.epsilon > d as f64 {
                    return Err(Error::InvalidConfig(format!(
                        "L0 epsilon {} exceeds input dimension {d}",
                        self.epsilon
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn lp_norm(v: &[f64], norm: Norm) -> f64 {
    match norm {
        Norm::Inf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        Norm::L1 => v.iter().map(|x| x.abs()).sum(),
        Norm::L0 => v.iter().filter(|&&x| x != 0.0).count() as f64,
    }
}

/// Indices of the `k` largest-magnitude entries; ties go to the lower index.
fn top_k_indices(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| {
        v[b].abs()
            .partial_cmp(&v[a].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Euclidean projection onto the L1 ball by sorting magnitudes and
/// soft-thresholding (O(d log d)).
fn project_l1(v: &[f64], radius: f64) -> Vec<f64> {
    if lp_norm(v, Norm::L1) <= radius {
        return v.to_vec();
    }
    let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    mags.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &m) in mags.iter().enumerate() {
        cumsum += m;
        let t = (cumsum - radius) / (j + 1) as f64;
        if m - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    v.iter()
        .map(|&x| x.signum() * (x.abs() - theta).max(0.0))
        .collect()
}

/// Projection onto the `ε`-ball of the threat model's norm.
///
/// Euclidean projection for `p ∈ {∞, 2, 1}`; for `p = 0` the `ε`
/// largest-magnitude entries are kept and the rest zeroed.
pub fn project_ball(delta: &[f64], tm: &ThreatModel) -> Vec<f64> {
    let eps = tm.epsilon;
    match tm.norm {
        Norm::Inf => delta.iter().map(|d| d.clamp(-eps, eps)).collect(),
        Norm::L2 => {
            let n = lp_norm(delta, Norm::L2);
            if n <= eps {
                delta.to_vec()
            } else {
                // Shrink the scale until rounding lands inside the ball, so
                // projecting the result again is the identity.
                let mut s = eps / n;
                loop {
                    let out: Vec<f64> = delta.iter().map(|d| d * s).collect();
                    if lp_norm(&out, Norm::L2) <= eps {
                        return out;
                    }
                    s = s.next_down();
                }
            }
        }
        Norm::L1 => project_l1(delta, eps),
        Norm::L0 => {
            let k = eps as usize;
            if lp_norm(delta, Norm::L0) <= eps {
                return delta.to_vec();
            }
            let mut out = vec![0.0; delta.len()];
            for i in top_k_indices(delta, k) {
                out[i] = delta[i];
            }
            out
        }
    }
}

/// Minimal per-coordinate change to `delta` so that `x + delta ∈ [0,1]^d`.
/// Coordinates that are already feasible are left untouched.
pub fn project_box(x: &[f64], delta: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(delta)
        .map(|(&xi, &di)| {
            let v = xi + di;
            if v > BOX_HIGH {
                let mut d = BOX_HIGH - xi;
                while xi + d > BOX_HIGH {
                    d = d.next_down();
                }
                d
            } else if v < BOX_LOW {
                let mut d = BOX_LOW - xi;
                while xi + d < BOX_LOW {
                    d = d.next_up();
                }
                d
            } else {
                di
            }
        })
        .collect()
}

/// Ball projection, then box projection, then zeroing outside `mask`.
pub fn project_feasible(x: &[f64], delta: &[f64], tm: &ThreatModel, mask: Option<&[bool]>) -> Vec<f64> {
    let mut d = project_box(x, &project_ball(delta, tm));
    if let Some(m) = mask {
        for (di, &keep) in d.iter_mut().zip(m) {
            if !keep {
                *di = 0.0;
            }
        }
    }
    d
}

pub fn is_feasible(x: &[f64], delta: &[f64], tm: &ThreatModel, mask: Option<&[bool]>) -> bool {
    let ball = match tm.norm {
        Norm::L0 => lp_norm(delta, Norm::L0) <= tm.epsilon,
        n => lp_norm(delta, n) <= tm.epsilon + FEASIBILITY_TOL,
    };
    let boxed = x
        .iter()
        .zip(delta)
        .all(|(&xi, &di)| (BOX_LOW..=BOX_HIGH).contains(&(xi + di)));
    let masked = mask.is_none_or(|m| m.iter().zip(delta).all(|(&keep, &di)| keep || di == 0.0));
    ball && boxed && masked
}

/// Steepest-ascent direction for a norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub values: Vec<f64>,
    /// The input gradient was identically zero.
    pub stalled: bool,
}

/// Number of gradient entries kept for L1 steps: `max(1, ⌈d/100⌉)`.
pub fn l1_top_k(dim: usize) -> usize {
    dim.div_ceil(100).max(1)
}

/// Normalises a gradient into an ascent direction:
/// sign for `∞`, `g/‖g‖₂` for `2`, top-1% entries renormalised in L1 for `1`,
/// and `g/‖g‖₁` for `0`.
pub fn normalize_gradient(g: &[f64], norm: Norm) -> Direction {
    if g.iter().all(|&v| v == 0.0) {
        return Direction { values: vec![0.0; g.len()], stalled: true };
    }
    let values = match norm {
        Norm::Inf => g
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 })
            .collect(),
        Norm::L2 => {
            let n = lp_norm(g, Norm::L2);
            g.iter().map(|v| v / n).collect()
        }
        Norm::L1 => {
            let mut out = vec![0.0; g.len()];
            for i in top_k_indices(g, l1_top_k(g.len())) {
                out[i] = g[i];
            }
            let n = lp_norm(&out, Norm::L1);
            out.iter_mut().for_each(|v| *v /= n);
            out
        }
        Norm::L0 => {
            let n = lp_norm(g, Norm::L1);
            g.iter().map(|v| v / n).collect()
        }
    };
    Direction { values, stalled: false }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Zero,
    Random,
}

/// Initial perturbation for an attack on `x`.
///
/// Random mode draws `u·ε·δ′/‖δ′‖_p` with `δ′ ~ N(0, I)` and `u ~ U(0,1)` for
/// `p ∈ {∞, 2, 1}`. For `p = 0` each coordinate is replaced, with probability
/// `(2/3·ε)/d`, by a uniform value in `[0,1]`. The result is projected onto
/// the feasible set.
pub fn init_perturbation<R: Rng + ?Sized>(
    tm: &ThreatModel,
    x: &[f64],
    mode: InitMode,
    rng: &mut R,
) -> Vec<f64> {
    let d = x.len();
    if mode == InitMode::Zero || d == 0 {
        return vec![0.0; d];
    }
    let raw = match tm.norm {
        Norm::L0 => {
            let prob = (2.0 / 3.0 * tm.epsilon) / d as f64;
            x.iter()
                .map(|&xi| {
                    if rng.random::<f64>() < prob {
                        rng.random::<f64>() - xi
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        norm => {
            let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let n = lp_norm(&dir, norm);
            let u: f64 = rng.random();
            if n == 0.0 {
                vec![0.0; d]
            } else {
                dir.iter().map(|v| u * tm.epsilon * v / n).collect()
            }
        }
    };
    project_feasible(x, &raw, tm, None)
}

/// Radius of the L2 ball in `d` dimensions whose volume equals that of the
/// L∞ ball of radius `linf_eps`.
pub fn l2_radius_matching_linf_volume(linf_eps: f64, dim: usize) -> f64 {
    // vol(B∞) = (2ε)^d, vol(B₂(r)) = π^{d/2} r^d / Γ(d/2 + 1)
    let d = dim as f64;
    let log_r = (2.0 * linf_eps).ln() + (ln_gamma_half_integer(dim + 2) - 0.5 * d * std::f64::consts::PI.ln()) / d;
    log_r.exp()
}

/// `ln Γ(n/2)` for a positive integer `n`.
fn ln_gamma_half_integer(n: usize) -> f64 {
    assert!(n > 0);
    if n % 2 == 0 {
        // Γ(m) = (m-1)!
        (1..n / 2).map(|k| (k as f64).ln()).sum()
    } else {
        // Γ(m + 1/2) = √π · Π_{k=1}^{m} (k − 1/2)
        let m = (n - 1) / 2;
        0.5 * std::f64::consts::PI.ln() + (1..=m).map(|k| (k as f64 - 0.5).ln()).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::rng::{stream, Purpose};
    use proptest::prelude::*;

    fn tm(norm: Norm, eps: f64) -> ThreatModel {
        ThreatModel::new(norm, eps).unwrap()
    }

    #[test]
    fn norm_examples() {
        assert_eq!(lp_norm(&[3.0, -4.0], Norm::L2), 5.0);
        let v = [1.0, -2.0, 0.0];
        assert_eq!(lp_norm(&v, Norm::L1), 3.0);
        assert_eq!(lp_norm(&v, Norm::Inf), 2.0);
        assert_eq!(lp_norm(&v, Norm::L0), 2.0);
    }

    #[test]
    fn l2_norm_matches_direct_sum() {
        let mut rng = stream(5, Purpose::Data, 0, 0);
        for _ in 0..100 {
            let v: Vec<f64> = (0..17).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut s = 0.0;
            for x in &v {
                s += x * x;
            }
            assert!((lp_norm(&v, Norm::L2) - s.sqrt()).abs() <= 1e-12);
        }
    }

    #[test]
    fn threat_model_validation() {
        assert!(ThreatModel::new(Norm::Inf, 0.0).is_err());
        assert!(ThreatModel::new(Norm::L0, 2.5).is_err());
        assert!(tm(Norm::L0, 5.0).validate(Some(4)).is_err());
        assert!(tm(Norm::L0, 4.0).validate(Some(4)).is_ok());
        assert_eq!("linf".parse::<Norm>().unwrap(), Norm::Inf);
        assert_eq!("l1".parse::<Norm>().unwrap(), Norm::L1);
        assert!("l3".parse::<Norm>().is_err());
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_ball(&[0.5, -0.05], &tm(Norm::Inf, 0.1)), vec![0.1, -0.05]);
        assert_eq!(project_ball(&[1.0, 1.0], &tm(Norm::L1, 1.0)), vec![0.5, 0.5]);
        let p = project_ball(&[3.0, 4.0], &tm(Norm::L2, 1.0));
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
        assert_eq!(project_ball(&[0.1, -3.0, 0.5, 3.0], &tm(Norm::L0, 2.0)), vec![0.0, -3.0, 0.0, 3.0]);
    }

    #[test]
    fn l1_projection_brute_force_grid() {
        // delta = (1, 1), ε = 1: scan the boundary segment |u| + |v| = 1 in the
        // positive quadrant at resolution 1e-6 for the closest point.
        let target = [1.0, 1.0];
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let n = 1_000_000;
        for i in 0..=n {
            let u = i as f64 / n as f64;
            let v = 1.0 - u;
            let d = (u - target[0]).powi(2) + (v - target[1]).powi(2);
            if d < best.0 {
                best = (d, u, v);
            }
        }
        let p = project_ball(&target, &tm(Norm::L1, 1.0));
        assert!((p[0] - best.1).abs() <= 1e-6 && (p[1] - best.2).abs() <= 1e-6);
    }

    #[test]
    fn l0_ties_prefer_lower_index() {
        assert_eq!(project_ball(&[1.0, -1.0, 1.0], &tm(Norm::L0, 2.0)), vec![1.0, -1.0, 0.0]);
    }

    #[test]
    fn box_examples() {
        let d = project_box(&[0.9], &[0.3]);
        assert!((0.9 + d[0]) <= 1.0 && (d[0] - 0.1).abs() < 1e-15);
        assert_eq!(project_box(&[0.0], &[-0.2]), vec![0.0]);
        let mut rng = stream(8, Purpose::Data, 0, 0);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..10).map(|_| rng.random()).collect();
            let delta: Vec<f64> = (0..10).map(|_| rng.random_range(-0.5..0.5)).collect();
            let p = project_box(&x, &delta);
            for i in 0..10 {
                let v = x[i] + p[i];
                assert!((0.0..=1.0).contains(&v));
                if (0.0..=1.0).contains(&(x[i] + delta[i])) {
                    assert_eq!(p[i].to_bits(), delta[i].to_bits());
                }
            }
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_gradient(&[0.3, -2.0], Norm::Inf).values, vec![1.0, -1.0]);
        let d = normalize_gradient(&[3.0, 4.0], Norm::L2).values;
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
        assert_eq!(normalize_gradient(&[5.0, -1.0, 0.5], Norm::L1).values, vec![1.0, 0.0, 0.0]);
        let z = normalize_gradient(&[0.0, 0.0], Norm::L2);
        assert!(z.stalled && z.values == vec![0.0, 0.0]);
        assert_eq!(l1_top_k(3), 1);
        assert_eq!(l1_top_k(100), 1);
        assert_eq!(l1_top_k(101), 2);
        assert_eq!(l1_top_k(784), 8);
    }

    #[test]
    fn zero_init_is_zero() {
        let mut rng = stream(1, Purpose::Attack, 0, 0);
        let d = init_perturbation(&tm(Norm::L2, 0.5), &[0.5; 6], InitMode::Zero, &mut rng);
        assert_eq!(lp_norm(&d, Norm::L2), 0.0);
    }

    #[test]
    fn random_linf_init_norm_ratio_is_uniform() {
        let t = tm(Norm::Inf, 0.3);
        let x = [0.5; 8];
        let mut ratios: Vec<f64> = (0..10_000)
            .map(|i| {
                let mut rng = stream(3, Purpose::Attack, i, 0);
                let d = init_perturbation(&t, &x, InitMode::Random, &mut rng);
                let n = lp_norm(&d, Norm::Inf);
                assert!(n <= 0.3 + 1e-15);
                n / 0.3
            })
            .collect();
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = ratios.len() as f64;
        let ks = ratios
            .iter()
            .enumerate()
            .map(|(i, &r)| ((i + 1) as f64 / n - r).abs().max((r - i as f64 / n).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "KS statistic {ks}");
    }

    #[test]
    fn random_l0_init_nonzero_count() {
        let t = tm(Norm::L0, 15.0);
        let x = vec![0.5; 784];
        let draws = 2000;
        let total: f64 = (0..draws)
            .map(|i| {
                let mut rng = stream(4, Purpose::Attack, i, 0);
                let d = init_perturbation(&t, &x, InitMode::Random, &mut rng);
                assert!(is_feasible(&x, &d, &t, None));
                lp_norm(&d, Norm::L0)
            })
            .sum();
        let mean = total / draws as f64;
        let sd = (10.0f64 * (1.0 - 10.0 / 784.0)).sqrt();
        assert!((mean - 10.0).abs() <= 3.0 * sd / (draws as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn matched_volume_radius() {
        // d = 2: π r² = (2ε)² → r = 2ε/√π.
        let r = l2_radius_matching_linf_volume(0.1, 2);
        assert!((r - 0.2 / std::f64::consts::PI.sqrt()).abs() < 1e-12);
        // d = 3: 4/3 π r³ = 8ε³.
        let r = l2_radius_matching_linf_volume(0.5, 3);
        assert!((4.0 / 3.0 * std::f64::consts::PI * r.powi(3) - 1.0).abs() < 1e-12);
    }

    fn any_norm() -> impl Strategy<Value = Norm> {
        prop_oneof![Just(Norm::Inf), Just(Norm::L2), Just(Norm::L1), Just(Norm::L0)]
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_feasible(
            v in prop::collection::vec(-3.0f64..3.0, 1..12),
            norm in any_norm(),
            eps in 0.05f64..2.0,
        ) {
            let eps = if norm == Norm::L0 { eps.ceil() } else { eps };
            let t = tm(norm, eps);
            let p = project_ball(&v, &t);
            let pp = project_ball(&p, &t);
            prop_assert!(lp_norm(&p, norm) <= eps + FEASIBILITY_TOL);
            match norm {
                Norm::Inf | Norm::L2 | Norm::L0 => prop_assert!(p.iter().zip(&pp).all(|(a, b)| a.to_bits() == b.to_bits())),
                _ => prop_assert!(p.iter().zip(&pp).all(|(a, b)| (a - b).abs() <= 1e-12)),
            }
            if lp_norm(&v, norm) <= eps {
                prop_assert_eq!(p, v);
            }
        }

        #[test]
        fn direction_has_unit_norm(g in prop::collection::vec(-5.0f64..5.0, 1..300), norm in any_norm()) {
            prop_assume!(g.iter().any(|&v| v != 0.0));
            let d = normalize_gradient(&g, norm).values;
            match norm {
                Norm::Inf => prop_assert!(d.iter().zip(&g).all(|(a, b)| *a == b.signum() || (*b == 0.0 && *a == 0.0))),
                Norm::L2 => prop_assert!((lp_norm(&d, Norm::L2) - 1.0).abs() < 1e-12),
                Norm::L1 | Norm::L0 => prop_assert!((lp_norm(&d, Norm::L1) - 1.0).abs() < 1e-12),
            }
        }
    }
}
