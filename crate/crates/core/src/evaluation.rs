//! Confidence-thresholded evaluation.
//!
//! The threshold τ is chosen on held-out, correctly classified clean
//! examples so that a target fraction of them (the TPR) passes. Test error,
//! robust test error and the detection FPR are then computed only over
//! examples whose confidence reaches τ. Ratios with an empty denominator are
//! reported as 0 with `empty` set.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::attacks::{argmax, worst_case_merge, AttackSpec};
use crate::data::{fmt_f64, Dataset};
use crate::netcore::Network;
use crate::{Error, Result};

/// Worst-case adversarial prediction for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvPrediction {
    pub label: usize,
    pub confidence: f64,
    pub attack_name: String,
}

/// Clean and worst-case adversarial prediction for one test example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub example_id: u64,
    pub y: usize,
    pub clean_label: usize,
    pub clean_conf: f64,
    pub adv: Option<AdvPrediction>,
}

impl EvalRecord {
    pub fn clean_correct(&self) -> bool {
        self.clean_label == self.y
    }

    pub fn has_adv(&self) -> bool {
        self.adv.is_some()
    }

    fn adv_or_err(&self) -> Result<&AdvPrediction> {
        self.adv.as_ref().ok_or(Error::MissingAdversarial(self.example_id as usize))
    }
}

/// A fraction together with the empty-denominator flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub value: f64,
    pub numerator: usize,
    pub denominator: usize,
    pub empty: bool,
}

impl Ratio {
    pub fn new(numerator: usize, denominator: usize) -> Self {
        if denominator == 0 {
            Self { value: 0.0, numerator, denominator, empty: true }
        } else {
            Self { value: numerator as f64 / denominator as f64, numerator, denominator, empty: false }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub tau: f64,
    pub target_tpr: f64,
    pub achieved_tpr: f64,
    pub holdout_size: usize,
}

/// τ is the `⌈tpr·M⌉`-th largest confidence, so at least the target
/// fraction passes and any larger τ would not.
pub fn select_threshold(confidences: &[f64], target_tpr: f64) -> Result<ThresholdReport> {
    if confidences.is_empty() {
        return Err(Error::Empty("holdout confidences"));
    }
    if !(target_tpr > 0.0 && target_tpr <= 1.0) {
        return Err(Error::InvalidConfig(format!("target TPR {target_tpr} outside (0,1]")));
    }
    if confidences.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("holdout confidence"));
    }
    let m = confidences.len();
    let mut sorted = confidences.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    // Guard against products such as 0.29·100 = 28.999999999999996.
    let k = ((target_tpr * m as f64 - 1e-9).ceil() as usize).clamp(1, m);
    let tau = sorted[k - 1];
    let passing = confidences.iter().filter(|&&c| c >= tau).count();
    Ok(ThresholdReport { tau, target_tpr, achieved_tpr: passing as f64 / m as f64, holdout_size: m })
}

/// Confidences of the correctly classified records, the input to
/// [`select_threshold`].
pub fn correct_clean_confidences(records: &[EvalRecord]) -> Vec<f64> {
    records.iter().filter(|r| r.clean_correct()).map(|r| r.clean_conf).collect()
}

/// `|{c(x) ≥ τ ∧ f(x) ≠ y}| / |{c(x) ≥ τ}|`.
pub fn conf_thresholded_te(records: &[EvalRecord], tau: f64) -> Ratio {
    let accepted = records.iter().filter(|r| r.clean_conf >= tau);
    let (mut num, mut den) = (0, 0);
    for r in accepted {
        den += 1;
        num += usize::from(!r.clean_correct());
    }
    Ratio::new(num, den)
}

/// Upper-bound estimate of the confidence-thresholded robust test error.
///
/// An example counts as an error if its clean or adversarial prediction is
/// wrong and accepted, and counts at all if either input is accepted.
pub fn conf_thresholded_rte(records: &[EvalRecord], tau: f64) -> Result<Ratio> {
    let (mut num, mut den) = (0, 0);
    for r in records {
        let adv = r.adv_or_err()?;
        let clean_ok = r.clean_conf >= tau;
        let adv_ok = adv.confidence >= tau;
        if (!r.clean_correct() && clean_ok) || (adv.label != r.y && adv_ok) {
            num += 1;
        }
        if clean_ok || adv_ok {
            den += 1;
        }
    }
    Ok(Ratio::new(num, den))
}

/// Among correctly classified examples with a successful attack, the
/// fraction whose adversarial confidence reaches τ.
pub fn fpr_at_threshold(records: &[EvalRecord], tau: f64) -> Result<Ratio> {
    let (mut num, mut den) = (0, 0);
    for r in records {
        let adv = r.adv_or_err()?;
        if r.clean_correct() && adv.label != r.y {
            den += 1;
            num += usize::from(adv.confidence >= tau);
        }
    }
    Ok(Ratio::new(num, den))
}

/// Mann-Whitney estimate of `P(pos > neg) + ½·P(pos = neg)`.
pub fn roc_auc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Empty("ROC AUC needs positives and negatives"));
    }
    let mut neg = negatives.to_vec();
    neg.sort_by(f64::total_cmp);
    // Twice the statistic, so ties stay integral.
    let mut twice: u128 = 0;
    for &p in positives {
        let below = neg.partition_point(|&n| n < p);
        let not_above = neg.partition_point(|&n| n <= p);
        twice += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(twice as f64 / (2 * positives.len() as u128 * neg.len() as u128) as f64)
}

/// Detection AUC: correctly classified clean examples against their
/// successful adversarial examples.
pub fn detection_auc(records: &[EvalRecord]) -> Result<f64> {
    let pos = correct_clean_confidences(records);
    let mut neg = Vec::new();
    for r in records.iter().filter(|r| r.clean_correct()) {
        let adv = r.adv_or_err()?;
        if adv.label != r.y {
            neg.push(adv.confidence);
        }
    }
    roc_auc(&pos, &neg)
}

/// Runs every attack in the suite on each example and keeps the worst case.
/// `id_offset` is added to the dataset index to form the example id.
pub fn build_eval_records(
    net: &Network,
    data: &Dataset,
    suite: &[AttackSpec],
    id_offset: u64,
) -> Result<Vec<EvalRecord>> {
    (0..data.len())
        .map(|i| {
            let (x, y) = (data.x(i), data.y(i));
            let probs = net.predict_proba(x)?;
            let clean_label = argmax(&probs);
            let id = id_offset + i as u64;
            let adv = if suite.is_empty() {
                None
            } else {
                let outcomes = suite.iter().map(|s| s.run(net, x, y, id)).collect::<Result<Vec<_>>>()?;
                let best = worst_case_merge(&outcomes)?;
                let idx = outcomes.iter().position(|o| std::ptr::eq(o, best)).expect("merge returns a member");
                Some(AdvPrediction {
                    label: best.adv_label,
                    confidence: best.adv_confidence,
                    attack_name: suite[idx].name().to_string(),
                })
            };
            Ok(EvalRecord { example_id: id, y, clean_label, clean_conf: probs[clean_label], adv })
        })
        .collect()
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tau: f64,
    pub tpr: f64,
    pub te_tau: f64,
    pub rte_tau: Option<f64>,
    pub fpr: Option<f64>,
    pub auc: Option<f64>,
    pub n_records: usize,
}

/// TE on `te_records`, RTE/FPR/AUC on the attacked records, with τ chosen on
/// the correctly classified `holdout` records.
pub fn compute_metrics(
    attacked: &[EvalRecord],
    te_records: &[EvalRecord],
    holdout: &[EvalRecord],
    target_tpr: f64,
) -> Result<Metrics> {
    let threshold = select_threshold(&correct_clean_confidences(holdout), target_tpr)?;
    let tau = threshold.tau;
    let has_adv = !attacked.is_empty();
    Ok(Metrics {
        tau,
        tpr: threshold.achieved_tpr,
        te_tau: conf_thresholded_te(te_records, tau).value,
        rte_tau: if has_adv { Some(conf_thresholded_rte(attacked, tau)?.value) } else { None },
        fpr: if has_adv { Some(fpr_at_threshold(attacked, tau)?.value) } else { None },
        auc: if has_adv { detection_auc(attacked).ok() } else { None },
        n_records: attacked.len().max(te_records.len()),
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

const RECORD_HEADER: [&str; 7] = ["example_id", "y", "clean_label", "clean_conf", "adv_label", "adv_conf", "attack_name"];

/// Adversarial columns are empty for clean-only records.
pub fn write_eval_records<W: Write>(writer: W, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RECORD_HEADER)?;
    for r in records {
        let (label, conf, name) = match &r.adv {
            Some(a) => (a.label.to_string(), fmt_f64(a.confidence), a.attack_name.clone()),
            None => Default::default(),
        };
        w.write_record([
            r.example_id.to_string(),
            r.y.to_string(),
            r.clean_label.to_string(),
            fmt_f64(r.clean_conf),
            label,
            conf,
            name,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_eval_records<R: Read>(reader: R) -> Result<Vec<EvalRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(RECORD_HEADER) {
        return Err(Error::InvalidConfig(format!("unexpected eval record header {headers:?}")));
    }
    let bad = |field: &str, v: &str| Error::InvalidConfig(format!("bad {field} {v:?} in eval records"));
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let int = |i: usize| row[i].parse::<usize>().map_err(|_| bad(RECORD_HEADER[i], &row[i]));
        let float = |i: usize| row[i].parse::<f64>().map_err(|_| bad(RECORD_HEADER[i], &row[i]));
        let adv = if row[4].is_empty() {
            None
        } else {
            Some(AdvPrediction { label: int(4)?, confidence: float(5)?, attack_name: row[6].to_string() })
        };
        out.push(EvalRecord {
            example_id: row[0].parse().map_err(|_| bad("example_id", &row[0]))?,
            y: int(1)?,
            clean_label: int(2)?,
            clean_conf: float(3)?,
            adv,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackConfig;
    use crate::geometry::ThreatModel;
    use crate::rng::{stream, Purpose};
    use rand::Rng;

    fn rec(y: usize, cl: usize, cc: f64, adv: Option<(usize, f64)>) -> EvalRecord {
        EvalRecord {
            example_id: 0,
            y,
            clean_label: cl,
            clean_conf: cc,
            adv: adv.map(|(label, confidence)| AdvPrediction { label, confidence, attack_name: "a".into() }),
        }
    }

    #[test]
    fn threshold_examples() {
        let r = select_threshold(&[1.0; 5], 0.99).unwrap();
        assert_eq!((r.tau, r.achieved_tpr), (1.0, 1.0));
        let c: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let r = select_threshold(&c, 0.9).unwrap();
        assert_eq!(r.tau, 0.2);
        assert_eq!(r.achieved_tpr, 0.9);
        assert_eq!(select_threshold(&c, 1.0).unwrap().tau, 0.1);
        assert!(select_threshold(&[], 0.9).is_err());
        assert!(select_threshold(&c, 0.0).is_err());
    }

    #[test]
    fn threshold_is_maximal() {
        let mut rng = stream(3, Purpose::Data, 0, 0);
        for _ in 0..2000 {
            let m = rng.random_range(1..60);
            // Coarse values produce ties.
            let c: Vec<f64> = (0..m).map(|_| f64::from(rng.random_range(1..=20u8)) / 20.0).collect();
            let tpr = rng.random_range(0.01..=1.0);
            let r = select_threshold(&c, tpr).unwrap();
            let frac = |t: f64| c.iter().filter(|&&x| x >= t).count() as f64 / m as f64;
            assert!(frac(r.tau) >= tpr - 1e-9);
            if let Some(next) = c.iter().copied().filter(|&x| x > r.tau).reduce(f64::min) {
                assert!(frac(next) < tpr - 1e-9 || frac(next) < tpr);
            }
        }
    }

    #[test]
    fn te_examples() {
        let rs = [rec(0, 0, 0.9, None), rec(1, 0, 0.4, None), rec(2, 2, 0.6, None), rec(0, 1, 0.7, None), rec(1, 1, 0.2, None)];
        assert_eq!(conf_thresholded_te(&rs, 0.0).value, 0.4);
        // Accepted at 0.5: ids 0, 2, 3 → one error.
        let r = conf_thresholded_te(&rs, 0.5);
        assert_eq!((r.numerator, r.denominator), (1, 3));
        assert_eq!(conf_thresholded_te(&rs, 0.8).value, 0.0);
        assert!(conf_thresholded_te(&rs, 0.95).empty);
    }

    #[test]
    fn rte_examples() {
        let all_attacked = [rec(0, 0, 0.9, Some((1, 0.8))), rec(1, 1, 0.9, Some((0, 0.3)))];
        assert_eq!(conf_thresholded_rte(&all_attacked, 0.0).unwrap().value, 1.0);
        let weak = [rec(0, 0, 0.9, Some((1, 0.3))), rec(1, 1, 0.95, Some((0, 0.2)))];
        assert_eq!(conf_thresholded_rte(&weak, 0.5).unwrap().value, 0.0);

        let tau = 0.5;
        let six = [
            rec(0, 0, 0.9, Some((0, 0.9))), // robust: den 1
            rec(0, 0, 0.3, Some((1, 0.8))), // rejected correct clean, accepted adversarial: num 1, den 1
            rec(0, 1, 0.3, Some((2, 0.7))), // rejected wrong clean, accepted adversarial: num 1, den 1
            rec(0, 1, 0.6, Some((1, 0.2))), // accepted wrong clean: num 1, den 1
            rec(0, 0, 0.2, Some((1, 0.1))), // everything rejected
            rec(0, 0, 0.7, Some((1, 0.4))), // adversarial rejected: den 1
        ];
        let r = conf_thresholded_rte(&six, tau).unwrap();
        assert_eq!((r.numerator, r.denominator), (3, 5));
        assert!(matches!(conf_thresholded_rte(&[rec(0, 0, 0.5, None)], 0.1), Err(Error::MissingAdversarial(_))));
    }

    #[test]
    fn fpr_examples() {
        let none = [rec(0, 0, 0.9, Some((0, 0.9)))];
        let r = fpr_at_threshold(&none, 0.5).unwrap();
        assert!(r.empty && r.value == 0.0);
        let ones = [rec(0, 0, 0.9, Some((1, 1.0))), rec(1, 1, 0.9, Some((0, 1.0)))];
        assert_eq!(fpr_at_threshold(&ones, 0.99).unwrap().value, 1.0);
        let eight = [
            rec(0, 0, 0.9, Some((1, 0.9))),
            rec(0, 0, 0.9, Some((1, 0.4))),
            rec(0, 0, 0.9, Some((0, 0.9))), // unsuccessful: never a negative
            rec(0, 1, 0.9, Some((2, 0.9))), // wrong clean: excluded
            rec(1, 1, 0.8, Some((0, 0.6))),
            rec(1, 1, 0.8, Some((0, 0.5))),
            rec(1, 1, 0.8, Some((2, 0.49))),
            rec(2, 2, 0.8, Some((2, 0.99))),
        ];
        let r = fpr_at_threshold(&eight, 0.5).unwrap();
        assert_eq!((r.numerator, r.denominator), (3, 5));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3, 0.5, 0.5], &[0.5, 0.3, 0.5]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.9, 0.8], &[0.85, 0.1]).unwrap(), 0.75);
        assert!(roc_auc(&[], &[0.1]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_enumeration() {
        let mut rng = stream(4, Purpose::Data, 0, 0);
        for _ in 0..500 {
            let p: Vec<f64> = (0..rng.random_range(1..30)).map(|_| f64::from(rng.random_range(0..10u8)) / 10.0).collect();
            let n: Vec<f64> = (0..rng.random_range(1..30)).map(|_| f64::from(rng.random_range(0..10u8)) / 10.0).collect();
            let mut twice = 0u64;
            for a in &p {
                for b in &n {
                    twice += if a > b { 2 } else if a == b { 1 } else { 0 };
                }
            }
            let expected = twice as f64 / (2 * p.len() * n.len()) as f64;
            assert_eq!(roc_auc(&p, &n).unwrap(), expected);
        }
    }

    #[test]
    fn build_records_clean_only_and_merge() {
        let net = Network::mlp(&[2, 4, 3], &mut stream(1, Purpose::Init, 0, 0)).unwrap();
        let data = crate::data::make_two_gaussians(6, 4.0, 1).unwrap();
        let data = Dataset::new(data.inputs().clone(), data.labels().to_vec(), 3).unwrap();
        let clean = build_eval_records(&net, &data, &[], 10).unwrap();
        assert!(clean.iter().all(|r| !r.has_adv()));
        assert_eq!(clean[2].example_id, 12);

        let tm = ThreatModel::linf(0.2).unwrap();
        let mut cfg = AttackConfig::pgd_conf(tm).with_seed(5);
        cfg.iterations = 20;
        cfg.restarts = 1;
        let a = AttackSpec::Pgd { name: "pgd".into(), config: cfg };
        let b = AttackSpec::Random { name: "rand".into(), tm, samples: 30, seed: 5 };
        let single = build_eval_records(&net, &data, std::slice::from_ref(&a), 0).unwrap();
        let both = build_eval_records(&net, &data, &[a.clone(), b.clone()], 0).unwrap();
        for (i, r) in both.iter().enumerate() {
            let oa = a.run(&net, data.x(i), data.y(i), i as u64).unwrap();
            let ob = b.run(&net, data.x(i), data.y(i), i as u64).unwrap();
            assert_eq!(single[i].adv.as_ref().unwrap().confidence, oa.adv_confidence);
            let adv = r.adv.as_ref().unwrap();
            if oa.success == ob.success {
                assert_eq!(adv.confidence, oa.adv_confidence.max(ob.adv_confidence));
            }
        }
    }

    #[test]
    fn eval_records_round_trip() {
        let rs = vec![rec(3, 3, 0.1 + 0.2, Some((1, 1.0 / 3.0))), rec(1, 2, 0.7, None)];
        let mut buf = Vec::new();
        write_eval_records(&mut buf, &rs).unwrap();
        assert_eq!(read_eval_records(buf.as_slice()).unwrap(), rs);
    }
}
