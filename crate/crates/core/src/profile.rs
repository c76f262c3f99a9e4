//! Class confidences along a line through input space, for plotting how
//! confidence evolves towards an adversarial example or between two test
//! images.

use std::io::Write;

use crate::data::fmt_f64;
use crate::geometry::{lp_norm, Norm};
use crate::netcore::{Matrix, Network};
use crate::{Error, Result};

/// Softmax output at one position on the line.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow {
    pub position: f64,
    pub probs: Vec<f64>,
}

/// `points` evenly spaced values from `start` to `end` inclusive.
pub fn linspace(start: f64, end: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..points).map(|i| start + (end - start) * i as f64 / (points - 1) as f64).collect(),
    }
}

fn rows_for(net: &Network, positions: &[f64], point: impl Fn(f64) -> Vec<f64>) -> Result<Vec<ProfileRow>> {
    if positions.is_empty() {
        return Ok(Vec::new());
    }
    let inputs: Vec<Vec<f64>> = positions.iter().map(|&t| point(t)).collect();
    let trace = net.forward(&Matrix::from_rows(&inputs)?)?;
    let probs = trace.probs();
    Ok(positions
        .iter()
        .enumerate()
        .map(|(i, &position)| ProfileRow { position, probs: probs.row(i).to_vec() })
        .collect())
}

/// Confidences at `x + t·δ*/‖δ*‖∞` for each `t` in `grid`. Points are not
/// clipped to the image box, so the curve can be followed past ε.
pub fn direction_profile(net: &Network, x: &[f64], delta_star: &[f64], grid: &[f64]) -> Result<Vec<ProfileRow>> {
    if x.len() != delta_star.len() {
        return Err(Error::Shape(format!("x has {} entries, δ* has {}", x.len(), delta_star.len())));
    }
    let scale = lp_norm(delta_star, Norm::Inf);
    if !(scale > 0.0) {
        return Err(Error::InvalidConfig("direction profile needs a non-zero δ*".into()));
    }
    rows_for(net, grid, |t| x.iter().zip(delta_star).map(|(a, d)| a + t * d / scale).collect())
}

/// Confidences at `(1 − κ)·x1 + κ·x2` for each `κ` in `grid`.
pub fn interpolation_profile(net: &Network, x1: &[f64], x2: &[f64], grid: &[f64]) -> Result<Vec<ProfileRow>> {
    if x1.len() != x2.len() {
        return Err(Error::Shape(format!("x1 has {} entries, x2 has {}", x1.len(), x2.len())));
    }
    rows_for(net, grid, |k| x1.iter().zip(x2).map(|(a, b)| (1.0 - k) * a + k * b).collect())
}

/// Header `position_name, conf_1, …, conf_K`.
pub fn write_profile_csv<W: Write>(writer: W, position_name: &str, rows: &[ProfileRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let k = rows.first().map_or(0, |r| r.probs.len());
    let mut header = vec![position_name.to_string()];
    header.extend((1..=k).map(|c| format!("conf_{c}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![fmt_f64(r.position)];
        rec.extend(r.probs.iter().map(|&p| fmt_f64(p)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
