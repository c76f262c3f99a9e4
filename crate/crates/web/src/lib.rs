//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Three operations: the two-point toy sweep, training a small 2-D model
//! and reading its confidence map, and attacking a clicked point.

use serde_json::json;
use wasm_bindgen::prelude::*;

use ccat_core::attacks::{argmax, pgd_attack, AttackConfig};
use ccat_core::config::{DatasetSpec, ExperimentConfig};
use ccat_core::data::Dataset;
use ccat_core::geometry::ThreatModel;
use ccat_core::netcore::{Matrix, Network};
use ccat_core::pipeline::train_model;
use ccat_core::profile::{direction_profile, linspace};
use ccat_core::toymodel::{toy_sweep_row, ToyProblem, ToyTrainConfig};
use ccat_core::training::{lambda_power_from_norm, Regime};

fn js_err(e: ccat_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Toy sweep over `p0` for one `λ`, as a JSON array of rows. `train`
/// additionally trains the two-logit model for each row (slower).
#[wasm_bindgen]
pub fn toy_sweep(p0s: &[f64], lambda: f64, epsilon: f64, train: bool) -> Result<String, JsError> {
    let cfg = ToyTrainConfig::default();
    let rows = p0s
        .iter()
        .map(|&p0| {
            let problem = ToyProblem::new(p0, epsilon, lambda)?;
            toy_sweep_row(&problem, train.then_some(&cfg))
        })
        .collect::<ccat_core::Result<Vec<_>>>()
        .map_err(js_err)?;
    Ok(serde_json::to_string(&rows)?)
}

/// CCAT's target weight `λ` at `points` norms evenly spaced in `[0, 2ε]`.
#[wasm_bindgen]
pub fn lambda_curve(epsilon: f64, rho: f64, points: usize) -> Vec<f64> {
    linspace(0.0, 2.0 * epsilon, points).into_iter().map(|d| lambda_power_from_norm(d, epsilon, rho)).collect()
}

/// A model trained on the 2-D two-Gaussians problem.
#[wasm_bindgen]
pub struct PlaneModel {
    net: Network,
    train: Dataset,
    epsilon: f64,
}

#[wasm_bindgen]
impl PlaneModel {
    /// `regime` is one of `normal`, `at50`, `at100`, `ccat`.
    #[wasm_bindgen(constructor)]
    pub fn new(regime: &str, epochs: usize, seed: u64) -> Result<PlaneModel, JsError> {
        let regime: Regime = regime.parse().map_err(js_err)?;
        let mut cfg = ExperimentConfig::two_gaussians_default(regime).map_err(js_err)?;
        cfg.dataset = DatasetSpec::TwoGaussians { train_n: 400, test_n: 10, separation: 6.0 };
        cfg.training.epochs = epochs;
        cfg.reseed(seed);
        let data = cfg.dataset.load(cfg.seed, None).map_err(js_err)?;
        let model = train_model(&cfg, &data).map_err(js_err)?;
        Ok(PlaneModel { net: model.net, train: data.train, epsilon: cfg.training.epsilon })
    }

    /// Training points as `[x, y, label, x, y, label, …]`.
    pub fn points(&self) -> Vec<f64> {
        (0..self.train.len())
            .flat_map(|i| {
                let x = self.train.x(i);
                [x[0], x[1], self.train.y(i) as f64]
            })
            .collect()
    }

    /// Probability of class 1 on a `res × res` grid over `[0,1]²`, row-major
    /// with the first row at y = 0.
    pub fn grid(&self, res: usize) -> Result<Vec<f64>, JsError> {
        let coords = linspace(0.0, 1.0, res);
        let rows: Vec<[f64; 2]> = coords.iter().flat_map(|&y| coords.iter().map(move |&x| [x, y])).collect();
        let probs = self.net.forward(&Matrix::from_rows(&rows).map_err(js_err)?).map_err(js_err)?.probs();
        Ok((0..rows.len()).map(|i| probs.row(i)[1]).collect())
    }

    /// PGD-Conf from `(x, y)` against the predicted class within an L∞ ball
    /// of `radius`, plus the confidence profile along the found direction.
    pub fn attack(&self, x: f64, y: f64, radius: f64) -> Result<String, JsError> {
        let point = [x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)];
        let clean = self.net.predict_proba(&point).map_err(js_err)?;
        let label = argmax(&clean);
        let mut cfg = AttackConfig::pgd_conf(ThreatModel::linf(radius).map_err(js_err)?);
        cfg.iterations = 200;
        cfg.restarts = 3;
        cfg.base_lr = 0.005;
        let out = pgd_attack(&self.net, &point, label, &cfg, 0).map_err(js_err)?;
        let profile = if out.delta.iter().any(|d| *d != 0.0) {
            direction_profile(&self.net, &point, &out.delta, &linspace(0.0, 2.0 * radius, 41))
                .map_err(js_err)?
                .into_iter()
                .map(|r| json!([r.position, r.probs[0], r.probs[1]]))
                .collect()
        } else {
            Vec::new()
        };
        Ok(json!({
            "x": point,
            "label": label,
            "clean_conf": clean[label],
            "delta": out.delta,
            "adv_label": out.adv_label,
            "adv_conf": out.adv_confidence,
            "success": out.success,
            "profile": profile,
        })
        .to_string())
    }

    /// Training ε, the default attack radius.
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}
