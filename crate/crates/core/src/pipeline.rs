//! End-to-end experiment steps shared by the command-line tool and the
//! acceptance suite: build and train a model from an [`ExperimentConfig`],
//! attack its evaluation split, and write the result files.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::attacks::{argmax, worst_case_merge, AttackRecord};
use crate::config::{ExperimentConfig, LoadedData};
use crate::data::{split_for_evaluation, Dataset};
use crate::evaluation::{build_eval_records, compute_metrics, AdvPrediction, EvalRecord, Metrics};
use crate::netcore::Network;
use crate::rng::{stream, Purpose};
use crate::training::{train, write_train_log, EpochStats};
use crate::Result;

pub const MODEL_FILE: &str = "model.json";
pub const CONFIG_FILE: &str = "config.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const ATTACK_RECORDS_FILE: &str = "attack_records.csv";
pub const EVAL_RECORDS_FILE: &str = "eval_records.csv";
pub const TE_RECORDS_FILE: &str = "te_records.csv";
pub const HOLDOUT_RECORDS_FILE: &str = "holdout_records.csv";
pub const METRICS_FILE: &str = "metrics.json";

/// Fresh network for the configured architecture, initialised from the
/// experiment seed.
pub fn init_network(cfg: &ExperimentConfig, data: &Dataset) -> Result<Network> {
    Network::mlp(&cfg.model.dims(data.dim(), data.num_classes()), &mut stream(cfg.seed, Purpose::Init, 0, 0))
}

pub struct TrainedModel {
    pub net: Network,
    pub stats: Vec<EpochStats>,
}

pub fn train_model(cfg: &ExperimentConfig, data: &LoadedData) -> Result<TrainedModel> {
    cfg.validate()?;
    let mut net = init_network(cfg, &data.train)?;
    let stats = train(&mut net, &data.train, &cfg.training)?;
    Ok(TrainedModel { net, stats })
}

/// Records of one attack stage. Example ids are indices into the test set.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackStage {
    pub attack_records: Vec<AttackRecord>,
    /// Attacked split, worst case over the suite.
    pub attacked: Vec<EvalRecord>,
    /// Clean records used for TE.
    pub te: Vec<EvalRecord>,
    /// Clean records used to pick τ.
    pub holdout: Vec<EvalRecord>,
}

/// Runs every attack of the suite on the attacked split and evaluates the
/// clean TE and holdout splits.
pub fn attack_model(cfg: &ExperimentConfig, net: &Network, test: &Dataset) -> Result<AttackStage> {
    let splits = split_for_evaluation(test, cfg.splits.rte, cfg.splits.holdout)?;
    let rte_n = splits.eval_rte.len() as u64;
    let holdout_offset = (test.len() - splits.holdout.len()) as u64;
    let mut attack_records = Vec::new();
    let mut attacked = Vec::with_capacity(splits.eval_rte.len());
    let data = &splits.eval_rte;
    for i in 0..data.len() {
        let (x, y, id) = (data.x(i), data.y(i), i as u64);
        let probs = net.predict_proba(x)?;
        let clean_label = argmax(&probs);
        let adv = if cfg.attacks.is_empty() {
            None
        } else {
            let outcomes = cfg.attacks.iter().map(|s| s.run(net, x, y, id)).collect::<Result<Vec<_>>>()?;
            for (s, o) in cfg.attacks.iter().zip(&outcomes) {
                attack_records.push(AttackRecord::new(id, s.name(), s.threat_model(), o));
            }
            let best = worst_case_merge(&outcomes)?;
            let k = outcomes.iter().position(|o| std::ptr::eq(o, best)).expect("merge returns a member");
            Some(AdvPrediction {
                label: best.adv_label,
                confidence: best.adv_confidence,
                attack_name: cfg.attacks[k].name().to_string(),
            })
        };
        attacked.push(EvalRecord { example_id: id, y, clean_label, clean_conf: probs[clean_label], adv });
    }
    Ok(AttackStage {
        attack_records,
        attacked,
        te: build_eval_records(net, &splits.eval_te, &[], rte_n)?,
        holdout: build_eval_records(net, &splits.holdout, &[], holdout_offset)?,
    })
}

impl AttackStage {
    pub fn metrics(&self, target_tpr: f64) -> Result<Metrics> {
        compute_metrics(&self.attacked, &self.te, &self.holdout, target_tpr)
    }
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Writes `model.json`, `train_log.csv` and `config.json` into `dir`.
pub fn write_training_outputs(dir: &Path, cfg: &ExperimentConfig, model: &TrainedModel) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    model.net.save(dir.join(MODEL_FILE))?;
    write_train_log(create(&dir.join(TRAIN_LOG_FILE))?, &model.stats)?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_json()?)?;
    Ok(())
}

/// Writes the attack records and the three evaluation record files.
pub fn write_attack_outputs(dir: &Path, stage: &AttackStage) -> Result<()> {
    use crate::attacks::write_attack_records;
    use crate::evaluation::write_eval_records;
    std::fs::create_dir_all(dir)?;
    write_attack_records(create(&dir.join(ATTACK_RECORDS_FILE))?, &stage.attack_records)?;
    write_eval_records(create(&dir.join(EVAL_RECORDS_FILE))?, &stage.attacked)?;
    write_eval_records(create(&dir.join(TE_RECORDS_FILE))?, &stage.te)?;
    write_eval_records(create(&dir.join(HOLDOUT_RECORDS_FILE))?, &stage.holdout)?;
    Ok(())
}

/// Pretty JSON of a single metrics object.
pub fn metrics_json(m: &Metrics) -> Result<String> {
    Ok(serde_json::to_string_pretty(m)?)
}
