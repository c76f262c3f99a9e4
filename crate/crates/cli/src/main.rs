//! `ccatlab` — train, attack and evaluate small confidence-calibrated
//! adversarially trained models.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ccat_core::attacks::{AttackSpec, Objective};
use ccat_core::config::ExperimentConfig;
use ccat_core::evaluation::{compute_metrics, read_eval_records, EvalRecord, Metrics};
use ccat_core::netcore::Network;
use ccat_core::pipeline::{self, CONFIG_FILE, HOLDOUT_RECORDS_FILE, METRICS_FILE, TE_RECORDS_FILE};
use ccat_core::profile::{direction_profile, interpolation_profile, linspace, write_profile_csv};
use ccat_core::toymodel::{toy_sweep_row, write_toy_sweep, ToyProblem, ToyTrainConfig};
use ccat_core::training::Regime;
use ccat_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ccatlab", version, about = "Confidence-calibrated adversarial training workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.json, train_log.csv and config.json.
    Train(TrainArgs),
    /// Attack a saved model; writes attack_records.csv and eval_records.csv.
    Attack(AttackArgs),
    /// Compute confidence-thresholded metrics from evaluation records.
    Eval(EvalArgs),
    /// Two-point toy problem sweep over p0 × λ.
    Toy(ToyArgs),
    /// Confidence along an adversarial direction or an interpolation.
    Profile(ProfileArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetKind {
    #[value(alias = "two_gaussians")]
    TwoGaussians,
    Mnist,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `training.epochs=5`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Seed; defaults to the config's seed, then $CCATLAB_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_regime)]
    regime: Option<Regime>,
    /// Built-in dataset setup, used when no --config is given.
    #[arg(long, value_enum, default_value = "two-gaussians")]
    dataset: DatasetKind,
    /// Directory holding the MNIST IDX files.
    #[arg(long, default_value = "data/mnist")]
    data_dir: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    /// Defaults to config.json next to the model.
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Defaults to the model's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Attacked records (eval_records.csv).
    #[arg(long)]
    records: PathBuf,
    /// Clean records for threshold selection; defaults to holdout_records.csv
    /// next to --records, else the records themselves.
    #[arg(long)]
    holdout: Option<PathBuf>,
    /// Clean records for TE; defaults to te_records.csv next to --records,
    /// else the records themselves.
    #[arg(long)]
    te: Option<PathBuf>,
    /// Target true-positive rate; repeatable.
    #[arg(long = "tpr")]
    tpr: Vec<f64>,
    /// Defaults to metrics.json next to --records.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long = "p0", default_values_t = [0.1, 0.3, 0.5, 0.7])]
    p0: Vec<f64>,
    #[arg(long = "lambda", default_values_t = [0.2])]
    lambda: Vec<f64>,
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,
    /// Skip end-to-end training of the two-logit model.
    #[arg(long)]
    no_train: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileKind {
    Direction,
    Interpolation,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    model: PathBuf,
    /// Defaults to config.json next to the model.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "direction")]
    kind: ProfileKind,
    /// Test example.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Second test example (interpolation).
    #[arg(long, default_value_t = 1)]
    index2: usize,
    /// Attack that supplies the direction; defaults to the first of the suite.
    #[arg(long)]
    attack: Option<String>,
    #[arg(long, default_value_t = 51)]
    points: usize,
    #[arg(long, default_value = "profile.csv")]
    out: PathBuf,
}

fn parse_regime(s: &str) -> std::result::Result<Regime, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Base config (file or built-in), overrides, then the seed; every sub-seed
/// is derived from the final top-level seed.
fn resolve_config(
    args: &ConfigArgs,
    fallback: impl FnOnce() -> Result<ExperimentConfig>,
) -> Result<ExperimentConfig> {
    let text = match &args.config {
        Some(path) => fs::read_to_string(path)?,
        None => fallback()?.to_json()?,
    };
    let mut cfg = ExperimentConfig::from_json_with_overrides(&text, &args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.reseed(seed);
    }
    Ok(cfg)
}

fn set_regime(cfg: &mut ExperimentConfig, regime: Regime) {
    cfg.training.regime = regime;
    cfg.training.attack.objective = if regime == Regime::Ccat { Objective::Conf } else { Objective::Ce };
}

fn train(args: TrainArgs) -> Result<()> {
    let regime = args.regime.unwrap_or(Regime::Ccat);
    let mut cfg = resolve_config(&args.cfg, || match args.dataset {
        DatasetKind::TwoGaussians => ExperimentConfig::two_gaussians_default(regime),
        DatasetKind::Mnist => ExperimentConfig::mnist_default(regime, &args.data_dir),
    })?;
    if let Some(r) = args.regime {
        set_regime(&mut cfg, r);
    }
    if args.cfg.seed.is_none() {
        cfg.reseed(cfg.seed);
    }
    cfg.validate()?;
    let data = cfg.dataset.load(cfg.seed, None)?;
    let model = pipeline::train_model(&cfg, &data)?;
    pipeline::write_training_outputs(&args.out, &cfg, &model)?;
    let last = model.stats.last();
    eprintln!(
        "trained {} for {} epochs; final train accuracy {:.4}; wrote {}",
        cfg.training.regime,
        model.stats.len(),
        last.map_or(f64::NAN, |s| s.train_accuracy),
        args.out.display()
    );
    Ok(())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn config_for_model(model: &Path, args: &ConfigArgs) -> Result<ExperimentConfig> {
    let default = sibling(model, CONFIG_FILE);
    let args = ConfigArgs {
        config: Some(args.config.clone().unwrap_or(default)),
        overrides: args.overrides.clone(),
        seed: args.seed,
    };
    resolve_config(&args, || unreachable!("config path is always set"))
}

fn attack(args: AttackArgs) -> Result<()> {
    let cfg = config_for_model(&args.model, &args.cfg)?;
    let net = Network::load(&args.model)?;
    let data = cfg.dataset.load(cfg.seed, None)?;
    let stage = pipeline::attack_model(&cfg, &net, &data.test)?;
    let out = args.out.unwrap_or_else(|| sibling(&args.model, ""));
    pipeline::write_attack_outputs(&out, &stage)?;
    eprintln!(
        "attacked {} examples with {} attacks; wrote {}",
        stage.attacked.len(),
        cfg.attacks.len(),
        out.display()
    );
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    read_eval_records(fs::File::open(path).map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))?)
}

/// Explicit path, else the named sibling if it exists, else the records.
fn clean_records(explicit: &Option<PathBuf>, records: &Path, name: &str, fallback: &[EvalRecord]) -> Result<Vec<EvalRecord>> {
    match explicit {
        Some(p) => read_records(p),
        None => {
            let p = sibling(records, name);
            if p.exists() {
                read_records(&p)
            } else {
                Ok(fallback.to_vec())
            }
        }
    }
}

fn eval(args: EvalArgs) -> Result<()> {
    let attacked = read_records(&args.records)?;
    let holdout = clean_records(&args.holdout, &args.records, HOLDOUT_RECORDS_FILE, &attacked)?;
    let te = clean_records(&args.te, &args.records, TE_RECORDS_FILE, &attacked)?;
    let targets = if args.tpr.is_empty() { vec![0.99] } else { args.tpr };
    let all = targets
        .iter()
        .map(|&t| compute_metrics(&attacked, &te, &holdout, t))
        .collect::<Result<Vec<Metrics>>>()?;
    let out = args.out.unwrap_or_else(|| sibling(&args.records, METRICS_FILE));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&out, pipeline::metrics_json(&all[0])? + "\n")?;
    if all.len() > 1 {
        fs::write(sibling(&out, "metrics_all.json"), serde_json::to_string_pretty(&all)? + "\n")?;
    }
    for m in &all {
        println!(
            "tpr {:.4} tau {:.6} te {:.4} rte {} fpr {} auc {}",
            m.tpr,
            m.tau,
            m.te_tau,
            fmt_opt(m.rte_tau),
            fmt_opt(m.fpr),
            fmt_opt(m.auc)
        );
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn toy(args: ToyArgs) -> Result<()> {
    let train_cfg = ToyTrainConfig { seed: args.seed, ..ToyTrainConfig::default() };
    let mut rows = Vec::new();
    for &p0 in &args.p0 {
        for &lambda in &args.lambda {
            let problem = ToyProblem::new(p0, args.epsilon, lambda)?;
            rows.push(toy_sweep_row(&problem, (!args.no_train).then_some(&train_cfg))?);
        }
    }
    match &args.out {
        Some(path) => write_toy_sweep(pipeline_file(path)?, &rows),
        None => write_toy_sweep(io::stdout().lock(), &rows),
    }
}

fn pipeline_file(path: &Path) -> Result<impl Write> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(io::BufWriter::new(fs::File::create(path)?))
}

fn profile(args: ProfileArgs) -> Result<()> {
    let cfg_args = ConfigArgs { config: args.config.clone(), overrides: Vec::new(), seed: None };
    let cfg = config_for_model(&args.model, &cfg_args)?;
    let net = Network::load(&args.model)?;
    let test = cfg.dataset.load(cfg.seed, None)?.test;
    let pick = |i: usize| {
        if i < test.len() {
            Ok(i)
        } else {
            Err(Error::InvalidConfig(format!("index {i} out of range for {} test examples", test.len())))
        }
    };
    let i = pick(args.index)?;
    let (name, rows) = match args.kind {
        ProfileKind::Direction => {
            let spec: &AttackSpec = match &args.attack {
                Some(n) => cfg
                    .attacks
                    .iter()
                    .find(|s| s.name() == n)
                    .ok_or_else(|| Error::InvalidConfig(format!("no attack named {n:?}")))?,
                None => cfg.attacks.first().ok_or_else(|| Error::InvalidConfig("attack suite is empty".into()))?,
            };
            let outcome = spec.run(&net, test.x(i), test.y(i), i as u64)?;
            let reach = 2.0 * spec.threat_model().epsilon;
            ("t", direction_profile(&net, test.x(i), &outcome.delta, &linspace(0.0, reach, args.points))?)
        }
        ProfileKind::Interpolation => {
            let j = pick(args.index2)?;
            ("kappa", interpolation_profile(&net, test.x(i), test.x(j), &linspace(0.0, 1.0, args.points))?)
        }
    };
    write_profile_csv(pipeline_file(&args.out)?, name, &rows)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Attack(a) => attack(a),
        Command::Eval(a) => eval(a),
        Command::Toy(a) => toy(a),
        Command::Profile(a) => profile(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
