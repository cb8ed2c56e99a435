//! The `fetsim` command line.
//!
//! Every command writes its outputs, plus a `manifest.json` describing how
//! they were produced, into the directory given by `--out`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::accountant::{self, AccountingMethod};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiments::{self, AblationSuite, Federation, ModelKind, RunMetrics, TrainedModel};
use crate::linkage::{self, LinkFile, PartyDataset};
use crate::rng::{self, Purpose};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_BUDGET: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub const SEED_ENV: &str = "FETSIM_SEED";

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation(_) | Error::Toml(_) | Error::Dimension(_) | Error::Contract(_) => EXIT_VALIDATION,
        Error::BudgetExhausted { .. } => EXIT_BUDGET,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) => EXIT_FAILURE,
    }
}

#[derive(Parser, Debug)]
#[command(name = "fetsim", version, about = "Multi-party fuzzy vertical federated learning simulator")]
pub struct Cli {
    /// Global seed; falls back to the config file, then $FETSIM_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Split a labelled CSV among parties with fuzzy PCA keys.
    Synthesize(SynthesizeArgs),
    /// Link primary records to their K nearest neighbors in each party.
    Link(LinkArgs),
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on party files.
    Evaluate(EvaluateArgs),
    /// Sweep one knob over a grid and several seeds.
    Ablate(AblateArgs),
    /// Tabulate ε against the noise multiplier.
    Accountant(AccountantArgs),
}

#[derive(Args, Debug)]
pub struct SynthesizeArgs {
    /// Raw CSV (optionally .gz) with a `label` column.
    #[arg(long)]
    pub input: PathBuf,
    /// Number of parties, primary included.
    #[arg(long, short = 'k', default_value_t = 2)]
    pub parties: usize,
    /// Standard deviation of the key noise.
    #[arg(long, default_value_t = 0.05)]
    pub key_noise: f64,
    #[arg(long, default_value_t = 4)]
    pub key_dims: usize,
    /// Leave the primary party's keys exact.
    #[arg(long)]
    pub exact_primary: bool,
    /// Give the primary party only its PCA keys as features.
    #[arg(long)]
    pub reduce_primary: bool,
    /// Keep only the first N rows.
    #[arg(long)]
    pub rows: Option<usize>,
    /// Divide every feature by this value.
    #[arg(long)]
    pub feature_scale: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LinkArgs {
    /// Party files, primary first or in any order.
    #[arg(long, num_args = 1.., required = true)]
    pub parties: Vec<PathBuf>,
    #[arg(long, short = 'K', default_value_t = 10)]
    pub neighbors: usize,
    /// Fraction of each secondary party sampled as link candidates.
    #[arg(long, default_value_t = 1.0)]
    pub subsample: f64,
    #[arg(long, default_value_t = 0)]
    pub epoch: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    /// Number of parties including the primary (data synthesized from a raw table).
    #[arg(long)]
    pub parties: Option<usize>,
    /// Noise multiplier; enables privacy when positive.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Halt once ε exceeds this value.
    #[arg(long)]
    pub eps_cap: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModelArg {
    Fet,
    Solo,
    Top1sim,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Fet => ModelKind::Fet,
            ModelArg::Solo => ModelKind::Solo,
            ModelArg::Top1sim => ModelKind::Top1sim,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Party files to evaluate on.
    #[arg(long, num_args = 1.., required = true)]
    pub parties: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub suite: String,
    /// Comma-separated grid values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub grid: Vec<f64>,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AccountantArgs {
    /// Comma-separated noise multipliers.
    #[arg(long, value_delimiter = ',', required = true)]
    pub sigmas: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub q: f64,
    #[arg(long, default_value_t = 1000)]
    pub steps: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub delta: f64,
    /// Number of secondary parties.
    #[arg(long, short = 'k', default_value_t = 1)]
    pub parties: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Rdp)]
    pub method: MethodArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MethodArg {
    Rdp,
    Moments,
}

#[derive(Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

/// Provenance record written next to every output.
#[derive(Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub version: &'static str,
    pub build: &'static str,
    pub seed: u64,
    pub config: Option<serde_json::Value>,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileDigest {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

fn write_manifest(
    out: &Path,
    seed: u64,
    config: Option<serde_json::Value>,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<()> {
    let m = RunManifest {
        command: std::env::args().collect(),
        version: env!("CARGO_PKG_VERSION"),
        build: env!("FETSIM_BUILD_HASH"),
        seed,
        config,
        inputs: digests(inputs)?,
        outputs: digests(outputs)?,
    };
    let f = BufWriter::new(File::create(out.join("manifest.json"))?);
    serde_json::to_writer_pretty(f, &m)?;
    Ok(())
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::validation(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn config_sets_seed(path: &Path) -> Result<bool> {
    let table: toml::Table = fs::read_to_string(path)?.parse()?;
    Ok(table
        .get("train")
        .and_then(|t| t.as_table())
        .is_some_and(|t| t.contains_key("seed")))
}

fn read_parties(paths: &[PathBuf]) -> Result<Vec<PartyDataset>> {
    paths.iter().map(|p| linkage::read_party_csv(p)).collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    model: &'a str,
    seed: u64,
    best_epoch: usize,
    best_val_metric: f64,
    test_metric: f64,
    steps: u64,
    epsilon: f64,
    upload_bytes: u64,
}

impl<'a> From<&'a RunMetrics> for SummaryRow<'a> {
    fn from(m: &'a RunMetrics) -> Self {
        Self {
            model: &m.model,
            seed: m.seed,
            best_epoch: m.best_epoch,
            best_val_metric: m.best_val_metric,
            test_metric: m.test_metric,
            steps: m.steps,
            epsilon: m.epsilon,
            upload_bytes: m.upload_bytes,
        }
    }
}

fn synthesize(args: &SynthesizeArgs, seed: u64) -> Result<()> {
    let raw = linkage::load_raw_table(&args.input, args.rows, args.feature_scale)?;
    let synth = linkage::SynthConfig {
        parties: args.parties,
        key_dims: args.key_dims,
        key_noise: args.key_noise,
        fuzz_primary: !args.exact_primary,
        reduce_primary: args.reduce_primary,
        seed,
    };
    let parties = linkage::synthesize(&raw, &synth)?;
    fs::create_dir_all(&args.out)?;
    let mut outputs = Vec::new();
    for (i, p) in parties.iter().enumerate() {
        let path = args.out.join(format!("party_{i}.csv"));
        linkage::write_party_csv(&path, p)?;
        outputs.push(path);
    }
    write_manifest(
        &args.out,
        seed,
        Some(serde_json::to_value(&synth)?),
        std::slice::from_ref(&args.input),
        &outputs,
    )?;
    println!("wrote {} party files to {}", outputs.len(), args.out.display());
    Ok(())
}

fn link(args: &LinkArgs, seed: u64) -> Result<()> {
    let fed = Federation::new(read_parties(&args.parties)?)?;
    let rows: Vec<usize> = (0..fed.primary.len()).collect();
    let cand: Vec<Option<Vec<usize>>> = fed
        .secondaries
        .iter()
        .enumerate()
        .map(|(h, p)| {
            if args.subsample >= 1.0 {
                return Ok(None);
            }
            let mut r = rng::stream(seed, Purpose::Subsample, &[args.epoch as u64, 0, h as u64]);
            linkage::subsample_secondary(p.len(), args.subsample, args.neighbors, &mut r).map(Some)
        })
        .collect::<Result<_>>()?;
    let links = linkage::link_rows(&fed.primary, &fed.secondaries, &rows, &cand, args.neighbors)?;
    fs::create_dir_all(&args.out)?;
    let path = args.out.join(format!("links_epoch{}.bin", args.epoch));
    LinkFile {
        seed,
        q: args.subsample,
        k: args.neighbors as u32,
        epoch: args.epoch,
        primary_rows: rows,
        links,
    }
    .write(&path)?;
    write_manifest(&args.out, seed, None, &args.parties, std::slice::from_ref(&path))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_federation(cfg: &RunConfig, seed: u64) -> Result<(Federation, Vec<PathBuf>)> {
    match &cfg.data.raw {
        Some(raw_path) => {
            let raw = linkage::load_raw_table(raw_path, cfg.data.rows, cfg.data.feature_scale)?;
            let parties = linkage::synthesize(&raw, &cfg.linkage.synth(seed))?;
            Ok((Federation::new(parties)?, vec![raw_path.clone()]))
        }
        None if !cfg.data.parties.is_empty() => {
            Ok((Federation::new(read_parties(&cfg.data.parties)?)?, cfg.data.parties.clone()))
        }
        None => Err(Error::validation("config sets neither data.raw nor data.parties")),
    }
}

fn resolve_seed(flag: Option<u64>, config: &Path) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    if config_sets_seed(config)? {
        return Ok(None);
    }
    env_seed()
}

fn train(args: &TrainArgs, seed_flag: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = resolve_seed(seed_flag, &args.config)? {
        cfg.train.seed = s;
    }
    if let Some(m) = args.model {
        cfg.train.model = m.into();
    }
    if let Some(k) = args.parties {
        cfg.linkage.parties = k;
        cfg.model.num_parties = k.saturating_sub(1);
    }
    if let Some(s) = args.sigma {
        cfg.privacy.noise_multiplier = s;
        cfg.privacy.enabled = s > 0.0;
    }
    if let Some(c) = args.eps_cap {
        cfg.privacy.epsilon_cap = Some(c);
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if cfg.data.raw.is_none() && cfg.train.model == ModelKind::Fet {
        // Party files fix the federation; the model follows it.
        cfg.model.num_parties = cfg.data.parties.len().saturating_sub(1);
    }
    cfg.validate()?;
    let seed = cfg.train.seed;
    let (fed, inputs) = load_federation(&cfg, seed)?;
    let exp = cfg.experiment();

    fs::create_dir_all(&args.out)?;
    let metrics_path = args.out.join("metrics.jsonl");
    let mut jsonl = BufWriter::new(File::create(&metrics_path)?);
    let result = match exp.train.model {
        ModelKind::Fet => experiments::train_fet_with(&exp.train, &fed, &exp.model, &exp.privacy, |e| {
            log::info!("epoch {} loss {:.5} val {:.5}", e.epoch, e.train_loss, e.val_metric);
            // A failed log line must not abort training; the summary still lands.
            if let Ok(line) = serde_json::to_string(e) {
                let _ = writeln!(jsonl, "{line}");
            }
        }),
        _ => experiments::run_on(&fed, &exp),
    };
    let (metrics, trained) = match result {
        Ok(r) => r,
        Err(e) => {
            jsonl.flush()?;
            return Err(e);
        }
    };
    if exp.train.model != ModelKind::Fet {
        for e in &metrics.epochs {
            writeln!(jsonl, "{}", serde_json::to_string(e)?)?;
        }
    }
    jsonl.flush()?;
    drop(jsonl);

    let summary_path = args.out.join("summary.csv");
    write_csv(&summary_path, &[SummaryRow::from(&metrics)])?;
    let ck_path = args.out.join("checkpoint.json");
    trained.checkpoint().save(&ck_path)?;
    let config_path = args.out.join("config.toml");
    fs::write(&config_path, cfg.to_toml())?;
    write_manifest(
        &args.out,
        seed,
        Some(serde_json::to_value(&cfg)?),
        &inputs,
        &[metrics_path, summary_path, ck_path, config_path],
    )?;
    log::info!("training took {:.1}s", metrics.wall_time_s);
    println!(
        "{} test metric {:.6} (best epoch {}, ε {:.4})",
        metrics.model, metrics.test_metric, metrics.best_epoch, metrics.epsilon
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalRecord {
    model: String,
    metric: &'static str,
    value: f64,
    rows: usize,
}

fn evaluate(args: &EvaluateArgs, seed: u64) -> Result<()> {
    let model = TrainedModel::from_checkpoint(&Checkpoint::load(&args.checkpoint)?)?;
    let fed = Federation::new(read_parties(&args.parties)?)?;
    let value = model.evaluate(&fed, None, seed)?;
    let rec = EvalRecord {
        model: model.kind().name().into(),
        metric: if model.target.higher_is_better() { "accuracy" } else { "rmse" },
        value,
        rows: fed.primary.len(),
    };
    fs::create_dir_all(&args.out)?;
    let path = args.out.join("evaluation.json");
    fs::write(&path, serde_json::to_string_pretty(&rec)?)?;
    let mut inputs = vec![args.checkpoint.clone()];
    inputs.extend(args.parties.iter().cloned());
    write_manifest(&args.out, seed, None, &inputs, std::slice::from_ref(&path))?;
    println!("{} {} = {:.6}", rec.model, rec.metric, rec.value);
    Ok(())
}

fn ablate(args: &AblateArgs, seed_flag: Option<u64>) -> Result<()> {
    let suite = AblationSuite::parse(&args.suite)?;
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = resolve_seed(seed_flag, &args.config)? {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let raw_path = cfg
        .data
        .raw
        .clone()
        .ok_or_else(|| Error::validation("ablations resynthesize data and need data.raw"))?;
    let raw = linkage::load_raw_table(&raw_path, cfg.data.rows, cfg.data.feature_scale)?;
    let seeds: Vec<u64> = (0..args.seeds).map(|i| cfg.train.seed + i).collect();
    let rows = experiments::run_ablation(suite, &args.grid, &cfg.experiment(), &raw, &seeds, args.jobs)?;
    #[derive(Serialize)]
    struct Row<'a> {
        suite: &'a str,
        value: f64,
        model: &'a str,
        runs: usize,
        mean: f64,
        std: f64,
    }
    fs::create_dir_all(&args.out)?;
    let path = args.out.join(format!("ablation_{}.csv", suite.name()));
    let out: Vec<Row> = rows
        .iter()
        .map(|r| Row {
            suite: &r.suite,
            value: r.value,
            model: &r.model,
            runs: r.runs,
            mean: r.mean,
            std: r.std,
        })
        .collect();
    write_csv(&path, &out)?;
    write_manifest(
        &args.out,
        cfg.train.seed,
        Some(serde_json::to_value(&cfg)?),
        &[raw_path],
        std::slice::from_ref(&path),
    )?;
    for r in &rows {
        println!("{} = {}: {:.4} ± {:.4}", r.suite, r.value, r.mean, r.std);
    }
    Ok(())
}

fn accountant_cmd(args: &AccountantArgs, seed: u64) -> Result<()> {
    if !(args.q > 0.0 && args.q <= 1.0) {
        return Err(Error::validation(format!("q {} outside (0, 1]", args.q)));
    }
    if !(args.delta > 0.0 && args.delta < 1.0) {
        return Err(Error::validation(format!("delta {} outside (0, 1)", args.delta)));
    }
    if let Some(s) = args.sigmas.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::validation(format!("sigma {s} must be positive")));
    }
    let method = match args.method {
        MethodArg::Rdp => AccountingMethod::Rdp,
        MethodArg::Moments => AccountingMethod::Moments,
    };
    let rows = accountant::epsilon_curve(&args.sigmas, args.q, args.steps, args.delta, args.parties, method);
    fs::create_dir_all(&args.out)?;
    let path = args.out.join("epsilon_curve.csv");
    write_csv(&path, &rows)?;
    write_manifest(&args.out, seed, None, &[], std::slice::from_ref(&path))?;
    for r in &rows {
        println!("σ={} ε_mpc={:.6} ε_no_mpc={:.6}", r.sigma, r.epsilon_with_mpc, r.epsilon_no_mpc);
    }
    Ok(())
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let fallback = || -> Result<u64> { Ok(cli.seed.or(env_seed()?).unwrap_or(0)) };
    match &cli.command {
        Command::Synthesize(a) => synthesize(a, fallback()?),
        Command::Link(a) => link(a, fallback()?),
        Command::Train(a) => train(a, cli.seed),
        Command::Evaluate(a) => evaluate(a, fallback()?),
        Command::Ablate(a) => ablate(a, cli.seed),
        Command::Accountant(a) => accountant_cmd(a, fallback()?),
    }
}

/// Entry point of the `fetsim` binary; returns the process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
