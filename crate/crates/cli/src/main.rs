mod config;

use std::path::Path;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ume_core::checkpoint;
use ume_core::data::{self, Corpus, GeneratorConfig, LabelTree, SplitManifest};
use ume_core::encoder::ExpertEnsemble;
use ume_core::metrics::{self, EvalReport, SUMMARY_CSV_HEADER};
use ume_core::parallel;
use ume_core::trainer::{self, EvalOptions, RunLog};
use ume_core::UmeError;

use config::{ConfigError, ConfigFlags, RunConfig, INFERENCE_KEYS};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

/// Uncertainty-gated multi-expert classifier for long-tailed label trees.
///
/// Every subcommand reads the same flat configuration: defaults, then
/// `--config FILE`, then flags. The effective configuration is written to
/// `config.txt` in the output directory.
#[derive(Parser)]
#[command(name = "ume", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic long-tailed corpus, label tree and splits into `out`.
    GenData(ConfigFlags),
    /// Train the backbone and every expert; writes model.ckpt and run.log.
    Train(ConfigFlags),
    /// Evaluate a checkpoint on a split; writes report.json and CSV tables.
    Eval(ConfigFlags),
    /// Participation, conflict, tail and threshold tables for a checkpoint.
    Analyze(ConfigFlags),
    /// Repeat evaluation over values of one config key.
    Sweep(SweepArgs),
}

#[derive(clap::Args)]
struct SweepArgs {
    /// Key to vary: eta and threshold reuse the checkpoint, epsilon retrains.
    #[arg(long)]
    axis: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[command(flatten)]
    flags: ConfigFlags,
}

/// Input data that could not be read or does not parse.
#[derive(Debug)]
struct DataError(String);

impl std::fmt::Display for DataError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if cause.is::<DataError>() {
            return EXIT_DATA;
        }
        if let Some(u) = cause.downcast_ref::<UmeError>() {
            return match u {
                UmeError::Config(_) => EXIT_CONFIG,
                UmeError::Parse { .. }
                | UmeError::Cycle(_)
                | UmeError::OutOfVocabulary { .. }
                | UmeError::InfeasibleImbalance { .. }
                | UmeError::EmptyLabelSet
                | UmeError::VersionMismatch { .. }
                | UmeError::CorruptCheckpoint(_) => EXIT_DATA,
                _ => EXIT_RUNTIME,
            };
        }
    }
    EXIT_RUNTIME
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData(f) => resolve(&f).and_then(|c| gen_data(&c)),
        Cmd::Train(f) => resolve(&f).and_then(|c| train(&c)),
        Cmd::Eval(f) => resolve(&f).and_then(|c| eval(&c)),
        Cmd::Analyze(f) => resolve(&f).and_then(|c| analyze(&c)),
        Cmd::Sweep(a) => resolve(&a.flags).and_then(|c| sweep(&c, &a.axis, &a.values)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn resolve(flags: &ConfigFlags) -> Result<RunConfig> {
    let cfg = flags.resolve()?;
    cfg.validate()?;
    parallel::init_workers(cfg.train.workers);
    Ok(cfg)
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write(&cfg.out.join("config.txt"), &cfg.to_text())
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError(format!("{}: {e}", path.display()))
}

struct Dataset {
    tree: LabelTree,
    corpus: Corpus,
    splits: SplitManifest,
}

fn load_data(cfg: &RunConfig, vocab: usize) -> Result<Dataset> {
    let tree_path = cfg.tree_path();
    let mut tree = data::parse_label_tree(&tree_path).map_err(|e| data_err(&tree_path, e))?;
    let corpus_path = cfg.corpus_path();
    let parsed = data::parse_corpus(&corpus_path, &tree, vocab).map_err(|e| data_err(&corpus_path, e))?;
    let splits_path = cfg.splits_path();
    let splits = SplitManifest::read(&splits_path).map_err(|e| data_err(&splits_path, e))?;
    splits.validate(parsed.corpus.len()).map_err(|e| data_err(&splits_path, e))?;
    let train = parsed.corpus.subset(&splits.train);
    tree.set_train_counts(train.label_counts(tree.len()))?;
    Ok(Dataset { tree, corpus: parsed.corpus, splits })
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let g: &GeneratorConfig = &cfg.generator;
    let out = data::generate_synthetic(g)?;
    prepare_out(cfg)?;
    data::write_corpus(&cfg.out.join("corpus.jsonl"), &out.corpus, &out.tree)?;
    data::write_label_tree(&cfg.out.join("tree.tsv"), &out.tree)?;
    out.splits.write(&cfg.out.join("splits.json"))?;
    let stats = data::imbalance_stats(&out.corpus, out.tree.len())?;
    write(&cfg.out.join("stats.json"), &(serde_json::to_string_pretty(&stats)? + "\n"))?;
    println!(
        "wrote {} samples over {} labels to {} (imbalance ratio {:.2})",
        out.corpus.len(),
        out.tree.len(),
        cfg.out.display(),
        out.realized_ir
    );
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let ds = load_data(cfg, cfg.train.vocab_size)?;
    prepare_out(cfg)?;
    let log_path = cfg.out.join("run.log");
    let mut log = RunLog::to_file(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let outcome = trainer::train(&ds.corpus, &ds.tree, &ds.splits, &cfg.train, &mut log)?;
    let ckpt = cfg.checkpoint.clone().unwrap_or_else(|| cfg.out.join("model.ckpt"));
    checkpoint::save(&ckpt, &outcome.ensemble, &cfg.train).with_context(|| format!("writing {}", ckpt.display()))?;
    write(&cfg.out.join("stages.json"), &(serde_json::to_string_pretty(&outcome.reports)? + "\n"))?;
    for r in &outcome.reports {
        println!(
            "stage {} epochs {} loss {:.4} masked-in {:.3} dev micro-F1 {}",
            r.stage,
            r.epochs_run,
            r.final_loss,
            r.masked_in_fraction,
            r.dev_micro_f1.map(|f| format!("{f:.4}")).unwrap_or_else(|| "-".into())
        );
    }
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

/// Checkpoint plus the config it should be evaluated under: the training
/// config stored in the file, with explicitly set inference keys applied.
fn load_model(cfg: &mut RunConfig) -> Result<ExpertEnsemble> {
    let path = cfg.checkpoint.clone().ok_or_else(|| ConfigError("--checkpoint is required".into()))?;
    if !path.exists() {
        return Err(DataError(format!("checkpoint {} does not exist", path.display())).into());
    }
    let (ens, stored) = checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let overrides: Vec<(String, String)> =
        INFERENCE_KEYS.iter().filter(|k| cfg.explicit.contains(**k)).map(|k| (k.to_string(), cfg.get(k))).collect();
    let explicit = std::mem::take(&mut cfg.explicit);
    cfg.train = stored;
    for (k, v) in overrides {
        cfg.set(&k, &v)?;
    }
    cfg.explicit = explicit;
    cfg.validate()?;
    Ok(ens)
}

fn eval_options(cfg: &RunConfig, k: usize) -> EvalOptions {
    let n = if cfg.tail_n == 0 { k.div_ceil(4) } else { cfg.tail_n };
    EvalOptions { buckets: cfg.buckets, tail_sizes: vec![n], ignore_empty: cfg.ignore_empty, ..EvalOptions::default() }
}

fn run_eval(cfg: &RunConfig, ens: &ExpertEnsemble, ds: &Dataset) -> Result<(EvalReport, trainer::Predictions)> {
    let name = config::split_name(cfg.split);
    let indices = ds.splits.get(cfg.split);
    Ok(trainer::evaluate(ens, &ds.corpus, indices, name, &cfg.train, &eval_options(cfg, ens.tree.len()))?)
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let mut cfg = cfg.clone();
    let ens = load_model(&mut cfg)?;
    let ds = load_data(&cfg, ens.config.vocab_size)?;
    let (report, _) = run_eval(&cfg, &ens, &ds)?;
    prepare_out(&cfg)?;
    write(&cfg.out.join("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    write(&cfg.out.join("per_class.csv"), &report.per_class_csv())?;
    write(&cfg.out.join("summary.csv"), &format!("{SUMMARY_CSV_HEADER}\n{}\n", report.summary_csv_row()))?;
    println!("{SUMMARY_CSV_HEADER}\n{}", report.summary_csv_row());
    Ok(())
}

fn analyze(cfg: &RunConfig) -> Result<()> {
    let mut cfg = cfg.clone();
    let ens = load_model(&mut cfg)?;
    let ds = load_data(&cfg, ens.config.vocab_size)?;
    let (report, _) = run_eval(&cfg, &ens, &ds)?;
    prepare_out(&cfg)?;
    let train = ds.corpus.subset(&ds.splits.train);
    let stats = data::imbalance_stats(&train, ds.tree.len())?;
    let mut counts = String::from("label,level,train_count\n");
    for (k, c) in stats.counts.iter().enumerate() {
        counts.push_str(&format!("{},{},{c}\n", ds.tree.name(k), ds.tree.level(k)));
    }
    write(&cfg.out.join("label_counts.csv"), &counts)?;
    write(&cfg.out.join("participation.csv"), &report.participation_csv())?;
    write(&cfg.out.join("conflict.csv"), &report.conflict_csv())?;
    write(&cfg.out.join("tail.csv"), &report.tail_csv())?;
    write(&cfg.out.join("threshold.csv"), &report.threshold_csv())?;
    let util = format!(
        "experts,utilization,avg_last_conflict,conflict_error_spearman\n{},{},{},{}\n",
        report.experts,
        report.last_expert_utilization,
        report.avg_last_conflict,
        report.conflict_error_spearman.map(|s| s.to_string()).unwrap_or_default()
    );
    write(&cfg.out.join("utilization.csv"), &util)?;
    print!("{}", report.participation_csv());
    print!("{util}");
    Ok(())
}

fn sweep(cfg: &RunConfig, axis: &str, values: &[f64]) -> Result<()> {
    let axis = config::canonical(axis).ok_or_else(|| ConfigError(format!("unknown sweep axis '{axis}'")))?;
    let retrain = match axis {
        "eta" | "threshold" => false,
        "epsilon" => true,
        other => return Err(ConfigError(format!("sweep axis must be eta, threshold or epsilon, got '{other}'")).into()),
    };
    let mut cfg = cfg.clone();
    let rows = if retrain {
        let ds = load_data(&cfg, cfg.train.vocab_size)?;
        metrics::sweep(axis, values, |v| {
            let mut c = cfg.clone();
            c.set(axis, &v.to_string()).map_err(|e| UmeError::Config(e.0))?;
            c.train.validate()?;
            let out = trainer::train(&ds.corpus, &ds.tree, &ds.splits, &c.train, &mut RunLog::memory())?;
            let opts = eval_options(&c, ds.tree.len());
            let indices = ds.splits.get(c.split);
            Ok(trainer::evaluate(&out.ensemble, &ds.corpus, indices, config::split_name(c.split), &c.train, &opts)?.0)
        })?
    } else {
        let ens = load_model(&mut cfg)?;
        let ds = load_data(&cfg, ens.config.vocab_size)?;
        metrics::sweep(axis, values, |v| {
            let mut c = cfg.clone();
            c.set(axis, &v.to_string()).map_err(|e| UmeError::Config(e.0))?;
            c.train.validate()?;
            let opts = eval_options(&c, ens.tree.len());
            let indices = ds.splits.get(c.split);
            Ok(trainer::evaluate(&ens, &ds.corpus, indices, config::split_name(c.split), &c.train, &opts)?.0)
        })?
    };
    prepare_out(&cfg)?;
    let table = metrics::sweep_csv(&rows);
    write(&cfg.out.join(format!("sweep_{axis}.csv")), &table)?;
    print!("{table}");
    Ok(())
}
