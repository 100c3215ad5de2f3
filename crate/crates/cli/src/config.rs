//! Flat `key = value` run configuration shared by every subcommand.
//!
//! Defaults come from the library types, a config file may override them,
//! and flags override the file. Unknown keys are rejected.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Args, Command, FromArgMatches};
use ume_core::data::{BucketScheme, GeneratorConfig, Split};
use ume_core::evidential::FusionMode;
use ume_core::trainer::TrainConfig;

/// A configuration problem: bad key, bad value or unreadable config file.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

/// `(key, flag aliases, help)`. Keys use snake_case in files and
/// kebab-case as flags.
pub const KEYS: &[(&str, &[&str], &str)] = &[
    ("experts", &[], "number of experts M"),
    ("eta", &[], "aggregation temperature"),
    ("epsilon", &["ta"], "routing threshold on propagated weights"),
    ("rank", &["r"], "adapter rank"),
    ("lr", &[], "backbone learning rate"),
    ("expert_lr", &[], "adapter learning rate"),
    ("momentum", &[], "SGD momentum"),
    ("clip", &[], "gradient-norm clip, 0 disables"),
    ("batch", &[], "batch size"),
    ("epochs", &["epoch"], "epochs per expert stage"),
    ("backbone_epochs", &[], "backbone stage epochs"),
    ("anneal_horizon", &[], "KL annealing horizon in epochs, 0 uses epochs"),
    ("gamma", &[], "key-token mask fraction"),
    ("tau_g", &[], "Gumbel-softmax temperature"),
    ("tau", &[], "contrastive temperature"),
    ("threshold", &["thre"], "prediction threshold on fused probabilities"),
    ("fusion_mode", &[], "dst or average"),
    ("seed", &[], "seed for data generation and training"),
    ("early_stop", &[], "early-stop patience on dev micro F1, 0 disables"),
    ("update", &[], "batches accumulated per optimizer step"),
    ("warmup", &[], "learning-rate warmup steps per stage"),
    ("workers", &[], "worker threads, 0 uses all cores"),
    ("vocab_size", &[], "token vocabulary size"),
    ("hidden", &[], "encoder width"),
    ("blocks", &[], "encoder blocks"),
    ("heads", &[], "attention heads"),
    ("ffn_hidden", &[], "feed-forward width"),
    ("label_rounds", &[], "label-tree propagation rounds"),
    ("depth", &[], "generator: tree depth"),
    ("branching", &[], "generator: children per internal label"),
    ("roots", &[], "generator: level-1 labels"),
    ("ir", &[], "generator: target imbalance ratio"),
    ("seq_len", &[], "generator: tokens per sample"),
    ("noise_rate", &[], "generator: fraction of uniform noise tokens"),
    ("paths_per_sample", &[], "generator: gold paths per sample"),
    ("tokens_per_label", &[], "generator: vocabulary ids per label"),
    ("sibling_confusion", &[], "generator: chance a label's tokens come from a sibling"),
    ("samples", &[], "generator: corpus size"),
    ("dev_fraction", &[], "generator: dev split fraction"),
    ("test_fraction", &[], "generator: test split fraction"),
    ("buckets", &[], "participation buckets: level or frequency-tercile"),
    ("tail_n", &[], "least-frequent labels in tail macro F1, 0 uses ceil(K/4)"),
    ("ignore_empty", &[], "skip classes with no gold and no predicted samples in macro F1"),
    ("split", &[], "evaluation split: train, dev or test"),
    ("data", &[], "data directory with corpus.jsonl, tree.tsv and splits.json"),
    ("corpus", &[], "corpus file, overrides <data>/corpus.jsonl"),
    ("tree", &[], "label-tree file, overrides <data>/tree.tsv"),
    ("splits", &[], "split manifest, overrides <data>/splits.json"),
    ("checkpoint", &[], "checkpoint file"),
    ("out", &[], "output directory"),
    ("graph", &[], "informational only, recorded in the echoed config"),
    ("multi", &[], "informational only, recorded in the echoed config"),
    ("wandb", &[], "informational only, recorded in the echoed config"),
];

/// Keys that may change how a trained checkpoint is evaluated.
pub const INFERENCE_KEYS: &[&str] = &["eta", "threshold", "fusion_mode", "workers", "epsilon"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub buckets: BucketScheme,
    pub tail_n: usize,
    pub ignore_empty: bool,
    pub split: Split,
    pub data: PathBuf,
    pub corpus: Option<PathBuf>,
    pub tree: Option<PathBuf>,
    pub splits: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub graph: String,
    pub multi: String,
    pub wandb: String,
    /// Keys set by a file or a flag.
    pub explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let generator = GeneratorConfig::benchmark();
        Self {
            train,
            generator,
            buckets: BucketScheme::FrequencyTercile,
            tail_n: 0,
            ignore_empty: false,
            split: Split::Test,
            data: PathBuf::from("data"),
            corpus: None,
            tree: None,
            splits: None,
            checkpoint: None,
            out: PathBuf::from("out"),
            graph: "none".into(),
            multi: "true".into(),
            wandb: "false".into(),
            explicit: BTreeSet::new(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError(format!("invalid value '{value}' for {key}")))
}

fn path_opt(value: &str) -> Option<PathBuf> {
    if value.is_empty() {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

/// Map a flag alias or kebab-case name to its canonical key.
pub fn canonical(key: &str) -> Option<&'static str> {
    let k = key.trim().replace('-', "_");
    KEYS.iter().find(|(name, aliases, _)| *name == k || aliases.contains(&k.as_str())).map(|(n, _, _)| *n)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let Some(key) = canonical(key) else {
            return err(format!("unknown config key '{key}'"));
        };
        let v = value.trim();
        let t = &mut self.train;
        let g = &mut self.generator;
        match key {
            "experts" => t.experts = num(key, v)?,
            "eta" => t.eta = num(key, v)?,
            "epsilon" => t.epsilon = num(key, v)?,
            "rank" => t.rank = num(key, v)?,
            "lr" => t.lr = num(key, v)?,
            "expert_lr" => t.expert_lr = num(key, v)?,
            "momentum" => t.momentum = num(key, v)?,
            "clip" => t.clip = num(key, v)?,
            "batch" => t.batch = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "backbone_epochs" => t.backbone_epochs = num(key, v)?,
            "anneal_horizon" => t.anneal_horizon = num(key, v)?,
            "gamma" => t.gamma = num(key, v)?,
            "tau_g" => t.tau_g = num(key, v)?,
            "tau" => t.tau = num(key, v)?,
            "threshold" => t.threshold = num(key, v)?,
            "fusion_mode" => {
                t.fusion_mode = v.parse::<FusionMode>().map_err(|e| ConfigError(format!("fusion_mode: {e}")))?
            }
            "seed" => {
                t.seed = num(key, v)?;
                g.seed = t.seed;
            }
            "early_stop" => t.early_stop = num(key, v)?,
            "update" => t.update = num(key, v)?,
            "warmup" => t.warmup = num(key, v)?,
            "workers" => t.workers = num(key, v)?,
            "vocab_size" => {
                t.vocab_size = num(key, v)?;
                g.vocab_size = t.vocab_size;
            }
            "hidden" => t.hidden = num(key, v)?,
            "blocks" => t.blocks = num(key, v)?,
            "heads" => t.heads = num(key, v)?,
            "ffn_hidden" => t.ffn_hidden = num(key, v)?,
            "label_rounds" => t.label_rounds = num(key, v)?,
            "depth" => g.depth = num(key, v)?,
            "branching" => g.branching = num(key, v)?,
            "roots" => g.roots = num(key, v)?,
            "ir" => g.target_ir = num(key, v)?,
            "seq_len" => g.seq_len = num(key, v)?,
            "noise_rate" => g.noise_rate = num(key, v)?,
            "paths_per_sample" => g.paths_per_sample = num(key, v)?,
            "tokens_per_label" => g.tokens_per_label = num(key, v)?,
            "sibling_confusion" => g.sibling_confusion = num(key, v)?,
            "samples" => g.num_samples = num(key, v)?,
            "dev_fraction" => g.dev_fraction = num(key, v)?,
            "test_fraction" => g.test_fraction = num(key, v)?,
            "buckets" => self.buckets = v.parse().map_err(|e| ConfigError(format!("buckets: {e}")))?,
            "tail_n" => self.tail_n = num(key, v)?,
            "ignore_empty" => self.ignore_empty = num(key, v)?,
            "split" => self.split = v.parse().map_err(|e| ConfigError(format!("split: {e}")))?,
            "data" => self.data = PathBuf::from(v),
            "corpus" => self.corpus = path_opt(v),
            "tree" => self.tree = path_opt(v),
            "splits" => self.splits = path_opt(v),
            "checkpoint" => self.checkpoint = path_opt(v),
            "out" => self.out = PathBuf::from(v),
            "graph" => self.graph = v.to_string(),
            "multi" => self.multi = v.to_string(),
            "wandb" => self.wandb = v.to_string(),
            _ => unreachable!("key table and setter disagree on '{key}'"),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Current value of `key` in config-file syntax.
    pub fn get(&self, key: &str) -> String {
        let t = &self.train;
        let g = &self.generator;
        match key {
            "experts" => t.experts.to_string(),
            "eta" => t.eta.to_string(),
            "epsilon" => t.epsilon.to_string(),
            "rank" => t.rank.to_string(),
            "lr" => t.lr.to_string(),
            "expert_lr" => t.expert_lr.to_string(),
            "momentum" => t.momentum.to_string(),
            "clip" => t.clip.to_string(),
            "batch" => t.batch.to_string(),
            "epochs" => t.epochs.to_string(),
            "backbone_epochs" => t.backbone_epochs.to_string(),
            "anneal_horizon" => t.anneal_horizon.to_string(),
            "gamma" => t.gamma.to_string(),
            "tau_g" => t.tau_g.to_string(),
            "tau" => t.tau.to_string(),
            "threshold" => t.threshold.to_string(),
            "fusion_mode" => t.fusion_mode.to_string(),
            "seed" => t.seed.to_string(),
            "early_stop" => t.early_stop.to_string(),
            "update" => t.update.to_string(),
            "warmup" => t.warmup.to_string(),
            "workers" => t.workers.to_string(),
            "vocab_size" => t.vocab_size.to_string(),
            "hidden" => t.hidden.to_string(),
            "blocks" => t.blocks.to_string(),
            "heads" => t.heads.to_string(),
            "ffn_hidden" => t.ffn_hidden.to_string(),
            "label_rounds" => t.label_rounds.to_string(),
            "depth" => g.depth.to_string(),
            "branching" => g.branching.to_string(),
            "roots" => g.roots.to_string(),
            "ir" => g.target_ir.to_string(),
            "seq_len" => g.seq_len.to_string(),
            "noise_rate" => g.noise_rate.to_string(),
            "paths_per_sample" => g.paths_per_sample.to_string(),
            "tokens_per_label" => g.tokens_per_label.to_string(),
            "sibling_confusion" => g.sibling_confusion.to_string(),
            "samples" => g.num_samples.to_string(),
            "dev_fraction" => g.dev_fraction.to_string(),
            "test_fraction" => g.test_fraction.to_string(),
            "buckets" => match self.buckets {
                BucketScheme::Level => "level".into(),
                BucketScheme::FrequencyTercile => "frequency-tercile".into(),
            },
            "tail_n" => self.tail_n.to_string(),
            "ignore_empty" => self.ignore_empty.to_string(),
            "split" => split_name(self.split).into(),
            "data" => self.data.display().to_string(),
            "corpus" => show_path(&self.corpus),
            "tree" => show_path(&self.tree),
            "splits" => show_path(&self.splits),
            "checkpoint" => show_path(&self.checkpoint),
            "out" => self.out.display().to_string(),
            "graph" => self.graph.clone(),
            "multi" => self.multi.clone(),
            "wandb" => self.wandb.clone(),
            _ => unreachable!("unknown key '{key}'"),
        }
    }

    /// Apply a `key = value` file. Blank lines and `#` comments are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config file {}: {e}", path.display())))?;
        self.apply_text(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return err(format!("line {}: expected key = value", i + 1));
            };
            self.set(k.trim(), v.trim()).map_err(|e| ConfigError(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Every key in table order, in a form `apply_text` reads back.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|(k, _, _)| format!("{k} = {}\n", self.get(k))).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(|e| ConfigError(e.to_string()))
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.corpus.clone().unwrap_or_else(|| self.data.join("corpus.jsonl"))
    }

    pub fn tree_path(&self) -> PathBuf {
        self.tree.clone().unwrap_or_else(|| self.data.join("tree.tsv"))
    }

    pub fn splits_path(&self) -> PathBuf {
        self.splits.clone().unwrap_or_else(|| self.data.join("splits.json"))
    }
}

pub fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Dev => "dev",
        Split::Test => "test",
    }
}

/// Config flags shared by all subcommands: `--config FILE` plus one
/// `--<key>` flag per table entry.
#[derive(Debug, Clone, Default)]
pub struct ConfigFlags {
    pub file: Option<PathBuf>,
    pub overrides: Vec<(String, String)>,
}

impl ConfigFlags {
    /// Defaults, then the file, then flags.
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        if let Some(f) = &self.file {
            cfg.apply_file(f)?;
        }
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

impl FromArgMatches for ConfigFlags {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let mut out = ConfigFlags { file: m.get_one::<PathBuf>("config").cloned(), overrides: Vec::new() };
        for (key, _, _) in KEYS {
            if let Some(v) = m.get_one::<String>(key) {
                out.overrides.push((key.to_string(), v.clone()));
            }
        }
        Ok(out)
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for ConfigFlags {
    fn augment_args(cmd: Command) -> Command {
        let defaults = RunConfig::default();
        let mut cmd = cmd.arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("key = value config file; flags override it"),
        );
        for (key, aliases, help) in KEYS {
            let shown = defaults.get(key);
            let shown = if shown.is_empty() { "unset".to_string() } else { shown };
            let mut arg = Arg::new(*key)
                .long(key.replace('_', "-"))
                .value_name("VALUE")
                .action(ArgAction::Set)
                .help(format!("{help} [default: {shown}]"));
            for a in *aliases {
                arg = arg.visible_alias(*a);
            }
            cmd = cmd.arg(arg);
        }
        cmd
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}
