//! Label hierarchies, corpora, the synthetic long-tailed generator and
//! imbalance statistics.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UmeError};

pub const PAD_TOKEN: u32 = 0;
pub const CLS_TOKEN: u32 = 1;
pub const UNK_TOKEN: u32 = 2;
/// First id available for content tokens.
pub const FIRST_CONTENT_TOKEN: u32 = 3;

/// Rooted forest of labels. Levels are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTree {
    names: Vec<String>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    level: Vec<usize>,
    index: HashMap<String, usize>,
    train_counts: Vec<usize>,
}

impl LabelTree {
    /// Build from names and parent links. Fails on cycles or dangling parents.
    pub fn new(names: Vec<String>, parent: Vec<Option<usize>>) -> Result<Self> {
        if names.is_empty() {
            return Err(UmeError::InvalidArgument("label tree needs at least one label".into()));
        }
        if names.len() != parent.len() {
            return Err(UmeError::DimensionMismatch { expected: names.len(), found: parent.len() });
        }
        let k = names.len();
        let mut index = HashMap::with_capacity(k);
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(UmeError::InvalidArgument("label names must be non-empty".into()));
            }
            if index.insert(n.clone(), i).is_some() {
                return Err(UmeError::InvalidArgument(format!("duplicate label '{n}'")));
            }
        }
        let mut children = vec![Vec::new(); k];
        for (i, p) in parent.iter().enumerate() {
            if let Some(p) = *p {
                if p >= k {
                    return Err(UmeError::InvalidArgument(format!("parent index {p} out of range")));
                }
                children[p].push(i);
            }
        }
        let mut level = vec![0usize; k];
        for (i, lv) in level.iter_mut().enumerate() {
            let mut depth = 1;
            let mut cur = i;
            while let Some(p) = parent[cur] {
                depth += 1;
                cur = p;
                if depth > k {
                    return Err(UmeError::Cycle(names[i].clone()));
                }
            }
            *lv = depth;
        }
        Ok(Self { names, parent, children, level, index, train_counts: vec![0; k] })
    }

    /// Build from `parent -> child` edges. Label order is first appearance.
    pub fn from_edges(edges: &[(String, String)]) -> Result<Self> {
        let mut names: Vec<String> = Vec::new();
        let mut ids: HashMap<String, usize> = HashMap::new();
        let mut intern = |n: &str, names: &mut Vec<String>| -> usize {
            *ids.entry(n.to_string()).or_insert_with(|| {
                names.push(n.to_string());
                names.len() - 1
            })
        };
        let mut links = Vec::with_capacity(edges.len());
        for (p, c) in edges {
            let pi = intern(p, &mut names);
            let ci = intern(c, &mut names);
            links.push((pi, ci));
        }
        let mut parent = vec![None; names.len()];
        for (p, c) in links {
            if p == c {
                return Err(UmeError::Cycle(names[p].clone()));
            }
            match parent[c] {
                Some(existing) if existing != p => {
                    return Err(UmeError::InvalidArgument(format!(
                        "label '{}' has two parents ('{}' and '{}')",
                        names[c], names[existing], names[p]
                    )))
                }
                _ => parent[c] = Some(p),
            }
        }
        Self::new(names, parent)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, k: usize) -> &str {
        &self.names[k]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn parent(&self, k: usize) -> Option<usize> {
        self.parent[k]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parent
    }

    pub fn children(&self, k: usize) -> &[usize] {
        &self.children[k]
    }

    pub fn level(&self, k: usize) -> usize {
        self.level[k]
    }

    pub fn depth(&self) -> usize {
        self.level.iter().copied().max().unwrap_or(0)
    }

    pub fn is_leaf(&self, k: usize) -> bool {
        self.children[k].is_empty()
    }

    pub fn leaves(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.is_leaf(k)).collect()
    }

    pub fn roots(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.parent[k].is_none()).collect()
    }

    /// Labels on the path from the root down to `k`, inclusive.
    pub fn path_to(&self, k: usize) -> Vec<usize> {
        let mut out = vec![k];
        let mut cur = k;
        while let Some(p) = self.parent[cur] {
            out.push(p);
            cur = p;
        }
        out.reverse();
        out
    }

    /// Add missing ancestors. Returns the closed set and whether anything
    /// was added.
    pub fn close(&self, gold: &[usize]) -> (Vec<usize>, bool) {
        let mut set: BTreeSet<usize> = gold.iter().copied().collect();
        let before = set.len();
        for &g in gold {
            set.extend(self.path_to(g));
        }
        let added = set.len() != before;
        (set.into_iter().collect(), added)
    }

    pub fn is_closed(&self, gold: &[usize]) -> bool {
        gold.iter().all(|&g| self.parent[g].is_none_or(|p| gold.contains(&p)))
    }

    pub fn train_counts(&self) -> &[usize] {
        &self.train_counts
    }

    pub fn set_train_counts(&mut self, counts: Vec<usize>) -> Result<()> {
        if counts.len() != self.len() {
            return Err(UmeError::DimensionMismatch { expected: self.len(), found: counts.len() });
        }
        self.train_counts = counts;
        Ok(())
    }

    /// Undirected neighbor lists (parent and children).
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        (0..self.len())
            .map(|k| {
                let mut n: Vec<usize> = self.parent[k].into_iter().collect();
                n.extend_from_slice(&self.children[k]);
                n
            })
            .collect()
    }

    /// One `parent<TAB>child` line per edge.
    pub fn to_edge_text(&self) -> String {
        let mut out = String::new();
        for (c, p) in self.parent.iter().enumerate() {
            if let Some(p) = p {
                let _ = writeln!(out, "{}\t{}", self.names[*p], self.names[c]);
            }
        }
        out
    }
}

/// Parse a tab-separated edge file.
pub fn parse_label_tree(path: &Path) -> Result<LabelTree> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let mut edges = Vec::new();
    let mut seen_child: HashMap<String, usize> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 2 || parts[0].trim().is_empty() || parts[1].trim().is_empty() {
            return Err(UmeError::Parse {
                path: display,
                line: lineno,
                message: "expected 'parent<TAB>child'".into(),
            });
        }
        let (p, c) = (parts[0].trim().to_string(), parts[1].trim().to_string());
        if let Some(prev) = seen_child.insert(c.clone(), lineno) {
            return Err(UmeError::Parse {
                path: display,
                line: lineno,
                message: format!("label '{c}' already has a parent (line {prev})"),
            });
        }
        edges.push((p, c, lineno));
    }
    let pairs: Vec<(String, String)> = edges.iter().map(|(p, c, _)| (p.clone(), c.clone())).collect();
    LabelTree::from_edges(&pairs).map_err(|e| match e {
        UmeError::Cycle(name) => {
            let line = edges.iter().find(|(_, c, _)| *c == name).map(|e| e.2).unwrap_or(0);
            UmeError::Parse { path: display, line, message: format!("cycle through label '{name}'") }
        }
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// Content token ids, without the classification token.
    pub tokens: Vec<u32>,
    /// Sorted, closed under ancestors.
    pub gold: Vec<usize>,
}

impl Sample {
    pub fn label_mask(&self, k: usize) -> Vec<bool> {
        let mut m = vec![false; k];
        for &g in &self.gold {
            m[g] = true;
        }
        m
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus { samples: indices.iter().map(|&i| self.samples[i].clone()).collect() }
    }

    /// Per-label sample counts.
    pub fn label_counts(&self, k: usize) -> Vec<usize> {
        let mut counts = vec![0; k];
        for s in &self.samples {
            for &g in &s.gold {
                counts[g] += 1;
            }
        }
        counts
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    text: String,
    labels: Vec<String>,
}

/// Result of parsing a corpus file.
#[derive(Debug, Clone)]
pub struct ParsedCorpus {
    pub corpus: Corpus,
    /// Records whose gold set was missing ancestors.
    pub closure_warnings: usize,
}

fn hash_word(word: &str, vocab: usize) -> u32 {
    // FNV-1a folded into the content-id range.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in word.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let span = (vocab as u64).saturating_sub(FIRST_CONTENT_TOKEN as u64).max(1);
    FIRST_CONTENT_TOKEN + (h % span) as u32
}

/// Tokenize whitespace-separated text. Integer tokens are taken as ids,
/// anything else is hashed into the content-id range.
pub fn tokenize(text: &str, vocab: usize) -> Vec<u32> {
    text.split_whitespace()
        .map(|t| match t.parse::<u32>() {
            Ok(id) => id,
            Err(_) => hash_word(t, vocab),
        })
        .collect()
}

/// Parse a JSON-lines corpus with `text` and `labels` fields.
pub fn parse_corpus(path: &Path, tree: &LabelTree, vocab: usize) -> Result<ParsedCorpus> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let mut samples = Vec::new();
    let mut closure_warnings = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| UmeError::Parse {
            path: display.clone(),
            line: lineno,
            message: e.to_string(),
        })?;
        let mut gold = Vec::with_capacity(rec.labels.len());
        for name in &rec.labels {
            let id = tree.id(name).ok_or_else(|| UmeError::Parse {
                path: display.clone(),
                line: lineno,
                message: format!("unknown label '{name}'"),
            })?;
            gold.push(id);
        }
        if gold.is_empty() {
            return Err(UmeError::Parse { path: display, line: lineno, message: "record has no labels".into() });
        }
        let (gold, added) = tree.close(&gold);
        if added {
            closure_warnings += 1;
        }
        samples.push(Sample { tokens: tokenize(&rec.text, vocab), gold });
    }
    if closure_warnings > 0 {
        log::warn!("{display}: added missing ancestors to {closure_warnings} record(s)");
    }
    Ok(ParsedCorpus { corpus: Corpus { samples }, closure_warnings })
}

pub fn corpus_to_jsonl(corpus: &Corpus, tree: &LabelTree) -> Result<String> {
    let mut out = String::new();
    for s in &corpus.samples {
        let rec = Record {
            text: s.tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "),
            labels: s.gold.iter().map(|&g| tree.name(g).to_string()).collect(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, corpus: &Corpus, tree: &LabelTree) -> Result<()> {
    std::fs::write(path, corpus_to_jsonl(corpus, tree)?)?;
    Ok(())
}

pub fn write_label_tree(path: &Path, tree: &LabelTree) -> Result<()> {
    std::fs::write(path, tree.to_edge_text())?;
    Ok(())
}

/// Train/dev/test record indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitManifest {
    /// Seeded random split; `dev` and `test` sizes are rounded fractions.
    pub fn random(n: usize, dev_fraction: f64, test_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&dev_fraction)
            || !(0.0..1.0).contains(&test_fraction)
            || dev_fraction + test_fraction >= 1.0
        {
            return Err(UmeError::InvalidArgument("split fractions must sum to less than 1".into()));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5EED));
        let n_dev = (n as f64 * dev_fraction).round() as usize;
        let n_test = (n as f64 * test_fraction).round() as usize;
        let mut dev = idx[..n_dev].to_vec();
        let mut test = idx[n_dev..n_dev + n_test].to_vec();
        let mut train = idx[n_dev + n_test..].to_vec();
        train.sort_unstable();
        dev.sort_unstable();
        test.sort_unstable();
        Ok(Self { train, dev, test })
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.dev).chain(&self.test) {
            if i >= n {
                return Err(UmeError::InvalidArgument(format!("split index {i} out of range (corpus has {n})")));
            }
            if seen[i] {
                return Err(UmeError::InvalidArgument(format!("split index {i} appears twice")));
            }
            seen[i] = true;
        }
        Ok(())
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)? + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for Split {
    type Err = UmeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            o => Err(UmeError::InvalidArgument(format!("unknown split '{o}'"))),
        }
    }
}

/// Synthetic corpus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub depth: usize,
    /// Children per internal node.
    pub branching: usize,
    /// Number of level-1 labels.
    pub roots: usize,
    pub target_ir: f64,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub noise_rate: f64,
    pub paths_per_sample: usize,
    pub tokens_per_label: usize,
    /// Probability that a signal token comes from a sibling of the chosen
    /// label instead of the label itself.
    #[serde(default)]
    pub sibling_confusion: f64,
    pub num_samples: usize,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            branching: 3,
            roots: 3,
            target_ir: 50.0,
            vocab_size: 256,
            seq_len: 24,
            noise_rate: 0.3,
            paths_per_sample: 1,
            tokens_per_label: 4,
            sibling_confusion: 0.0,
            num_samples: 7000,
            dev_fraction: 1.0 / 7.0,
            test_fraction: 1.0 / 7.0,
            seed: 1,
        }
    }
}

impl GeneratorConfig {
    /// The standard benchmark: depth 3, 39 labels, IR 50, 5000 training
    /// samples, short noisy sequences with sibling confusion.
    pub fn benchmark() -> Self {
        Self { seq_len: 16, sibling_confusion: 0.3, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub corpus: Corpus,
    pub tree: LabelTree,
    pub splits: SplitManifest,
    pub realized_ir: f64,
}

fn build_tree(cfg: &GeneratorConfig) -> Result<LabelTree> {
    let mut names = Vec::new();
    let mut parent = Vec::new();
    let mut frontier = Vec::new();
    for r in 0..cfg.roots {
        names.push(format!("L{r}"));
        parent.push(None);
        frontier.push(names.len() - 1);
    }
    for _ in 1..cfg.depth {
        let mut next = Vec::new();
        for &p in &frontier {
            for c in 0..cfg.branching {
                names.push(format!("{}.{c}", names[p]));
                parent.push(Some(p));
                next.push(names.len() - 1);
            }
        }
        frontier = next;
    }
    LabelTree::new(names, parent)
}

/// Integer leaf quotas with power-law exponent `s`, at least one each.
fn leaf_quotas(n_leaves: usize, total: usize, s: f64) -> Vec<usize> {
    let w: Vec<f64> = (0..n_leaves).map(|i| ((i + 1) as f64).powf(-s)).collect();
    let z: f64 = w.iter().sum();
    let spare = total - n_leaves;
    let raw: Vec<f64> = w.iter().map(|v| v / z * spare as f64).collect();
    let mut q: Vec<usize> = raw.iter().map(|v| v.floor() as usize).collect();
    let mut left = spare - q.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..n_leaves).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if left == 0 {
            break;
        }
        q[i] += 1;
        left -= 1;
    }
    q.iter().map(|v| v + 1).collect()
}

/// Generate a long-tailed hierarchical corpus. Leaf frequencies follow a
/// power law whose exponent is solved so that the class imbalance ratio
/// (over all labels) lands on `target_ir`.
pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<GeneratedData> {
    if cfg.branching < 1 || cfg.roots < 1 {
        return Err(UmeError::InvalidArgument("branching and roots must be >= 1".into()));
    }
    if !(2..=4).contains(&cfg.depth) {
        return Err(UmeError::InvalidArgument(format!("depth must be in [2, 4], got {}", cfg.depth)));
    }
    if !(0.0..=1.0).contains(&cfg.noise_rate) {
        return Err(UmeError::InvalidArgument("noise rate must be in [0, 1]".into()));
    }
    if !(0.0..=1.0).contains(&cfg.sibling_confusion) {
        return Err(UmeError::InvalidArgument("sibling confusion must be in [0, 1]".into()));
    }
    if cfg.seq_len == 0 || cfg.tokens_per_label == 0 || cfg.paths_per_sample == 0 {
        return Err(UmeError::InvalidArgument("seq_len, tokens_per_label and paths_per_sample must be >= 1".into()));
    }
    if !(cfg.target_ir >= 1.0) {
        return Err(UmeError::InvalidArgument("target IR must be >= 1".into()));
    }
    let tree = build_tree(cfg)?;
    let k = tree.len();
    let needed = FIRST_CONTENT_TOKEN as usize + k * cfg.tokens_per_label;
    if needed > cfg.vocab_size {
        return Err(UmeError::InvalidArgument(format!(
            "vocabulary of {} cannot hold {} label vocabularies (needs {needed})",
            cfg.vocab_size, k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut leaves = tree.leaves();
    if cfg.paths_per_sample > leaves.len() {
        return Err(UmeError::InvalidArgument("more paths per sample than leaves".into()));
    }
    leaves.shuffle(&mut rng);
    let slots = cfg.num_samples * cfg.paths_per_sample;
    if slots < leaves.len() {
        return Err(UmeError::InvalidArgument(format!(
            "{} samples cannot cover {} leaves",
            cfg.num_samples,
            leaves.len()
        )));
    }

    let p = cfg.paths_per_sample;
    let shuffle_state = rng.clone();
    // Assign leaves to samples for exponent `s` and return the realized
    // label counts. Shared ancestors of multi-path samples count once.
    let realize = |s: f64| -> (Vec<usize>, f64) {
        let quotas = leaf_quotas(leaves.len(), slots, s);
        let mut slot_leaves: Vec<usize> = leaves
            .iter()
            .zip(&quotas)
            .flat_map(|(&l, &q)| std::iter::repeat_n(l, q))
            .collect();
        slot_leaves.shuffle(&mut shuffle_state.clone());
        for i in 0..cfg.num_samples {
            for a in i * p..(i + 1) * p {
                let clash = |v: usize, sl: &[usize]| (i * p..a).any(|b| sl[b] == v);
                if clash(slot_leaves[a], &slot_leaves) {
                    if let Some(j) = ((i + 1) * p..slots).find(|&j| !clash(slot_leaves[j], &slot_leaves)) {
                        slot_leaves.swap(a, j);
                    }
                }
            }
        }
        let mut counts = vec![0usize; tree.len()];
        for chunk in slot_leaves.chunks(p) {
            for l in tree.close(chunk).0 {
                counts[l] += 1;
            }
        }
        (slot_leaves, stats_from_counts(counts).ir)
    };
    let (ir_lo, ir_hi) = (realize(0.0).1, realize(60.0).1);
    if cfg.target_ir < ir_lo * 0.9 || cfg.target_ir > ir_hi * 1.1 {
        return Err(UmeError::InfeasibleImbalance { requested: cfg.target_ir, min: ir_lo, max: ir_hi });
    }
    let (mut lo, mut hi) = (0.0f64, 60.0f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if realize(mid).1 < cfg.target_ir {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (lo_assign, lo_ir) = realize(lo);
    let (hi_assign, hi_ir) = realize(hi);
    let slot_leaves = if (lo_ir - cfg.target_ir).abs() <= (hi_ir - cfg.target_ir).abs() { lo_assign } else { hi_assign };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x70CE_0000);

    let content_lo = FIRST_CONTENT_TOKEN;
    let content_hi = cfg.vocab_size as u32;
    let min_len = (cfg.seq_len * 3).div_ceil(4).max(1);
    let mut samples = Vec::with_capacity(cfg.num_samples);
    for i in 0..cfg.num_samples {
        let chosen = &slot_leaves[i * p..(i + 1) * p];
        let (gold, _) = tree.close(chosen);
        let len = rng.random_range(min_len..=cfg.seq_len);
        let tokens = (0..len)
            .map(|_| {
                if rng.random::<f64>() < cfg.noise_rate {
                    rng.random_range(content_lo..content_hi)
                } else {
                    let mut label = gold[rng.random_range(0..gold.len())];
                    if cfg.sibling_confusion > 0.0 && rng.random::<f64>() < cfg.sibling_confusion {
                        let sibs: Vec<usize> = match tree.parent(label) {
                            Some(p) => tree.children(p).iter().copied().filter(|&c| c != label).collect(),
                            None => tree.roots().into_iter().filter(|&c| c != label).collect(),
                        };
                        if !sibs.is_empty() {
                            label = sibs[rng.random_range(0..sibs.len())];
                        }
                    }
                    let t = rng.random_range(0..cfg.tokens_per_label);
                    content_lo + (label * cfg.tokens_per_label + t) as u32
                }
            })
            .collect();
        samples.push(Sample { tokens, gold });
    }
    let corpus = Corpus { samples };
    let realized_ir = imbalance_stats(&corpus, k)?.ir;
    if (realized_ir - cfg.target_ir).abs() > 0.1 * cfg.target_ir {
        return Err(UmeError::InfeasibleImbalance { requested: cfg.target_ir, min: ir_lo, max: ir_hi });
    }
    let splits = SplitManifest::random(cfg.num_samples, cfg.dev_fraction, cfg.test_fraction, cfg.seed)?;
    let mut tree = tree;
    tree.set_train_counts(corpus.subset(&splits.train).label_counts(k))?;
    Ok(GeneratedData { corpus, tree, splits, realized_ir })
}

/// Vocabulary slice owned by `label` in generated corpora.
pub fn label_token_range(label: usize, tokens_per_label: usize) -> std::ops::Range<u32> {
    let start = FIRST_CONTENT_TOKEN + (label * tokens_per_label) as u32;
    start..start + tokens_per_label as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub counts: Vec<usize>,
    pub n_min: usize,
    pub n_max: usize,
    pub ir: f64,
}

/// Exact per-label counts and the imbalance ratio over labels with at
/// least one sample.
pub fn imbalance_stats(corpus: &Corpus, num_labels: usize) -> Result<CorpusStats> {
    if corpus.is_empty() {
        return Err(UmeError::InvalidArgument("imbalance statistics need a nonempty corpus".into()));
    }
    Ok(stats_from_counts(corpus.label_counts(num_labels)))
}

pub fn stats_from_counts(counts: Vec<usize>) -> CorpusStats {
    let n_max = counts.iter().copied().max().unwrap_or(0);
    let n_min = counts.iter().copied().filter(|&c| c > 0).min().unwrap_or(0);
    let ir = if n_min == 0 { 1.0 } else { n_max as f64 / n_min as f64 };
    CorpusStats { counts, n_min, n_max, ir }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Head,
    Medium,
    Tail,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Head, Bucket::Medium, Bucket::Tail];

    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::Head => "head",
            Bucket::Medium => "medium",
            Bucket::Tail => "tail",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BucketScheme {
    /// Deepest gold level: 1 head, 2 medium, 3+ tail.
    #[default]
    Level,
    /// Terciles of samples ranked by the train count of their rarest label.
    FrequencyTercile,
}

impl std::str::FromStr for BucketScheme {
    type Err = UmeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "level" => Ok(BucketScheme::Level),
            "frequency-tercile" | "frequency" => Ok(BucketScheme::FrequencyTercile),
            o => Err(UmeError::InvalidArgument(format!("unknown bucket scheme '{o}'"))),
        }
    }
}

pub fn assign_buckets(samples: &[Sample], tree: &LabelTree, scheme: BucketScheme) -> Vec<Bucket> {
    match scheme {
        BucketScheme::Level => samples
            .iter()
            .map(|s| match s.gold.iter().map(|&g| tree.level(g)).max().unwrap_or(1) {
                1 => Bucket::Head,
                2 => Bucket::Medium,
                _ => Bucket::Tail,
            })
            .collect(),
        BucketScheme::FrequencyTercile => {
            let counts = tree.train_counts();
            let key = |s: &Sample| s.gold.iter().map(|&g| counts[g]).min().unwrap_or(0);
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.sort_by(|&a, &b| key(&samples[b]).cmp(&key(&samples[a])).then(a.cmp(&b)));
            let n = samples.len();
            let mut out = vec![Bucket::Head; n];
            for (rank, &i) in order.iter().enumerate() {
                out[i] = if rank * 3 < n {
                    Bucket::Head
                } else if rank * 3 < 2 * n {
                    Bucket::Medium
                } else {
                    Bucket::Tail
                };
            }
            out
        }
    }
}

/// Write text to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
