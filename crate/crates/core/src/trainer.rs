//! Staged training: a backbone stage, then one stage per expert in which
//! only that expert's adapter is trained on the samples its predecessors
//! leave uncertain. Also routing, fused prediction and evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{assign_buckets, BucketScheme, Corpus, LabelTree, Sample, SplitManifest};
use crate::encoder::{key_mask_backward, key_token_mask, Adapter, ExpertEnsemble, ModelConfig, Params};
use crate::error::{Result, UmeError};
use crate::evidential::{
    evidence_from_logits, fuse, opinion_from_evidence, sigmoid, weights_from_chain, EvidenceVector, FusionMode,
    FusionTrace,
};
use crate::losses::{anneal, bce_with_logits, evidence_kl_loss, marginal_likelihood_loss, ntxent_loss, AnnealSchedule};
use crate::metrics::{self, EvalReport};
use crate::parallel::{self, Parallelism};

/// Samples per gradient-accumulation chunk. Fixed so reductions happen in
/// the same order whatever the worker count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub experts: usize,
    pub eta: f64,
    pub epsilon: f64,
    pub rank: usize,
    /// Backbone-stage learning rate.
    pub lr: f64,
    /// Expert-stage (adapter) learning rate.
    pub expert_lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip per optimizer step; `0` disables.
    pub clip: f64,
    pub batch: usize,
    /// Epochs per expert stage.
    pub epochs: usize,
    pub backbone_epochs: usize,
    /// KL annealing horizon; `0` means `epochs`.
    pub anneal_horizon: usize,
    pub gamma: f64,
    pub tau_g: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub threshold: f64,
    pub fusion_mode: FusionMode,
    pub seed: u64,
    /// Patience in epochs on dev micro F1; `0` disables.
    pub early_stop: usize,
    /// Batches accumulated per optimizer step.
    pub update: usize,
    /// Linear learning-rate warmup steps per stage.
    pub warmup: usize,
    pub workers: usize,
    pub vocab_size: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub label_rounds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            experts: 3,
            eta: 0.9,
            epsilon: 0.5,
            rank: 8,
            lr: 0.01,
            expert_lr: 0.05,
            momentum: 0.9,
            clip: 5.0,
            batch: 32,
            epochs: 10,
            backbone_epochs: 10,
            anneal_horizon: 0,
            gamma: 0.02,
            tau_g: 1.0,
            tau: 0.5,
            threshold: 2.0 / 3.0,
            fusion_mode: FusionMode::Dst,
            seed: 1,
            early_stop: 0,
            update: 1,
            warmup: 0,
            workers: 0,
            vocab_size: 256,
            hidden: 64,
            blocks: 2,
            heads: 4,
            ffn_hidden: 128,
            label_rounds: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(UmeError::Config(m));
        if self.experts == 0 {
            return bad("experts must be at least 1".into());
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must be in [0, 1), got {}", self.epsilon));
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.expert_lr > 0.0 && self.expert_lr.is_finite()) {
            return bad(format!("learning rates must be positive, got {} and {}", self.lr, self.expert_lr));
        }
        if !(self.clip >= 0.0) {
            return bad(format!("clip must be non-negative, got {}", self.clip));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch == 0 || self.update == 0 {
            return bad("batch and update must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold must be in [0, 1], got {}", self.threshold));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must be in (0, 1), got {}", self.gamma));
        }
        if !(self.tau_g > 0.0) || !(self.tau > 0.0) {
            return bad("temperatures must be positive".into());
        }
        self.model_config(1).validate().map_err(|e| UmeError::Config(e.to_string()))
    }

    pub fn model_config(&self, num_labels: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            hidden: self.hidden,
            blocks: self.blocks,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            rank: self.rank,
            experts: self.experts,
            num_labels,
            label_rounds: self.label_rounds,
            init_seed: mix(self.seed, 0, 0, 0),
        }
    }

    pub fn schedule(&self) -> AnnealSchedule {
        AnnealSchedule { horizon: if self.anneal_horizon == 0 { self.epochs.max(1) } else { self.anneal_horizon } }
    }

    pub fn parallelism(&self) -> Parallelism {
        Parallelism::from_workers(self.workers)
    }
}

/// splitmix64 over the inputs; derives independent stream seeds.
pub fn mix(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut x = seed;
    for v in [a, b, c] {
        x = x.wrapping_add(v.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

/// Structured run log, one JSON object per line.
pub struct RunLog {
    writer: Option<BufWriter<File>>,
    events: Vec<serde_json::Value>,
}

impl RunLog {
    pub fn memory() -> Self {
        Self { writer: None, events: Vec::new() }
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        Ok(Self { writer: Some(BufWriter::new(File::create(path)?)), events: Vec::new() })
    }

    pub fn emit(&mut self, event: serde_json::Value) -> Result<()> {
        log::debug!("{event}");
        if let Some(w) = &mut self.writer {
            writeln!(w, "{event}")?;
            w.flush()?;
        }
        self.events.push(event);
        Ok(())
    }

    pub fn events(&self) -> &[serde_json::Value] {
        &self.events
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    /// `0` for the backbone stage.
    pub stage: usize,
    pub epochs_run: usize,
    pub final_loss: f64,
    pub masked_in_fraction: f64,
    pub mean_uncertainty: f64,
    pub mean_conflict: f64,
    pub dev_micro_f1: Option<f64>,
}

/// Routing state for one batch: weights for experts `1..=m`, computed from
/// the opinions of experts `1..m` only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    /// Per sample, `m` weights.
    pub weights: Vec<Vec<f64>>,
    /// Per sample, conflicts `C^1..C^{m-1}` of the predecessors.
    pub conflicts: Vec<Vec<f64>>,
    /// Per sample, uncertainties `u^1..u^{m-1}` of the predecessors.
    pub uncertainties: Vec<Vec<f64>>,
    /// Per sample, `w^j > epsilon` for each expert `j`.
    pub mask: Vec<Vec<bool>>,
}

impl RoutingRecord {
    /// Mask bits of the last expert.
    pub fn last_mask(&self) -> Vec<bool> {
        self.mask.iter().map(|m| *m.last().expect("at least one expert")).collect()
    }
}

/// Evidence of expert `m` (zero-based) on a pooled feature.
pub fn expert_evidence(ens: &ExpertEnsemble, h: ArrayView1<f64>, m: Option<usize>) -> Result<EvidenceVector> {
    let out = ens.head_forward(h, m)?;
    evidence_from_logits(out.logits.as_slice().expect("contiguous"))
}

/// Routing weights for experts `1..=m` (one-based count) on pooled features.
pub fn compute_routing(
    ens: &ExpertEnsemble,
    features: &[Array1<f64>],
    m: usize,
    epsilon: f64,
    mode: Parallelism,
) -> Result<RoutingRecord> {
    if m == 0 || m > ens.num_experts() {
        return Err(UmeError::InvalidExpert { index: m, count: ens.num_experts() });
    }
    let rows = parallel::map(features, mode, |_, h| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let opinions = (0..m - 1)
            .map(|j| expert_evidence(ens, h.view(), Some(j)).map(|e| opinion_from_evidence(&e)))
            .collect::<Result<Vec<_>>>()?;
        let mut u: Vec<f64> = opinions.iter().map(|o| o.uncertainty).collect();
        let mut c = vec![0.0];
        for pair in opinions.windows(2) {
            c.push(crate::evidential::conflict(&pair[0], &pair[1])?);
        }
        c.truncate(opinions.len());
        let (u_used, c_used) = (u.clone(), c.clone());
        // The last entries never reach w^m; pad to the recursion's length.
        u.push(1.0);
        c.resize(m, 0.0);
        Ok((weights_from_chain(&u, &c), c_used, u_used))
    });
    let mut rec = RoutingRecord { weights: vec![], conflicts: vec![], uncertainties: vec![], mask: vec![] };
    for r in rows {
        let (w, c, u) = r?;
        rec.mask.push(w.iter().map(|&v| v > epsilon).collect());
        rec.weights.push(w);
        rec.conflicts.push(c);
        rec.uncertainties.push(u);
    }
    Ok(rec)
}

/// Pooled pre-adapter features for the given samples.
pub fn pooled_features(ens: &ExpertEnsemble, samples: &[&Sample], mode: Parallelism) -> Result<Vec<Array1<f64>>> {
    parallel::map(samples, mode, |_, s| ens.features(&s.tokens)).into_iter().collect()
}

/// Pooled features of key-masked inputs. The mask for sample `i` is drawn
/// from a stream keyed by `(seed, stage, salt, i)`.
pub fn key_features(
    ens: &ExpertEnsemble,
    samples: &[(usize, &Sample)],
    cfg: &TrainConfig,
    stage: u64,
    salt: u64,
) -> Result<Vec<Array1<f64>>> {
    let labels = ens.label_embeddings();
    parallel::map(samples, cfg.parallelism(), |_, (idx, s)| {
        let ids = ExpertEnsemble::with_cls(&s.tokens);
        let h = ens.embed(&ids)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, stage, salt, *idx as u64));
        let mask = key_token_mask(h.view(), &ids, labels.view(), &s.gold, cfg.gamma, cfg.tau_g, &mut rng)?;
        let (states, _) = ens.backbone_forward(&mask.masked)?;
        Ok(states.row(0).to_owned())
    })
    .into_iter()
    .collect()
}

/// Fused prediction from a pooled feature using the first `experts` experts.
/// With `experts == 0` the backbone head alone is used.
pub fn predict_from_features(
    ens: &ExpertEnsemble,
    h: ArrayView1<f64>,
    experts: usize,
    eta: f64,
    mode: FusionMode,
    threshold: f64,
) -> Result<(Vec<bool>, FusionTrace)> {
    let evs = if experts == 0 {
        vec![expert_evidence(ens, h, None)?]
    } else {
        (0..experts).map(|m| expert_evidence(ens, h, Some(m))).collect::<Result<Vec<_>>>()?
    };
    let trace = fuse(&evs, eta, mode)?;
    let labels = threshold_labels(&trace.probabilities, threshold);
    Ok((labels, trace))
}

/// Labels whose probability strictly exceeds `threshold`.
pub fn threshold_labels(probabilities: &[f64], threshold: f64) -> Vec<bool> {
    probabilities.iter().map(|&p| p > threshold).collect()
}

/// Predicted label mask and trace for one sample using every expert.
pub fn predict(ens: &ExpertEnsemble, sample: &Sample, cfg: &TrainConfig) -> Result<(Vec<bool>, FusionTrace)> {
    let h = ens.features(&sample.tokens)?;
    predict_from_features(ens, h.view(), ens.num_experts(), cfg.eta, cfg.fusion_mode, cfg.threshold)
}

fn dev_micro_f1(
    ens: &ExpertEnsemble,
    feats: &[Array1<f64>],
    gold: &[Vec<bool>],
    experts: usize,
    cfg: &TrainConfig,
) -> Result<f64> {
    let pred = parallel::map(feats, cfg.parallelism(), |_, h| {
        predict_from_features(ens, h.view(), experts, cfg.eta, cfg.fusion_mode, cfg.threshold).map(|p| p.0)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(metrics::micro_macro_f1(&pred, gold, false)?.micro)
}

struct Sgd {
    step: usize,
    base: f64,
}

impl Sgd {
    fn rate(&self, cfg: &TrainConfig) -> f64 {
        if cfg.warmup == 0 {
            self.base
        } else {
            self.base * ((self.step + 1) as f64 / cfg.warmup as f64).min(1.0)
        }
    }
}

fn check_finite(loss: f64, stage: usize, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(UmeError::Diverged(format!("non-finite loss {loss} at stage {stage}, epoch {epoch}, batch {batch}")))
    }
}

struct Forward {
    real_cache: crate::encoder::FeatureCache,
    real_rows: usize,
    real: crate::encoder::HeadOutput,
    key_cache: crate::encoder::FeatureCache,
    key_rows: usize,
    key: crate::encoder::HeadOutput,
    mask: crate::encoder::TokenMaskResult,
    ids: Vec<u32>,
    embedded: Array2<f64>,
    bce: f64,
    d_real: Array1<f64>,
    d_key: Array1<f64>,
}

/// Train backbone, heads and label embeddings on the real and key-token
/// classification losses plus the contrastive loss, then freeze.
pub fn train_backbone(
    ens: &mut ExpertEnsemble,
    corpus: &Corpus,
    splits: &SplitManifest,
    cfg: &TrainConfig,
    log: &mut RunLog,
) -> Result<StageReport> {
    if splits.train.is_empty() {
        return Err(UmeError::InvalidArgument("training split is empty".into()));
    }
    let k = ens.tree.len();
    let mode = cfg.parallelism();
    log.emit(json!({"event": "stage_start", "stage": 0, "kind": "backbone", "samples": splits.train.len()}))?;
    let dev: Vec<&Sample> = splits.dev.iter().map(|&i| &corpus.samples[i]).collect();
    let dev_gold: Vec<Vec<bool>> = dev.iter().map(|s| s.label_mask(k)).collect();
    let mut velocity = ens.params.zeros_like();
    let mut pending = ens.params.zeros_like();
    let mut pending_batches = 0usize;
    let mut opt = Sgd { step: 0, base: cfg.lr };
    let mut order = splits.train.clone();
    let mut last_loss = f64::NAN;
    let mut best: Option<(f64, Params)> = None;
    let mut stale = 0usize;
    let mut epochs_run = 0;
    let mut dev_f1 = None;
    for epoch in 0..cfg.backbone_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0, 1, epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (bi, batch) in order.chunks(cfg.batch).enumerate() {
            let b = batch.len() as f64;
            let labels = ens.label_embeddings();
            let model = &*ens;
            let fwd: Vec<Forward> = parallel::map(batch, mode, |_, &idx| -> Result<Forward> {
                let s = &corpus.samples[idx];
                let y = s.label_mask(k);
                let ids = ExpertEnsemble::with_cls(&s.tokens);
                let (real_states, real_cache) = model.backbone_forward(&ids)?;
                let real = model.head_forward(real_states.row(0), None)?;
                let embedded = model.embed(&ids)?;
                let mut mrng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0, 2 + epoch as u64, idx as u64));
                let mask = key_token_mask(embedded.view(), &ids, labels.view(), &s.gold, cfg.gamma, cfg.tau_g, &mut mrng)?;
                let (key_states, key_cache) = model.backbone_forward(&mask.masked)?;
                let key = model.head_forward(key_states.row(0), None)?;
                let lr = bce_with_logits(real.logits.as_slice().unwrap(), &y)?;
                let lk = bce_with_logits(key.logits.as_slice().unwrap(), &y)?;
                Ok(Forward {
                    real_cache,
                    real_rows: real_states.nrows(),
                    real,
                    key_cache,
                    key_rows: key_states.nrows(),
                    key,
                    mask,
                    ids,
                    embedded,
                    bce: lr.value + lk.value,
                    d_real: Array1::from(lr.gradient) / b,
                    d_key: Array1::from(lk.gradient) / b,
                })
            })
            .into_iter()
            .collect::<Result<_>>()?;
            let n = fwd.len();
            let d = model.config.hidden;
            let mut rows = Vec::with_capacity(2 * n * d);
            for f in &fwd {
                rows.extend(f.real.z.iter());
            }
            for f in &fwd {
                rows.extend(f.key.z.iter());
            }
            let partner: Vec<usize> = (0..2 * n).map(|i| if i < n { i + n } else { i - n }).collect();
            let (cl_value, cl_grad) = if n >= 1 {
                let l = ntxent_loss(&rows, d, &partner, cfg.tau)?;
                (l.value, l.gradient)
            } else {
                (0.0, vec![0.0; rows.len()])
            };
            let loss = fwd.iter().map(|f| f.bce).sum::<f64>() / b + cl_value;
            check_finite(loss, 0, epoch, bi)?;
            let chunks: Vec<(usize, &[Forward])> = fwd.chunks(GRAD_CHUNK).enumerate().collect();
            let partials: Vec<Params> = parallel::map(&chunks, mode, |_, (ci, chunk)| {
                let mut g = model.params.zeros_like();
                for (j, f) in chunk.iter().enumerate() {
                    let i = ci * GRAD_CHUNK + j;
                    let s = &corpus.samples[batch[i]];
                    let dz_real = ArrayView1::from(&cl_grad[i * d..(i + 1) * d]);
                    let dz_key = ArrayView1::from(&cl_grad[(i + n) * d..(i + n + 1) * d]);
                    let dh = model.head_backward(&f.real, f.d_real.view(), Some(dz_real), &mut g);
                    let mut ds = Array2::zeros((f.real_rows, d));
                    ds.row_mut(0).assign(&dh);
                    model.backbone_backward(&f.real_cache, &ds, &mut g);
                    let dh = model.head_backward(&f.key, f.d_key.view(), Some(dz_key), &mut g);
                    let mut ds = Array2::zeros((f.key_rows, d));
                    ds.row_mut(0).assign(&dh);
                    let d_in = model.backbone_backward(&f.key_cache, &ds, &mut g);
                    key_mask_backward(model, &f.mask, &f.ids, f.embedded.view(), &s.gold, cfg.tau_g, d_in.view(), &mut g);
                }
                g
            });
            for p in &partials {
                pending.add_scaled(p, 1.0);
            }
            pending_batches += 1;
            if pending_batches == cfg.update {
                apply_params(&mut ens.params, &mut velocity, &mut pending, cfg, opt.rate(cfg), pending_batches);
                pending_batches = 0;
                opt.step += 1;
            }
            epoch_loss += loss;
            batches += 1;
        }
        if pending_batches > 0 {
            apply_params(&mut ens.params, &mut velocity, &mut pending, cfg, opt.rate(cfg), pending_batches);
            pending_batches = 0;
            opt.step += 1;
        }
        last_loss = epoch_loss / batches.max(1) as f64;
        epochs_run = epoch + 1;
        dev_f1 = if dev.is_empty() {
            None
        } else {
            let feats = pooled_features(ens, &dev, mode)?;
            Some(dev_micro_f1(ens, &feats, &dev_gold, 0, cfg)?)
        };
        log.emit(json!({"event": "epoch", "stage": 0, "epoch": epoch + 1, "loss": last_loss, "dev_micro_f1": dev_f1}))?;
        if cfg.early_stop > 0 {
            if let Some(f) = dev_f1 {
                if best.as_ref().is_none_or(|(bf, _)| f > *bf) {
                    best = Some((f, ens.params.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.early_stop {
                        break;
                    }
                }
            }
        }
    }
    if let Some((f, p)) = best {
        ens.params = p;
        dev_f1 = Some(f);
    }
    ens.backbone_frozen = true;
    let samples: Vec<&Sample> = splits.train.iter().map(|&i| &corpus.samples[i]).collect();
    let model = &*ens;
    let own_u: Vec<f64> = parallel::map(&pooled_features(model, &samples, cfg.parallelism())?, cfg.parallelism(), |_, h| {
        expert_evidence(model, h.view(), None).map(|e| opinion_from_evidence(&e).uncertainty)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let report = StageReport {
        stage: 0,
        epochs_run,
        final_loss: last_loss,
        masked_in_fraction: 1.0,
        mean_uncertainty: metrics::mean(&own_u),
        mean_conflict: 0.0,
        dev_micro_f1: dev_f1,
    };
    log.emit(json!({"event": "stage_end", "stage": 0, "report": report}))?;
    Ok(report)
}

fn clip_scale(norm_sq: f64, batches: usize, clip: f64) -> f64 {
    let norm = norm_sq.sqrt() / batches as f64;
    let base = 1.0 / batches as f64;
    if clip > 0.0 && norm > clip {
        base * clip / norm
    } else {
        base
    }
}

fn apply_params(params: &mut Params, velocity: &mut Params, grad: &mut Params, cfg: &TrainConfig, lr: f64, batches: usize) {
    let norm_sq: f64 = grad.tensors().iter().flat_map(|t| t.data.iter()).map(|v| v * v).sum();
    let scale = clip_scale(norm_sq, batches, cfg.clip);
    let g = grad.tensors();
    let mut updates: Vec<Vec<f64>> = Vec::with_capacity(g.len());
    for ((_, v), gt) in velocity.tensors_mut().into_iter().zip(g) {
        for (vi, gi) in v.iter_mut().zip(gt.data) {
            *vi = cfg.momentum * *vi + gi * scale;
        }
        updates.push(v.to_vec());
    }
    for ((_, p), u) in params.tensors_mut().into_iter().zip(updates) {
        // Adapters stay untouched during the backbone stage.
        for (pi, ui) in p.iter_mut().zip(u) {
            *pi -= lr * ui;
        }
    }
    for (_, t) in grad.tensors_mut() {
        t.fill(0.0);
    }
}

/// Cached inputs of an expert stage.
pub struct StageFeatures {
    pub indices: Vec<usize>,
    pub real: Vec<Array1<f64>>,
    pub gold: Vec<Vec<bool>>,
}

impl StageFeatures {
    pub fn build(ens: &ExpertEnsemble, corpus: &Corpus, indices: &[usize], mode: Parallelism) -> Result<Self> {
        let samples: Vec<&Sample> = indices.iter().map(|&i| &corpus.samples[i]).collect();
        let k = ens.tree.len();
        Ok(Self {
            indices: indices.to_vec(),
            real: pooled_features(ens, &samples, mode)?,
            gold: samples.iter().map(|s| s.label_mask(k)).collect(),
        })
    }
}

struct ExpertSample {
    loss: f64,
    grad: Adapter,
}

/// Train expert `m` (zero-based) on samples whose routing weight exceeds
/// epsilon. Only that expert's adapter changes.
pub fn train_expert_stage(
    m: usize,
    ens: &mut ExpertEnsemble,
    corpus: &Corpus,
    train: &StageFeatures,
    dev: &StageFeatures,
    cfg: &TrainConfig,
    log: &mut RunLog,
) -> Result<StageReport> {
    if m >= ens.num_experts() {
        return Err(UmeError::InvalidExpert { index: m, count: ens.num_experts() });
    }
    let stage = m + 1;
    let mode = cfg.parallelism();
    let k = ens.tree.len();
    log.emit(json!({"event": "stage_start", "stage": stage, "kind": "expert", "expert": stage}))?;
    let pairs: Vec<(usize, &Sample)> = train.indices.iter().map(|&i| (i, &corpus.samples[i])).collect();
    let key = key_features(ens, &pairs, cfg, stage as u64, 0)?;
    // Predecessors are frozen, so routing is fixed for the whole stage.
    let routing = compute_routing(ens, &train.real, stage, cfg.epsilon, mode)?;
    let open: Vec<bool> = routing.last_mask();
    let masked_in = open.iter().filter(|&&o| o).count();
    let masked_in_fraction = masked_in as f64 / open.len().max(1) as f64;
    let mean_conflict = metrics::mean(&routing.conflicts.iter().map(|c| c.last().copied().unwrap_or(0.0)).collect::<Vec<_>>());
    let schedule = cfg.schedule();
    let d = ens.config.hidden;
    let mut velocity = Adapter::zeros(ens.config.rank, d);
    let mut pending = Adapter::zeros(ens.config.rank, d);
    let mut pending_batches = 0usize;
    let mut opt = Sgd { step: 0, base: cfg.expert_lr };
    let mut order: Vec<usize> = (0..train.indices.len()).collect();
    let mut last_loss = 0.0;
    let mut best: Option<(f64, Adapter)> = None;
    let mut stale = 0;
    let mut epochs_run = 0;
    let mut dev_f1 = None;
    if masked_in == 0 {
        log::warn!("stage {stage}: no sample passes the routing mask; adapter left untouched");
    }
    for epoch in 0..cfg.epochs {
        if masked_in == 0 {
            break;
        }
        let lambda = anneal(epoch + 1, schedule);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, stage as u64, 1, epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (bi, batch) in order.chunks(cfg.batch).enumerate() {
            let b = batch.len() as f64;
            let active: Vec<usize> = batch.iter().copied().filter(|&i| open[i]).collect();
            if active.is_empty() {
                continue;
            }
            let model = &*ens;
            let n = active.len();
            let outs = parallel::map(&active, mode, |_, &i| -> Result<_> {
                let r = model.head_forward(train.real[i].view(), Some(m))?;
                let kk = model.head_forward(key[i].view(), Some(m))?;
                Ok((r, kk))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let mut rows = Vec::with_capacity(2 * n * d);
            for (r, _) in &outs {
                rows.extend(r.z.iter());
            }
            for (_, kk) in &outs {
                rows.extend(kk.z.iter());
            }
            let partner: Vec<usize> = (0..2 * n).map(|i| if i < n { i + n } else { i - n }).collect();
            let cl = ntxent_loss(&rows, d, &partner, cfg.tau)?;
            // The contrastive mean is charged once per routed sample.
            let cl_scale = n as f64 / b;
            let per: Vec<ExpertSample> = parallel::map_range(n, mode, |j| -> Result<ExpertSample> {
                let i = active[j];
                let (r, kk) = &outs[j];
                let y = &train.gold[i];
                let logits = r.logits.as_slice().unwrap();
                let ev = evidence_from_logits(logits)?;
                let ml = marginal_likelihood_loss(&ev, y)?;
                let kl = evidence_kl_loss(&ev, y)?;
                let bce = bce_with_logits(logits, y)?;
                let bce_key = bce_with_logits(kk.logits.as_slice().unwrap(), y)?;
                let d_real: Array1<f64> = (0..k)
                    .map(|c| ((ml.gradient[c] + lambda * kl.gradient[c]) * sigmoid(logits[c]) + bce.gradient[c]) / b)
                    .collect();
                let d_key = Array1::from(bce_key.gradient) / b;
                let dz_real = Array1::from(cl.gradient[j * d..(j + 1) * d].to_vec()) * cl_scale;
                let dz_key = Array1::from(cl.gradient[(j + n) * d..(j + n + 1) * d].to_vec()) * cl_scale;
                let mut g = model.adapter_backward(m, r, d_real.view(), Some(dz_real.view()));
                g.add_scaled(&model.adapter_backward(m, kk, d_key.view(), Some(dz_key.view())), 1.0);
                Ok(ExpertSample { loss: ml.value + lambda * kl.value + bce.value + bce_key.value, grad: g })
            })
            .into_iter()
            .collect::<Result<_>>()?;
            let loss = per.iter().map(|p| p.loss).sum::<f64>() / b + cl.value * cl_scale;
            check_finite(loss, stage, epoch, bi)?;
            for p in &per {
                pending.add_scaled(&p.grad, 1.0);
            }
            pending_batches += 1;
            if pending_batches == cfg.update {
                apply_adapter(&mut ens.params.adapters[m], &mut velocity, &mut pending, cfg, opt.rate(cfg), pending_batches);
                pending_batches = 0;
                opt.step += 1;
            }
            epoch_loss += loss;
            batches += 1;
        }
        if pending_batches > 0 {
            apply_adapter(&mut ens.params.adapters[m], &mut velocity, &mut pending, cfg, opt.rate(cfg), pending_batches);
            pending_batches = 0;
            opt.step += 1;
        }
        last_loss = epoch_loss / batches.max(1) as f64;
        epochs_run = epoch + 1;
        dev_f1 = if dev.indices.is_empty() { None } else { Some(dev_micro_f1(ens, &dev.real, &dev.gold, stage, cfg)?) };
        log.emit(json!({
            "event": "epoch",
            "stage": stage,
            "epoch": epoch + 1,
            "loss": last_loss,
            "lambda": lambda,
            "masked_in_fraction": masked_in_fraction,
            "mean_conflict": mean_conflict,
            "dev_micro_f1": dev_f1,
        }))?;
        if cfg.early_stop > 0 {
            if let Some(f) = dev_f1 {
                if best.as_ref().is_none_or(|(bf, _)| f > *bf) {
                    best = Some((f, ens.params.adapters[m].clone()));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.early_stop {
                        break;
                    }
                }
            }
        }
    }
    if let Some((f, a)) = best {
        ens.params.adapters[m] = a;
        dev_f1 = Some(f);
    }
    let own_u: Vec<f64> = parallel::map(&train.real, mode, |_, h| {
        expert_evidence(ens, h.view(), Some(m)).map(|e| opinion_from_evidence(&e).uncertainty)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let report = StageReport {
        stage,
        epochs_run,
        final_loss: last_loss,
        masked_in_fraction,
        mean_uncertainty: metrics::mean(&own_u),
        mean_conflict,
        dev_micro_f1: dev_f1,
    };
    log.emit(json!({"event": "stage_end", "stage": stage, "report": report}))?;
    Ok(report)
}

fn apply_adapter(a: &mut Adapter, v: &mut Adapter, g: &mut Adapter, cfg: &TrainConfig, lr: f64, batches: usize) {
    let norm_sq = g.a.iter().chain(g.b.iter()).map(|v| v * v).sum();
    let scale = clip_scale(norm_sq, batches, cfg.clip);
    v.a.zip_mut_with(&g.a, |vi, &gi| *vi = cfg.momentum * *vi + gi * scale);
    v.b.zip_mut_with(&g.b, |vi, &gi| *vi = cfg.momentum * *vi + gi * scale);
    a.a.scaled_add(-lr, &v.a);
    a.b.scaled_add(-lr, &v.b);
    g.a.fill(0.0);
    g.b.fill(0.0);
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub ensemble: ExpertEnsemble,
    pub reports: Vec<StageReport>,
}

/// Backbone stage followed by every expert stage.
pub fn train(
    corpus: &Corpus,
    tree: &LabelTree,
    splits: &SplitManifest,
    cfg: &TrainConfig,
    log: &mut RunLog,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    splits.validate(corpus.len())?;
    let mut ens = ExpertEnsemble::new(cfg.model_config(tree.len()), tree.clone())?;
    log.emit(json!({"event": "config", "config": cfg}))?;
    let mut reports = vec![train_backbone(&mut ens, corpus, splits, cfg, log)?];
    let mode = cfg.parallelism();
    let train_feats = StageFeatures::build(&ens, corpus, &splits.train, mode)?;
    let dev_feats = StageFeatures::build(&ens, corpus, &splits.dev, mode)?;
    for m in 0..cfg.experts {
        reports.push(train_expert_stage(m, &mut ens, corpus, &train_feats, &dev_feats, cfg, log)?);
    }
    Ok(TrainOutcome { ensemble: ens, reports })
}

/// Options for [`evaluate`].
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub buckets: BucketScheme,
    pub tail_sizes: Vec<usize>,
    pub ignore_empty: bool,
    pub thresholds: Vec<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            buckets: BucketScheme::Level,
            tail_sizes: Vec::new(),
            ignore_empty: false,
            thresholds: vec![0.5, 0.6, 2.0 / 3.0, 0.7, 0.75, 0.8, 0.9],
        }
    }
}

/// Per-sample evaluation outputs kept for analysis.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub predicted: Vec<Vec<bool>>,
    pub gold: Vec<Vec<bool>>,
    pub traces: Vec<FusionTrace>,
    /// Conflict-propagated weights and conflicts over all experts,
    /// independent of the fusion mode used for prediction.
    pub routing: Vec<FusionTrace>,
}

pub fn predict_split(
    ens: &ExpertEnsemble,
    corpus: &Corpus,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<Predictions> {
    let mode = cfg.parallelism();
    let samples: Vec<&Sample> = indices.iter().map(|&i| &corpus.samples[i]).collect();
    let feats = pooled_features(ens, &samples, mode)?;
    let k = ens.tree.len();
    let m = ens.num_experts();
    let rows = parallel::map(&feats, mode, |_, h| -> Result<_> {
        let evs = (0..m).map(|j| expert_evidence(ens, h.view(), Some(j))).collect::<Result<Vec<_>>>()?;
        let trace = fuse(&evs, cfg.eta, cfg.fusion_mode)?;
        let routing = if cfg.fusion_mode == FusionMode::Dst { trace.clone() } else { fuse(&evs, cfg.eta, FusionMode::Dst)? };
        let pred = threshold_labels(&trace.probabilities, cfg.threshold);
        Ok((pred, trace, routing))
    });
    let mut out = Predictions { predicted: vec![], gold: vec![], traces: vec![], routing: vec![] };
    for (r, s) in rows.into_iter().zip(&samples) {
        let (p, t, rt) = r?;
        out.predicted.push(p);
        out.traces.push(t);
        out.routing.push(rt);
        out.gold.push(s.label_mask(k));
    }
    Ok(out)
}

/// Full evaluation report on a split.
pub fn evaluate(
    ens: &ExpertEnsemble,
    corpus: &Corpus,
    indices: &[usize],
    split_name: &str,
    cfg: &TrainConfig,
    opts: &EvalOptions,
) -> Result<(EvalReport, Predictions)> {
    let preds = predict_split(ens, corpus, indices, cfg)?;
    let f1 = metrics::micro_macro_f1(&preds.predicted, &preds.gold, opts.ignore_empty)?;
    let tree = &ens.tree;
    let tail = opts
        .tail_sizes
        .iter()
        .map(|&n| {
            metrics::tail_macro_f1(&preds.predicted, &preds.gold, tree.train_counts(), tree.names(), n, opts.ignore_empty)
                .map(|v| (n, v))
        })
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<Sample> = indices.iter().map(|&i| corpus.samples[i].clone()).collect();
    let buckets = assign_buckets(&samples, tree, opts.buckets);
    let weights: Vec<Vec<f64>> = preds.routing.iter().map(|t| t.weights.clone()).collect();
    let participation = metrics::participation(&weights, &buckets)?
        .into_iter()
        .map(|(b, v)| (b.as_str().to_string(), v))
        .collect();
    let correct: Vec<bool> = preds.predicted.iter().zip(&preds.gold).map(|(p, g)| p == g).collect();
    let max_c: Vec<f64> = preds.routing.iter().map(|t| t.max_conflict()).collect();
    let bins = metrics::conflict_error_bins(&max_c, &correct)?;
    let (hi_c, hi_err): (Vec<f64>, Vec<f64>) = max_c
        .iter()
        .zip(&correct)
        .filter(|(&c, _)| c >= 0.2)
        .map(|(&c, &ok)| (c, if ok { 0.0 } else { 1.0 }))
        .unzip();
    let last_w: Vec<f64> = preds.routing.iter().map(|t| *t.weights.last().unwrap()).collect();
    let last_c: Vec<f64> = preds.routing.iter().map(|t| t.last_conflict()).collect();
    let probs: Vec<Vec<f64>> = preds.traces.iter().map(|t| t.probabilities.clone()).collect();
    let report = EvalReport {
        split: split_name.to_string(),
        fusion_mode: cfg.fusion_mode.to_string(),
        experts: ens.num_experts(),
        samples: indices.len(),
        micro_f1: f1.micro,
        macro_f1: f1.macro_f1,
        per_class: f1.per_class,
        label_names: tree.names().to_vec(),
        tail_macro_f1: tail,
        participation,
        conflict_bins: bins,
        conflict_error_spearman: metrics::spearman(&hi_c, &hi_err),
        last_expert_utilization: metrics::utilization(&last_w, 0.5),
        avg_last_conflict: metrics::mean(&last_c),
        threshold_sweep: metrics::threshold_sweep(&probs, &preds.gold, &opts.thresholds)?,
    };
    Ok((report, preds))
}
