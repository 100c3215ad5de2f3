//! Tiny transformer encoder with a frozen-able backbone, per-expert low-rank
//! adapters on the final feed-forward sublayer, a label-tree encoder, and
//! label-guided key-token masking.
//!
//! Row-vector convention throughout the backbone (`y = x W`). The heads use
//! column convention to match their usual statement (`logits = W_c h + b_c`).
//! Backpropagation is written out by hand; see the finite-difference tests
//! at the bottom of this file.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{LabelTree, CLS_TOKEN, PAD_TOKEN};
use crate::error::{Result, UmeError};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub rank: usize,
    pub experts: usize,
    pub num_labels: usize,
    /// Message-passing rounds over the label tree.
    pub label_rounds: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(num_labels: usize) -> Self {
        Self {
            vocab_size: 256,
            hidden: 64,
            blocks: 2,
            heads: 4,
            ffn_hidden: 128,
            rank: 8,
            experts: 3,
            num_labels,
            label_rounds: 2,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(UmeError::InvalidArgument(m));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden size {} must be a positive multiple of heads {}", self.hidden, self.heads));
        }
        if self.rank == 0 || self.rank > self.hidden {
            return bad(format!("adapter rank {} must be in 1..={}", self.rank, self.hidden));
        }
        if self.experts == 0 {
            return bad("at least one expert is required".into());
        }
        if self.vocab_size <= CLS_TOKEN as usize + 1 || self.num_labels == 0 || self.ffn_hidden == 0 {
            return bad("vocab, label count and ffn width must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Low-rank pair; the expert's delta is `B (A h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    /// `rank x hidden`
    pub a: Array2<f64>,
    /// `hidden x rank`
    pub b: Array2<f64>,
}

impl Adapter {
    pub fn zeros(rank: usize, hidden: usize) -> Self {
        Self { a: Array2::zeros((rank, hidden)), b: Array2::zeros((hidden, rank)) }
    }

    pub fn add_scaled(&mut self, other: &Adapter, scale: f64) {
        self.a.scaled_add(scale, &other.a);
        self.b.scaled_add(scale, &other.b);
    }
}

/// Every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Array2<f64>,
    pub blocks: Vec<Block>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    /// Final feed-forward sublayer, `hidden x hidden`.
    pub w0: Array2<f64>,
    pub b0: Array1<f64>,
    pub adapters: Vec<Adapter>,
    /// `labels x hidden`
    pub cls_w: Array2<f64>,
    pub cls_b: Array1<f64>,
    pub proj_w1: Array2<f64>,
    pub proj_w2: Array2<f64>,
    /// `labels x hidden`, before tree propagation.
    pub label_emb: Array2<f64>,
}

/// Borrowed view of one named tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

macro_rules! block_tensors {
    ($b:expr, $i:expr, $push:ident, $as:ident) => {
        $push.push((format!("block{}.ln1_g", $i), $b.ln1_g.shape().to_vec(), $b.ln1_g.$as().unwrap()));
        $push.push((format!("block{}.ln1_b", $i), $b.ln1_b.shape().to_vec(), $b.ln1_b.$as().unwrap()));
        $push.push((format!("block{}.wq", $i), $b.wq.shape().to_vec(), $b.wq.$as().unwrap()));
        $push.push((format!("block{}.wk", $i), $b.wk.shape().to_vec(), $b.wk.$as().unwrap()));
        $push.push((format!("block{}.wv", $i), $b.wv.shape().to_vec(), $b.wv.$as().unwrap()));
        $push.push((format!("block{}.wo", $i), $b.wo.shape().to_vec(), $b.wo.$as().unwrap()));
        $push.push((format!("block{}.ln2_g", $i), $b.ln2_g.shape().to_vec(), $b.ln2_g.$as().unwrap()));
        $push.push((format!("block{}.ln2_b", $i), $b.ln2_b.shape().to_vec(), $b.ln2_b.$as().unwrap()));
        $push.push((format!("block{}.w1", $i), $b.w1.shape().to_vec(), $b.w1.$as().unwrap()));
        $push.push((format!("block{}.b1", $i), $b.b1.shape().to_vec(), $b.b1.$as().unwrap()));
        $push.push((format!("block{}.w2", $i), $b.w2.shape().to_vec(), $b.w2.$as().unwrap()));
        $push.push((format!("block{}.b2", $i), $b.b2.shape().to_vec(), $b.b2.$as().unwrap()));
    };
}

macro_rules! all_tensors {
    ($p:expr, $push:ident, $as:ident, $iter:ident) => {
        $push.push(("tok_emb".to_string(), $p.tok_emb.shape().to_vec(), $p.tok_emb.$as().unwrap()));
        for (i, b) in $p.blocks.$iter().enumerate() {
            block_tensors!(b, i, $push, $as);
        }
        $push.push(("final.ln_g".to_string(), $p.lnf_g.shape().to_vec(), $p.lnf_g.$as().unwrap()));
        $push.push(("final.ln_b".to_string(), $p.lnf_b.shape().to_vec(), $p.lnf_b.$as().unwrap()));
        $push.push(("final.w0".to_string(), $p.w0.shape().to_vec(), $p.w0.$as().unwrap()));
        $push.push(("final.b0".to_string(), $p.b0.shape().to_vec(), $p.b0.$as().unwrap()));
        for (m, a) in $p.adapters.$iter().enumerate() {
            $push.push((format!("adapter{m}.a"), a.a.shape().to_vec(), a.a.$as().unwrap()));
            $push.push((format!("adapter{m}.b"), a.b.shape().to_vec(), a.b.$as().unwrap()));
        }
        $push.push(("cls.w".to_string(), $p.cls_w.shape().to_vec(), $p.cls_w.$as().unwrap()));
        $push.push(("cls.b".to_string(), $p.cls_b.shape().to_vec(), $p.cls_b.$as().unwrap()));
        $push.push(("proj.w1".to_string(), $p.proj_w1.shape().to_vec(), $p.proj_w1.$as().unwrap()));
        $push.push(("proj.w2".to_string(), $p.proj_w2.shape().to_vec(), $p.proj_w2.$as().unwrap()));
        $push.push(("label_emb".to_string(), $p.label_emb.shape().to_vec(), $p.label_emb.$as().unwrap()));
    };
}

impl Params {
    /// All tensors in a fixed order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        all_tensors!(self, out, as_slice, iter);
        out.into_iter().map(|(name, shape, data)| TensorRef { name, shape, data }).collect()
    }

    /// Mutable slices of all tensors, in the same order as [`Params::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, Vec<usize>, &mut [f64])> = Vec::new();
        all_tensors!(self, out, as_slice_mut, iter_mut);
        out.into_iter().map(|(name, _, data)| (name, data)).collect()
    }

    pub fn zeros_like(&self) -> Params {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        let src = other.tensors();
        for ((_, dst), s) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s.data) {
                *d += scale * v;
            }
        }
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| n.sample(rng))
}

/// Sinusoidal position term for position `pos`, column `j` of width `d`.
fn position_term(pos: usize, j: usize, d: usize) -> f64 {
    let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
    let angle = pos as f64 * freq;
    if j % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Row-stochastic propagation matrix for `rounds` rounds of mean
/// aggregation over each label and its tree neighbors.
pub fn label_propagation_matrix(tree: &LabelTree, rounds: usize) -> Array2<f64> {
    let k = tree.len();
    let mut step = Array2::<f64>::zeros((k, k));
    for (i, nb) in tree.neighbors().iter().enumerate() {
        let w = 1.0 / (nb.len() + 1) as f64;
        step[[i, i]] += w;
        for &j in nb {
            step[[i, j]] += w;
        }
    }
    let mut out = Array2::<f64>::eye(k);
    for _ in 0..rounds {
        out = step.dot(&out);
    }
    out
}

/// Encode label embeddings through the tree: each round replaces every
/// label's embedding by the mean over itself and its neighbors.
pub fn label_tree_encode(tree: &LabelTree, raw: &Array2<f64>, rounds: usize) -> Result<Array2<f64>> {
    if raw.nrows() != tree.len() {
        return Err(UmeError::DimensionMismatch { expected: tree.len(), found: raw.nrows() });
    }
    let neighbors = tree.neighbors();
    let mut cur = raw.clone();
    for _ in 0..rounds {
        let mut next = cur.clone();
        for (i, nb) in neighbors.iter().enumerate() {
            let mut row = next.row_mut(i);
            for &j in nb {
                row += &cur.row(j);
            }
            let w = (nb.len() + 1) as f64;
            row.mapv_inplace(|v| v / w);
        }
        cur = next;
    }
    Ok(cur)
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mu = row.sum() / d;
        row.mapv_inplace(|v| v - mu);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let dxhat = dy * g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let sum = dh.sum();
        let dot = dh.dot(&xh);
        let inv = cache.inv_std[i];
        let mut out = dx.row_mut(i);
        Zip::from(&mut out).and(&dh).and(&xh).for_each(|o, &a, &x| {
            *o = inv / d * (d * a - sum - x * dot);
        });
    }
    dx
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

struct BlockCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    f: Array2<f64>,
    u: Array2<f64>,
    r: Array2<f64>,
}

/// Intermediates of one backbone pass, kept for backpropagation.
pub struct FeatureCache {
    ids: Vec<u32>,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
}

/// Intermediates of the final sublayer and heads for one pooled state.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// Pre-adapter pooled feature.
    pub h: Array1<f64>,
    /// `A h` when an expert is active.
    pub ah: Option<Array1<f64>>,
    pub h_out: Array1<f64>,
    pub logits: Array1<f64>,
    pub proj_pre: Array1<f64>,
    pub z: Array1<f64>,
}

/// Gradients reaching the backbone-stage head parameters.
pub struct TokenMaskResult {
    /// Per position of the input (including the leading classification token).
    pub kept: Vec<bool>,
    pub masked: Vec<u32>,
    /// `positions x labels` sampling probabilities.
    pub probs: Array2<f64>,
}

/// Frozen-able backbone plus expert adapters and shared heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertEnsemble {
    pub config: ModelConfig,
    pub params: Params,
    pub tree: LabelTree,
    propagation: Array2<f64>,
    pub backbone_frozen: bool,
}

impl ExpertEnsemble {
    pub fn new(config: ModelConfig, tree: LabelTree) -> Result<Self> {
        config.validate()?;
        if tree.len() != config.num_labels {
            return Err(UmeError::DimensionMismatch { expected: config.num_labels, found: tree.len() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let d = config.hidden;
        let f = config.ffn_hidden;
        let sd = 1.0 / (d as f64).sqrt();
        let sf = 1.0 / (f as f64).sqrt();
        let tok_emb = normal_matrix(&mut rng, config.vocab_size, d, 1.0);
        let blocks = (0..config.blocks)
            .map(|_| Block {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                wq: normal_matrix(&mut rng, d, d, sd),
                wk: normal_matrix(&mut rng, d, d, sd),
                wv: normal_matrix(&mut rng, d, d, sd),
                wo: normal_matrix(&mut rng, d, d, sd),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w1: normal_matrix(&mut rng, d, f, sd),
                b1: Array1::zeros(f),
                w2: normal_matrix(&mut rng, f, d, sf),
                b2: Array1::zeros(d),
            })
            .collect();
        let w0 = normal_matrix(&mut rng, d, d, 0.5 * sd);
        let adapters = (0..config.experts)
            .map(|_| Adapter {
                a: normal_matrix(&mut rng, config.rank, d, sd),
                b: Array2::zeros((d, config.rank)),
            })
            .collect();
        let k = config.num_labels;
        let params = Params {
            tok_emb,
            blocks,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            w0,
            b0: Array1::zeros(d),
            adapters,
            cls_w: normal_matrix(&mut rng, k, d, sd),
            cls_b: Array1::from_elem(k, -2.0),
            proj_w1: normal_matrix(&mut rng, d, d, sd),
            proj_w2: normal_matrix(&mut rng, d, d, sd),
            label_emb: normal_matrix(&mut rng, k, d, 1.0),
        };
        let propagation = label_propagation_matrix(&tree, config.label_rounds);
        Ok(Self { config, params, tree, propagation, backbone_frozen: false })
    }

    /// Rebuild from stored parameters.
    pub fn from_parts(config: ModelConfig, params: Params, tree: LabelTree, backbone_frozen: bool) -> Result<Self> {
        let template = Self::new(config.clone(), tree.clone())?;
        let shapes: Vec<_> = template.params.tensors().iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
        let got: Vec<_> = params.tensors().iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
        if shapes != got {
            return Err(UmeError::CorruptCheckpoint("parameter layout does not match config".into()));
        }
        let propagation = label_propagation_matrix(&tree, config.label_rounds);
        Ok(Self { config, params, tree, propagation, backbone_frozen })
    }

    pub fn num_experts(&self) -> usize {
        self.config.experts
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Parameters contributed by one expert's adapter.
    pub fn adapter_param_count(&self) -> usize {
        2 * self.config.rank * self.config.hidden
    }

    fn check_expert(&self, m: usize) -> Result<()> {
        if m >= self.config.experts {
            return Err(UmeError::InvalidExpert { index: m, count: self.config.experts });
        }
        Ok(())
    }

    /// Add an untrained expert (zero `B`, Gaussian `A`).
    pub fn push_expert(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.hidden;
        self.params.adapters.push(Adapter {
            a: normal_matrix(&mut rng, self.config.rank, d, 1.0 / (d as f64).sqrt()),
            b: Array2::zeros((d, self.config.rank)),
        });
        self.config.experts += 1;
    }

    /// Keep only the first `m` experts.
    pub fn truncate_experts(&mut self, m: usize) -> Result<()> {
        if m == 0 || m > self.config.experts {
            return Err(UmeError::InvalidExpert { index: m, count: self.config.experts });
        }
        self.params.adapters.truncate(m);
        self.config.experts = m;
        Ok(())
    }

    /// Token embeddings plus sinusoidal position terms, `N x hidden`.
    pub fn embed(&self, ids: &[u32]) -> Result<Array2<f64>> {
        let d = self.config.hidden;
        let mut h = Array2::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= self.config.vocab_size {
                return Err(UmeError::OutOfVocabulary { id, vocab: self.config.vocab_size });
            }
            let mut row = h.row_mut(i);
            row.assign(&self.params.tok_emb.row(id as usize));
            for (j, v) in row.iter_mut().enumerate() {
                *v += position_term(i, j, d);
            }
        }
        Ok(h)
    }

    /// Prepend the classification token to content tokens.
    pub fn with_cls(tokens: &[u32]) -> Vec<u32> {
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(CLS_TOKEN);
        ids.extend_from_slice(tokens);
        ids
    }

    /// Run the transformer blocks and final layer norm. Returns all token
    /// states and the cache.
    pub fn backbone_forward(&self, ids: &[u32]) -> Result<(Array2<f64>, FeatureCache)> {
        let mut x = self.embed(ids)?;
        let d = self.config.hidden;
        let heads = self.config.heads;
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut caches = Vec::with_capacity(self.params.blocks.len());
        for blk in &self.params.blocks {
            let (a, ln1) = layer_norm(&x, &blk.ln1_g, &blk.ln1_b);
            let q = a.dot(&blk.wq);
            let k = a.dot(&blk.wk);
            let v = a.dot(&blk.wv);
            let n = x.nrows();
            let mut o = Array2::zeros((n, d));
            let mut probs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let cols = s![.., hd * dk..(hd + 1) * dk];
                let mut p = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                softmax_rows(&mut p);
                o.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
                probs.push(p);
            }
            x = x + o.dot(&blk.wo);
            let (f, ln2) = layer_norm(&x, &blk.ln2_g, &blk.ln2_b);
            let u = f.dot(&blk.w1) + &blk.b1;
            let r = u.mapv(|v| v.max(0.0));
            x = x + r.dot(&blk.w2) + &blk.b2;
            caches.push(BlockCache { ln1, a, q, k, v, probs, o, ln2, f, u, r });
        }
        let (states, lnf) = layer_norm(&x, &self.params.lnf_g, &self.params.lnf_b);
        Ok((states, FeatureCache { ids: ids.to_vec(), blocks: caches, lnf }))
    }

    /// Pooled pre-adapter feature (first position) for content tokens.
    pub fn features(&self, tokens: &[u32]) -> Result<Array1<f64>> {
        let ids = Self::with_cls(tokens);
        let (states, _) = self.backbone_forward(&ids)?;
        Ok(states.row(0).to_owned())
    }

    /// Backpropagate `d_states` (gradient on the final token states) into
    /// backbone parameters. Returns the gradient on the embedded input.
    pub fn backbone_backward(&self, cache: &FeatureCache, d_states: &Array2<f64>, grads: &mut Params) -> Array2<f64> {
        let d = self.config.hidden;
        let heads = self.config.heads;
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut dx = {
            let p = &self.params;
            let (g, b) = (&mut grads.lnf_g, &mut grads.lnf_b);
            layer_norm_backward(d_states, &cache.lnf, &p.lnf_g, g, b)
        };
        for (bi, (blk, c)) in self.params.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let gb = &mut grads.blocks[bi];
            // feed-forward
            gb.w2 += &c.r.t().dot(&dx);
            gb.b2 += &dx.sum_axis(Axis(0));
            let mut du = dx.dot(&blk.w2.t());
            Zip::from(&mut du).and(&c.u).for_each(|g, &u| {
                if u <= 0.0 {
                    *g = 0.0;
                }
            });
            gb.w1 += &c.f.t().dot(&du);
            gb.b1 += &du.sum_axis(Axis(0));
            let df = du.dot(&blk.w1.t());
            dx += &layer_norm_backward(&df, &c.ln2, &blk.ln2_g, &mut gb.ln2_g, &mut gb.ln2_b);
            // attention
            gb.wo += &c.o.t().dot(&dx);
            let d_o = dx.dot(&blk.wo.t());
            let n = d_o.nrows();
            let mut dq = Array2::zeros((n, d));
            let mut dkm = Array2::zeros((n, d));
            let mut dv = Array2::zeros((n, d));
            for hd in 0..heads {
                let cols = s![.., hd * dk..(hd + 1) * dk];
                let p = &c.probs[hd];
                let doh = d_o.slice(cols);
                let dp = doh.dot(&c.v.slice(cols).t());
                dv.slice_mut(cols).assign(&p.t().dot(&doh));
                let mut ds = dp;
                for (mut dsr, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dotp = dsr.dot(&pr);
                    Zip::from(&mut dsr).and(&pr).for_each(|g, &pv| *g = pv * (*g - dotp) * scale);
                }
                dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
                dkm.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
            }
            gb.wq += &c.a.t().dot(&dq);
            gb.wk += &c.a.t().dot(&dkm);
            gb.wv += &c.a.t().dot(&dv);
            let da = dq.dot(&blk.wq.t()) + dkm.dot(&blk.wk.t()) + dv.dot(&blk.wv.t());
            dx += &layer_norm_backward(&da, &c.ln1, &blk.ln1_g, &mut gb.ln1_g, &mut gb.ln1_b);
        }
        for (i, &id) in cache.ids.iter().enumerate() {
            let mut row = grads.tok_emb.row_mut(id as usize);
            row += &dx.row(i);
        }
        dx
    }

    /// Final sublayer and both heads on a pooled feature `h`.
    pub fn head_forward(&self, h: ArrayView1<f64>, expert: Option<usize>) -> Result<HeadOutput> {
        if let Some(m) = expert {
            self.check_expert(m)?;
        }
        let p = &self.params;
        let mut h_out = &h + &h.dot(&p.w0) + &p.b0;
        let ah = expert.map(|m| {
            let ad = &p.adapters[m];
            let ah = ad.a.dot(&h);
            h_out += &ad.b.dot(&ah);
            ah
        });
        let logits = p.cls_w.dot(&h_out) + &p.cls_b;
        let proj_pre = p.proj_w1.dot(&h_out);
        let z = p.proj_w2.dot(&proj_pre.mapv(|v| v.max(0.0)));
        Ok(HeadOutput { h: h.to_owned(), ah, h_out, logits, proj_pre, z })
    }

    /// Same sublayer with every expert's delta summed into one pass.
    pub fn head_forward_summed(&self, h: ArrayView1<f64>) -> Array1<f64> {
        let p = &self.params;
        let mut h_out = &h + &h.dot(&p.w0) + &p.b0;
        for ad in &p.adapters {
            h_out += &ad.b.dot(&ad.a.dot(&h));
        }
        h_out
    }

    fn d_h_out(&self, out: &HeadOutput, d_logits: ArrayView1<f64>, d_z: Option<ArrayView1<f64>>) -> Array1<f64> {
        let p = &self.params;
        let mut dh = p.cls_w.t().dot(&d_logits);
        if let Some(dz) = d_z {
            let mut dpre = p.proj_w2.t().dot(&dz);
            Zip::from(&mut dpre).and(&out.proj_pre).for_each(|g, &v| {
                if v <= 0.0 {
                    *g = 0.0;
                }
            });
            dh += &p.proj_w1.t().dot(&dpre);
        }
        dh
    }

    /// Backbone-stage head gradients (no adapter). Returns `dL/dh`.
    pub fn head_backward(
        &self,
        out: &HeadOutput,
        d_logits: ArrayView1<f64>,
        d_z: Option<ArrayView1<f64>>,
        grads: &mut Params,
    ) -> Array1<f64> {
        let p = &self.params;
        grads.cls_w += &outer(d_logits, out.h_out.view());
        grads.cls_b += &d_logits;
        if let Some(dz) = d_z {
            let relu = out.proj_pre.mapv(|v| v.max(0.0));
            grads.proj_w2 += &outer(dz, relu.view());
            let mut dpre = p.proj_w2.t().dot(&dz);
            Zip::from(&mut dpre).and(&out.proj_pre).for_each(|g, &v| {
                if v <= 0.0 {
                    *g = 0.0;
                }
            });
            grads.proj_w1 += &outer(dpre.view(), out.h_out.view());
        }
        let dh_out = self.d_h_out(out, d_logits, d_z);
        grads.w0 += &outer(out.h.view(), dh_out.view());
        grads.b0 += &dh_out;
        &dh_out + &p.w0.dot(&dh_out)
    }

    /// Gradient on expert `m`'s adapter only.
    pub fn adapter_backward(
        &self,
        m: usize,
        out: &HeadOutput,
        d_logits: ArrayView1<f64>,
        d_z: Option<ArrayView1<f64>>,
    ) -> Adapter {
        let ad = &self.params.adapters[m];
        let ah = out.ah.as_ref().expect("head output computed without an expert");
        let dh_out = self.d_h_out(out, d_logits, d_z);
        let db = outer(dh_out.view(), ah.view());
        let bt = ad.b.t().dot(&dh_out);
        let da = outer(bt.view(), out.h.view());
        Adapter { a: da, b: db }
    }

    /// Full encode: token states and pooled output through expert `m` (or
    /// the backbone only).
    pub fn encode(&self, tokens: &[u32], expert: Option<usize>) -> Result<(Array2<f64>, Array1<f64>)> {
        let ids = Self::with_cls(tokens);
        let (states, _) = self.backbone_forward(&ids)?;
        let out = self.head_forward(states.row(0), expert)?;
        Ok((states, out.h_out))
    }

    /// `W_c h + b_c`.
    pub fn classify(&self, h: ArrayView1<f64>) -> Array1<f64> {
        self.params.cls_w.dot(&h) + &self.params.cls_b
    }

    /// `W_2 relu(W_1 h)`.
    pub fn project(&self, h: ArrayView1<f64>) -> Array1<f64> {
        self.params.proj_w2.dot(&self.params.proj_w1.dot(&h).mapv(|v| v.max(0.0)))
    }

    pub fn label_embeddings(&self) -> Array2<f64> {
        label_tree_encode(&self.tree, &self.params.label_emb, self.config.label_rounds)
            .expect("label table matches tree")
    }

    pub fn propagation(&self) -> &Array2<f64> {
        &self.propagation
    }
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Label-guided key-token selection. `h` is the embedded input
/// (`positions x hidden`), `ids` the token ids it came from. The leading
/// classification position is always kept; other positions are kept when
/// their Gumbel-softmax mass on gold labels exceeds `gamma`.
pub fn key_token_mask(
    h: ArrayView2<f64>,
    ids: &[u32],
    label_embs: ArrayView2<f64>,
    gold: &[usize],
    gamma: f64,
    tau_g: f64,
    rng: &mut impl Rng,
) -> Result<TokenMaskResult> {
    if gold.is_empty() {
        return Err(UmeError::EmptyLabelSet);
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(UmeError::InvalidArgument(format!("gamma must be in (0, 1), got {gamma}")));
    }
    if !(tau_g > 0.0) {
        return Err(UmeError::InvalidArgument(format!("Gumbel temperature must be positive, got {tau_g}")));
    }
    let scale = 1.0 / (h.ncols() as f64).sqrt();
    let mut probs = h.dot(&label_embs.t()) * scale;
    probs.mapv_inplace(|v| {
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        (v - (-u.ln()).ln()) / tau_g
    });
    softmax_rows(&mut probs);
    Ok(mask_from_probs(probs, ids, gold, gamma))
}

/// Apply the keep rule to precomputed sampling probabilities.
pub fn mask_from_probs(probs: Array2<f64>, ids: &[u32], gold: &[usize], gamma: f64) -> TokenMaskResult {
    let mut kept = Vec::with_capacity(ids.len());
    let mut masked = Vec::with_capacity(ids.len());
    for (i, &id) in ids.iter().enumerate() {
        let mass: f64 = gold.iter().map(|&g| probs[[i, g]]).sum();
        let keep = i == 0 || mass > gamma;
        kept.push(keep);
        masked.push(if keep { id } else { PAD_TOKEN });
    }
    TokenMaskResult { kept, masked, probs }
}

/// Straight-through gradient of the key path onto the raw label embeddings.
/// `d_key_input` is the gradient on the embedded masked input; `h` is the
/// embedded unmasked input used for scoring.
pub fn key_mask_backward(
    ens: &ExpertEnsemble,
    mask: &TokenMaskResult,
    ids: &[u32],
    h: ArrayView2<f64>,
    gold: &[usize],
    tau_g: f64,
    d_key_input: ArrayView2<f64>,
    grads: &mut Params,
) {
    let emb = &ens.params.tok_emb;
    let pad = emb.row(PAD_TOKEN as usize);
    let k = mask.probs.ncols();
    let mut d_scores = Array2::<f64>::zeros((ids.len(), k));
    for i in 1..ids.len() {
        let diff = &emb.row(ids[i] as usize) - &pad;
        let ds = d_key_input.row(i).dot(&diff);
        if ds == 0.0 {
            continue;
        }
        let p = mask.probs.row(i);
        let gold_mass: f64 = gold.iter().map(|&g| p[g]).sum();
        let mut row = d_scores.row_mut(i);
        for j in 0..k {
            let dpj = if gold.contains(&j) { ds } else { 0.0 };
            row[j] = p[j] * (dpj - ds * gold_mass) / tau_g;
        }
    }
    let scale = 1.0 / (h.ncols() as f64).sqrt();
    let d_labels = d_scores.t().dot(&h) * scale;
    grads.label_emb += &ens.propagation.t().dot(&d_labels);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error};
    use crate::losses::{bce_with_logits, evidence_kl_loss, marginal_likelihood_loss, ntxent_loss};
    use crate::evidential::{evidence_from_logits, sigmoid};

    fn tree3() -> LabelTree {
        LabelTree::from_edges(&[
            ("r".into(), "a".into()),
            ("r".into(), "b".into()),
            ("a".into(), "a1".into()),
        ])
        .unwrap()
    }

    fn small() -> ExpertEnsemble {
        let mut cfg = ModelConfig::new(4);
        cfg.vocab_size = 20;
        cfg.hidden = 8;
        cfg.heads = 2;
        cfg.ffn_hidden = 12;
        cfg.rank = 3;
        cfg.experts = 2;
        cfg.init_seed = 5;
        ExpertEnsemble::new(cfg, tree3()).unwrap()
    }

    #[test]
    fn embed_examples() {
        let e = small();
        let h = e.embed(&[4, 4]).unwrap();
        let d = &h.row(0) - &h.row(1);
        for j in 0..8 {
            assert!((d[j] - (position_term(0, j, 8) - position_term(1, j, 8))).abs() < 1e-12);
        }
        assert_eq!(e.embed(&[]).unwrap().nrows(), 0);
        assert_eq!(e.embed(&[3, 7]).unwrap(), small().embed(&[3, 7]).unwrap());
        assert!(matches!(e.embed(&[25]), Err(UmeError::OutOfVocabulary { id: 25, .. })));
    }

    #[test]
    fn fresh_experts_match_backbone_bitwise() {
        let e = small();
        let (_, base) = e.encode(&[3, 5, 9], None).unwrap();
        for m in 0..2 {
            let (_, with) = e.encode(&[3, 5, 9], Some(m)).unwrap();
            assert_eq!(base, with);
        }
        assert!(e.encode(&[3], Some(2)).is_err());
        let mut z = e.clone();
        z.params.adapters[0].a.fill(0.0);
        z.params.adapters[0].b.fill(0.3);
        assert_eq!(z.encode(&[3, 5], Some(0)).unwrap().1, z.encode(&[3, 5], None).unwrap().1);
        let mut p = e.clone();
        p.params.adapters[1].b[[2, 1]] = 0.5;
        assert_ne!(p.encode(&[3, 5], Some(1)).unwrap().1, p.encode(&[3, 5], None).unwrap().1);
    }

    #[test]
    fn parameter_ledger() {
        let e = small();
        let mut bigger = e.clone();
        bigger.push_expert(9);
        assert_eq!(bigger.param_count() - e.param_count(), 2 * 3 * 8);
        assert_eq!(e.adapter_param_count(), 2 * 3 * 8);
    }

    #[test]
    fn label_tree_encoder_examples() {
        let t = tree3();
        let raw = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64);
        assert_eq!(label_tree_encode(&t, &raw, 0).unwrap(), raw);
        let single = LabelTree::new(vec!["x".into()], vec![None]).unwrap();
        let one = Array2::from_elem((1, 3), 2.5);
        assert_eq!(label_tree_encode(&single, &one, 4).unwrap(), one);
        // Leaves "b" and "c" under "r" with identical embeddings stay identical.
        let t2 = LabelTree::from_edges(&[("r".into(), "b".into()), ("r".into(), "c".into())]).unwrap();
        let mut e = Array2::zeros((3, 2));
        e.row_mut(0).assign(&ndarray::arr1(&[1.0, -1.0]));
        e.row_mut(1).assign(&ndarray::arr1(&[0.5, 0.5]));
        e.row_mut(2).assign(&ndarray::arr1(&[0.5, 0.5]));
        let out = label_tree_encode(&t2, &e, 2).unwrap();
        assert_eq!(out.row(1), out.row(2));
    }

    #[test]
    fn classify_and_project_examples() {
        let mut e = small();
        e.params.cls_w.fill(0.0);
        e.params.cls_b.fill(0.0);
        let logits = e.classify(Array1::from_elem(8, 1.3).view());
        assert!(logits.iter().all(|&v| sigmoid(v) == 0.5));
        let e = small();
        assert_eq!(e.classify(Array1::zeros(8).view()), e.params.cls_b);
        assert!(e.project(Array1::zeros(8).view()).iter().all(|&v| v == 0.0));
        // Identity projection on [1, -1].
        let mut tiny = ModelConfig::new(1);
        tiny.hidden = 2;
        tiny.heads = 1;
        tiny.rank = 1;
        tiny.vocab_size = 4;
        let single = LabelTree::new(vec!["x".into()], vec![None]).unwrap();
        let mut t = ExpertEnsemble::new(tiny, single).unwrap();
        t.params.proj_w1 = Array2::eye(2);
        t.params.proj_w2 = Array2::eye(2);
        assert_eq!(t.project(ndarray::arr1(&[1.0, -1.0]).view()).to_vec(), vec![1.0, 0.0]);
        t.params.proj_w1 = -Array2::eye(2);
        assert!(t.project(ndarray::arr1(&[1.0, 1.0]).view()).iter().all(|&v| v == 0.0));
        // 1x1 affine: W_c = [[2]], b_c = [1], h = [3] -> 7
        let mut tiny = ModelConfig::new(1);
        tiny.hidden = 1;
        tiny.heads = 1;
        tiny.rank = 1;
        tiny.vocab_size = 4;
        let single = LabelTree::new(vec!["x".into()], vec![None]).unwrap();
        let mut t = ExpertEnsemble::new(tiny, single).unwrap();
        t.params.cls_w = ndarray::arr2(&[[2.0]]);
        t.params.cls_b = ndarray::arr1(&[1.0]);
        assert_eq!(t.classify(ndarray::arr1(&[3.0]).view()).to_vec(), vec![7.0]);
    }

    #[test]
    fn key_token_mask_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = small();
        let ids = ExpertEnsemble::with_cls(&[3, 4, 5, 6]);
        let h = e.embed(&ids).unwrap();
        let labels = e.label_embeddings();
        let m = key_token_mask(h.view(), &ids, labels.view(), &[0, 1], 1e-12, 1.0, &mut rng).unwrap();
        assert!(m.kept.iter().all(|&k| k));
        let m = key_token_mask(h.view(), &ids, labels.view(), &[0, 1], 1.0 - 1e-12, 1.0, &mut rng).unwrap();
        assert!(m.kept[1..].iter().all(|&k| !k));
        assert!(m.masked[1..].iter().all(|&t| t == PAD_TOKEN));
        assert!(key_token_mask(h.view(), &ids, labels.view(), &[], 0.5, 1.0, &mut rng).is_err());
        // Row with 0.4 + 0.3 on gold labels and gamma 0.5 is kept.
        let probs = ndarray::arr2(&[[1.0, 0.0, 0.0, 0.0], [0.4, 0.3, 0.2, 0.1]]);
        let r = mask_from_probs(probs, &[1, 7], &[0, 1], 0.5);
        assert!(r.kept[1]);
    }

    #[test]
    fn keep_rate_vanishes_as_gamma_approaches_one() {
        // Brute force over random stochastic rows over 6 labels, 2 gold.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut kept = 0;
        for _ in 0..10_000 {
            let raw: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
            let z: f64 = raw.iter().sum();
            let mass = (raw[0] + raw[1]) / z;
            if mass > 1.0 - 1e-9 {
                kept += 1;
            }
        }
        assert_eq!(kept, 0);
    }

    #[test]
    fn keep_decision_invariant_to_non_gold_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let probs = Array2::from_shape_fn((5, 4), |_| rng.random_range(0.01..1.0));
            let mut normed = probs.clone();
            for mut r in normed.rows_mut() {
                let s = r.sum();
                r.mapv_inplace(|v| v / s);
            }
            let mut perm = normed.clone();
            // swap non-gold columns 2 and 3
            for mut r in perm.rows_mut() {
                r.swap(2, 3);
            }
            let ids = [1, 3, 4, 5, 6];
            let a = mask_from_probs(normed, &ids, &[0, 1], 0.45);
            let b = mask_from_probs(perm, &ids, &[0, 1], 0.45);
            assert_eq!(a.kept, b.kept);
        }
    }

    /// Expert loss on a pooled pair (real, key) as the trainer composes it,
    /// with a second pair providing contrastive negatives.
    fn expert_objective(e: &ExpertEnsemble, m: usize, hs: &[Array1<f64>; 4], y: &[bool], lambda: f64) -> f64 {
        let outs: Vec<HeadOutput> = hs.iter().map(|h| e.head_forward(h.view(), Some(m)).unwrap()).collect();
        let ev = evidence_from_logits(outs[0].logits.as_slice().unwrap()).unwrap();
        let mut v = marginal_likelihood_loss(&ev, y).unwrap().value
            + lambda * evidence_kl_loss(&ev, y).unwrap().value
            + bce_with_logits(outs[0].logits.as_slice().unwrap(), y).unwrap().value
            + bce_with_logits(outs[1].logits.as_slice().unwrap(), y).unwrap().value;
        let rows: Vec<f64> = outs.iter().flat_map(|o| o.z.to_vec()).collect();
        v += ntxent_loss(&rows, e.config.hidden, &[1, 0, 3, 2], 0.5).unwrap().value;
        v
    }

    fn expert_gradient(e: &ExpertEnsemble, m: usize, hs: &[Array1<f64>; 4], y: &[bool], lambda: f64) -> Adapter {
        let outs: Vec<HeadOutput> = hs.iter().map(|h| e.head_forward(h.view(), Some(m)).unwrap()).collect();
        let logits = outs[0].logits.as_slice().unwrap();
        let ev = evidence_from_logits(logits).unwrap();
        let ml = marginal_likelihood_loss(&ev, y).unwrap().gradient;
        let kl = evidence_kl_loss(&ev, y).unwrap().gradient;
        let bce = bce_with_logits(logits, y).unwrap().gradient;
        let d_real: Array1<f64> = (0..y.len())
            .map(|k| (ml[k] + lambda * kl[k]) * sigmoid(logits[k]) + bce[k])
            .collect();
        let d_key = Array1::from(bce_with_logits(outs[1].logits.as_slice().unwrap(), y).unwrap().gradient);
        let rows: Vec<f64> = outs.iter().flat_map(|o| o.z.to_vec()).collect();
        let d = e.config.hidden;
        let g = ntxent_loss(&rows, d, &[1, 0, 3, 2], 0.5).unwrap().gradient;
        let zero = Array1::zeros(y.len());
        let mut total = Adapter::zeros(e.config.rank, d);
        for (i, out) in outs.iter().enumerate() {
            let dl = match i {
                0 => d_real.view(),
                1 => d_key.view(),
                _ => zero.view(),
            };
            let dz = ArrayView1::from(&g[i * d..(i + 1) * d]);
            total.add_scaled(&e.adapter_backward(m, out, dl, Some(dz)), 1.0);
        }
        total
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..100 {
            let mut e = small();
            let m = trial % 2;
            let nrm = Normal::new(0.0, 0.5).unwrap();
            e.params.adapters[m].b.mapv_inplace(|_| nrm.sample(&mut rng));
            let hs: [Array1<f64>; 4] = std::array::from_fn(|_| Array1::from_shape_fn(8, |_| nrm.sample(&mut rng) * 2.0));
            let y = [true, rng.random_bool(0.5), false, rng.random_bool(0.3)];
            let lambda = rng.random_range(0.0..1.0);
            let g = expert_gradient(&e, m, &hs, &y, lambda);
            for (which, analytic) in [(0, g.a.as_slice().unwrap()), (1, g.b.as_slice().unwrap())] {
                let base = if which == 0 { e.params.adapters[m].a.clone() } else { e.params.adapters[m].b.clone() };
                let f = |x: &[f64]| {
                    let mut c = e.clone();
                    let t = Array2::from_shape_vec(base.raw_dim(), x.to_vec()).unwrap();
                    if which == 0 {
                        c.params.adapters[m].a = t;
                    } else {
                        c.params.adapters[m].b = t;
                    }
                    expert_objective(&c, m, &hs, &y, lambda)
                };
                let fd = central_difference(f, base.as_slice().unwrap(), 1e-5);
                let err = max_relative_error(analytic, &fd, 1e-6);
                assert!(err < 1e-4, "trial {trial} tensor {which}: rel err {err}");
            }
        }
    }

    /// BCE on real and key paths plus contrastive loss through the whole
    /// backbone, for finite-difference checks of the hand-written backward.
    fn backbone_objective(e: &ExpertEnsemble, seqs: &[Vec<u32>; 2], y: &[bool]) -> f64 {
        let mut zs = Vec::new();
        let mut v = 0.0;
        for s in seqs {
            let (states, _) = e.backbone_forward(s).unwrap();
            let out = e.head_forward(states.row(0), None).unwrap();
            v += bce_with_logits(out.logits.as_slice().unwrap(), y).unwrap().value;
            zs.extend(out.z.to_vec());
        }
        v + ntxent_loss(&zs, e.config.hidden, &[1, 0], 0.7).unwrap().value
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        let mut e = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Random non-trivial layer-norm gains and biases.
        for b in &mut e.params.blocks {
            b.ln1_g.mapv_inplace(|_| rng.random_range(0.5..1.5));
            b.ln2_b.mapv_inplace(|_| rng.random_range(-0.3..0.3));
            b.b1.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        }
        let seqs = [vec![1, 4, 7, 7, 9], vec![1, 4, 0, 11, 9]];
        let y = [true, false, true, false];
        let mut grads = e.params.zeros_like();
        let mut zs = Vec::new();
        let mut outs = Vec::new();
        let mut caches = Vec::new();
        for s in &seqs {
            let (states, cache) = e.backbone_forward(s).unwrap();
            let out = e.head_forward(states.row(0), None).unwrap();
            zs.extend(out.z.to_vec());
            outs.push((states, out));
            caches.push(cache);
        }
        let d = e.config.hidden;
        let gz = ntxent_loss(&zs, d, &[1, 0], 0.7).unwrap().gradient;
        for (i, ((states, out), cache)) in outs.iter().zip(&caches).enumerate() {
            let dl = Array1::from(bce_with_logits(out.logits.as_slice().unwrap(), &y).unwrap().gradient);
            let dz = ArrayView1::from(&gz[i * d..(i + 1) * d]);
            let dh = e.head_backward(out, dl.view(), Some(dz), &mut grads);
            let mut ds = Array2::zeros(states.raw_dim());
            ds.row_mut(0).assign(&dh);
            e.backbone_backward(cache, &ds, &mut grads);
        }
        let analytic: Vec<(String, Vec<f64>)> =
            grads.tensors().iter().map(|t| (t.name.clone(), t.data.to_vec())).collect();
        let names: Vec<String> = analytic.iter().map(|(n, _)| n.clone()).collect();
        for (ti, name) in names.iter().enumerate() {
            if name.starts_with("adapter") || name == "label_emb" {
                continue;
            }
            let len = analytic[ti].1.len();
            // A spread of entries per tensor keeps the test fast.
            let picks: Vec<usize> = (0..len).step_by((len / 7).max(1)).collect();
            for &idx in &picks {
                let f = |x: &[f64]| {
                    let mut c = e.clone();
                    c.params.tensors_mut()[ti].1[idx] = x[0];
                    backbone_objective(&c, &seqs, &y)
                };
                let x0 = e.params.tensors()[ti].data[idx];
                let fd = central_difference(f, &[x0], 1e-5)[0];
                let a = analytic[ti].1[idx];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(err < 1e-4, "{name}[{idx}]: analytic {a} vs fd {fd}");
            }
        }
    }

    #[test]
    fn frozen_backbone_gradient_is_adapter_only() {
        let e = small();
        let h = Array1::from_shape_fn(8, |i| i as f64 * 0.3 - 1.0);
        let mut e2 = e.clone();
        e2.params.adapters[1].b.fill(0.2);
        let out = e2.head_forward(h.view(), Some(1)).unwrap();
        let dl = Array1::from_elem(4, 0.5);
        let g = e2.adapter_backward(1, &out, dl.view(), None);
        assert!(g.a.iter().any(|&v| v != 0.0));
        assert!(g.b.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn straight_through_label_gradient_matches_surrogate() {
        let e = small();
        let ids = ExpertEnsemble::with_cls(&[3, 4, 5, 6, 8]);
        let h = e.embed(&ids).unwrap();
        let gold = [0usize, 2];
        let upstream = Array2::from_shape_fn(h.raw_dim(), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.1 - 0.2);
        // Surrogate: masked row i behaves like pad + s_i (emb_i - pad), s_i the gold mass.
        let surrogate = |raw: &[f64]| {
            let mut c = e.clone();
            c.params.label_emb = Array2::from_shape_vec(e.params.label_emb.raw_dim(), raw.to_vec()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let m = key_token_mask(h.view(), &ids, c.label_embeddings().view(), &gold, 0.5, 0.8, &mut rng).unwrap();
            let pad = e.params.tok_emb.row(0);
            (1..ids.len())
                .map(|i| {
                    let mass: f64 = gold.iter().map(|&g| m.probs[[i, g]]).sum();
                    mass * upstream.row(i).dot(&(&e.params.tok_emb.row(ids[i] as usize) - &pad))
                })
                .sum::<f64>()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = key_token_mask(h.view(), &ids, e.label_embeddings().view(), &gold, 0.5, 0.8, &mut rng).unwrap();
        let mut grads = e.params.zeros_like();
        key_mask_backward(&e, &m, &ids, h.view(), &gold, 0.8, upstream.view(), &mut grads);
        let fd = central_difference(surrogate, e.params.label_emb.as_slice().unwrap(), 1e-6);
        let err = max_relative_error(grads.label_emb.as_slice().unwrap(), &fd, 1e-6);
        assert!(err < 1e-4, "rel err {err}");
    }
}
