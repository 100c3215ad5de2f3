//! Evaluation metrics and the diagnostic analyses run on a trained ensemble.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Bucket;
use crate::error::{Result, UmeError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold positives.
    pub support: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub micro: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScore>,
}

fn f1_from(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f = if 2 * tp + fp + fn_ == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
    (p, r, f)
}

fn check_shapes(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> Result<usize> {
    if pred.len() != gold.len() {
        return Err(UmeError::DimensionMismatch { expected: gold.len(), found: pred.len() });
    }
    let k = gold.first().map_or(0, |g| g.len());
    for (p, g) in pred.iter().zip(gold) {
        if g.len() != k {
            return Err(UmeError::DimensionMismatch { expected: k, found: g.len() });
        }
        if p.len() != k {
            return Err(UmeError::DimensionMismatch { expected: k, found: p.len() });
        }
    }
    Ok(k)
}

/// Micro and macro F1 over aligned multi-hot rows. A class with no gold and
/// no predicted positives scores 0, or is left out of the macro mean when
/// `ignore_empty` is set.
pub fn micro_macro_f1(pred: &[Vec<bool>], gold: &[Vec<bool>], ignore_empty: bool) -> Result<F1Report> {
    let k = check_shapes(pred, gold)?;
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    for (p, g) in pred.iter().zip(gold) {
        for j in 0..k {
            match (p[j], g[j]) {
                (true, true) => tp[j] += 1,
                (true, false) => fp[j] += 1,
                (false, true) => fn_[j] += 1,
                _ => {}
            }
        }
    }
    let (_, _, micro) = f1_from(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    let per_class: Vec<ClassScore> = (0..k)
        .map(|j| {
            let (precision, recall, f1) = f1_from(tp[j], fp[j], fn_[j]);
            ClassScore { precision, recall, f1, support: tp[j] + fn_[j], predicted: tp[j] + fp[j] }
        })
        .collect();
    let macro_f1 = macro_mean(&per_class, 0..k, ignore_empty);
    Ok(F1Report { micro, macro_f1, per_class })
}

fn macro_mean(per_class: &[ClassScore], classes: impl IntoIterator<Item = usize>, ignore_empty: bool) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for j in classes {
        let c = &per_class[j];
        if ignore_empty && c.support == 0 && c.predicted == 0 {
            continue;
        }
        sum += c.f1;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// The `n` labels with the smallest train counts, ties broken by name.
pub fn least_frequent(train_counts: &[usize], names: &[String], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..train_counts.len()).collect();
    order.sort_by(|&a, &b| train_counts[a].cmp(&train_counts[b]).then_with(|| names[a].cmp(&names[b])));
    order.truncate(n);
    order
}

/// Macro F1 restricted to the `n` least frequent training labels.
pub fn tail_macro_f1(
    pred: &[Vec<bool>],
    gold: &[Vec<bool>],
    train_counts: &[usize],
    names: &[String],
    n: usize,
    ignore_empty: bool,
) -> Result<f64> {
    let report = micro_macro_f1(pred, gold, ignore_empty)?;
    let k = report.per_class.len().max(train_counts.len());
    if n > k || train_counts.len() != names.len() || (!gold.is_empty() && train_counts.len() != report.per_class.len()) {
        return Err(UmeError::InvalidArgument(format!("tail size {n} exceeds label count {k}")));
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let tail = least_frequent(train_counts, names, n);
    if n == report.per_class.len() {
        return Ok(report.macro_f1);
    }
    Ok(macro_mean(&report.per_class, tail, ignore_empty))
}

/// Per-bucket mean weight share of each expert, in percent. Buckets with no
/// samples are absent from the map.
pub fn participation(weights: &[Vec<f64>], buckets: &[Bucket]) -> Result<BTreeMap<Bucket, Vec<f64>>> {
    if weights.len() != buckets.len() {
        return Err(UmeError::DimensionMismatch { expected: buckets.len(), found: weights.len() });
    }
    let mut sums: BTreeMap<Bucket, (Vec<f64>, usize)> = BTreeMap::new();
    for (w, &b) in weights.iter().zip(buckets) {
        let total: f64 = w.iter().sum();
        let entry = sums.entry(b).or_insert_with(|| (vec![0.0; w.len()], 0));
        if entry.0.len() != w.len() {
            return Err(UmeError::DimensionMismatch { expected: entry.0.len(), found: w.len() });
        }
        for (s, &v) in entry.0.iter_mut().zip(w) {
            *s += v / total;
        }
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(b, (s, n))| (b, s.into_iter().map(|v| 100.0 * v / n as f64).collect()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub errors: usize,
    pub error_rate: f64,
}

pub const CONFLICT_BIN_WIDTH: f64 = 0.2;

/// Error rates over conflict bins `[0,0.2), ..., [0.8,1.0]`.
pub fn conflict_error_bins(conflicts: &[f64], correct: &[bool]) -> Result<Vec<ConflictBin>> {
    if conflicts.len() != correct.len() {
        return Err(UmeError::DimensionMismatch { expected: conflicts.len(), found: correct.len() });
    }
    let mut counts = [0usize; 5];
    let mut errors = [0usize; 5];
    for (&c, &ok) in conflicts.iter().zip(correct) {
        let bin = ((c / CONFLICT_BIN_WIDTH).floor().max(0.0) as usize).min(4);
        counts[bin] += 1;
        if !ok {
            errors[bin] += 1;
        }
    }
    Ok((0..5)
        .map(|i| ConflictBin {
            lo: i as f64 * CONFLICT_BIN_WIDTH,
            hi: (i + 1) as f64 * CONFLICT_BIN_WIDTH,
            count: counts[i],
            errors: errors[i],
            error_rate: if counts[i] == 0 { 0.0 } else { errors[i] as f64 / counts[i] as f64 },
        })
        .collect())
}

/// Percentage of samples whose last-expert weight exceeds `threshold`.
pub fn utilization(last_weights: &[f64], threshold: f64) -> f64 {
    if last_weights.is_empty() {
        return 0.0;
    }
    100.0 * last_weights.iter().filter(|&&w| w > threshold).count() as f64 / last_weights.len() as f64
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant or fewer than two points are given.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let mx = mean(&rx);
    let my = mean(&ry);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

/// Micro F1 at each probability threshold.
pub fn threshold_sweep(probabilities: &[Vec<f64>], gold: &[Vec<bool>], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    thresholds
        .iter()
        .map(|&t| {
            let pred: Vec<Vec<bool>> = probabilities.iter().map(|p| p.iter().map(|&v| v > t).collect()).collect();
            Ok((t, micro_macro_f1(&pred, gold, false)?.micro))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub fusion_mode: String,
    pub experts: usize,
    pub samples: usize,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScore>,
    pub label_names: Vec<String>,
    /// `(N, tail macro F1)`
    pub tail_macro_f1: Vec<(usize, f64)>,
    /// Bucket name to per-expert percentages.
    pub participation: BTreeMap<String, Vec<f64>>,
    pub conflict_bins: Vec<ConflictBin>,
    pub conflict_error_spearman: Option<f64>,
    pub last_expert_utilization: f64,
    pub avg_last_conflict: f64,
    pub threshold_sweep: Vec<(f64, f64)>,
}

impl EvalReport {
    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("label,precision,recall,f1,support,predicted\n");
        for (name, c) in self.label_names.iter().zip(&self.per_class) {
            let _ = writeln!(s, "{name},{},{},{},{},{}", c.precision, c.recall, c.f1, c.support, c.predicted);
        }
        s
    }

    pub fn participation_csv(&self) -> String {
        let mut s = String::from("bucket,expert,percent\n");
        for (b, row) in &self.participation {
            for (m, p) in row.iter().enumerate() {
                let _ = writeln!(s, "{b},{},{p}", m + 1);
            }
        }
        s
    }

    pub fn conflict_csv(&self) -> String {
        let mut s = String::from("lo,hi,count,errors,error_rate\n");
        for b in &self.conflict_bins {
            let _ = writeln!(s, "{},{},{},{},{}", b.lo, b.hi, b.count, b.errors, b.error_rate);
        }
        s
    }

    pub fn tail_csv(&self) -> String {
        let mut s = String::from("n,tail_macro_f1\n");
        for (n, v) in &self.tail_macro_f1 {
            let _ = writeln!(s, "{n},{v}");
        }
        s
    }

    pub fn threshold_csv(&self) -> String {
        let mut s = String::from("threshold,micro_f1\n");
        for (t, v) in &self.threshold_sweep {
            let _ = writeln!(s, "{t},{v}");
        }
        s
    }

    pub fn summary_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.split,
            self.fusion_mode,
            self.experts,
            self.micro_f1,
            self.macro_f1,
            self.last_expert_utilization,
            self.avg_last_conflict
        )
    }
}

pub const SUMMARY_CSV_HEADER: &str = "split,fusion_mode,experts,micro_f1,macro_f1,utilization,avg_last_conflict";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub seconds: f64,
    pub report: EvalReport,
}

/// Run `run` once per value, in order.
pub fn sweep<F>(axis: &str, values: &[f64], mut run: F) -> Result<Vec<SweepRow>>
where
    F: FnMut(f64) -> Result<EvalReport>,
{
    if values.is_empty() {
        return Err(UmeError::InvalidArgument("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|&v| {
            let start = std::time::Instant::now();
            let report = run(v)?;
            Ok(SweepRow { axis: axis.to_string(), value: v, seconds: start.elapsed().as_secs_f64(), report })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("axis,value,seconds,micro_f1,macro_f1,utilization,avg_last_conflict\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.axis, r.value, r.seconds, r.report.micro_f1, r.report.macro_f1, r.report.last_expert_utilization, r.report.avg_last_conflict
        );
    }
    s
}
