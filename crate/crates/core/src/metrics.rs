//! Classification and segmentation metrics with percentile-bootstrap
//! confidence intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground truth and predictions for `n` items over `n_classes` classes, with
/// optional per-class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPredictions {
    pub n_classes: usize,
    pub y_true: Vec<usize>,
    pub y_pred: Vec<usize>,
    pub scores: Option<Vec<Vec<f64>>>,
}

impl LabeledPredictions {
    pub fn new(n_classes: usize, y_true: Vec<usize>, y_pred: Vec<usize>) -> Result<Self> {
        let lp = Self { n_classes, y_true, y_pred, scores: None };
        lp.validate()?;
        Ok(lp)
    }

    pub fn with_scores(mut self, scores: Vec<Vec<f64>>) -> Result<Self> {
        self.scores = Some(scores);
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.y_true.is_empty() || self.y_true.len() != self.y_pred.len() {
            return Err(Error::ShapeMismatch(format!(
                "y_true has {} items, y_pred {}",
                self.y_true.len(),
                self.y_pred.len()
            )));
        }
        if let Some(&c) = self.y_true.iter().chain(&self.y_pred).find(|&&c| c >= self.n_classes) {
            return Err(Error::ShapeMismatch(format!("class index {c} outside 0..{}", self.n_classes)));
        }
        if let Some(s) = &self.scores {
            if s.len() != self.y_true.len() || s.iter().any(|row| row.len() != self.n_classes) {
                return Err(Error::ShapeMismatch("scores must be n_items x n_classes".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y_true.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_true.is_empty()
    }

    /// The items at `indices`, in that order (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            n_classes: self.n_classes,
            y_true: indices.iter().map(|&i| self.y_true[i]).collect(),
            y_pred: indices.iter().map(|&i| self.y_pred[i]).collect(),
            scores: self.scores.as_ref().map(|s| indices.iter().map(|&i| s[i].clone()).collect()),
        }
    }

    fn scores(&self) -> Result<&[Vec<f64>]> {
        self.scores.as_deref().ok_or_else(|| Error::ShapeMismatch("scores are required".into()))
    }
}

/// Per-class (tp, fp, fn, support).
fn confusion(lp: &LabeledPredictions) -> Result<Vec<(usize, usize, usize, usize)>> {
    let mut counts = vec![(0, 0, 0, 0); lp.n_classes];
    for (&t, &p) in lp.y_true.iter().zip(&lp.y_pred) {
        counts[t].3 += 1;
        if t == p {
            counts[t].0 += 1;
        } else {
            counts[p].1 += 1;
            counts[t].2 += 1;
        }
    }
    if let Some(c) = counts.iter().position(|c| c.3 == 0) {
        return Err(Error::MissingClass(c));
    }
    Ok(counts)
}

/// Mean of per-class recall.
pub fn balanced_accuracy(lp: &LabeledPredictions) -> Result<f64> {
    let counts = confusion(lp)?;
    let sum: f64 = counts.iter().map(|&(tp, _, _, support)| tp as f64 / support as f64).sum();
    Ok(sum / counts.len() as f64)
}

/// Support-weighted mean of per-class F1; a class that is never predicted
/// correctly scores 0.
pub fn weighted_f1(lp: &LabeledPredictions) -> Result<f64> {
    let counts = confusion(lp)?;
    let total = lp.len() as f64;
    Ok(counts
        .iter()
        .map(|&(tp, fp, fn_, support)| {
            let denom = 2 * tp + fp + fn_;
            let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
            f1 * support as f64 / total
        })
        .sum())
}

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
pub fn auroc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::ShapeMismatch(format!("{} scores, {} labels", scores.len(), positive.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite);
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // rank sum of positives with mid-ranks for ties, in doubled units to stay integral
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 averaged, doubled: (i + 1) + (j + 1)
        let mid2 = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| positive[k]).count() as u128;
        rank_sum2 += mid2 * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Unweighted mean over class pairs `(a, b)` of the binary AUROC on items of
/// class `a` or `b`, ranking by `score_a - score_b`; both directions of each
/// pair are averaged.
pub fn auroc_multiclass_pairwise(lp: &LabeledPredictions) -> Result<f64> {
    let scores = lp.scores()?;
    if lp.n_classes < 2 {
        return Err(Error::SingleClass);
    }
    let mut total = 0.0;
    let mut pairs = 0;
    for a in 0..lp.n_classes {
        for b in a + 1..lp.n_classes {
            let idx: Vec<usize> = (0..lp.len()).filter(|&i| lp.y_true[i] == a || lp.y_true[i] == b).collect();
            let margin_ab: Vec<f64> = idx.iter().map(|&i| scores[i][a] - scores[i][b]).collect();
            let margin_ba: Vec<f64> = idx.iter().map(|&i| scores[i][b] - scores[i][a]).collect();
            let is_a: Vec<bool> = idx.iter().map(|&i| lp.y_true[i] == a).collect();
            let is_b: Vec<bool> = is_a.iter().map(|x| !x).collect();
            total += 0.5 * (auroc_binary(&margin_ab, &is_a)? + auroc_binary(&margin_ba, &is_b)?);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// A boolean mask over a `width × height` pixel grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!("{} values for a {width}x{height} mask", data.len())));
        }
        Ok(Self { width, height, data })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapScores {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Dice (F1 on positive pixels), precision and recall. Dice of two empty masks
/// is 1; otherwise an empty denominator gives 0.
pub fn dice_precision_recall(predicted: &BinaryMask, truth: &BinaryMask) -> Result<OverlapScores> {
    if (predicted.width, predicted.height) != (truth.width, truth.height) {
        return Err(Error::ShapeMismatch(format!(
            "predicted {}x{} vs truth {}x{}",
            predicted.width, predicted.height, truth.width, truth.height
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in predicted.data.iter().zip(&truth.data) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: usize, den: usize, empty: f64| if den == 0 { empty } else { num as f64 / den as f64 };
    Ok(OverlapScores {
        dice: ratio(2 * tp, 2 * tp + fp + fn_, 1.0),
        precision: ratio(tp, tp + fp, 0.0),
        recall: ratio(tp, tp + fn_, 0.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    /// Resamples on which the metric was undefined.
    pub skipped: usize,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap over items resampled with replacement. Resamples on
/// which `metric` fails are skipped and counted. The interval is widened to
/// contain the point estimate if needed.
pub fn bootstrap_ci<F>(metric: F, lp: &LabeledPredictions, resamples: usize, level: f64, seed: u64) -> Result<ConfidenceInterval>
where
    F: Fn(&LabeledPredictions) -> Result<f64>,
{
    if lp.len() < 2 {
        return Err(Error::ShapeMismatch("bootstrap needs at least 2 items".into()));
    }
    if !(level > 0.0 && level < 1.0) || resamples == 0 {
        return Err(Error::InvalidConfig(format!("bad bootstrap settings: level {level}, {resamples} resamples")));
    }
    let point = metric(lp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = lp.len();
    let mut values = Vec::with_capacity(resamples);
    let mut skipped = 0;
    let mut idx = vec![0; n];
    for _ in 0..resamples {
        for slot in idx.iter_mut() {
            *slot = rng.random_range(0..n);
        }
        match metric(&lp.select(&idx)) {
            Ok(v) => values.push(v),
            Err(_) => skipped += 1,
        }
    }
    if values.is_empty() {
        return Ok(ConfidenceInterval { point, lo: point, hi: point, level, skipped });
    }
    values.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let lo = quantile(&values, alpha).min(point);
    let hi = quantile(&values, 1.0 - alpha).max(point);
    Ok(ConfidenceInterval { point, lo, hi, level, skipped })
}

/// One metric line of a JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub point: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn new(metric: &str, ci: &ConfidenceInterval, n: usize, seed: u64) -> Self {
        Self { metric: metric.to_owned(), point: ci.point, ci_lo: ci.lo, ci_hi: ci.hi, n, seed }
    }
}

/// Balanced accuracy, weighted F1 and pairwise AUROC with bootstrap intervals.
pub fn classification_report(lp: &LabeledPredictions, resamples: usize, level: f64, seed: u64) -> Result<Vec<MetricReport>> {
    let mut out = vec![
        MetricReport::new("balanced_accuracy", &bootstrap_ci(balanced_accuracy, lp, resamples, level, seed)?, lp.len(), seed),
        MetricReport::new("weighted_f1", &bootstrap_ci(weighted_f1, lp, resamples, level, seed)?, lp.len(), seed),
    ];
    if lp.scores.is_some() {
        let ci = bootstrap_ci(auroc_multiclass_pairwise, lp, resamples, level, seed)?;
        out.push(MetricReport::new("auroc", &ci, lp.len(), seed));
    }
    Ok(out)
}

/// Aligned text table with one row per named report:
/// `name | balanced accuracy | weighted F1 | AUROC`, each cell `point (lo, hi)`.
pub fn format_table(rows: &[(String, Vec<MetricReport>)]) -> String {
    let headers = ["", "balanced accuracy", "weighted F1", "AUROC"];
    let keys = ["balanced_accuracy", "weighted_f1", "auroc"];
    let mut cells: Vec<Vec<String>> = vec![headers.iter().map(|s| s.to_string()).collect()];
    for (name, reports) in rows {
        let mut line = vec![name.clone()];
        for key in keys {
            line.push(match reports.iter().find(|r| r.metric == key) {
                Some(r) => format!("{:.3} ({:.3}, {:.3})", r.point, r.ci_lo, r.ci_hi),
                None => "-".into(),
            });
        }
        cells.push(line);
    }
    let widths: Vec<usize> = (0..headers.len()).map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &cells {
        let padded: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        out.push_str(padded.join(" | ").trim_end());
        out.push('\n');
    }
    out
}
