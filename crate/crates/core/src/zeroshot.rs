//! Zero-shot tile classification, Otsu tissue masking, top-K slide pooling and
//! overlap-averaged segmentation.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_similarity, l2_normalize, text_key, EmbeddingStore};
use crate::error::{Error, Result};
use crate::metrics::{auroc_multiclass_pairwise, balanced_accuracy, weighted_f1, BinaryMask, LabeledPredictions};

pub const DEFAULT_TEMPLATES: &[&str] = &[
    "An H & E image of {}.",
    "a histopathology image of {}.",
    "{}, H&E stained tissue.",
];

/// Every template with `{}` replaced by every class name, template-major.
pub fn expand_templates(templates: &[String], names: &[String]) -> Vec<String> {
    templates.iter().flat_map(|t| names.iter().map(move |n| t.replace("{}", n))).collect()
}

/// `{class_id: [prompt, ...]}` in file order.
pub type ClassPrompts = IndexMap<String, Vec<String>>;

pub fn load_class_prompts(path: impl AsRef<Path>) -> Result<ClassPrompts> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let prompts: ClassPrompts = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if prompts.len() < 2 {
        return Err(Error::InvalidConfig(format!("{}: need at least two classes", path.display())));
    }
    Ok(prompts)
}

pub fn save_class_prompts(path: impl AsRef<Path>, prompts: &ClassPrompts) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(prompts).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPromptSet {
    pub class_id: String,
    pub prompts: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
}

impl ClassPromptSet {
    /// Looks every prompt up in a store keyed by [`text_key`].
    pub fn resolve(class_id: &str, prompts: &[String], store: &EmbeddingStore) -> Result<Self> {
        let embeddings = prompts
            .iter()
            .map(|p| store.get(&text_key(p)).map(<[f64]>::to_vec).ok_or_else(|| Error::MissingTextEmbedding(p.clone())))
            .collect::<Result<_>>()?;
        Ok(Self { class_id: class_id.to_owned(), prompts: prompts.to_vec(), embeddings })
    }

    /// The first prompt alone.
    pub fn first_only(&self) -> Self {
        Self {
            class_id: self.class_id.clone(),
            prompts: self.prompts.iter().take(1).cloned().collect(),
            embeddings: self.embeddings.iter().take(1).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Single,
    Merged,
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "merged" => Ok(Self::Merged),
            _ => Err(Error::InvalidConfig(format!("unknown prompt mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEmbedding {
    pub class_id: String,
    pub vector: Vec<f64>,
    pub mode: PromptMode,
}

/// One unit vector per class. Merged mode normalizes each prompt embedding,
/// averages, and normalizes the mean.
pub fn build_class_embeddings(sets: &[ClassPromptSet], mode: PromptMode) -> Result<Vec<ClassEmbedding>> {
    let dim = sets.first().and_then(|s| s.embeddings.first()).map(Vec::len);
    sets.iter()
        .map(|set| {
            if set.embeddings.is_empty() {
                return Err(Error::EmptyPromptSet(set.class_id.clone()));
            }
            if mode == PromptMode::Single && set.embeddings.len() != 1 {
                return Err(Error::InvalidConfig(format!(
                    "single-prompt mode needs exactly one prompt for {:?}, got {}",
                    set.class_id,
                    set.embeddings.len()
                )));
            }
            let d = dim.expect("non-empty sets");
            let mut mean = vec![0.0; d];
            for e in &set.embeddings {
                if e.len() != d {
                    return Err(Error::DimensionMismatch { expected: d, found: e.len() });
                }
                for (m, x) in mean.iter_mut().zip(l2_normalize(e)?) {
                    *m += x;
                }
            }
            let n = set.embeddings.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            Ok(ClassEmbedding { class_id: set.class_id.clone(), vector: l2_normalize(&mean)?, mode })
        })
        .collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileClassification {
    pub scores: Vec<f64>,
    pub predicted: usize,
}

/// Cosine similarity of a tile embedding to every class.
pub fn classify_tile(tile: &[f64], classes: &[ClassEmbedding]) -> Result<TileClassification> {
    if classes.len() < 2 {
        return Err(Error::InvalidConfig("zero-shot classification needs at least two classes".into()));
    }
    let scores = classes.iter().map(|c| cosine_similarity(tile, &c.vector)).collect::<Result<Vec<_>>>()?;
    let predicted = argmax(&scores);
    Ok(TileClassification { scores, predicted })
}

/// Row-major `n_tiles × n_classes` score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub n_tiles: usize,
    pub n_classes: usize,
    pub data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(n_tiles: usize, n_classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_tiles * n_classes {
            return Err(Error::ShapeMismatch(format!("{} scores for {n_tiles}x{n_classes}", data.len())));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { n_tiles, n_classes, data })
    }

    pub fn from_rows(rows: &[Vec<f64>], n_classes: usize) -> Result<Self> {
        if rows.iter().any(|r| r.len() != n_classes) {
            return Err(Error::ShapeMismatch(format!("every row needs {n_classes} scores")));
        }
        Self::new(rows.len(), n_classes, rows.concat())
    }

    pub fn row(&self, tile: usize) -> &[f64] {
        &self.data[tile * self.n_classes..(tile + 1) * self.n_classes]
    }

    pub fn column(&self, class: usize) -> Vec<f64> {
        (0..self.n_tiles).map(|t| self.data[t * self.n_classes + class]).collect()
    }

    /// Keeps the listed tiles, in the given order.
    pub fn select_tiles(&self, tiles: &[usize]) -> Self {
        let data = tiles.iter().flat_map(|&t| self.row(t).iter().copied()).collect();
        Self { n_tiles: tiles.len(), n_classes: self.n_classes, data }
    }

    /// Keeps the listed classes, in the given order.
    pub fn select_classes(&self, classes: &[usize]) -> Self {
        let data = (0..self.n_tiles).flat_map(|t| classes.iter().map(move |&c| self.data[t * self.n_classes + c])).collect();
        Self { n_tiles: self.n_tiles, n_classes: classes.len(), data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub row: u32,
    pub col: u32,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub row: u32,
    pub col: u32,
    pub intensity: f64,
    pub embedding_id: String,
}

/// A slide as a grid of square tiles placed at `(col·stride, row·stride)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideLayout {
    pub slide_id: String,
    pub tile_size: u32,
    pub stride: u32,
    pub grid: Vec<GridEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl SlideLayout {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("slide {:?}: {m}", self.slide_id)));
        if self.tile_size == 0 {
            return bad("tile_size must be positive".into());
        }
        if self.stride == 0 || self.stride > self.tile_size {
            return bad(format!("stride {} must lie in (0, {}]", self.stride, self.tile_size));
        }
        if self.grid.is_empty() {
            return bad("grid is empty".into());
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.grid {
            if !seen.insert((t.row, t.col)) {
                return bad(format!("duplicate tile at row {} col {}", t.row, t.col));
            }
            if !t.intensity.is_finite() {
                return bad("non-finite intensity".into());
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Pixel origin `(x, y)` of tile `i`.
    pub fn origin(&self, i: usize) -> (u64, u64) {
        let t = &self.grid[i];
        (u64::from(t.col) * u64::from(self.stride), u64::from(t.row) * u64::from(self.stride))
    }

    /// Pixel `(width, height)` covered by the grid.
    pub fn extent(&self) -> (u64, u64) {
        let max_col = self.grid.iter().map(|t| t.col).max().unwrap_or(0);
        let max_row = self.grid.iter().map(|t| t.row).max().unwrap_or(0);
        let span = |n: u32| u64::from(n) * u64::from(self.stride) + u64::from(self.tile_size);
        (span(max_col), span(max_row))
    }

    pub fn intensities(&self) -> Vec<f64> {
        self.grid.iter().map(|t| t.intensity).collect()
    }

    /// The layout restricted to the tiles where `keep` is true.
    pub fn subset(&self, keep: &[bool]) -> Self {
        Self {
            grid: self.grid.iter().zip(keep).filter(|(_, &k)| k).map(|(t, _)| t.clone()).collect(),
            ..self.clone()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let layout: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        layout.validate()?;
        Ok(layout)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Which side of the Otsu threshold counts as tissue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TissuePolarity {
    /// Tissue is darker than background (H&E on glass).
    #[default]
    Dark,
    Bright,
}

/// Relative tolerance under which two between-class variances tie.
const OTSU_TIE: f64 = 1e-12;

/// Otsu threshold over the distinct values of `values`: the `t` maximizing
/// `w0·w1·(μ0 − μ1)²` for the split `{≤ t} | {> t}`; ties go to the smallest
/// `t`. `None` when fewer than two distinct values exist.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    // distinct values with counts and sums
    let mut groups: Vec<(f64, usize, f64)> = Vec::new();
    for v in sorted {
        match groups.last_mut() {
            Some(g) if g.0 == v => {
                g.1 += 1;
                g.2 += v;
            }
            _ => groups.push((v, 1, v)),
        }
    }
    if groups.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let total: f64 = groups.iter().map(|g| g.2).sum();
    let mut variances = Vec::with_capacity(groups.len() - 1);
    let (mut n0, mut s0) = (0usize, 0.0);
    for g in &groups[..groups.len() - 1] {
        n0 += g.1;
        s0 += g.2;
        let n1 = values.len() - n0;
        let (w0, w1) = (n0 as f64 / n, n1 as f64 / n);
        let (mu0, mu1) = (s0 / n0 as f64, (total - s0) / n1 as f64);
        variances.push(w0 * w1 * (mu0 - mu1) * (mu0 - mu1));
    }
    let best = variances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let i = variances.iter().position(|&v| v >= best - OTSU_TIE * best.abs()).expect("non-empty");
    Some(groups[i].0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueMask {
    pub threshold: Option<f64>,
    pub tissue: Vec<bool>,
}

impl TissueMask {
    pub fn tissue_indices(&self) -> Vec<usize> {
        (0..self.tissue.len()).filter(|&i| self.tissue[i]).collect()
    }
}

/// Tissue tiles by Otsu thresholding of per-tile mean intensity. With fewer
/// than two distinct intensities every tile is tissue.
pub fn tissue_mask_otsu(layout: &SlideLayout, polarity: TissuePolarity) -> TissueMask {
    let values = layout.intensities();
    let threshold = otsu_threshold(&values);
    let tissue = match threshold {
        None => vec![true; values.len()],
        Some(t) => values
            .iter()
            .map(|&v| match polarity {
                TissuePolarity::Dark => v <= t,
                TissuePolarity::Bright => v > t,
            })
            .collect(),
    };
    TissueMask { threshold, tissue }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidePrediction {
    pub class_scores: Vec<f64>,
    pub predicted: usize,
}

/// Mean of the `min(k, n)` largest values.
pub fn top_k_mean(values: &[f64], k: usize) -> f64 {
    let k = k.clamp(1, values.len());
    let mut v = values.to_vec();
    v.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    v[..k].iter().sum::<f64>() / k as f64
}

/// Slide score per class = mean of its `K` highest tile scores, pooled per
/// class independently.
pub fn classify_slide_topk(scores: &ScoreMatrix, k: usize) -> Result<SlidePrediction> {
    if scores.n_tiles == 0 {
        return Err(Error::NoTissueTiles);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("K must be positive".into()));
    }
    let class_scores: Vec<f64> = (0..scores.n_classes).map(|c| top_k_mean(&scores.column(c), k)).collect();
    let predicted = argmax(&class_scores);
    Ok(SlidePrediction { class_scores, predicted })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolingConfig {
    pub k_candidates: Vec<usize>,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self { k_candidates: vec![1, 5, 10, 50, 100] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KResult {
    pub k: usize,
    pub balanced_accuracy: f64,
    pub weighted_f1: f64,
    pub auroc: Option<f64>,
    pub predictions: Vec<usize>,
    pub slide_scores: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_k: usize,
    pub rows: Vec<KResult>,
}

/// Evaluates every candidate `K` on labeled slides and reports the one with
/// the highest balanced accuracy (smallest `K` on ties).
pub fn sweep_k(slides: &[(ScoreMatrix, usize)], cfg: &PoolingConfig) -> Result<SweepResult> {
    if cfg.k_candidates.is_empty() || cfg.k_candidates.contains(&0) {
        return Err(Error::InvalidConfig("K candidates must be non-empty and positive".into()));
    }
    let n_classes = slides.first().map(|s| s.0.n_classes).ok_or(Error::EmptyCorpus)?;
    let y_true: Vec<usize> = slides.iter().map(|s| s.1).collect();
    let mut rows = Vec::new();
    for &k in &cfg.k_candidates {
        let preds = slides.iter().map(|(m, _)| classify_slide_topk(m, k)).collect::<Result<Vec<_>>>()?;
        let slide_scores: Vec<Vec<f64>> = preds.iter().map(|p| p.class_scores.clone()).collect();
        let predictions: Vec<usize> = preds.iter().map(|p| p.predicted).collect();
        let lp = LabeledPredictions::new(n_classes, y_true.clone(), predictions.clone())?.with_scores(slide_scores.clone())?;
        rows.push(KResult {
            k,
            balanced_accuracy: balanced_accuracy(&lp)?,
            weighted_f1: weighted_f1(&lp)?,
            auroc: auroc_multiclass_pairwise(&lp).ok(),
            predictions,
            slide_scores,
        });
    }
    let best = rows
        .iter()
        .max_by(|a, b| a.balanced_accuracy.total_cmp(&b.balanced_accuracy).then(b.k.cmp(&a.k)))
        .expect("non-empty");
    Ok(SweepResult { best_k: best.k, rows })
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Per-pixel class labels for a slide, stored on square cells of
/// `gcd(stride, tile_size)` pixels; all pixels of a cell share the same
/// coverage and scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    pub cell_size: u64,
    pub width: usize,
    pub height: usize,
    pub n_classes: usize,
    /// Accumulated scores, `width·height × n_classes`.
    pub sums: Vec<f64>,
    pub coverage: Vec<u32>,
    /// `None` for uncovered (background) cells.
    pub labels: Vec<Option<usize>>,
}

impl SegmentationMask {
    /// Averaged scores of a covered cell.
    pub fn mean_scores(&self, cell: usize) -> Option<Vec<f64>> {
        let cov = self.coverage[cell];
        (cov > 0).then(|| self.sums[cell * self.n_classes..(cell + 1) * self.n_classes].iter().map(|s| s / f64::from(cov)).collect())
    }

    pub fn pixel_extent(&self) -> (u64, u64) {
        (self.width as u64 * self.cell_size, self.height as u64 * self.cell_size)
    }

    pub fn label_at_pixel(&self, x: u64, y: u64) -> Option<usize> {
        let (cx, cy) = ((x / self.cell_size) as usize, (y / self.cell_size) as usize);
        if cx >= self.width || cy >= self.height {
            return None;
        }
        self.labels[cy * self.width + cx]
    }

    /// Cells labeled with any of `classes`.
    pub fn class_mask(&self, classes: &[usize]) -> BinaryMask {
        let data = self.labels.iter().map(|l| l.is_some_and(|c| classes.contains(&c))).collect();
        BinaryMask { width: self.width, height: self.height, data }
    }

    /// Binary PGM (P5) with one pixel per cell: 0 for background, `class + 1`
    /// otherwise.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.labels.iter().map(|l| l.map_or(0, |c| (c + 1).min(255) as u8)));
        out
    }
}

/// Spreads each tile's scores over its footprint, averages overlapping tiles
/// per pixel and labels every covered pixel with its top class. Tiles are
/// accumulated in `(row, col)` order.
pub fn segment_slide(layout: &SlideLayout, scores: &ScoreMatrix) -> Result<SegmentationMask> {
    layout.validate()?;
    if scores.n_tiles != layout.len() {
        return Err(Error::ShapeMismatch(format!("{} score rows for {} tiles", scores.n_tiles, layout.len())));
    }
    let cell = gcd(u64::from(layout.stride), u64::from(layout.tile_size));
    let (w_px, h_px) = layout.extent();
    let (width, height) = ((w_px / cell) as usize, (h_px / cell) as usize);
    let span = (u64::from(layout.tile_size) / cell) as usize;
    let c = scores.n_classes;
    let mut sums = vec![0.0; width * height * c];
    let mut coverage = vec![0u32; width * height];

    let mut order: Vec<usize> = (0..layout.len()).collect();
    order.sort_by_key(|&i| (layout.grid[i].row, layout.grid[i].col));
    for i in order {
        let (x0, y0) = layout.origin(i);
        let (cx0, cy0) = ((x0 / cell) as usize, (y0 / cell) as usize);
        let row = scores.row(i);
        for cy in cy0..cy0 + span {
            for cx in cx0..cx0 + span {
                let idx = cy * width + cx;
                coverage[idx] += 1;
                for (s, v) in sums[idx * c..(idx + 1) * c].iter_mut().zip(row) {
                    *s += v;
                }
            }
        }
    }
    let labels = (0..width * height)
        .map(|idx| (coverage[idx] > 0).then(|| argmax(&sums[idx * c..(idx + 1) * c])))
        .collect();
    Ok(SegmentationMask { cell_size: cell, width, height, n_classes: c, sums, coverage, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(id: &str, embs: &[&[f64]]) -> ClassPromptSet {
        ClassPromptSet {
            class_id: id.into(),
            prompts: embs.iter().enumerate().map(|(i, _)| format!("{id} {i}")).collect(),
            embeddings: embs.iter().map(|e| e.to_vec()).collect(),
        }
    }

    fn layout(tile: u32, stride: u32, cells: &[(u32, u32, f64)]) -> SlideLayout {
        SlideLayout {
            slide_id: "s".into(),
            tile_size: tile,
            stride,
            grid: cells
                .iter()
                .enumerate()
                .map(|(i, &(row, col, intensity))| GridEntry { row, col, intensity, embedding_id: format!("t{i}") })
                .collect(),
            label: None,
        }
    }

    #[test]
    fn class_embedding_examples() {
        let one = build_class_embeddings(&[set("a", &[&[3.0, 4.0]])], PromptMode::Single).unwrap();
        let two = build_class_embeddings(&[set("a", &[&[3.0, 4.0], &[3.0, 4.0]])], PromptMode::Merged).unwrap();
        assert!((one[0].vector[0] - two[0].vector[0]).abs() < 1e-15);
        assert!((one[0].vector[1] - two[0].vector[1]).abs() < 1e-15);

        let m = build_class_embeddings(&[set("a", &[&[1.0, 0.0], &[0.0, 1.0]])], PromptMode::Merged).unwrap();
        assert!((m[0].vector[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((m[0].vector[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);

        let r = build_class_embeddings(&[set("a", &[&[1.0, 0.0], &[-1.0, 0.0]])], PromptMode::Merged);
        assert!(matches!(r, Err(Error::ZeroNorm)));
        assert!(matches!(build_class_embeddings(&[set("a", &[])], PromptMode::Merged), Err(Error::EmptyPromptSet(_))));
        assert!(build_class_embeddings(&[set("a", &[&[1.0, 0.0], &[0.0, 1.0]])], PromptMode::Single).is_err());
    }

    #[test]
    fn classify_tile_examples() {
        let classes = build_class_embeddings(
            &[set("a", &[&[1.0, 0.0]]), set("b", &[&[0.0, 1.0]]), set("c", &[&[0.7071, 0.7071]])],
            PromptMode::Single,
        )
        .unwrap();
        let r = classify_tile(&[1.0, 0.0], &classes).unwrap();
        assert_eq!((r.predicted, r.scores[0]), (0, 1.0));
        let r = classify_tile(&[1.0, 1.0], &classes[..2]).unwrap();
        assert_eq!(r.predicted, 0);
        let r = classify_tile(&[0.6, 0.8], &classes).unwrap();
        assert_eq!(r.predicted, 2);
        assert!((r.scores[0] - 0.6).abs() < 1e-12);
        assert!((r.scores[1] - 0.8).abs() < 1e-12);
        assert!((r.scores[2] - 1.4 / 2f64.sqrt()).abs() < 1e-12);
        assert!(matches!(classify_tile(&[1.0], &classes), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn otsu_examples() {
        assert_eq!(otsu_threshold(&[1.0, 1.0, 8.0, 9.0]), Some(1.0));
        assert_eq!(otsu_threshold(&[0.0, 255.0]), Some(0.0));
        assert_eq!(otsu_threshold(&[4.0; 5]), None);
        // [1,2,3] ties between t=1 and t=2
        assert_eq!(otsu_threshold(&[1.0, 2.0, 3.0]), Some(1.0));

        let l = layout(224, 224, &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 8.0), (1, 1, 9.0)]);
        let m = tissue_mask_otsu(&l, TissuePolarity::Dark);
        assert_eq!(m.tissue, vec![true, true, false, false]);
        assert_eq!(tissue_mask_otsu(&l, TissuePolarity::Bright).tissue, vec![false, false, true, true]);
        let flat = layout(224, 224, &[(0, 0, 0.5), (0, 1, 0.5)]);
        assert_eq!(tissue_mask_otsu(&flat, TissuePolarity::Dark).tissue, vec![true, true]);
    }

    #[test]
    fn topk_examples() {
        let m = ScoreMatrix::from_rows(&[vec![0.9, 0.2], vec![0.5, 0.3], vec![0.1, 0.4]], 2).unwrap();
        let p = classify_slide_topk(&m, 2).unwrap();
        assert!((p.class_scores[0] - 0.7).abs() < 1e-15);
        let p = classify_slide_topk(&m, 1).unwrap();
        assert_eq!(p.class_scores, vec![0.9, 0.4]);
        let empty = ScoreMatrix::new(0, 2, vec![]).unwrap();
        assert!(matches!(classify_slide_topk(&empty, 1), Err(Error::NoTissueTiles)));
    }

    #[test]
    fn sweep_ties_pick_smaller_k() {
        let slides = vec![
            (ScoreMatrix::from_rows(&[vec![0.9, 0.1], vec![0.8, 0.2]], 2).unwrap(), 0),
            (ScoreMatrix::from_rows(&[vec![0.1, 0.9], vec![0.2, 0.8]], 2).unwrap(), 1),
        ];
        let r = sweep_k(&slides, &PoolingConfig { k_candidates: vec![5, 1] }).unwrap();
        assert_eq!(r.best_k, 1);
        let r = sweep_k(&slides, &PoolingConfig { k_candidates: vec![1] }).unwrap();
        assert_eq!((r.best_k, r.rows.len()), (1, 1));
    }

    #[test]
    fn segmentation_examples() {
        // non-overlapping: each pixel carries its tile's scores
        let l = layout(4, 4, &[(0, 0, 0.0), (0, 1, 0.0)]);
        let s = ScoreMatrix::from_rows(&[vec![0.2, 0.7], vec![0.9, 0.1]], 2).unwrap();
        let m = segment_slide(&l, &s).unwrap();
        assert_eq!((m.cell_size, m.width, m.height), (4, 2, 1));
        assert_eq!(m.mean_scores(0).unwrap(), vec![0.2, 0.7]);
        assert_eq!(m.label_at_pixel(3, 3), Some(1));
        assert_eq!(m.label_at_pixel(4, 0), Some(0));

        // half-stride overlap: middle cell averages both tiles
        let l = layout(4, 2, &[(0, 0, 0.0), (0, 1, 0.0)]);
        let s = ScoreMatrix::from_rows(&[vec![0.2, 0.5], vec![0.8, 0.5]], 2).unwrap();
        let m = segment_slide(&l, &s).unwrap();
        assert_eq!((m.cell_size, m.width, m.height), (2, 3, 2));
        assert_eq!(m.coverage, vec![1, 2, 1, 1, 2, 1]);
        assert!((m.mean_scores(1).unwrap()[0] - 0.5).abs() < 1e-15);

        let s = ScoreMatrix::from_rows(&[vec![0.3, 0.1], vec![0.3, 0.1]], 2).unwrap();
        assert_eq!(segment_slide(&l, &s).unwrap().mean_scores(1).unwrap(), vec![0.3, 0.1]);
    }

    #[test]
    fn uncovered_cells_are_background() {
        let l = layout(2, 2, &[(0, 0, 0.0), (1, 1, 0.0)]);
        let s = ScoreMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2).unwrap();
        let m = segment_slide(&l, &s).unwrap();
        assert_eq!(m.labels, vec![Some(0), None, None, Some(1)]);
        let pgm = m.to_pgm();
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 4..], &[1, 0, 0, 2]);
    }

    #[test]
    fn layout_validation() {
        assert!(layout(4, 5, &[(0, 0, 0.0)]).validate().is_err());
        assert!(layout(4, 0, &[(0, 0, 0.0)]).validate().is_err());
        assert!(layout(4, 4, &[(0, 0, 0.0), (0, 0, 1.0)]).validate().is_err());
        assert!(layout(4, 4, &[]).validate().is_err());
    }

    #[test]
    fn templates_expand() {
        let t = expand_templates(&["An H & E image of {}.".into()], &["tumor".into(), "cancer".into()]);
        assert_eq!(t, vec!["An H & E image of tumor.", "An H & E image of cancer."]);
    }
}
