//! Browser demo for `bagalign`: a bag-loss explorer, a one-slide
//! mask/classify/segment walkthrough, and an Otsu threshold calculator.
//!
//! Each operation is a plain Rust function returning a serializable view, so
//! it can be tested natively; the `#[wasm_bindgen]` wrappers hand the views to
//! JavaScript as JSON strings.

use bagalign::metrics::dice_precision_recall;
use bagalign::synth::{generate_synthetic, SlideSpec, SyntheticSpec};
use bagalign::trainer::{finite_diff_check, milnce_loss, BagFeatures, LossOptions, TwoTowerEncoder};
use bagalign::zeroshot::{
    build_class_embeddings, classify_slide_topk, classify_tile, otsu_threshold, segment_slide, tissue_mask_otsu,
    ClassPromptSet, PromptMode, ScoreMatrix, TissuePolarity,
};
use bagalign::{cosine_similarity, Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, Serialize)]
pub struct LossView {
    pub loss: f64,
    /// Loss when every similarity is equal: `mean_i ln(total texts / texts in bag i)`.
    pub uniform_loss: f64,
    pub gradient_check: f64,
    /// Rows are visual items, columns text items.
    pub similarities: Vec<Vec<f64>>,
    pub visual_bag: Vec<usize>,
    pub text_bag: Vec<usize>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller keeps the demo free of an extra distribution dependency
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// `bags` bags of `visuals × texts` items in `dim` dimensions. Items of a bag
/// scatter around a shared center with standard deviation `spread`; the
/// encoder is the identity, so similarities are plain cosines.
pub fn loss_explorer(bags: usize, visuals: usize, texts: usize, dim: usize, sigma: f64, spread: f64, seed: u64) -> Result<LossView> {
    if bags == 0 || visuals == 0 || texts == 0 || dim < 2 {
        return Err(Error::InvalidConfig("need at least one bag, one item per side and dim >= 2".into()));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidConfig(format!("spread must be non-negative, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = |center: &[f64]| center.iter().map(|c| c + spread * gaussian(&mut rng)).collect::<Vec<f64>>();
    // centers drawn from their own stream so that changing `spread` keeps them fixed
    let mut center_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let centers: Vec<Vec<f64>> = (0..bags).map(|_| (0..dim).map(|_| gaussian(&mut center_rng)).collect()).collect();
    let batch: Vec<BagFeatures> = centers
        .iter()
        .map(|c| BagFeatures {
            visuals: (0..visuals).map(|_| sample(c)).collect(),
            texts: (0..texts).map(|_| sample(c)).collect(),
        })
        .collect();
    let refs: Vec<&BagFeatures> = batch.iter().collect();
    let enc = TwoTowerEncoder::identity(dim)?;
    let opts = LossOptions::new(sigma);
    let loss = milnce_loss(&enc, &refs, opts)?;
    let gradient_check = finite_diff_check(&enc, &refs, opts, 1e-5)?;

    let all_visuals: Vec<&Vec<f64>> = batch.iter().flat_map(|b| &b.visuals).collect();
    let all_texts: Vec<&Vec<f64>> = batch.iter().flat_map(|b| &b.texts).collect();
    let similarities = all_visuals
        .iter()
        .map(|v| all_texts.iter().map(|t| cosine_similarity(v, t)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let visual_bag = (0..bags).flat_map(|i| std::iter::repeat_n(i, visuals)).collect();
    let text_bag = (0..bags).flat_map(|i| std::iter::repeat_n(i, texts)).collect();
    Ok(LossView {
        loss,
        uniform_loss: (bags as f64).ln(),
        gradient_check,
        similarities,
        visual_bag,
        text_bag,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SlideView {
    pub classes: Vec<String>,
    pub true_class: usize,
    /// Class predicted by top-K pooling over the non-background classes.
    pub predicted_class: usize,
    pub pooled_scores: Vec<f64>,
    pub k: usize,
    pub threshold: Option<f64>,
    pub tissue_tiles: usize,
    pub total_tiles: usize,
    /// Grid of cells of `cell_size` pixels covering the whole slide.
    pub cell_size: u64,
    pub width: usize,
    pub height: usize,
    /// Per-cell mean intensity of the tiles covering it.
    pub intensity: Vec<f64>,
    /// Per-cell segmentation label, -1 for background.
    pub labels: Vec<i32>,
    /// Per-cell planted-square membership.
    pub planted: Vec<bool>,
    pub dice: f64,
}

/// Generates slide `slide` (0-based) of a small synthetic set, masks glass by
/// Otsu, classifies the slide by top-K pooling and segments it. Tiles and
/// prompts are compared in raw feature space.
pub fn slide_walkthrough(seed: u64, slide: usize, stride: u32, k: usize, noise: f64) -> Result<SlideView> {
    let spec = SyntheticSpec {
        items_per_class: 2,
        descriptions_per_class: 2,
        seed,
        provider_seed: seed,
        slides: SlideSpec { count: slide + 1, stride, noise_sigma: noise, ..SlideSpec::default() },
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic(&spec)?;
    let layout = &ds.layouts[slide];
    let truth = &ds.truth.slides[slide];
    let tiles = ds.tiles.as_ref().expect("slides were requested");

    let sets = ds
        .manifest
        .classes
        .iter()
        .map(|c| ClassPromptSet::resolve(c, &ds.class_prompts[c], &ds.texts))
        .collect::<Result<Vec<_>>>()?;
    let classes = build_class_embeddings(&sets, PromptMode::Merged)?;

    let mask = tissue_mask_otsu(layout, TissuePolarity::Dark);
    let tissue = mask.tissue_indices();
    if tissue.is_empty() {
        return Err(Error::NoTissueTiles);
    }
    let rows = tissue
        .iter()
        .map(|&i| classify_tile(tiles.get(&layout.grid[i].embedding_id).expect("tile in store"), &classes).map(|c| c.scores))
        .collect::<Result<Vec<_>>>()?;
    let scores = ScoreMatrix::from_rows(&rows, classes.len())?;

    // pooling skips the background class 0
    let candidates: Vec<usize> = (1..classes.len()).collect();
    let pooled = classify_slide_topk(&scores.select_classes(&candidates), k)?;
    let seg = segment_slide(&layout.subset(&mask.tissue), &scores)?;

    let (w_px, h_px) = layout.extent();
    let cell = seg.cell_size;
    let (width, height) = ((w_px / cell) as usize, (h_px / cell) as usize);
    let mut labels = vec![-1; width * height];
    for cy in 0..seg.height {
        for cx in 0..seg.width {
            if let Some(c) = seg.labels[cy * seg.width + cx] {
                labels[cy * width + cx] = c as i32;
            }
        }
    }
    let mut sum = vec![0.0; width * height];
    let mut count = vec![0u32; width * height];
    let span = (u64::from(layout.tile_size) / cell) as usize;
    for (i, t) in layout.grid.iter().enumerate() {
        let (x0, y0) = layout.origin(i);
        let (cx0, cy0) = ((x0 / cell) as usize, (y0 / cell) as usize);
        for cy in cy0..cy0 + span {
            for cx in cx0..cx0 + span {
                sum[cy * width + cx] += t.intensity;
                count[cy * width + cx] += 1;
            }
        }
    }
    let intensity = sum.iter().zip(&count).map(|(s, &n)| s / f64::from(n.max(1))).collect();
    let planted = truth.planted.mask(cell, width, height);
    let dice = dice_precision_recall(&seg.class_mask(&[truth.class_index]), &truth.planted.mask(cell, seg.width, seg.height))?.dice;

    Ok(SlideView {
        classes: ds.manifest.classes.clone(),
        true_class: truth.class_index,
        predicted_class: candidates[pooled.predicted],
        pooled_scores: pooled.class_scores,
        k,
        threshold: mask.threshold,
        tissue_tiles: tissue.len(),
        total_tiles: layout.len(),
        cell_size: cell,
        width,
        height,
        intensity,
        labels,
        planted: planted.data,
        dice,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct OtsuView {
    pub threshold: Option<f64>,
    pub below: Vec<f64>,
    pub above: Vec<f64>,
}

/// Otsu threshold of a comma- or whitespace-separated list of numbers.
pub fn otsu_of_text(text: &str) -> Result<OtsuView> {
    let values = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| Error::InvalidConfig(format!("not a number: {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let threshold = otsu_threshold(&values);
    let (below, above) = match threshold {
        Some(t) => values.iter().partition(|&&v| v <= t),
        None => (values, Vec::new()),
    };
    Ok(OtsuView { threshold, below, above })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let view = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&view).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = lossExplorer)]
pub fn loss_explorer_js(
    bags: usize,
    visuals: usize,
    texts: usize,
    dim: usize,
    sigma: f64,
    spread: f64,
    seed: u32,
) -> std::result::Result<String, JsError> {
    to_js(loss_explorer(bags, visuals, texts, dim, sigma, spread, u64::from(seed)))
}

#[wasm_bindgen(js_name = slideWalkthrough)]
pub fn slide_walkthrough_js(seed: u32, slide: usize, stride: u32, k: usize, noise: f64) -> std::result::Result<String, JsError> {
    to_js(slide_walkthrough(u64::from(seed), slide, stride, k, noise))
}

#[wasm_bindgen(js_name = otsu)]
pub fn otsu_js(text: &str) -> std::result::Result<String, JsError> {
    to_js(otsu_of_text(text))
}
