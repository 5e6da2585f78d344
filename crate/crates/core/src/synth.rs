//! Seeded synthetic corpora: class-clustered image and text features, a prompt
//! dictionary, class prompts, and tiled slides with a planted tumor square.
//!
//! Every feature is a class center plus isotropic Gaussian noise with standard
//! deviation `noise_sigma` per coordinate. Class 0 is normal tissue; slides are
//! normal tissue on glass with one square of a tumor class planted in them.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bags::{expand_text, StubProvider};
use crate::embedding::{dot, l2_normalize, text_key, EmbeddingStore};
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::vocab::{PromptDictionary, PromptRecord};
use crate::zeroshot::{expand_templates, ClassPrompts, GridEntry, SlideLayout, DEFAULT_TEMPLATES};

/// `(class id, name, synonym)` for the first classes; later ones are numbered.
const CLASS_NAMES: &[(&str, &str, &str)] = &[
    ("normal", "normal tissue", "benign tissue"),
    ("adenocarcinoma", "adenocarcinoma", "glandular carcinoma"),
    ("squamous", "squamous cell carcinoma", "keratinizing carcinoma"),
    ("lymphoma", "lymphoma", "lymphoid neoplasm"),
    ("melanoma", "melanoma", "melanocytic tumor"),
    ("sarcoma", "sarcoma", "mesenchymal tumor"),
];

const ACRONYMS: &[&str] = &["NT", "ADC", "SCC", "LYM", "MEL", "SAR"];

const GLASS_LEVEL: f64 = 0.9;
const NORMAL_LEVEL: f64 = 0.45;
const TUMOR_LEVEL: f64 = 0.3;
const INTENSITY_NOISE: f64 = 0.02;
const CENTER_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlideSpec {
    pub count: usize,
    /// Side of the tissue area, in tiles.
    pub grid: u32,
    /// Fraction of tissue tiles covered by the planted square.
    pub planted_fraction: f64,
    pub tile_size: u32,
    pub stride: u32,
    /// Width of the glass margin around the tissue, in tiles.
    pub glass_border: u32,
    pub noise_sigma: f64,
}

impl Default for SlideSpec {
    fn default() -> Self {
        Self { count: 20, grid: 10, planted_fraction: 0.1, tile_size: 8, stride: 8, glass_border: 1, noise_sigma: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub items_per_class: usize,
    /// Share of each class's images placed in the test split.
    pub test_fraction: f64,
    pub descriptions_per_class: usize,
    /// Centers satisfy pairwise cosine ≤ `1 − cluster_separation`.
    pub cluster_separation: f64,
    pub noise_sigma: f64,
    /// Noise on text features; `noise_sigma` when unset.
    pub text_noise_sigma: Option<f64>,
    pub templates: Vec<String>,
    /// Seed handed to the stub expansion provider when precomputing expansions.
    pub provider_seed: u64,
    pub seed: u64,
    pub slides: SlideSpec,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            input_dim: 64,
            items_per_class: 40,
            test_fraction: 0.25,
            descriptions_per_class: 8,
            cluster_separation: 0.8,
            noise_sigma: 0.1,
            text_noise_sigma: None,
            templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
            provider_seed: 0,
            seed: 0,
            slides: SlideSpec::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn max_cosine(&self) -> f64 {
        1.0 - self.cluster_separation
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synth: {m}")));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.input_dim < 2 {
            return bad("input_dim must be at least 2");
        }
        if !(self.cluster_separation > 0.0 && self.cluster_separation <= 2.0) {
            return bad("cluster_separation must lie in (0, 2]");
        }
        if !(self.noise_sigma >= 0.0) || !(self.text_noise_sigma.unwrap_or(0.0) >= 0.0) || !(self.slides.noise_sigma >= 0.0) {
            return bad("noise sigmas must be non-negative");
        }
        if self.items_per_class == 0 || self.descriptions_per_class == 0 {
            return bad("items_per_class and descriptions_per_class must be positive");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction must lie in [0, 1)");
        }
        if self.templates.is_empty() {
            return bad("templates must not be empty");
        }
        let s = &self.slides;
        if s.count > 0 {
            if s.tile_size == 0 || s.stride == 0 || s.stride > s.tile_size || s.grid == 0 {
                return bad("slides need grid > 0 and 0 < stride <= tile_size");
            }
            if !(s.planted_fraction > 0.0 && s.planted_fraction <= 1.0) {
                return bad("planted_fraction must lie in (0, 1]");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

/// File names, relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorePaths {
    pub dictionary: String,
    pub images: String,
    /// Hash-keyed store of expansion and class-prompt texts.
    pub texts: String,
    pub corpus: String,
    pub class_prompts: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tiles: Option<String>,
}

/// The unlabeled image collection with optional labels, plus the stores and
/// slides that go with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    /// Class excluded from slide-level classification.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_class: Option<String>,
    pub items: Vec<ManifestItem>,
    pub stores: StorePaths,
    #[serde(default)]
    pub slides: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for item in &self.items {
            if !seen.insert(item.id.as_str()) {
                return Err(Error::DuplicateId(item.id.clone()));
            }
            if let Some(l) = item.label {
                if l >= self.classes.len() {
                    return Err(Error::InvalidConfig(format!("item {:?} has label {l} outside {} classes", item.id, self.classes.len())));
                }
            }
        }
        if let Some(bg) = &self.background_class {
            if !self.classes.contains(bg) {
                return Err(Error::InvalidConfig(format!("background class {bg:?} is not a class")));
            }
        }
        Ok(())
    }

    pub fn class_index(&self, class_id: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class_id)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.validate()?;
        Ok(m)
    }
}

/// Pixel rectangle of the planted square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedSquare {
    pub x: u64,
    pub y: u64,
    pub size: u64,
}

impl PlantedSquare {
    /// Cells of side `cell` pixels lying inside the square.
    pub fn mask(&self, cell: u64, width: usize, height: usize) -> BinaryMask {
        let inside = |c: usize, lo: u64| {
            let start = c as u64 * cell;
            start >= lo && start + cell <= lo + self.size
        };
        let data = (0..height).flat_map(|cy| (0..width).map(move |cx| inside(cx, self.x) && inside(cy, self.y))).collect();
        BinaryMask { width, height, data }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideTruth {
    pub slide_id: String,
    pub class_index: usize,
    pub class_id: String,
    pub planted: PlantedSquare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub slides: Vec<SlideTruth>,
}

impl GroundTruth {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// A generated dataset held in memory.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub centers: Vec<Vec<f64>>,
    pub manifest: DatasetManifest,
    pub dictionary: PromptDictionary,
    pub images: EmbeddingStore,
    pub texts: EmbeddingStore,
    pub corpus: EmbeddingStore,
    pub tiles: Option<EmbeddingStore>,
    pub class_prompts: ClassPrompts,
    pub layouts: Vec<SlideLayout>,
    pub truth: GroundTruth,
}

fn class_names(g: usize) -> (String, String, String) {
    match CLASS_NAMES.get(g) {
        Some(&(id, name, syn)) => (id.into(), name.into(), syn.into()),
        None => (format!("subtype-{g}"), format!("tumor subtype {g}"), format!("subtype {g} neoplasm")),
    }
}

fn gaussian_unit(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

/// Rejection-samples `g` unit vectors with pairwise cosine ≤ `max_cosine`.
pub fn sample_centers(g: usize, d: usize, max_cosine: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(g);
    while centers.len() < g {
        let found = (0..CENTER_ATTEMPTS)
            .map(|_| gaussian_unit(d, rng))
            .find(|c| centers.iter().all(|o| dot(c, o) <= max_cosine));
        match found {
            Some(c) => centers.push(c),
            None => return Err(Error::InfeasibleSeparation { classes: g, dim: d, max_cosine }),
        }
    }
    Ok(centers)
}

fn noisy(center: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if sigma == 0.0 {
        return center.to_vec();
    }
    let n = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    center.iter().map(|c| c + n.sample(rng)).collect()
}

/// Tile-unit content of a slide canvas.
#[derive(Clone, Copy, PartialEq)]
enum Content {
    Glass,
    Normal,
    Tumor,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (g, d) = (spec.num_classes, spec.input_dim);
    let text_sigma = spec.text_noise_sigma.unwrap_or(spec.noise_sigma);
    let centers = sample_centers(g, d, spec.max_cosine(), &mut rng)?;
    let glass_center = gaussian_unit(d, &mut rng);
    let names: Vec<(String, String, String)> = (0..g).map(class_names).collect();

    let records = names
        .iter()
        .enumerate()
        .map(|(c, (id, name, _))| PromptRecord {
            id: format!("p-{id}"),
            text: name.clone(),
            acronym: ACRONYMS.get(c).map_or_else(|| format!("T{c}"), |a| a.to_string()),
            description: format!("{name} tissue pattern"),
            embedding: noisy(&centers[c], text_sigma, &mut rng),
        })
        .collect::<Vec<_>>();
    let dictionary = PromptDictionary::new(d, records)?;

    let n_test = (spec.items_per_class as f64 * spec.test_fraction).round() as usize;
    let mut items = Vec::new();
    let mut image_entries = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for i in 0..spec.items_per_class {
            let id = format!("img-{:05}", items.len());
            let split = if i >= spec.items_per_class - n_test { Split::Test } else { Split::Train };
            image_entries.push((id.clone(), noisy(center, spec.noise_sigma, &mut rng)));
            items.push(ManifestItem { id, split, label: Some(c) });
        }
    }
    let images = EmbeddingStore::from_entries(d, image_entries)?;

    let mut corpus_entries = Vec::new();
    for (c, (id, _, _)) in names.iter().enumerate() {
        for i in 0..spec.descriptions_per_class {
            corpus_entries.push((format!("desc-{id}-{i:02}"), noisy(&centers[c], text_sigma, &mut rng)));
        }
    }
    let corpus = EmbeddingStore::from_entries(d, corpus_entries)?;

    // expansions of each dictionary prompt and the class prompts, keyed by text hash
    let mut text_entries: IndexMap<String, Vec<f64>> = IndexMap::new();
    let mut class_prompts = ClassPrompts::new();
    for (c, (id, name, syn)) in names.iter().enumerate() {
        let expansion = expand_text(name, &StubProvider, spec.provider_seed)?;
        let prompts = expand_templates(&spec.templates, &[name.clone(), syn.clone()]);
        for text in expansion.tagged().map(|(t, _)| t.to_owned()).chain(prompts.iter().cloned()) {
            let key = text_key(&text);
            if !text_entries.contains_key(&key) {
                text_entries.insert(key, noisy(&centers[c], text_sigma, &mut rng));
            }
        }
        class_prompts.insert(id.clone(), prompts);
    }
    let texts = EmbeddingStore::from_entries(d, text_entries)?;

    let (layouts, tiles, truth) = generate_slides(spec, &centers, &glass_center, &names, &mut rng)?;
    let manifest = DatasetManifest {
        classes: names.iter().map(|n| n.0.clone()).collect(),
        background_class: Some(names[0].0.clone()),
        items,
        stores: StorePaths {
            dictionary: "dictionary.json".into(),
            images: "images.embs".into(),
            texts: "texts.embs".into(),
            corpus: "corpus.embs".into(),
            class_prompts: "class_prompts.json".into(),
            tiles: tiles.as_ref().map(|_| "tiles.embs".into()),
        },
        slides: layouts.iter().map(|l| format!("slides/{}.json", l.slide_id)).collect(),
        ground_truth: Some("ground_truth.json".into()),
    };
    Ok(SyntheticDataset { centers, manifest, dictionary, images, texts, corpus, tiles, class_prompts, layouts, truth })
}

type Slides = (Vec<SlideLayout>, Option<EmbeddingStore>, GroundTruth);

fn generate_slides(
    spec: &SyntheticSpec,
    centers: &[Vec<f64>],
    glass_center: &[f64],
    names: &[(String, String, String)],
    rng: &mut ChaCha8Rng,
) -> Result<Slides> {
    let s = &spec.slides;
    if s.count == 0 {
        return Ok((Vec::new(), None, GroundTruth { slides: Vec::new() }));
    }
    let tile = u64::from(s.tile_size);
    let units = s.grid + 2 * s.glass_border;
    let canvas = u64::from(units) * tile;
    let per_axis = ((canvas - tile) / u64::from(s.stride) + 1) as u32;
    let side = ((s.planted_fraction.sqrt() * f64::from(s.grid)).round() as u32).clamp(1, s.grid);
    let intensity_noise = Normal::new(0.0, INTENSITY_NOISE).expect("valid");
    let g = centers.len();

    let mut layouts = Vec::with_capacity(s.count);
    let mut tile_entries = Vec::new();
    let mut truths = Vec::with_capacity(s.count);
    for k in 0..s.count {
        let slide_id = format!("slide-{k:03}");
        let class = 1 + k % (g - 1);
        // keep one tile of normal tissue between the square and the glass when possible
        let inset = u32::from(s.grid >= side + 2);
        let ux = s.glass_border + inset + rng.random_range(0..=s.grid - side - 2 * inset);
        let uy = s.glass_border + inset + rng.random_range(0..=s.grid - side - 2 * inset);
        let content = |cx: u32, cy: u32| {
            if cx < s.glass_border || cy < s.glass_border || cx >= s.glass_border + s.grid || cy >= s.glass_border + s.grid {
                Content::Glass
            } else if (ux..ux + side).contains(&cx) && (uy..uy + side).contains(&cy) {
                Content::Tumor
            } else {
                Content::Normal
            }
        };

        let mut grid = Vec::new();
        for row in 0..per_axis {
            for col in 0..per_axis {
                let (x0, y0) = (u64::from(col) * u64::from(s.stride), u64::from(row) * u64::from(s.stride));
                let (mut w_glass, mut w_normal, mut w_tumor) = (0.0, 0.0, 0.0);
                for cy in (y0 / tile) as u32..=((y0 + tile - 1) / tile) as u32 {
                    for cx in (x0 / tile) as u32..=((x0 + tile - 1) / tile) as u32 {
                        let ox = overlap(x0, u64::from(cx) * tile, tile);
                        let oy = overlap(y0, u64::from(cy) * tile, tile);
                        let w = (ox * oy) as f64 / (tile * tile) as f64;
                        match content(cx, cy) {
                            Content::Glass => w_glass += w,
                            Content::Normal => w_normal += w,
                            Content::Tumor => w_tumor += w,
                        }
                    }
                }
                let mixed: Vec<f64> = (0..spec.input_dim)
                    .map(|i| w_glass * glass_center[i] + w_normal * centers[0][i] + w_tumor * centers[class][i])
                    .collect();
                let id = format!("{slide_id}-r{row:02}-c{col:02}");
                tile_entries.push((id.clone(), noisy(&mixed, s.noise_sigma, rng)));
                let intensity = w_glass * GLASS_LEVEL + w_normal * NORMAL_LEVEL + w_tumor * TUMOR_LEVEL + intensity_noise.sample(rng);
                grid.push(GridEntry { row, col, intensity, embedding_id: id });
            }
        }
        layouts.push(SlideLayout {
            slide_id: slide_id.clone(),
            tile_size: s.tile_size,
            stride: s.stride,
            grid,
            label: Some(names[class].0.clone()),
        });
        truths.push(SlideTruth {
            slide_id,
            class_index: class,
            class_id: names[class].0.clone(),
            planted: PlantedSquare { x: u64::from(ux) * tile, y: u64::from(uy) * tile, size: u64::from(side) * tile },
        });
    }
    let tiles = EmbeddingStore::from_entries(spec.input_dim, tile_entries)?;
    Ok((layouts, Some(tiles), GroundTruth { slides: truths }))
}

/// Length of the intersection of `[a, a+len)` and `[b, b+len)`.
fn overlap(a: u64, b: u64, len: u64) -> u64 {
    (a.max(b)..(a + len).min(b + len)).count() as u64
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl SyntheticDataset {
    /// Writes every file under `dir` and returns the manifest path.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("slides")).map_err(|e| Error::io(dir, e))?;
        let st = &self.manifest.stores;
        self.dictionary.save(dir.join(&st.dictionary))?;
        self.images.save(dir.join(&st.images))?;
        self.texts.save(dir.join(&st.texts))?;
        self.corpus.save(dir.join(&st.corpus))?;
        if let (Some(tiles), Some(name)) = (&self.tiles, &st.tiles) {
            tiles.save(dir.join(name))?;
        }
        write_json(&dir.join(&st.class_prompts), &self.class_prompts)?;
        for (layout, rel) in self.layouts.iter().zip(&self.manifest.slides) {
            write_json(&dir.join(rel), layout)?;
        }
        if let Some(rel) = &self.manifest.ground_truth {
            write_json(&dir.join(rel), &self.truth)?;
        }
        let path = dir.join("manifest.json");
        write_json(&path, &self.manifest)?;
        Ok(path)
    }
}
