//! Run configuration and the end-to-end commands:
//! `gen-synth → build-bags → train → eval-tiles | eval-slides | segment`.
//!
//! A run is described by one TOML document. Everything a command writes lands
//! under `<out_dir>/run-<hash>/`, where the hash covers every setting that
//! changes data, bags or weights; evaluation settings (prompt mode, K, bootstrap)
//! only change the names of the reports they produce.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bags::{
    read_bags_jsonl, write_bags_jsonl, BagConfig, BagPair, BagSources, ExternalProcessProvider, PruneConfig,
    StubProvider, TextEmbeddings, TextExpansionProvider,
};
use crate::embedding::{cosine_similarity, EmbeddingStore};
use crate::error::{Error, Result};
use crate::metrics::{classification_report, dice_precision_recall, format_table, LabeledPredictions, MetricReport, OverlapScores};
use crate::synth::{generate_synthetic, DatasetManifest, GroundTruth, Split, SyntheticSpec};
use crate::trainer::{
    corpus_loss, resolve_bag, train, write_trace_csv, BagFeatures, Checkpoint, Preset, TrainerConfig, TwoTowerEncoder,
};
use crate::vocab::PromptDictionary;
use crate::zeroshot::{
    build_class_embeddings, classify_tile, load_class_prompts, segment_slide, sweep_k, tissue_mask_otsu,
    ClassEmbedding, ClassPromptSet, ClassPrompts, PoolingConfig, PromptMode, ScoreMatrix, SlideLayout, TissuePolarity,
};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding `manifest.json`; `<run>/data` when unset.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderConfig {
    #[default]
    Stub,
    External {
        program: String,
        #[serde(default)]
        args: Vec<String>,
    },
}

impl ProviderConfig {
    pub fn provider(&self) -> Box<dyn TextExpansionProvider> {
        match self {
            ProviderConfig::Stub => Box::new(StubProvider),
            ProviderConfig::External { program, args } => {
                Box::new(ExternalProcessProvider { program: program.clone(), args: args.clone() })
            }
        }
    }
}

/// `preset` plus any [`TrainerConfig`] fields to override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerSection {
    #[serde(default = "default_preset")]
    pub preset: Preset,
    #[serde(flatten)]
    pub overrides: toml::Table,
}

fn default_preset() -> Preset {
    Preset::Desk
}

impl Default for TrainerSection {
    fn default() -> Self {
        Self { preset: Preset::Desk, overrides: toml::Table::new() }
    }
}

impl TrainerSection {
    pub fn resolve(&self, preset: Option<Preset>) -> Result<TrainerConfig> {
        let to_table = |c: &TrainerConfig| toml::Table::try_from(c).expect("trainer config serializes");
        // optional fields only appear in the table when set
        let all_set = TrainerConfig { max_steps: Some(1), ..TrainerConfig::desk() };
        let known: Vec<String> = to_table(&all_set).keys().cloned().collect();
        let mut table = to_table(&TrainerConfig::preset(preset.unwrap_or(self.preset)));
        for (k, v) in &self.overrides {
            if !known.contains(k) {
                return Err(Error::InvalidConfig(format!("trainer: unknown field {k:?}")));
            }
            table.insert(k.clone(), v.clone());
        }
        let cfg: TrainerConfig = table.try_into().map_err(|e| Error::InvalidConfig(format!("trainer: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZeroShotSection {
    pub mode: PromptMode,
    pub polarity: TissuePolarity,
}

impl Default for ZeroShotSection {
    fn default() -> Self {
        Self { mode: PromptMode::Merged, polarity: TissuePolarity::Dark }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolingSection {
    pub k_candidates: Vec<usize>,
    /// Evaluate this K only instead of sweeping.
    pub k: Option<usize>,
}

impl Default for PoolingSection {
    fn default() -> Self {
        Self { k_candidates: PoolingConfig::default().k_candidates, k: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub bootstrap_resamples: usize,
    pub confidence: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { bootstrap_resamples: 1000, confidence: 0.95 }
    }
}

/// The whole run. The top-level `seed` is copied into every seeded component
/// (generator, provider, trainer, bootstrap).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub synth: SyntheticSpec,
    pub bags: BagConfig,
    pub provider: ProviderConfig,
    pub prune: PruneConfig,
    pub trainer: TrainerSection,
    pub zeroshot: ZeroShotSection,
    pub pooling: PoolingSection,
    pub metrics: MetricsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            data: DataSection::default(),
            synth: SyntheticSpec::default(),
            bags: BagConfig::default(),
            provider: ProviderConfig::default(),
            prune: PruneConfig::default(),
            trainer: TrainerSection::default(),
            zeroshot: ZeroShotSection::default(),
            pooling: PoolingSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

/// Command-line overrides applied on top of a [`RunConfig`].
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub preset: Option<Preset>,
    pub out_dir: Option<PathBuf>,
}

/// A resolved run: configuration with overrides applied, plus its directories.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub trainer: TrainerConfig,
    pub run_id: String,
    pub run_dir: PathBuf,
    pub data_dir: PathBuf,
}

#[derive(Serialize)]
struct HashedSettings<'a> {
    seed: u64,
    data: &'a DataSection,
    synth: &'a SyntheticSpec,
    bags: &'a BagConfig,
    provider: &'a ProviderConfig,
    prune: &'a PruneConfig,
    trainer: &'a TrainerConfig,
}

impl Run {
    /// Resolves `config`; relative paths in it are taken relative to `base_dir`.
    pub fn new(mut config: RunConfig, base_dir: &Path, overrides: &Overrides) -> Result<Self> {
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        let seed = config.seed;
        config.synth.seed = seed;
        config.synth.provider_seed = seed;
        config.bags.provider_seed = seed;
        let mut trainer = config.trainer.resolve(overrides.preset)?;
        trainer.seed = seed;
        config.synth.validate()?;
        config.prune.validate()?;
        if config.pooling.k_candidates.is_empty() || config.pooling.k_candidates.contains(&0) || config.pooling.k == Some(0) {
            return Err(Error::InvalidConfig("pooling: K values must be positive".into()));
        }
        if !(config.metrics.confidence > 0.0 && config.metrics.confidence < 1.0) || config.metrics.bootstrap_resamples == 0 {
            return Err(Error::InvalidConfig("metrics: need 0 < confidence < 1 and at least one resample".into()));
        }

        let hashed = HashedSettings {
            seed,
            data: &config.data,
            synth: &config.synth,
            bags: &config.bags,
            provider: &config.provider,
            prune: &config.prune,
            trainer: &trainer,
        };
        let digest = Sha256::digest(serde_json::to_vec(&hashed).expect("settings serialize"));
        let run_id = format!("run-{}", &hex::encode(digest)[..12]);
        let out_dir = overrides.out_dir.clone().unwrap_or_else(|| base_dir.join(&config.out_dir));
        let run_dir = out_dir.join(&run_id);
        let data_dir = match &config.data.dir {
            Some(d) => base_dir.join(d),
            None => run_dir.join("data"),
        };
        Ok(Self { config, trainer, run_id, run_dir, data_dir })
    }

    pub fn from_file(path: impl AsRef<Path>, overrides: &Overrides) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(RunConfig::load(path)?, &base, overrides)
    }

    pub fn bags_path(&self) -> PathBuf {
        self.run_dir.join("bags.jsonl")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.run_dir.join("checkpoint.json")
    }

    pub fn trace_path(&self) -> PathBuf {
        self.run_dir.join("trace.csv")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.run_dir.join("eval")
    }

    pub fn masks_dir(&self) -> PathBuf {
        self.run_dir.join("masks")
    }

    fn ensure_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
    }

    fn write_config(&self) -> Result<()> {
        self.ensure_dir(&self.run_dir)?;
        #[derive(Serialize)]
        struct Resolved<'a> {
            run_id: &'a str,
            config: &'a RunConfig,
            trainer: &'a TrainerConfig,
        }
        write_json(
            &self.run_dir.join("config.json"),
            &Resolved { run_id: &self.run_id, config: &self.config, trainer: &self.trainer },
        )
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("missing file {}", path.display())))
    }
}

/// Every store and file referenced by a manifest, loaded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub dictionary: PromptDictionary,
    pub images: EmbeddingStore,
    pub texts: EmbeddingStore,
    pub corpus: EmbeddingStore,
    pub tiles: Option<EmbeddingStore>,
    pub class_prompts: ClassPrompts,
    pub layouts: Vec<SlideLayout>,
    pub truth: Option<GroundTruth>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join("manifest.json");
        require_file(&manifest_path)?;
        let manifest = DatasetManifest::load(&manifest_path)?;
        let st = &manifest.stores;
        let mut files = vec![&st.dictionary, &st.images, &st.texts, &st.corpus, &st.class_prompts];
        files.extend(st.tiles.as_ref());
        files.extend(manifest.slides.iter());
        files.extend(manifest.ground_truth.as_ref());
        for f in files {
            require_file(&dir.join(f))?;
        }

        let images = EmbeddingStore::load(dir.join(&st.images))?;
        if let Some(item) = manifest.items.iter().find(|i| !images.contains(&i.id)) {
            return Err(Error::MissingItem(item.id.clone()));
        }
        let class_prompts = load_class_prompts(dir.join(&st.class_prompts))?;
        if let Some(c) = manifest.classes.iter().find(|c| !class_prompts.contains_key(*c)) {
            return Err(Error::EmptyPromptSet(c.clone()));
        }
        let tiles = st.tiles.as_ref().map(|t| EmbeddingStore::load(dir.join(t))).transpose()?;
        let layouts = manifest.slides.iter().map(|s| SlideLayout::load(dir.join(s))).collect::<Result<Vec<_>>>()?;
        let truth = manifest.ground_truth.as_ref().map(|g| GroundTruth::load(dir.join(g))).transpose()?;
        Ok(Self {
            dictionary: PromptDictionary::load(dir.join(&st.dictionary))?,
            texts: EmbeddingStore::load(dir.join(&st.texts))?,
            corpus: EmbeddingStore::load(dir.join(&st.corpus))?,
            images,
            tiles,
            class_prompts,
            layouts,
            truth,
            manifest,
        })
    }

    pub fn text_embeddings(&self) -> TextEmbeddings<'_> {
        TextEmbeddings { dictionary: &self.dictionary, expansions: &self.texts, corpus: &self.corpus }
    }

    /// Class embeddings in the text tower's output space, for `classes` in order.
    pub fn class_embeddings(&self, enc: &TwoTowerEncoder, classes: &[String], mode: PromptMode) -> Result<Vec<ClassEmbedding>> {
        let sets = classes
            .iter()
            .map(|c| {
                let prompts = self.class_prompts.get(c).ok_or_else(|| Error::EmptyPromptSet(c.clone()))?;
                let raw = ClassPromptSet::resolve(c, prompts, &self.texts)?;
                let raw = if mode == PromptMode::Single { raw.first_only() } else { raw };
                let embeddings =
                    enc.encode_texts(&raw.embeddings)?.into_iter().map(|e| e.into_inner()).collect();
                Ok(ClassPromptSet { embeddings, ..raw })
            })
            .collect::<Result<Vec<_>>>()?;
        build_class_embeddings(&sets, mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub manifest: PathBuf,
    pub images: usize,
    pub slides: usize,
}

pub fn gen_synth(run: &Run) -> Result<GenSummary> {
    run.write_config()?;
    let ds = generate_synthetic(&run.config.synth)?;
    let manifest = ds.write(&run.data_dir)?;
    Ok(GenSummary { manifest, images: ds.images.len(), slides: ds.layouts.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagSummary {
    pub images: usize,
    pub mean_text_bag: f64,
    pub mean_visual_bag: f64,
    pub max_text_bag: usize,
    pub max_visual_bag: usize,
}

/// Builds and prunes bags for every manifest image, in manifest order, and
/// writes them as JSON lines.
pub fn build_bags(run: &Run) -> Result<(Vec<BagPair>, BagSummary)> {
    run.write_config()?;
    let ds = Dataset::load(&run.data_dir)?;
    let provider = run.config.provider.provider();
    let sources = BagSources {
        texts: ds.text_embeddings(),
        image_store: &ds.images,
        provider: provider.as_ref(),
        bag: run.config.bags,
        prune: run.config.prune,
    };
    let bags = ds
        .manifest
        .items
        .iter()
        .map(|item| sources.build_pruned(&item.id, ds.images.get(&item.id).expect("checked on load")))
        .collect::<Result<Vec<_>>>()?;
    write_bags_jsonl(run.bags_path(), &bags)?;
    let n = bags.len().max(1) as f64;
    let summary = BagSummary {
        images: bags.len(),
        mean_text_bag: bags.iter().map(|b| b.text_bag.n_bag as f64).sum::<f64>() / n,
        mean_visual_bag: bags.iter().map(|b| b.visual_bag.m_bag as f64).sum::<f64>() / n,
        max_text_bag: bags.iter().map(|b| b.text_bag.n_bag).max().unwrap_or(0),
        max_visual_bag: bags.iter().map(|b| b.visual_bag.m_bag).max().unwrap_or(0),
    };
    write_json(&run.run_dir.join("bags_summary.json"), &summary)?;
    Ok((bags, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub bags: usize,
    pub steps: usize,
    /// Mean corpus loss before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Trains on the bags of the train-split images.
pub fn train_encoder(run: &Run) -> Result<(TwoTowerEncoder, TrainSummary)> {
    run.write_config()?;
    let ds = Dataset::load(&run.data_dir)?;
    require_file(&run.bags_path())?;
    let bags = read_bags_jsonl(run.bags_path())?;
    let train_ids: std::collections::HashSet<&str> =
        ds.manifest.items.iter().filter(|i| i.split == Split::Train).map(|i| i.id.as_str()).collect();
    let corpus = bags
        .iter()
        .filter(|b| train_ids.contains(b.image_id()))
        .map(|b| resolve_bag(b, &ds.images, ds.text_embeddings()))
        .collect::<Result<Vec<BagFeatures>>>()?;
    let cfg = &run.trainer;
    let init = TwoTowerEncoder::from_config(ds.images.dim(), cfg)?;
    let opts = cfg.loss_options();
    let initial_loss = corpus_loss(&init, &corpus, cfg.batch_size, opts)?;
    let outcome = train(&init, &corpus, cfg)?;
    let final_loss = corpus_loss(&outcome.encoder, &corpus, cfg.batch_size, opts)?;

    Checkpoint::new(&outcome.encoder, cfg, outcome.steps).save(run.checkpoint_path())?;
    write_trace_csv(run.trace_path(), &outcome.trace)?;
    let summary = TrainSummary { bags: corpus.len(), steps: outcome.steps, initial_loss, final_loss };
    write_json(&run.run_dir.join("train_summary.json"), &summary)?;
    Ok((outcome.encoder, summary))
}

fn load_encoder(run: &Run) -> Result<TwoTowerEncoder> {
    require_file(&run.checkpoint_path())?;
    Checkpoint::load(run.checkpoint_path())?.encoder()
}

fn mode_name(mode: PromptMode) -> &'static str {
    match mode {
        PromptMode::Single => "single",
        PromptMode::Merged => "merged",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePrediction {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileReport {
    pub mode: PromptMode,
    pub classes: Vec<String>,
    pub metrics: Vec<MetricReport>,
    pub predictions: Vec<TilePrediction>,
}

impl TileReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.metric == name).map(|m| m.point)
    }
}

/// Zero-shot classification of the labeled test images (all labeled images
/// when there is no test split).
pub fn eval_tiles(run: &Run, mode: PromptMode) -> Result<TileReport> {
    let ds = Dataset::load(&run.data_dir)?;
    let enc = load_encoder(run)?;
    let classes = ds.class_embeddings(&enc, &ds.manifest.classes, mode)?;
    let labeled: Vec<_> = ds.manifest.items.iter().filter(|i| i.label.is_some()).collect();
    let test: Vec<_> = labeled.iter().copied().filter(|i| i.split == Split::Test).collect();
    let items = if test.is_empty() { labeled } else { test };
    if items.is_empty() {
        return Err(Error::InvalidConfig("no labeled images to evaluate".into()));
    }
    let feats: Vec<Vec<f64>> = items.iter().map(|i| ds.images.get(&i.id).expect("checked on load").to_vec()).collect();
    let predictions = enc
        .encode_images(&feats)?
        .iter()
        .zip(&items)
        .map(|(e, item)| {
            let r = classify_tile(e.as_slice(), &classes)?;
            Ok(TilePrediction { id: item.id.clone(), label: item.label.expect("filtered"), predicted: r.predicted, scores: r.scores })
        })
        .collect::<Result<Vec<_>>>()?;
    let lp = LabeledPredictions::new(
        classes.len(),
        predictions.iter().map(|p| p.label).collect(),
        predictions.iter().map(|p| p.predicted).collect(),
    )?
    .with_scores(predictions.iter().map(|p| p.scores.clone()).collect())?;
    let m = &run.config.metrics;
    let metrics = classification_report(&lp, m.bootstrap_resamples, m.confidence, run.config.seed)?;
    let report = TileReport { mode, classes: ds.manifest.classes.clone(), metrics, predictions };

    run.ensure_dir(&run.eval_dir())?;
    let stem = format!("tiles_{}", mode_name(mode));
    write_json(&run.eval_dir().join(format!("{stem}.json")), &report)?;
    write_text(&run.eval_dir().join(format!("{stem}.txt")), &format_table(&[(stem.clone(), report.metrics.clone())]))?;
    Ok(report)
}

/// Cosine scores of the listed tiles of `layout` against `classes`.
fn score_tiles(
    layout: &SlideLayout,
    tiles: &[usize],
    store: &EmbeddingStore,
    enc: &TwoTowerEncoder,
    classes: &[ClassEmbedding],
) -> Result<ScoreMatrix> {
    let feats = tiles
        .iter()
        .map(|&t| {
            let id = &layout.grid[t].embedding_id;
            store.get(id).map(<[f64]>::to_vec).ok_or_else(|| Error::MissingItem(id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(tiles.len() * classes.len());
    for e in enc.encode_images(&feats)? {
        for c in classes {
            data.push(cosine_similarity(e.as_slice(), &c.vector)?);
        }
    }
    ScoreMatrix::new(tiles.len(), classes.len(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KRow {
    pub k: usize,
    pub balanced_accuracy: f64,
    pub weighted_f1: f64,
    pub auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideOutcome {
    pub slide_id: String,
    pub label: usize,
    pub predicted: usize,
    pub tissue_tiles: usize,
    pub threshold: Option<f64>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideReport {
    pub mode: PromptMode,
    /// Candidate classes; labels and predictions index into this list.
    pub classes: Vec<String>,
    pub best_k: usize,
    pub sweep: Vec<KRow>,
    pub metrics: Vec<MetricReport>,
    pub slides: Vec<SlideOutcome>,
}

impl SlideReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.metric == name).map(|m| m.point)
    }

    /// Fraction of slides predicted correctly at the best K.
    pub fn accuracy(&self) -> f64 {
        self.slides.iter().filter(|s| s.label == s.predicted).count() as f64 / self.slides.len().max(1) as f64
    }
}

fn candidate_classes(ds: &Dataset) -> Vec<String> {
    ds.manifest.classes.iter().filter(|c| Some(*c) != ds.manifest.background_class.as_ref()).cloned().collect()
}

fn tile_store(ds: &Dataset) -> Result<&EmbeddingStore> {
    ds.tiles.as_ref().ok_or_else(|| Error::InvalidConfig("dataset has no tile store".into()))
}

/// Top-K slide classification over the non-background classes, sweeping K
/// (or using `k` alone when given).
pub fn eval_slides(run: &Run, mode: PromptMode, k: Option<usize>) -> Result<SlideReport> {
    let ds = Dataset::load(&run.data_dir)?;
    let enc = load_encoder(run)?;
    let store = tile_store(&ds)?;
    let names = candidate_classes(&ds);
    let classes = ds.class_embeddings(&enc, &names, mode)?;

    let mut labeled = Vec::new();
    let mut meta = Vec::new();
    for layout in &ds.layouts {
        let label = layout
            .label
            .as_ref()
            .and_then(|l| names.iter().position(|n| n == l))
            .ok_or_else(|| Error::InvalidConfig(format!("slide {:?} has no label among {names:?}", layout.slide_id)))?;
        let mask = tissue_mask_otsu(layout, run.config.zeroshot.polarity);
        let tissue = mask.tissue_indices();
        labeled.push((score_tiles(layout, &tissue, store, &enc, &classes)?, label));
        meta.push((layout.slide_id.clone(), tissue.len(), mask.threshold));
    }
    if labeled.is_empty() {
        return Err(Error::InvalidConfig("dataset has no slides".into()));
    }
    let k_candidates = match k.or(run.config.pooling.k) {
        Some(k) => vec![k],
        None => run.config.pooling.k_candidates.clone(),
    };
    let sweep = sweep_k(&labeled, &PoolingConfig { k_candidates })?;
    let best = sweep.rows.iter().find(|r| r.k == sweep.best_k).expect("best K is a row");
    let lp = LabeledPredictions::new(names.len(), labeled.iter().map(|l| l.1).collect(), best.predictions.clone())?
        .with_scores(best.slide_scores.clone())?;
    let m = &run.config.metrics;
    let metrics = classification_report(&lp, m.bootstrap_resamples, m.confidence, run.config.seed)?;
    let slides = meta
        .into_iter()
        .enumerate()
        .map(|(i, (slide_id, tissue_tiles, threshold))| SlideOutcome {
            slide_id,
            label: labeled[i].1,
            predicted: best.predictions[i],
            tissue_tiles,
            threshold,
            scores: best.slide_scores[i].clone(),
        })
        .collect();
    let report = SlideReport {
        mode,
        classes: names,
        best_k: sweep.best_k,
        sweep: sweep
            .rows
            .iter()
            .map(|r| KRow { k: r.k, balanced_accuracy: r.balanced_accuracy, weighted_f1: r.weighted_f1, auroc: r.auroc })
            .collect(),
        metrics,
        slides,
    };

    run.ensure_dir(&run.eval_dir())?;
    let mut stem = format!("slides_{}", mode_name(mode));
    if let Some(k) = k.or(run.config.pooling.k) {
        stem.push_str(&format!("_k{k}"));
    }
    write_json(&run.eval_dir().join(format!("{stem}.json")), &report)?;
    let mut text = format_table(&[(format!("{stem} (K={})", report.best_k), report.metrics.clone())]);
    text.push_str("\nK | balanced accuracy | weighted F1\n");
    for r in &report.sweep {
        text.push_str(&format!("{} | {:.3} | {:.3}\n", r.k, r.balanced_accuracy, r.weighted_f1));
    }
    write_text(&run.eval_dir().join(format!("{stem}.txt")), &text)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub slide_id: String,
    pub cell_size: u64,
    pub width: usize,
    pub height: usize,
    /// PGM value `c + 1` marks class `c`; 0 marks background.
    pub classes: Vec<String>,
    pub tissue_tiles: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap: Option<OverlapScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub mode: PromptMode,
    pub slides: Vec<MaskSidecar>,
    /// Mean Dice of the planted class against the planted square.
    pub mean_dice: Option<f64>,
}

/// Overlap-averaged segmentation of the tissue tiles of every slide over all
/// classes. Writes one PGM and JSON sidecar per slide.
pub fn segment(run: &Run, mode: PromptMode) -> Result<SegmentReport> {
    let ds = Dataset::load(&run.data_dir)?;
    let enc = load_encoder(run)?;
    let store = tile_store(&ds)?;
    let classes = ds.class_embeddings(&enc, &ds.manifest.classes, mode)?;
    let dir = run.masks_dir().join(mode_name(mode));
    run.ensure_dir(&dir)?;

    let mut slides = Vec::new();
    for layout in &ds.layouts {
        let mask = tissue_mask_otsu(layout, run.config.zeroshot.polarity);
        let tissue = mask.tissue_indices();
        if tissue.is_empty() {
            return Err(Error::NoTissueTiles);
        }
        let scores = score_tiles(layout, &tissue, store, &enc, &classes)?;
        let seg = segment_slide(&layout.subset(&mask.tissue), &scores)?;
        write_text_bytes(&dir.join(format!("{}.pgm", layout.slide_id)), &seg.to_pgm())?;

        let truth = ds.truth.as_ref().and_then(|t| t.slides.iter().find(|s| s.slide_id == layout.slide_id));
        let overlap = truth
            .map(|t| {
                let planted = t.planted.mask(seg.cell_size, seg.width, seg.height);
                dice_precision_recall(&seg.class_mask(&[t.class_index]), &planted)
            })
            .transpose()?;
        let sidecar = MaskSidecar {
            slide_id: layout.slide_id.clone(),
            cell_size: seg.cell_size,
            width: seg.width,
            height: seg.height,
            classes: ds.manifest.classes.clone(),
            tissue_tiles: tissue.len(),
            planted_class: truth.map(|t| t.class_index),
            overlap,
        };
        write_json(&dir.join(format!("{}.json", layout.slide_id)), &sidecar)?;
        slides.push(sidecar);
    }
    let dice: Vec<f64> = slides.iter().filter_map(|s| s.overlap.map(|o| o.dice)).collect();
    let mean_dice = (!dice.is_empty()).then(|| dice.iter().sum::<f64>() / dice.len() as f64);
    let report = SegmentReport { mode, slides, mean_dice };
    write_json(&dir.join("summary.json"), &report)?;
    Ok(report)
}

fn write_text_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
