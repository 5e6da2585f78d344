//! Text and visual bag construction for an unlabeled image, and bag pruning.
//!
//! A text bag holds the best dictionary prompt, its eleven generated
//! expansions (5 paraphrases, 3 causes, 3 symptoms) and the top text-corpus
//! neighbors of the image. A visual bag holds images retrieved for each of
//! those prompt-derived texts plus the image's own nearest neighbors.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::process::{Command, Stdio};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{cosine_similarity, text_key, EmbeddingStore};
use crate::error::{Error, Result};
use crate::vocab::PromptDictionary;

pub const PARAPHRASES: usize = 5;
pub const CAUSES: usize = 3;
pub const SYMPTOMS: usize = 3;
/// Upper bound on a text bag: 1 prompt + 11 expansions + 5 retrieved.
pub const MAX_TEXT_BAG: usize = 17;
/// Upper bound on a visual bag: 16 prompt-derived + 5 image neighbors.
pub const MAX_VISUAL_BAG: usize = 21;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextExpansion {
    pub paraphrases: Vec<String>,
    pub causes: Vec<String>,
    pub symptoms: Vec<String>,
}

impl TextExpansion {
    pub fn validate(&self) -> Result<()> {
        for (name, list, want) in [
            ("paraphrases", &self.paraphrases, PARAPHRASES),
            ("causes", &self.causes, CAUSES),
            ("symptoms", &self.symptoms, SYMPTOMS),
        ] {
            if list.len() != want {
                return Err(Error::MalformedResponse(format!("expected {want} {name}, got {}", list.len())));
            }
            if list.iter().any(|s| s.trim().is_empty()) {
                return Err(Error::MalformedResponse(format!("empty entry in {name}")));
            }
        }
        Ok(())
    }

    /// All eleven texts with their bag source, in bag order.
    pub fn tagged(&self) -> impl Iterator<Item = (&str, TextSource)> {
        fn tag(list: &[String], src: TextSource) -> impl Iterator<Item = (&str, TextSource)> {
            list.iter().map(move |s| (s.as_str(), src))
        }
        tag(&self.paraphrases, TextSource::Paraphrase)
            .chain(tag(&self.causes, TextSource::Cause))
            .chain(tag(&self.symptoms, TextSource::Symptom))
    }
}

/// Source of alternate descriptions for a prompt (a language model in
/// production, a deterministic template stub in tests).
pub trait TextExpansionProvider {
    fn expand(&self, prompt: &str, seed: u64) -> Result<TextExpansion>;
}

/// Asks `provider` for the 5/3/3 expansion of `prompt` and validates the counts.
pub fn expand_text(prompt: &str, provider: &dyn TextExpansionProvider, seed: u64) -> Result<TextExpansion> {
    if prompt.trim().is_empty() {
        return Err(Error::InvalidConfig("prompt text is empty".into()));
    }
    let expansion = provider.expand(prompt, seed)?;
    expansion.validate()?;
    Ok(expansion)
}

const PARAPHRASE_TEMPLATES: &[&str] = &[
    "a histology image showing {}",
    "microscopic appearance of {}",
    "tissue section with features of {}",
    "H&E stained slide demonstrating {}",
    "pathology image consistent with {}",
    "high power view of {}",
    "photomicrograph of {}",
    "a biopsy specimen showing {}",
];
const CAUSE_TEMPLATES: &[&str] = &[
    "{} arising from chronic inflammation",
    "{} associated with genetic mutations",
    "{} linked to environmental exposure",
    "{} secondary to infection",
    "{} related to hormonal factors",
];
const SYMPTOM_TEMPLATES: &[&str] = &[
    "{} presenting with a palpable mass",
    "{} presenting with pain",
    "{} presenting with bleeding",
    "{} presenting with weight loss",
    "{} presenting with local swelling",
];

/// Template-based provider: picks templates with a ChaCha stream seeded by
/// `(prompt, seed)`, so every output contains the prompt verbatim.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubProvider;

impl StubProvider {
    fn rng(prompt: &str, seed: u64) -> ChaCha8Rng {
        let digest = Sha256::digest(prompt.as_bytes());
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        for (k, s) in key.iter_mut().zip(seed.to_le_bytes()) {
            *k ^= s;
        }
        ChaCha8Rng::from_seed(key)
    }
}

impl TextExpansionProvider for StubProvider {
    fn expand(&self, prompt: &str, seed: u64) -> Result<TextExpansion> {
        let mut rng = Self::rng(prompt, seed);
        let mut pick = |templates: &[&str], n: usize| -> Vec<String> {
            let mut t = templates.to_vec();
            t.shuffle(&mut rng);
            t[..n].iter().map(|tpl| tpl.replace("{}", prompt)).collect()
        };
        Ok(TextExpansion {
            paraphrases: pick(PARAPHRASE_TEMPLATES, PARAPHRASES),
            causes: pick(CAUSE_TEMPLATES, CAUSES),
            symptoms: pick(SYMPTOM_TEMPLATES, SYMPTOMS),
        })
    }
}

#[derive(Serialize)]
struct ProviderRequest<'a> {
    prompt: &'a str,
    seed: u64,
}

/// Runs an external command per request: a `{"prompt", "seed"}` JSON object
/// is written to its stdin and a [`TextExpansion`] JSON object is read back
/// from its stdout.
#[derive(Debug, Clone)]
pub struct ExternalProcessProvider {
    pub program: String,
    pub args: Vec<String>,
}

impl TextExpansionProvider for ExternalProcessProvider {
    fn expand(&self, prompt: &str, seed: u64) -> Result<TextExpansion> {
        let unavailable = |e: std::io::Error| Error::ProviderUnavailable(format!("{}: {e}", self.program));
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(unavailable)?;
        let request = serde_json::to_vec(&ProviderRequest { prompt, seed }).expect("request serializes");
        {
            let mut stdin = child.stdin.take().expect("stdin is piped");
            // a provider may exit without reading its input
            let _ = stdin.write_all(&request).and_then(|_| stdin.write_all(b"\n"));
        }
        let output = child.wait_with_output().map_err(unavailable)?;
        if !output.status.success() {
            return Err(Error::ProviderUnavailable(format!("{} exited with {}", self.program, output.status)));
        }
        serde_json::from_slice(&output.stdout).map_err(|e| Error::MalformedResponse(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextSource {
    DictionaryMatch,
    Paraphrase,
    Cause,
    Symptom,
    RetrievedDescription,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualSource {
    PromptRetrieved,
    ExpansionRetrieved,
    ImageRetrieved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextItem {
    pub text_id: String,
    pub source: TextSource,
    /// Cosine similarity to the anchor image.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualItem {
    pub visual_id: String,
    pub source: VisualSource,
    pub provenance_text_id: Option<String>,
    /// Cosine similarity to the anchor image.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextBag {
    pub image_id: String,
    pub items: Vec<TextItem>,
    pub n_bag: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualBag {
    pub image_id: String,
    pub items: Vec<VisualItem>,
    pub m_bag: usize,
}

impl TextBag {
    fn from_items(image_id: &str, items: Vec<TextItem>) -> Self {
        Self { image_id: image_id.to_owned(), n_bag: items.len(), items }
    }
}

impl VisualBag {
    fn from_items(image_id: &str, items: Vec<VisualItem>) -> Self {
        Self { image_id: image_id.to_owned(), m_bag: items.len(), items }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagPair {
    pub text_bag: TextBag,
    pub visual_bag: VisualBag,
}

impl BagPair {
    pub fn new(text_bag: TextBag, visual_bag: VisualBag) -> Result<Self> {
        let pair = Self { text_bag, visual_bag };
        pair.validate()?;
        Ok(pair)
    }

    pub fn image_id(&self) -> &str {
        &self.text_bag.image_id
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.text_bag.image_id;
        let bad = |why: String| Err(Error::InvalidConfig(format!("bag pair for {id:?}: {why}")));
        if self.visual_bag.image_id != *id {
            return bad(format!("visual bag belongs to {:?}", self.visual_bag.image_id));
        }
        if self.text_bag.items.is_empty() || self.visual_bag.items.is_empty() {
            return Err(Error::EmptyBag(id.clone()));
        }
        if self.text_bag.n_bag != self.text_bag.items.len() || self.visual_bag.m_bag != self.visual_bag.items.len() {
            return bad("bag size field disagrees with item count".into());
        }
        let mut seen = HashSet::new();
        if !self.text_bag.items.iter().all(|t| seen.insert(t.text_id.as_str())) {
            return bad("duplicate text id".into());
        }
        seen.clear();
        if !self.visual_bag.items.iter().all(|v| seen.insert(v.visual_id.as_str())) {
            return bad("duplicate visual id".into());
        }
        Ok(())
    }
}

/// Retrieval counts used during bag construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BagConfig {
    /// Text-corpus neighbors of the image added to the text bag.
    pub retrieved_texts: usize,
    /// Images retrieved per prompt-derived text.
    pub images_per_text: usize,
    /// Extra neighbors of the matched prompt beyond `images_per_text`.
    pub extra_prompt_images: usize,
    /// Image-store neighbors of the image itself.
    pub retrieved_images: usize,
    /// Seed handed to the expansion provider.
    pub provider_seed: u64,
}

impl Default for BagConfig {
    fn default() -> Self {
        Self { retrieved_texts: 5, images_per_text: 1, extra_prompt_images: 4, retrieved_images: 5, provider_seed: 0 }
    }
}

/// Resolves bag text ids to embeddings: dictionary ids first, then the
/// hash-keyed expansion store, then the description corpus.
#[derive(Clone, Copy)]
pub struct TextEmbeddings<'a> {
    pub dictionary: &'a PromptDictionary,
    pub expansions: &'a EmbeddingStore,
    pub corpus: &'a EmbeddingStore,
}

impl<'a> TextEmbeddings<'a> {
    pub fn get(&self, text_id: &str) -> Option<&'a [f64]> {
        self.dictionary
            .get(text_id)
            .map(|r| r.embedding.as_slice())
            .or_else(|| self.expansions.get(text_id))
            .or_else(|| self.corpus.get(text_id))
    }

    fn require(&self, text_id: &str) -> Result<&'a [f64]> {
        self.get(text_id).ok_or_else(|| Error::MissingTextEmbedding(text_id.to_owned()))
    }
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Builds the text bag: matched prompt, its expansions, then the top corpus
/// descriptions for the image. Repeated ids keep their first occurrence.
pub fn build_text_bag(
    image_id: &str,
    image_emb: &[f64],
    texts: TextEmbeddings<'_>,
    provider: &dyn TextExpansionProvider,
    cfg: &BagConfig,
) -> Result<TextBag> {
    check_dim(texts.dictionary.dim(), image_emb.len())?;
    if texts.corpus.is_empty() {
        return Err(Error::EmptyTextStore);
    }
    check_dim(texts.corpus.dim(), image_emb.len())?;

    let best = texts.dictionary.best_match(image_emb)?;
    let prompt = texts.dictionary.get(&best.prompt_id).expect("match comes from dictionary");
    let expansion = expand_text(&prompt.text, provider, cfg.provider_seed)?;

    let mut items = Vec::with_capacity(MAX_TEXT_BAG);
    let mut seen = HashSet::new();
    seen.insert(best.prompt_id.clone());
    items.push(TextItem { text_id: best.prompt_id, source: TextSource::DictionaryMatch, score: best.score });

    for (text, source) in expansion.tagged() {
        let key = text_key(text);
        let emb = texts.expansions.get(&key).ok_or_else(|| Error::MissingTextEmbedding(key.clone()))?;
        let score = cosine_similarity(image_emb, emb)?;
        if seen.insert(key.clone()) {
            items.push(TextItem { text_id: key, source, score });
        }
    }
    for hit in texts.corpus.top_k_neighbors(image_emb, cfg.retrieved_texts)? {
        if seen.insert(hit.id.clone()) {
            items.push(TextItem { text_id: hit.id, source: TextSource::RetrievedDescription, score: hit.score });
        }
    }
    Ok(TextBag::from_items(image_id, items))
}

/// Builds the visual bag from the prompt-derived texts of `text_bag` and the
/// image's own neighbors. Retrieved descriptions do not seed image retrieval.
pub fn build_visual_bag(
    text_bag: &TextBag,
    image_emb: &[f64],
    image_store: &EmbeddingStore,
    texts: TextEmbeddings<'_>,
    cfg: &BagConfig,
) -> Result<VisualBag> {
    if image_store.is_empty() {
        return Err(Error::EmptyImageStore);
    }
    check_dim(image_store.dim(), image_emb.len())?;

    let mut items = Vec::with_capacity(MAX_VISUAL_BAG);
    let mut seen = HashSet::new();
    let mut push = |id: String, source, provenance: Option<&str>| -> Result<()> {
        if seen.contains(&id) {
            return Ok(());
        }
        let score = cosine_similarity(image_emb, image_store.get(&id).expect("id comes from store"))?;
        seen.insert(id.clone());
        items.push(VisualItem { visual_id: id, source, provenance_text_id: provenance.map(str::to_owned), score });
        Ok(())
    };

    let derived: Vec<&TextItem> =
        text_bag.items.iter().filter(|t| t.source != TextSource::RetrievedDescription).collect();
    for t in &derived {
        let source = match t.source {
            TextSource::DictionaryMatch => VisualSource::PromptRetrieved,
            _ => VisualSource::ExpansionRetrieved,
        };
        let emb = texts.require(&t.text_id)?;
        check_dim(image_store.dim(), emb.len())?;
        for hit in image_store.top_k_neighbors(emb, cfg.images_per_text)? {
            push(hit.id, source, Some(&t.text_id))?;
        }
    }
    if let Some(prompt) = derived.iter().find(|t| t.source == TextSource::DictionaryMatch) {
        let emb = texts.require(&prompt.text_id)?;
        let k = cfg.images_per_text + cfg.extra_prompt_images;
        for hit in image_store.top_k_neighbors(emb, k)?.into_iter().skip(cfg.images_per_text) {
            push(hit.id, VisualSource::PromptRetrieved, Some(&prompt.text_id))?;
        }
    }
    for hit in image_store.top_k_neighbors(image_emb, cfg.retrieved_images)? {
        push(hit.id, VisualSource::ImageRetrieved, None)?;
    }
    Ok(VisualBag::from_items(&text_bag.image_id, items))
}

/// How survivors are chosen when pruning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PruneCriterion {
    /// Keep `round_half_up(ratio * n)` highest-scoring items.
    Ratio,
    /// Keep items scoring at least the given similarity.
    Threshold { text_min: f64, visual_min: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub text_keep_ratio: f64,
    pub visual_keep_ratio: f64,
    pub criterion: PruneCriterion,
    /// Prune the visual bag on its own scores.
    pub prune_visual: bool,
    /// Drop expansion-retrieved images whose source text was pruned.
    pub drop_orphaned_visuals: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            text_keep_ratio: 0.9,
            visual_keep_ratio: 0.9,
            criterion: PruneCriterion::Ratio,
            prune_visual: true,
            drop_orphaned_visuals: false,
        }
    }
}

impl PruneConfig {
    pub fn with_ratios(text_keep_ratio: f64, visual_keep_ratio: f64) -> Result<Self> {
        let cfg = Self { text_keep_ratio, visual_keep_ratio, ..Self::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("text_keep_ratio", self.text_keep_ratio), ("visual_keep_ratio", self.visual_keep_ratio)] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must lie in (0, 1], got {r}")));
            }
        }
        Ok(())
    }
}

/// `round_half_up(ratio * n)` clamped to `[1, n]`.
pub fn keep_count(ratio: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    // the epsilon absorbs representation error in ratios such as 0.3
    let k = (ratio * n as f64 + 0.5 + 1e-9).floor() as usize;
    k.clamp(1, n)
}

/// Indices of the `keep` highest scores (ties to the earlier item), with
/// `pinned` forced in at the expense of the weakest survivor. Returned in
/// ascending order.
fn select_top(scores: &[f64], keep: usize, pinned: Option<usize>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut chosen: Vec<usize> = order[..keep].to_vec();
    if let Some(p) = pinned {
        if !chosen.contains(&p) {
            chosen.pop();
            chosen.push(p);
        }
    }
    chosen.sort_unstable();
    chosen
}

/// Prunes both bags of `pair`, preserving item order among survivors. The
/// dictionary-match text always survives.
pub fn prune_bags(pair: &BagPair, cfg: &PruneConfig) -> BagPair {
    let text = &pair.text_bag.items;
    let pinned = text.iter().position(|t| t.source == TextSource::DictionaryMatch);
    let text_keep: Vec<usize> = match cfg.criterion {
        PruneCriterion::Ratio => {
            let scores: Vec<f64> = text.iter().map(|t| t.score).collect();
            select_top(&scores, keep_count(cfg.text_keep_ratio, text.len()), pinned)
        }
        PruneCriterion::Threshold { text_min, .. } => (0..text.len())
            .filter(|&i| text[i].score >= text_min || Some(i) == pinned)
            .collect(),
    };
    let text_items: Vec<TextItem> = text_keep.iter().map(|&i| text[i].clone()).collect();

    let mut visual: Vec<VisualItem> = pair.visual_bag.items.clone();
    if cfg.prune_visual {
        let keep: Vec<usize> = match cfg.criterion {
            PruneCriterion::Ratio => {
                let scores: Vec<f64> = visual.iter().map(|v| v.score).collect();
                select_top(&scores, keep_count(cfg.visual_keep_ratio, visual.len()), None)
            }
            PruneCriterion::Threshold { visual_min, .. } => {
                let kept: Vec<usize> = (0..visual.len()).filter(|&i| visual[i].score >= visual_min).collect();
                if kept.is_empty() && !visual.is_empty() {
                    let scores: Vec<f64> = visual.iter().map(|v| v.score).collect();
                    select_top(&scores, 1, None)
                } else {
                    kept
                }
            }
        };
        visual = keep.iter().map(|&i| visual[i].clone()).collect();
    }
    if cfg.drop_orphaned_visuals {
        let surviving: HashSet<&str> = text_items.iter().map(|t| t.text_id.as_str()).collect();
        visual.retain(|v| {
            v.source != VisualSource::ExpansionRetrieved
                || v.provenance_text_id.as_deref().is_some_and(|p| surviving.contains(p))
        });
    }

    BagPair {
        text_bag: TextBag::from_items(&pair.text_bag.image_id, text_items),
        visual_bag: VisualBag::from_items(&pair.visual_bag.image_id, visual),
    }
}

/// Everything needed to build bags for a collection of images.
pub struct BagSources<'a> {
    pub texts: TextEmbeddings<'a>,
    pub image_store: &'a EmbeddingStore,
    pub provider: &'a dyn TextExpansionProvider,
    pub bag: BagConfig,
    pub prune: PruneConfig,
}

impl BagSources<'_> {
    /// Unpruned text and visual bags for one image.
    pub fn build(&self, image_id: &str, image_emb: &[f64]) -> Result<BagPair> {
        let text_bag = build_text_bag(image_id, image_emb, self.texts, self.provider, &self.bag)?;
        let visual_bag = build_visual_bag(&text_bag, image_emb, self.image_store, self.texts, &self.bag)?;
        BagPair::new(text_bag, visual_bag)
    }

    pub fn build_pruned(&self, image_id: &str, image_emb: &[f64]) -> Result<BagPair> {
        Ok(prune_bags(&self.build(image_id, image_emb)?, &self.prune))
    }
}

pub fn write_bags_jsonl(path: impl AsRef<Path>, bags: &[BagPair]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for bag in bags {
        serde_json::to_writer(&mut w, bag).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_bags_jsonl(path: impl AsRef<Path>) -> Result<Vec<BagPair>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bags = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bag: BagPair = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
        bag.validate()?;
        bags.push(bag);
    }
    Ok(bags)
}
