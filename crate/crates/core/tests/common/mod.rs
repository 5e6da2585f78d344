//! Brute-force oracles and fixtures shared by the integration tests. Each
//! oracle is written straight from its definition, with no shared code paths
//! with the library.

#![allow(dead_code)]

use bagalign::bags::{
    build_text_bag, BagConfig, StubProvider, TextBag, TextEmbeddings, TextExpansionProvider, TextSource,
};
use bagalign::embedding::text_key;
use bagalign::trainer::{BagFeatures, TwoTowerEncoder};
use bagalign::vocab::{PromptDictionary, PromptRecord};
use bagalign::EmbeddingStore;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// The bag loss from its definition: plain `exp`, plain sums, one `ln` per bag.
pub fn brute_force_loss(enc: &TwoTowerEncoder, batch: &[&BagFeatures], sigma: f64) -> f64 {
    let u: Vec<Vec<Vec<f64>>> =
        batch.iter().map(|b| b.visuals.iter().map(|x| enc.image.encode(x).unwrap()).collect()).collect();
    let w: Vec<Vec<Vec<f64>>> =
        batch.iter().map(|b| b.texts.iter().map(|x| enc.text.encode(x).unwrap()).collect()).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for i in 0..batch.len() {
        let mut num = 0.0;
        let mut den = 0.0;
        for m in &u[i] {
            for (j, texts) in w.iter().enumerate() {
                for n in texts {
                    let e = (dot(m, n) / sigma).exp();
                    den += e;
                    if j == i {
                        num += e;
                    }
                }
            }
        }
        total -= (num / den).ln();
    }
    total / batch.len() as f64
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_bag(rng: &mut ChaCha8Rng, m: usize, n: usize, d: usize) -> BagFeatures {
    BagFeatures {
        visuals: (0..m).map(|_| gaussian_vec(rng, d)).collect(),
        texts: (0..n).map(|_| gaussian_vec(rng, d)).collect(),
    }
}

pub fn balanced_accuracy_oracle(n_classes: usize, y: &[usize], p: &[usize]) -> f64 {
    let mut sum = 0.0;
    for c in 0..n_classes {
        let members: Vec<usize> = (0..y.len()).filter(|&i| y[i] == c).collect();
        let hits = members.iter().filter(|&&i| p[i] == c).count();
        sum += hits as f64 / members.len() as f64;
    }
    sum / n_classes as f64
}

pub fn weighted_f1_oracle(n_classes: usize, y: &[usize], p: &[usize]) -> f64 {
    let mut out = 0.0;
    for c in 0..n_classes {
        let tp = (0..y.len()).filter(|&i| y[i] == c && p[i] == c).count() as f64;
        let pred = (0..y.len()).filter(|&i| p[i] == c).count() as f64;
        let support = (0..y.len()).filter(|&i| y[i] == c).count() as f64;
        let precision = if pred > 0.0 { tp / pred } else { 0.0 };
        let recall = if support > 0.0 { tp / support } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        out += f1 * support / y.len() as f64;
    }
    out
}

/// Fraction of (positive, negative) pairs ordered correctly, ties one half.
pub fn auroc_oracle(scores: &[f64], positive: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

pub fn pairwise_auroc_oracle(n_classes: usize, y: &[usize], scores: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0.0;
    for a in 0..n_classes {
        for b in a + 1..n_classes {
            let idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == a || y[i] == b).collect();
            let ab: Vec<f64> = idx.iter().map(|&i| scores[i][a] - scores[i][b]).collect();
            let ba: Vec<f64> = idx.iter().map(|&i| scores[i][b] - scores[i][a]).collect();
            let pos_a: Vec<bool> = idx.iter().map(|&i| y[i] == a).collect();
            let pos_b: Vec<bool> = idx.iter().map(|&i| y[i] == b).collect();
            total += (auroc_oracle(&ab, &pos_a) + auroc_oracle(&ba, &pos_b)) / 2.0;
            pairs += 1.0;
        }
    }
    total / pairs
}

pub fn dice_oracle(pred: &[bool], truth: &[bool]) -> f64 {
    let inter = pred.iter().zip(truth).filter(|(a, b)| **a && **b).count() as f64;
    let sizes = (pred.iter().filter(|a| **a).count() + truth.iter().filter(|b| **b).count()) as f64;
    if sizes == 0.0 {
        1.0
    } else {
        2.0 * inter / sizes
    }
}

/// Exhaustive Otsu search: every distinct value is tried as `t`, classes are
/// `≤ t` and `> t`, and the first `t` within 1e-12 (relative) of the best
/// between-class variance wins.
pub fn otsu_oracle(values: &[f64]) -> Option<f64> {
    let mut candidates: Vec<f64> = values.to_vec();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    if candidates.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let variances: Vec<f64> = candidates[..candidates.len() - 1]
        .iter()
        .map(|&t| {
            let low: Vec<f64> = values.iter().copied().filter(|&v| v <= t).collect();
            let high: Vec<f64> = values.iter().copied().filter(|&v| v > t).collect();
            let mu0 = low.iter().sum::<f64>() / low.len() as f64;
            let mu1 = high.iter().sum::<f64>() / high.len() as f64;
            (low.len() as f64 / n) * (high.len() as f64 / n) * (mu0 - mu1) * (mu0 - mu1)
        })
        .collect();
    let best = variances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let i = variances.iter().position(|&v| v >= best - 1e-12 * best.abs()).unwrap();
    Some(candidates[i])
}

/// Mean of the `k` largest values by full sort.
pub fn top_k_mean_oracle(values: &[f64], k: usize) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = k.min(v.len());
    v[..k].iter().sum::<f64>() / k as f64
}

/// Labels covering every class, then random, then shuffled.
pub fn labels_with_all_classes(rng: &mut ChaCha8Rng, n: usize, n_classes: usize) -> Vec<usize> {
    let mut y: Vec<usize> = (0..n).map(|i| if i < n_classes { i } else { rng.random_range(0..n_classes) }).collect();
    for i in (1..y.len()).rev() {
        let j = rng.random_range(0..=i);
        y.swap(i, j);
    }
    y
}

/// Unit vector along axis `i` with a small tilt towards axis 0, so that
/// scores against the axis-0 image are all distinct.
pub fn axis(i: usize, dim: usize, tilt: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    v[0] += tilt;
    v
}

pub const PROMPT: &str = "squamous cell carcinoma";

/// One dictionary prompt, its eleven stub expansions, `corpus_n` corpus texts
/// and `image_n` images, each on its own axis so that no retrieval collides.
pub struct AxisFixture {
    pub dict: PromptDictionary,
    pub expansions: EmbeddingStore,
    pub corpus: EmbeddingStore,
    pub images: EmbeddingStore,
    pub dim: usize,
}

impl AxisFixture {
    pub fn new(corpus_n: usize, image_n: usize) -> Self {
        let dim = 1 + 1 + 11 + corpus_n + image_n + 1;
        let dict = PromptDictionary::new(
            dim,
            vec![PromptRecord {
                id: "scc".into(),
                text: PROMPT.into(),
                acronym: "SCC".into(),
                description: String::new(),
                embedding: axis(1, dim, 0.5),
            }],
        )
        .unwrap();
        let exp = StubProvider.expand(PROMPT, 0).unwrap();
        let expansions = EmbeddingStore::from_entries(
            dim,
            exp.tagged().enumerate().map(|(j, (t, _))| (text_key(t), axis(2 + j, dim, 0.01 * (j + 1) as f64))),
        )
        .unwrap();
        let corpus = EmbeddingStore::from_entries(
            dim,
            (0..corpus_n).map(|j| (format!("desc-{j}"), axis(13 + j, dim, 0.2 + 0.01 * j as f64))),
        )
        .unwrap();
        let images = EmbeddingStore::from_entries(
            dim,
            (0..image_n).map(|j| (format!("img-{j}"), axis(13 + corpus_n + j, dim, 0.3 + 0.01 * j as f64))),
        )
        .unwrap();
        Self { dict, expansions, corpus, images, dim }
    }

    pub fn texts(&self) -> TextEmbeddings<'_> {
        TextEmbeddings { dictionary: &self.dict, expansions: &self.expansions, corpus: &self.corpus }
    }

    pub fn image(&self) -> Vec<f64> {
        axis(0, self.dim, 0.0)
    }

    pub fn text_bag(&self) -> TextBag {
        build_text_bag("h0", &self.image(), self.texts(), &StubProvider, &BagConfig::default()).unwrap()
    }

    /// An image store where every prompt-derived text has its own top-1
    /// image, the prompt has four further neighbors, and the query image has
    /// five neighbors of its own, all distinct.
    pub fn disjoint_image_store(&self, bag: &TextBag) -> EmbeddingStore {
        let texts = self.texts();
        let mut entries = Vec::new();
        for t in bag.items.iter().filter(|t| t.source != TextSource::RetrievedDescription) {
            entries.push((format!("for-{}", t.text_id), texts.get(&t.text_id).unwrap().to_vec()));
        }
        let prompt = texts.get("scc").unwrap().to_vec();
        for j in 0..4 {
            let mut v = prompt.clone();
            v[self.dim - 1] = 0.1 * (j + 1) as f64;
            entries.push((format!("prompt-nb-{j}"), v));
        }
        for j in 0..5 {
            let mut v = self.image();
            v[self.dim - 1] = -0.05 * (j + 1) as f64;
            entries.push((format!("image-nb-{j}"), v));
        }
        EmbeddingStore::from_entries(self.dim, entries).unwrap()
    }
}
