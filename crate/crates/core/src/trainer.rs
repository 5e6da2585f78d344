//! Toy two-tower encoder trained with the bag-level MIL-NCE objective.
//!
//! For a batch of `B` bag pairs, with image-tower outputs `u` and text-tower
//! outputs `w` (both unit norm):
//!
//! ```text
//! L = -(1/B) Σ_i log( Σ_{m,n} exp(u_{i,m}·w_{i,n}/σ) / Σ_m Σ_j Σ_n exp(u_{i,m}·w_{j,n}/σ) )
//! ```
//!
//! Both sums are evaluated with log-sum-exp. Gradients are derived by hand
//! through the normalization and the linear layers and are checked against
//! central differences in the tests.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bags::{BagPair, TextEmbeddings};
use crate::embedding::{dot, EmbeddingStore, EmbeddingVector};
use crate::error::{Error, Result};

const DEGENERATE_NORM: f64 = 1e-30;

/// Single linear layer `z = Wᵀx + b` followed by ℓ2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    d_in: usize,
    d_emb: usize,
    /// Row-major `d_in × d_emb`.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Tower {
    pub fn new(d_in: usize, d_emb: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if d_in == 0 || d_emb < 2 {
            return Err(Error::InvalidConfig(format!("tower needs d_in >= 1 and d_emb >= 2, got {d_in}x{d_emb}")));
        }
        if weight.len() != d_in * d_emb {
            return Err(Error::DimensionMismatch { expected: d_in * d_emb, found: weight.len() });
        }
        if bias.len() != d_emb {
            return Err(Error::DimensionMismatch { expected: d_emb, found: bias.len() });
        }
        if weight.iter().chain(&bias).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { d_in, d_emb, weight, bias })
    }

    /// Square identity map with zero bias.
    pub fn identity(d: usize) -> Result<Self> {
        let mut weight = vec![0.0; d * d];
        for i in 0..d {
            weight[i * d + i] = 1.0;
        }
        Self::new(d, d, weight, vec![0.0; d])
    }

    /// Gaussian weights with variance `1/d_in`, zero bias.
    pub fn random(d_in: usize, d_emb: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::random_with_std(d_in, d_emb, 1.0 / (d_in as f64).sqrt(), rng)
    }

    /// Gaussian weights with standard deviation `scale`, zero bias.
    pub fn random_with_std(d_in: usize, d_emb: usize, scale: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let weight = (0..d_in * d_emb)
            .map(|_| {
                let g: f64 = StandardNormal.sample(rng);
                g * scale
            })
            .collect();
        Self::new(d_in, d_emb, weight, vec![0.0; d_emb])
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_emb(&self) -> usize {
        self.d_emb
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (a, &xa) in x.iter().enumerate() {
            let row = &self.weight[a * self.d_emb..(a + 1) * self.d_emb];
            for (zk, wk) in z.iter_mut().zip(row) {
                *zk += xa * wk;
            }
        }
        z
    }

    /// Returns the unit output and the pre-normalization norm.
    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        if x.len() != self.d_in {
            return Err(Error::DimensionMismatch { expected: self.d_in, found: x.len() });
        }
        let z = self.pre_activation(x);
        let n = dot(&z, &z).sqrt();
        if !n.is_finite() {
            return Err(Error::NonFinite);
        }
        if n < DEGENERATE_NORM {
            return Err(Error::DegenerateOutput);
        }
        Ok((z.into_iter().map(|v| v / n).collect(), n))
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.0)
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn param_mut(&mut self, i: usize) -> &mut f64 {
        let nw = self.weight.len();
        if i < nw {
            &mut self.weight[i]
        } else {
            &mut self.bias[i - nw]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TowerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl TowerGrad {
    fn zeros(t: &Tower) -> Self {
        Self { weight: vec![0.0; t.weight.len()], bias: vec![0.0; t.bias.len()] }
    }

    fn get(&self, i: usize) -> f64 {
        let nw = self.weight.len();
        if i < nw {
            self.weight[i]
        } else {
            self.bias[i - nw]
        }
    }

    pub fn get_mut(&mut self, i: usize) -> &mut f64 {
        let nw = self.weight.len();
        if i < nw {
            &mut self.weight[i]
        } else {
            &mut self.bias[i - nw]
        }
    }
}

/// Gradients for the image tower (`theta`) and the text tower (`phi`).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub d_theta: TowerGrad,
    pub d_phi: TowerGrad,
}

impl GradientSet {
    fn get(&self, i: usize) -> f64 {
        let n = self.d_theta.weight.len() + self.d_theta.bias.len();
        if i < n {
            self.d_theta.get(i)
        } else {
            self.d_phi.get(i - n)
        }
    }

    pub fn max_abs(&self) -> f64 {
        [&self.d_theta, &self.d_phi]
            .iter()
            .flat_map(|g| g.weight.iter().chain(&g.bias))
            .fold(0.0, |acc, x| acc.max(x.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderInit {
    /// Both towers start from the same random projection, so text and image
    /// features that agree in input space start out aligned.
    Shared,
    /// Independent random projections.
    Independent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoTowerEncoder {
    pub image: Tower,
    pub text: Tower,
}

impl TwoTowerEncoder {
    pub fn new(image: Tower, text: Tower) -> Result<Self> {
        if image.d_emb != text.d_emb {
            return Err(Error::DimensionMismatch { expected: image.d_emb, found: text.d_emb });
        }
        Ok(Self { image, text })
    }

    pub fn identity(d: usize) -> Result<Self> {
        Self::new(Tower::identity(d)?, Tower::identity(d)?)
    }

    pub fn init(d_in: usize, d_emb: usize, init: EncoderInit, seed: u64) -> Result<Self> {
        Self::init_with_std(d_in, d_emb, init, 1.0 / (d_in as f64).sqrt(), seed)
    }

    pub fn init_with_std(d_in: usize, d_emb: usize, init: EncoderInit, std: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Tower::random_with_std(d_in, d_emb, std, &mut rng)?;
        let text = match init {
            EncoderInit::Shared => image.clone(),
            EncoderInit::Independent => Tower::random_with_std(d_in, d_emb, std, &mut rng)?,
        };
        Self::new(image, text)
    }

    /// Initial encoder for a training run.
    pub fn from_config(d_in: usize, cfg: &TrainerConfig) -> Result<Self> {
        Self::init_with_std(d_in, cfg.embedding_dim, cfg.init, cfg.init_std, cfg.seed)
    }

    pub fn d_in(&self) -> usize {
        self.image.d_in
    }

    pub fn d_emb(&self) -> usize {
        self.image.d_emb
    }

    pub fn encode_images(&self, features: &[Vec<f64>]) -> Result<Vec<EmbeddingVector>> {
        features.iter().map(|x| EmbeddingVector::new(self.image.encode(x)?)).collect()
    }

    pub fn encode_texts(&self, features: &[Vec<f64>]) -> Result<Vec<EmbeddingVector>> {
        features.iter().map(|x| EmbeddingVector::new(self.text.encode(x)?)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.image.param_count() + self.text.param_count()
    }

    /// Flat parameter access: image weight, image bias, text weight, text bias.
    pub fn param_mut(&mut self, i: usize) -> &mut f64 {
        let n = self.image.param_count();
        if i < n {
            self.image.param_mut(i)
        } else {
            self.text.param_mut(i - n)
        }
    }

    fn zero_grad(&self) -> GradientSet {
        GradientSet { d_theta: TowerGrad::zeros(&self.image), d_phi: TowerGrad::zeros(&self.text) }
    }
}

/// Raw input features of one bag pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BagFeatures {
    pub visuals: Vec<Vec<f64>>,
    pub texts: Vec<Vec<f64>>,
}

/// Looks up the raw features of every item in `pair`.
pub fn resolve_bag(pair: &BagPair, images: &EmbeddingStore, texts: TextEmbeddings<'_>) -> Result<BagFeatures> {
    let visuals = pair
        .visual_bag
        .items
        .iter()
        .map(|v| images.get(&v.visual_id).map(<[f64]>::to_vec).ok_or_else(|| Error::MissingItem(v.visual_id.clone())))
        .collect::<Result<Vec<_>>>()?;
    let texts = pair
        .text_bag
        .items
        .iter()
        .map(|t| texts.get(&t.text_id).map(<[f64]>::to_vec).ok_or_else(|| Error::MissingTextEmbedding(t.text_id.clone())))
        .collect::<Result<Vec<_>>>()?;
    Ok(BagFeatures { visuals, texts })
}

fn validate_batch(batch: &[&BagFeatures], sigma: f64) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("batch is empty".into()));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {sigma}")));
    }
    for (i, bag) in batch.iter().enumerate() {
        if bag.visuals.is_empty() || bag.texts.is_empty() {
            return Err(Error::EmptyBag(format!("batch item {i}")));
        }
    }
    Ok(())
}

/// Options of the contrastive objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub sigma: f64,
    /// Average the image-anchored objective with its text-anchored mirror.
    pub symmetric: bool,
}

impl LossOptions {
    pub fn new(sigma: f64) -> Self {
        Self { sigma, symmetric: false }
    }
}

struct Encoded {
    out: Vec<Vec<f64>>,
    norms: Vec<f64>,
    owner: Vec<usize>,
}

fn encode_all(tower: &Tower, batch: &[&BagFeatures], pick: fn(&BagFeatures) -> &[Vec<f64>]) -> Result<Encoded> {
    let mut e = Encoded { out: Vec::new(), norms: Vec::new(), owner: Vec::new() };
    for (i, bag) in batch.iter().enumerate() {
        for x in pick(bag) {
            let (u, n) = tower.forward(x)?;
            e.out.push(u);
            e.norms.push(n);
            e.owner.push(i);
        }
    }
    Ok(e)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Core of the objective on scaled similarities `s[r * nc + c]`, where row
/// `r` is a visual item of bag `visual_owner[r]` and column `c` a text item of
/// bag `text_owner[c]`. Returns the loss and, if requested, `dL/ds`.
fn bag_nce(
    s: &[f64],
    visual_owner: &[usize],
    text_owner: &[usize],
    b: usize,
    symmetric: bool,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let (nr, nc) = (visual_owner.len(), text_owner.len());
    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let rows_of = |i: usize| (0..nr).filter(move |&r| visual_owner[r] == i);
    let cols_of = |i: usize| (0..nc).filter(move |&c| text_owner[c] == i);

    let mut gs = if want_grad { vec![0.0; nr * nc] } else { Vec::new() };
    let directions: &[(bool, f64)] = if symmetric { &[(false, 0.5), (true, 0.5)] } else { &[(false, 1.0)] };
    let mut total = 0.0;
    for &(text_anchored, weight) in directions {
        let scale = weight / b as f64;
        for i in 0..b {
            let pos = rows_of(i).flat_map(|r| cols_of(i).map(move |c| (r, c)));
            let num = log_sum_exp(pos.clone().map(|(r, c)| s[r * nc + c]));
            let neg: Vec<(usize, usize)> = if text_anchored {
                cols_of(i).flat_map(|c| (0..nr).map(move |r| (r, c))).collect()
            } else {
                rows_of(i).flat_map(|r| (0..nc).map(move |c| (r, c))).collect()
            };
            let den = log_sum_exp(neg.iter().map(|&(r, c)| s[r * nc + c]));
            // the positive cells are a subset of the negatives; clamp rounding
            total += scale * (den - num).max(0.0);
            if want_grad {
                for &(r, c) in &neg {
                    gs[r * nc + c] += scale * (s[r * nc + c] - den).exp();
                }
                for (r, c) in pos {
                    gs[r * nc + c] -= scale * (s[r * nc + c] - num).exp();
                }
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok((total, gs))
}

/// The objective evaluated directly on a similarity matrix: `sims[r][c]` is the
/// similarity of visual item `r` (in bag `visual_bag[r]`) and text item `c` (in
/// bag `text_bag[c]`). Bags are numbered `0..B`.
pub fn milnce_from_similarities(
    sims: &[Vec<f64>],
    visual_bag: &[usize],
    text_bag: &[usize],
    opts: LossOptions,
) -> Result<f64> {
    if sims.len() != visual_bag.len() || sims.iter().any(|row| row.len() != text_bag.len()) {
        return Err(Error::ShapeMismatch("similarity matrix does not match bag assignments".into()));
    }
    if !(opts.sigma > 0.0) {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {}", opts.sigma)));
    }
    let b = visual_bag.iter().chain(text_bag).max().map_or(0, |m| m + 1);
    for i in 0..b {
        if !visual_bag.contains(&i) || !text_bag.contains(&i) {
            return Err(Error::EmptyBag(format!("bag {i}")));
        }
    }
    let s: Vec<f64> = sims.iter().flatten().map(|x| x / opts.sigma).collect();
    Ok(bag_nce(&s, visual_bag, text_bag, b, opts.symmetric, false)?.0)
}

/// Loss plus, if requested, its gradient. `s[r][c] = u_r·w_c/σ`.
fn loss_impl(
    enc: &TwoTowerEncoder,
    batch: &[&BagFeatures],
    opts: LossOptions,
    want_grad: bool,
) -> Result<(f64, Option<GradientSet>)> {
    validate_batch(batch, opts.sigma)?;
    let vis = encode_all(&enc.image, batch, |b| &b.visuals)?;
    let txt = encode_all(&enc.text, batch, |b| &b.texts)?;
    let (nr, nc) = (vis.out.len(), txt.out.len());

    let mut s = vec![0.0; nr * nc];
    for r in 0..nr {
        for c in 0..nc {
            s[r * nc + c] = dot(&vis.out[r], &txt.out[c]) / opts.sigma;
        }
    }
    let (total, gs) = bag_nce(&s, &vis.owner, &txt.owner, batch.len(), opts.symmetric, want_grad)?;
    if !want_grad {
        return Ok((total, None));
    }

    let d = enc.d_emb();
    let mut du = vec![vec![0.0; d]; nr];
    let mut dw = vec![vec![0.0; d]; nc];
    for r in 0..nr {
        for c in 0..nc {
            let g = gs[r * nc + c] / opts.sigma;
            if g == 0.0 {
                continue;
            }
            for k in 0..d {
                du[r][k] += g * txt.out[c][k];
                dw[c][k] += g * vis.out[r][k];
            }
        }
    }
    let mut grads = enc.zero_grad();
    backprop(&enc.image, batch, |b| &b.visuals, &vis, &du, &mut grads.d_theta);
    backprop(&enc.text, batch, |b| &b.texts, &txt, &dw, &mut grads.d_phi);
    Ok((total, Some(grads)))
}

/// Pushes `d loss / d output` back through normalization and the linear layer.
fn backprop(
    tower: &Tower,
    batch: &[&BagFeatures],
    pick: fn(&BagFeatures) -> &[Vec<f64>],
    enc: &Encoded,
    d_out: &[Vec<f64>],
    grad: &mut TowerGrad,
) {
    let d = tower.d_emb;
    let inputs = batch.iter().flat_map(|b| pick(b).iter());
    for ((x, (u, du)), &n) in inputs.zip(enc.out.iter().zip(d_out)).zip(&enc.norms) {
        // d(z/|z|)/dz = (I - u uᵀ)/|z|
        let proj = dot(u, du);
        let dz: Vec<f64> = (0..d).map(|k| (du[k] - u[k] * proj) / n).collect();
        for (a, &xa) in x.iter().enumerate() {
            if xa == 0.0 {
                continue;
            }
            let row = &mut grad.weight[a * d..(a + 1) * d];
            for (gk, dzk) in row.iter_mut().zip(&dz) {
                *gk += xa * dzk;
            }
        }
        for (gb, dzk) in grad.bias.iter_mut().zip(&dz) {
            *gb += dzk;
        }
    }
}

pub fn milnce_loss(enc: &TwoTowerEncoder, batch: &[&BagFeatures], opts: LossOptions) -> Result<f64> {
    Ok(loss_impl(enc, batch, opts, false)?.0)
}

pub fn milnce_loss_and_grad(
    enc: &TwoTowerEncoder,
    batch: &[&BagFeatures],
    opts: LossOptions,
) -> Result<(f64, GradientSet)> {
    let (loss, grads) = loss_impl(enc, batch, opts, true)?;
    Ok((loss, grads.expect("gradient requested")))
}

/// Max over parameters of `|analytic - central| / max(|central|, 1e-3·scale)`
/// where `central` is the five-point central difference with step `h` and
/// `scale` the largest `|central|` over all parameters.
///
/// Both choices keep the reference itself well below 1e-6 relative error: the
/// three-point stencil's `O(h²)` truncation error alone reaches 1e-6 at
/// `h = 1e-5` on some small instances, and components far below the gradient's
/// scale are dominated by rounding in the loss (about `ε·L/h`), so a plain
/// per-component ratio would measure that noise rather than the gradient.
pub fn finite_diff_check_against(
    enc: &TwoTowerEncoder,
    batch: &[&BagFeatures],
    opts: LossOptions,
    h: f64,
    analytic: &GradientSet,
) -> Result<f64> {
    let mut probe = enc.clone();
    let mut central = Vec::with_capacity(enc.param_count());
    for i in 0..enc.param_count() {
        let orig = *probe.param_mut(i);
        let mut at = |offset: f64| {
            *probe.param_mut(i) = orig + offset;
            milnce_loss(&probe, batch, opts)
        };
        let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
        *probe.param_mut(i) = orig;
        central.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h));
    }
    let floor = (1e-3 * central.iter().fold(0.0f64, |m, c| m.max(c.abs()))).max(1e-12);
    Ok(central
        .iter()
        .enumerate()
        .map(|(i, c)| (analytic.get(i) - c).abs() / c.abs().max(floor))
        .fold(0.0, f64::max))
}

pub fn finite_diff_check(enc: &TwoTowerEncoder, batch: &[&BagFeatures], opts: LossOptions, h: f64) -> Result<f64> {
    let (_, grads) = milnce_loss_and_grad(enc, batch, opts)?;
    finite_diff_check_against(enc, batch, opts, h, &grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    CosineDecay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub symmetric: bool,
    pub embedding_dim: usize,
    pub init: EncoderInit,
    /// Standard deviation of the initial weights. Tower outputs do not depend
    /// on the weight scale, so this sets how far one Adam step moves them.
    pub init_std: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainerConfig {
    /// Full-scale hyperparameters: B=256, σ=0.02, lr=5e-6, 50 epochs, cosine decay.
    pub fn paper() -> Self {
        Self {
            batch_size: 256,
            temperature: 0.02,
            learning_rate: 5e-6,
            epochs: 50,
            max_steps: None,
            schedule: Schedule::CosineDecay,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            symmetric: false,
            embedding_dim: 32,
            init: EncoderInit::Shared,
            init_std: 1.0,
        }
    }

    /// Small-scale run: B=8, lr=1e-2, 200 steps.
    pub fn desk() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 1e-2,
            epochs: 1000,
            max_steps: Some(200),
            weight_decay: 0.0,
            ..Self::paper()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 || self.max_steps == Some(0) {
            return bad("epochs and max_steps must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std must be positive, got {}", self.init_std));
        }
        if self.embedding_dim < 2 {
            return bad("embedding_dim must be at least 2".into());
        }
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions { sigma: self.temperature, symmetric: self.symmetric }
    }

    pub fn total_steps(&self, corpus_len: usize) -> usize {
        let per_epoch = corpus_len.div_ceil(self.batch_size);
        let all = self.epochs * per_epoch;
        self.max_steps.map_or(all, |m| m.min(all))
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::CosineDecay => {
                let t = step as f64 / total.max(1) as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Adam moments for one flat parameter vector.
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, enc: &mut TwoTowerEncoder, grads: &GradientSet, lr: f64, cfg: &TrainerConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..self.m.len() {
            let g = grads.get(i);
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let p = enc.param_mut(i);
            *p -= lr * cfg.weight_decay * *p;
            *p -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub encoder: TwoTowerEncoder,
    pub trace: Vec<TraceRow>,
    pub steps: usize,
}

/// AdamW on the MIL-NCE loss with a seeded shuffle per epoch. The last batch
/// of an epoch may be partial; `B` is then its actual length.
pub fn train(enc: &TwoTowerEncoder, corpus: &[BagFeatures], cfg: &TrainerConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut enc = enc.clone();
    let mut adam = AdamState::new(enc.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.total_steps(corpus.len());
    let opts = cfg.loss_options();
    let mut trace = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..corpus.len()).collect();

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let step = trace.len();
            if step >= total {
                break 'epochs;
            }
            let batch: Vec<&BagFeatures> = chunk.iter().map(|&i| &corpus[i]).collect();
            let (loss, grads) = match milnce_loss_and_grad(&enc, &batch, opts) {
                Ok(v) => v,
                Err(Error::NonFinite) => return Err(Error::DivergedLoss { step }),
                Err(e) => return Err(e),
            };
            let lr = cfg.lr_at(step, total);
            trace.push(TraceRow { step, epoch, loss, lr });
            adam.step(&mut enc, &grads, lr, cfg);
            if enc.image.weight.iter().chain(&enc.text.weight).any(|p| !p.is_finite()) {
                return Err(Error::DivergedLoss { step });
            }
        }
    }
    let steps = trace.len();
    Ok(TrainOutcome { encoder: enc, trace, steps })
}

/// Mean loss over consecutive batches of `batch_size`, in corpus order.
pub fn corpus_loss(enc: &TwoTowerEncoder, corpus: &[BagFeatures], batch_size: usize, opts: LossOptions) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let refs: Vec<&BagFeatures> = corpus.iter().collect();
    let mut sum = 0.0;
    let mut n = 0;
    for chunk in refs.chunks(batch_size.max(1)) {
        sum += milnce_loss(enc, chunk, opts)?;
        n += 1;
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerFile {
    /// `d_in` rows of `d_emb` values.
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub d_in: usize,
    pub d_emb: usize,
    pub theta: TowerFile,
    pub phi: TowerFile,
    pub config: TrainerConfig,
    pub step: usize,
}

impl Checkpoint {
    pub fn new(enc: &TwoTowerEncoder, config: &TrainerConfig, step: usize) -> Self {
        let file = |t: &Tower| TowerFile {
            weight: t.weight.chunks(t.d_emb).map(<[f64]>::to_vec).collect(),
            bias: t.bias.clone(),
        };
        Self { d_in: enc.d_in(), d_emb: enc.d_emb(), theta: file(&enc.image), phi: file(&enc.text), config: config.clone(), step }
    }

    pub fn encoder(&self) -> Result<TwoTowerEncoder> {
        let tower = |f: &TowerFile| -> Result<Tower> {
            if f.weight.len() != self.d_in || f.weight.iter().any(|r| r.len() != self.d_emb) {
                return Err(Error::InvalidConfig(format!("checkpoint matrix is not {}x{}", self.d_in, self.d_emb)));
            }
            Tower::new(self.d_in, self.d_emb, f.weight.concat(), f.bias.clone())
        };
        TwoTowerEncoder::new(tower(&self.theta)?, tower(&self.phi)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[TraceRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("step,epoch,loss,lr\n");
    for r in trace {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.epoch, r.loss, r.lr));
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Naive evaluation straight from the formula: no log-sum-exp, plain loops.
    fn brute_force_loss(enc: &TwoTowerEncoder, batch: &[&BagFeatures], sigma: f64) -> f64 {
        let f = |x: &Vec<f64>| enc.image.encode(x).unwrap();
        let g = |x: &Vec<f64>| enc.text.encode(x).unwrap();
        let mut total = 0.0;
        for i in 0..batch.len() {
            let mut num = 0.0;
            let mut den = 0.0;
            for v in &batch[i].visuals {
                let fv = f(v);
                for t in &batch[i].texts {
                    let gt = g(t);
                    let s: f64 = (0..fv.len()).map(|k| fv[k] * gt[k]).sum();
                    num += (s / sigma).exp();
                }
                for bag_j in batch {
                    for t in &bag_j.texts {
                        let gt = g(t);
                        let s: f64 = (0..fv.len()).map(|k| fv[k] * gt[k]).sum();
                        den += (s / sigma).exp();
                    }
                }
            }
            total += (num / den).ln();
        }
        -total / batch.len() as f64
    }

    fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    fn random_instance(seed: u64, max_b: usize, max_bag: usize, d_in: usize, d_emb: usize) -> (TwoTowerEncoder, Vec<BagFeatures>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = TwoTowerEncoder::init(d_in, d_emb, EncoderInit::Independent, rng.random()).unwrap();
        let b = rng.random_range(1..=max_b);
        let bags = (0..b)
            .map(|_| {
                let m = rng.random_range(1..=max_bag);
                let n = rng.random_range(1..=max_bag);
                BagFeatures { visuals: random_features(&mut rng, m, d_in), texts: random_features(&mut rng, n, d_in) }
            })
            .collect();
        (enc, bags)
    }

    fn singleton(v: &[f64], t: &[f64]) -> BagFeatures {
        BagFeatures { visuals: vec![v.to_vec()], texts: vec![t.to_vec()] }
    }

    #[test]
    fn encode_examples() {
        let enc = TwoTowerEncoder::identity(2).unwrap();
        assert_eq!(enc.encode_images(&[vec![3.0, 4.0]]).unwrap()[0].as_slice(), &[0.6, 0.8]);

        let tower = Tower::new(2, 2, vec![0.0; 4], vec![3.0, -4.0]).unwrap();
        assert_eq!(tower.encode(&[0.0, 0.0]).unwrap(), vec![0.6, -0.8]);

        let zero = Tower::new(2, 2, vec![1.0; 4], vec![0.0; 2]).unwrap();
        assert!(matches!(zero.encode(&[0.0, 0.0]), Err(Error::DegenerateOutput)));
        assert!(matches!(zero.encode(&[0.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn single_bag_loss_is_zero_with_zero_gradient() {
        let (enc, bags) = random_instance(5, 1, 5, 4, 3);
        let batch: Vec<_> = bags.iter().take(1).collect();
        let (loss, grads) = milnce_loss_and_grad(&enc, &batch, LossOptions::new(0.3)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.max_abs() < 1e-12, "{}", grads.max_abs());
        assert_eq!(finite_diff_check(&enc, &batch, LossOptions::new(0.3), 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn equal_similarities_give_ln2() {
        let enc = TwoTowerEncoder::identity(3).unwrap();
        let x = vec![0.2, -0.5, 0.9];
        let bag = BagFeatures { visuals: vec![x.clone(); 2], texts: vec![x.clone(); 3] };
        let batch = vec![&bag, &bag];
        let loss = milnce_loss(&enc, &batch, LossOptions::new(0.02)).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn softplus_instance() {
        let enc = TwoTowerEncoder::identity(2).unwrap();
        let a = singleton(&[1.0, 0.0], &[1.0, 0.0]);
        let b = singleton(&[0.0, 1.0], &[0.0, 1.0]);
        let loss = milnce_loss(&enc, &[&a, &b], LossOptions::new(1.0)).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.3132616875).abs() < 1e-10);
    }

    #[test]
    fn matches_brute_force() {
        for seed in 0..40 {
            let (enc, bags) = random_instance(seed, 4, 5, 6, 4);
            let batch: Vec<_> = bags.iter().collect();
            for sigma in [0.02, 0.5, 1.0] {
                let fast = milnce_loss(&enc, &batch, LossOptions::new(sigma)).unwrap();
                let slow = brute_force_loss(&enc, &batch, sigma);
                assert!((fast - slow).abs() < 1e-10, "seed {seed} σ {sigma}: {fast} vs {slow}");
                assert!(fast >= 0.0);
            }
        }
    }

    #[test]
    fn temperature_scaling_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vb = [0, 0, 1, 2, 2];
        let tb = [0, 1, 1, 2];
        let sims: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let base = milnce_from_similarities(&sims, &vb, &tb, LossOptions::new(0.5)).unwrap();
        let scaled: Vec<Vec<f64>> = sims.iter().map(|r| r.iter().map(|x| x * 3.0).collect()).collect();
        let again = milnce_from_similarities(&scaled, &vb, &tb, LossOptions::new(1.5)).unwrap();
        assert!((base - again).abs() < 1e-12);
    }

    #[test]
    fn loss_on_similarities_matches_encoder_path() {
        let (enc, bags) = random_instance(21, 4, 4, 5, 3);
        let batch: Vec<_> = bags.iter().collect();
        let vis: Vec<(usize, Vec<f64>)> = bags.iter().enumerate()
            .flat_map(|(i, b)| b.visuals.iter().map(move |v| (i, v.clone()))).collect();
        let txt: Vec<(usize, Vec<f64>)> = bags.iter().enumerate()
            .flat_map(|(i, b)| b.texts.iter().map(move |t| (i, t.clone()))).collect();
        let sims: Vec<Vec<f64>> = vis.iter()
            .map(|(_, v)| txt.iter().map(|(_, t)| dot(&enc.image.encode(v).unwrap(), &enc.text.encode(t).unwrap())).collect())
            .collect();
        let vb: Vec<usize> = vis.iter().map(|p| p.0).collect();
        let tb: Vec<usize> = txt.iter().map(|p| p.0).collect();
        for symmetric in [false, true] {
            let opts = LossOptions { sigma: 0.1, symmetric };
            let a = milnce_loss(&enc, &batch, opts).unwrap();
            let b = milnce_from_similarities(&sims, &vb, &tb, opts).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let enc = TwoTowerEncoder::init(4, 3, EncoderInit::Independent, seed).unwrap();
            let b = rng.random_range(2..=4);
            let bags: Vec<_> = (0..b)
                .map(|_| BagFeatures { visuals: random_features(&mut rng, 2, 4), texts: random_features(&mut rng, 3, 4) })
                .collect();
            let batch: Vec<_> = bags.iter().collect();
            let err = finite_diff_check(&enc, &batch, LossOptions::new(1.0), 1e-5).unwrap();
            assert!(err <= 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn symmetric_gradient_matches_finite_differences() {
        let (enc, bags) = random_instance(77, 4, 3, 4, 3);
        let batch: Vec<_> = bags.iter().collect();
        let opts = LossOptions { sigma: 1.0, symmetric: true };
        let (loss, _) = milnce_loss_and_grad(&enc, &batch, opts).unwrap();
        assert!(loss >= 0.0);
        assert!(finite_diff_check(&enc, &batch, opts, 1e-5).unwrap() <= 1e-6);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let (enc, bags) = random_instance(9, 4, 3, 4, 3);
        let bags = if bags.len() < 2 { random_instance(10, 4, 3, 4, 3).1 } else { bags };
        let batch: Vec<_> = bags.iter().collect();
        let opts = LossOptions::new(1.0);
        let (_, mut grads) = milnce_loss_and_grad(&enc, &batch, opts).unwrap();
        *grads.d_phi.get_mut(2) += 0.1;
        assert!(finite_diff_check_against(&enc, &batch, opts, 1e-5, &grads).unwrap() > 1e-2);
    }

    #[test]
    fn cosine_schedule_and_total_steps() {
        let cfg = TrainerConfig { batch_size: 4, epochs: 3, max_steps: None, ..TrainerConfig::desk() };
        assert_eq!(cfg.total_steps(10), 9);
        assert_eq!(cfg.lr_at(0, 10), cfg.learning_rate);
        assert!((cfg.lr_at(5, 10) - cfg.learning_rate / 2.0).abs() < 1e-15);
        assert_eq!(TrainerConfig::desk().total_steps(64), 200);
        let paper = TrainerConfig::paper();
        assert_eq!((paper.batch_size, paper.temperature, paper.learning_rate, paper.epochs), (256, 0.02, 5e-6, 50));
    }

    #[test]
    fn partial_batch_single_step() {
        let (enc, bags) = random_instance(4, 3, 3, 4, 3);
        let cfg = TrainerConfig { epochs: 1, batch_size: 256, ..TrainerConfig::paper() };
        let out = train(&enc, &bags, &cfg).unwrap();
        assert_eq!(out.steps, 1);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn training_is_deterministic() {
        let (enc, bags) = random_instance(8, 4, 3, 5, 3);
        let mut corpus = bags.clone();
        corpus.extend(random_instance(18, 4, 3, 5, 3).1);
        let cfg = TrainerConfig { batch_size: 3, max_steps: Some(12), ..TrainerConfig::desk() };
        let a = train(&enc, &corpus, &cfg).unwrap();
        let b = train(&enc, &corpus, &cfg).unwrap();
        let bits = |t: &[TraceRow]| t.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.trace), bits(&b.trace));
        assert_eq!(a.encoder, b.encoder);
    }

    #[test]
    fn rejects_bad_config() {
        let (enc, bags) = random_instance(4, 3, 3, 4, 3);
        assert!(train(&enc, &[], &TrainerConfig::desk()).is_err());
        let cfg = TrainerConfig { temperature: 0.0, ..TrainerConfig::desk() };
        assert!(matches!(train(&enc, &bags, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let enc = TwoTowerEncoder::init(5, 3, EncoderInit::Independent, 2).unwrap();
        let ck = Checkpoint::new(&enc, &TrainerConfig::desk(), 17);
        let text = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encoder().unwrap(), enc);
        assert_eq!(back.theta.weight.len(), 5);
    }
}
