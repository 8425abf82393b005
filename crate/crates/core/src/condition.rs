//! Reference conditioning: a small frozen image encoder, the fully-connected
//! adapter that maps its embeddings to attention tokens, and the learnable
//! null condition used for classifier-free guidance.
//!
//! In bottleneck mode only the global embedding of the reference reaches the
//! denoiser (one token). In all-tokens mode the patch embeddings follow it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_reference, AugmentationPolicy};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::nn::{self, Bound, ParamSet};
use crate::optim::{AdamW, AdamWConfig};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Bottleneck,
    AllTokens,
}

impl EncoderMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EncoderMode::Bottleneck => "bottleneck",
            EncoderMode::AllTokens => "all_tokens",
        }
    }
}

impl std::str::FromStr for EncoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bottleneck" => Ok(EncoderMode::Bottleneck),
            "all_tokens" => Ok(EncoderMode::AllTokens),
            other => Err(Error::Parameter(format!("unknown encoder mode {other:?}"))),
        }
    }
}

/// `L x D_attn` tokens fed to cross-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionTokens {
    pub tokens: Tensor,
    pub mode: EncoderMode,
}

impl ConditionTokens {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Side of the square every image is resized to before encoding.
    pub input_size: usize,
    pub embed_dim: usize,
    pub width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: 32,
            embed_dim: 64,
            width: 16,
        }
    }
}

impl EncoderConfig {
    /// Patch grid side: the input is halved three times.
    pub fn patch_grid(&self) -> usize {
        self.input_size / 8
    }

    pub fn num_patches(&self) -> usize {
        self.patch_grid() * self.patch_grid()
    }

    fn validate(&self) -> Result<()> {
        if self.input_size < 8 || !self.input_size.is_multiple_of(8) || self.embed_dim == 0 || self.width == 0 {
            return Err(Error::Parameter(format!("invalid encoder config {self:?}")));
        }
        Ok(())
    }
}

/// Frozen encoder weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

pub fn init_encoder(config: EncoderConfig, rng: &mut impl Rng) -> Result<EncoderParams> {
    config.validate()?;
    let w = config.width;
    let mut set = ParamSet::new();
    nn::init_conv(&mut set, "enc.conv0", 3, w, 3, rng);
    nn::init_conv(&mut set, "enc.conv1", w, 2 * w, 3, rng);
    nn::init_conv(&mut set, "enc.conv2", 2 * w, 4 * w, 3, rng);
    nn::init_conv(&mut set, "enc.conv3", 4 * w, 4 * w, 3, rng);
    nn::init_linear(&mut set, "enc.head", 4 * w, config.embed_dim, rng);
    Ok(EncoderParams { config, params: set })
}

/// Returns the `[N, D]` global embeddings and `[N, P, D]` patch embeddings
/// (both before normalization).
fn encoder_forward(g: &mut Graph, p: &Bound, x: Var) -> (Var, Var) {
    let mut h = nn::conv(g, p, "enc.conv0", x, 1, 1);
    h = g.silu(h);
    for (i, name) in ["enc.conv1", "enc.conv2", "enc.conv3"].iter().enumerate() {
        h = nn::conv(g, p, name, h, 2, 1);
        if i < 2 {
            h = g.silu(h);
        }
    }
    let pooled = g.mean_pool_spatial(h);
    let global = nn::linear(g, p, "enc.head", pooled);
    let tokens = g.to_tokens(h);
    let patches = nn::linear(g, p, "enc.head", tokens);
    (global, patches)
}

/// Unit-normalizes `v` and scales it by `sqrt(len)`, so entries are O(1).
fn standardize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let s = (v.len() as f64).sqrt() / norm;
    v.iter_mut().for_each(|x| *x *= s);
}

impl EncoderParams {
    fn prepare(&self, images: &[&Image]) -> Result<Tensor> {
        let s = self.config.input_size;
        let resized: Vec<Image> = images
            .iter()
            .map(|img| {
                if img.channels() != 3 {
                    return Err(Error::Shape(format!("encoder needs RGB, got {} channels", img.channels())));
                }
                Ok(img.resize(s, s))
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Image> = resized.iter().collect();
        Image::batch_to_tensor(&refs)
    }

    /// Global embedding followed by the patch embeddings for each image,
    /// as `(P + 1) x D` matrices, each row standardized.
    pub fn embed_all(&self, images: &[&Image]) -> Result<Vec<Tensor>> {
        let x = self.prepare(images)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let xv = g.constant(x);
        let (global, patches) = encoder_forward(&mut g, &bound, xv);
        let d = self.config.embed_dim;
        let p = self.config.num_patches();
        let (gd, pd) = (g.value(global).data(), g.value(patches).data());
        Ok((0..images.len())
            .map(|n| {
                let mut rows = Vec::with_capacity((p + 1) * d);
                let mut first = gd[n * d..(n + 1) * d].to_vec();
                standardize(&mut first);
                rows.extend(first);
                for chunk in pd[n * p * d..(n + 1) * p * d].chunks(d) {
                    let mut row = chunk.to_vec();
                    standardize(&mut row);
                    rows.extend(row);
                }
                Tensor::from_vec(&[p + 1, d], rows).unwrap()
            })
            .collect())
    }

    /// Standardized global embedding of one image.
    pub fn global_embedding(&self, image: &Image) -> Result<Vec<f64>> {
        let all = self.embed_all(&[image])?;
        Ok(all[0].data()[..self.config.embed_dim].to_vec())
    }
}

/// Raw embedding sequence of a reference: `1 x D` in bottleneck mode,
/// `(P + 1) x D` in all-tokens mode.
pub fn encode_reference(encoder: &EncoderParams, reference: &Image, mode: EncoderMode) -> Result<Tensor> {
    let all = encoder.embed_all(&[reference])?.remove(0);
    match mode {
        EncoderMode::AllTokens => Ok(all),
        EncoderMode::Bottleneck => {
            let d = encoder.config.embed_dim;
            Tensor::from_vec(&[1, d], all.data()[..d].to_vec())
        }
    }
}

/// Batched [`encode_reference`], parallel across images.
pub fn encode_references(encoder: &EncoderParams, references: &[&Image], mode: EncoderMode) -> Result<Vec<Tensor>> {
    par::map(references, |r| encode_reference(encoder, r, mode))
        .into_iter()
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub attention_dim: usize,
}

/// Fully-connected stack `D_emb -> D_attn -> ... -> D_attn` with SiLU between layers.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub config: AdapterConfig,
    pub params: ParamSet,
}

pub fn init_adapter(config: AdapterConfig, rng: &mut impl Rng) -> Result<AdapterParams> {
    if config.depth == 0 || config.embed_dim == 0 || config.attention_dim == 0 {
        return Err(Error::Parameter(format!("invalid adapter config {config:?}")));
    }
    // Variance-preserving init. The default fan-in bound shrinks the tokens
    // by about 3x per layer, which left the cross-attention nearly blind to
    // the reference at depth 3.
    let mut set = ParamSet::new();
    for i in 0..config.depth {
        let d_in = if i == 0 { config.embed_dim } else { config.attention_dim };
        // E[silu(x)^2] is about 0.355 for unit-normal x
        let gain = if i == 0 { 1.0 } else { 1.0 / 0.355f64.sqrt() };
        let bound = gain * (3.0 / d_in as f64).sqrt();
        let w = (0..d_in * config.attention_dim).map(|_| rng.random_range(-bound..bound)).collect();
        set.insert(format!("fc.{i}.weight"), Tensor::from_vec(&[config.attention_dim, d_in], w)?);
        set.insert(format!("fc.{i}.bias"), Tensor::zeros(&[config.attention_dim]));
    }
    Ok(AdapterParams { config, params: set })
}

/// Adapter applied tokenwise on a graph; `raw` is `[L, D_emb]`.
pub fn adapt_graph(g: &mut Graph, p: &Bound, config: &AdapterConfig, raw: Var) -> Result<Var> {
    let s = g.shape(raw);
    if s.len() != 2 || s[1] != config.embed_dim {
        return Err(Error::Shape(format!("adapter input {:?}, expected [L, {}]", s, config.embed_dim)));
    }
    let mut h = raw;
    for i in 0..config.depth {
        h = nn::linear(g, p, &format!("fc.{i}"), h);
        if i + 1 < config.depth {
            h = g.silu(h);
        }
    }
    Ok(h)
}

pub fn adapt(adapter: &AdapterParams, raw: &Tensor, mode: EncoderMode) -> Result<ConditionTokens> {
    let mut g = Graph::new();
    let bound = adapter.params.bind(&mut g, false);
    let x = g.constant(raw.clone());
    let out = adapt_graph(&mut g, &bound, &adapter.config, x)?;
    Ok(ConditionTokens {
        tokens: g.value(out).clone(),
        mode,
    })
}

/// Learnable stand-in for the reference embedding (`1 x D_emb`).
#[derive(Clone, Debug, PartialEq)]
pub struct NullCondition {
    pub v: Tensor,
}

impl NullCondition {
    pub fn init(embed_dim: usize, rng: &mut impl Rng) -> Self {
        let data = (0..embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        NullCondition {
            v: Tensor::from_vec(&[1, embed_dim], data).unwrap(),
        }
    }
}

pub fn null_tokens(null: &NullCondition, adapter: &AdapterParams, mode: EncoderMode) -> Result<ConditionTokens> {
    adapt(adapter, &null.v, mode)
}

/// Settings for contrastive pretraining of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            steps: 300,
            batch_size: 32,
            learning_rate: 2e-3,
            temperature: 0.1,
        }
    }
}

/// A randomly cropped, flipped, rotated, blurred and warped view.
pub fn contrastive_view(image: &Image, size: usize, rng: &mut impl Rng) -> Image {
    let (h, w) = (image.height(), image.width());
    let scale = rng.random_range(0.7..=1.0);
    let ch = ((h as f64 * scale).round() as usize).clamp(1, h);
    let cw = ((w as f64 * scale).round() as usize).clamp(1, w);
    let y = rng.random_range(0..=h - ch);
    let x = rng.random_range(0..=w - cw);
    let crop = image.crop(x, y, cw, ch).resize(size, size);
    augment_reference(&crop, &AugmentationPolicy::default(), rng)
}

/// Normalized-temperature cross-entropy over two views per image.
fn contrastive_loss(g: &mut Graph, p: &Bound, views: Tensor, temperature: f64) -> Var {
    let n2 = views.shape()[0];
    let b = n2 / 2;
    let x = g.constant(views);
    let (global, _) = encoder_forward(g, p, x);
    let z = g.normalize_rows(global);
    let sim = g.matmul(z, z, true);
    let sim = g.scale(sim, 1.0 / temperature);
    let mut self_mask = Tensor::zeros(&[n2, n2]);
    for i in 0..n2 {
        self_mask.data_mut()[i * n2 + i] = -1e9;
    }
    let self_mask = g.constant(self_mask);
    let logits = g.add(sim, self_mask);
    let targets: Vec<usize> = (0..n2).map(|i| (i + b) % n2).collect();
    g.cross_entropy_rows(logits, &targets)
}

/// Trains a fresh encoder so two views of the same image embed closer than
/// views of different images. The result is rounded to `f32` and frozen.
pub fn pretrain_encoder(
    images: &[Image],
    encoder_config: EncoderConfig,
    config: &ContrastiveConfig,
    rng: &mut impl Rng,
) -> Result<EncoderParams> {
    if images.is_empty() {
        return Err(Error::Parameter("contrastive pretraining needs at least one image".into()));
    }
    if config.batch_size < 2 {
        return Err(Error::Parameter("contrastive batch needs at least two images".into()));
    }
    let mut enc = init_encoder(encoder_config, rng)?;
    let shapes: Vec<&[usize]> = enc.params.tensors().iter().map(Tensor::shape).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            learning_rate: config.learning_rate,
            ..Default::default()
        },
        &shapes,
    );
    let size = encoder_config.input_size;
    for step in 0..config.steps {
        let picks: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..images.len())).collect();
        let mut views = Vec::with_capacity(2 * picks.len());
        for _ in 0..2 {
            for &i in &picks {
                views.push(contrastive_view(&images[i], size, rng));
            }
        }
        let refs: Vec<&Image> = views.iter().collect();
        let batch = Image::batch_to_tensor(&refs)?;
        let mut g = Graph::new();
        let bound = enc.params.bind(&mut g, true);
        let loss = contrastive_loss(&mut g, &bound, batch, config.temperature);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("contrastive loss is {value} at step {step}")));
        }
        let grads = g.backward(loss);
        let grads: Vec<Tensor> = bound
            .vars()
            .iter()
            .zip(enc.params.tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect();
        let mut params: Vec<&mut Tensor> = enc.params.tensors_mut().iter_mut().collect();
        opt.update(&mut params, &grads)?;
        if step % 50 == 0 {
            log::debug!("encoder step {step}: loss {value:.4}");
        }
    }
    enc.params.round_to_f32();
    Ok(enc)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}
