//! Conditional U-shaped noise predictor.
//!
//! Input is the channel concatenation of the noisy image, the masked source
//! and the mask (`2C + 1` channels). A sinusoidal timestep embedding is added
//! inside every residual block, and a single cross-attention block at the
//! lowest resolution reads the condition tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::EditMask;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::nn::{self, Bound, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub base_width: usize,
    pub depth: usize,
    pub attention_dim: usize,
    pub time_embed_dim: usize,
    pub image_channels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            base_width: 32,
            depth: 3,
            attention_dim: 64,
            time_embed_dim: 64,
            image_channels: 3,
        }
    }
}

impl DenoiserConfig {
    pub fn input_channels(&self) -> usize {
        2 * self.image_channels + 1
    }

    /// Channel width at resolution level `level`.
    pub fn level_width(&self, level: usize) -> usize {
        if level == 0 {
            self.base_width
        } else {
            2 * self.base_width
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0
            || self.depth == 0
            || self.attention_dim == 0
            || self.image_channels == 0
            || self.time_embed_dim < 2
            || !self.time_embed_dim.is_multiple_of(2)
        {
            return Err(Error::Parameter(format!("invalid denoiser config {self:?}")));
        }
        Ok(())
    }

    /// Spatial sides must survive `depth - 1` halvings.
    pub fn check_spatial(&self, height: usize, width: usize) -> Result<()> {
        let factor = 1 << (self.depth - 1);
        if !height.is_multiple_of(factor) || !width.is_multiple_of(factor) || height < factor || width < factor {
            return Err(Error::Shape(format!(
                "{height}x{width} input is not divisible by {factor} (depth {})",
                self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub params: ParamSet,
}

fn init_res_block(set: &mut ParamSet, name: &str, c_in: usize, c_out: usize, temb: usize, rng: &mut impl Rng) {
    nn::init_group_norm(set, &format!("{name}.norm1"), c_in);
    nn::init_conv(set, &format!("{name}.conv1"), c_in, c_out, 3, rng);
    nn::init_linear(set, &format!("{name}.temb"), temb, c_out, rng);
    nn::init_group_norm(set, &format!("{name}.norm2"), c_out);
    nn::init_conv(set, &format!("{name}.conv2"), c_out, c_out, 3, rng);
    if c_in != c_out {
        nn::init_conv(set, &format!("{name}.skip"), c_in, c_out, 1, rng);
    }
}

/// Random initialization, except that the first-layer weights reading the
/// masked source and mask channels, and the attention output projection,
/// start at exactly zero.
pub fn init_denoiser(config: DenoiserConfig, rng: &mut impl Rng) -> Result<DenoiserParams> {
    config.validate()?;
    let mut set = ParamSet::new();
    let td = config.time_embed_dim;
    nn::init_linear(&mut set, "time.0", td, td, rng);
    nn::init_linear(&mut set, "time.1", td, td, rng);

    let c_img = config.image_channels;
    nn::init_conv(&mut set, "conv_in", config.input_channels(), config.base_width, 3, rng);
    let w = set.get_mut("conv_in.weight").unwrap();
    let per_out = config.input_channels() * 9;
    for out in w.data_mut().chunks_mut(per_out) {
        out[c_img * 9..].iter_mut().for_each(|v| *v = 0.0);
    }

    let mut ch = config.base_width;
    for i in 0..config.depth {
        let out = config.level_width(i);
        init_res_block(&mut set, &format!("down.{i}"), ch, out, td, rng);
        ch = out;
        if i + 1 < config.depth {
            nn::init_conv(&mut set, &format!("down.{i}.pool"), ch, ch, 3, rng);
        }
    }
    init_res_block(&mut set, "mid.res", ch, ch, td, rng);
    let a = config.attention_dim;
    nn::init_group_norm(&mut set, "mid.attn.norm", ch);
    nn::init_linear(&mut set, "mid.attn.q", ch, a, rng);
    nn::init_linear(&mut set, "mid.attn.k", a, a, rng);
    nn::init_linear(&mut set, "mid.attn.v", a, a, rng);
    set.insert("mid.attn.out.weight", Tensor::zeros(&[ch, a]));
    set.insert("mid.attn.out.bias", Tensor::zeros(&[ch]));

    for i in (0..config.depth).rev() {
        let level = config.level_width(i);
        init_res_block(&mut set, &format!("up.{i}"), ch + level, level, td, rng);
        ch = level;
        if i > 0 {
            let next = config.level_width(i - 1);
            nn::init_conv(&mut set, &format!("up.{i}.upconv"), ch, next, 3, rng);
            ch = next;
        }
    }
    nn::init_group_norm(&mut set, "out.norm", ch);
    nn::init_conv(&mut set, "out.conv", ch, c_img, 3, rng);
    Ok(DenoiserParams { config, params: set })
}

/// `[N, dim]` sinusoidal embedding of integer timesteps.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let freqs = (0..half).map(|j| (-(10000f64).ln() * j as f64 / half as f64).exp());
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((ti as f64 * f).sin(), (ti as f64 * f).cos())).unzip();
        data.extend(sin);
        data.extend(cos);
    }
    Tensor::from_vec(&[t.len(), dim], data).unwrap()
}

fn res_block(g: &mut Graph, p: &Bound, name: &str, x: Var, temb: Var) -> Var {
    let h = nn::group_norm(g, p, &format!("{name}.norm1"), x);
    let h = g.silu(h);
    let h = nn::conv(g, p, &format!("{name}.conv1"), h, 1, 1);
    let t = nn::linear(g, p, &format!("{name}.temb"), temb);
    let h = g.add_channel_bias(h, t);
    let h = nn::group_norm(g, p, &format!("{name}.norm2"), h);
    let h = g.silu(h);
    let h = nn::conv(g, p, &format!("{name}.conv2"), h, 1, 1);
    let skip = if g.shape(x)[1] != g.shape(h)[1] {
        nn::conv(g, p, &format!("{name}.skip"), x, 1, 0)
    } else {
        x
    };
    g.add(h, skip)
}

fn cross_attention(g: &mut Graph, p: &Bound, h: Var, cond: &[Var], attention_dim: usize) -> Var {
    let s = g.shape(h).to_vec();
    let normed = nn::group_norm(g, p, "mid.attn.norm", h);
    let tokens = g.to_tokens(normed);
    let scale = 1.0 / (attention_dim as f64).sqrt();
    let outs: Vec<Var> = cond
        .iter()
        .enumerate()
        .map(|(n, &c)| {
            let tn = g.select(tokens, n);
            let q = nn::linear(g, p, "mid.attn.q", tn);
            let k = nn::linear(g, p, "mid.attn.k", c);
            let v = nn::linear(g, p, "mid.attn.v", c);
            let scores = g.matmul(q, k, true);
            let scores = g.scale(scores, scale);
            let weights = g.softmax_rows(scores);
            let o = g.matmul(weights, v, false);
            nn::linear(g, p, "mid.attn.out", o)
        })
        .collect();
    let stacked = g.stack(&outs);
    let out = g.from_tokens(stacked, s[2], s[3]);
    g.add(h, out)
}

/// Builds the noise prediction for a batch on `g`.
///
/// `input` is `[N, 2C+1, H, W]` (noisy image, masked source, mask), `t` has one
/// timestep per sample and `cond[n]` is an `[L_n, attention_dim]` token matrix.
pub fn forward(
    g: &mut Graph,
    p: &Bound,
    config: &DenoiserConfig,
    input: Var,
    t: &[usize],
    cond: &[Var],
) -> Result<Var> {
    let s = g.shape(input).to_vec();
    if s.len() != 4 || s[1] != config.input_channels() {
        return Err(Error::Shape(format!(
            "denoiser input {:?}, expected [N, {}, H, W]",
            s,
            config.input_channels()
        )));
    }
    config.check_spatial(s[2], s[3])?;
    if t.len() != s[0] || cond.len() != s[0] {
        return Err(Error::Shape(format!(
            "batch of {} with {} timesteps and {} conditions",
            s[0],
            t.len(),
            cond.len()
        )));
    }
    for &c in cond {
        let cs = g.shape(c);
        if cs.len() != 2 || cs[1] != config.attention_dim || cs[0] == 0 {
            return Err(Error::Shape(format!(
                "condition tokens {:?}, expected [L, {}]",
                cs, config.attention_dim
            )));
        }
    }
    if !g.value(input).is_finite() {
        return Err(Error::Numeric("denoiser input is not finite".into()));
    }

    let temb = g.constant(timestep_embedding(t, config.time_embed_dim));
    let temb = nn::linear(g, p, "time.0", temb);
    let temb = g.silu(temb);
    let temb = nn::linear(g, p, "time.1", temb);
    let temb = g.silu(temb);

    let mut h = nn::conv(g, p, "conv_in", input, 1, 1);
    let mut skips = Vec::with_capacity(config.depth);
    for i in 0..config.depth {
        h = res_block(g, p, &format!("down.{i}"), h, temb);
        skips.push(h);
        if i + 1 < config.depth {
            h = nn::conv(g, p, &format!("down.{i}.pool"), h, 2, 1);
        }
    }
    h = res_block(g, p, "mid.res", h, temb);
    h = cross_attention(g, p, h, cond, config.attention_dim);
    for i in (0..config.depth).rev() {
        h = g.concat_channels(&[h, skips[i]]);
        h = res_block(g, p, &format!("up.{i}"), h, temb);
        if i > 0 {
            h = g.upsample_nearest2(h);
            h = nn::conv(g, p, &format!("up.{i}.upconv"), h, 1, 1);
        }
    }
    let h = nn::group_norm(g, p, "out.norm", h);
    let h = g.silu(h);
    Ok(nn::conv(g, p, "out.conv", h, 1, 1))
}

/// Concatenates noisy images, masked sources and masks into the `[N, 2C+1, H, W]` input.
pub fn assemble_input(noisy: &Tensor, masked_source: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (ns, ms, ks) = (noisy.shape(), masked_source.shape(), mask.shape());
    if ns != ms || ks.len() != 4 || ks[0] != ns[0] || ks[1] != 1 || ks[2..] != ns[2..] {
        return Err(Error::Shape(format!(
            "noisy {ns:?}, masked source {ms:?} and mask {ks:?} do not line up"
        )));
    }
    let (n, c, hw) = (ns[0], ns[1], ns[2] * ns[3]);
    let mut data = Vec::with_capacity(n * (2 * c + 1) * hw);
    for i in 0..n {
        data.extend_from_slice(&noisy.data()[i * c * hw..(i + 1) * c * hw]);
        data.extend_from_slice(&masked_source.data()[i * c * hw..(i + 1) * c * hw]);
        data.extend_from_slice(&mask.data()[i * hw..(i + 1) * hw]);
    }
    Tensor::from_vec(&[n, 2 * c + 1, ns[2], ns[3]], data)
}

impl DenoiserParams {
    /// Runs the network without recording gradients for the weights and
    /// returns the `[N, C, H, W]` prediction.
    pub fn predict_batch(&self, input: &Tensor, t: &[usize], cond: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let x = g.constant(input.clone());
        let cond: Vec<Var> = cond.iter().map(|c| g.constant(c.clone())).collect();
        let out = forward(&mut g, &bound, &self.config, x, t, &cond)?;
        Ok(g.value(out).clone())
    }
}

/// Predicts the noise in `y_t` for one image.
pub fn predict_noise(
    params: &DenoiserParams,
    y_t: &Image,
    masked_source: &Image,
    mask: &EditMask,
    t: usize,
    cond: &Tensor,
) -> Result<Image> {
    if y_t.dims() != masked_source.dims() {
        return Err(Error::Shape(format!(
            "noisy image {:?} vs masked source {:?}",
            y_t.dims(),
            masked_source.dims()
        )));
    }
    if (mask.height(), mask.width()) != (y_t.height(), y_t.width()) {
        return Err(Error::Shape("mask size differs from the image".into()));
    }
    if y_t.channels() != params.config.image_channels {
        return Err(Error::Shape(format!(
            "{} channels, model expects {}",
            y_t.channels(),
            params.config.image_channels
        )));
    }
    let input = assemble_input(
        &Image::batch_to_tensor(&[y_t])?,
        &Image::batch_to_tensor(&[masked_source])?,
        &mask.to_tensor(),
    )?;
    let out = params.predict_batch(&input, &[t], std::slice::from_ref(cond))?;
    Ok(Image::batch_from_tensor(&out).remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            base_width: 4,
            depth: 2,
            attention_dim: 4,
            time_embed_dim: 4,
            image_channels: 3,
        }
    }

    fn rand_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
        Image::from_fn(h, w, 3, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn rand_tokens(l: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(&[l, d], (0..l * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn first_layer_conditioning_slice_is_zero() {
        let p = init_denoiser(DenoiserConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let w = p.params.get("conv_in.weight").unwrap();
        assert_eq!(w.shape(), &[32, 7, 3, 3]);
        for out in w.data().chunks(7 * 9) {
            assert!(out[27..].iter().all(|&v| v == 0.0));
            assert!(out[..27].iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn default_size_is_desk_scale() {
        let p = init_denoiser(DenoiserConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let n = p.params.num_scalars();
        assert!((100_000..=800_000).contains(&n), "{n} parameters");
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_denoiser(tiny(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = init_denoiser(tiny(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn output_shape_and_token_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = DenoiserConfig {
            base_width: 8,
            depth: 3,
            attention_dim: 8,
            time_embed_dim: 8,
            image_channels: 3,
        };
        let p = init_denoiser(cfg, &mut rng).unwrap();
        let y = rand_image(32, 32, &mut rng);
        let src = rand_image(32, 32, &mut rng);
        let mask = EditMask::from_box(&crate::data::BBox::new(4, 4, 8, 8), 32, 32);
        for l in [1, 17] {
            let out = predict_noise(&p, &y, &src, &mask, 3, &rand_tokens(l, 8, &mut rng)).unwrap();
            assert_eq!(out.dims(), (32, 32, 3));
        }
    }

    #[test]
    fn zero_init_ignores_masked_source_and_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = init_denoiser(tiny(), &mut rng).unwrap();
        let y = rand_image(8, 8, &mut rng);
        let cond = rand_tokens(1, 4, &mut rng);
        let a = predict_noise(&p, &y, &rand_image(8, 8, &mut rng), &EditMask::empty(8, 8), 5, &cond).unwrap();
        let full = EditMask::new(8, 8, vec![1; 64]).unwrap();
        let b = predict_noise(&p, &y, &rand_image(8, 8, &mut rng), &full, 5, &cond).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = init_denoiser(tiny(), &mut rng).unwrap();
        let y = rand_image(8, 8, &mut rng);
        let other = rand_image(10, 8, &mut rng);
        let mask = EditMask::empty(8, 8);
        let cond = rand_tokens(1, 4, &mut rng);
        assert!(matches!(predict_noise(&p, &y, &other, &mask, 0, &cond), Err(Error::Shape(_))));
        let bad_cond = rand_tokens(1, 5, &mut rng);
        assert!(matches!(predict_noise(&p, &y, &y, &mask, 0, &bad_cond), Err(Error::Shape(_))));
        let odd = rand_image(9, 9, &mut rng);
        assert!(matches!(
            predict_noise(&p, &odd, &odd, &EditMask::empty(9, 9), 0, &cond),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zeroed_attention_output_makes_condition_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = init_denoiser(tiny(), &mut rng).unwrap();
        // randomize everything, then zero only the attention output weight
        for t in p.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let y = rand_image(8, 8, &mut rng);
        let src = rand_image(8, 8, &mut rng);
        let mask = EditMask::empty(8, 8);
        let c1 = rand_tokens(3, 4, &mut rng);
        let c2 = rand_tokens(1, 4, &mut rng);
        let a = predict_noise(&p, &y, &src, &mask, 2, &c1).unwrap();
        let b = predict_noise(&p, &y, &src, &mask, 2, &c2).unwrap();
        assert_ne!(a, b);
        p.params.get_mut("mid.attn.out.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let a = predict_noise(&p, &y, &src, &mask, 2, &c1).unwrap();
        let b = predict_noise(&p, &y, &src, &mask, 2, &c2).unwrap();
        assert_eq!(a, b);
    }
}
