#![allow(dead_code)]

use exedit_core::condition::{init_encoder, EncoderConfig, EncoderParams};
use exedit_core::data::{mask_out, EditMask, TrainingSample, BBox, MASK_FILL};
use exedit_core::denoiser::DenoiserConfig;
use exedit_core::diffusion::ScheduleConfig;
use exedit_core::image::Image;
use exedit_core::tensor::Tensor;
use exedit_core::trainer::{AblationPreset, ModelParams, TrainConfig, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Smallest config that still has two resolution levels and every
/// conditioning path.
pub fn minimal_config(preset: AblationPreset, size: usize) -> TrainConfig {
    let mut c = TrainConfig::for_preset(preset);
    c.denoiser = DenoiserConfig {
        base_width: 4,
        depth: 2,
        attention_dim: 4,
        time_embed_dim: 4,
        image_channels: 3,
    };
    c.encoder = EncoderConfig {
        input_size: 8,
        embed_dim: 6,
        width: 2,
    };
    c.adapter_depth = 2;
    c.image_size = size;
    c.batch_size = 2;
    c.schedule = ScheduleConfig {
        steps: 20,
        beta_start: 0.01,
        beta_end: 0.3,
    };
    c
}

/// A small but not minimal config for sampling-heavy checks.
pub fn small_config(preset: AblationPreset) -> TrainConfig {
    let mut c = TrainConfig::for_preset(preset);
    c.denoiser.base_width = 8;
    c.denoiser.depth = 2;
    c.denoiser.attention_dim = 8;
    c.denoiser.time_embed_dim = 8;
    c.encoder = EncoderConfig {
        input_size: 16,
        embed_dim: 8,
        width: 4,
    };
    c.image_size = 16;
    c.batch_size = 2;
    c.schedule = ScheduleConfig {
        steps: 40,
        beta_start: 0.005,
        beta_end: 0.2,
    };
    c
}

pub fn encoder_for(config: &TrainConfig, seed: u64) -> EncoderParams {
    let mut e = init_encoder(config.encoder, &mut rng(seed)).unwrap();
    e.params.round_to_f32();
    e
}

pub fn state_for(config: TrainConfig, seed: u64) -> TrainState {
    let enc = encoder_for(&config, seed);
    TrainState::new(config, enc).unwrap()
}

/// Overwrites every tensor with uniform noise so no path is gated off by a
/// zero initialization.
pub fn randomize(params: &mut ModelParams, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for t in params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-scale..scale));
    }
}

pub fn noise_image(h: usize, w: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    Image::from_fn(h, w, 3, |_, _, _| r.sample(StandardNormal))
}

pub fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    Image::from_fn(h, w, 3, |_, _, _| r.random_range(-1.0..1.0))
}

pub fn sample_for(size: usize, bbox: BBox, seed: u64) -> TrainingSample {
    let target = random_image(size, size, seed);
    let mask = EditMask::from_box(&bbox, size, size);
    TrainingSample {
        masked_source: mask_out(&target, &mask, MASK_FILL).unwrap(),
        mask,
        reference: random_image(size, size, seed + 1000),
        target,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn tensor_close(a: &Tensor, b: &Tensor) -> f64 {
    max_abs_diff(a.data(), b.data())
}
