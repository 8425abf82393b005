//! Classifier-free guided reverse diffusion and final compositing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_bytes, model_id};
use crate::condition::{adapt, encode_reference, null_tokens, AdapterParams, ConditionTokens, EncoderMode, EncoderParams, NullCondition};
use crate::data::{composite, mask_out, EditMask, MASK_FILL};
use crate::denoiser::{predict_noise, DenoiserParams};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::par;
use crate::trainer::TrainState;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub num_steps: usize,
    pub eta: f64,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            scale: 5.0,
            num_steps: 50,
            eta: 0.0,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, schedule_steps: usize) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::Parameter(format!("guidance scale must be >= 0, got {}", self.scale)));
        }
        if self.num_steps == 0 || self.num_steps > schedule_steps {
            return Err(Error::Parameter(format!(
                "num_steps must be in 1..={schedule_steps}, got {}",
                self.num_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Parameter(format!("eta {} outside [0, 1]", self.eta)));
        }
        Ok(())
    }
}

/// Inference view of a trained model: EMA weights plus the frozen encoder.
#[derive(Clone, Debug)]
pub struct EditModel {
    pub denoiser: DenoiserParams,
    pub adapter: AdapterParams,
    pub null: NullCondition,
    pub encoder: EncoderParams,
    pub schedule: NoiseSchedule,
    pub mode: EncoderMode,
    pub id: String,
}

impl EditModel {
    pub fn from_state(state: &TrainState) -> Self {
        EditModel {
            denoiser: state.ema.denoiser.clone(),
            adapter: state.ema.adapter.clone(),
            null: state.ema.null.clone(),
            encoder: state.encoder.clone(),
            schedule: state.schedule.clone(),
            mode: state.mode(),
            id: model_id(&checkpoint_bytes(state)),
        }
    }

    pub fn condition(&self, reference: &Image) -> Result<ConditionTokens> {
        let raw = encode_reference(&self.encoder, reference, self.mode)?;
        adapt(&self.adapter, &raw, self.mode)
    }

    pub fn null_condition(&self) -> Result<ConditionTokens> {
        null_tokens(&self.null, &self.adapter, self.mode)
    }
}

/// `(1 - s) * eps(v) + s * eps(c)`, the guided prediction, from two denoiser
/// evaluations. Written this way so `s = 0` and `s = 1` return one branch exactly.
#[allow(clippy::too_many_arguments)]
pub fn guided_noise_prediction(
    params: &DenoiserParams,
    y_t: &Image,
    masked_source: &Image,
    mask: &EditMask,
    t: usize,
    cond: &ConditionTokens,
    null: &ConditionTokens,
    scale: f64,
) -> Result<Image> {
    if !(scale >= 0.0) {
        return Err(Error::Parameter(format!("guidance scale must be >= 0, got {scale}")));
    }
    let branches = [&null.tokens, &cond.tokens];
    let mut out = par::map(&branches, |c| predict_noise(params, y_t, masked_source, mask, t, c));
    let eps_c = out.pop().unwrap()?;
    let eps_v = out.pop().unwrap()?;
    Ok(combine_guidance(&eps_v, &eps_c, scale))
}

/// The guidance combination on precomputed branch predictions.
pub fn combine_guidance(eps_null: &Image, eps_cond: &Image, scale: f64) -> Image {
    let mut out = eps_null.clone();
    for (o, &c) in out.data_mut().iter_mut().zip(eps_cond.data()) {
        *o = (1.0 - scale) * *o + scale * c;
    }
    out
}

/// Clean-image estimate `(y_t - noise(t) * eps) / signal(t)`.
pub fn estimate_clean(y_t: &Image, t: usize, epsilon_hat: &Image, schedule: &NoiseSchedule) -> Result<Image> {
    schedule.check_index(t)?;
    let (a, b) = (schedule.signal(t), schedule.noise(t));
    let mut out = y_t.clone();
    for (o, &e) in out.data_mut().iter_mut().zip(epsilon_hat.data()) {
        *o = (*o - b * e) / a;
    }
    Ok(out)
}

/// One strided reverse update from `t_from` to `t_to` (`None` means the
/// clean image). The clean estimate is clipped to `[-1, 1]` before
/// re-noising; `eta = 0` is deterministic.
pub fn denoise_step(
    y_t: &Image,
    t_from: usize,
    t_to: Option<usize>,
    epsilon_hat: &Image,
    schedule: &NoiseSchedule,
    eta: f64,
    rng: &mut impl Rng,
) -> Result<Image> {
    if y_t.dims() != epsilon_hat.dims() {
        return Err(Error::Shape("noise estimate does not match the image".into()));
    }
    let mut y0 = estimate_clean(y_t, t_from, epsilon_hat, schedule)?;
    y0.clamp_unit();
    let Some(t_to) = t_to else {
        return Ok(y0);
    };
    if t_to >= t_from {
        return Err(Error::Parameter(format!("reverse step must go down, got {t_from} -> {t_to}")));
    }
    schedule.check_index(t_to)?;
    let ab_from = schedule.signal(t_from).powi(2);
    let ab_to = schedule.signal(t_to).powi(2);
    let sigma = eta * ((1.0 - ab_to) / (1.0 - ab_from)).sqrt() * (1.0 - ab_from / ab_to).max(0.0).sqrt();
    let dir = (1.0 - ab_to - sigma * sigma).max(0.0).sqrt();
    let (a, b) = (schedule.signal(t_from), schedule.noise(t_from));
    let mut out = y0.clone();
    for ((o, &y), &x0) in out.data_mut().iter_mut().zip(y_t.data()).zip(y0.data()) {
        // noise direction implied by the clipped clean estimate
        let eps = (y - a * x0) / b;
        let z: f64 = if sigma > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
        *o = ab_to.sqrt() * x0 + dir * eps + sigma * z;
    }
    Ok(out)
}

/// Evenly strided timesteps, descending, ending at 0.
pub fn timestep_sequence(schedule_steps: usize, num_steps: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = (0..num_steps).map(|i| i * schedule_steps / num_steps).collect();
    ts.dedup();
    ts.reverse();
    ts
}

/// Edits `source` inside `mask` to match `reference`. Pixels outside the mask
/// are copied from `source` bit for bit.
pub fn edit_image(model: &EditModel, source: &Image, mask: &EditMask, reference: &Image, g: &GuidanceConfig) -> Result<Image> {
    source.validate()?;
    reference.validate()?;
    if (mask.height(), mask.width()) != (source.height(), source.width()) {
        return Err(Error::Shape(format!(
            "mask is {}x{}, source is {}x{}",
            mask.height(),
            mask.width(),
            source.height(),
            source.width()
        )));
    }
    if mask.is_empty() {
        return Ok(source.clone());
    }
    if !mask.is_connected() {
        return Err(Error::Parameter("mask must be a single 4-connected region".into()));
    }
    g.validate(model.schedule.steps())?;
    model.denoiser.config.check_spatial(source.height(), source.width())?;
    let masked = mask_out(source, mask, MASK_FILL)?;
    let cond = model.condition(reference)?;
    let null = model.null_condition()?;

    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let (h, w, c) = source.dims();
    let mut y = Image::from_fn(h, w, c, |_, _, _| rng.sample(StandardNormal));
    let ts = timestep_sequence(model.schedule.steps(), g.num_steps);
    for (i, &t) in ts.iter().enumerate() {
        let eps = guided_noise_prediction(&model.denoiser, &y, &masked, mask, t, &cond, &null, g.scale)?;
        y = denoise_step(&y, t, ts.get(i + 1).copied(), &eps, &model.schedule, g.eta, &mut rng)?;
    }
    if !y.data().iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("sampler produced non-finite pixels".into()));
    }
    composite(source, &y, mask)
}
