//! Training loop: condition dropping, AdamW with gradient clipping, an EMA
//! shadow of the trainable weights, the optional unconditional prior stage
//! and the ablation presets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::condition::{
    adapt_graph, encode_reference, init_adapter, pretrain_encoder, AdapterConfig, AdapterParams, ContrastiveConfig,
    EncoderConfig, EncoderMode, EncoderParams, NullCondition,
};
use crate::data::{make_training_sample, AnnotatedImage, AugmentationPolicy, SynthesisConfig, TrainingSample};
use crate::denoiser::{self, init_denoiser, DenoiserConfig, DenoiserParams};
use crate::diffusion::{training_loss, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::optim::{clip_global_norm, ema_update, AdamW, AdamWConfig};
use crate::par;
use crate::tensor::Tensor;

/// The five rungs of the ablation ladder, each adding one ingredient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationPreset {
    Baseline,
    Prior,
    Augmentation,
    Bottleneck,
    ClassifierFree,
}

impl AblationPreset {
    pub const ALL: [AblationPreset; 5] = [
        AblationPreset::Baseline,
        AblationPreset::Prior,
        AblationPreset::Augmentation,
        AblationPreset::Bottleneck,
        AblationPreset::ClassifierFree,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AblationPreset::Baseline => "baseline",
            AblationPreset::Prior => "prior",
            AblationPreset::Augmentation => "augmentation",
            AblationPreset::Bottleneck => "bottleneck",
            AblationPreset::ClassifierFree => "classifier_free",
        }
    }

    fn rank(&self) -> usize {
        *self as usize
    }

    pub fn uses_prior(&self) -> bool {
        self.rank() >= AblationPreset::Prior.rank()
    }

    /// Reference augmentation and mask distortion.
    pub fn uses_augmentation(&self) -> bool {
        self.rank() >= AblationPreset::Augmentation.rank()
    }

    pub fn mode(&self) -> EncoderMode {
        if self.rank() >= AblationPreset::Bottleneck.rank() {
            EncoderMode::Bottleneck
        } else {
            EncoderMode::AllTokens
        }
    }

    /// Condition dropping in training and guidance at sampling time.
    pub fn uses_guidance(&self) -> bool {
        *self == AblationPreset::ClassifierFree
    }

    /// Scale the sampler should use for this preset; 1 is plain conditional sampling.
    pub fn default_guidance_scale(&self) -> f64 {
        if self.uses_guidance() {
            5.0
        } else {
            1.0
        }
    }

    pub fn synthesis(&self, reference_size: usize) -> SynthesisConfig {
        if self.uses_augmentation() {
            SynthesisConfig {
                augmentation: AugmentationPolicy::default(),
                reference_size,
                ..SynthesisConfig::default()
            }
        } else {
            SynthesisConfig::plain(reference_size)
        }
    }
}

impl std::fmt::Display for AblationPreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AblationPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationPreset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown preset {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: AblationPreset,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Steps of the unconditional prior stage, for presets that use it.
    pub prior_steps: usize,
    pub cond_drop_prob: f64,
    pub ema_decay: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub image_size: usize,
    pub adapter_depth: usize,
    pub denoiser: DenoiserConfig,
    pub encoder: EncoderConfig,
    pub contrastive: ContrastiveConfig,
    pub schedule: ScheduleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_preset(AblationPreset::ClassifierFree)
    }
}

impl TrainConfig {
    /// Desk-scale defaults for a preset. Only the classifier-free preset
    /// drops conditions.
    pub fn for_preset(preset: AblationPreset) -> Self {
        TrainConfig {
            preset,
            learning_rate: 1e-4,
            batch_size: 16,
            steps: 2000,
            prior_steps: 500,
            cond_drop_prob: if preset.uses_guidance() { 0.2 } else { 0.0 },
            ema_decay: 0.999,
            weight_decay: 0.0,
            grad_clip: 1.0,
            seed: 0,
            image_size: 32,
            adapter_depth: 3,
            denoiser: DenoiserConfig::default(),
            encoder: EncoderConfig::default(),
            contrastive: ContrastiveConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(Error::Parameter(format!("cond_drop_prob {} outside [0, 1]", self.cond_drop_prob)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Parameter(format!("ema_decay {} outside [0, 1]", self.ema_decay)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        if !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Parameter("grad_clip must be positive and weight_decay nonnegative".into()));
        }
        if self.denoiser.attention_dim == 0 || self.adapter_depth == 0 {
            return Err(Error::Parameter("adapter needs positive depth".into()));
        }
        self.denoiser.validate()?;
        self.denoiser.check_spatial(self.image_size, self.image_size)?;
        self.schedule.build()?;
        Ok(())
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            depth: self.adapter_depth,
            embed_dim: self.encoder.embed_dim,
            attention_dim: self.denoiser.attention_dim,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Everything the optimizer updates: denoiser, adapter and the null vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub denoiser: DenoiserParams,
    pub adapter: AdapterParams,
    pub null: NullCondition,
}

impl ModelParams {
    pub fn init(config: &TrainConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut p = ModelParams {
            denoiser: init_denoiser(config.denoiser, rng)?,
            adapter: init_adapter(config.adapter_config(), rng)?,
            null: NullCondition::init(config.encoder.embed_dim, rng),
        };
        p.round_to_f32();
        Ok(p)
    }

    /// `(name, tensor)` pairs in the fixed optimizer order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let d = self.denoiser.params.iter().map(|(n, t)| (format!("denoiser/{n}"), t));
        let a = self.adapter.params.iter().map(|(n, t)| (format!("adapter/{n}"), t));
        d.chain(a).chain(std::iter::once(("null/v".to_string(), &self.null.v))).collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.denoiser
            .params
            .tensors()
            .iter()
            .chain(self.adapter.params.tensors())
            .chain(std::iter::once(&self.null.v))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.denoiser
            .params
            .tensors_mut()
            .iter_mut()
            .chain(self.adapter.params.tensors_mut().iter_mut())
            .chain(std::iter::once(&mut self.null.v))
            .collect()
    }

    pub fn round_to_f32(&mut self) {
        self.tensors_mut().into_iter().for_each(Tensor::round_to_f32);
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Mutable training state. Only [`train_step`] and [`pretrain_prior`] write to it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub encoder: EncoderParams,
    pub params: ModelParams,
    pub ema: ModelParams,
    pub optimizer: AdamW,
    pub schedule: NoiseSchedule,
    /// Completed optimizer steps, prior stage included.
    pub step: u64,
}

impl TrainState {
    /// Fresh state around an already pretrained encoder.
    pub fn new(config: TrainConfig, encoder: EncoderParams) -> Result<Self> {
        config.validate()?;
        if encoder.config != config.encoder {
            return Err(Error::Parameter("encoder does not match the configured encoder".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let params = ModelParams::init(&config, &mut rng)?;
        let shapes: Vec<&[usize]> = params.tensors().iter().map(|t| t.shape()).collect();
        let optimizer = AdamW::new(config.adamw(), &shapes);
        Ok(TrainState {
            schedule: config.schedule.build()?,
            ema: params.clone(),
            params,
            optimizer,
            encoder,
            config,
            step: 0,
        })
    }

    pub fn mode(&self) -> EncoderMode {
        self.config.preset.mode()
    }
}

/// Bernoulli switch deciding when the reference is replaced by the null vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionDropper {
    pub prob: f64,
}

impl ConditionDropper {
    pub fn new(prob: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::Parameter(format!("drop probability {prob} outside [0, 1]")));
        }
        Ok(ConditionDropper { prob })
    }

    pub fn draw(&self, rng: &mut impl Rng) -> bool {
        rng.random_bool(self.prob)
    }
}

/// Random choices for one sample of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDraw {
    pub drop_condition: bool,
    pub t: usize,
    /// `[C, H, W]` noise.
    pub epsilon: Vec<f64>,
}

pub fn draw_sample(
    dropper: &ConditionDropper,
    schedule: &NoiseSchedule,
    dims: (usize, usize, usize),
    rng: &mut impl Rng,
) -> SampleDraw {
    let drop_condition = dropper.draw(rng);
    let t = rng.random_range(0..schedule.steps());
    let n = dims.0 * dims.1 * dims.2;
    let epsilon = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    SampleDraw {
        drop_condition,
        t,
        epsilon,
    }
}

/// Loss and gradients (in [`ModelParams::tensors`] order) for fixed draws.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

fn check_batch(batch: &[TrainingSample], draws: &[SampleDraw]) -> Result<(usize, usize, usize)> {
    let first = batch.first().ok_or_else(|| Error::Parameter("empty training batch".into()))?;
    if draws.len() != batch.len() {
        return Err(Error::Shape(format!("{} draws for {} samples", draws.len(), batch.len())));
    }
    let dims = first.target.dims();
    for s in batch {
        if s.target.dims() != dims
            || s.masked_source.dims() != dims
            || (s.mask.height(), s.mask.width()) != (dims.0, dims.1)
        {
            return Err(Error::Shape("training samples have inconsistent sizes".into()));
        }
    }
    for d in draws {
        if d.epsilon.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::Shape("noise draw does not match the image size".into()));
        }
    }
    Ok(dims)
}

/// Noise-prediction loss of `params` on `batch` with the given draws.
/// Dropped samples see `adapt(v)`; the rest see `adapt(encode(reference))`.
pub fn compute_gradients(
    params: &ModelParams,
    encoder: &EncoderParams,
    schedule: &NoiseSchedule,
    mode: EncoderMode,
    batch: &[TrainingSample],
    draws: &[SampleDraw],
) -> Result<StepGradients> {
    let (h, w, c) = check_batch(batch, draws)?;
    let n = batch.len();
    let refs: Vec<Option<Tensor>> = par::map_range(n, |i| {
        if draws[i].drop_condition {
            Ok(None)
        } else {
            encode_reference(encoder, &batch[i].reference, mode).map(Some)
        }
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let targets: Vec<&Image> = batch.iter().map(|s| &s.target).collect();
    let masked: Vec<&Image> = batch.iter().map(|s| &s.masked_source).collect();
    let target = Image::batch_to_tensor(&targets)?;
    let masked = Image::batch_to_tensor(&masked)?;
    let masks = Tensor::from_vec(&[n, 1, h, w], batch.iter().flat_map(|s| s.mask.to_planar()).collect())?;
    let epsilon = Tensor::from_vec(&[n, c, h, w], draws.iter().flat_map(|d| d.epsilon.iter().copied()).collect())?;
    let t: Vec<usize> = draws.iter().map(|d| d.t).collect();

    let mut g = Graph::new();
    let dp = params.denoiser.params.bind(&mut g, true);
    let ap = params.adapter.params.bind(&mut g, true);
    let v = g.param(params.null.v.clone());
    let mut cond = Vec::with_capacity(n);
    for r in refs {
        let raw = match r {
            Some(r) => g.constant(r),
            None => v,
        };
        cond.push(adapt_graph(&mut g, &ap, &params.adapter.config, raw)?);
    }
    let dcfg = params.denoiser.config;
    let loss = training_loss(&mut g, schedule, &target, &t, &epsilon, |g, noisy| {
        let input = denoiser::assemble_input(noisy, &masked, &masks)?;
        let x = g.constant(input);
        denoiser::forward(g, &dp, &dcfg, x, &t, &cond)
    })?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("training loss is {value}")));
    }
    let back = g.backward(loss);
    let vars: Vec<Var> = dp.vars().iter().chain(ap.vars()).copied().chain([v]).collect();
    let grads = vars
        .iter()
        .zip(params.tensors())
        .map(|(&var, t)| back.get_or_zeros(var, t.shape()))
        .collect();
    Ok(StepGradients { loss: value, grads })
}

fn apply_update(state: &mut TrainState, grads: StepGradients) -> Result<f64> {
    let StepGradients { loss, mut grads } = grads;
    let norm = clip_global_norm(&mut grads, state.config.grad_clip);
    if !norm.is_finite() {
        return Err(Error::Numeric(format!(
            "gradient norm is {norm} at step {} (loss {loss})",
            state.step
        )));
    }
    let mut current = state.params.tensors_mut();
    state.optimizer.update(&mut current, &grads)?;
    state.params.round_to_f32();
    state.optimizer.round_to_f32();
    state.step += 1;
    // Warm-started decay so short desk runs do not sample from init weights.
    let warm = (1.0 + state.step as f64) / (10.0 + state.step as f64);
    let decay = state.config.ema_decay.min(warm);
    ema_update(state.ema.tensors_mut(), state.params.tensors(), decay)?;
    state.ema.round_to_f32();
    if !state.params.is_finite() {
        return Err(Error::Numeric(format!("parameters became non-finite at step {}", state.step)));
    }
    Ok(loss)
}

fn step_with_drop(state: &mut TrainState, batch: &[TrainingSample], drop_prob: f64, rng: &mut impl Rng) -> Result<f64> {
    let first = batch.first().ok_or_else(|| Error::Parameter("empty training batch".into()))?;
    let dropper = ConditionDropper::new(drop_prob)?;
    let dims = first.target.dims();
    let draws: Vec<SampleDraw> = batch
        .iter()
        .map(|_| draw_sample(&dropper, &state.schedule, (dims.2, dims.0, dims.1), rng))
        .collect();
    let grads = compute_gradients(&state.params, &state.encoder, &state.schedule, state.mode(), batch, &draws)?;
    apply_update(state, grads)
}

/// One optimizer step on `batch`; returns the batch loss.
pub fn train_step(state: &mut TrainState, batch: &[TrainingSample], rng: &mut impl Rng) -> Result<f64> {
    let p = state.config.cond_drop_prob;
    step_with_drop(state, batch, p, rng)
}

/// Generator for step `step` of the stage `stage`, independent of how many
/// steps ran before, so resumed runs replay the same draws.
pub fn step_rng(seed: u64, stage: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(step);
    rng
}

const STAGE_PRIOR: u64 = 2;
const STAGE_MAIN: u64 = 3;

/// Synthesizes a batch of self-reference samples.
pub fn synthesize_batch(
    dataset: &[AnnotatedImage],
    synthesis: &SynthesisConfig,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<TrainingSample>> {
    let usable: Vec<&AnnotatedImage> = dataset.iter().filter(|a| !a.boxes.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Parameter("dataset has no annotated boxes".into()));
    }
    let picks: Vec<(usize, u64)> = (0..batch_size)
        .map(|_| (rng.random_range(0..usable.len()), rng.random()))
        .collect();
    par::map(&picks, |&(i, seed)| {
        make_training_sample(usable[i], synthesis, &mut ChaCha8Rng::seed_from_u64(seed))
    })
    .into_iter()
    .collect()
}

/// Trains the denoiser with every condition replaced by `v`.
pub fn pretrain_prior(state: &mut TrainState, dataset: &[AnnotatedImage], steps: usize) -> Result<()> {
    let synthesis = state.config.preset.synthesis(state.config.encoder.input_size);
    for i in 0..steps {
        let mut rng = step_rng(state.config.seed, STAGE_PRIOR, i as u64);
        let batch = synthesize_batch(dataset, &synthesis, state.config.batch_size, &mut rng)?;
        let loss = step_with_drop(state, &batch, 1.0, &mut rng)?;
        if i % 100 == 0 {
            log::debug!("prior step {i}: loss {loss:.4}");
        }
    }
    Ok(())
}

/// Runs `steps` main-stage steps, numbered from `start`. `progress` sees
/// every step's index and loss.
pub fn train_steps(
    state: &mut TrainState,
    dataset: &[AnnotatedImage],
    start: u64,
    steps: usize,
    mut progress: impl FnMut(u64, f64),
) -> Result<Vec<f64>> {
    let synthesis = state.config.preset.synthesis(state.config.encoder.input_size);
    let mut losses = Vec::with_capacity(steps);
    for i in start..start + steps as u64 {
        let mut rng = step_rng(state.config.seed, STAGE_MAIN, i);
        let batch = synthesize_batch(dataset, &synthesis, state.config.batch_size, &mut rng)?;
        let loss = train_step(state, &batch, &mut rng)?;
        progress(i, loss);
        losses.push(loss);
    }
    Ok(losses)
}

/// The whole recipe: contrastive encoder pretraining, optional prior stage,
/// then `config.steps` conditional steps.
pub fn train(config: TrainConfig, dataset: &[AnnotatedImage], progress: impl FnMut(u64, f64)) -> Result<TrainState> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    let images: Vec<Image> = dataset.iter().map(|a| a.image.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let encoder = pretrain_encoder(&images, config.encoder, &config.contrastive, &mut rng)?;
    train_with_encoder(config, encoder, dataset, progress)
}

/// [`train`] with an encoder pretrained elsewhere, so several presets can
/// share one frozen encoder.
pub fn train_with_encoder(
    config: TrainConfig,
    encoder: EncoderParams,
    dataset: &[AnnotatedImage],
    progress: impl FnMut(u64, f64),
) -> Result<TrainState> {
    if dataset.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    let mut state = TrainState::new(config, encoder)?;
    if state.config.preset.uses_prior() {
        let steps = state.config.prior_steps;
        pretrain_prior(&mut state, dataset, steps)?;
    }
    let steps = state.config.steps;
    train_steps(&mut state, dataset, 0, steps, progress)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condition::init_encoder;
    use crate::data::generate_toy_dataset;

    pub(crate) fn tiny_config(preset: AblationPreset) -> TrainConfig {
        let mut c = TrainConfig::for_preset(preset);
        c.denoiser = DenoiserConfig {
            base_width: 8,
            depth: 2,
            attention_dim: 8,
            time_embed_dim: 8,
            image_channels: 3,
        };
        c.encoder = EncoderConfig {
            input_size: 16,
            embed_dim: 8,
            width: 4,
        };
        c.adapter_depth = 2;
        c.image_size = 16;
        c.batch_size = 2;
        c.schedule = ScheduleConfig {
            steps: 20,
            beta_start: 0.01,
            beta_end: 0.3,
        };
        c
    }

    fn tiny_state(preset: AblationPreset) -> TrainState {
        let c = tiny_config(preset);
        let enc = init_encoder(c.encoder, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        TrainState::new(c, enc).unwrap()
    }

    #[test]
    fn preset_truth_table() {
        use AblationPreset::*;
        let rows: Vec<(bool, bool, EncoderMode, bool)> = AblationPreset::ALL
            .iter()
            .map(|p| (p.uses_prior(), p.uses_augmentation(), p.mode(), p.uses_guidance()))
            .collect();
        assert_eq!(
            rows,
            vec![
                (false, false, EncoderMode::AllTokens, false),
                (true, false, EncoderMode::AllTokens, false),
                (true, true, EncoderMode::AllTokens, false),
                (true, true, EncoderMode::Bottleneck, false),
                (true, true, EncoderMode::Bottleneck, true),
            ]
        );
        assert!(!Baseline.synthesis(32).distort_masks);
        assert!(Augmentation.synthesis(32).distort_masks);
        assert_eq!(TrainConfig::default().cond_drop_prob, 0.2);
        assert_eq!(TrainConfig::for_preset(Bottleneck).cond_drop_prob, 0.0);
        assert_eq!("classifier_free".parse::<AblationPreset>().unwrap(), ClassifierFree);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.cond_drop_prob = 1.5;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            ema_decay: -0.1,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_drop_prob_gives_v_no_gradient() {
        let state = tiny_state(AblationPreset::Bottleneck);
        let data = generate_toy_dataset(2, (16, 16), &mut ChaCha8Rng::seed_from_u64(1));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let synth = state.config.preset.synthesis(16);
        let batch = synthesize_batch(&data, &synth, 2, &mut rng).unwrap();
        let dropper = ConditionDropper::new(0.0).unwrap();
        let draws: Vec<SampleDraw> = (0..2).map(|_| draw_sample(&dropper, &state.schedule, (3, 16, 16), &mut rng)).collect();
        let g = compute_gradients(&state.params, &state.encoder, &state.schedule, state.mode(), &batch, &draws).unwrap();
        assert!(g.grads.last().unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn steps_are_deterministic_and_leave_encoder_alone() {
        let data = generate_toy_dataset(4, (16, 16), &mut ChaCha8Rng::seed_from_u64(1));
        let mut a = tiny_state(AblationPreset::ClassifierFree);
        let mut b = a.clone();
        let enc_before = a.encoder.clone();
        let la = train_steps(&mut a, &data, 0, 3, |_, _| {}).unwrap();
        let lb = train_steps(&mut b, &data, 0, 3, |_, _| {}).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        assert_eq!(a.encoder, enc_before);
        assert_eq!(a.step, 3);
        assert_ne!(a.params, a.ema);
    }

    #[test]
    fn zero_prior_steps_change_nothing() {
        let data = generate_toy_dataset(2, (16, 16), &mut ChaCha8Rng::seed_from_u64(1));
        let mut s = tiny_state(AblationPreset::Prior);
        let before = s.clone();
        pretrain_prior(&mut s, &data, 0).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut s = tiny_state(AblationPreset::Baseline);
        let r = train_step(&mut s, &[], &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Parameter(_))));
    }
}
