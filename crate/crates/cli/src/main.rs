//! `exedit`: dataset generation, training, editing, evaluation and serving.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use exedit_core::checkpoint::{load_checkpoint, save_checkpoint};
use exedit_core::condition::pretrain_encoder;
use exedit_core::data::{generate_toy_dataset, load_annotations, save_dataset, AnnotatedImage, EditMask};
use exedit_core::image::Image;
use exedit_core::metrics::{load_cases, run_cases, save_cases, score_edits, seeded_cases, EditCase};
use exedit_core::sampler::{edit_image, EditModel, GuidanceConfig};
use exedit_core::trainer::{pretrain_prior, train_steps, AblationPreset, TrainConfig, TrainState};
use exedit_service::{AppState, ServiceConfig};
use rand::SeedableRng;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] exedit_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "exedit", version, about = "Exemplar-guided image editing with a small diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset.
    Dataset(DatasetArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Build a benchmark case directory from a dataset.
    Cases(CasesArgs),
    /// Edit one image.
    Edit(EditArgs),
    /// Score a model on benchmark cases.
    Eval(EvalArgs),
    /// Run the HTTP edit service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    preset: Option<AblationPreset>,
    /// Target number of main-stage steps; on resume, training continues up to it.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write the checkpoint every N main-stage steps as well as at the end.
    #[arg(long)]
    save_every: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_width: Option<usize>,
    #[arg(long)]
    prior_steps: Option<usize>,
    #[arg(long)]
    encoder_steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args)]
struct CasesArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    reference_size: usize,
}

#[derive(Args)]
struct GuidanceArgs {
    #[arg(long, default_value_t = 5.0)]
    scale: f64,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
}

impl GuidanceArgs {
    fn config(&self) -> GuidanceConfig {
        GuidanceConfig {
            scale: self.scale,
            num_steps: self.steps,
            eta: self.eta,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    source: PathBuf,
    /// Grayscale PNG; pixels at or above 128 are edited.
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    guidance: GuidanceArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cases: PathBuf,
    /// Score pre-edited `NNNN_edit.png` files from this directory instead of sampling.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Dataset directory whose images form the real pool.
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    guidance: GuidanceArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    #[arg(long, default_value_t = 128)]
    max_side: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 4)]
    queue: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Dataset(a) => dataset(a),
        Command::Train(a) => train(a),
        Command::Cases(a) => cases(a),
        Command::Edit(a) => edit(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dataset(a: DatasetArgs) -> CliResult<()> {
    if a.out.exists() && fs::read_dir(&a.out).map(|mut d| d.next().is_some()).unwrap_or(true) {
        return Err(CliError::Runtime(format!("{} exists and is not empty", a.out.display())));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
    let images = generate_toy_dataset(a.count, (a.size, a.size), &mut rng);
    let written = save_dataset(&a.out, &images)?;
    log::info!("wrote {} images to {}", images.len(), a.out.display());
    debug_assert_eq!(written.len(), images.len() + 1);
    Ok(())
}

fn load_dataset(dir: &Path) -> CliResult<Vec<AnnotatedImage>> {
    let loaded = load_annotations(dir)?;
    for (file, err) in &loaded.failures {
        log::warn!("skipped {file}: {err}");
    }
    if loaded.dropped_boxes > 0 {
        log::warn!("dropped {} invalid boxes", loaded.dropped_boxes);
    }
    if loaded.images.is_empty() {
        return Err(CliError::Runtime(format!("no usable images in {}", dir.display())));
    }
    Ok(loaded.images)
}

fn image_size(data: &[AnnotatedImage]) -> CliResult<usize> {
    let (h, w) = (data[0].image.height(), data[0].image.width());
    if h != w || data.iter().any(|a| a.image.height() != h || a.image.width() != w) {
        return Err(CliError::Runtime("training images must all be the same square size".into()));
    }
    Ok(h)
}

fn fresh_config(a: &TrainArgs, size: usize) -> TrainConfig {
    let mut c = TrainConfig::for_preset(a.preset.unwrap_or(AblationPreset::ClassifierFree));
    c.image_size = size;
    if let Some(v) = a.steps {
        c.steps = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.base_width {
        c.denoiser.base_width = v;
    }
    if let Some(v) = a.prior_steps {
        c.prior_steps = v;
    }
    if let Some(v) = a.encoder_steps {
        c.contrastive.steps = v;
    }
    if let Some(v) = a.learning_rate {
        c.learning_rate = v;
    }
    c
}

/// Every explicitly given flag except `--steps` must agree with the checkpoint.
fn check_resume_flags(a: &TrainArgs, c: &TrainConfig) -> CliResult<()> {
    let mut conflicts = Vec::new();
    let mut check = |name: &str, given: Option<String>, stored: String| {
        if let Some(g) = given {
            if g != stored {
                conflicts.push(format!("--{name} {g} (checkpoint has {stored})"));
            }
        }
    };
    check("preset", a.preset.map(|p| p.to_string()), c.preset.to_string());
    check("seed", a.seed.map(|v| v.to_string()), c.seed.to_string());
    check("batch-size", a.batch_size.map(|v| v.to_string()), c.batch_size.to_string());
    check("base-width", a.base_width.map(|v| v.to_string()), c.denoiser.base_width.to_string());
    check("prior-steps", a.prior_steps.map(|v| v.to_string()), c.prior_steps.to_string());
    check("encoder-steps", a.encoder_steps.map(|v| v.to_string()), c.contrastive.steps.to_string());
    check("learning-rate", a.learning_rate.map(|v| v.to_string()), c.learning_rate.to_string());
    if conflicts.is_empty() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("flags conflict with the checkpoint: {}", conflicts.join(", "))))
    }
}

fn train(a: TrainArgs) -> CliResult<()> {
    if a.save_every == Some(0) {
        return Err(CliError::Usage("--save-every must be positive".into()));
    }
    let data = load_dataset(&a.data)?;
    let size = image_size(&data)?;
    let (mut state, done) = match &a.resume {
        Some(path) => {
            let mut state = load_checkpoint(path)?;
            check_resume_flags(&a, &state.config)?;
            if state.config.image_size != size {
                return Err(CliError::Runtime(format!(
                    "checkpoint was trained on {0}x{0} images, dataset has {1}x{1}",
                    state.config.image_size, size
                )));
            }
            let prior = if state.config.preset.uses_prior() { state.config.prior_steps as u64 } else { 0 };
            if state.step < prior {
                return Err(CliError::Runtime("checkpoint predates the end of the prior stage".into()));
            }
            if let Some(s) = a.steps {
                state.config.steps = s;
            }
            let done = (state.step - prior) as usize;
            log::info!("resuming {} at main step {done}", path.display());
            (state, done)
        }
        None => {
            let config = fresh_config(&a, size);
            config.validate()?;
            let images: Vec<Image> = data.iter().map(|d| d.image.clone()).collect();
            log::info!("pretraining encoder for {} steps", config.contrastive.steps);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
            let encoder = pretrain_encoder(&images, config.encoder, &config.contrastive, &mut rng)?;
            let mut state = TrainState::new(config, encoder)?;
            if state.config.preset.uses_prior() {
                log::info!("prior stage: {} steps", state.config.prior_steps);
                let steps = state.config.prior_steps;
                pretrain_prior(&mut state, &data, steps)?;
            }
            (state, 0)
        }
    };
    let target = state.config.steps;
    let chunk = a.save_every.unwrap_or(usize::MAX);
    let mut at = done;
    while at < target {
        let n = chunk.min(target - at);
        train_steps(&mut state, &data, at as u64, n, |i, loss| {
            if i % 50 == 0 {
                log::info!("step {i}: loss {loss:.5}");
            }
        })?;
        at += n;
        if at < target {
            save_checkpoint(&state, &a.out)?;
            log::info!("checkpoint at step {at}");
        }
    }
    save_checkpoint(&state, &a.out)?;
    log::info!("wrote {} after {} main steps", a.out.display(), at);
    Ok(())
}

fn cases(a: CasesArgs) -> CliResult<()> {
    let data = load_dataset(&a.data)?;
    let cases = seeded_cases(&data, a.count, a.reference_size, a.seed)?;
    save_cases(&a.out, &cases)?;
    log::info!("wrote {} cases to {}", cases.len(), a.out.display());
    Ok(())
}

fn load_model(path: &Path) -> CliResult<EditModel> {
    let state = load_checkpoint(path)?;
    Ok(EditModel::from_state(&state))
}

fn read_mask(path: &Path) -> CliResult<EditMask> {
    let bytes = fs::read(path).map_err(|e| exedit_core::Error::io(path, e))?;
    Ok(EditMask::from_png(&bytes)?)
}

fn edit(a: EditArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let source = Image::load(&a.source)?;
    let mask = read_mask(&a.mask)?;
    let reference = Image::load(&a.reference)?;
    let out = edit_image(&model, &source, &mask, &reference, &a.guidance.config())?;
    out.save(&a.out)?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

fn edit_name(i: usize) -> String {
    format!("{i:04}_edit.png")
}

fn pre_edited(dir: &Path, cases: &[EditCase]) -> (Vec<(usize, Image)>, Vec<String>) {
    let mut edits = Vec::new();
    let mut failures = Vec::new();
    for i in 0..cases.len() {
        match Image::load(&dir.join(edit_name(i))) {
            Ok(img) => edits.push((i, img)),
            Err(e) => failures.push(format!("case {i}: {e}")),
        }
    }
    (edits, failures)
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let cases = load_cases(&a.cases)?;
    if cases.is_empty() {
        return Err(CliError::Runtime(format!("no cases in {}", a.cases.display())));
    }
    let real: Vec<Image> = load_dataset(&a.real)?.into_iter().map(|d| d.image).collect();
    let (edits, failures) = match &a.images {
        Some(dir) => pre_edited(dir, &cases),
        None => {
            let g = a.guidance.config();
            g.validate(model.schedule.steps())?;
            let (edits, failures) = run_cases(&model, &cases, &g);
            let dir = a.out.join("edits");
            fs::create_dir_all(&dir).map_err(|e| exedit_core::Error::io(&dir, e))?;
            // Score the 8-bit images as written, so `--images` on them reproduces the report.
            let mut saved = Vec::with_capacity(edits.len());
            for (i, img) in edits {
                let bytes = img.encode_png();
                let path = dir.join(edit_name(i));
                fs::write(&path, &bytes).map_err(|e| exedit_core::Error::io(&path, e))?;
                saved.push((i, Image::decode_png(&bytes)?));
            }
            (saved, failures)
        }
    };
    for f in &failures {
        log::warn!("{f}");
    }
    let report = score_edits(&model.encoder, &edits, &cases, &real, failures)?;
    report.write(&a.out)?;
    print!("{}", report.to_text());
    Ok(())
}

fn serve(a: ServeArgs) -> CliResult<()> {
    if a.workers == 0 {
        return Err(CliError::Usage("--workers must be positive".into()));
    }
    let config = ServiceConfig {
        max_side: a.max_side,
        workers: a.workers,
        queue: a.queue,
    };
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    runtime.block_on(async move {
        let state = AppState::new(config);
        state.load_in_background(a.model.clone());
        exedit_service::serve(&a.addr, state)
            .await
            .map_err(|e| CliError::Runtime(format!("{}: {e}", a.addr)))
    })
}
