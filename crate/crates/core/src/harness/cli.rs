//! `mmvsr` subcommands. Each prints one JSON object on stdout on success and
//! a JSON error object on stderr otherwise.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::{cascaded_generate, evaluate, Cascade, GenerateRequest, LrShape, INFERENCE_NOISE_AUG_STEP};
use crate::codec::{load_video, save_video, Codec, CodecConfig, LatentVideo, Mask, VideoTensor};
use crate::conditioning::{build_rope_plan, ConditionBundle, TaskRequest, TextEncoder};
use crate::degrade::{build_corpus, save_corpus, CorpusSpec, DegradeRecipe, SdeditContext, Task};
use crate::dit::{check_model_gradients, Dit, Init, ModelConfig, ModulationInput, VelocityModel};
use crate::error::{Error, Result};
use crate::numerics::umvt;
use crate::sampler::{cfg_combine, pndm_sample, SamplerConfig};
use crate::trainer::{load_corpora, CheckpointManifest, TrainConfig, Trainer, CHECKPOINT_FILE};

const FPS: f32 = 8.0;

#[derive(Debug, Parser)]
#[command(name = "mmvsr", version, about = "Multi-modal latent video super-resolution at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the staged training schedule.
    Train(TrainArgs),
    /// Build a degraded training corpus.
    Degrade(DegradeArgs),
    /// Cascaded generation of one HR clip.
    Generate(GenerateArgs),
    /// PSNR/SSIM of a prediction against a target.
    Eval(EvalArgs),
    /// Quick numerical checks of the core components.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML training config.
    #[arg(long, required_unless_present = "resume")]
    pub config: Option<PathBuf>,
    /// Checkpoint directory to continue from; its stored config is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    #[arg(long)]
    pub task: Task,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// `default`, `light`, `heavy` or `identity`.
    #[arg(long, default_value = "default")]
    pub preset: String,
    #[arg(long, default_value_t = 7)]
    pub frames: usize,
    #[arg(long, default_value_t = 16)]
    pub height: usize,
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    /// Base text-to-video checkpoint for SDEdit; without it SDEdit is skipped.
    #[arg(long)]
    pub base_model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Upscaler checkpoint directory.
    #[arg(long)]
    pub model: PathBuf,
    /// Base text-to-video checkpoint; needed when no LR video is given.
    #[arg(long)]
    pub base_model: Option<PathBuf>,
    /// JSON task request; explicit flags override its fields.
    #[arg(long)]
    pub request: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub prompt: Option<String>,
    /// LR video (simulation mode).
    #[arg(long)]
    pub lr: Option<PathBuf>,
    #[arg(long = "id-image")]
    pub id_images: Vec<PathBuf>,
    #[arg(long)]
    pub ref_video: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub scale: usize,
    /// LR clip geometry sampled by the base model.
    #[arg(long, default_value_t = 7)]
    pub frames: usize,
    #[arg(long, default_value_t = 8)]
    pub lr_height: usize,
    #[arg(long, default_value_t = 8)]
    pub lr_width: usize,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub shift: f64,
    #[arg(long, default_value_t = 3.0)]
    pub s_txt: f64,
    #[arg(long, default_value_t = 1.0)]
    pub s_ref: f64,
    #[arg(long, default_value_t = 15)]
    pub n_ref: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Noise-augmentation step for the upsampled LR latent.
    #[arg(long, default_value_t = INFERENCE_NOISE_AUG_STEP)]
    pub noise_aug: u32,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the LR clip here.
    #[arg(long)]
    pub lr_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Edit mask `[f, h, w]`; nonzero marks edited pixels.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Also write the record here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                print!("{e}");
            } else {
                eprintln!("{}", json!({ "error": { "category": "usage", "message": e.to_string() } }));
            }
            return code;
        }
    };
    match run(cli.command) {
        Ok(v) => {
            println!("{v}");
            0
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "category": e.category(), "message": e.to_string() } }));
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<Value> {
    match command {
        Command::Train(a) => train(a),
        Command::Degrade(a) => degrade(a),
        Command::Generate(a) => generate(a),
        Command::Eval(a) => eval(a),
        Command::Selftest(a) => selftest(a),
    }
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

/// Text-table seed stored with a trained checkpoint; 0 otherwise.
fn text_seed(dir: &Path) -> u64 {
    fs::read_to_string(dir.join(CHECKPOINT_FILE))
        .ok()
        .and_then(|s| serde_json::from_str::<CheckpointManifest>(&s).ok())
        .map_or(0, |m| m.config.text_seed)
}

fn load_model(dir: &Path) -> Result<(Dit<f32>, TextEncoder)> {
    let model = Dit::load(dir)?;
    let text = TextEncoder::new(text_seed(dir), model.config().text_dim);
    Ok((model, text))
}

fn train(a: TrainArgs) -> Result<Value> {
    let mut trainer = match (&a.resume, &a.config) {
        (Some(dir), _) => {
            let path = dir.join(CHECKPOINT_FILE);
            let text = fs::read_to_string(&path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
            let m: CheckpointManifest = serde_json::from_str(&text)?;
            let corpora = load_corpora(&m.config.corpora, &m.config.stages())?;
            Trainer::resume(dir, corpora)?
        }
        (None, Some(path)) => Trainer::from_config(TrainConfig::from_file(path)?)?,
        (None, None) => return Err(Error::Config("train needs --config or --resume".into())),
    };
    let records = trainer.run()?;
    Ok(json!({
        "command": "train",
        "steps": trainer.step_count(),
        "final_loss": records.last().map(|r| r.loss),
        "checkpoint": trainer.config().checkpoint_dir.as_ref().map(|d| d.join("final")),
    }))
}

fn degrade(a: DegradeArgs) -> Result<Value> {
    let codec = Codec::new(CodecConfig::default())?;
    let spec = CorpusSpec {
        task: a.task,
        count: a.count,
        seed: a.seed,
        frames: a.frames,
        height: a.height,
        width: a.width,
        texture: None,
        recipe: DegradeRecipe { seed: a.seed, ..DegradeRecipe::preset(&a.preset)? },
    };
    spec.validate()?;
    let base = a.base_model.as_deref().map(load_model).transpose()?;
    let ctx = base.as_ref().map(|(model, text)| SdeditContext {
        model,
        text,
        sampler: SamplerConfig { steps: spec.recipe.grid_steps, s_ref: 0.0, n_ref: 0, seed: a.seed, ..SamplerConfig::default() },
    });
    let samples = build_corpus(&spec, ctx.as_ref(), &codec)?;
    let manifest = save_corpus(&a.out, &spec, ctx.is_some(), &samples)?;
    Ok(json!({ "command": "degrade", "task": a.task, "samples": manifest.samples.len(), "out": a.out }))
}

fn generate(a: GenerateArgs) -> Result<Value> {
    let codec = Codec::new(CodecConfig::default())?;
    let (model, text) = load_model(&a.model)?;
    let base = a.base_model.as_deref().map(Dit::load).transpose()?;

    let mut spec = match &a.request {
        Some(p) => TaskRequest::load(p)?,
        None => TaskRequest { task: Task::T2v, prompt: String::new(), lr_video: None, id_images: Vec::new(), ref_video: None },
    };
    if let Some(t) = a.task {
        spec.task = t;
    }
    if let Some(p) = &a.prompt {
        spec.prompt = p.clone();
    }
    if a.lr.is_some() {
        spec.lr_video = a.lr.clone();
    }
    if !a.id_images.is_empty() {
        spec.id_images = a.id_images.clone();
    }
    if a.ref_video.is_some() {
        spec.ref_video = a.ref_video.clone();
    }
    if a.request.is_none() && a.task.is_none() {
        return Err(Error::Config("generate needs --task or --request".into()));
    }
    spec.validate()?;

    let video = |p: &PathBuf| load_video(p).map(|(v, _)| v);
    let mut req = GenerateRequest::new(spec.task, spec.prompt.clone());
    req.lr_video = spec.lr_video.as_ref().map(video).transpose()?;
    req.id_images = spec.id_images.iter().map(video).collect::<Result<_>>()?;
    req.ref_video = spec.ref_video.as_ref().map(video).transpose()?;
    req.lr_shape = LrShape { frames: a.frames, height: a.lr_height, width: a.lr_width };
    req.scale = a.scale;
    req.sampler = SamplerConfig { steps: a.steps, shift: a.shift, s_txt: a.s_txt, s_ref: a.s_ref, n_ref: a.n_ref, seed: a.seed };
    req.sampler.validate()?;
    req.base_sampler = SamplerConfig { s_ref: 0.0, n_ref: 0, ..req.sampler.clone() };
    req.noise_aug_step = a.noise_aug;

    let base_text = a.base_model.as_deref().map(|d| TextEncoder::new(text_seed(d), text.dim()));
    let base_model: Option<&dyn VelocityModel> = base.as_ref().map(|m| m as &dyn VelocityModel);
    if let (Some(bt), Some(_)) = (&base_text, base_model) {
        if bt.seed() != text.seed() {
            return Err(Error::Config("base and upscaler checkpoints use different text tables".into()));
        }
    }
    let cascade = Cascade { base: base_model, upscaler: &model, codec: &codec, text: &text };
    let out = cascaded_generate(&cascade, &req)?;
    save_video(&a.out, &out.hr, FPS)?;
    if let Some(p) = &a.lr_out {
        save_video(p, &out.lr, FPS)?;
    }
    Ok(json!({ "command": "generate", "task": spec.task, "out": a.out, "dims": out.hr.dims() }))
}

fn eval(a: EvalArgs) -> Result<Value> {
    let (pred, _) = load_video(&a.pred)?;
    let (target, _) = load_video(&a.target)?;
    let mask = a.mask.as_ref().map(|p| Mask::from_tensor(&umvt::load(p)?)).transpose()?;
    let record = serde_json::to_value(evaluate(&pred, &target, mask.as_ref())?)?;
    if let Some(p) = &a.out {
        write_json(p, &record)?;
    }
    Ok(record)
}

struct ConstantVelocity(f32);

impl VelocityModel for ConstantVelocity {
    fn velocity(&self, z: &LatentVideo, _: &ConditionBundle, _: f64) -> Result<LatentVideo> {
        Ok(LatentVideo::full(z.frames(), z.channels(), z.height(), z.width(), self.0))
    }
}

fn check(name: &str, value: f64, passed: bool) -> Value {
    json!({ "name": name, "value": value, "passed": passed })
}

fn selftest(a: SelftestArgs) -> Result<Value> {
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let codec = Codec::new(CodecConfig::default())?;
    let video = VideoTensor::from_fn(2, 3, 8, 8, |_, _, _, _| rng.random());
    let err = codec.decode_raw(&codec.encode(&video)?)?.max_abs_diff(&video) as f64;
    checks.push(check("codec_roundtrip", err, err < 1e-5));

    let cfg = ModelConfig { model_dim: 24, heads: 2, blocks: 2, ffn_mult: 2, text_dim: 8, freq_dim: 8, ..ModelConfig::default() };
    let model = Dit::<f64>::with_gate_init(cfg, 1, Init::Xavier)?;
    let mut latent = |f: usize| LatentVideo::from_fn(f, 48, 2, 2, |_, _, _, _| rng.random_range(-1.0..1.0));
    let text = TextEncoder::new(0, 8);
    let mut bundle = ConditionBundle::text_only(text.encode("a red ball", false), text.null());
    bundle.lr_latent = Some(latent(2));
    bundle.id_images = vec![latent(1)];
    let (noisy, target) = (latent(2), latent(2));
    let m = ModulationInput::new(0.45, 300, FPS, 1.0)?;
    let report = check_model_gradients(&model, &noisy, &bundle, &m, &target, 2, 7, 1e-5)?;
    checks.push(check("model_gradients", report.max_abs_rel_error, report.max_abs_rel_error < 1e-3));

    let cfg = SamplerConfig { steps: 4, n_ref: 0, s_ref: 0.0, ..SamplerConfig::default() };
    let z = pndm_sample(&ConstantVelocity(0.5), &bundle, [1, 48, 2, 2], &cfg)?;
    let start = pndm_sample(&ConstantVelocity(0.0), &bundle, [1, 48, 2, 2], &cfg)?;
    let err = z.zip_map(&start, |a, b| a - b - 0.5)?.data().iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
    checks.push(check("sampler_constant_velocity", err, err <= 1e-5));

    let one = |v: f32| LatentVideo::full(1, 1, 1, 1, v);
    let g = cfg_combine(&one(2.0), &one(1.0), &one(1.5), 3.0, 1.0)?.data()[0] as f64;
    checks.push(check("cfg_example", g, g == 5.5));

    let plan = build_rope_plan(21, &[1, 1, 21])?;
    let disjoint = plan.ref_ranges().iter().all(|r| r.start >= 21) && plan.ref_ranges().windows(2).all(|w| w[0].end <= w[1].start);
    checks.push(check("rope_plan_disjoint", plan.ref_ranges().len() as f64, disjoint));

    let failed: Vec<String> =
        checks.iter().filter(|c| c["passed"] != json!(true)).map(|c| c["name"].as_str().unwrap_or("").to_string()).collect();
    let report = json!({ "command": "selftest", "passed": failed.is_empty(), "checks": checks });
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    if !failed.is_empty() {
        return Err(crate::error::contract_err!("selftest failed: {}", failed.join(", ")));
    }
    Ok(report)
}
