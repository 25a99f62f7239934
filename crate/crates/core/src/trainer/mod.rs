//! Staged multi-task flow-matching training with checkpoint and resume.

mod optim;
mod schedule;

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{AdamW, AdamWConfig};
pub use schedule::{order_stages, sample_task, stage_schedule, ScheduleConfig, StageSpec, TrainingOrder};

use crate::codec::{Codec, CodecConfig, LatentVideo};
use crate::conditioning::{encode_id_image, tokens_of, ConditionBundle, TextEncoder, TEXT_DROPOUT};
use crate::degrade::{load_corpus, reference_augment, Task, TrainSample};
use crate::dit::{read_archive, write_archive, Dit, ForwardOptions, ModelConfig, ModulationInput, TensorEntry};
use crate::error::{contract_err, Error, Result};
use crate::flowmatch::{gaussian_latent, make_training_pair, noise_augment, sample_noise_step, sample_t};
use crate::numerics::{Tape, Tensor, Var};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const OPTIMIZER_FILE: &str = "optimizer.umvt";
const FPS: f32 = 8.0;

/// Corpus directories per task; relative paths resolve against the config
/// file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusPaths {
    pub t2v: Option<PathBuf>,
    pub multi_id: Option<PathBuf>,
    pub edit: Option<PathBuf>,
}

impl CorpusPaths {
    pub fn get(&self, task: Task) -> Option<&PathBuf> {
        match task {
            Task::T2v => self.t2v.as_ref(),
            Task::MultiId => self.multi_id.as_ref(),
            Task::Edit => self.edit.as_ref(),
        }
    }

    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.t2v, &mut self.multi_id, &mut self.edit].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub order: TrainingOrder,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine-decay the learning rate to zero over the whole schedule.
    pub cosine_decay: bool,
    pub weight_decay: f64,
    /// Seed of the toy text embedding table.
    pub text_seed: u64,
    pub text_dropout: f64,
    /// Probability of dropping every visual reference of a sample.
    pub reference_dropout: f64,
    pub noise_augmentation: bool,
    pub reference_augmentation: bool,
    /// Train the text-to-video model on the LR clips instead of the
    /// super-resolver.
    pub base_model: bool,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    /// Save every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub corpora: CorpusPaths,
    pub schedule: ScheduleConfig,
    /// Replaces the default four-stage schedule before ordering.
    pub stages: Option<Vec<StageSpec>>,
    pub model: ModelConfig,
    pub codec: CodecConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            order: TrainingOrder::default(),
            batch_size: 1,
            lr: 1e-4,
            cosine_decay: false,
            weight_decay: 0.0,
            text_seed: 0,
            text_dropout: TEXT_DROPOUT,
            reference_dropout: 0.1,
            noise_augmentation: true,
            reference_augmentation: true,
            base_model: false,
            checkpoint_dir: None,
            log_path: None,
            checkpoint_every: 0,
            corpora: CorpusPaths::default(),
            schedule: ScheduleConfig::default(),
            stages: None,
            model: ModelConfig::default(),
            codec: CodecConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Parses a TOML file and resolves its relative paths against the file's
    /// directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.corpora.resolve(base);
        for p in [&mut cfg.checkpoint_dir, &mut cfg.log_path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }

    /// Stages in training order.
    pub fn stages(&self) -> Vec<StageSpec> {
        let base = self.stages.clone().unwrap_or_else(|| stage_schedule(&self.schedule));
        let stages = if self.base_model {
            base.into_iter()
                .map(|s| StageSpec { tasks: vec![Task::T2v], probabilities: vec![1.0], ..s })
                .collect::<Vec<_>>()
        } else {
            base
        };
        order_stages(&stages, self.order)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be finite and non-negative", self.lr)));
        }
        for (name, p) in [("text_dropout", self.text_dropout), ("reference_dropout", self.reference_dropout)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        self.model.validate()?;
        let stages = self.stages();
        if stages.is_empty() {
            return Err(Error::Config("no training stages".into()));
        }
        stages.iter().try_for_each(StageSpec::validate)
    }
}

/// Random choices made for one training example before any tensor work.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionDraw {
    pub text_dropped: bool,
    pub refs_dropped: bool,
    /// Noise-augmentation step; 0 when augmentation is off.
    pub noise_aug_step: u32,
}

/// One prepared flow-matching example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub task: Task,
    pub z_t: LatentVideo,
    pub v_target: LatentVideo,
    pub bundle: ConditionBundle,
    pub modulation: ModulationInput,
    pub draw: ConditionDraw,
}

/// One line of the JSON-lines loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub stage: usize,
    pub task: Task,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex of the 32-byte key.
    pub seed: String,
    pub stream: u64,
    /// Decimal word position; too wide for a JSON number.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format(format!("bad rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut key = [0u8; 32];
        for (i, b) in key.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Contents of `checkpoint.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub step: u64,
    pub stage_index: usize,
    pub stage_step: usize,
    pub adam_step: u64,
    pub rng: RngState,
    pub moments: Vec<TensorEntry>,
    pub config: TrainConfig,
}

/// Training data per task, indexed by `Task as usize`.
pub type Corpora = [Vec<TrainSample>; 3];

/// Loads every corpus named in `paths` that a stage needs.
pub fn load_corpora(paths: &CorpusPaths, stages: &[StageSpec]) -> Result<Corpora> {
    let mut out: Corpora = Default::default();
    for task in Task::ALL {
        if !stages.iter().any(|s| s.tasks.contains(&task)) {
            continue;
        }
        let dir = paths.get(task).ok_or_else(|| Error::Missing(format!("no corpus path for task {}", task.as_str())))?;
        let (_, samples) = load_corpus(dir)?;
        out[task as usize] = samples;
    }
    Ok(out)
}

pub struct Trainer {
    cfg: TrainConfig,
    model: Dit<f32>,
    opt: AdamW,
    codec: Codec,
    text: TextEncoder,
    stages: Vec<StageSpec>,
    corpora: Corpora,
    rng: ChaCha8Rng,
    step: u64,
    stage_index: usize,
    stage_step: usize,
}

impl Trainer {
    /// Fresh model and optimizer over in-memory corpora.
    pub fn new(mut cfg: TrainConfig, corpora: Corpora) -> Result<Self> {
        if cfg.base_model {
            cfg.model.lr_conditioning = false;
        }
        cfg.validate()?;
        let stages = cfg.stages();
        for task in Task::ALL {
            if stages.iter().any(|s| s.tasks.contains(&task)) && corpora[task as usize].is_empty() {
                return Err(Error::Missing(format!("empty corpus for task {}", task.as_str())));
            }
        }
        let model = Dit::new(cfg.model.clone(), cfg.seed)?;
        let opt = AdamW::new(cfg.optimizer(), model.params().tensors());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            codec: Codec::new(cfg.codec.clone())?,
            text: TextEncoder::new(cfg.text_seed, cfg.model.text_dim),
            model,
            opt,
            stages,
            corpora,
            rng,
            step: 0,
            stage_index: 0,
            stage_step: 0,
            cfg,
        })
    }

    /// Loads the corpora named in the config.
    pub fn from_config(cfg: TrainConfig) -> Result<Self> {
        let corpora = load_corpora(&cfg.corpora, &cfg.stages())?;
        Self::new(cfg, corpora)
    }

    /// Restores a trainer saved by [`Trainer::save_checkpoint`].
    pub fn resume(dir: &Path, corpora: Corpora) -> Result<Self> {
        let path = dir.join(CHECKPOINT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        let mut t = Self::new(manifest.config.clone(), corpora)?;
        t.model = Dit::load(dir)?;
        if t.model.config() != &t.cfg.model {
            return Err(Error::Format("checkpoint model config differs from its training config".into()));
        }
        let moments = read_archive(&dir.join(OPTIMIZER_FILE), &manifest.moments)?;
        let n = t.model.params().len();
        if moments.len() != 2 * n {
            return Err(Error::Format(format!("{} moment tensors for {n} parameters", moments.len())));
        }
        let (m, v): (Vec<_>, Vec<_>) = moments.into_iter().map(|(_, t)| t).enumerate().partition(|(i, _)| *i < n);
        t.opt.m = m.into_iter().map(|(_, t)| t).collect();
        t.opt.v = v.into_iter().map(|(_, t)| t).collect();
        t.opt.step = manifest.adam_step;
        t.rng = manifest.rng.restore()?;
        t.step = manifest.step;
        t.stage_index = manifest.stage_index;
        t.stage_step = manifest.stage_step;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Dit<f32> {
        &self.model
    }

    pub fn into_model(self) -> Dit<f32> {
        self.model
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn stages(&self) -> &[StageSpec] {
        &self.stages
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn finished(&self) -> bool {
        self.stage_index >= self.stages.len()
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Draws dropout and noise-augmentation choices for one example.
    pub fn draw_conditions<R: Rng>(cfg: &TrainConfig, task: Task, rng: &mut R) -> ConditionDraw {
        let text_dropped = rng.random_bool(cfg.text_dropout);
        let refs_dropped = task.uses_references() && rng.random_bool(cfg.reference_dropout);
        let noise_aug_step = if cfg.noise_augmentation && !cfg.base_model { sample_noise_step(rng) } else { 0 };
        ConditionDraw { text_dropped, refs_dropped, noise_aug_step }
    }

    /// Turns a stored sample into a flow-matching example over a random
    /// window of at most `frames` frames.
    pub fn prepare_example(&mut self, sample: &TrainSample, frames: usize) -> Result<Example> {
        let rng = &mut self.rng;
        let total = sample.hr.frames();
        let len = frames.min(total);
        let start = if total > len { rng.random_range(0..=total - len) } else { 0 };
        let mut s = TrainSample {
            hr: sample.hr.frame_range(start, len)?,
            lr: sample.lr.frame_range(start, len)?,
            ref_video: sample.ref_video.as_ref().map(|r| r.frame_range(start, len)).transpose()?,
            edit_mask: sample.edit_mask.as_ref().map(|m| m.frame_range(start, len)).transpose()?,
            ..sample.clone()
        };
        if s.task == Task::Edit && !s.edit_aligned() {
            return Err(contract_err!("edit sample {} differs from its reference outside the mask", s.index));
        }

        let draw = Self::draw_conditions(&self.cfg, s.task, rng);
        if s.task.uses_references() && !draw.refs_dropped && self.cfg.reference_augmentation && !self.cfg.base_model {
            s = reference_augment(&s, rng)?;
        }

        let text = self.text.encode(&s.prompt, draw.text_dropped);
        let mut bundle = ConditionBundle::text_only(text, self.text.null());
        bundle.fps = FPS;
        let z_lr = self.codec.encode(&s.lr)?;
        let z_target = if self.cfg.base_model {
            bundle.aspect = s.lr.width() as f32 / s.lr.height() as f32;
            z_lr
        } else {
            let scale = s.hr.height() / s.lr.height();
            let up = self.codec.upsample_latent(&z_lr, scale)?;
            bundle.lr_latent = Some(if draw.noise_aug_step > 0 {
                let eps = gaussian_latent(rng, up.dims());
                noise_augment(&up, draw.noise_aug_step, &eps)?
            } else {
                up
            });
            bundle.noise_aug_step = draw.noise_aug_step;
            bundle.aspect = s.hr.width() as f32 / s.hr.height() as f32;
            if !draw.refs_dropped {
                bundle.id_images = s
                    .id_images
                    .iter()
                    .map(|img| encode_id_image(&self.codec, img, s.hr.height(), s.hr.width()))
                    .collect::<Result<_>>()?;
                bundle.ref_video = s.ref_video.as_ref().map(|r| self.codec.encode(r)).transpose()?;
            }
            self.codec.encode(&s.hr)?
        };

        let t = sample_t(rng);
        let eps = gaussian_latent(rng, z_target.dims());
        let pair = make_training_pair(&z_target, &eps, t)?;
        let modulation = ModulationInput::from_bundle(t, &bundle)?;
        Ok(Example { task: s.task, z_t: pair.z_t, v_target: pair.v_target, bundle, modulation, draw })
    }

    /// One optimizer update on the mean loss of `examples`; returns the loss
    /// before the update.
    pub fn optimize(&mut self, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Err(contract_err!("empty batch"));
        }
        let tape = Tape::new();
        let p = self.model.params().bind(&tape, true);
        let mut losses: Vec<Var<'_, f32>> = Vec::with_capacity(examples.len());
        for ex in examples {
            let (pred, _) =
                self.model.forward_tape(&tape, &p, &ex.z_t, &ex.bundle, &ex.modulation, &ForwardOptions::default())?;
            let target = tape.constant(tokens_of(&ex.v_target));
            losses.push(pred.sub(target)?.square()?.mean()?);
        }
        let mut total = losses[0];
        for l in &losses[1..] {
            total = total.add(*l)?;
        }
        let loss = total.scale(1.0 / examples.len() as f32)?;
        let value = loss.value().data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.step)));
        }
        let mut grads = tape.backward(loss)?;
        let g: Vec<Option<Tensor<f32>>> = p.iter().map(|v| grads.take(*v)).collect();
        self.opt.cfg.lr = self.lr_at(self.step);
        self.opt.update(self.model.params_mut().tensors_mut(), &g)?;
        Ok(value)
    }

    /// Prepares and optimizes one task-homogeneous batch.
    pub fn train_step(&mut self, batch: &[TrainSample], frames: usize) -> Result<f64> {
        let Some(first) = batch.first() else { return Err(contract_err!("empty batch")) };
        if batch.iter().any(|s| s.task != first.task) {
            return Err(contract_err!("mixed-task batch"));
        }
        let examples = batch.iter().map(|s| self.prepare_example(s, frames)).collect::<Result<Vec<_>>>()?;
        if examples.iter().any(|e| e.z_t.frames() != examples[0].z_t.frames()) {
            return Err(contract_err!("batch mixes frame counts"));
        }
        self.optimize(&examples)
    }

    /// Learning rate of optimizer update number `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if !self.cfg.cosine_decay {
            return self.cfg.lr;
        }
        let total = self.stages.iter().map(|s| s.step_budget).sum::<usize>().max(1) as f64;
        let progress = (step as f64 / total).min(1.0);
        self.cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// Runs the next scheduled step; `None` once every stage is done.
    pub fn step(&mut self) -> Result<Option<LossRecord>> {
        while self.stage_index < self.stages.len() && self.stage_step >= self.stages[self.stage_index].step_budget {
            self.stage_index += 1;
            self.stage_step = 0;
        }
        let Some(stage) = self.stages.get(self.stage_index).cloned() else { return Ok(None) };
        let task = sample_task(&stage, &mut self.rng);
        let pool = &self.corpora[task as usize];
        let batch: Vec<TrainSample> =
            (0..self.cfg.batch_size).map(|_| pool[self.rng.random_range(0..pool.len())].clone()).collect();
        let loss = self.train_step(&batch, stage.frames)?;
        self.step += 1;
        self.stage_step += 1;
        Ok(Some(LossRecord { step: self.step, stage: stage.stage_id, task, loss }))
    }

    /// Writes model, optimizer moments and trainer state into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)?;
        let names = self.model.params().names();
        let entries: Vec<(String, Tensor<f32>)> = names
            .iter()
            .zip(&self.opt.m)
            .map(|(n, t)| (format!("m.{n}"), t.clone()))
            .chain(names.iter().zip(&self.opt.v).map(|(n, t)| (format!("v.{n}"), t.clone())))
            .collect();
        let moments = write_archive(&dir.join(OPTIMIZER_FILE), &entries)?;
        let manifest = CheckpointManifest {
            step: self.step,
            stage_index: self.stage_index,
            stage_step: self.stage_step,
            adam_step: self.opt.step,
            rng: RngState::capture(&self.rng),
            moments,
            config: self.cfg.clone(),
        };
        fs::write(dir.join(CHECKPOINT_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Trains to the end of the schedule, appending to the loss log and
    /// saving checkpoints as configured. Returns the records of this call.
    pub fn run(&mut self) -> Result<Vec<LossRecord>> {
        let mut log = match &self.cfg.log_path {
            Some(p) => {
                if let Some(parent) = p.parent() {
                    fs::create_dir_all(parent)?;
                }
                Some(OpenOptions::new().create(true).append(true).open(p)?)
            }
            None => None,
        };
        let mut records = Vec::new();
        while let Some(rec) = self.step()? {
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&rec)?)?;
            }
            records.push(rec);
            if let Some(dir) = &self.cfg.checkpoint_dir {
                if self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0 {
                    self.save_checkpoint(&dir.join(format!("step_{:06}", self.step)))?;
                }
            }
        }
        if let Some(dir) = &self.cfg.checkpoint_dir {
            self.save_checkpoint(&dir.join("final"))?;
        }
        Ok(records)
    }
}
