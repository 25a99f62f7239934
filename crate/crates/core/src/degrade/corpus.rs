use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{degrade_pipeline, DegradeRecipe, Scene, SdeditContext, Task};
use crate::codec::{bilinear_resize, load_video, save_video, Codec, Mask, VideoTensor};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::numerics::umvt;

pub const CORPUS_MANIFEST: &str = "manifest.json";
const FPS: f32 = 8.0;

/// One HR/LR training pair with its references.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub index: usize,
    pub task: Task,
    pub prompt: String,
    pub hr: VideoTensor,
    pub lr: VideoTensor,
    /// Single-frame crops `[1, 3, h, w]`.
    pub id_images: Vec<VideoTensor>,
    pub ref_video: Option<VideoTensor>,
    /// Edited region; `hr` and `ref_video` agree everywhere else.
    pub edit_mask: Option<Mask>,
}

impl TrainSample {
    /// Checks the structural invariants of the sample's task.
    pub fn validate(&self, downscale: usize) -> Result<()> {
        if self.lr.height() * downscale != self.hr.height() || self.lr.width() * downscale != self.hr.width() {
            return Err(shape_err!("lr {:?} is not hr {:?} / {downscale}", self.lr.dims(), self.hr.dims()));
        }
        match self.task {
            Task::T2v => {}
            Task::MultiId if self.id_images.is_empty() => return Err(contract_err!("multi_id sample without id images")),
            Task::MultiId => {}
            Task::Edit => {
                let (r, m) = match (&self.ref_video, &self.edit_mask) {
                    (Some(r), Some(m)) => (r, m),
                    _ => return Err(contract_err!("edit sample needs a reference video and a mask")),
                };
                if !r.same_shape(&self.hr) || m.frames() != self.hr.frames() {
                    return Err(shape_err!("edit reference {:?} vs hr {:?}", r.dims(), self.hr.dims()));
                }
            }
        }
        Ok(())
    }

    /// True when `hr` and `ref_video` agree exactly outside the mask.
    pub fn edit_aligned(&self) -> bool {
        let (Some(r), Some(m)) = (&self.ref_video, &self.edit_mask) else { return false };
        for f in 0..self.hr.frames() {
            for c in 0..self.hr.channels() {
                for y in 0..self.hr.height() {
                    for x in 0..self.hr.width() {
                        if !m.get(f, y, x) && self.hr.at(f, c, y, x) != r.at(f, c, y, x) {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

/// What to generate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub task: Task,
    pub count: usize,
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Background texture amplitude; `None` picks the task default.
    pub texture: Option<f32>,
    pub recipe: DegradeRecipe,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { task: Task::T2v, count: 16, seed: 0, frames: 7, height: 16, width: 16, texture: None, recipe: DegradeRecipe::default() }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        self.recipe.validate()?;
        if self.count == 0 || self.frames == 0 {
            return Err(Error::Config("corpus needs count >= 1 and frames >= 1".into()));
        }
        let unit = 4 * self.recipe.downscale_factor;
        if self.height % unit != 0 || self.width % unit != 0 {
            return Err(Error::Config(format!("{}x{} must be multiples of {unit}", self.height, self.width)));
        }
        Ok(())
    }

    fn texture(&self) -> f32 {
        self.texture.unwrap_or(match self.task {
            Task::Edit => 0.12,
            _ => 0.05,
        })
    }
}

/// Independent generator for sample `index`.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn crop(video: &VideoTensor, frame: usize, y0: usize, x0: usize, h: usize, w: usize) -> VideoTensor {
    VideoTensor::from_fn(1, video.channels(), h, w, |_, c, y, x| video.at(frame, c, y0 + y, x0 + x))
}

/// Generates sample `index`; depends only on `(spec, index)`.
pub fn build_sample(spec: &CorpusSpec, index: usize, ctx: Option<&SdeditContext<'_>>, codec: &Codec) -> Result<TrainSample> {
    let mut rng = sample_rng(spec.seed, index);
    let scene = Scene::random(&mut rng, spec.frames, spec.height, spec.width, spec.texture());
    let hr = scene.render();
    let mut sample = TrainSample {
        index,
        task: spec.task,
        prompt: scene.prompt(),
        lr: hr.clone(),
        hr,
        id_images: Vec::new(),
        ref_video: None,
        edit_mask: None,
    };
    match spec.task {
        Task::T2v => {}
        Task::MultiId => {
            for shape in &scene.shapes {
                let frame = rng.random_range(0..spec.frames);
                let side = ((2.0 * shape.radius + 2.0).ceil() as usize).clamp(2, spec.height.min(spec.width));
                let (y0, x0, y1, x1) = shape.bounds(frame, spec.height, spec.width);
                let cy = (y0 + y1) / 2;
                let cx = (x0 + x1) / 2;
                let top = cy.saturating_sub(side / 2).min(spec.height - side);
                let left = cx.saturating_sub(side / 2).min(spec.width - side);
                sample.id_images.push(crop(&sample.hr, frame, top, left, side, side));
            }
        }
        Task::Edit => {
            let shift = rng.random_range(1..Scene::palette_len());
            let original = scene.recolored(0, scene.shapes[0].color + shift).render();
            let mask = scene.shape_mask(0);
            let mut reference = sample.hr.clone();
            for f in 0..spec.frames {
                for c in 0..3 {
                    for y in 0..spec.height {
                        for x in 0..spec.width {
                            if mask.get(f, y, x) {
                                reference.set(f, c, y, x, original.at(f, c, y, x));
                            }
                        }
                    }
                }
            }
            sample.ref_video = Some(reference);
            sample.edit_mask = Some(mask);
        }
    }
    sample.lr = degrade_pipeline(&sample.hr, &sample.prompt, ctx, codec, &spec.recipe, &mut rng)?;
    Ok(sample)
}

pub fn build_corpus(spec: &CorpusSpec, ctx: Option<&SdeditContext<'_>>, codec: &Codec) -> Result<Vec<TrainSample>> {
    spec.validate()?;
    (0..spec.count).map(|i| build_sample(spec, i, ctx, codec)).collect()
}

/// Geometric/photometric jitter for one ID image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageAugment {
    pub flip: bool,
    /// Resize factor in [0.8, 1.2].
    pub scale: Option<f64>,
    /// Translation as a fraction of the side, each in [-0.1, 0.1].
    pub crop: Option<(f64, f64)>,
    /// Additive brightness in [-0.1, 0.1].
    pub brightness: Option<f32>,
}

/// Drawn reference augmentation for one sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentPlan {
    pub images: Vec<ImageAugment>,
    /// Circular start-frame shift of the reference video.
    pub shift: i32,
}

pub fn draw_augment<R: Rng>(sample: &TrainSample, rng: &mut R) -> Result<AugmentPlan> {
    match sample.task {
        Task::T2v => Err(contract_err!("reference augmentation on a t2v sample")),
        Task::MultiId => Ok(AugmentPlan {
            images: sample
                .id_images
                .iter()
                .map(|_| ImageAugment {
                    flip: rng.random_bool(0.5),
                    scale: rng.random_bool(0.5).then(|| rng.random_range(0.8..=1.2)),
                    crop: rng.random_bool(0.5).then(|| (rng.random_range(-0.1..=0.1), rng.random_range(-0.1..=0.1))),
                    brightness: rng.random_bool(0.5).then(|| rng.random_range(-0.1..=0.1)),
                })
                .collect(),
            shift: 0,
        }),
        Task::Edit => Ok(AugmentPlan { images: Vec::new(), shift: rng.random_range(-2..=2) }),
    }
}

fn flip_horizontal(img: &VideoTensor) -> VideoTensor {
    let w = img.width();
    VideoTensor::from_fn(img.frames(), img.channels(), img.height(), w, |f, c, y, x| img.at(f, c, y, w - 1 - x))
}

fn augment_image(img: &VideoTensor, a: &ImageAugment) -> Result<VideoTensor> {
    let mut out = if a.flip { flip_horizontal(img) } else { img.clone() };
    if let Some(s) = a.scale {
        let h = ((out.height() as f64 * s).round() as usize).max(1);
        let w = ((out.width() as f64 * s).round() as usize).max(1);
        out = bilinear_resize(&out, h, w)?;
    }
    if let Some((fy, fx)) = a.crop {
        let (h, w) = (out.height() as isize, out.width() as isize);
        let dy = (fy * h as f64).round() as isize;
        let dx = (fx * w as f64).round() as isize;
        let src = out.clone();
        out = VideoTensor::from_fn(src.frames(), src.channels(), src.height(), src.width(), |f, c, y, x| {
            let yy = (y as isize + dy).clamp(0, h - 1) as usize;
            let xx = (x as isize + dx).clamp(0, w - 1) as usize;
            src.at(f, c, yy, xx)
        });
    }
    if let Some(b) = a.brightness {
        out = out.map(|v| (v + b).clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Applies `plan` to a copy of `sample`.
pub fn apply_augment(sample: &TrainSample, plan: &AugmentPlan) -> Result<TrainSample> {
    if sample.task == Task::T2v {
        return Err(contract_err!("reference augmentation on a t2v sample"));
    }
    let mut out = sample.clone();
    if !plan.images.is_empty() {
        if plan.images.len() != sample.id_images.len() {
            return Err(contract_err!("{} image augments for {} id images", plan.images.len(), sample.id_images.len()));
        }
        out.id_images = sample.id_images.iter().zip(&plan.images).map(|(i, a)| augment_image(i, a)).collect::<Result<_>>()?;
    }
    if plan.shift != 0 {
        if let Some(r) = &sample.ref_video {
            let f = r.frames() as i64;
            let idx: Vec<usize> = (0..f).map(|i| (i + plan.shift as i64).rem_euclid(f) as usize).collect();
            out.ref_video = Some(r.select_frames(&idx)?);
        }
    }
    Ok(out)
}

/// Draws and applies a reference augmentation.
pub fn reference_augment<R: Rng>(sample: &TrainSample, rng: &mut R) -> Result<TrainSample> {
    let plan = draw_augment(sample, rng)?;
    apply_augment(sample, &plan)
}

/// File names of one stored sample, relative to the corpus directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: usize,
    pub task: Task,
    pub prompt: String,
    pub hr: String,
    pub lr: String,
    pub id_images: Vec<String>,
    pub ref_video: Option<String>,
    pub edit_mask: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec: CorpusSpec,
    /// Whether SDEdit ran through a base model.
    pub sdedit_model: bool,
    pub samples: Vec<SampleEntry>,
}

pub fn save_corpus(dir: &Path, spec: &CorpusSpec, sdedit_model: bool, samples: &[TrainSample]) -> Result<CorpusManifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let stem = format!("{:04}", s.index);
        let hr = format!("{stem}_hr.umvt");
        let lr = format!("{stem}_lr.umvt");
        save_video(dir.join(&hr), &s.hr, FPS)?;
        save_video(dir.join(&lr), &s.lr, FPS)?;
        let mut id_images = Vec::new();
        for (j, img) in s.id_images.iter().enumerate() {
            let name = format!("{stem}_id{j}.umvt");
            umvt::save(dir.join(&name), img.tensor())?;
            id_images.push(name);
        }
        let ref_video = match &s.ref_video {
            Some(r) => {
                let name = format!("{stem}_ref.umvt");
                save_video(dir.join(&name), r, FPS)?;
                Some(name)
            }
            None => None,
        };
        let edit_mask = match &s.edit_mask {
            Some(m) => {
                let name = format!("{stem}_mask.umvt");
                umvt::save(dir.join(&name), &m.to_tensor())?;
                Some(name)
            }
            None => None,
        };
        entries.push(SampleEntry { index: s.index, task: s.task, prompt: s.prompt.clone(), hr, lr, id_images, ref_video, edit_mask });
    }
    let manifest = CorpusManifest { spec: spec.clone(), sdedit_model, samples: entries };
    fs::write(dir.join(CORPUS_MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn load_corpus(dir: &Path) -> Result<(CorpusManifest, Vec<TrainSample>)> {
    let path = dir.join(CORPUS_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    let manifest: CorpusManifest = serde_json::from_str(&text)?;
    let video = |name: &str| -> Result<VideoTensor> { Ok(load_video(dir.join(name))?.0) };
    let samples = manifest
        .samples
        .iter()
        .map(|e| {
            let sample = TrainSample {
                index: e.index,
                task: e.task,
                prompt: e.prompt.clone(),
                hr: video(&e.hr)?,
                lr: video(&e.lr)?,
                id_images: e
                    .id_images
                    .iter()
                    .map(|n| VideoTensor::from_tensor(umvt::load(dir.join(n))?))
                    .collect::<Result<_>>()?,
                ref_video: e.ref_video.as_deref().map(video).transpose()?,
                edit_mask: e.edit_mask.as_deref().map(|n| Mask::from_tensor(&umvt::load(dir.join(n))?)).transpose()?,
            };
            sample.validate(manifest.spec.recipe.downscale_factor)?;
            Ok(sample)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
