//! Training-data factory: toy HR scenes, SDEdit degradation through a base
//! model, synthetic degradation, reference extraction and augmentation.

mod corpus;
mod scene;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use corpus::{
    apply_augment, build_corpus, build_sample, draw_augment, load_corpus, reference_augment, save_corpus,
    AugmentPlan, CorpusManifest, CorpusSpec, ImageAugment, SampleEntry, TrainSample, CORPUS_MANIFEST,
};
pub use scene::{Scene, Shape, ShapeKind};

use crate::codec::{bilinear_resize, Codec, VideoTensor};
use crate::conditioning::{ConditionBundle, TextEncoder};
use crate::dit::VelocityModel;
use crate::error::{Error, Result};
use crate::flowmatch::gaussian_latent;
use crate::sampler::{pndm_integrate, shift_timesteps, SamplerConfig};

/// The three generation tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    T2v,
    MultiId,
    Edit,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::T2v, Task::MultiId, Task::Edit];

    pub fn uses_references(self) -> bool {
        self != Task::T2v
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::T2v => "t2v",
            Task::MultiId => "multi_id",
            Task::Edit => "edit",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t2v" => Ok(Task::T2v),
            "multi-id" | "multi_id" => Ok(Task::MultiId),
            "edit" => Ok(Task::Edit),
            other => Err(Error::Config(format!("unknown task {other:?} (t2v, multi-id, edit)"))),
        }
    }
}

/// Parameters of the degradation pipeline. Ranges are inclusive `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradeRecipe {
    /// SDEdit step range out of `grid_steps`.
    pub k_min: usize,
    pub k_max: usize,
    pub grid_steps: usize,
    pub blur_sigma: (f64, f64),
    pub noise_sigma: (f64, f64),
    /// Side of the averaging blocks; 1 disables blocking.
    pub block_size: usize,
    /// Blend weight toward the block average.
    pub block_mix: (f64, f64),
    pub downscale_factor: usize,
    /// Chance that a sample goes through SDEdit at all.
    pub sdedit_probability: f64,
    pub seed: u64,
}

impl Default for DegradeRecipe {
    fn default() -> Self {
        Self {
            k_min: 5,
            k_max: 25,
            grid_steps: 50,
            blur_sigma: (0.2, 1.0),
            noise_sigma: (0.0, 0.03),
            block_size: 2,
            block_mix: (0.0, 0.5),
            downscale_factor: 2,
            sdedit_probability: 1.0,
            seed: 0,
        }
    }
}

impl DegradeRecipe {
    /// Weak structural change: `k` in `[0.1 N, 0.3 N]`.
    pub fn light() -> Self {
        Self { k_min: 5, k_max: 15, ..Self::default() }
    }

    /// Strong structural change: `k` in `[0.3 N, 0.6 N]`.
    pub fn heavy() -> Self {
        Self { k_min: 15, k_max: 30, blur_sigma: (0.5, 1.5), noise_sigma: (0.01, 0.05), ..Self::default() }
    }

    /// Every operator at its identity setting and no SDEdit steps.
    pub fn identity() -> Self {
        Self {
            k_min: 0,
            k_max: 0,
            blur_sigma: (0.0, 0.0),
            noise_sigma: (0.0, 0.0),
            block_size: 1,
            block_mix: (0.0, 0.0),
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "light" => Ok(Self::light()),
            "heavy" => Ok(Self::heavy()),
            "default" => Ok(Self::default()),
            "identity" => Ok(Self::identity()),
            other => Err(Error::Config(format!("unknown preset {other:?} (light, heavy, default, identity)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let max_k = (self.grid_steps as f64 * 0.6).floor() as usize;
        if self.k_min > self.k_max || self.k_max > max_k {
            return Err(Error::Config(format!(
                "need 0 <= k_min ({}) <= k_max ({}) <= 0.6 N ({max_k})",
                self.k_min, self.k_max
            )));
        }
        for (name, (lo, hi)) in [("blur_sigma", self.blur_sigma), ("noise_sigma", self.noise_sigma), ("block_mix", self.block_mix)] {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) invalid")));
            }
        }
        if self.block_mix.1 > 1.0 || self.block_size == 0 || self.downscale_factor == 0 || self.grid_steps == 0 {
            return Err(Error::Config("block_mix <= 1, block_size, downscale_factor, grid_steps >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.sdedit_probability) {
            return Err(Error::Config(format!("sdedit_probability {} outside [0, 1]", self.sdedit_probability)));
        }
        Ok(())
    }

    /// Uniform SDEdit step count in `[k_min, k_max]`.
    pub fn draw_k<R: Rng>(&self, rng: &mut R) -> usize {
        rng.random_range(self.k_min..=self.k_max)
    }
}

fn draw_range<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo { rng.random_range(lo..=hi) } else { lo }
}

/// Separable Gaussian blur with edge clamping; `sigma == 0` is the identity.
pub fn gaussian_blur(x: &VideoTensor, sigma: f64) -> VideoTensor {
    if sigma <= 0.0 {
        return x.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let norm: f32 = weights.iter().sum();
    let weights: Vec<f32> = weights.iter().map(|w| w / norm).collect();
    let (h, w) = (x.height() as isize, x.width() as isize);
    let pass = |src: &VideoTensor, vertical: bool| {
        VideoTensor::from_fn(src.frames(), src.channels(), src.height(), src.width(), |f, c, y, xx| {
            let mut acc = 0.0;
            for (k, wk) in weights.iter().enumerate() {
                let o = k as isize - radius;
                let (yy, xs) = if vertical {
                    ((y as isize + o).clamp(0, h - 1), xx as isize)
                } else {
                    (y as isize, (xx as isize + o).clamp(0, w - 1))
                };
                acc += wk * src.at(f, c, yy as usize, xs as usize);
            }
            acc
        })
    };
    pass(&pass(x, false), true)
}

/// Blends each pixel toward the mean of its `block`-sized tile.
pub fn block_average(x: &VideoTensor, block: usize, mix: f64) -> VideoTensor {
    if block <= 1 || mix <= 0.0 {
        return x.clone();
    }
    let mut out = x.clone();
    let m = mix as f32;
    for f in 0..x.frames() {
        for c in 0..x.channels() {
            for by in (0..x.height()).step_by(block) {
                for bx in (0..x.width()).step_by(block) {
                    let (y1, x1) = ((by + block).min(x.height()), (bx + block).min(x.width()));
                    let mut sum = 0.0;
                    for y in by..y1 {
                        for xx in bx..x1 {
                            sum += x.at(f, c, y, xx);
                        }
                    }
                    let mean = sum / ((y1 - by) * (x1 - bx)) as f32;
                    for y in by..y1 {
                        for xx in bx..x1 {
                            out.set(f, c, y, xx, (1.0 - m) * x.at(f, c, y, xx) + m * mean);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Blur, additive Gaussian noise, block averaging, clamp to [0, 1]; the
/// strength of each is drawn from the recipe ranges.
pub fn synthetic_degrade<R: Rng>(x: &VideoTensor, recipe: &DegradeRecipe, rng: &mut R) -> VideoTensor {
    let blur = draw_range(rng, recipe.blur_sigma);
    let noise = draw_range(rng, recipe.noise_sigma);
    let mix = draw_range(rng, recipe.block_mix);
    let mut y = gaussian_blur(x, blur);
    if noise > 0.0 {
        let dist = Normal::new(0.0f32, noise as f32).expect("finite sigma");
        y.data_mut().iter_mut().for_each(|v| *v += dist.sample(rng));
    }
    block_average(&y, recipe.block_size, mix).map(|v| v.clamp(0.0, 1.0))
}

/// Base text-to-video model and its supporting pieces for SDEdit.
pub struct SdeditContext<'a> {
    pub model: &'a dyn VelocityModel,
    pub text: &'a TextEncoder,
    pub sampler: SamplerConfig,
}

/// Downsamples `hr` to base resolution, then noises its latent to `t_k` of
/// the sampler grid and denoises `k` steps with the prompt only. Without a
/// base model (or when `k == 0`) the output is the downsampled clip passed
/// through the codec.
pub fn sdedit_degrade<R: Rng>(
    hr: &VideoTensor,
    prompt: &str,
    ctx: Option<&SdeditContext<'_>>,
    codec: &Codec,
    recipe: &DegradeRecipe,
    rng: &mut R,
) -> Result<VideoTensor> {
    recipe.validate()?;
    let d = recipe.downscale_factor;
    if hr.height() % d != 0 || hr.width() % d != 0 {
        return Err(crate::error::shape_err!("{}x{} not divisible by downscale {d}", hr.height(), hr.width()));
    }
    let small = bilinear_resize(hr, hr.height() / d, hr.width() / d)?;
    let k = recipe.draw_k(rng);
    let z = codec.encode(&small)?;
    let ctx = match ctx {
        Some(ctx) if k > 0 => ctx,
        _ => return codec.decode(&z),
    };
    let n = recipe.grid_steps;
    let grid = shift_timesteps(n, ctx.sampler.shift)?;
    let start = n - k;
    let t_k = grid[start];
    let eps = gaussian_latent(rng, z.dims());
    let tk = t_k as f32;
    let noisy = z.zip_map(&eps, |a, e| (1.0 - tk) * a + tk * e)?;
    let bundle = ConditionBundle::text_only(ctx.text.encode(prompt, false), ctx.text.null());
    let cfg = SamplerConfig { steps: n, n_ref: 0, s_ref: 0.0, ..ctx.sampler.clone() };
    let out = pndm_integrate(ctx.model, &bundle, &noisy, &grid[start..], start, &cfg)?;
    codec.decode(&out)
}

/// Full pipeline: SDEdit (with the recipe's probability) then synthetic.
pub fn degrade_pipeline<R: Rng>(
    hr: &VideoTensor,
    prompt: &str,
    ctx: Option<&SdeditContext<'_>>,
    codec: &Codec,
    recipe: &DegradeRecipe,
    rng: &mut R,
) -> Result<VideoTensor> {
    let use_sdedit = rng.random_bool(recipe.sdedit_probability);
    let base = sdedit_degrade(hr, prompt, if use_sdedit { ctx } else { None }, codec, recipe, rng)?;
    Ok(synthetic_degrade(&base, recipe, rng))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::codec::{CodecConfig, LatentVideo};
    use crate::harness::psnr;

    fn clip(seed: u64) -> VideoTensor {
        Scene::random(&mut ChaCha8Rng::seed_from_u64(seed), 3, 16, 16, 0.08).render()
    }

    #[test]
    fn task_names_round_trip() {
        for t in Task::ALL {
            assert_eq!(t.as_str().parse::<Task>().unwrap(), t);
        }
        assert_eq!("multi-id".parse::<Task>().unwrap(), Task::MultiId);
        assert!("video".parse::<Task>().is_err());
    }

    #[test]
    fn recipe_validation() {
        for r in [DegradeRecipe::default(), DegradeRecipe::light(), DegradeRecipe::heavy(), DegradeRecipe::identity()] {
            r.validate().unwrap();
        }
        assert!(DegradeRecipe { k_min: 10, k_max: 5, ..DegradeRecipe::default() }.validate().is_err());
        assert!(DegradeRecipe { k_max: 31, ..DegradeRecipe::default() }.validate().is_err());
        assert!(DegradeRecipe { blur_sigma: (1.0, 0.5), ..DegradeRecipe::default() }.validate().is_err());
    }

    #[test]
    fn k_draws_hit_both_bounds() {
        let r = DegradeRecipe::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ks: Vec<usize> = (0..1000).map(|_| r.draw_k(&mut rng)).collect();
        assert_eq!(*ks.iter().min().unwrap(), r.k_min);
        assert_eq!(*ks.iter().max().unwrap(), r.k_max);
    }

    #[test]
    fn identity_synthetic_recipe_is_identity() {
        let x = clip(1);
        let y = synthetic_degrade(&x, &DegradeRecipe::identity(), &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(x, y);
    }

    #[test]
    fn noise_level_statistics() {
        let x = VideoTensor::full(4, 3, 32, 32, 0.5);
        let r = DegradeRecipe { noise_sigma: (0.1, 0.1), ..DegradeRecipe::identity() };
        let y = synthetic_degrade(&x, &r, &mut ChaCha8Rng::seed_from_u64(3));
        let n = y.data().len() as f64;
        let mean = y.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let sd = (y.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(n >= 1e4);
        assert!((0.08..=0.12).contains(&sd), "{sd}");
    }

    #[test]
    fn synthetic_is_seeded() {
        let x = clip(4);
        let r = DegradeRecipe::heavy();
        let a = synthetic_degrade(&x, &r, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, synthetic_degrade(&x, &r, &mut ChaCha8Rng::seed_from_u64(9)));
        assert_ne!(a, x);
    }

    #[test]
    fn blur_preserves_constants() {
        let x = VideoTensor::full(1, 3, 8, 8, 0.3);
        assert!(gaussian_blur(&x, 1.3).max_abs_diff(&x) < 1e-6);
    }

    /// Pulls every latent toward zero; enough to make SDEdit visibly lossy.
    struct Shrink;

    impl VelocityModel for Shrink {
        fn velocity(&self, z: &LatentVideo, _: &ConditionBundle, _: f64) -> Result<LatentVideo> {
            Ok(z.map(|v| 0.5 * v))
        }
    }

    #[test]
    fn zero_step_sdedit_is_downsampled_input() {
        let codec = Codec::new(CodecConfig::default()).unwrap();
        let text = TextEncoder::new(1, 8);
        let ctx = SdeditContext { model: &Shrink, text: &text, sampler: SamplerConfig::default() };
        let hr = clip(5);
        let out = sdedit_degrade(&hr, "x", Some(&ctx), &codec, &DegradeRecipe::identity(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let small = bilinear_resize(&hr, 8, 8).unwrap();
        assert!(out.max_abs_diff(&small) < 1e-5);
    }

    #[test]
    fn more_sdedit_steps_lose_more_structure() {
        let codec = Codec::new(CodecConfig::default()).unwrap();
        let text = TextEncoder::new(1, 8);
        let ctx = SdeditContext { model: &Shrink, text: &text, sampler: SamplerConfig::default() };
        let light = DegradeRecipe { k_min: 15, k_max: 15, ..DegradeRecipe::identity() };
        let heavy = DegradeRecipe { k_min: 30, k_max: 30, ..DegradeRecipe::identity() };
        let (mut pl, mut ph) = (0.0, 0.0);
        for s in 0..8 {
            let hr = clip(100 + s);
            let small = bilinear_resize(&hr, 8, 8).unwrap();
            let a = sdedit_degrade(&hr, "p", Some(&ctx), &codec, &light, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            let b = sdedit_degrade(&hr, "p", Some(&ctx), &codec, &heavy, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            pl += psnr(&a, &small, None).unwrap();
            ph += psnr(&b, &small, None).unwrap();
        }
        assert!(pl > ph, "{pl} vs {ph}");
    }
}
