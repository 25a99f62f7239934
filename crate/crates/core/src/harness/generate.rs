use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, VideoTensor};
use crate::conditioning::{encode_id_image, ConditionBundle, TextEncoder};
use crate::degrade::Task;
use crate::dit::VelocityModel;
use crate::error::{contract_err, shape_err, Error, Result};
use crate::flowmatch::{gaussian_latent, noise_augment};
use crate::sampler::{pndm_sample, SamplerConfig};

/// Noise-augmentation step applied to the upsampled LR latent at inference.
pub const INFERENCE_NOISE_AUG_STEP: u32 = 300;
const FPS: f32 = 8.0;

/// LR clip geometry the base model samples when no LR video is supplied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LrShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateRequest {
    pub task: Task,
    pub prompt: String,
    /// Simulation mode: skip the base model and upscale this clip.
    pub lr_video: Option<VideoTensor>,
    /// Used only when `lr_video` is absent.
    pub lr_shape: LrShape,
    pub id_images: Vec<VideoTensor>,
    pub ref_video: Option<VideoTensor>,
    pub scale: usize,
    pub sampler: SamplerConfig,
    /// Text-only sampling of the base model.
    pub base_sampler: SamplerConfig,
    pub noise_aug_step: u32,
}

impl GenerateRequest {
    pub fn new(task: Task, prompt: impl Into<String>) -> Self {
        Self {
            task,
            prompt: prompt.into(),
            lr_video: None,
            lr_shape: LrShape { frames: 7, height: 8, width: 8 },
            id_images: Vec::new(),
            ref_video: None,
            scale: 2,
            sampler: SamplerConfig::default(),
            base_sampler: SamplerConfig { s_ref: 0.0, n_ref: 0, ..SamplerConfig::default() },
            noise_aug_step: INFERENCE_NOISE_AUG_STEP,
        }
    }
}

/// The models of the cascade.
pub struct Cascade<'a> {
    /// Text-to-video model at LR resolution.
    pub base: Option<&'a dyn VelocityModel>,
    pub upscaler: &'a dyn VelocityModel,
    pub codec: &'a Codec,
    pub text: &'a TextEncoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOutput {
    pub lr: VideoTensor,
    pub hr: VideoTensor,
}

/// Base model (or supplied LR) → latent upsampler → conditioned upscaler →
/// decode.
pub fn cascaded_generate(cascade: &Cascade<'_>, req: &GenerateRequest) -> Result<GenerateOutput> {
    if req.scale == 0 {
        return Err(Error::Config("scale must be at least 1".into()));
    }
    match req.task {
        Task::MultiId if req.id_images.is_empty() => return Err(contract_err!("multi_id request without id images")),
        Task::Edit if req.ref_video.is_none() => return Err(contract_err!("edit request without a reference video")),
        _ => {}
    }
    let codec = cascade.codec;
    let text = cascade.text.encode(&req.prompt, false);
    let lr = match (&req.lr_video, cascade.base) {
        (Some(v), _) => v.clone(),
        (None, Some(base)) => {
            let LrShape { frames, height, width } = req.lr_shape;
            let p = codec.patch();
            if height % p != 0 || width % p != 0 {
                return Err(shape_err!("lr {height}x{width} not divisible by patch {p}"));
            }
            let bundle = ConditionBundle {
                fps: FPS,
                aspect: width as f32 / height as f32,
                ..ConditionBundle::text_only(text.clone(), cascade.text.null())
            };
            let dims = [frames, codec.latent_channels(), height / p, width / p];
            codec.decode(&pndm_sample(base, &bundle, dims, &req.base_sampler)?)?
        }
        (None, None) => return Err(Error::Missing("no base model and no LR video".into())),
    };

    let (h, w) = (lr.height() * req.scale, lr.width() * req.scale);
    let mut up = codec.upsample_latent(&codec.encode(&lr)?, req.scale)?;
    if req.noise_aug_step > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(req.sampler.seed);
        rng.set_stream(2);
        let eps = gaussian_latent(&mut rng, up.dims());
        up = noise_augment(&up, req.noise_aug_step, &eps)?;
    }
    let mut bundle = ConditionBundle {
        id_images: req.id_images.iter().map(|img| encode_id_image(codec, img, h, w)).collect::<Result<_>>()?,
        ref_video: req.ref_video.as_ref().map(|r| codec.encode(r)).transpose()?,
        noise_aug_step: req.noise_aug_step,
        fps: FPS,
        aspect: w as f32 / h as f32,
        ..ConditionBundle::text_only(text, cascade.text.null())
    };
    let dims = up.dims();
    bundle.lr_latent = Some(up);
    bundle.validate(dims[0], dims[2], dims[3])?;
    let z = pndm_sample(cascade.upscaler, &bundle, dims, &req.sampler)?;
    Ok(GenerateOutput { lr, hr: codec.decode(&z)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{CodecConfig, LatentVideo};
    use crate::dit::{Dit, ModelConfig};

    struct Zero;

    impl VelocityModel for Zero {
        fn velocity(&self, z: &LatentVideo, _: &ConditionBundle, _: f64) -> Result<LatentVideo> {
            Ok(LatentVideo::zeros(z.frames(), z.channels(), z.height(), z.width()))
        }
    }

    fn small() -> Dit<f32> {
        let cfg = ModelConfig { model_dim: 24, heads: 2, blocks: 1, text_dim: 8, freq_dim: 8, ..ModelConfig::default() };
        Dit::new(cfg, 1).unwrap()
    }

    fn fast(task: Task) -> GenerateRequest {
        let mut r = GenerateRequest::new(task, "red circle");
        r.sampler = SamplerConfig { steps: 2, n_ref: 1, ..SamplerConfig::default() };
        r.base_sampler = SamplerConfig { steps: 2, n_ref: 0, s_ref: 0.0, ..SamplerConfig::default() };
        r.lr_shape = LrShape { frames: 2, height: 16, width: 16 };
        r
    }

    #[test]
    fn output_shapes() {
        let codec = Codec::new(CodecConfig::default()).unwrap();
        let text = TextEncoder::new(0, 8);
        let model = small();
        let cascade = Cascade { base: Some(&Zero), upscaler: &model, codec: &codec, text: &text };
        for scale in [2, 4] {
            for task in Task::ALL {
                let mut req = fast(task);
                req.scale = scale;
                let hr = 16 * scale;
                if task == Task::MultiId {
                    req.id_images = vec![VideoTensor::full(1, 3, 8, 8, 0.5)];
                }
                if task == Task::Edit {
                    req.ref_video = Some(VideoTensor::full(2, 3, hr, hr, 0.5));
                }
                let out = cascaded_generate(&cascade, &req).unwrap();
                assert_eq!(out.hr.dims(), [2, 3, hr, hr]);
                assert_eq!(out.lr.dims(), [2, 3, 16, 16]);
            }
        }
    }

    #[test]
    fn deterministic_and_simulation_mode() {
        let codec = Codec::new(CodecConfig::default()).unwrap();
        let text = TextEncoder::new(0, 8);
        let model = small();
        let cascade = Cascade { base: None, upscaler: &model, codec: &codec, text: &text };
        let mut req = fast(Task::T2v);
        assert!(matches!(cascaded_generate(&cascade, &req), Err(Error::Missing(_))));
        req.lr_video = Some(VideoTensor::from_fn(2, 3, 8, 8, |f, c, y, x| ((f + c + y * x) % 5) as f32 / 5.0));
        let a = cascaded_generate(&cascade, &req).unwrap();
        let b = cascaded_generate(&cascade, &req).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hr.dims(), [2, 3, 16, 16]);
    }

    #[test]
    fn incompatible_references_rejected() {
        let codec = Codec::new(CodecConfig::default()).unwrap();
        let text = TextEncoder::new(0, 8);
        let model = small();
        let cascade = Cascade { base: Some(&Zero), upscaler: &model, codec: &codec, text: &text };
        assert!(matches!(cascaded_generate(&cascade, &fast(Task::Edit)), Err(Error::Contract(_))));
        let mut req = fast(Task::Edit);
        req.ref_video = Some(VideoTensor::full(2, 3, 16, 16, 0.5));
        assert!(matches!(cascaded_generate(&cascade, &req), Err(Error::Shape(_))));
    }
}
