//! Runs the full cascade with freshly initialised models: a text-only base
//! model samples the LR clip and the upscaler conditions on an ID image.
//! The output is noise-like; the example shows the data flow and shapes.
//!
//! `cargo run --release --example cascaded_generate -- [scale] [steps]`

use mmvsr::codec::{save_video, Codec, CodecConfig, VideoTensor};
use mmvsr::conditioning::TextEncoder;
use mmvsr::degrade::Task;
use mmvsr::dit::{Dit, ModelConfig};
use mmvsr::harness::{cascaded_generate, Cascade, GenerateRequest, LrShape};
use mmvsr::sampler::SamplerConfig;

fn main() -> mmvsr::Result<()> {
    let mut args = std::env::args().skip(1);
    let scale: usize = args.next().map_or(Ok(2), |s| s.parse()).expect("scale");
    let steps: usize = args.next().map_or(Ok(8), |s| s.parse()).expect("steps");

    let small = ModelConfig { model_dim: 24, heads: 2, blocks: 1, text_dim: 8, freq_dim: 8, ..ModelConfig::default() };
    let base = Dit::<f32>::new(ModelConfig { lr_conditioning: false, ..small.clone() }, 1)?;
    let upscaler = Dit::<f32>::new(small, 2)?;
    let codec = Codec::new(CodecConfig::default())?;
    let text = TextEncoder::new(0, 8);
    let cascade = Cascade { base: Some(&base), upscaler: &upscaler, codec: &codec, text: &text };

    let mut req = GenerateRequest::new(Task::MultiId, "a red circle next to a blue square");
    req.scale = scale;
    req.lr_shape = LrShape { frames: 3, height: 16, width: 16 };
    req.id_images = vec![VideoTensor::full(1, 3, 8, 8, 0.8)];
    req.sampler = SamplerConfig { steps, n_ref: steps / 2, ..SamplerConfig::default() };
    req.base_sampler = SamplerConfig { steps, n_ref: 0, s_ref: 0.0, ..SamplerConfig::default() };

    let out = cascaded_generate(&cascade, &req)?;
    println!("lr {:?} -> hr {:?}", out.lr.dims(), out.hr.dims());
    let path = std::env::temp_dir().join("mmvsr_cascade.umvt");
    save_video(&path, &out.hr, 8.0)?;
    println!("saved {}", path.display());
    Ok(())
}
