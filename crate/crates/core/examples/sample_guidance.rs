//! Shows the shifted timestep grid, the reference guidance schedule and a
//! guided sample from a constant velocity field.
//!
//! `cargo run --release --example sample_guidance -- [steps] [shift] [n_ref]`

use mmvsr::codec::LatentVideo;
use mmvsr::conditioning::{ConditionBundle, TextEncoder};
use mmvsr::dit::VelocityModel;
use mmvsr::sampler::{pndm_sample, rgt_scale, shift_timesteps, SamplerConfig};
use mmvsr::Result;

/// Constant velocity of 0.5 with the prompt and 0.4 without it.
struct TextField;

impl VelocityModel for TextField {
    fn velocity(&self, z: &LatentVideo, b: &ConditionBundle, _: f64) -> Result<LatentVideo> {
        let v = if b.text == b.null_text { 0.4 } else { 0.5 };
        Ok(LatentVideo::full(z.frames(), z.channels(), z.height(), z.width(), v))
    }
}

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(Ok(10), |s| s.parse()).expect("steps");
    let shift: f64 = args.next().map_or(Ok(3.0), |s| s.parse()).expect("shift");
    let n_ref: usize = args.next().map_or(Ok(4), |s| s.parse()).expect("n_ref");

    let grid = shift_timesteps(steps, shift)?;
    println!("step  t       s_ref");
    for (n, t) in grid.iter().enumerate().take(steps) {
        println!("{n:4}  {t:.4}  {:.1}", rgt_scale(n, n_ref, 1.0));
    }

    let text = TextEncoder::new(0, 8);
    let bundle = ConditionBundle::text_only(text.encode("a yellow star", false), text.null());
    for s_txt in [0.0, 1.0, 3.0] {
        let cfg = SamplerConfig { steps, shift, s_txt, n_ref, seed: 1, ..SamplerConfig::default() };
        let z0 = pndm_sample(&TextField, &bundle, [1, 48, 1, 1], &SamplerConfig { s_txt: 0.0, ..cfg })?;
        let z = pndm_sample(&TextField, &bundle, [1, 48, 1, 1], &cfg)?;
        // same seed, so the difference is the extra guided displacement
        println!("s_txt {s_txt}: displacement {:.4}", 0.5 + z.data()[0] - z0.data()[0]);
    }
    Ok(())
}
