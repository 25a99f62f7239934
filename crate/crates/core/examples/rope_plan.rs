//! Prints the rotary frame allocation and the token layout of each
//! injection mode for a multi-reference request.

use mmvsr::codec::LatentVideo;
use mmvsr::conditioning::{build_rope_plan, ConditionBundle, InjectionMode, TextEncoder};
use mmvsr::dit::{Dit, ForwardOptions, ModelConfig};

fn main() -> mmvsr::Result<()> {
    let frames = 4;
    let text = TextEncoder::new(0, 8);
    let mut bundle = ConditionBundle::text_only(text.encode("a red circle and a blue square", false), text.null());
    bundle.id_images = vec![LatentVideo::zeros(1, 48, 2, 2), LatentVideo::zeros(1, 48, 2, 2)];
    bundle.ref_video = Some(LatentVideo::zeros(frames, 48, 2, 2));
    bundle.lr_latent = Some(LatentVideo::zeros(frames, 48, 2, 2));

    let plan = build_rope_plan(frames, &bundle.reference_lengths())?;
    println!("noisy frames {:?}", plan.noisy_range());
    for (i, r) in plan.ref_ranges().iter().enumerate() {
        println!("reference {i} frames {r:?}");
    }

    let noisy = LatentVideo::zeros(frames, 48, 2, 2);
    for mode in [InjectionMode::Unified, InjectionMode::FullChannelConcat, InjectionMode::FullTokenConcat] {
        let cfg = ModelConfig { model_dim: 24, heads: 2, blocks: 1, text_dim: 8, freq_dim: 8, injection_mode: mode, ..ModelConfig::default() };
        let layout = Dit::<f32>::new(cfg, 0)?.sequence_layout(&noisy, &bundle, &ForwardOptions::default())?;
        println!("\n{mode:?}: {} tokens", layout.len());
        for s in layout.segments() {
            println!("  {:?} tokens {}..{} frames {:?}", s.kind, s.start, s.start + s.len, s.frame_indices);
        }
    }
    Ok(())
}
