//! Central-difference gradient check of a two-block model in f64.
//!
//! `cargo run --release --example grad_check -- [coords_per_tensor]`

use mmvsr::codec::LatentVideo;
use mmvsr::conditioning::{ConditionBundle, TextEncoder};
use mmvsr::dit::{check_model_gradients, Dit, Init, ModelConfig, ModulationInput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mmvsr::Result<()> {
    let per_tensor: usize = std::env::args().nth(1).map_or(Ok(8), |s| s.parse()).expect("coords per tensor");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut latent = |frames| LatentVideo::from_fn(frames, 48, 2, 2, |_, _, _, _| rng.random_range(-1.0..1.0));

    let cfg = ModelConfig { model_dim: 12, heads: 2, blocks: 2, text_dim: 8, freq_dim: 8, ..ModelConfig::default() };
    let model = Dit::<f64>::with_gate_init(cfg, 1, Init::Xavier)?;
    let text = TextEncoder::new(0, 8);
    let mut bundle = ConditionBundle::text_only(text.encode("a green triangle", false), text.null());
    bundle.lr_latent = Some(latent(2));
    bundle.ref_video = Some(latent(2));
    let (noisy, target) = (latent(2), latent(2));
    let m = ModulationInput::new(0.5, 300, 8.0, 1.0)?;

    let report = check_model_gradients(&model, &noisy, &bundle, &m, &target, per_tensor, 2, 1e-5)?;
    println!("{} parameters, {} coordinates checked", model.params().numel(), report.checked);
    println!(
        "max relative error {:.2e} at {} (analytic {:.6e}, numeric {:.6e})",
        report.max_abs_rel_error, report.worst_index, report.analytic, report.numeric
    );
    Ok(())
}
