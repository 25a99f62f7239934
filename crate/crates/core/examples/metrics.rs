//! PSNR and SSIM of each degradation preset against the clean video, plus
//! the masked PSNR outside an edit region.

use mmvsr::codec::{Codec, CodecConfig, Mask};
use mmvsr::degrade::{degrade_pipeline, DegradeRecipe, Scene};
use mmvsr::harness::evaluate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mmvsr::Result<()> {
    let codec = Codec::new(CodecConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scene = Scene::random(&mut rng, 5, 32, 32, 0.05);
    let hr = scene.render();
    let prompt = scene.prompt();

    println!("preset   psnr    ssim    psnr outside shape 0");
    for name in ["light", "default", "heavy"] {
        let recipe = DegradeRecipe { downscale_factor: 1, ..DegradeRecipe::preset(name)? };
        let lr = degrade_pipeline(&hr, &prompt, None, &codec, &recipe, &mut rng)?;
        let m: Mask = scene.shape_mask(0);
        let rec = evaluate(&lr, &hr, Some(&m))?;
        println!("{name:8} {:6.2}  {:.4}  {:6.2}", rec.psnr_db, rec.ssim, rec.masked_psnr_db.unwrap_or(f64::NAN));
    }
    Ok(())
}
