//! Encodes a rendered scene into latents, decodes it back and upsamples the
//! latent grid.
//!
//! `cargo run --release --example codec_roundtrip -- [seed]`

use mmvsr::codec::{Codec, CodecConfig};
use mmvsr::degrade::Scene;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mmvsr::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(Ok(0), |s| s.parse()).expect("seed");
    let codec = Codec::new(CodecConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let video = Scene::random(&mut rng, 5, 32, 32, 0.05).render();
    let z = codec.encode(&video)?;
    let back = codec.decode(&z)?;
    println!("video {:?} -> latent {:?}", video.dims(), z.dims());
    println!("round-trip max abs error {:.2e}", back.max_abs_diff(&video));

    for scale in [2, 4] {
        let up = codec.decode(&codec.upsample_latent(&z, scale)?)?;
        println!("x{scale} upsample decodes to {:?}", up.dims());
    }
    Ok(())
}
