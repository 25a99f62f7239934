//! Builds and saves a small training corpus for one task.
//!
//! `cargo run --release --example degrade_corpus -- [t2v|multi_id|edit] [out_dir] [preset]`

use std::path::PathBuf;

use mmvsr::codec::{Codec, CodecConfig};
use mmvsr::degrade::{build_corpus, save_corpus, CorpusSpec, DegradeRecipe, Task};

fn main() -> mmvsr::Result<()> {
    let mut args = std::env::args().skip(1);
    let task: Task = args.next().unwrap_or_else(|| "edit".into()).parse()?;
    let out: PathBuf = args.next().map_or_else(|| std::env::temp_dir().join("mmvsr_corpus"), PathBuf::from);
    let recipe = DegradeRecipe::preset(&args.next().unwrap_or_else(|| "default".into()))?;

    let codec = Codec::new(CodecConfig::default())?;
    let spec = CorpusSpec { task, count: 4, seed: 1, recipe, ..CorpusSpec::default() };
    let samples = build_corpus(&spec, None, &codec)?;
    let manifest = save_corpus(&out, &spec, false, &samples)?;
    for s in &samples {
        println!(
            "{:04} {:?} -> lr {:?}  ids {}  ref {}  \"{}\"",
            s.index,
            s.hr.dims(),
            s.lr.dims(),
            s.id_images.len(),
            s.ref_video.is_some(),
            s.prompt
        );
    }
    println!("wrote {} samples to {}", manifest.samples.len(), out.display());
    Ok(())
}
