//! Overfits the default model on a small t2v corpus and prints the loss
//! curve every 50 steps.
//!
//! `cargo run --release --example train_toy -- [steps] [lr] [batch] [texture] [cosine]`

use std::time::Instant;

use mmvsr::codec::{Codec, CodecConfig};
use mmvsr::degrade::{build_corpus, CorpusSpec, Task};
use mmvsr::trainer::{StageSpec, TrainConfig, Trainer};

fn main() -> mmvsr::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(Ok(400), |s| s.parse()).expect("steps");
    let lr: f64 = args.next().map_or(Ok(1e-3), |s| s.parse()).expect("lr");
    let batch_size: usize = args.next().map_or(Ok(1), |s| s.parse()).expect("batch");
    let texture: Option<f32> = args.next().and_then(|s| s.parse().ok());
    let cosine_decay = args.next().is_some_and(|s| s == "cosine");

    let codec = Codec::new(CodecConfig::default())?;
    let spec = CorpusSpec { task: Task::T2v, count: 16, seed: 7, texture, ..CorpusSpec::default() };
    let corpus = build_corpus(&spec, None, &codec)?;
    let stage = StageSpec { stage_id: 1, frames: 7, tasks: vec![Task::T2v], probabilities: vec![1.0], step_budget: steps };
    let cfg = TrainConfig { lr, cosine_decay, batch_size, stages: Some(vec![stage]), ..TrainConfig::default() };
    let mut trainer = Trainer::new(cfg, [corpus, Vec::new(), Vec::new()])?;

    let start = Instant::now();
    let mut window = Vec::new();
    while let Some(rec) = trainer.step()? {
        window.push(rec.loss);
        if rec.step % 50 == 0 {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            println!("step {:5}  mean loss {mean:.4}  {:.1}s", rec.step, start.elapsed().as_secs_f64());
            window.clear();
        }
    }
    Ok(())
}
