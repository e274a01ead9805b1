//! Overfits the desk model on 32 synthetic samples and reports the metrics.
//!
//! `cargo run --release -p mfvlr-core --example overfit -- [steps] [lr] [period]`

use std::time::Instant;

use mfvlr::datagen::{generate, DatasetSpec};
use mfvlr::model::Model;
use mfvlr::trainer::{self, Adam, Schedule, TrainConfig, TrainState};
use mfvlr::ModelConfig;

fn main() -> mfvlr::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(200);
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let period: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(35);

    let cfg = ModelConfig::desk();
    let samples = generate(&DatasetSpec::new(0, 32, cfg.image_size))?;
    let mut model = Model::new(&cfg, 0)?;
    let mut opt = Adam::new(&model.params);
    let mut state = TrainState::default();
    let tc = TrainConfig {
        epochs: usize::MAX,
        max_steps: Some(steps),
        schedule: Schedule { base_lr: lr, factor: 10.0, period },
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let mut log = Vec::new();
    let summary = trainer::train(&samples, &mut model, &mut opt, &mut state, &tc, &mut log, &mut |_, _, s| {
        eprintln!("epoch {} step {} {:.1}s", s.epoch, s.step, start.elapsed().as_secs_f64());
        Ok(())
    })?;
    let first = summary.losses.first().map_or(f64::NAN, |l| l.total);
    let last = summary.losses.last().map_or(f64::NAN, |l| l.total);
    let tail: Vec<f64> = summary.losses.iter().rev().take(4).map(|l| l.total).collect();
    let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
    for (i, l) in summary.losses.iter().enumerate().step_by(10) {
        println!("{i}: {:?}", l.terms());
    }
    let eval = trainer::evaluate(&samples, &model)?;
    println!(
        "steps {} in {:.1}s, total {first:.4} -> {last:.4} (drop {:.1}%, last-epoch mean {tail_mean:.4}), {:?}",
        state.step,
        start.elapsed().as_secs_f64(),
        100.0 * (1.0 - last / first),
        eval.report
    );
    Ok(())
}
