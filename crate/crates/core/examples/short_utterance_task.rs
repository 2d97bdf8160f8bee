//! Trains a tiny x-vector network on three synthetic languages and scores
//! 1-second test crops with the closed-set back-end.
//!
//! `cargo run --release --example short_utterance_task -- [seed]`

use std::time::Instant;

use lidkit::harness::{run_task, ExperimentPlan, Task};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1);
    let plan = ExperimentPlan::desk(Task::ShortUtterance, seed)?;
    let start = Instant::now();
    let out = run_task(&plan)?;
    let first = out.train_losses.first().copied().unwrap_or(f64::NAN);
    let last = out.train_losses.last().copied().unwrap_or(f64::NAN);
    println!("training loss {first:.4} -> {last:.4} over {} steps", out.train_losses.len());
    println!("segments {} (lost {})", out.scores.len(), out.diagnostics.len());
    println!("Cavg {:.4}", out.report.cavg);
    println!("EER% {:.2}", out.report.eer * 100.0);
    println!("elapsed {:.1} s", start.elapsed().as_secs_f64());
    Ok(())
}
