//! Trains on three synthetic languages, enrolls two unseen ones from ten
//! reference utterances each and scores test utterances by cosine
//! similarity to the language centroids.
//!
//! `cargo run --release --example zero_resource_task -- [seed]`

use lidkit::harness::{run_task, ExperimentPlan, Task};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1);
    let plan = ExperimentPlan::desk(Task::ZeroResource, seed)?;
    println!(
        "train {:?}, unseen {:?}, {} references each",
        plan.train_languages.iter().map(|l| &l.id).collect::<Vec<_>>(),
        plan.eval_ids(),
        plan.reference_per_language
    );
    let out = run_task(&plan)?;
    println!("segments {} (lost {})", out.scores.len(), out.diagnostics.len());
    println!("Cavg {:.4}", out.report.cavg);
    println!("EER% {:.2}", out.report.eer * 100.0);
    Ok(())
}
