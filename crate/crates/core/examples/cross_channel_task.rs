//! Trains once per seed, then scores the same test utterances through a
//! matched (identity) channel and through a low-pass + noise channel.
//!
//! `cargo run --release --example cross_channel_task -- [num_seeds]`

use lidkit::harness::{prepare, ChannelSpec, ExperimentPlan, Task};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seeds: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(5);
    let (mut matched, mut crossed) = (0.0, 0.0);
    for seed in 1..=seeds {
        let plan = ExperimentPlan::desk(Task::CrossChannel, seed)?;
        let system = prepare(&plan)?;
        let m = system.evaluate(&ChannelSpec::identity())?.report;
        let c = system.evaluate(&plan.channel)?.report;
        println!(
            "seed {seed}: matched Cavg {:.4} EER% {:.2} | channel Cavg {:.4} EER% {:.2}",
            m.cavg,
            m.eer * 100.0,
            c.cavg,
            c.eer * 100.0
        );
        matched += m.cavg;
        crossed += c.cavg;
    }
    println!("mean matched Cavg {:.4}", matched / seeds as f64);
    println!("mean channel Cavg {:.4}", crossed / seeds as f64);
    Ok(())
}
