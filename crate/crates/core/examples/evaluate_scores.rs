//! Scores a three-segment, two-language submission and prints `Cavg`,
//! pooled EER and the pairwise miss/false-alarm rates under both threshold
//! policies.
//!
//! `cargo run --example evaluate_scores`

use std::io::Cursor;

use lidkit::metrics::{compute_cavg, EvalConfig, NonTarget, ThresholdPolicy};
use lidkit::submission::{parse_key, parse_scores};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let key = parse_key(Cursor::new("A B\ns1 A\ns2 B\ns3 A\n"))?;
    let scores = parse_scores(Cursor::new("s1 1 2\ns2 -1 1\ns3 -2 -1\n"), key.languages())?;

    for policy in [ThresholdPolicy::MinSweep, ThresholdPolicy::Fixed(0.0)] {
        let cfg = EvalConfig::new(key.num_languages()).with_threshold(policy);
        let report = compute_cavg(&scores, &key, &cfg)?;
        println!("{policy}: Cavg {:.4} at threshold {}", report.cavg, report.threshold_used);
        for p in &report.pairwise {
            let nt = match p.nontarget {
                NonTarget::Language(j) => key.languages()[j].clone(),
                NonTarget::OutOfSet => "OOS".into(),
            };
            println!(
                "  {} vs {nt}: p_miss {:.3} p_fa {:.3}",
                key.languages()[p.target], p.p_miss, p.p_fa
            );
        }
        println!("  EER% {:.2}", report.eer * 100.0);
    }
    Ok(())
}
