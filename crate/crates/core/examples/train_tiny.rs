//! Trains a narrow TDNN on two synthetic languages for a few epochs, saves
//! and reloads the weights and checks the reloaded network reproduces the
//! training-set accuracy.
//!
//! `cargo run --release --example train_tiny`

use lidkit::dsp::FrontEnd;
use lidkit::harness::{builtin_languages, synthesize_utterance, SAMPLE_RATE};
use lidkit::net::{forward, init_network, load_params, save_params, train, NetConfig, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let front = FrontEnd::new(Default::default(), Default::default())?;
    let langs = &builtin_languages()[..2];
    let mut data = Vec::new();
    for (label, spec) in langs.iter().enumerate() {
        for i in 0..24 {
            let pcm = synthesize_utterance(spec, SAMPLE_RATE as usize, (label * 100 + i) as u64);
            let wave = lidkit::dsp::Waveform::from_pcm16(&pcm, SAMPLE_RATE);
            data.push((front.process(&wave)?, label));
        }
    }

    let config = NetConfig::with_dims(40, [16, 16, 16, 16, 32], 16, 16, 2);
    let mut params = init_network(config, 3)?;
    let tc = TrainConfig { epochs: 4, batch_size: 8, learning_rate: 0.02, ..Default::default() };
    let losses = train(&mut params, &data, &tc, |step, loss| {
        if step % 6 == 0 {
            println!("step {step:3} loss {loss:.4}");
        }
    })?;
    println!("final loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));

    let reloaded = load_params(&save_params(&params), Some(2))?;
    let accuracy = |p: &lidkit::net::NetworkParams| -> Result<f64, lidkit::net::NetError> {
        let mut hits = 0;
        for (feats, label) in &data {
            let post = forward(p, feats)?.log_posteriors;
            let best = if post[0] >= post[1] { 0 } else { 1 };
            hits += usize::from(best == *label);
        }
        Ok(hits as f64 / data.len() as f64)
    };
    let (a, b) = (accuracy(&params)?, accuracy(&reloaded)?);
    println!("train accuracy {a:.3}, after reload {b:.3}");
    assert_eq!(a, b);
    Ok(())
}
