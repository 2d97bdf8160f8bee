//! Computes 40-bin log mel filterbanks for a synthetic utterance padded with
//! silence and shows how many frames the energy VAD keeps.
//!
//! `cargo run --example filterbank_vad`

use lidkit::dsp::{apply_vad, energy_vad, Fbank, FbankConfig, VadConfig, Waveform};
use lidkit::harness::{builtin_languages, synthesize_utterance, SAMPLE_RATE};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = &builtin_languages()[0];
    let speech = synthesize_utterance(spec, SAMPLE_RATE as usize, 7);
    let pad = vec![0i16; SAMPLE_RATE as usize / 2];
    let pcm: Vec<i16> = pad.iter().chain(&speech).chain(&pad).copied().collect();
    let wave = Waveform::from_pcm16(&pcm, SAMPLE_RATE);

    let fbank = Fbank::new(FbankConfig::default())?;
    let feats = fbank.compute(&wave)?;
    println!("{:.2} s -> {} frames x {} bins", wave.duration(), feats.num_frames(), feats.dim());

    let energies = fbank.frame_log_energies(&wave)?;
    let mask = energy_vad(&energies, &VadConfig::default());
    let kept = apply_vad(&feats, &mask)?;
    println!("VAD keeps {} of {} frames", kept.num_frames(), feats.num_frames());

    let mid = feats.num_frames() / 2;
    let row = feats.frames.row(mid);
    let peak = row.iter().enumerate().fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
    println!("frame {mid}: loudest bin {} ({:.2} nats)", peak.0, peak.1);
    Ok(())
}
