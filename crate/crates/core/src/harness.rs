//! Synthetic corpora and end-to-end experiment drivers.
//!
//! A synthetic "language" is a spectral-profile class: every utterance is a
//! sequence of syllable-like bursts, each mixing a harmonic tone with noise
//! shaped by the language's resonance bands. Utterances derive their own
//! seeds from the corpus seed and their id, so generation order and thread
//! count never change the audio.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::backend::{score_closed_set_wave, score_zero_resource_wave, LanguageModelSet, Scored};
use crate::config::{ConfigError, KvConfig};
use crate::dsp::{DspError, FbankConfig, FeatureMatrix, FrontEnd, VadConfig, Waveform};
use crate::metrics::{compute_cavg, EvalConfig, EvalReport, MetricsError};
use crate::net::{extract_xvector, init_network, train, NetConfig, NetError, NetworkParams, TrainConfig};
use crate::submission::{scores_to_string, write_key, FormatError, ScoreRecord, TrialKey};
use crate::wav::{read_pcm16, write_pcm16, WavError};

pub const SAMPLE_RATE: u32 = 16000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid language spec: {0}")]
    InvalidSpec(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("{path}:{line}: {reason}")]
    Manifest { path: String, line: usize, reason: String },
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Backend(#[from] crate::backend::BackendError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

type Result<T> = std::result::Result<T, HarnessError>;

/// Stable 64-bit seed for `tag` under `seed`.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
}

/// Causal FIR filter followed by optional white noise at a fixed SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpec {
    pub taps: Vec<f64>,
    /// `None` adds no noise.
    pub snr_db: Option<f64>,
}

impl ChannelSpec {
    pub fn identity() -> Self {
        Self {
            taps: vec![1.0],
            snr_db: None,
        }
    }

    /// Hamming-windowed sinc low-pass with unit DC gain.
    pub fn lowpass(cutoff_hz: f64, num_taps: usize, snr_db: Option<f64>, sample_rate: u32) -> Result<Self> {
        let nyq = sample_rate as f64 / 2.0;
        if !(cutoff_hz > 0.0 && cutoff_hz < nyq) || num_taps == 0 {
            return Err(HarnessError::InvalidSpec(format!(
                "low-pass cutoff {cutoff_hz} Hz with {num_taps} taps"
            )));
        }
        let fc = cutoff_hz / sample_rate as f64;
        let m = (num_taps - 1) as f64 / 2.0;
        let mut taps: Vec<f64> = (0..num_taps)
            .map(|k| {
                let x = k as f64 - m;
                let sinc = if x == 0.0 { 2.0 * fc } else { (2.0 * PI * fc * x).sin() / (PI * x) };
                let w = if num_taps == 1 {
                    1.0
                } else {
                    0.54 - 0.46 * (2.0 * PI * k as f64 / (num_taps - 1) as f64).cos()
                };
                sinc * w
            })
            .collect();
        let sum: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= sum);
        Ok(Self { taps, snr_db })
    }

    pub fn is_identity(&self) -> bool {
        self.taps == [1.0] && self.snr_db.is_none()
    }

    pub fn apply_f64(&self, x: &[f64], seed: u64) -> Vec<f64> {
        let mut y: Vec<f64> = (0..x.len())
            .map(|n| {
                self.taps
                    .iter()
                    .enumerate()
                    .take(n + 1)
                    .map(|(k, h)| h * x[n - k])
                    .sum()
            })
            .collect();
        if let Some(snr) = self.snr_db {
            let power = y.iter().map(|v| v * v).sum::<f64>() / y.len().max(1) as f64;
            let std = (power / 10f64.powf(snr / 10.0)).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in &mut y {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v += std * e;
            }
        }
        y
    }

    pub fn apply(&self, samples: &[i16], seed: u64) -> Vec<i16> {
        if self.is_identity() {
            return samples.to_vec();
        }
        let x: Vec<f64> = samples.iter().map(|&s| f64::from(s)).collect();
        quantize(&self.apply_f64(&x, seed))
    }
}

fn quantize(x: &[f64]) -> Vec<i16> {
    x.iter().map(|v| v.round().clamp(-32768.0, 32767.0) as i16).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLanguageSpec {
    pub id: String,
    pub bands: Vec<Band>,
    pub pitch_range_hz: (f64, f64),
    pub length_range_s: (f64, f64),
    /// Background noise RMS relative to the speech RMS.
    pub noise_level: f64,
    /// Applied to every utterance of this language at generation time.
    pub channel: Option<ChannelSpec>,
}

impl SyntheticLanguageSpec {
    pub fn new(id: &str, bands: &[(f64, f64)], pitch_range_hz: (f64, f64)) -> Self {
        Self {
            id: id.to_string(),
            bands: bands
                .iter()
                .map(|&(center_hz, bandwidth_hz)| Band { center_hz, bandwidth_hz })
                .collect(),
            pitch_range_hz,
            length_range_s: (1.5, 3.0),
            noise_level: 0.01,
            channel: None,
        }
    }

    pub fn with_length(mut self, lo: f64, hi: f64) -> Self {
        self.length_range_s = (lo, hi);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::InvalidSpec(format!("{}: {m}", self.id)));
        if self.id.is_empty() || self.id.contains(char::is_whitespace) || self.id == crate::submission::OUT_OF_SET {
            return bad("language id must be a non-empty token other than OOS".into());
        }
        if self.bands.is_empty() {
            return bad("needs at least one band".into());
        }
        let nyq = SAMPLE_RATE as f64 / 2.0;
        for b in &self.bands {
            if !(b.center_hz > 0.0 && b.center_hz < nyq && b.bandwidth_hz > 0.0) {
                return bad(format!("band {} Hz / {} Hz", b.center_hz, b.bandwidth_hz));
            }
        }
        let (p0, p1) = self.pitch_range_hz;
        if !(p0 > 0.0 && p0 <= p1 && p1 < nyq) {
            return bad(format!("pitch range {p0}..{p1}"));
        }
        let (l0, l1) = self.length_range_s;
        if !(l0 > 0.0 && l0 <= l1) {
            return bad(format!("length range {l0}..{l1}"));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad(format!("noise level {}", self.noise_level));
        }
        Ok(())
    }

    fn envelope(&self, centers: &[f64], f: f64) -> f64 {
        centers
            .iter()
            .zip(&self.bands)
            .map(|(c, b)| (-0.5 * ((f - c) / b.bandwidth_hz).powi(2)).exp())
            .sum()
    }
}

/// Six well-separated profiles, ids `lang-a` .. `lang-f`.
pub fn builtin_languages() -> Vec<SyntheticLanguageSpec> {
    vec![
        SyntheticLanguageSpec::new("lang-a", &[(450.0, 120.0), (1400.0, 200.0), (2600.0, 300.0)], (100.0, 180.0)),
        SyntheticLanguageSpec::new("lang-b", &[(700.0, 120.0), (1100.0, 200.0), (3300.0, 300.0)], (160.0, 260.0)),
        SyntheticLanguageSpec::new("lang-c", &[(350.0, 100.0), (2000.0, 250.0), (3000.0, 300.0)], (90.0, 150.0)),
        SyntheticLanguageSpec::new("lang-d", &[(600.0, 120.0), (1700.0, 200.0), (4200.0, 350.0)], (120.0, 220.0)),
        SyntheticLanguageSpec::new("lang-e", &[(300.0, 100.0), (900.0, 150.0), (2300.0, 300.0)], (180.0, 280.0)),
        SyntheticLanguageSpec::new("lang-f", &[(800.0, 150.0), (2400.0, 250.0), (5000.0, 400.0)], (100.0, 200.0)),
    ]
}

/// Second-order band-pass (constant 0 dB peak gain).
struct Biquad {
    b0: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl Biquad {
    fn bandpass(center_hz: f64, bandwidth_hz: f64, sample_rate: f64) -> Self {
        let w0 = 2.0 * PI * center_hz / sample_rate;
        let q = center_hz / bandwidth_hz;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b0: alpha / a0,
            b2: -alpha / a0,
            a1: -2.0 * w0.cos() / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    fn run(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&v| {
                let y = self.b0 * v + self.b2 * x2 - self.a1 * y1 - self.a2 * y2;
                x2 = x1;
                x1 = v;
                y2 = y1;
                y1 = y;
                y
            })
            .collect()
    }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// One utterance of `num_samples` samples, peak-normalised to 70% full scale.
pub fn synthesize_utterance(spec: &SyntheticLanguageSpec, num_samples: usize, seed: u64) -> Vec<i16> {
    let sr = SAMPLE_RATE as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(1.0, 0.03).expect("valid normal");
    let nyq = 0.45 * sr;
    let centers: Vec<f64> = spec
        .bands
        .iter()
        .map(|b| (b.center_hz * jitter.sample(&mut rng)).clamp(50.0, nyq))
        .collect();

    let white: Vec<f64> = (0..num_samples).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut shaped = vec![0.0; num_samples];
    for (c, b) in centers.iter().zip(&spec.bands) {
        for (s, v) in shaped.iter_mut().zip(Biquad::bandpass(*c, b.bandwidth_hz, sr).run(&white)) {
            *s += v;
        }
    }

    let mut voiced = vec![0.0; num_samples];
    let mut gate = vec![0.0; num_samples];
    let ramp = (0.01 * sr) as usize;
    let mut t = (rng.random_range(0.0..0.05) * sr) as usize;
    while t < num_samples {
        let len = ((rng.random_range(0.08..0.25) * sr) as usize).min(num_samples - t);
        let f0 = rng.random_range(spec.pitch_range_hz.0..=spec.pitch_range_hz.1);
        let glide = rng.random_range(-0.15..0.15);
        let syllable: Vec<f64> = centers.iter().map(|c| c * rng.random_range(0.98..1.02)).collect();
        let mut h = 1;
        while h as f64 * f0 < nyq {
            let f = h as f64 * f0;
            let w = spec.envelope(&syllable, f);
            if w > 1e-3 {
                let phase0 = rng.random_range(0.0..2.0 * PI);
                let mut phase = phase0;
                for i in 0..len {
                    let fi = f * (1.0 + glide * i as f64 / len as f64);
                    phase += 2.0 * PI * fi / sr;
                    voiced[t + i] += w * phase.sin();
                }
            }
            h += 1;
        }
        for i in 0..len {
            let edge = i.min(len - 1 - i);
            gate[t + i] = if edge < ramp {
                0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
            } else {
                1.0
            };
        }
        t += len + (rng.random_range(0.03..0.10) * sr) as usize;
    }

    let (rv, rs) = (rms(&voiced).max(1e-12), rms(&shaped).max(1e-12));
    let mut speech: Vec<f64> = (0..num_samples)
        .map(|i| gate[i] * (0.6 * voiced[i] / rv + 0.4 * shaped[i] / rs))
        .collect();
    let level = rms(&speech).max(1e-12) * spec.noise_level;
    for s in &mut speech {
        let e: f64 = StandardNormal.sample(&mut rng);
        *s += level * e;
    }
    if let Some(ch) = &spec.channel {
        speech = ch.apply_f64(&speech, derive_seed(seed, "channel"));
    }
    let peak = speech.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    quantize(&speech.iter().map(|v| v / peak * 0.7 * 32767.0).collect::<Vec<_>>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Reference,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Reference => "reference",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "reference" => Ok(Split::Reference),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub language: String,
    pub split: Split,
    pub samples: Vec<i16>,
}

impl Utterance {
    pub fn waveform(&self) -> Waveform {
        Waveform::from_pcm16(&self.samples, SAMPLE_RATE)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
}

/// `count` utterances of every language in `specs` for each `(split, count)`.
/// Ids are `<language>_<split>_<index>`.
pub fn generate_corpus(specs: &[SyntheticLanguageSpec], counts: &[(Split, usize)], seed: u64) -> Result<Corpus> {
    if specs.len() < 2 {
        return Err(HarnessError::InvalidSpec(format!("need at least 2 languages, got {}", specs.len())));
    }
    let mut ids = HashSet::new();
    for s in specs {
        s.validate()?;
        if !ids.insert(s.id.as_str()) {
            return Err(HarnessError::InvalidSpec(format!("duplicate language `{}`", s.id)));
        }
    }
    if counts.iter().any(|&(_, n)| n == 0) || counts.is_empty() {
        return Err(HarnessError::InvalidSpec("utterance counts must be at least 1".into()));
    }
    let jobs: Vec<(Split, &SyntheticLanguageSpec, usize)> = counts
        .iter()
        .flat_map(|&(split, n)| specs.iter().flat_map(move |s| (0..n).map(move |i| (split, s, i))))
        .collect();
    let utterances = jobs
        .par_iter()
        .map(|&(split, spec, i)| {
            let id = format!("{}_{}_{:04}", spec.id, split, i);
            let useed = derive_seed(seed, &id);
            let mut rng = ChaCha8Rng::seed_from_u64(useed);
            let dur = rng.random_range(spec.length_range_s.0..=spec.length_range_s.1);
            let samples = synthesize_utterance(spec, (dur * SAMPLE_RATE as f64).round() as usize, useed);
            Utterance {
                id,
                language: spec.id.clone(),
                split,
                samples,
            }
        })
        .collect();
    let corpus = Corpus { utterances };
    corpus.check_ids()?;
    Ok(corpus)
}

impl Corpus {
    fn check_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for u in &self.utterances {
            if !seen.insert(u.id.as_str()) {
                return Err(HarnessError::InvalidPlan(format!("utterance `{}` appears twice", u.id)));
            }
        }
        Ok(())
    }

    /// Concatenates two corpora; ids must stay unique.
    pub fn merge(mut self, other: Corpus) -> Result<Corpus> {
        self.utterances.extend(other.utterances);
        self.check_ids()?;
        Ok(self)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    /// Languages of `split` in order of first appearance.
    pub fn languages(&self, split: Split) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for u in self.split(split) {
            if !out.contains(&u.language) {
                out.push(u.language.clone());
            }
        }
        out
    }

    /// Trial key of `split` over `languages`; utterances of any other
    /// language become out-of-set.
    pub fn key(&self, split: Split, languages: &[String]) -> Result<TrialKey> {
        let entries = self.split(split).map(|u| {
            let lang = if languages.contains(&u.language) {
                u.language.as_str()
            } else {
                crate::submission::OUT_OF_SET
            };
            (u.id.as_str(), lang)
        });
        Ok(TrialKey::new(languages.to_vec(), entries)?)
    }

    /// Writes `wav/<id>.wav`, `manifest.txt` and one `key_<split>.txt` per
    /// split. `header` lines are written as `#` comments.
    pub fn write(&self, dir: &Path, header: &[String]) -> Result<()> {
        fs::create_dir_all(dir.join("wav"))?;
        let mut manifest = Vec::new();
        for h in header {
            writeln!(manifest, "# {h}")?;
        }
        for u in &self.utterances {
            let rel = format!("wav/{}.wav", u.id);
            write_pcm16(&dir.join(&rel), &u.samples, SAMPLE_RATE)?;
            writeln!(manifest, "{} {} {} {}", u.id, u.language, rel, u.split)?;
        }
        fs::write(dir.join("manifest.txt"), manifest)?;
        for split in [Split::Train, Split::Reference, Split::Test] {
            let langs = self.languages(split);
            if langs.is_empty() {
                continue;
            }
            let mut buf = Vec::new();
            for h in header {
                writeln!(buf, "# {h}")?;
            }
            write_key(&self.key(split, &langs)?, &mut buf)?;
            fs::write(dir.join(format!("key_{split}.txt")), buf)?;
        }
        Ok(())
    }

    /// Reads a manifest; wav paths are relative to the manifest's directory.
    pub fn read_manifest(path: &Path) -> Result<Corpus> {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let file = fs::File::open(path).map_err(|e| HarnessError::Manifest {
            path: path.display().to_string(),
            line: 0,
            reason: e.to_string(),
        })?;
        let mut utterances = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let err = |reason: String| HarnessError::Manifest {
                path: path.display().to_string(),
                line: i + 1,
                reason,
            };
            let f: Vec<&str> = t.split_whitespace().collect();
            if f.len() != 4 {
                return Err(err(format!("expected `utt-id language-id wav-path split`, found {} fields", f.len())));
            }
            let split: Split = f[3].parse().map_err(err)?;
            let wav: PathBuf = base.join(f[2]);
            let (samples, sr) = read_pcm16(&wav).map_err(|e| err(e.to_string()))?;
            if sr != SAMPLE_RATE {
                return Err(err(format!("{}: sample rate {sr}, expected {SAMPLE_RATE}", f[2])));
            }
            utterances.push(Utterance {
                id: f[0].to_string(),
                language: f[1].to_string(),
                split,
                samples,
            });
        }
        let c = Corpus { utterances };
        c.check_ids()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    ShortUtterance,
    CrossChannel,
    ZeroResource,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::ShortUtterance => "short_utterance",
            Task::CrossChannel => "cross_channel",
            Task::ZeroResource => "zero_resource",
        })
    }
}

impl FromStr for Task {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short_utterance" => Ok(Task::ShortUtterance),
            "cross_channel" => Ok(Task::CrossChannel),
            "zero_resource" => Ok(Task::ZeroResource),
            _ => Err(HarnessError::InvalidPlan(format!("unknown task `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub task: Task,
    pub seed: u64,
    /// Languages the network is trained on (softmax order).
    pub train_languages: Vec<SyntheticLanguageSpec>,
    /// Closed-set tasks: scored subset of the training languages.
    /// Zero-resource: unseen languages to enroll and test.
    pub eval_languages: Vec<SyntheticLanguageSpec>,
    pub train_per_language: usize,
    pub reference_per_language: usize,
    pub test_per_language: usize,
    /// Centre crop applied to test utterances (`None` = full length).
    pub test_crop_s: Option<f64>,
    /// Test-time channel for the cross-channel task.
    pub channel: ChannelSpec,
    pub fbank: FbankConfig,
    pub vad: VadConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub p_target: f64,
}

pub const PLAN_KEYS: &[&str] = &[
    "task",
    "seed",
    "languages.train",
    "languages.eval",
    "lang.*",
    "corpus.*",
    "test.crop_seconds",
    "channel.*",
    "fbank.*",
    "vad.*",
    "net.*",
    "train.*",
    "eval.p_target",
];

/// Desk-scale defaults for `task`, as flat config keys.
pub fn desk_defaults(task: Task) -> KvConfig {
    let mut kv = KvConfig::new();
    kv.set("task", task);
    kv.set("seed", 0);
    kv.set("languages.train", "lang-a,lang-b,lang-c");
    kv.set("corpus.train_per_language", 200);
    kv.set("corpus.reference_per_language", 10);
    kv.set("corpus.test_per_language", 100);
    kv.set("train.learning_rate", 0.02);
    kv.set("train.batch_size", 16);
    kv.set("train.epochs", 4);
    kv.set("train.max_grad_norm", 5.0);
    kv.set("channel.cutoff_hz", 1000.0);
    kv.set("channel.taps", 101);
    kv.set("channel.snr_db", 10.0);
    match task {
        Task::ZeroResource => {
            kv.set("languages.eval", "lang-d,lang-e");
            kv.set("test.crop_seconds", 0.0);
        }
        _ => {
            kv.set("languages.eval", "lang-a,lang-b,lang-c");
            kv.set("test.crop_seconds", 1.0);
        }
    }
    kv
}

fn split_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    let bad = || {
        HarnessError::Config(ConfigError::BadValue {
            key: key.to_string(),
            value: v.to_string(),
        })
    };
    let (a, b) = v.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn parse_pair(kv: &KvConfig, key: &str) -> Result<Option<(f64, f64)>> {
    kv.get_str(key).map(|v| split_pair(key, v)).transpose()
}

fn language_from_kv(kv: &KvConfig, id: &str) -> Result<SyntheticLanguageSpec> {
    let builtin = builtin_languages().into_iter().find(|l| l.id == id);
    let prefix = format!("lang.{id}.");
    let mut spec = match (builtin, kv.get_list(&format!("{prefix}bands"))) {
        (_, Some(list)) => {
            let key = format!("{prefix}bands");
            let bands = list.iter().map(|b| split_pair(&key, b)).collect::<Result<Vec<_>>>()?;
            SyntheticLanguageSpec::new(id, &bands, (100.0, 200.0))
        }
        (Some(b), None) => b,
        (None, None) => {
            return Err(HarnessError::InvalidPlan(format!(
                "language `{id}` is not built in and has no `{prefix}bands`"
            )))
        }
    };
    if let Some(p) = parse_pair(kv, &format!("{prefix}pitch"))? {
        spec.pitch_range_hz = p;
    }
    if let Some(l) = parse_pair(kv, &format!("{prefix}length"))? {
        spec.length_range_s = l;
    }
    spec.noise_level = kv.get_or(&format!("{prefix}noise"), spec.noise_level)?;
    spec.validate()?;
    Ok(spec)
}

impl ExperimentPlan {
    pub fn desk(task: Task, seed: u64) -> Result<Self> {
        let mut kv = desk_defaults(task);
        kv.set("seed", seed);
        Self::from_kv(&kv)
    }

    /// Builds a plan from flat keys layered over the desk defaults of the
    /// requested task.
    pub fn from_kv(overrides: &KvConfig) -> Result<Self> {
        overrides.check_keys(PLAN_KEYS)?;
        let task: Task = overrides.get_str("task").unwrap_or("short_utterance").parse()?;
        let mut kv = desk_defaults(task);
        for k in overrides.keys() {
            kv.set(k, overrides.get_str(k).expect("listed key"));
        }
        let langs = |key: &str| -> Result<Vec<SyntheticLanguageSpec>> {
            kv.get_list(key).unwrap_or_default().iter().map(|id| language_from_kv(&kv, id)).collect()
        };
        let train_languages = langs("languages.train")?;
        let eval_languages = langs("languages.eval")?;
        let fbank = FbankConfig::from_kv(&kv)?;
        let cutoff: f64 = kv.get_or("channel.cutoff_hz", 0.0)?;
        let snr: f64 = kv.get_or("channel.snr_db", f64::INFINITY)?;
        let snr_db = snr.is_finite().then_some(snr);
        let channel = if cutoff > 0.0 {
            ChannelSpec::lowpass(cutoff, kv.get_or("channel.taps", 101usize)?, snr_db, SAMPLE_RATE)?
        } else {
            ChannelSpec { snr_db, ..ChannelSpec::identity() }
        };
        let crop: f64 = kv.get_or("test.crop_seconds", 0.0)?;
        let mut train_cfg = TrainConfig::from_kv(&kv)?;
        train_cfg.seed = derive_seed(kv.get_or("seed", 0u64)?, "train");
        let plan = Self {
            task,
            seed: kv.get_or("seed", 0)?,
            net: NetConfig::from_kv(&kv, train_languages.len().max(1))?,
            train_languages,
            eval_languages,
            train_per_language: kv.get_or("corpus.train_per_language", 0)?,
            reference_per_language: kv.get_or("corpus.reference_per_language", 0)?,
            test_per_language: kv.get_or("corpus.test_per_language", 0)?,
            test_crop_s: (crop > 0.0).then_some(crop),
            channel,
            fbank,
            vad: VadConfig::from_kv(&kv)?,
            train: train_cfg,
            p_target: kv.get_or("eval.p_target", 0.5)?,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::InvalidPlan(m));
        if self.train_languages.len() < 2 {
            return bad("need at least 2 training languages".into());
        }
        let train_ids: Vec<&str> = self.train_languages.iter().map(|l| l.id.as_str()).collect();
        let eval_ids: Vec<&str> = self.eval_languages.iter().map(|l| l.id.as_str()).collect();
        for ids in [&train_ids, &eval_ids] {
            if ids.iter().collect::<HashSet<_>>().len() != ids.len() {
                return bad("duplicate language id".into());
            }
        }
        if self.net.num_classes != train_ids.len() {
            return bad(format!(
                "network has {} outputs for {} training languages",
                self.net.num_classes,
                train_ids.len()
            ));
        }
        if self.fbank.sample_rate != SAMPLE_RATE {
            return bad(format!("synthetic corpora are {SAMPLE_RATE} Hz"));
        }
        if self.train_per_language == 0 || self.test_per_language == 0 {
            return bad("train and test counts must be at least 1".into());
        }
        match self.task {
            Task::ZeroResource => {
                if eval_ids.len() < 2 {
                    return bad("zero-resource needs at least 2 unseen languages".into());
                }
                if let Some(id) = eval_ids.iter().find(|id| train_ids.contains(id)) {
                    return bad(format!("zero-resource language `{id}` is also a training language"));
                }
                if self.reference_per_language == 0 {
                    return bad("zero-resource needs at least 1 reference utterance".into());
                }
            }
            _ => {
                if eval_ids.is_empty() {
                    return bad("no evaluation languages".into());
                }
                if let Some(id) = eval_ids.iter().find(|id| !train_ids.contains(id)) {
                    return bad(format!("closed-set language `{id}` was not trained"));
                }
            }
        }
        if let Some(c) = self.test_crop_s {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("test crop {c}"));
            }
        }
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return bad(format!("p_target {}", self.p_target));
        }
        Ok(())
    }

    pub fn eval_ids(&self) -> Vec<String> {
        self.eval_languages.iter().map(|l| l.id.clone()).collect()
    }

    /// Training split of the training languages plus the splits the task
    /// evaluates on.
    pub fn generate_corpus(&self) -> Result<Corpus> {
        let train = generate_corpus(&self.train_languages, &[(Split::Train, self.train_per_language)], self.seed)?;
        let eval = match self.task {
            Task::ZeroResource => generate_corpus(
                &self.eval_languages,
                &[
                    (Split::Reference, self.reference_per_language),
                    (Split::Test, self.test_per_language),
                ],
                self.seed,
            ),
            _ => {
                let specs: Vec<SyntheticLanguageSpec> = self
                    .train_languages
                    .iter()
                    .filter(|l| self.eval_languages.iter().any(|e| e.id == l.id))
                    .cloned()
                    .collect();
                // Single-language subsets still need a two-spec generator call.
                let specs = if specs.len() < 2 { self.train_languages.clone() } else { specs };
                generate_corpus(&specs, &[(Split::Test, self.test_per_language)], self.seed)
                    .map(|c| Corpus {
                        utterances: c
                            .utterances
                            .into_iter()
                            .filter(|u| self.eval_languages.iter().any(|e| e.id == u.language))
                            .collect(),
                    })
            }
        }?;
        train.merge(eval)
    }

    /// [`Self::generate_corpus`] with the cross-channel test split already
    /// passed through the plan's channel, as written to disk.
    pub fn materialize(&self) -> Result<Corpus> {
        let mut corpus = self.generate_corpus()?;
        if self.task == Task::CrossChannel {
            for u in corpus.utterances.iter_mut().filter(|u| u.split == Split::Test) {
                u.samples = self.channel.apply(&u.samples, channel_seed(self.seed, &u.id));
            }
        }
        Ok(corpus)
    }
}

/// Centre crop of at most `seconds`.
pub fn center_crop(samples: &[i16], seconds: f64) -> &[i16] {
    let n = (seconds * SAMPLE_RATE as f64).round() as usize;
    if samples.len() <= n {
        return samples;
    }
    let start = (samples.len() - n) / 2;
    &samples[start..start + n]
}

/// Front-end output per utterance; failures are logged and become `None`.
pub fn extract_features<'a>(front_end: &FrontEnd, utts: impl IntoIterator<Item = &'a Utterance>) -> Vec<Option<FeatureMatrix>> {
    let utts: Vec<&Utterance> = utts.into_iter().collect();
    utts.par_iter()
        .map(|u| match front_end.process(&u.waveform()) {
            Ok(f) => Some(f),
            Err(e) => {
                log::warn!("{}: {e}", u.id);
                None
            }
        })
        .collect()
}

/// Trains a fresh network on the train split of `corpus`.
pub fn train_on_corpus(
    corpus: &Corpus,
    languages: &[String],
    front_end: &FrontEnd,
    net: &NetConfig,
    train_cfg: &TrainConfig,
    init_seed: u64,
) -> Result<(NetworkParams, Vec<f64>)> {
    let utts: Vec<&Utterance> = corpus.split(Split::Train).collect();
    let mut data = Vec::with_capacity(utts.len());
    for (u, f) in utts.iter().zip(extract_features(front_end, utts.iter().copied())) {
        let Some(label) = languages.iter().position(|l| *l == u.language) else {
            return Err(HarnessError::InvalidPlan(format!("{}: language `{}` not in the model", u.id, u.language)));
        };
        if let Some(f) = f {
            if f.num_frames() >= net.receptive_field() {
                data.push((f, label));
            }
        }
    }
    let mut params = init_network(net.clone(), init_seed)?;
    let losses = train(&mut params, &data, train_cfg, |_, _| {})?;
    Ok((params, losses))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub task: Task,
    pub report: EvalReport,
    pub scores: Vec<ScoreRecord>,
    pub key: TrialKey,
    /// `(segment, reason)` for every segment scored `-inf`.
    pub diagnostics: Vec<(String, String)>,
    pub train_losses: Vec<f64>,
}

impl TaskOutcome {
    pub fn scores_text(&self) -> String {
        scores_to_string(&self.scores)
    }

    pub fn report_text(&self) -> String {
        self.report.to_text()
    }
}

/// A generated corpus and the network trained on it.
#[derive(Debug)]
pub struct TrainedSystem {
    pub plan: ExperimentPlan,
    pub corpus: Corpus,
    pub front_end: FrontEnd,
    pub params: NetworkParams,
    pub train_losses: Vec<f64>,
}

pub fn prepare(plan: &ExperimentPlan) -> Result<TrainedSystem> {
    plan.validate()?;
    let corpus = plan.generate_corpus()?;
    let front_end = FrontEnd::new(plan.fbank, plan.vad)?;
    let ids: Vec<String> = plan.train_languages.iter().map(|l| l.id.clone()).collect();
    let (params, train_losses) =
        train_on_corpus(&corpus, &ids, &front_end, &plan.net, &plan.train, derive_seed(plan.seed, "init"))?;
    Ok(TrainedSystem {
        plan: plan.clone(),
        corpus,
        front_end,
        params,
        train_losses,
    })
}

/// Noise seed of the test channel for utterance `id`.
pub fn channel_seed(seed: u64, id: &str) -> u64 {
    derive_seed(seed, &format!("channel/{id}"))
}

impl TrainedSystem {
    fn test_wave(&self, u: &Utterance, channel: &ChannelSpec) -> Waveform {
        let ch = channel.apply(&u.samples, channel_seed(self.plan.seed, &u.id));
        let cropped = match self.plan.test_crop_s {
            Some(s) => center_crop(&ch, s),
            None => &ch,
        };
        Waveform::from_pcm16(cropped, SAMPLE_RATE)
    }

    /// Scores the test split with the plan's task and the given test channel.
    pub fn evaluate(&self, channel: &ChannelSpec) -> Result<TaskOutcome> {
        let eval_ids = self.plan.eval_ids();
        let tests: Vec<&Utterance> = self.corpus.split(Split::Test).collect();
        let scored: Vec<Scored> = match self.plan.task {
            Task::ShortUtterance | Task::CrossChannel => {
                let subset: Vec<usize> = eval_ids
                    .iter()
                    .map(|id| self.plan.train_languages.iter().position(|l| &l.id == id).expect("validated"))
                    .collect();
                tests
                    .par_iter()
                    .map(|u| score_closed_set_wave(&self.params, &self.front_end, &self.test_wave(u, channel), Some(&subset)))
                    .collect::<std::result::Result<_, _>>()?
            }
            Task::ZeroResource => {
                let models = self.enroll()?;
                tests
                    .par_iter()
                    .map(|u| score_zero_resource_wave(&models, &self.front_end, &self.test_wave(u, channel), &self.params))
                    .collect::<std::result::Result<_, _>>()?
            }
        };
        let mut diagnostics = Vec::new();
        let scores: Vec<ScoreRecord> = tests
            .iter()
            .zip(scored)
            .map(|(u, s)| {
                if let Some(d) = s.diagnostic {
                    log::warn!("{}: {d}", u.id);
                    diagnostics.push((u.id.clone(), d));
                }
                ScoreRecord::new(u.id.clone(), s.scores)
            })
            .collect();
        let key = self.corpus.key(Split::Test, &eval_ids)?;
        let cfg = EvalConfig::new(eval_ids.len()).with_p_target(self.plan.p_target);
        let report = compute_cavg(&scores, &key, &cfg)?;
        Ok(TaskOutcome {
            task: self.plan.task,
            report,
            scores,
            key,
            diagnostics,
            train_losses: self.train_losses.clone(),
        })
    }

    /// Centroids of the reference split.
    pub fn enroll(&self) -> Result<LanguageModelSet> {
        let refs: Vec<&Utterance> = self.corpus.split(Split::Reference).collect();
        let feats = extract_features(&self.front_end, refs.iter().copied());
        let mut per_lang: Vec<(String, Vec<ndarray::Array1<f64>>)> =
            self.plan.eval_ids().into_iter().map(|id| (id, Vec::new())).collect();
        for (u, f) in refs.iter().zip(feats) {
            let Some(f) = f else { continue };
            match extract_xvector(&self.params, &f) {
                Ok(x) => {
                    if let Some(slot) = per_lang.iter_mut().find(|(id, _)| *id == u.language) {
                        slot.1.push(x);
                    }
                }
                Err(e) => log::warn!("{}: {e}", u.id),
            }
        }
        Ok(LanguageModelSet::from_xvectors(per_lang)?)
    }
}

/// Generates, trains and evaluates `plan` end to end. Cross-channel plans
/// use the plan's channel; other tasks see the test audio unchanged.
pub fn run_task(plan: &ExperimentPlan) -> Result<TaskOutcome> {
    let system = prepare(plan)?;
    let channel = match plan.task {
        Task::CrossChannel => plan.channel.clone(),
        _ => ChannelSpec::identity(),
    };
    system.evaluate(&channel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::extract_filterbanks;

    fn two_langs() -> Vec<SyntheticLanguageSpec> {
        builtin_languages().into_iter().take(2).collect()
    }

    #[test]
    fn derive_seed_separates_tags() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
        assert_eq!(derive_seed(7, "x"), derive_seed(7, "x"));
    }

    #[test]
    fn corpus_is_deterministic_and_sized() {
        let specs: Vec<_> = two_langs().into_iter().map(|s| s.with_length(1.0, 1.0)).collect();
        let a = generate_corpus(&specs, &[(Split::Test, 3)], 9).unwrap();
        let b = generate_corpus(&specs, &[(Split::Test, 3)], 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.utterances.len(), 6);
        for u in &a.utterances {
            assert!((u.samples.len() as i64 - 16000).abs() <= 160);
        }
        let c = generate_corpus(&specs, &[(Split::Test, 3)], 10).unwrap();
        assert_ne!(a.utterances[0].samples, c.utterances[0].samples);
    }

    #[test]
    fn invalid_specs_rejected() {
        let one = &builtin_languages()[..1];
        assert!(generate_corpus(one, &[(Split::Train, 1)], 0).is_err());
        assert!(generate_corpus(&two_langs(), &[(Split::Train, 0)], 0).is_err());
        let mut bad = two_langs();
        bad[0].bands[0].center_hz = 8000.0;
        assert!(matches!(generate_corpus(&bad, &[(Split::Train, 1)], 0), Err(HarnessError::InvalidSpec(_))));
        let mut bad = two_langs();
        bad[1].length_range_s = (0.0, 1.0);
        assert!(generate_corpus(&bad, &[(Split::Train, 1)], 0).is_err());
    }

    #[test]
    fn disjoint_bands_have_different_spectral_peaks() {
        let specs = vec![
            SyntheticLanguageSpec::new("low", &[(400.0, 100.0)], (100.0, 150.0)),
            SyntheticLanguageSpec::new("high", &[(3500.0, 300.0)], (100.0, 150.0)),
        ];
        let corpus = generate_corpus(&specs, &[(Split::Train, 4)], 3).unwrap();
        let argmax = |lang: &str| {
            let mut mean = vec![0.0; 40];
            for u in corpus.utterances.iter().filter(|u| u.language == lang) {
                let f = extract_filterbanks(&u.waveform(), &FbankConfig::default()).unwrap();
                for (m, c) in mean.iter_mut().zip(f.frames.mean_axis(ndarray::Axis(0)).unwrap()) {
                    *m += c;
                }
            }
            mean.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
        };
        let (lo, hi) = (argmax("low"), argmax("high"));
        assert!(lo + 5 < hi, "low peak bin {lo}, high peak bin {hi}");
    }

    #[test]
    fn lowpass_channel() {
        let ch = ChannelSpec::lowpass(1000.0, 101, None, SAMPLE_RATE).unwrap();
        assert!((ch.taps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let tone = |f: f64| -> Vec<f64> { (0..4000).map(|n| (2.0 * PI * f * n as f64 / 16000.0).sin()).collect() };
        let gain = |f: f64| rms(&ch.apply_f64(&tone(f), 0)[200..]) / rms(&tone(f)[200..]);
        assert!(gain(300.0) > 0.95);
        assert!(gain(3000.0) < 0.01);
        let x: Vec<i16> = (0..500).map(|i| (i * 37 % 2000) as i16 - 1000).collect();
        assert_eq!(ChannelSpec::identity().apply(&x, 5), x);
        let noisy = ChannelSpec { snr_db: Some(0.0), ..ChannelSpec::identity() };
        assert_ne!(noisy.apply(&x, 5), x);
        assert_eq!(noisy.apply(&x, 5), noisy.apply(&x, 5));
    }

    #[test]
    fn plan_validation() {
        let plan = ExperimentPlan::desk(Task::ZeroResource, 1).unwrap();
        assert_eq!(plan.eval_ids(), vec!["lang-d", "lang-e"]);
        let mut kv = desk_defaults(Task::ZeroResource);
        kv.set("languages.eval", "lang-a,lang-e");
        assert!(matches!(ExperimentPlan::from_kv(&kv), Err(HarnessError::InvalidPlan(_))));
        let mut kv = KvConfig::new();
        kv.set("task", "short_utterance");
        kv.set("languages.eval", "lang-f");
        assert!(ExperimentPlan::from_kv(&kv).is_err());
        kv.set("languages.eval", "lang-a");
        kv.set("bogus", 1);
        assert!(ExperimentPlan::from_kv(&kv).is_err());
        let mut kv = KvConfig::new();
        kv.set("languages.train", "x,y");
        kv.set("lang.x.bands", "500:100,2500:200");
        kv.set("lang.y.bands", "900:100");
        kv.set("lang.y.pitch", "150:250");
        kv.set("languages.eval", "x,y");
        let p = ExperimentPlan::from_kv(&kv).unwrap();
        assert_eq!(p.train_languages[1].pitch_range_hz, (150.0, 250.0));
        assert_eq!(p.net.num_classes, 2);
    }

    #[test]
    fn corpus_write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let specs: Vec<_> = two_langs().into_iter().map(|s| s.with_length(0.3, 0.5)).collect();
        let c = generate_corpus(&specs, &[(Split::Train, 2), (Split::Test, 1)], 4).unwrap();
        c.write(dir.path(), &["stamp".into()]).unwrap();
        let back = Corpus::read_manifest(&dir.path().join("manifest.txt")).unwrap();
        assert_eq!(back, c);
        let key = crate::submission::parse_key(fs::File::open(dir.path().join("key_test.txt")).map(BufReader::new).unwrap()).unwrap();
        assert_eq!(key.len(), 2);
        fs::write(dir.path().join("bad.txt"), "u1 lang-a wav/x.wav\n").unwrap();
        let err = Corpus::read_manifest(&dir.path().join("bad.txt")).unwrap_err();
        assert!(err.to_string().contains("bad.txt:1:"));
    }

    fn tiny_plan(task: Task) -> ExperimentPlan {
        let mut kv = desk_defaults(task);
        kv.set("corpus.train_per_language", 6);
        kv.set("corpus.test_per_language", 3);
        kv.set("corpus.reference_per_language", 2);
        kv.set("train.epochs", 1);
        kv.set("net.frame_dims", "8,8,8,8,12");
        kv.set("net.embed_dim", 8);
        kv.set("net.segment7_dim", 8);
        ExperimentPlan::from_kv(&kv).unwrap()
    }

    #[test]
    fn identity_channel_matches_short_utterance() {
        let sys = prepare(&tiny_plan(Task::ShortUtterance)).unwrap();
        let short = sys.evaluate(&ChannelSpec::identity()).unwrap();
        let mut cross_plan = sys.plan.clone();
        cross_plan.task = Task::CrossChannel;
        cross_plan.channel = ChannelSpec::identity();
        let cross = run_task(&cross_plan).unwrap();
        assert_eq!(short.report, cross.report);
        assert_eq!(short.scores_text(), cross.scores_text());
        assert_eq!(short.scores.len(), 9);
    }

    #[test]
    fn zero_resource_runs() {
        let out = run_task(&tiny_plan(Task::ZeroResource)).unwrap();
        assert_eq!(out.key.languages(), ["lang-d".to_string(), "lang-e".to_string()]);
        assert_eq!(out.scores.len(), 6);
        assert!(out.report.cavg >= 0.0 && out.report.cavg <= 1.0);
    }
}
