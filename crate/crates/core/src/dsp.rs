//! Audio front end: framing, log-mel filterbanks and energy VAD.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::config::{ConfigError, KvConfig};
use crate::wav;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("waveform has {samples} samples, fewer than one {frame_len}-sample frame")]
    TooShort { samples: usize, frame_len: usize },
    #[error("invalid feature config: {0}")]
    InvalidConfig(String),
    #[error("VAD mask has {mask} entries for {frames} frames")]
    MaskLength { mask: usize, frames: usize },
    #[error("every frame was removed by VAD")]
    AllFramesRemoved,
    #[error(transparent)]
    Wav(#[from] wav::WavError),
}

impl From<ConfigError> for DspError {
    fn from(e: ConfigError) -> Self {
        DspError::InvalidConfig(e.to_string())
    }
}

/// Mono audio, samples nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    /// 16-bit PCM, scaled by `1/32768`.
    pub fn from_pcm16(pcm: &[i16], sample_rate: u32) -> Self {
        Self::new(pcm.iter().map(|&s| s as f64 / 32768.0).collect(), sample_rate)
    }

    pub fn read_wav(path: &Path) -> Result<Self, DspError> {
        let (pcm, sr) = wav::read_pcm16(path)?;
        Ok(Self::from_pcm16(&pcm, sr))
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// `T x D` log-mel filterbank frames of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Array2<f64>,
    /// Seconds between frames.
    pub frame_shift: f64,
    pub vad_mask_applied: bool,
}

impl FeatureMatrix {
    pub fn new(frames: Array2<f64>, frame_shift: f64) -> Self {
        Self {
            frames,
            frame_shift,
            vad_mask_applied: false,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FbankConfig {
    pub sample_rate: u32,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub num_mel_bins: usize,
    pub fft_size: usize,
    pub low_freq: f64,
    pub high_freq: f64,
    pub preemphasis: f64,
    pub log_floor: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            num_mel_bins: 40,
            fft_size: 512,
            low_freq: 20.0,
            high_freq: 7600.0,
            preemphasis: 0.97,
            log_floor: 1e-10,
        }
    }
}

impl FbankConfig {
    pub fn frame_length(&self) -> usize {
        (self.sample_rate as f64 * self.frame_length_ms / 1000.0).round() as usize
    }

    pub fn frame_shift(&self) -> usize {
        (self.sample_rate as f64 * self.frame_shift_ms / 1000.0).round() as usize
    }

    /// Number of frames for `num_samples` samples (0 if shorter than a frame).
    pub fn num_frames(&self, num_samples: usize) -> usize {
        let len = self.frame_length();
        if num_samples < len {
            0
        } else {
            1 + (num_samples - len) / self.frame_shift()
        }
    }

    pub fn validate(&self) -> Result<(), DspError> {
        let bad = |m: String| Err(DspError::InvalidConfig(m));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        if self.frame_length() == 0 || self.frame_shift() == 0 {
            return bad("frame length and shift must be at least one sample".into());
        }
        if self.fft_size < self.frame_length() {
            return bad(format!(
                "fft_size {} is smaller than the frame length {}",
                self.fft_size,
                self.frame_length()
            ));
        }
        if self.num_mel_bins == 0 {
            return bad("num_mel_bins must be positive".into());
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.low_freq >= 0.0 && self.low_freq < self.high_freq && self.high_freq <= nyquist) {
            return bad(format!(
                "mel range [{}, {}] must satisfy 0 <= low < high <= {nyquist}",
                self.low_freq, self.high_freq
            ));
        }
        if !(0.0..1.0).contains(&self.preemphasis) {
            return bad(format!("preemphasis {} outside [0, 1)", self.preemphasis));
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive".into());
        }
        Ok(())
    }

    /// Reads `fbank.*` keys; missing keys keep their defaults.
    pub fn from_kv(kv: &KvConfig) -> Result<Self, DspError> {
        let d = Self::default();
        let c = Self {
            sample_rate: kv.get_or("fbank.sample_rate", d.sample_rate)?,
            frame_length_ms: kv.get_or("fbank.frame_length_ms", d.frame_length_ms)?,
            frame_shift_ms: kv.get_or("fbank.frame_shift_ms", d.frame_shift_ms)?,
            num_mel_bins: kv.get_or("fbank.num_mel_bins", d.num_mel_bins)?,
            fft_size: kv.get_or("fbank.fft_size", d.fft_size)?,
            low_freq: kv.get_or("fbank.low_freq", d.low_freq)?,
            high_freq: kv.get_or("fbank.high_freq", d.high_freq)?,
            preemphasis: kv.get_or("fbank.preemphasis", d.preemphasis)?,
            log_floor: kv.get_or("fbank.log_floor", d.log_floor)?,
        };
        c.validate()?;
        Ok(c)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// Triangular filters equally spaced on the mel scale, evaluated at the
/// FFT bin frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct MelBank {
    /// `num_mel_bins x (fft_size / 2 + 1)`.
    pub weights: Array2<f64>,
    pub center_freqs: Vec<f64>,
}

impl MelBank {
    pub fn new(config: &FbankConfig) -> Self {
        let n = config.num_mel_bins;
        let num_fft_bins = config.fft_size / 2 + 1;
        let bin_hz = config.sample_rate as f64 / config.fft_size as f64;
        let mel_lo = hz_to_mel(config.low_freq);
        let mel_hi = hz_to_mel(config.high_freq);
        let delta = (mel_hi - mel_lo) / (n + 1) as f64;

        let mut weights = Array2::zeros((n, num_fft_bins));
        let mut center_freqs = Vec::with_capacity(n);
        for k in 0..n {
            let left = mel_lo + k as f64 * delta;
            let center = left + delta;
            let right = center + delta;
            center_freqs.push(mel_to_hz(center));
            for i in 0..num_fft_bins {
                let m = hz_to_mel(i as f64 * bin_hz);
                if m > left && m < right {
                    weights[[k, i]] = if m <= center {
                        (m - left) / (center - left)
                    } else {
                        (right - m) / (right - center)
                    };
                }
            }
        }
        Self { weights, center_freqs }
    }
}

/// Filterbank extractor with the window, mel bank and FFT plan prepared once.
pub struct Fbank {
    config: FbankConfig,
    bank: MelBank,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fbank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fbank").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Fbank {
    pub fn new(config: FbankConfig) -> Result<Self, DspError> {
        config.validate()?;
        let len = config.frame_length();
        let window = (0..len)
            .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (len - 1).max(1) as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(config.fft_size);
        Ok(Self {
            bank: MelBank::new(&config),
            config,
            window,
            fft,
        })
    }

    pub fn config(&self) -> &FbankConfig {
        &self.config
    }

    pub fn mel_bank(&self) -> &MelBank {
        &self.bank
    }

    fn check_input(&self, wave: &Waveform) -> Result<usize, DspError> {
        if wave.sample_rate != self.config.sample_rate {
            return Err(DspError::InvalidConfig(format!(
                "waveform is {} Hz, front end expects {} Hz",
                wave.sample_rate, self.config.sample_rate
            )));
        }
        match self.config.num_frames(wave.samples.len()) {
            0 => Err(DspError::TooShort {
                samples: wave.samples.len(),
                frame_len: self.config.frame_length(),
            }),
            t => Ok(t),
        }
    }

    pub fn compute(&self, wave: &Waveform) -> Result<FeatureMatrix, DspError> {
        let num_frames = self.check_input(wave)?;
        let len = self.config.frame_length();
        let shift = self.config.frame_shift();
        let nfft = self.config.fft_size;
        let floor = self.config.log_floor;
        let pre = self.config.preemphasis;

        let mut out = Array2::zeros((num_frames, self.config.num_mel_bins));
        let mut frame = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); nfft];
        let mut power = vec![0.0; nfft / 2 + 1];
        for t in 0..num_frames {
            frame.copy_from_slice(&wave.samples[t * shift..t * shift + len]);
            for i in (1..len).rev() {
                frame[i] -= pre * frame[i - 1];
            }
            frame[0] -= pre * frame[0];
            for (b, (&x, &w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *b = Complex::new(x * w, 0.0);
            }
            for b in &mut buf[len..] {
                *b = Complex::new(0.0, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (k, filt) in self.bank.weights.axis_iter(Axis(0)).enumerate() {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                out[[t, k]] = e.max(floor).ln();
            }
        }
        Ok(FeatureMatrix::new(out, self.config.frame_shift_ms / 1000.0))
    }

    /// Per-frame `ln(mean(x^2))` on the raw samples, floored, with frames
    /// aligned to the feature rows.
    pub fn frame_log_energies(&self, wave: &Waveform) -> Result<Vec<f64>, DspError> {
        let num_frames = self.check_input(wave)?;
        let len = self.config.frame_length();
        let shift = self.config.frame_shift();
        Ok((0..num_frames)
            .map(|t| {
                let frame = &wave.samples[t * shift..t * shift + len];
                let ms = frame.iter().map(|x| x * x).sum::<f64>() / len as f64;
                ms.max(self.config.log_floor).ln()
            })
            .collect())
    }
}

pub fn extract_filterbanks(wave: &Waveform, config: &FbankConfig) -> Result<FeatureMatrix, DspError> {
    Fbank::new(*config)?.compute(wave)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VadConfig {
    /// Added to the mean log-energy to form the keep threshold (nats).
    pub offset: f64,
    /// Frames whose log-energy sits at `ln(log_floor)` are always dropped.
    pub log_floor: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            offset: -1.0,
            log_floor: 1e-10,
        }
    }
}

impl VadConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self, DspError> {
        let d = Self::default();
        Ok(Self {
            offset: kv.get_or("vad.offset", d.offset)?,
            log_floor: kv.get_or("vad.log_floor", d.log_floor)?,
        })
    }
}

/// Keeps frame `t` iff `log_energy[t] > mean + offset` and the frame is not
/// at the silence floor.
pub fn energy_vad(log_energies: &[f64], config: &VadConfig) -> Vec<bool> {
    if log_energies.is_empty() {
        return Vec::new();
    }
    let mean = log_energies.iter().sum::<f64>() / log_energies.len() as f64;
    let floor = config.log_floor.ln();
    log_energies
        .iter()
        .map(|&e| e > floor && e > mean + config.offset)
        .collect()
}

pub fn apply_vad(features: &FeatureMatrix, mask: &[bool]) -> Result<FeatureMatrix, DspError> {
    if mask.len() != features.num_frames() {
        return Err(DspError::MaskLength {
            mask: mask.len(),
            frames: features.num_frames(),
        });
    }
    let keep: Vec<usize> = mask.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect();
    if keep.is_empty() {
        return Err(DspError::AllFramesRemoved);
    }
    Ok(FeatureMatrix {
        frames: features.frames.select(Axis(0), &keep),
        frame_shift: features.frame_shift,
        vad_mask_applied: true,
    })
}

/// Filterbanks followed by energy VAD.
#[derive(Debug)]
pub struct FrontEnd {
    fbank: Fbank,
    vad: VadConfig,
}

impl FrontEnd {
    pub fn new(fbank: FbankConfig, vad: VadConfig) -> Result<Self, DspError> {
        Ok(Self {
            fbank: Fbank::new(fbank)?,
            vad,
        })
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self, DspError> {
        Self::new(FbankConfig::from_kv(kv)?, VadConfig::from_kv(kv)?)
    }

    pub fn fbank(&self) -> &Fbank {
        &self.fbank
    }

    pub fn process(&self, wave: &Waveform) -> Result<FeatureMatrix, DspError> {
        let feats = self.fbank.compute(wave)?;
        let mask = energy_vad(&self.fbank.frame_log_energies(wave)?, &self.vad);
        apply_vad(&feats, &mask)
    }
}

impl Default for FrontEnd {
    fn default() -> Self {
        Self::new(FbankConfig::default(), VadConfig::default()).expect("default front end is valid")
    }
}
