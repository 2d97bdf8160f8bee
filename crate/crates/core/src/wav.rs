//! Minimal RIFF/WAVE support: mono 16-bit integer PCM only.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WavError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: not a RIFF/WAVE file")]
    NotWave { path: String },
    #[error("{path}: unsupported encoding ({detail}); expected mono 16-bit PCM")]
    Unsupported { path: String, detail: String },
    #[error("{path}: truncated {chunk} chunk")]
    Truncated { path: String, chunk: String },
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

/// Decodes WAV bytes into samples and sample rate. `name` labels diagnostics.
pub fn decode_pcm16(bytes: &[u8], name: &str) -> Result<(Vec<i16>, u32), WavError> {
    let path = name.to_string();
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(WavError::NotWave { path });
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let chunk = String::from_utf8_lossy(id).into_owned();
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(WavError::Truncated { path, chunk });
                }
                format = Some((
                    u16_at(bytes, body),
                    u16_at(bytes, body + 2),
                    u32_at(bytes, body + 4),
                    u16_at(bytes, body + 14),
                ));
            }
            b"data" => {
                let (tag, channels, rate, bits) = format.ok_or_else(|| WavError::NotWave { path: path.clone() })?;
                if tag != 1 || channels != 1 || bits != 16 {
                    return Err(WavError::Unsupported {
                        path,
                        detail: format!("format tag {tag}, {channels} channel(s), {bits} bits"),
                    });
                }
                if body + size > bytes.len() || !size.is_multiple_of(2) {
                    return Err(WavError::Truncated { path, chunk });
                }
                let samples = bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]))
                    .collect();
                return Ok((samples, rate));
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(WavError::Truncated {
        path,
        chunk: "data".into(),
    })
}

pub fn read_pcm16(path: &Path) -> Result<(Vec<i16>, u32), WavError> {
    let bytes = fs::read(path).map_err(|e| WavError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    decode_pcm16(&bytes, &path.display().to_string())
}

pub fn encode_pcm16(samples: &[i16], sample_rate: u32) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn write_pcm16(path: &Path, samples: &[i16], sample_rate: u32) -> io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_pcm16(samples, sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let s = vec![0i16, 1, -1, i16::MAX, i16::MIN, 1234];
        let bytes = encode_pcm16(&s, 16000);
        assert_eq!(bytes.len(), 44 + 12);
        assert_eq!(decode_pcm16(&bytes, "x").unwrap(), (s, 16000));
    }

    #[test]
    fn skips_unknown_chunks() {
        let mut bytes = encode_pcm16(&[5, 6], 16000);
        let mut extra = b"LIST".to_vec();
        extra.extend_from_slice(&3u32.to_le_bytes());
        extra.extend_from_slice(&[1, 2, 3, 0]);
        bytes.splice(36..36, extra);
        assert_eq!(decode_pcm16(&bytes, "x").unwrap().0, vec![5, 6]);
    }

    #[test]
    fn rejects_other_encodings() {
        let mut stereo = encode_pcm16(&[0, 0], 16000);
        stereo[22] = 2;
        assert!(matches!(decode_pcm16(&stereo, "x"), Err(WavError::Unsupported { .. })));
        let mut float = encode_pcm16(&[0, 0], 16000);
        float[20] = 3;
        assert!(matches!(decode_pcm16(&float, "x"), Err(WavError::Unsupported { .. })));
        assert!(matches!(decode_pcm16(b"garbage", "x"), Err(WavError::NotWave { .. })));
        let bytes = encode_pcm16(&[1, 2, 3], 16000);
        assert!(matches!(decode_pcm16(&bytes[..bytes.len() - 2], "x"), Err(WavError::Truncated { .. })));
    }
}
