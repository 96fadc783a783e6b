//! 16-bit PCM RIFF/WAVE reading (mono or multi-channel, averaged) and writing.

use std::fs;
use std::path::Path;

use s2t_core::audio::AudioBuffer;

use crate::binio::Reader;
use crate::error::FormatError;

const PCM: u16 = 1;
const EXTENSIBLE: u16 = 0xfffe;

pub fn load_pcm_wav(path: &Path) -> Result<AudioBuffer, FormatError> {
    parse_pcm_wav(&fs::read(path)?)
}

pub fn parse_pcm_wav(bytes: &[u8]) -> Result<AudioBuffer, FormatError> {
    let mut r = Reader::new(bytes);
    if r.bytes(4, "RIFF header")? != b"RIFF" {
        return Err(FormatError::BadMagic {
            expected: "RIFF/WAVE",
        });
    }
    r.u32("RIFF size")?;
    if r.bytes(4, "RIFF header")? != b"WAVE" {
        return Err(FormatError::BadMagic {
            expected: "RIFF/WAVE",
        });
    }
    let mut format = None;
    let mut data = None;
    while !r.is_empty() && data.is_none() {
        let id = r.bytes(4, "chunk id")?;
        let len = r.u32("chunk size")? as usize;
        match id {
            b"fmt " => {
                let body = r.bytes(len, "fmt chunk")?;
                let mut f = Reader::new(body);
                let tag = f.u16("fmt chunk")?;
                let channels = f.u16("fmt chunk")?;
                let rate = f.u32("fmt chunk")?;
                f.u32("fmt chunk")?;
                f.u16("fmt chunk")?;
                let bits = f.u16("fmt chunk")?;
                let tag = if tag == EXTENSIBLE && len >= 26 {
                    f.u16("fmt extension")?;
                    f.u16("fmt extension")?;
                    f.u32("fmt extension")?;
                    f.u16("fmt extension")?
                } else {
                    tag
                };
                format = Some((tag, channels, rate, bits));
            }
            b"data" => {
                // Some writers leave the size unset; take whatever follows.
                let len = len.min(bytes.len() - r.position());
                data = Some(r.bytes(len, "data chunk")?);
            }
            _ => {
                r.bytes(len, "chunk")?;
            }
        }
        if len % 2 == 1 && data.is_none() && !r.is_empty() {
            r.u8("chunk padding")?;
        }
    }
    let (tag, channels, rate, bits) =
        format.ok_or_else(|| FormatError::Malformed("missing fmt chunk".into()))?;
    if tag != PCM {
        return Err(FormatError::UnsupportedEncoding(format!(
            "format tag {tag}, only PCM is read"
        )));
    }
    if bits != 16 {
        return Err(FormatError::UnsupportedEncoding(format!(
            "{bits}-bit samples, only 16-bit is read"
        )));
    }
    if channels == 0 {
        return Err(FormatError::Malformed("zero channels".into()));
    }
    let data = data.ok_or_else(|| FormatError::Malformed("missing data chunk".into()))?;
    let frame_bytes = 2 * channels as usize;
    if data.len() < frame_bytes {
        return Err(FormatError::Malformed("empty data chunk".into()));
    }
    let samples = data
        .chunks_exact(frame_bytes)
        .map(|frame| {
            let sum: f64 = frame
                .chunks_exact(2)
                .map(|s| i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0)
                .sum();
            sum / channels as f64
        })
        .collect();
    Ok(AudioBuffer::new(samples, rate)?)
}

/// Mono 16-bit PCM; samples are clamped to [-1, 1).
pub fn encode_pcm_wav(samples: &[f64], sample_rate: u32) -> Vec<u8> {
    let data_len = 2 * samples.len() as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(2 * sample_rate).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_pcm_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<(), FormatError> {
    Ok(fs::write(path, encode_pcm_wav(samples, sample_rate))?)
}
