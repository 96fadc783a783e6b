//! Speech front end: framing, MFCC + log-energy features, and corpus-level
//! feature normalization.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};

pub const SUPPORTED_RATES: [u32; 5] = [8000, 16000, 22050, 44100, 48000];
pub const MFCC_COUNT: usize = 40;
pub const MEL_FILTERS: usize = 40;
/// 40 cepstral coefficients followed by the log frame energy.
pub const FEATURE_DIM: usize = MFCC_COUNT + 1;
pub const PRE_EMPHASIS: f64 = 0.97;
pub const LOG_FLOOR: f64 = 1e-10;
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if !SUPPORTED_RATES.contains(&sample_rate) {
            return Err(Error::InvalidAudio(format!(
                "unsupported sample rate {sample_rate}"
            )));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidAudio(format!("sample {i} is not finite")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
}

/// One analysis window: the raw samples and their pre-emphasized, Hamming-windowed copy.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub raw: Vec<f64>,
    pub windowed: Vec<f64>,
}

/// Number of full frames of `window` samples taken every `hop` samples.
pub fn frame_count(samples: usize, window: usize, hop: usize) -> usize {
    if samples < window || hop == 0 {
        0
    } else {
        (samples - window) / hop + 1
    }
}

pub fn ms_to_samples(ms: f64, sample_rate: u32) -> usize {
    libm::round(ms * sample_rate as f64 / 1000.0) as usize
}

fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * libm::cos(2.0 * PI * n as f64 / (len - 1) as f64))
        .collect()
}

/// Cuts `audio` into overlapping frames; a trailing partial frame is dropped.
pub fn frame_and_window(audio: &AudioBuffer, window_ms: f64, hop_ms: f64) -> Result<Vec<Frame>> {
    if !(hop_ms > 0.0 && window_ms >= hop_ms) {
        return Err(Error::InvalidArgument {
            op: "frame_and_window",
            reason: format!("need window ≥ hop > 0, got {window_ms} / {hop_ms}"),
        });
    }
    let window = ms_to_samples(window_ms, audio.sample_rate);
    let hop = ms_to_samples(hop_ms, audio.sample_rate).max(1);
    let taper = hamming(window);
    let count = frame_count(audio.samples.len(), window, hop);
    let mut frames = Vec::with_capacity(count);
    for i in 0..count {
        let raw = audio.samples[i * hop..i * hop + window].to_vec();
        // Pre-emphasis restarts at every frame boundary.
        let windowed = raw
            .iter()
            .enumerate()
            .map(|(n, &s)| {
                let prev = if n == 0 { 0.0 } else { raw[n - 1] };
                let e = if n == 0 { s } else { s - PRE_EMPHASIS * prev };
                e * taper[n]
            })
            .collect();
        frames.push(Frame { raw, windowed });
    }
    Ok(frames)
}

/// In-place iterative radix-2 FFT; `re.len()` must be a power of two.
fn fft(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let angle = -2.0 * PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let (s, c) = (libm::sin(angle * k as f64), libm::cos(angle * k as f64));
                let (a, b) = (start + k, start + k + len / 2);
                let tr = re[b] * c - im[b] * s;
                let ti = re[b] * s + im[b] * c;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

/// `|X_k|²` for `k = 0..=n/2` of the zero-padded frame.
pub fn power_spectrum(frame: &[f64], fft_len: usize) -> Vec<f64> {
    let mut re = vec![0.0; fft_len];
    let mut im = vec![0.0; fft_len];
    re[..frame.len()].copy_from_slice(frame);
    fft(&mut re, &mut im);
    (0..=fft_len / 2).map(|k| re[k] * re[k] + im[k] * im[k]).collect()
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * libm::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (libm::pow(10.0, mel / 2595.0) - 1.0)
}

/// Triangular filters evenly spaced on the Mel scale from 0 Hz to Nyquist.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    weights: Vec<Vec<f64>>,
    centers: Vec<f64>,
    fft_len: usize,
}

impl MelFilterbank {
    pub fn new(filters: usize, fft_len: usize, sample_rate: u32) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..filters + 2)
            .map(|i| mel_to_hz(top * i as f64 / (filters + 1) as f64))
            .collect();
        let bins = fft_len / 2 + 1;
        let weights = (0..filters)
            .map(|j| {
                let (lo, mid, hi) = (edges[j], edges[j + 1], edges[j + 2]);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * sample_rate as f64 / fft_len as f64;
                        if f > lo && f <= mid {
                            (f - lo) / (mid - lo)
                        } else if f > mid && f < hi {
                            (hi - f) / (hi - mid)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            weights,
            centers: edges[1..=filters].to_vec(),
            fft_len,
        }
    }

    pub fn center_frequencies(&self) -> &[f64] {
        &self.centers
    }

    pub fn fft_len(&self) -> usize {
        self.fft_len
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(power).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Orthonormal DCT-II, keeping the first `keep` coefficients.
pub fn dct2_orthonormal(x: &[f64], keep: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..keep)
        .map(|k| {
            let scale = if k == 0 {
                libm::sqrt(1.0 / n)
            } else {
                libm::sqrt(2.0 / n)
            };
            scale
                * x.iter()
                    .enumerate()
                    .map(|(i, &v)| v * libm::cos(PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)))
                    .sum::<f64>()
        })
        .collect()
}

/// `T × dim` feature matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::InvalidArgument {
                op: "FeatureSequence",
                reason: format!("{} values do not form rows of {dim}", data.len()),
            });
        }
        Ok(Self { dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }
}

/// Per-frame MFCC c0..c39 followed by the log energy of the raw frame.
pub fn mfcc_with_energy(frames: &[Frame], sample_rate: u32) -> FeatureSequence {
    let Some(first) = frames.first() else {
        return FeatureSequence::empty(FEATURE_DIM);
    };
    let fft_len = first.windowed.len().next_power_of_two();
    let bank = MelFilterbank::new(MEL_FILTERS, fft_len, sample_rate);
    let mut data = Vec::with_capacity(frames.len() * FEATURE_DIM);
    for frame in frames {
        let mel = bank.apply(&power_spectrum(&frame.windowed, fft_len));
        let log_mel: Vec<f64> = mel.iter().map(|&e| libm::log(e.max(LOG_FLOOR))).collect();
        data.extend(dct2_orthonormal(&log_mel, MFCC_COUNT));
        let energy: f64 = frame.raw.iter().map(|s| s * s).sum();
        data.push(libm::log(energy.max(LOG_FLOOR)));
    }
    FeatureSequence {
        dim: FEATURE_DIM,
        data,
    }
}

/// 40 ms windows every 10 ms, then [`mfcc_with_energy`].
pub fn extract_features(audio: &AudioBuffer) -> Result<FeatureSequence> {
    let frames = frame_and_window(audio, 40.0, 10.0)?;
    Ok(mfcc_with_energy(&frames, audio.sample_rate))
}

/// Per-dimension mean and (floored) standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Population statistics over every frame of every sequence.
    pub fn compute<'a>(corpus: impl IntoIterator<Item = &'a FeatureSequence>) -> Result<Self> {
        let mut dim = None;
        let mut count = 0usize;
        let mut sum = Vec::new();
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        let seqs: Vec<&FeatureSequence> = corpus.into_iter().collect();
        for seq in &seqs {
            let d = *dim.get_or_insert(seq.dim);
            if d != seq.dim {
                return Err(Error::CountMismatch {
                    what: "feature dimensions",
                    left: d,
                    right: seq.dim,
                });
            }
            if sum.is_empty() {
                sum = vec![0.0; d];
                lo = vec![f64::INFINITY; d];
                hi = vec![f64::NEG_INFINITY; d];
            }
            for frame in seq.frames() {
                for (i, &v) in frame.iter().enumerate() {
                    sum[i] += v;
                    lo[i] = lo[i].min(v);
                    hi[i] = hi[i].max(v);
                }
                count += 1;
            }
        }
        let d = dim.ok_or(Error::EmptySequence)?;
        if count == 0 {
            return Err(Error::EmptySequence);
        }
        let mean: Vec<f64> = (0..d)
            .map(|i| {
                if lo[i] == hi[i] {
                    lo[i]
                } else {
                    sum[i] / count as f64
                }
            })
            .collect();
        let mut var = vec![0.0; d];
        for seq in &seqs {
            for frame in seq.frames() {
                for (i, &v) in frame.iter().enumerate() {
                    var[i] += (v - mean[i]) * (v - mean[i]);
                }
            }
        }
        let std = var
            .iter()
            .map(|v| libm::sqrt(v / count as f64).max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }
}

pub fn normalize_features(seq: &FeatureSequence, stats: &FeatureStats) -> Result<FeatureSequence> {
    if stats.dim() != seq.dim || stats.std.len() != seq.dim {
        return Err(Error::CountMismatch {
            what: "feature dimensions",
            left: seq.dim,
            right: stats.dim(),
        });
    }
    let data = seq
        .frames()
        .flat_map(|f| {
            f.iter()
                .enumerate()
                .map(|(i, &v)| (v - stats.mean[i]) / stats.std[i].max(STD_FLOOR))
        })
        .collect();
    Ok(FeatureSequence { dim: seq.dim, data })
}
