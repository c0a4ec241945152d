//! Log-Mel front end shared by both encoders.

mod wav;

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use wav::{read_wav, write_wav};

/// Floor applied to filterbank energies before taking the log.
pub const POWER_FLOOR: f32 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("waveform must contain at least one sample".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl FeatureConfig {
    /// CNN14-style front end: 16 kHz, 1024-point FFT, hop 320, 64 bands.
    pub fn paper() -> Self {
        FeatureConfig {
            sample_rate: 16_000,
            n_fft: 1024,
            hop: 320,
            n_mels: 64,
            fmin: 50.0,
            fmax: 8000.0,
        }
    }

    /// Smaller tensors for desk-scale runs.
    pub fn desk() -> Self {
        FeatureConfig {
            n_mels: 32,
            hop: 512,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.n_fft < 2 || self.hop == 0 || self.n_mels == 0 {
            return Err(Error::Config(format!(
                "sample_rate, n_fft (>=2), hop and n_mels must be positive: {self:?}"
            )));
        }
        check_band(self.sample_rate, self.fmin, self.fmax)
    }

    /// Number of frames produced from `len` samples (`len >= n_fft`).
    pub fn frames_for(&self, len: usize) -> usize {
        1 + (len - self.n_fft) / self.hop
    }
}

fn check_band(sample_rate: u32, fmin: f64, fmax: f64) -> Result<()> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(0.0 <= fmin && fmin < fmax && fmax <= nyquist) {
        return Err(Error::Config(format!(
            "mel band edges must satisfy 0 <= fmin < fmax <= {nyquist}, got ({fmin}, {fmax})"
        )));
    }
    Ok(())
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()) as f32)
        .collect()
}

/// Short-time Fourier transform with a Hann window and no centre padding.
///
/// Frame `t` covers samples `[t·hop, t·hop + n_fft)`; each frame holds the
/// one-sided spectrum, `n_fft/2 + 1` bins.
pub struct Stft {
    n_fft: usize,
    hop: usize,
    window: Vec<f32>,
    fft: Arc<dyn Fft<f32>>,
}

impl Stft {
    pub fn new(n_fft: usize, hop: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Stft {
            n_fft,
            hop,
            window: hann(n_fft),
            fft,
        }
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frames(&self, samples: &[f32]) -> Result<Vec<Vec<Complex<f32>>>> {
        if samples.len() < self.n_fft {
            return Err(Error::InputTooShort {
                len: samples.len(),
                needed: self.n_fft,
            });
        }
        let count = 1 + (samples.len() - self.n_fft) / self.hop;
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut out = Vec::with_capacity(count);
        for t in 0..count {
            let frame = &samples[t * self.hop..t * self.hop + self.n_fft];
            for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = Complex::new(s * w, 0.0);
            }
            self.fft.process(&mut buf);
            out.push(buf[..self.bins()].to_vec());
        }
        Ok(out)
    }

    pub fn power(&self, samples: &[f32]) -> Result<Vec<Vec<f32>>> {
        Ok(self
            .frames(samples)?
            .into_iter()
            .map(|f| f.iter().map(|c| c.norm_sqr()).collect())
            .collect())
    }
}

pub fn stft(samples: &[f32], n_fft: usize, hop: usize) -> Result<Vec<Vec<Complex<f32>>>> {
    Stft::new(n_fft, hop).frames(samples)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters with centres evenly spaced on the mel scale.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    bins: usize,
    centers_hz: Vec<f64>,
    /// Per filter: first FFT bin with non-zero weight and the weights from there on.
    filters: Vec<(usize, Vec<f32>)>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Result<Self> {
        check_band(sample_rate, fmin, fmax)?;
        if n_mels == 0 || n_fft < 2 {
            return Err(Error::Config("n_mels and n_fft must be positive".into()));
        }
        let bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = |k: usize| k as f64 * sample_rate as f64 / n_fft as f64;
        let filters = (0..n_mels)
            .map(|m| {
                let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
                let weights: Vec<f32> = (0..bins)
                    .map(|k| {
                        let f = bin_hz(k);
                        let up = (f - left) / (center - left);
                        let down = (right - f) / (right - center);
                        up.min(down).max(0.0) as f32
                    })
                    .collect();
                let first = weights.iter().position(|&w| w > 0.0).unwrap_or(0);
                let last = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
                (first, weights[first..=last.max(first)].to_vec())
            })
            .collect();
        Ok(MelFilterbank {
            bins,
            centers_hz: edges[1..=n_mels].to_vec(),
            filters,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.filters.len()
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Dense `n_mels × (n_fft/2+1)` weight matrix.
    pub fn matrix(&self) -> Vec<Vec<f32>> {
        self.filters
            .iter()
            .map(|(first, w)| {
                let mut row = vec![0.0; self.bins];
                row[*first..first + w.len()].copy_from_slice(w);
                row
            })
            .collect()
    }

    pub fn apply(&self, power: &[f32], out: &mut [f32]) {
        for ((first, w), o) in self.filters.iter().zip(out.iter_mut()) {
            *o = w.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum();
        }
    }
}

/// Natural-log Mel energies, frames × mel bins, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMel {
    pub frames: usize,
    pub mel_bins: usize,
    pub values: Vec<f32>,
}

impl LogMel {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.mel_bins..(t + 1) * self.mel_bins]
    }
}

/// Reusable STFT plan plus filterbank for one [`FeatureConfig`].
pub struct LogMelExtractor {
    config: FeatureConfig,
    stft: Stft,
    filterbank: MelFilterbank,
}

impl LogMelExtractor {
    pub fn new(config: &FeatureConfig) -> Result<Self> {
        config.validate()?;
        Ok(LogMelExtractor {
            stft: Stft::new(config.n_fft, config.hop),
            filterbank: MelFilterbank::new(
                config.sample_rate,
                config.n_fft,
                config.n_mels,
                config.fmin,
                config.fmax,
            )?,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn extract(&self, samples: &[f32]) -> Result<LogMel> {
        let power = self.stft.power(samples)?;
        let n_mels = self.filterbank.n_mels();
        let mut values = vec![0.0; power.len() * n_mels];
        for (frame, out) in power.iter().zip(values.chunks_mut(n_mels)) {
            self.filterbank.apply(frame, out);
            for v in out.iter_mut() {
                *v = v.max(POWER_FLOOR).ln();
            }
        }
        Ok(LogMel {
            frames: power.len(),
            mel_bins: n_mels,
            values,
        })
    }
}

pub fn logmel(w: &Waveform, config: &FeatureConfig) -> Result<LogMel> {
    if w.sample_rate != config.sample_rate {
        return Err(Error::Config(format!(
            "waveform at {} Hz, features configured for {} Hz",
            w.sample_rate, config.sample_rate
        )));
    }
    LogMelExtractor::new(config)?.extract(&w.samples)
}

/// Corpus-level standardisation: one mean and standard deviation over every
/// cell of the training features.
///
/// A single scale keeps floored (silent) cells at a moderate distance from
/// speech in every bin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normaliser {
    pub mean: f32,
    pub std: f32,
}

impl Normaliser {
    pub fn fit<'a>(features: impl IntoIterator<Item = &'a LogMel>) -> Result<Self> {
        let (mut sum, mut sq, mut count) = (0.0f64, 0.0f64, 0usize);
        for lm in features {
            for &v in &lm.values {
                sum += v as f64;
                sq += v as f64 * v as f64;
            }
            count += lm.values.len();
        }
        if count == 0 {
            return Err(Error::Data("cannot fit a normaliser on zero frames".into()));
        }
        let n = count as f64;
        let mean = sum / n;
        let std = (sq / n - mean * mean).max(0.0).sqrt().max(1e-5);
        Ok(Normaliser {
            mean: mean as f32,
            std: std as f32,
        })
    }

    pub fn identity() -> Self {
        Normaliser { mean: 0.0, std: 1.0 }
    }

    pub fn apply(&self, lm: &mut LogMel) {
        for v in &mut lm.values {
            *v = (*v - self.mean) / self.std;
        }
    }
}
