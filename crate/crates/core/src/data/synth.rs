//! Harmonic-plus-noise burst generator standing in for a recorded corpus.
//!
//! Each utterance has latent emotion intensities `v ∈ [0,1]^10`. They set the
//! levels of ten spectral bands, the attack and release of the amplitude
//! envelope, the pitch, and a tremolo. Each speaker has a style vector `u`
//! which, scaled by the idiosyncrasy strength κ, gives a per-band
//! expressivity gain and a pitch offset. A single utterance cannot separate
//! `v` from the speaker's gains; other utterances of the same speaker can.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::metrics::{resample_rng, EmotionScores, N_EMOTIONS};

/// Mixing matrix from speaker style to band gains comes from this fixed stream.
const STYLE_MIX_SEED: u64 = 0x5eed_0f_57_11e;
const BAND_LO_HZ: f64 = 220.0;
const BAND_HI_HZ: f64 = 5600.0;
const MAX_PARTIAL_HZ: f64 = 7600.0;
const OUTPUT_GAIN: f64 = 0.012;
const NOISE_LEVEL: f64 = 0.003;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub train_speakers: usize,
    pub dev_speakers: usize,
    pub test_speakers: usize,
    pub utterances_per_speaker: usize,
    /// Mean utterance duration in seconds.
    pub mean_duration: f64,
    /// Durations are uniform in `mean ± jitter`.
    pub duration_jitter: f64,
    pub style_dim: usize,
    /// Idiosyncrasy strength κ ∈ [0, 1].
    pub kappa: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train_speakers: 4,
            dev_speakers: 2,
            test_speakers: 2,
            utterances_per_speaker: 8,
            mean_duration: 2.23,
            duration_jitter: 0.8,
            style_dim: 3,
            kappa: 0.5,
            sample_rate: 16_000,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.train_speakers == 0 {
            return bad("synthetic.train_speakers must be at least 1".into());
        }
        if self.utterances_per_speaker < 2 {
            return bad("synthetic.utterances_per_speaker must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return bad(format!("synthetic.kappa must lie in [0, 1], got {}", self.kappa));
        }
        if !(self.duration_jitter >= 0.0 && self.mean_duration - self.duration_jitter > 0.1) {
            return bad(format!(
                "synthetic.mean_duration - duration_jitter must exceed 0.1 s, got {} - {}",
                self.mean_duration, self.duration_jitter
            ));
        }
        if self.style_dim == 0 {
            return bad("synthetic.style_dim must be at least 1".into());
        }
        if self.sample_rate < 2 * MAX_PARTIAL_HZ as u32 + 1 {
            return bad(format!(
                "synthetic.sample_rate must exceed {} Hz",
                2 * MAX_PARTIAL_HZ as u32
            ));
        }
        Ok(())
    }

    pub fn total_speakers(&self) -> usize {
        self.train_speakers + self.dev_speakers + self.test_speakers
    }

    pub fn sample_duration(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.duration_jitter == 0.0 {
            return self.mean_duration;
        }
        rng.gen_range(self.mean_duration - self.duration_jitter..=self.mean_duration + self.duration_jitter)
    }
}

/// Per-speaker constants derived from the style vector and κ.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerStyle {
    pub band_gain: [f64; N_EMOTIONS],
    pub pitch_factor: f64,
}

impl SpeakerStyle {
    pub fn new(style: &[f64], kappa: f64) -> Self {
        let mix = style_mix(style.len());
        let mut band_gain = [1.0; N_EMOTIONS];
        for (j, g) in band_gain.iter_mut().enumerate() {
            let drive: f64 = mix[j].iter().zip(style).map(|(w, u)| w * u).sum();
            *g = (kappa * 1.2 * drive.tanh()).exp();
        }
        SpeakerStyle {
            band_gain,
            pitch_factor: 2f64.powf(kappa * 0.6 * style[0]),
        }
    }

    pub fn neutral() -> Self {
        SpeakerStyle {
            band_gain: [1.0; N_EMOTIONS],
            pitch_factor: 1.0,
        }
    }
}

fn style_mix(dim: usize) -> Vec<Vec<f64>> {
    let mut rng = resample_rng(STYLE_MIX_SEED, dim as u64);
    let scale = (3.0 / dim as f64).sqrt();
    (0..N_EMOTIONS)
        .map(|_| (0..dim).map(|_| rng.gen_range(-scale..=scale)).collect())
        .collect()
}

/// Acoustic parameters of one burst; every field is affine in `v` given the style.
#[derive(Clone, Debug, PartialEq)]
pub struct BurstParams {
    pub samples: usize,
    pub f0: f64,
    pub band_level: [f64; N_EMOTIONS],
    pub attack: f64,
    pub release: f64,
    pub tremolo_rate: f64,
    pub tremolo_depth: f64,
}

impl BurstParams {
    pub fn from_latent(v: &EmotionScores, speaker: &SpeakerStyle, duration: f64, sample_rate: u32) -> Self {
        let v = v.map(f64::from);
        let mut band_level = [0.0; N_EMOTIONS];
        for j in 0..N_EMOTIONS {
            band_level[j] = 0.04 + speaker.band_gain[j] * v[j];
        }
        BurstParams {
            samples: (duration * sample_rate as f64).round() as usize,
            f0: speaker.pitch_factor * (150.0 + 90.0 * v[4] + 60.0 * v[8] - 40.0 * v[7]),
            band_level,
            attack: 0.02 + 0.25 * v[1],
            release: 0.08 + 0.5 * v[7],
            tremolo_rate: 3.0 + 6.0 * v[0],
            tremolo_depth: 0.6 * v[0],
        }
    }
}

pub fn band_centres() -> [f64; N_EMOTIONS] {
    let mut c = [0.0; N_EMOTIONS];
    for (j, f) in c.iter_mut().enumerate() {
        *f = BAND_LO_HZ * (BAND_HI_HZ / BAND_LO_HZ).powf(j as f64 / (N_EMOTIONS - 1) as f64);
    }
    c
}

fn envelope_at(freq: f64, levels: &[f64; N_EMOTIONS], centres: &[f64; N_EMOTIONS]) -> f64 {
    // Gaussian bumps on log2 frequency, one band spacing wide.
    let spacing = (BAND_HI_HZ / BAND_LO_HZ).log2() / (N_EMOTIONS - 1) as f64;
    levels
        .iter()
        .zip(centres)
        .map(|(l, c)| {
            let d = (freq / c).log2() / (0.5 * spacing);
            l * (-0.5 * d * d).exp()
        })
        .sum()
}

/// Renders a burst. `noise` only drives the additive noise floor.
pub fn render(p: &BurstParams, sample_rate: u32, noise: &mut ChaCha8Rng) -> Vec<f32> {
    let sr = sample_rate as f64;
    let centres = band_centres();
    let mut partials: Vec<(f64, f64)> = Vec::new();
    let mut k = 1.0;
    while k * p.f0 < MAX_PARTIAL_HZ {
        let f = k * p.f0;
        partials.push((f, 0.5 * envelope_at(f, &p.band_level, &centres) / k.sqrt()));
        k += 1.0;
    }
    for (j, c) in centres.iter().enumerate() {
        for detune in [0.97, 1.0, 1.03] {
            partials.push((c * detune, 0.35 * p.band_level[j]));
        }
    }
    let duration = p.samples as f64 / sr;
    (0..p.samples)
        .map(|n| {
            let t = n as f64 / sr;
            let env = (t / p.attack).min((duration - t) / p.release).clamp(0.0, 1.0);
            let trem = 1.0 - p.tremolo_depth * 0.5 * (1.0 - (2.0 * PI * p.tremolo_rate * t).cos());
            let tone: f64 = partials.iter().map(|(f, a)| a * (2.0 * PI * f * t).sin()).sum();
            let s = OUTPUT_GAIN * env * trem * tone + NOISE_LEVEL * noise.gen_range(-1.0..=1.0);
            s.clamp(-1.0, 1.0) as f32
        })
        .collect()
}

/// Draws one utterance's latent intensities uniformly from the unit cube.
pub fn draw_latent(rng: &mut ChaCha8Rng) -> EmotionScores {
    let mut v = [0.0f32; N_EMOTIONS];
    for x in v.iter_mut() {
        *x = rng.gen_range(0.0..=1.0);
    }
    v
}

pub fn draw_style(cfg: &SyntheticConfig, speaker_index: usize) -> Vec<f64> {
    let mut rng = resample_rng(cfg.seed, (1u64 << 40) + speaker_index as u64);
    (0..cfg.style_dim).map(|_| rng.gen_range(-1.0..=1.0)).collect()
}

pub fn synthesize_utterance(
    cfg: &SyntheticConfig,
    speaker: &SpeakerStyle,
    utterance_index: usize,
) -> Result<(Waveform, EmotionScores)> {
    let mut rng = resample_rng(cfg.seed, utterance_index as u64);
    let v = draw_latent(&mut rng);
    let duration = cfg.sample_duration(&mut rng);
    let params = BurstParams::from_latent(&v, speaker, duration, cfg.sample_rate);
    let samples = render(&params, cfg.sample_rate, &mut rng);
    Ok((Waveform::new(samples, cfg.sample_rate)?, v))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::dsp::{FeatureConfig, LogMelExtractor};

    fn mean_abs_logmel_diff(a: &[f32], b: &[f32]) -> f64 {
        let ex = LogMelExtractor::new(&FeatureConfig::desk()).unwrap();
        let (x, y) = (ex.extract(a).unwrap(), ex.extract(b).unwrap());
        x.values.iter().zip(&y.values).map(|(p, q)| (p - q).abs() as f64).sum::<f64>()
            / x.values.len() as f64
    }

    #[test]
    fn zero_kappa_removes_speaker_differences() {
        let v = [0.3, 0.9, 0.1, 0.5, 0.6, 0.2, 0.7, 0.4, 0.8, 0.05];
        let render_for = |style: &[f64], kappa: f64, noise_seed: u64| {
            let spk = SpeakerStyle::new(style, kappa);
            let p = BurstParams::from_latent(&v, &spk, 2.0, 16_000);
            render(&p, 16_000, &mut ChaCha8Rng::seed_from_u64(noise_seed))
        };
        let (u1, u2) = ([0.9, -0.4, 0.2], [-0.7, 0.8, -0.5]);
        assert_eq!(SpeakerStyle::new(&u1, 0.0), SpeakerStyle::neutral());
        assert_eq!(render_for(&u1, 0.0, 1), render_for(&u2, 0.0, 1));
        let same = mean_abs_logmel_diff(&render_for(&u1, 0.0, 1), &render_for(&u2, 0.0, 2));
        let apart = mean_abs_logmel_diff(&render_for(&u1, 0.8, 1), &render_for(&u2, 0.8, 2));
        assert!(apart > 4.0 * same, "{apart} vs {same}");
    }

    #[test]
    fn mean_duration_matches_target() {
        let cfg = SyntheticConfig::default();
        let mean = (0..500)
            .map(|i| cfg.sample_duration(&mut resample_rng(7, i)))
            .sum::<f64>()
            / 500.0;
        assert!((mean - 2.23).abs() < 0.1, "{mean}");
    }

    #[test]
    fn output_stays_in_range_and_finite() {
        let cfg = SyntheticConfig {
            kappa: 1.0,
            ..Default::default()
        };
        let spk = SpeakerStyle::new(&[1.0, 1.0, 1.0], 1.0);
        let p = BurstParams::from_latent(&[1.0; N_EMOTIONS], &spk, 1.0, cfg.sample_rate);
        let s = render(&p, cfg.sample_rate, &mut ChaCha8Rng::seed_from_u64(0));
        let peak = s.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(peak < 1.0, "clipping at {peak}");
        assert!(peak > 0.05);
    }

    #[test]
    fn band_level_is_visible_in_features() {
        let spk = SpeakerStyle::neutral();
        let ex = LogMelExtractor::new(&FeatureConfig::desk()).unwrap();
        let energy = |level: f32| {
            let mut v = [0.2; N_EMOTIONS];
            v[6] = level;
            let p = BurstParams::from_latent(&v, &spk, 1.5, 16_000);
            let s = render(&p, 16_000, &mut ChaCha8Rng::seed_from_u64(3));
            let lm = ex.extract(&s).unwrap();
            lm.values.iter().map(|&x| x as f64).sum::<f64>()
        };
        assert!(energy(0.9) > energy(0.1));
    }

    #[test]
    fn invalid_kappa_is_rejected() {
        let cfg = SyntheticConfig {
            kappa: 1.5,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("kappa")));
    }
}
