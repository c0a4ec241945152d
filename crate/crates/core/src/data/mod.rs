//! Corpus model, on-disk layout, and enrolment sampling.
//!
//! A corpus directory holds a `manifest` file and a `wav/` subdirectory. The
//! manifest is UTF-8, tab-separated, one utterance per line after a header:
//!
//! ```text
//! id  wav  speaker  split  Amusement  Awe  ...  Triumph
//! ```
//!
//! `wav` is relative to the corpus directory, `split` is `train`, `dev` or
//! `test`, and the ten scores are raw intensities in `[1, 100]`. Manifest
//! order is significant: evaluation enrolment takes each speaker's first two
//! utterances in that order.

mod sampling;
pub mod synth;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dsp::{read_wav, write_wav, Waveform};
use crate::error::{Error, Result};
use crate::metrics::{EmotionScores, EMOTIONS, N_EMOTIONS};

pub use sampling::{
    batch_indices, crop_or_pad, crop_samples, dev_enrolment, eval_pad_pair, make_batches,
    sample_enrolment_train, EnrolmentPair, TrainItem, CROP_SECONDS,
};
pub use synth::SyntheticConfig;

pub const MANIFEST_FILE: &str = "manifest";
pub const WAV_DIR: &str = "wav";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
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
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

/// Maps a raw `[1, 100]` score onto the `[0, 1]` label space.
pub fn normalise_score(raw: f64) -> f32 {
    ((raw - 1.0) / 99.0) as f32
}

pub fn raw_score(label: f32) -> f64 {
    1.0 + 99.0 * label as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: String,
    /// Path of the WAV file relative to the corpus root.
    pub wav: String,
    pub split: Split,
    pub waveform: Waveform,
    /// Normalised to `[0, 1]`.
    pub scores: EmotionScores,
    /// Position in the manifest.
    pub order: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub sample_rate: u32,
    /// Not necessarily in manifest order; see [`Utterance::order`].
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn new(sample_rate: u32, utterances: Vec<Utterance>) -> Result<Self> {
        let mut seen = HashMap::new();
        for u in &utterances {
            if u.waveform.sample_rate != sample_rate {
                return Err(Error::Data(format!(
                    "utterance {} is at {} Hz, corpus at {sample_rate} Hz",
                    u.id, u.waveform.sample_rate
                )));
            }
            if let Some(prev) = seen.insert(u.id.as_str(), u.order) {
                return Err(Error::Data(format!(
                    "duplicate utterance id {} (records {prev} and {})",
                    u.id, u.order
                )));
            }
            if u.scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
                return Err(Error::Data(format!("utterance {} has scores outside [0, 1]", u.id)));
            }
        }
        Ok(Corpus {
            sample_rate,
            utterances,
        })
    }

    /// Generates the synthetic corpus in memory; a pure function of `cfg`.
    pub fn generate(cfg: &SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        let splits = [
            (Split::Train, cfg.train_speakers),
            (Split::Dev, cfg.dev_speakers),
            (Split::Test, cfg.test_speakers),
        ];
        let mut utterances = Vec::new();
        let mut speaker_index = 0;
        for (split, count) in splits {
            for _ in 0..count {
                let speaker_id = format!("spk{speaker_index:03}");
                let style = synth::SpeakerStyle::new(&synth::draw_style(cfg, speaker_index), cfg.kappa);
                for k in 0..cfg.utterances_per_speaker {
                    let order = utterances.len();
                    let (waveform, v) = synth::synthesize_utterance(cfg, &style, order)?;
                    let id = format!("{speaker_id}_{k:02}");
                    utterances.push(Utterance {
                        wav: format!("{WAV_DIR}/{id}.wav"),
                        id,
                        speaker_id: speaker_id.clone(),
                        split,
                        waveform,
                        scores: v.map(|x| normalise_score(raw_score(x))),
                        order,
                    });
                }
                speaker_index += 1;
            }
        }
        Corpus::new(cfg.sample_rate, utterances)
    }

    /// Writes the manifest and WAV files under `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let wav_dir = dir.join(WAV_DIR);
        fs::create_dir_all(&wav_dir).map_err(|e| Error::io(wav_dir.clone(), e))?;
        for u in self.in_manifest_order() {
            write_wav(&dir.join(&u.wav), &u.waveform)?;
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.manifest_text()).map_err(|e| Error::io(path, e))
    }

    pub fn manifest_text(&self) -> String {
        let mut out = String::from("id\twav\tspeaker\tsplit");
        for name in EMOTIONS {
            out.push('\t');
            out.push_str(name);
        }
        out.push('\n');
        for u in self.in_manifest_order() {
            out.push_str(&format!("{}\t{}\t{}\t{}", u.id, u.wav, u.speaker_id, u.split));
            for s in u.scores {
                out.push_str(&format!("\t{}", raw_score(s)));
            }
            out.push('\n');
        }
        out
    }

    pub fn load(dir: &Path, sample_rate: u32) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(path.clone(), e))?;
        let records = parse_manifest(&text)?;
        let mut utterances = Vec::with_capacity(records.len());
        for (order, r) in records.into_iter().enumerate() {
            let waveform = read_wav(&resolve(dir, &r.wav)?, sample_rate)?;
            utterances.push(Utterance {
                id: r.id,
                speaker_id: r.speaker,
                wav: r.wav,
                split: r.split,
                waveform,
                scores: r.scores,
                order,
            });
        }
        Corpus::new(sample_rate, utterances)
    }

    pub fn in_manifest_order(&self) -> Vec<&Utterance> {
        let mut v: Vec<&Utterance> = self.utterances.iter().collect();
        v.sort_by_key(|u| u.order);
        v
    }

    /// Utterances of one split in manifest order.
    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.in_manifest_order().into_iter().filter(|u| u.split == split).collect()
    }

    /// Speakers of one split in order of first appearance in the manifest.
    pub fn speakers(&self, split: Split) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for u in self.split(split) {
            if !out.contains(&u.speaker_id.as_str()) {
                out.push(&u.speaker_id);
            }
        }
        out
    }

    pub fn speaker_utterances(&self, split: Split, speaker: &str) -> Vec<&Utterance> {
        self.split(split).into_iter().filter(|u| u.speaker_id == speaker).collect()
    }

    pub fn mean_duration(&self) -> f64 {
        if self.utterances.is_empty() {
            return 0.0;
        }
        self.utterances.iter().map(|u| u.waveform.duration_secs()).sum::<f64>()
            / self.utterances.len() as f64
    }
}

fn resolve(dir: &Path, rel: &str) -> Result<PathBuf> {
    let p = Path::new(rel);
    if p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(Error::Data(format!("wav path {rel:?} must stay inside the corpus directory")));
    }
    Ok(dir.join(p))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub wav: String,
    pub speaker: String,
    pub split: Split,
    pub scores: EmotionScores,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Data("manifest is empty".into()))?;
    let expected: Vec<&str> = ["id", "wav", "speaker", "split"]
        .into_iter()
        .chain(EMOTIONS)
        .collect();
    let got: Vec<&str> = header.split('\t').collect();
    if got != expected {
        return Err(Error::Data(format!(
            "manifest header must be {:?}, got {got:?}",
            expected.join("\t")
        )));
    }
    lines
        .map(|(i, line)| {
            let line_no = i + 1;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 + N_EMOTIONS {
                return Err(Error::Data(format!(
                    "manifest line {line_no}: expected {} fields, got {}",
                    4 + N_EMOTIONS,
                    fields.len()
                )));
            }
            let mut scores = [0.0f32; N_EMOTIONS];
            for (j, raw) in fields[4..].iter().enumerate() {
                let v: f64 = raw.parse().map_err(|_| {
                    Error::Data(format!("manifest line {line_no}: {} score {raw:?} is not a number", EMOTIONS[j]))
                })?;
                if !(1.0..=100.0).contains(&v) {
                    return Err(Error::Data(format!(
                        "manifest line {line_no}: {} score {v} outside [1, 100]",
                        EMOTIONS[j]
                    )));
                }
                scores[j] = normalise_score(v);
            }
            Ok(ManifestRecord {
                id: fields[0].to_string(),
                wav: fields[1].to_string(),
                speaker: fields[2].to_string(),
                split: fields[3]
                    .parse()
                    .map_err(|_| Error::Data(format!("manifest line {line_no}: unknown split {:?}", fields[3])))?,
                scores,
            })
        })
        .collect()
}
