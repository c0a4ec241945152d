use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Corpus, Split, Utterance};
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::metrics::{EmotionScores, N_EMOTIONS};

/// Training crops and pads every waveform to this length.
pub const CROP_SECONDS: f64 = 2.5;

/// Two utterances of one speaker.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnrolmentPair<'a> {
    pub first: &'a Utterance,
    pub second: &'a Utterance,
}

impl<'a> EnrolmentPair<'a> {
    pub fn new(first: &'a Utterance, second: &'a Utterance) -> Result<Self> {
        if first.speaker_id != second.speaker_id {
            return Err(Error::Data(format!(
                "enrolment pair mixes speakers {} and {}",
                first.speaker_id, second.speaker_id
            )));
        }
        if first.id == second.id {
            return Err(Error::Data(format!("enrolment pair repeats utterance {}", first.id)));
        }
        Ok(EnrolmentPair { first, second })
    }

    pub fn ids(&self) -> (&str, &str) {
        (&self.first.id, &self.second.id)
    }

    /// Mean label of the pair, the target of the enrolment-side emotion head.
    pub fn mean_scores(&self) -> EmotionScores {
        let mut out = [0.0; N_EMOTIONS];
        for (j, o) in out.iter_mut().enumerate() {
            *o = 0.5 * (self.first.scores[j] + self.second.scores[j]);
        }
        out
    }
}

/// Uniform unordered pair from one speaker's training utterances.
///
/// `exclude` (the current target) is left out when the speaker has at least
/// three utterances.
pub fn sample_enrolment_train<'a>(
    speaker: &str,
    pool: &[&'a Utterance],
    exclude: Option<&str>,
    rng: &mut ChaCha8Rng,
) -> Result<EnrolmentPair<'a>> {
    if pool.len() < 2 {
        return Err(Error::Data(format!(
            "speaker {speaker} has {} training utterance(s); enrolment needs 2",
            pool.len()
        )));
    }
    let candidates: Vec<&Utterance> = match exclude {
        Some(id) if pool.len() >= 3 => pool.iter().copied().filter(|u| u.id != id).collect(),
        _ => pool.to_vec(),
    };
    let picked = sample(rng, candidates.len(), 2);
    EnrolmentPair::new(candidates[picked.index(0)], candidates[picked.index(1)])
}

/// The speaker's first two utterances of `split` in manifest order.
pub fn dev_enrolment<'a>(corpus: &'a Corpus, split: Split, speaker: &str) -> Result<EnrolmentPair<'a>> {
    let utts = corpus.speaker_utterances(split, speaker);
    if utts.len() < 2 {
        return Err(Error::Data(format!(
            "speaker {speaker} has {} {split} utterance(s); enrolment needs 2",
            utts.len()
        )));
    }
    EnrolmentPair::new(utts[0], utts[1])
}

pub fn crop_samples(sample_rate: u32) -> usize {
    (CROP_SECONDS * sample_rate as f64).round() as usize
}

/// Random contiguous crop when longer than `target`, random lead/trail zero
/// padding when shorter.
pub fn crop_or_pad(w: &Waveform, target: usize, rng: &mut ChaCha8Rng) -> Result<Waveform> {
    let len = w.samples.len();
    if len == 0 {
        return Err(Error::Data("cannot crop an empty waveform".into()));
    }
    let samples = if len > target {
        let start = rng.gen_range(0..=len - target);
        w.samples[start..start + target].to_vec()
    } else {
        let deficit = target - len;
        let lead = rng.gen_range(0..=deficit);
        let mut out = vec![0.0; target];
        out[lead..lead + len].copy_from_slice(&w.samples);
        out
    };
    Waveform::new(samples, w.sample_rate)
}

/// Pads the shorter waveform with trailing zeros to the longer one's length.
pub fn eval_pad_pair(a: &Waveform, b: &Waveform) -> (Waveform, Waveform) {
    let len = a.len().max(b.len());
    let pad = |w: &Waveform| {
        let mut s = w.samples.clone();
        s.resize(len, 0.0);
        Waveform {
            samples: s,
            sample_rate: w.sample_rate,
        }
    };
    (pad(a), pad(b))
}

/// Shuffled batches over `0..n`. A trailing singleton is merged into the
/// previous batch, or any short tail is dropped with `drop_last`.
pub fn batch_indices(n: usize, batch_size: usize, drop_last: bool, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Data("cannot batch an empty split".into()));
    }
    if batch_size < 2 {
        return Err(Error::Config(format!("batch_size must be at least 2, got {batch_size}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    let tail = batches.last().map_or(0, Vec::len);
    if tail < batch_size {
        if drop_last {
            batches.pop();
        } else if tail == 1 {
            if batches.len() < 2 {
                return Err(Error::Data("a batch needs at least 2 utterances".into()));
            }
            let single = batches.pop().unwrap();
            batches.last_mut().unwrap().extend(single);
        }
    }
    if batches.is_empty() {
        return Err(Error::Data(format!(
            "{n} utterance(s) fill no complete batch of {batch_size}"
        )));
    }
    Ok(batches)
}

/// One training instance: target, its speaker index, and a fresh enrolment pair.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub target: &'a Utterance,
    pub speaker: usize,
    pub enrolment: Option<EnrolmentPair<'a>>,
}

/// One epoch of training batches over the train split.
pub fn make_batches<'a>(
    corpus: &'a Corpus,
    batch_size: usize,
    drop_last: bool,
    with_enrolment: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<TrainItem<'a>>>> {
    let train = corpus.split(Split::Train);
    let speakers = corpus.speakers(Split::Train);
    let pools: Vec<Vec<&Utterance>> = speakers
        .iter()
        .map(|s| train.iter().copied().filter(|u| u.speaker_id == *s).collect())
        .collect();
    let batches = batch_indices(train.len(), batch_size, drop_last, rng)?;
    batches
        .into_iter()
        .map(|idx| {
            idx.into_iter()
                .map(|i| {
                    let target = train[i];
                    let speaker = speakers.iter().position(|s| *s == target.speaker_id).unwrap();
                    let enrolment = if with_enrolment {
                        Some(sample_enrolment_train(
                            &target.speaker_id,
                            &pools[speaker],
                            Some(&target.id),
                            rng,
                        )?)
                    } else {
                        None
                    };
                    Ok(TrainItem {
                        target,
                        speaker,
                        enrolment,
                    })
                })
                .collect()
        })
        .collect()
}
