//! Epoch loop, best-checkpoint selection and evaluation.

mod optim;
mod schedule;

use std::path::{Path, PathBuf};

use log::{debug, info};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GrlSetting, Tensor, Var};
use crate::data::{self, crop_or_pad, crop_samples, dev_enrolment, eval_pad_pair, Corpus, Split, TrainItem};
use crate::dsp::{FeatureConfig, LogMel, LogMelExtractor, Normaliser};
use crate::error::{Error, Result};
use crate::metrics::{self, c_hat, EmotionScores, EvalReport, N_EMOTIONS};
use crate::model::{logmel_batch, Checkpoint, Mode, Model, ModelConfig, Profile, VariantSpec};

pub use optim::{sgd_nesterov_step, NesterovSgd};
pub use schedule::{GrlSchedule, PlateauLr};

pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Minimum gain that counts as an improvement of the monitored score.
    pub plateau_threshold: f64,
    pub grl_hold: usize,
    pub grl_end: usize,
    /// Use the ramp value itself as the reversal multiplier.
    pub grl_raw_sign: bool,
    pub drop_last: bool,
    /// Split scored at the end of every epoch for LR scheduling and model selection.
    pub monitor: Split,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            batch_size: 8,
            lr: 0.001,
            momentum: 0.9,
            plateau_factor: 0.1,
            plateau_patience: 5,
            plateau_threshold: 1e-6,
            grl_hold: 10,
            grl_end: 60,
            grl_raw_sign: false,
            drop_last: false,
            monitor: Split::Dev,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self::default(),
            Profile::Desk => TrainConfig {
                epochs: 40,
                grl_hold: 3,
                grl_end: 20,
                ..Self::default()
            },
        }
    }

    pub fn grl_schedule(&self) -> GrlSchedule {
        GrlSchedule {
            hold: self.grl_hold,
            end: self.grl_end,
            raw_sign: self.grl_raw_sign,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "train.batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        self.grl_schedule().validate()?;
        PlateauLr::new(self.lr, self.plateau_factor, self.plateau_patience, self.plateau_threshold)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("train.momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// Per-epoch traces of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: u8,
    pub label: String,
    pub seed: u64,
    pub monitor: Split,
    /// Ĉ on the monitored split after each epoch.
    pub monitor_c_hat: Vec<f64>,
    /// Mean combined loss over each epoch's steps.
    pub train_loss: Vec<f64>,
    /// Learning rate used during each epoch.
    pub lr: Vec<f64>,
    pub lambda: Vec<f64>,
    pub multiplier: Vec<f64>,
    pub best_epoch: usize,
    pub best_c_hat: f64,
    pub best_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub best: Checkpoint,
    pub last: Checkpoint,
}

/// Log-Mel extraction plus train-split normalisation, padding inputs that
/// are too short for the encoders.
pub struct FeaturePipeline {
    extractor: LogMelExtractor,
    normaliser: Normaliser,
    min_samples: usize,
}

impl FeaturePipeline {
    pub fn new(features: &FeatureConfig, model: &ModelConfig, normaliser: Normaliser) -> Result<Self> {
        let extractor = LogMelExtractor::new(features)?;
        if !(normaliser.mean.is_finite() && normaliser.std > 0.0) {
            return Err(Error::Config(format!(
                "normaliser needs finite mean and positive std, got {normaliser:?}"
            )));
        }
        let frames = [&model.emotion_encoder, &model.enrolment_encoder]
            .iter()
            .map(|e| e.blocks.iter().map(|b| b.pool).product::<usize>())
            .max()
            .unwrap_or(1);
        Ok(FeaturePipeline {
            extractor,
            normaliser,
            min_samples: features.n_fft + (frames - 1) * features.hop,
        })
    }

    /// Fits the normaliser on whole training utterances.
    pub fn fit(features: &FeatureConfig, model: &ModelConfig, corpus: &Corpus) -> Result<Self> {
        let mut p = Self::new(features, model, Normaliser::identity())?;
        let train = corpus.split(Split::Train);
        if train.is_empty() {
            return Err(Error::Data("corpus has no train split".into()));
        }
        let raw: Vec<LogMel> = train
            .iter()
            .map(|u| p.raw(&u.waveform.samples))
            .collect::<Result<_>>()?;
        p.normaliser = Normaliser::fit(&raw)?;
        Ok(p)
    }

    pub fn normaliser(&self) -> &Normaliser {
        &self.normaliser
    }

    fn raw(&self, samples: &[f32]) -> Result<LogMel> {
        if samples.len() >= self.min_samples {
            return self.extractor.extract(samples);
        }
        let mut padded = samples.to_vec();
        padded.resize(self.min_samples, 0.0);
        self.extractor.extract(&padded)
    }

    pub fn extract(&self, samples: &[f32]) -> Result<LogMel> {
        let mut lm = self.raw(samples)?;
        self.normaliser.apply(&mut lm);
        Ok(lm)
    }
}

/// Whole-utterance features of one split, with each speaker's evaluation
/// enrolment pair.
pub struct PreparedSplit {
    pub split: Split,
    pub targets: Vec<LogMel>,
    pub labels: Vec<EmotionScores>,
    pairs: Vec<(LogMel, LogMel)>,
    pair_of: Vec<Option<usize>>,
}

impl PreparedSplit {
    pub fn new(corpus: &Corpus, split: Split, pipeline: &FeaturePipeline, with_enrolment: bool) -> Result<Self> {
        let utts = corpus.split(split);
        if utts.len() < 2 {
            return Err(Error::Data(format!(
                "{split} split has {} utterance(s); scoring needs at least 2",
                utts.len()
            )));
        }
        let mut pairs = Vec::new();
        let mut pair_of = Vec::with_capacity(utts.len());
        let mut speakers: Vec<&str> = Vec::new();
        if with_enrolment {
            for s in corpus.speakers(split) {
                let pair = dev_enrolment(corpus, split, s)?;
                let (a, b) = eval_pad_pair(&pair.first.waveform, &pair.second.waveform);
                pairs.push((pipeline.extract(&a.samples)?, pipeline.extract(&b.samples)?));
                speakers.push(s);
            }
        }
        let mut targets = Vec::with_capacity(utts.len());
        for u in &utts {
            targets.push(pipeline.extract(&u.waveform.samples)?);
            pair_of.push(speakers.iter().position(|s| *s == u.speaker_id));
        }
        Ok(PreparedSplit {
            split,
            targets,
            labels: utts.iter().map(|u| u.scores).collect(),
            pairs,
            pair_of,
        })
    }

    pub fn predict(&self, model: &Model) -> Result<Vec<EmotionScores>> {
        self.targets
            .iter()
            .zip(&self.pair_of)
            .map(|(t, p)| {
                let pair = p.map(|i| (&self.pairs[i].0, &self.pairs[i].1));
                model.predict(t, pair)
            })
            .collect()
    }

    pub fn c_hat(&self, model: &Model) -> Result<f64> {
        c_hat(&self.predict(model)?, &self.labels)
    }
}

struct BatchTensors {
    targets: Tensor<f32>,
    enrolment: Option<Tensor<f32>>,
    labels: Tensor<f32>,
    enrolment_labels: Tensor<f32>,
    speakers: Vec<usize>,
}

fn assemble(items: &[TrainItem<'_>], pipeline: &FeaturePipeline, crop: usize, rng: &mut ChaCha8Rng) -> Result<BatchTensors> {
    let mut targets = Vec::with_capacity(items.len());
    let mut enrolment = Vec::new();
    let mut labels = Vec::with_capacity(items.len() * N_EMOTIONS);
    let mut enrolment_labels = Vec::new();
    for item in items {
        let w = crop_or_pad(&item.target.waveform, crop, rng)?;
        targets.push(pipeline.extract(&w.samples)?);
        labels.extend_from_slice(&item.target.scores);
        if let Some(pair) = item.enrolment {
            for u in [pair.first, pair.second] {
                let w = crop_or_pad(&u.waveform, crop, rng)?;
                enrolment.push(pipeline.extract(&w.samples)?);
            }
            enrolment_labels.extend_from_slice(&pair.mean_scores());
        }
    }
    let b = items.len();
    Ok(BatchTensors {
        targets: logmel_batch(&targets.iter().collect::<Vec<_>>())?,
        enrolment: if enrolment.is_empty() {
            None
        } else {
            Some(logmel_batch(&enrolment.iter().collect::<Vec<_>>())?)
        },
        labels: Tensor::new([b, N_EMOTIONS], labels)?,
        enrolment_labels: if enrolment_labels.is_empty() {
            Tensor::zeros([b, N_EMOTIONS])
        } else {
            Tensor::new([b, N_EMOTIONS], enrolment_labels)?
        },
        speakers: items.iter().map(|i| i.speaker).collect(),
    })
}

/// Combined training loss of one assembled batch.
fn batch_loss(model: &Model, graph: &mut Graph<f32>, vars: &[Var], b: &BatchTensors, grl: GrlSetting) -> Result<Var> {
    let x = graph.constant(b.targets.clone());
    let e = b.enrolment.as_ref().map(|t| graph.constant(t.clone()));
    let out = model.forward(graph, vars, x, e, grl, Mode::Train)?;
    let y = graph.constant(b.labels.clone());
    let mut parts = vec![metrics::ccc_loss(graph, out.emotions, y)?];
    if let Some(logits) = out.speaker_logits {
        parts.push(metrics::cross_entropy(graph, logits, &b.speakers)?);
    }
    if let Some(logits) = out.enrolment_speaker_logits {
        parts.push(metrics::cross_entropy(graph, logits, &b.speakers)?);
    }
    if let Some(pred) = out.enrolment_emotions {
        let y = graph.constant(b.enrolment_labels.clone());
        parts.push(metrics::ccc_loss(graph, pred, y)?);
    }
    metrics::combine_losses(graph, &parts)
}

fn check_enrolment_pools(corpus: &Corpus) -> Result<()> {
    for s in corpus.speakers(Split::Train) {
        let n = corpus.speaker_utterances(Split::Train, s).len();
        if n < 2 {
            return Err(Error::Data(format!(
                "speaker {s} has {n} training utterance(s); enrolment needs 2"
            )));
        }
    }
    Ok(())
}

/// Trains one variant and keeps the checkpoint with the best monitored Ĉ.
///
/// With `out_dir`, the best checkpoint is also written there whenever it
/// improves.
pub fn train(
    variant: VariantSpec,
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    features: &FeatureConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.split(cfg.monitor).is_empty() {
        return Err(Error::Config(format!("corpus has no {} split to monitor", cfg.monitor)));
    }
    if variant.use_enrolment {
        check_enrolment_pools(corpus)?;
    }
    if features.sample_rate != corpus.sample_rate {
        return Err(Error::Config(format!(
            "features.sample_rate {} differs from corpus rate {}",
            features.sample_rate, corpus.sample_rate
        )));
    }
    let speakers: Vec<String> = corpus.speakers(Split::Train).iter().map(|s| s.to_string()).collect();
    let pipeline = FeaturePipeline::fit(features, model_cfg, corpus)?;
    let monitor = PreparedSplit::new(corpus, cfg.monitor, &pipeline, variant.use_enrolment)?;
    let mut model = Model::new(variant, model_cfg.clone(), speakers.len(), cfg.seed)?;
    let mut opt = NesterovSgd::new(cfg.momentum, model.params.tensors())?;
    let mut plateau = PlateauLr::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold)?;
    let schedule = cfg.grl_schedule();
    let crop = crop_samples(corpus.sample_rate);
    let mut rng = metrics::resample_rng(cfg.seed, 1);

    let checkpoint = |model: &Model, epoch: usize| Checkpoint {
        model: model.clone(),
        normaliser: *pipeline.normaliser(),
        features: features.clone(),
        speakers: speakers.clone(),
        seed: cfg.seed,
        epoch,
    };
    let best_path = out_dir.map(|d| d.join(BEST_CHECKPOINT));
    let mut record = RunRecord {
        variant: variant.number(),
        label: variant.label(),
        seed: cfg.seed,
        monitor: cfg.monitor,
        monitor_c_hat: Vec::with_capacity(cfg.epochs),
        train_loss: Vec::with_capacity(cfg.epochs),
        lr: Vec::with_capacity(cfg.epochs),
        lambda: Vec::with_capacity(cfg.epochs),
        multiplier: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_c_hat: f64::NEG_INFINITY,
        best_checkpoint: best_path.clone(),
    };
    let mut best = checkpoint(&model, 0);

    for epoch in 0..cfg.epochs {
        let lambda = schedule.lambda(epoch as i64)?;
        let multiplier = schedule.multiplier(epoch as i64)?;
        let grl = GrlSetting::new(multiplier)?;
        let lr = plateau.lr();
        let batches = data::make_batches(corpus, cfg.batch_size, cfg.drop_last, variant.use_enrolment, &mut rng)?;
        let mut loss_sum = 0.0;
        for (step, items) in batches.iter().enumerate() {
            let b = assemble(items, &pipeline, crop, &mut rng)?;
            let mut graph = Graph::<f32>::new();
            let vars = model.bind(&mut graph);
            let loss = batch_loss(&model, &mut graph, &vars, &b, grl)?;
            let value = graph.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("loss is {value}"),
                });
            }
            let mut grads = graph.backward(loss)?;
            let grads: Vec<Tensor<f32>> = vars
                .iter()
                .zip(model.params.tensors())
                .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
                .collect();
            if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("gradient of {} is not finite", model.params.names()[i]),
                });
            }
            opt.step(model.params.tensors_mut(), &grads, lr)?;
            loss_sum += value as f64;
            debug!("epoch {epoch} step {step}: loss {value:.5}");
        }
        let score = monitor.c_hat(&model)?;
        record.monitor_c_hat.push(score);
        record.train_loss.push(loss_sum / batches.len() as f64);
        record.lr.push(lr);
        record.lambda.push(lambda);
        record.multiplier.push(multiplier);
        plateau.observe(score);
        if score > record.best_c_hat {
            record.best_c_hat = score;
            record.best_epoch = epoch;
            best = checkpoint(&model, epoch);
            if let Some(p) = &best_path {
                best.save(p)?;
            }
        }
        info!(
            "variant {} epoch {epoch}: loss {:.4}, {} Ĉ {score:.4}, lr {lr:e}, λ {lambda:+.3}",
            variant.number(),
            record.train_loss[epoch],
            cfg.monitor,
        );
    }
    let last = checkpoint(&model, cfg.epochs - 1);
    Ok(TrainOutcome { record, best, last })
}

/// Scores a checkpoint on whole utterances of `split`.
pub fn evaluate(ckpt: &Checkpoint, corpus: &Corpus, split: Split, n_bootstrap: usize, seed: u64) -> Result<EvalReport> {
    if ckpt.features.sample_rate != corpus.sample_rate {
        return Err(Error::Config(format!(
            "checkpoint expects {} Hz audio, corpus is {} Hz",
            ckpt.features.sample_rate, corpus.sample_rate
        )));
    }
    let pipeline = FeaturePipeline::new(&ckpt.features, &ckpt.model.config, ckpt.normaliser)?;
    let prepared = PreparedSplit::new(corpus, split, &pipeline, ckpt.model.variant.use_enrolment)?;
    let preds = prepared.predict(&ckpt.model)?;
    let mut report = EvalReport::from_predictions(split.as_str(), &preds, &prepared.labels, n_bootstrap, seed)?;
    report.variant = Some(ckpt.model.variant.number());
    Ok(report)
}

#[cfg(test)]
mod tests;
