//! The seven encoder/head wirings and their parameter registry.
//!
//! Every variant has an emotion encoder `g` and an emotion head `f`. With
//! enrolment, a second encoder embeds each of the speaker's two enrolment
//! utterances. The pair mean `z̃` selects features of the target embedding
//! `z` through `e = z + z ⊙ softmax(z̃·P)`. Optional heads attach to `z`
//! (adversarial speaker head), to `z̃` (speaker head) and to `z̃`
//! (adversarial emotion head). Adversarial heads sit behind a gradient
//! reversal node that shares one [`GrlSetting`].

mod checkpoint;

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GrlSetting, Scalar, Tensor, Var};
use crate::dsp::LogMel;
use crate::error::{Error, Result};
use crate::metrics::{EmotionScores, N_EMOTIONS};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile {other:?}; expected desk or paper"))),
        }
    }
}

/// Which optional components are wired in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VariantSpec {
    pub use_enrolment: bool,
    /// Adversarial speaker head on the emotion embedding.
    pub speaker_adversary: bool,
    /// Speaker head on the enrolment embedding.
    pub enrolment_speaker: bool,
    /// Adversarial emotion head on the enrolment embedding.
    pub enrolment_adversary: bool,
}

const LEGAL: [(bool, bool, bool, bool); 7] = [
    (false, false, false, false),
    (false, true, false, false),
    (true, false, false, false),
    (true, false, true, false),
    (true, false, false, true),
    (true, false, true, true),
    (true, true, true, true),
];

impl VariantSpec {
    pub fn new(
        use_enrolment: bool,
        speaker_adversary: bool,
        enrolment_speaker: bool,
        enrolment_adversary: bool,
    ) -> Result<Self> {
        let spec = VariantSpec {
            use_enrolment,
            speaker_adversary,
            enrolment_speaker,
            enrolment_adversary,
        };
        if (enrolment_speaker || enrolment_adversary) && !use_enrolment {
            return Err(Error::Spec(format!(
                "{spec:?}: enrolment heads require the enrolment encoder"
            )));
        }
        if !LEGAL.contains(&spec.flags()) {
            return Err(Error::Spec(format!("{spec:?} is not one of the seven variants")));
        }
        Ok(spec)
    }

    /// Variants are numbered 1 to 7 in ablation-table order.
    pub fn from_number(n: u8) -> Result<Self> {
        let (a, b, c, d) = *LEGAL
            .get((n as usize).wrapping_sub(1))
            .ok_or_else(|| Error::Spec(format!("variant must be 1-7, got {n}")))?;
        VariantSpec::new(a, b, c, d)
    }

    pub fn all() -> Vec<VariantSpec> {
        (1..=7).map(|n| VariantSpec::from_number(n).unwrap()).collect()
    }

    pub fn number(&self) -> u8 {
        LEGAL.iter().position(|f| *f == self.flags()).unwrap() as u8 + 1
    }

    fn flags(&self) -> (bool, bool, bool, bool) {
        (
            self.use_enrolment,
            self.speaker_adversary,
            self.enrolment_speaker,
            self.enrolment_adversary,
        )
    }

    /// Composition label such as `g ∘ f ∘ g̃ ∘ (−h)`.
    pub fn label(&self) -> String {
        let mut parts = vec!["g", "f"];
        if self.use_enrolment {
            parts.push("g̃");
        }
        if self.speaker_adversary {
            parts.push("(−h)");
        }
        if self.enrolment_speaker {
            parts.push("h̃");
        }
        if self.enrolment_adversary {
            parts.push("(−f̃)");
        }
        parts.join(" ∘ ")
    }

    pub fn has_adversary(&self) -> bool {
        self.speaker_adversary || self.enrolment_adversary
    }

    pub fn has_speaker_head(&self) -> bool {
        self.speaker_adversary || self.enrolment_speaker
    }

    pub fn components(&self) -> Vec<Component> {
        let mut out = vec![Component::EmotionEncoder, Component::EmotionHead];
        if self.use_enrolment {
            out.extend([Component::EnrolmentEncoder, Component::Projection]);
        }
        if self.speaker_adversary {
            out.push(Component::SpeakerHead);
        }
        if self.enrolment_speaker {
            out.push(Component::EnrolmentSpeakerHead);
        }
        if self.enrolment_adversary {
            out.push(Component::EnrolmentEmotionHead);
        }
        out
    }
}

impl fmt::Display for VariantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    EmotionEncoder,
    EnrolmentEncoder,
    Projection,
    EmotionHead,
    SpeakerHead,
    EnrolmentSpeakerHead,
    EnrolmentEmotionHead,
}

impl Component {
    pub fn prefix(self) -> &'static str {
        match self {
            Component::EmotionEncoder => "emotion_encoder",
            Component::EnrolmentEncoder => "enrolment_encoder",
            Component::Projection => "projection",
            Component::EmotionHead => "emotion_head",
            Component::SpeakerHead => "speaker_head",
            Component::EnrolmentSpeakerHead => "enrolment_speaker_head",
            Component::EnrolmentEmotionHead => "enrolment_emotion_head",
        }
    }

    pub fn of_param(name: &str) -> Option<Component> {
        let prefix = name.split('.').next()?;
        [
            Component::EmotionEncoder,
            Component::EnrolmentEncoder,
            Component::Projection,
            Component::EmotionHead,
            Component::SpeakerHead,
            Component::EnrolmentSpeakerHead,
            Component::EnrolmentEmotionHead,
        ]
        .into_iter()
        .find(|c| c.prefix() == prefix)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub channels: usize,
    /// Average-pool size after the block; 1 disables pooling.
    pub pool: usize,
}

/// Stack of double 3×3 conv blocks followed by summed global avg and max pooling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub blocks: Vec<ConvBlock>,
}

impl EncoderConfig {
    fn from_channels(channels: &[usize], last_pool: usize) -> Self {
        let n = channels.len();
        EncoderConfig {
            blocks: channels
                .iter()
                .enumerate()
                .map(|(i, &c)| ConvBlock {
                    channels: c,
                    pool: if i + 1 == n { last_pool } else { 2 },
                })
                .collect(),
        }
    }

    /// CNN14 convolution stack.
    pub fn cnn14() -> Self {
        Self::from_channels(&[64, 128, 256, 512, 1024, 2048], 1)
    }

    /// CNN10 convolution stack.
    pub fn cnn10() -> Self {
        Self::from_channels(&[64, 128, 256, 512], 1)
    }

    pub fn embedding_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.channels)
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.blocks.is_empty() || self.blocks.iter().any(|b| b.channels == 0 || b.pool == 0) {
            return Err(Error::Config(format!(
                "{what}: needs at least one block with positive channels and pool"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub emotion_encoder: EncoderConfig,
    pub enrolment_encoder: EncoderConfig,
    pub emotion_hidden: usize,
    pub speaker_hidden: usize,
    pub enrolment_speaker_hidden: usize,
    pub enrolment_emotion_hidden: usize,
}

impl ModelConfig {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => ModelConfig {
                emotion_encoder: EncoderConfig::from_channels(&[8, 16], 2),
                enrolment_encoder: EncoderConfig::from_channels(&[4, 8], 2),
                emotion_hidden: 32,
                speaker_hidden: 32,
                enrolment_speaker_hidden: 16,
                enrolment_emotion_hidden: 16,
            },
            Profile::Paper => ModelConfig {
                emotion_encoder: EncoderConfig::cnn14(),
                enrolment_encoder: EncoderConfig::cnn10(),
                emotion_hidden: 2048,
                speaker_hidden: 2048,
                enrolment_speaker_hidden: 512,
                enrolment_emotion_hidden: 512,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.emotion_encoder.validate("model.emotion_encoder")?;
        self.enrolment_encoder.validate("model.enrolment_encoder")?;
        let hidden = [
            ("emotion_hidden", self.emotion_hidden),
            ("speaker_hidden", self.speaker_hidden),
            ("enrolment_speaker_hidden", self.enrolment_speaker_hidden),
            ("enrolment_emotion_hidden", self.enrolment_emotion_hidden),
        ];
        for (name, v) in hidden {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: String, tensor: Tensor<f32>) -> Result<()> {
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    /// Auxiliary heads are not built.
    Eval,
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `B×10` emotion predictions in `[0, 1]`.
    pub emotions: Var,
    pub embedding: Var,
    /// Input of the emotion head.
    pub conditioned: Var,
    pub enrolment_embedding: Option<Var>,
    pub attention: Option<Var>,
    /// Logits of the adversarial speaker head on `z`.
    pub speaker_logits: Option<Var>,
    /// Logits of the speaker head on `z̃`.
    pub enrolment_speaker_logits: Option<Var>,
    /// Adversarial emotion predictions from `z̃`.
    pub enrolment_emotions: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub variant: VariantSpec,
    pub config: ModelConfig,
    pub n_speakers: usize,
    pub params: ParamStore,
}

impl Model {
    pub fn new(variant: VariantSpec, config: ModelConfig, n_speakers: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if variant.has_speaker_head() && n_speakers < 2 {
            return Err(Error::Config(format!(
                "variant {} has a speaker head and needs at least 2 training speakers, got {n_speakers}",
                variant.number()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        for (name, shape, init) in param_layout(variant, &config, n_speakers) {
            let tensor = match init {
                Init::Xavier { fan_in, fan_out } => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound) as f32)
                }
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, 1.0),
            };
            params.insert(name, tensor)?;
        }
        Ok(Model {
            variant,
            config,
            n_speakers,
            params,
        })
    }

    /// Adds every parameter to `graph` as a trainable leaf, in registry order.
    pub fn bind<T: Scalar>(&self, graph: &mut Graph<T>) -> Vec<Var> {
        self.params.tensors().iter().map(|t| graph.param(t.cast())).collect()
    }

    fn var(&self, vars: &[Var], name: &str) -> Result<Var> {
        let i = self
            .params
            .position(name)
            .ok_or_else(|| Error::Contract(format!("parameter {name} missing from registry")))?;
        vars.get(i)
            .copied()
            .ok_or_else(|| Error::Contract(format!("{} bound vars for {} parameters", vars.len(), self.params.len())))
    }

    fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        component: Component,
        x: Var,
    ) -> Result<Var> {
        let cfg = match component {
            Component::EmotionEncoder => &self.config.emotion_encoder,
            _ => &self.config.enrolment_encoder,
        };
        let p = component.prefix();
        let mut h = x;
        for (i, block) in cfg.blocks.iter().enumerate() {
            for j in 0..2 {
                let w = self.var(vars, &format!("{p}.block{i}.conv{j}.weight"))?;
                let scale = self.var(vars, &format!("{p}.block{i}.affine{j}.scale"))?;
                let shift = self.var(vars, &format!("{p}.block{i}.affine{j}.shift"))?;
                h = g.conv2d(h, w, (1, 1), (1, 1))?;
                h = g.channel_affine(h, scale, shift)?;
                h = g.relu(h)?;
            }
            if block.pool > 1 {
                h = g.avg_pool2d(h, block.pool)?;
            }
        }
        let avg = g.global_avg_pool(h)?;
        let max = g.global_max_pool(h)?;
        g.add(avg, max)
    }

    fn head<T: Scalar>(&self, g: &mut Graph<T>, vars: &[Var], component: Component, x: Var) -> Result<Var> {
        let p = component.prefix();
        let h = g.linear(
            x,
            self.var(vars, &format!("{p}.0.weight"))?,
            self.var(vars, &format!("{p}.0.bias"))?,
        )?;
        let h = g.relu(h)?;
        g.linear(
            h,
            self.var(vars, &format!("{p}.1.weight"))?,
            self.var(vars, &format!("{p}.1.bias"))?,
        )
    }

    /// `e = z + z ⊙ softmax(z̃·P)` with one attention row per enrolment pair.
    pub fn condition<T: Scalar>(&self, g: &mut Graph<T>, vars: &[Var], z: Var, z_enrol: Var) -> Result<(Var, Var)> {
        let proj = self.var(vars, "projection.weight")?;
        let dg = self.config.emotion_encoder.embedding_dim();
        if g.shape(proj) != [self.config.enrolment_encoder.embedding_dim(), dg] {
            return Err(Error::Config(format!(
                "projection shape {:?} does not bridge the encoder dimensions",
                g.shape(proj)
            )));
        }
        let zero = g.constant(Tensor::zeros([dg]));
        let logits = g.linear(z_enrol, proj, zero)?;
        let attention = g.softmax(logits, 1)?;
        let gated = g.mul(z, attention)?;
        Ok((g.add(z, gated)?, attention))
    }

    /// Builds the forward graph.
    ///
    /// `targets` is `B×1×T×M`. With enrolment, `enrolment` is `2B×1×T'×M`
    /// where rows `2i` and `2i+1` are the pair of target `i`; otherwise it is
    /// ignored.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        targets: Var,
        enrolment: Option<Var>,
        grl: GrlSetting,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} bound vars for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let z = self.encode(g, vars, Component::EmotionEncoder, targets)?;
        let batch = g.shape(z)[0];
        let (conditioned, z_enrol, attention) = if self.variant.use_enrolment {
            let enrol = enrolment.ok_or_else(|| {
                Error::Contract(format!("variant {} needs enrolment input", self.variant.number()))
            })?;
            if g.shape(enrol).first() != Some(&(2 * batch)) {
                return Err(Error::Contract(format!(
                    "expected 2 enrolment utterances per target ({} rows), got shape {:?}",
                    2 * batch,
                    g.shape(enrol)
                )));
            }
            let singles = self.encode(g, vars, Component::EnrolmentEncoder, enrol)?;
            let z_enrol = g.group_mean(singles, 2)?;
            let (e, attention) = self.condition(g, vars, z, z_enrol)?;
            (e, Some(z_enrol), Some(attention))
        } else {
            (z, None, None)
        };
        let logits = self.head(g, vars, Component::EmotionHead, conditioned)?;
        let emotions = g.sigmoid(logits)?;
        let mut out = ForwardOutput {
            emotions,
            embedding: z,
            conditioned,
            enrolment_embedding: z_enrol,
            attention,
            speaker_logits: None,
            enrolment_speaker_logits: None,
            enrolment_emotions: None,
        };
        if mode == Mode::Eval {
            return Ok(out);
        }
        if self.variant.speaker_adversary {
            let r = g.grad_reversal(z, grl)?;
            out.speaker_logits = Some(self.head(g, vars, Component::SpeakerHead, r)?);
        }
        if let Some(ze) = z_enrol {
            if self.variant.enrolment_speaker {
                out.enrolment_speaker_logits = Some(self.head(g, vars, Component::EnrolmentSpeakerHead, ze)?);
            }
            if self.variant.enrolment_adversary {
                let r = g.grad_reversal(ze, grl)?;
                let logits = self.head(g, vars, Component::EnrolmentEmotionHead, r)?;
                out.enrolment_emotions = Some(g.sigmoid(logits)?);
            }
        }
        Ok(out)
    }

    /// Emotion prediction for one whole utterance at evaluation.
    pub fn predict(&self, target: &LogMel, enrolment: Option<(&LogMel, &LogMel)>) -> Result<EmotionScores> {
        let mut g = Graph::<f32>::new();
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| g.constant(t.clone())).collect();
        let x = g.constant(logmel_batch(&[target])?);
        let enrol = match (self.variant.use_enrolment, enrolment) {
            (true, Some((a, b))) => Some(g.constant(logmel_batch(&[a, b])?)),
            (true, None) => {
                return Err(Error::Contract("enrolment variant evaluated without a pair".into()));
            }
            (false, _) => None,
        };
        let out = self.forward(&mut g, &vars, x, enrol, GrlSetting::default(), Mode::Eval)?;
        g.check_finite()?;
        let mut scores = [0.0; N_EMOTIONS];
        scores.copy_from_slice(g.value(out.emotions).data());
        Ok(scores)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

/// Name, shape and initialiser of every parameter, in registry order.
pub fn param_layout(variant: VariantSpec, config: &ModelConfig, n_speakers: usize) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let dg = config.emotion_encoder.embedding_dim();
    let dt = config.enrolment_encoder.embedding_dim();
    let encoder = |out: &mut Vec<_>, prefix: &str, cfg: &EncoderConfig| {
        let mut cin = 1;
        for (i, block) in cfg.blocks.iter().enumerate() {
            let c = block.channels;
            for j in 0..2 {
                let fans = Init::Xavier {
                    fan_in: cin * 9,
                    fan_out: c * 9,
                };
                out.push((format!("{prefix}.block{i}.conv{j}.weight"), vec![c, cin, 3, 3], fans));
                out.push((format!("{prefix}.block{i}.affine{j}.scale"), vec![c], Init::Ones));
                out.push((format!("{prefix}.block{i}.affine{j}.shift"), vec![c], Init::Zeros));
                cin = c;
            }
        }
    };
    let head = |out: &mut Vec<_>, prefix: &str, input: usize, hidden: usize, output: usize| {
        let xavier = |a, b| Init::Xavier { fan_in: a, fan_out: b };
        out.push((format!("{prefix}.0.weight"), vec![input, hidden], xavier(input, hidden)));
        out.push((format!("{prefix}.0.bias"), vec![hidden], Init::Zeros));
        out.push((format!("{prefix}.1.weight"), vec![hidden, output], xavier(hidden, output)));
        out.push((format!("{prefix}.1.bias"), vec![output], Init::Zeros));
    };
    for c in variant.components() {
        let p = c.prefix();
        match c {
            Component::EmotionEncoder => encoder(&mut out, p, &config.emotion_encoder),
            Component::EnrolmentEncoder => encoder(&mut out, p, &config.enrolment_encoder),
            Component::Projection => out.push((format!("{p}.weight"), vec![dt, dg], Init::Zeros)),
            Component::EmotionHead => head(&mut out, p, dg, config.emotion_hidden, N_EMOTIONS),
            Component::SpeakerHead => head(&mut out, p, dg, config.speaker_hidden, n_speakers),
            Component::EnrolmentSpeakerHead => head(&mut out, p, dt, config.enrolment_speaker_hidden, n_speakers),
            Component::EnrolmentEmotionHead => {
                head(&mut out, p, dt, config.enrolment_emotion_hidden, N_EMOTIONS)
            }
        }
    }
    out
}

/// Stacks equal-shaped spectrograms into a `B×1×T×M` tensor.
pub fn logmel_batch(items: &[&LogMel]) -> Result<Tensor<f32>> {
    let first = items
        .first()
        .ok_or_else(|| Error::Contract("cannot batch zero spectrograms".into()))?;
    let mut data = Vec::with_capacity(items.len() * first.values.len());
    for lm in items {
        if (lm.frames, lm.mel_bins) != (first.frames, first.mel_bins) {
            return Err(Error::dim(
                "spectrogram batch",
                &[first.frames, first.mel_bins],
                &[lm.frames, lm.mel_bins],
            ));
        }
        data.extend_from_slice(&lm.values);
    }
    Tensor::new(vec![items.len(), 1, first.frames, first.mel_bins], data)
}
