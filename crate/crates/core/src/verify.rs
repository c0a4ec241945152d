//! Self-test suite: finite-difference gradient checks of every autodiff
//! primitive and of a composed model graph, plus the reversal and
//! conditioning invariants.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckOptions, Graph, GrlSetting, Objective, OpKind, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::N_EMOTIONS;
use crate::model::{ForwardOutput, Mode, Model, ModelConfig, Profile, VariantSpec};

/// Maximum relative error accepted by the gradient checks.
pub const GRAD_TOLERANCE: f64 = 1e-2;
/// Absolute tolerance for the reversal negation check.
pub const NEGATION_TOLERANCE: f64 = 1e-6;
pub const SOFTMAX_SUM_TOLERANCE: f64 = 1e-6;
pub const COMPOSED_CHECK: &str = "variant7_desk";

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seeds: u64,
    /// Negate the backward rule of one op kind in every checked graph.
    pub fault: Option<OpKind>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { seeds: 10, fault: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub name: String,
    pub seeds: u64,
    /// Worst relative error over all seeds.
    pub max_rel_error: f64,
    pub worst_seed: u64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvariantCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub ops: Vec<OpCheck>,
    pub invariants: Vec<InvariantCheck>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpCheck::passed) && self.invariants.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.ops
            .iter()
            .filter(|o| !o.passed())
            .map(|o| o.name.as_str())
            .chain(self.invariants.iter().filter(|c| !c.passed).map(|c| c.name.as_str()))
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let w = self.ops.iter().map(|o| o.name.len()).chain([9]).max().unwrap_or(9);
        let _ = writeln!(s, "{:<w$}  {:>6}  {:>12}  result", "op", "seeds", "max rel err");
        for o in &self.ops {
            let _ = writeln!(
                s,
                "{:<w$}  {:>6}  {:>12.3e}  {}",
                o.name,
                o.seeds,
                o.max_rel_error,
                if o.passed() { "pass" } else { "FAIL" }
            );
        }
        for c in &self.invariants {
            let _ = writeln!(s, "{:<w$}  {}  {}", c.name, if c.passed { "pass" } else { "FAIL" }, c.detail);
        }
        let _ = writeln!(
            s,
            "{}",
            if self.passed() {
                "all checks passed".to_string()
            } else {
                format!("failed: {}", self.failures().join(", "))
            }
        );
        s
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0f32..1.0))
}

/// One objective per primitive, each reduced to a scalar through a random
/// weighting so that every output coordinate matters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Linear,
    Conv,
    ConvStrided,
    ChannelAffine,
    AvgPool,
    GlobalAvg,
    GlobalMax,
    Relu,
    Sigmoid,
    Add,
    Mul,
    Scale,
    Softmax,
    GradReversal,
    Concat,
    GroupMean,
    Sum,
    Mean,
    Ccc,
    CrossEntropy,
}

impl Primitive {
    pub const ALL: [Primitive; 20] = [
        Primitive::Linear,
        Primitive::Conv,
        Primitive::ConvStrided,
        Primitive::ChannelAffine,
        Primitive::AvgPool,
        Primitive::GlobalAvg,
        Primitive::GlobalMax,
        Primitive::Relu,
        Primitive::Sigmoid,
        Primitive::Add,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::Softmax,
        Primitive::GradReversal,
        Primitive::Concat,
        Primitive::GroupMean,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::Ccc,
        Primitive::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Linear => "linear",
            Primitive::Conv => "conv2d",
            Primitive::ConvStrided => "conv2d_strided",
            Primitive::ChannelAffine => "channel_affine",
            Primitive::AvgPool => "avg_pool2d",
            Primitive::GlobalAvg => "global_avg_pool",
            Primitive::GlobalMax => "global_max_pool",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::Softmax => "softmax",
            Primitive::GradReversal => "grad_reversal",
            Primitive::Concat => "concat_rows",
            Primitive::GroupMean => "group_mean",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Ccc => "ccc_loss",
            Primitive::CrossEntropy => "cross_entropy",
        }
    }
}

pub struct PrimitiveObjective {
    prim: Primitive,
    weights: Tensor,
}

impl PrimitiveObjective {
    /// Random objective and evaluation point for `prim`.
    pub fn sample(prim: Primitive, rng: &mut ChaCha8Rng) -> Result<(Self, Vec<Tensor>)> {
        let inputs: Vec<Tensor> = match prim {
            Primitive::Linear => vec![random(&[3, 4], rng), random(&[4, 2], rng), random(&[2], rng)],
            Primitive::Conv => vec![random(&[2, 2, 5, 4], rng), random(&[3, 2, 3, 3], rng)],
            Primitive::ConvStrided => vec![random(&[1, 2, 6, 5], rng), random(&[2, 2, 3, 2], rng)],
            Primitive::ChannelAffine => {
                vec![random(&[2, 3, 2, 2], rng), random(&[3], rng), random(&[3], rng)]
            }
            Primitive::AvgPool => vec![random(&[1, 2, 5, 4], rng)],
            Primitive::GlobalAvg | Primitive::GlobalMax => vec![random(&[2, 3, 3, 4], rng)],
            Primitive::Relu
            | Primitive::Sigmoid
            | Primitive::Scale
            | Primitive::GradReversal
            | Primitive::Sum
            | Primitive::Mean => vec![random(&[3, 4], rng)],
            Primitive::Add | Primitive::Mul => vec![random(&[3, 4], rng), random(&[3, 4], rng)],
            Primitive::Softmax => vec![Tensor::from_fn(vec![3, 5], |_| rng.gen_range(-2.0f32..2.0))],
            Primitive::Concat => vec![random(&[2, 3], rng), random(&[1, 3], rng)],
            Primitive::GroupMean => vec![random(&[4, 3], rng)],
            Primitive::Ccc => vec![
                Tensor::from_fn(vec![5, 3], |_| rng.gen_range(0.0f32..1.0)),
                Tensor::from_fn(vec![5, 3], |_| rng.gen_range(0.0f32..1.0)),
            ],
            Primitive::CrossEntropy => vec![random(&[3, 5], rng)],
        };
        let mut obj = PrimitiveObjective {
            prim,
            weights: Tensor::scalar(0.0),
        };
        let out_len = {
            let mut g = Graph::<f32>::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let out = obj.apply(&mut g, &vars)?;
            g.value(out).len()
        };
        obj.weights = Tensor::from_fn(vec![out_len], |_| rng.gen_range(-1.0f32..1.0));
        Ok((obj, inputs))
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        match self.prim {
            Primitive::Linear => g.linear(v[0], v[1], v[2]),
            Primitive::Conv => g.conv2d(v[0], v[1], (1, 1), (1, 1)),
            Primitive::ConvStrided => g.conv2d(v[0], v[1], (2, 1), (1, 0)),
            Primitive::ChannelAffine => g.channel_affine(v[0], v[1], v[2]),
            Primitive::AvgPool => g.avg_pool2d(v[0], 2),
            Primitive::GlobalAvg => g.global_avg_pool(v[0]),
            Primitive::GlobalMax => g.global_max_pool(v[0]),
            Primitive::Relu => g.relu(v[0]),
            Primitive::Sigmoid => g.sigmoid(v[0]),
            Primitive::Add => g.add(v[0], v[1]),
            Primitive::Mul => g.mul(v[0], v[1]),
            Primitive::Scale => g.scale(v[0], -2.5),
            Primitive::Softmax => g.softmax(v[0], 1),
            Primitive::GradReversal => g.grad_reversal(v[0], GrlSetting::new(-1.0)?),
            Primitive::Concat => g.concat_rows(&[v[0], v[1]]),
            Primitive::GroupMean => g.group_mean(v[0], 2),
            Primitive::Sum => {
                let s = g.sum(v[0])?;
                g.mul(s, s)
            }
            Primitive::Mean => g.mean(v[0]),
            Primitive::Ccc => g.ccc_loss(v[0], v[1]),
            Primitive::CrossEntropy => g.cross_entropy(v[0], &[4, 0, 2]),
        }
    }
}

impl Objective for PrimitiveObjective {
    fn build<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
        let out = self.apply(g, inputs)?;
        let shape = g.shape(out).to_vec();
        let w = g.constant(self.weights.cast::<T>().reshape(shape)?);
        let weighted = g.mul(out, w)?;
        g.sum(weighted)
    }
}

/// Mean of all four head losses of a variant-7 model, with parameters
/// first and then the target batch, enrolment batch and labels.
struct ComposedLoss<'a> {
    model: &'a Model,
    speakers: Vec<usize>,
    grl: GrlSetting,
}

impl Objective for ComposedLoss<'_> {
    fn build<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
        let n = self.model.params.len();
        let (vars, rest) = inputs.split_at(n);
        let (x, e, y, y_enrol) = (rest[0], rest[1], rest[2], rest[3]);
        let out = self.model.forward(g, vars, x, Some(e), self.grl, Mode::Train)?;
        let missing = || Error::Contract("variant 7 must build every head".into());
        let parts = [
            g.ccc_loss(out.emotions, y)?,
            g.cross_entropy(out.speaker_logits.ok_or_else(missing)?, &self.speakers)?,
            g.cross_entropy(out.enrolment_speaker_logits.ok_or_else(missing)?, &self.speakers)?,
            g.ccc_loss(out.enrolment_emotions.ok_or_else(missing)?, y_enrol)?,
        ];
        crate::metrics::combine_losses(g, &parts)
    }
}

/// Desk training batch size.
const COMPOSED_BATCH: usize = 8;
const COMPOSED_FRAMES: usize = 8;
const COMPOSED_SPEAKERS: usize = 3;

fn composed_check(seed: u64, opts: &VerifyOptions) -> Result<f64> {
    let cfg = ModelConfig::for_profile(Profile::Desk);
    let mels = 32;
    let model = Model::new(VariantSpec::from_number(7)?, cfg, COMPOSED_SPEAKERS, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = COMPOSED_BATCH;
    let mut point: Vec<Tensor> = model.params.tensors().to_vec();
    point.push(random(&[b, 1, COMPOSED_FRAMES, mels], &mut rng));
    point.push(random(&[2 * b, 1, COMPOSED_FRAMES, mels], &mut rng));
    for _ in 0..2 {
        point.push(Tensor::from_fn(vec![b, N_EMOTIONS], |_| rng.gen_range(0.0f32..1.0)));
    }
    let obj = ComposedLoss {
        model: &model,
        speakers: (0..b).map(|_| rng.gen_range(0..COMPOSED_SPEAKERS)).collect(),
        grl: GrlSetting::new(rng.gen_range(-1.0..1.0))?,
    };
    let report = grad_check(
        &obj,
        &point,
        &GradCheckOptions {
            max_coords: Some(4),
            seed,
            fault: opts.fault,
            ..Default::default()
        },
    )?;
    Ok(report.max_rel_error)
}

/// Gradient checks of every primitive and of the composed variant-7 graph.
pub fn gradient_suite(opts: &VerifyOptions) -> Result<Vec<OpCheck>> {
    if opts.seeds == 0 {
        return Err(Error::Config("gradcheck needs at least one seed".into()));
    }
    let record = |name: &str, errs: Vec<f64>| {
        let (worst_seed, max_rel_error) = errs
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0f64), |acc, (i, e)| if e > acc.1 || !e.is_finite() { (i, e) } else { acc });
        OpCheck {
            name: name.to_string(),
            seeds: opts.seeds,
            max_rel_error,
            worst_seed: worst_seed as u64,
        }
    };
    let mut out = Vec::with_capacity(Primitive::ALL.len() + 1);
    for prim in Primitive::ALL {
        let errs = (0..opts.seeds)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                let (obj, point) = PrimitiveObjective::sample(prim, &mut rng)?;
                let go = GradCheckOptions {
                    fault: opts.fault,
                    ..Default::default()
                };
                Ok(grad_check(&obj, &point, &go)?.max_rel_error)
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(record(prim.name(), errs));
    }
    let errs = (0..opts.seeds)
        .map(|seed| composed_check(seed, opts))
        .collect::<Result<Vec<f64>>>()?;
    out.push(record(COMPOSED_CHECK, errs));
    Ok(out)
}

/// Encoder-side gradients of a variant's adversarial head loss, by parameter,
/// with the model's emotions output.
fn adversary_gradients(model: &Model, multiplier: f64, seed: u64) -> Result<(Vec<(String, Vec<f32>)>, Vec<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::<f32>::new();
    let vars = model.bind(&mut g);
    let x = g.constant(random(&[2, 1, 8, 32], &mut rng));
    let e = model
        .variant
        .use_enrolment
        .then(|| g.constant(random(&[4, 1, 8, 32], &mut rng)));
    let out: ForwardOutput = model.forward(&mut g, &vars, x, e, GrlSetting::new(multiplier)?, Mode::Train)?;
    let loss = if let Some(logits) = out.speaker_logits {
        g.cross_entropy(logits, &[0, 1])?
    } else if let Some(pred) = out.enrolment_emotions {
        let t = g.constant(Tensor::from_fn(vec![2, N_EMOTIONS], |_| rng.gen_range(0.0f32..1.0)));
        g.ccc_loss(pred, t)?
    } else {
        return Err(Error::Contract(format!("variant {} has no adversary", model.variant.number())));
    };
    let grads = g.backward(loss)?;
    let encoder = if model.variant.speaker_adversary {
        "emotion_encoder"
    } else {
        "enrolment_encoder"
    };
    let enc = model
        .params
        .names()
        .iter()
        .zip(&vars)
        .filter(|(n, _)| n.starts_with(encoder))
        .filter_map(|(n, v)| grads.get(*v).map(|t| (n.clone(), t.data().to_vec())))
        .collect();
    Ok((enc, g.value(out.emotions).data().to_vec()))
}

/// Switching the reversal multiplier from +1 to −1 exactly negates the
/// encoder gradient of the adversarial head and leaves the forward output
/// bit-identical.
pub fn grl_negation(variant: u8, seed: u64) -> Result<InvariantCheck> {
    let v = VariantSpec::from_number(variant)?;
    let model = Model::new(v, ModelConfig::for_profile(Profile::Desk), 3, seed)?;
    let (plus, y_plus) = adversary_gradients(&model, 1.0, seed)?;
    let (minus, y_minus) = adversary_gradients(&model, -1.0, seed)?;
    let mut worst = 0.0f64;
    let mut compared = 0usize;
    for ((na, ga), (nb, gb)) in plus.iter().zip(&minus) {
        if na != nb || ga.len() != gb.len() {
            return Err(Error::Contract(format!("gradient sets differ at {na} / {nb}")));
        }
        for (a, b) in ga.iter().zip(gb) {
            worst = worst.max((*a as f64 + *b as f64).abs());
        }
        compared += ga.len();
    }
    let nonzero = plus.iter().any(|(_, g)| g.iter().any(|v| *v != 0.0));
    let same_forward = y_plus == y_minus;
    let passed = compared > 0 && nonzero && worst <= NEGATION_TOLERANCE && same_forward && plus.len() == minus.len();
    Ok(InvariantCheck {
        name: format!("grl_negation_variant{variant}"),
        passed,
        detail: format!(
            "{compared} encoder coords, max |g(+1) + g(-1)| = {worst:.2e}, forward identical: {same_forward}"
        ),
    })
}

/// Conditioning invariants of variant 3: with a zero projection the head
/// input is `z·(1 + 1/D)`; attention rows sum to one for a random
/// projection; swapping the enrolment pair leaves predictions bitwise equal.
pub fn attention_invariants(seed: u64) -> Result<Vec<InvariantCheck>> {
    let mut model = Model::new(VariantSpec::from_number(3)?, ModelConfig::for_profile(Profile::Desk), 2, seed)?;
    let d = model.config.emotion_encoder.embedding_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[2, 1, 12, 32], &mut rng);
    let a = random(&[1, 1, 12, 32], &mut rng);
    let b = random(&[1, 1, 12, 32], &mut rng);
    let c = random(&[1, 1, 12, 32], &mut rng);
    let d_ = random(&[1, 1, 12, 32], &mut rng);
    let enrol = Tensor::stack(&[a.clone(), b.clone(), c.clone(), d_.clone()])?.reshape(vec![4, 1, 12, 32])?;
    let swapped = Tensor::stack(&[b, a, d_, c])?.reshape(vec![4, 1, 12, 32])?;

    let run = |model: &Model, enrol: &Tensor| -> Result<(Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>)> {
        let mut g = Graph::<f32>::new();
        let vars = model.bind(&mut g);
        let xv = g.constant(x.clone());
        let ev = g.constant(enrol.clone());
        let out = model.forward(&mut g, &vars, xv, Some(ev), GrlSetting::default(), Mode::Eval)?;
        let att = out
            .attention
            .ok_or_else(|| Error::Contract("variant 3 must produce attention".into()))?;
        Ok((
            g.value(out.embedding).data().to_vec(),
            g.value(out.conditioned).data().to_vec(),
            g.value(att).data().to_vec(),
            g.value(out.emotions).data().to_vec(),
        ))
    };

    let proj = model
        .params
        .get_mut("projection.weight")
        .ok_or_else(|| Error::Contract("variant 3 has no projection".into()))?;
    proj.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let (z, e, _, _) = run(&model, &enrol)?;
    let factor = 1.0 + 1.0 / d as f32;
    let exact = z.iter().zip(&e).filter(|(z, e)| **e != **z * factor).count();
    let identity = InvariantCheck {
        name: "attention_zero_projection".into(),
        passed: exact == 0 && z.iter().any(|v| *v != 0.0),
        detail: format!("{} of {} coords differ from z*(1+1/{d})", exact, z.len()),
    };

    let proj = model.params.get_mut("projection.weight").expect("checked above");
    proj.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-3.0..3.0));
    let (_, _, att, y) = run(&model, &enrol)?;
    let worst = att
        .chunks(d)
        .map(|row| (row.iter().map(|v| *v as f64).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let sums = InvariantCheck {
        name: "attention_rows_sum_to_one".into(),
        passed: worst <= SOFTMAX_SUM_TOLERANCE,
        detail: format!("max |row sum - 1| = {worst:.2e}"),
    };
    let (_, _, _, y_swapped) = run(&model, &swapped)?;
    let permutation = InvariantCheck {
        name: "enrolment_order_invariance".into(),
        passed: y == y_swapped,
        detail: format!("predictions bitwise equal: {}", y == y_swapped),
    };
    Ok(vec![identity, sums, permutation])
}

/// Gradient suite plus the reversal and conditioning invariants.
pub fn run(opts: &VerifyOptions) -> Result<VerifyReport> {
    let ops = gradient_suite(opts)?;
    let mut invariants = vec![grl_negation(2, 0)?, grl_negation(5, 0)?];
    invariants.extend(attention_invariants(0)?);
    Ok(VerifyReport { ops, invariants })
}
