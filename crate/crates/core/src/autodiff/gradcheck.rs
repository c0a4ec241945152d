//! Central-difference gradient verification.
//!
//! The analytic gradient is taken from the engine at `f32`; the oracle
//! re-evaluates the same objective at `f64` with each coordinate nudged by
//! `±eps`. Gradient-reversal nodes are evaluated in the oracle as
//! `m·x + (1−m)·x₀` around the base point, so the differences reflect the
//! reversed gradient the engine is expected to produce.
//!
//! ReLU and max pooling make objectives piecewise smooth. When a `±eps` step
//! moves any of them onto a different branch, the step is shrunk by 10× (up
//! to four times) so the difference is taken on the piece that contains the
//! base point.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, OpKind, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Scalar-valued function of a set of tensors, buildable at any precision.
pub trait Objective {
    fn build<T: Scalar>(&self, graph: &mut Graph<T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Negate the backward rule of one op kind in the analytic pass.
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-3,
            max_coords: None,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputCheck {
    pub index: usize,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
    pub max_rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn grad_check<O: Objective>(
    objective: &O,
    point: &[Tensor<f32>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(opts.eps > 0.0) {
        return Err(Error::Contract(format!("eps must be positive, got {}", opts.eps)));
    }
    let mut graph = Graph::<f32>::new();
    if let Some(kind) = opts.fault {
        graph.inject_fault(kind);
    }
    let vars: Vec<Var> = point.iter().map(|t| graph.param(t.clone())).collect();
    let loss = objective.build(&mut graph, &vars)?;
    graph.check_finite()?;
    let grads = graph.backward(loss)?;

    let base: Vec<Tensor<f64>> = point.iter().map(|t| t.cast()).collect();
    let (anchors, base_branch) = {
        let mut g = Graph::<f64>::new();
        g.record_reversal_anchors();
        let vars: Vec<Var> = base.iter().map(|t| g.constant(t.clone())).collect();
        objective.build(&mut g, &vars)?;
        g.check_finite()?;
        let branch = g.branch_signature();
        (g.take_reversal_anchors(), branch)
    };
    let eval = |inputs: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut g = Graph::<f64>::new();
        g.anchor_reversals(anchors.clone());
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = objective.build(&mut g, &vars)?;
        g.check_finite()?;
        Ok((g.value(loss).item(), g.branch_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checks = Vec::with_capacity(point.len());
    let mut work = base.clone();
    for (index, var) in vars.iter().enumerate() {
        let len = point[index].len();
        let analytic = grads.get(*var);
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < len => {
                let mut c = sample(&mut rng, len, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        let mut check = InputCheck {
            index,
            coords_checked: coords.len(),
            max_rel_error: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &c in &coords {
            let orig = base[index].data()[c];
            let mut step = opts.eps;
            let numeric = loop {
                work[index].data_mut()[c] = orig + step;
                let (plus, plus_branch) = eval(&work)?;
                work[index].data_mut()[c] = orig - step;
                let (minus, minus_branch) = eval(&work)?;
                work[index].data_mut()[c] = orig;
                let same_piece = plus_branch == base_branch && minus_branch == base_branch;
                if same_piece || step <= opts.eps * 1e-4 * 1.5 {
                    break (plus - minus) / (2.0 * step);
                }
                step /= 10.0;
            };
            let a = analytic.map_or(0.0, |g| g.data()[c] as f64);
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || !err.is_finite() {
                check.max_rel_error = err;
                check.worst_coord = c;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        checks.push(check);
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        inputs: checks,
        max_rel_error,
    })
}
