//! Concordance-based scoring: the CCC metric and loss, speaker cross-entropy,
//! loss averaging, the mean-CCC score Ĉ, and percentile bootstrap intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Var};
use crate::error::{Error, Result};

pub const N_EMOTIONS: usize = 10;

/// Target order used everywhere labels are stored or reported.
pub const EMOTIONS: [&str; N_EMOTIONS] = [
    "Amusement",
    "Awe",
    "Awkwardness",
    "Distress",
    "Excitement",
    "Fear",
    "Horror",
    "Sadness",
    "Surprise",
    "Triumph",
];

/// Ten emotion intensities in the normalised `[0, 1]` label space.
pub type EmotionScores = [f32; N_EMOTIONS];

/// Lin's concordance correlation coefficient with population (1/N) moments.
///
/// When both inputs are constant and equal the coefficient is 0/0; it is
/// defined as 1 in that case.
pub fn ccc(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dim("ccc", &[pred.len()], &[target.len()]));
    }
    if pred.len() < 2 {
        return Err(Error::Contract(format!(
            "ccc needs at least 2 points, got {}",
            pred.len()
        )));
    }
    let n = pred.len() as f64;
    // shifted by the first element so a constant vector's mean is exact and
    // its deviations are exactly zero
    let mean = |v: &[f64]| v[0] + v.iter().map(|x| x - v[0]).sum::<f64>() / n;
    let (mean_p, mean_t) = (mean(pred), mean(target));
    let (mut var_p, mut var_t, mut cov) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(target) {
        let (dp, dt) = (p - mean_p, t - mean_t);
        var_p += dp * dp;
        var_t += dt * dt;
        cov += dp * dt;
    }
    let gap = mean_p - mean_t;
    let denom = var_p / n + var_t / n + gap * gap;
    if denom == 0.0 {
        log::debug!("ccc of two identical constant vectors; defined as 1");
        return Ok(1.0);
    }
    Ok(2.0 * (cov / n) / denom)
}

/// `1 − mean over columns of ccc`, differentiable in both arguments.
pub fn ccc_loss<T: Scalar>(graph: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    graph.ccc_loss(pred, target)
}

pub fn cross_entropy<T: Scalar>(graph: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    graph.cross_entropy(logits, labels)
}

/// Arithmetic mean of scalar losses.
pub fn combine_losses<T: Scalar>(graph: &mut Graph<T>, parts: &[Var]) -> Result<Var> {
    if parts.is_empty() {
        return Err(Error::Contract("combine_losses needs at least one loss".into()));
    }
    if let Some(p) = parts.iter().find(|p| !graph.value(**p).is_scalar()) {
        return Err(Error::Contract(format!(
            "combine_losses expects scalars, got shape {:?}",
            graph.shape(*p)
        )));
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    let stacked = graph.concat_rows(parts)?;
    graph.mean(stacked)
}

fn column(rows: &[EmotionScores], k: usize) -> Vec<f64> {
    rows.iter().map(|r| r[k] as f64).collect()
}

pub fn per_emotion_ccc(preds: &[EmotionScores], targets: &[EmotionScores]) -> Result<[f64; N_EMOTIONS]> {
    if preds.len() != targets.len() {
        return Err(Error::dim("per_emotion_ccc", &[preds.len()], &[targets.len()]));
    }
    let mut out = [0.0; N_EMOTIONS];
    for (k, slot) in out.iter_mut().enumerate() {
        *slot = ccc(&column(preds, k), &column(targets, k))?;
    }
    Ok(out)
}

/// Ĉ: mean CCC over the ten emotions.
pub fn c_hat(preds: &[EmotionScores], targets: &[EmotionScores]) -> Result<f64> {
    let per = per_emotion_ccc(preds, targets)?;
    Ok(per.iter().sum::<f64>() / N_EMOTIONS as f64)
}

/// Empirical quantile of sorted data with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Generator for bootstrap resample `index`: a ChaCha8 stream keyed by
/// `(seed, index)`, so resamples are independent of evaluation order.
pub fn resample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Percentile bootstrap interval for Ĉ, resampling utterances with replacement.
pub fn bootstrap_ci(
    preds: &[EmotionScores],
    targets: &[EmotionScores],
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let n = preds.len();
    if n != targets.len() {
        return Err(Error::dim("bootstrap_ci", &[n], &[targets.len()]));
    }
    if n < 2 || n_resamples == 0 {
        return Err(Error::Contract(format!(
            "bootstrap needs N >= 2 and n >= 1 (N={n}, n={n_resamples})"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Contract(format!("confidence level must be in (0,1), got {level}")));
    }
    let mut scores = Vec::with_capacity(n_resamples);
    let mut p = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    for b in 0..n_resamples {
        let mut rng = resample_rng(seed, b as u64);
        p.clear();
        t.clear();
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            p.push(preds[i]);
            t.push(targets[i]);
        }
        scores.push(c_hat(&p, &t)?);
    }
    scores.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&scores, tail), quantile_sorted(&scores, 1.0 - tail)))
}

/// Percentage change of `c` over `baseline`.
pub fn relative_gain(c: f64, baseline: f64) -> Result<f64> {
    if baseline == 0.0 {
        return Err(Error::Contract("relative gain against a zero baseline".into()));
    }
    Ok(100.0 * (c - baseline) / baseline)
}

/// One-decimal signed rendering used in result tables: `+2.5`, `-1.4`, `0.0`.
pub fn format_gain(gain: f64) -> String {
    let rounded = (gain * 10.0).round() / 10.0;
    if rounded == 0.0 {
        "0.0".to_string()
    } else {
        format!("{rounded:+.1}")
    }
}

/// Scores for one evaluated split.
///
/// Serialised as JSON with keys `split`, `variant`, `n_utterances`,
/// `per_emotion_ccc` (ten values in [`EMOTIONS`] order), `c_hat`, `ci_low`,
/// `ci_high`, `ci_level`, `n_bootstrap`, `bootstrap_seed`, `baseline`,
/// `relative_gain`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub variant: Option<u8>,
    pub n_utterances: usize,
    pub per_emotion_ccc: Vec<f64>,
    pub c_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_level: f64,
    pub n_bootstrap: usize,
    pub bootstrap_seed: u64,
    pub baseline: Option<String>,
    pub relative_gain: Option<f64>,
}

impl EvalReport {
    /// The interval is widened, if needed, to contain the observed Ĉ.
    pub fn from_predictions(
        split: &str,
        preds: &[EmotionScores],
        targets: &[EmotionScores],
        n_bootstrap: usize,
        seed: u64,
    ) -> Result<Self> {
        let per = per_emotion_ccc(preds, targets)?;
        let c_hat = per.iter().sum::<f64>() / N_EMOTIONS as f64;
        let level = 0.95;
        let (lo, hi) = bootstrap_ci(preds, targets, n_bootstrap, level, seed)?;
        Ok(EvalReport {
            split: split.to_string(),
            variant: None,
            n_utterances: preds.len(),
            per_emotion_ccc: per.to_vec(),
            c_hat,
            ci_low: lo.min(c_hat),
            ci_high: hi.max(c_hat),
            ci_level: level,
            n_bootstrap,
            bootstrap_seed: seed,
            baseline: None,
            relative_gain: None,
        })
    }

    pub fn with_baseline(mut self, name: &str, baseline_c_hat: f64) -> Result<Self> {
        self.relative_gain = Some(relative_gain(self.c_hat, baseline_c_hat)?);
        self.baseline = Some(name.to_string());
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            field: "eval report",
            message: e.to_string(),
        })
    }

    /// `.645 [.640-.650]`: three decimals, leading zero dropped.
    pub fn score_with_ci(&self) -> String {
        format!(
            "{} [{}-{}]",
            three_places(self.c_hat),
            three_places(self.ci_low),
            three_places(self.ci_high)
        )
    }
}

fn three_places(v: f64) -> String {
    let s = format!("{v:.3}");
    if let Some(rest) = s.strip_prefix("0.") {
        format!(".{rest}")
    } else if let Some(rest) = s.strip_prefix("-0.") {
        format!("-.{rest}")
    } else {
        s
    }
}
