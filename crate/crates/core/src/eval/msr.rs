//! Maximal softmax response: abstain when the top softmax probability is
//! below a threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::softmax;

/// Largest softmax probability of a logit vector.
pub fn msr_confidence(logits: &[f64]) -> f64 {
    softmax(logits).into_iter().fold(0.0, f64::max)
}

/// `true` (no decision) when the confidence is below `threshold`.
pub fn msr_detect(logits: &[f64], threshold: f64) -> bool {
    msr_confidence(logits) < threshold
}

/// TNR and FNR in percent of the rule at `threshold`; `positive[i]` marks
/// samples the baseline classifies correctly.
pub fn msr_rates(confidence: &[f64], positive: &[bool], threshold: f64) -> (Option<f64>, Option<f64>) {
    let (mut p, mut n, mut nd_p, mut nd_n) = (0usize, 0usize, 0usize, 0usize);
    for (&c, &pos) in confidence.iter().zip(positive) {
        let nd = c < threshold;
        if pos {
            p += 1;
            nd_p += usize::from(nd);
        } else {
            n += 1;
            nd_n += usize::from(nd);
        }
    }
    let rate = |k: usize, d: usize| (d > 0).then(|| 100.0 * k as f64 / d as f64);
    (rate(nd_n, n), rate(nd_p, p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsrMatch {
    pub threshold: f64,
    pub target_fnr: f64,
    pub fnr: f64,
    pub tnr: Option<f64>,
    /// `|fnr - target_fnr| <= tolerance`.
    pub comparable: bool,
}

/// Finds by bisection the threshold whose FNR is closest to `target_fnr`
/// (percent) and reports the TNR there.
pub fn match_fnr(confidence: &[f64], positive: &[bool], target_fnr: f64, tolerance: f64) -> Result<MsrMatch> {
    if confidence.len() != positive.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![confidence.len()],
            actual: vec![positive.len()],
        });
    }
    if !positive.iter().any(|&p| p) {
        return Err(Error::InvalidArgument("FNR matching needs at least one positive sample".into()));
    }
    let fnr_at = |t: f64| msr_rates(confidence, positive, t).1.expect("positives exist");
    // FNR is nondecreasing in the threshold
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64 + f64::EPSILON);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if fnr_at(mid) < target_fnr {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let threshold = if (fnr_at(lo) - target_fnr).abs() <= (fnr_at(hi) - target_fnr).abs() {
        lo
    } else {
        hi
    };
    let (tnr, fnr) = msr_rates(confidence, positive, threshold);
    let fnr = fnr.expect("positives exist");
    Ok(MsrMatch {
        threshold,
        target_fnr,
        fnr,
        tnr,
        comparable: (fnr - target_fnr).abs() <= tolerance,
    })
}
