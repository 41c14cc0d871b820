use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{Outcome, Verdict};

/// Natural-error detection quality of the early-exit system.
///
/// Negatives are samples the baseline network misclassifies, positives the
/// ones it gets right. TNR is the no-decision rate among negatives, FNR the
/// no-decision rate among positives. Percentages are in `[0, 100]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub total: usize,
    pub positives: usize,
    pub negatives: usize,
    pub correct: usize,
    pub no_decision: usize,
    pub bad: usize,
    pub nd_positives: usize,
    pub nd_negatives: usize,
    pub early: usize,
    pub pct_correct: f64,
    pub pct_nd: f64,
    pub pct_bad: f64,
    /// `None` when there are no negatives.
    pub tnr: Option<f64>,
    /// `None` when there are no positives.
    pub fnr: Option<f64>,
    pub early_exit_pct: f64,
}

impl DetectionReport {
    /// Correct answers plus abstentions.
    pub fn pct_good(&self) -> f64 {
        self.pct_correct + self.pct_nd
    }
}

fn pct(num: usize, den: usize) -> f64 {
    100.0 * num as f64 / den as f64
}

pub fn detection_metrics(baseline: &[usize], truths: &[usize], outcomes: &[Outcome]) -> Result<DetectionReport> {
    let verdicts: Vec<(Verdict, bool)> = outcomes.iter().map(|o| (o.verdict, o.early)).collect();
    detection_metrics_from_verdicts(baseline, truths, &verdicts)
}

/// Same as [`detection_metrics`] over bare `(verdict, early)` pairs.
pub fn detection_metrics_from_verdicts(
    baseline: &[usize],
    truths: &[usize],
    verdicts: &[(Verdict, bool)],
) -> Result<DetectionReport> {
    let n = truths.len();
    if baseline.len() != n || verdicts.len() != n {
        return Err(Error::ShapeMismatch {
            expected: vec![n, n, n],
            actual: vec![baseline.len(), truths.len(), verdicts.len()],
        });
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no samples to score".into()));
    }
    let mut r = DetectionReport {
        total: n,
        positives: 0,
        negatives: 0,
        correct: 0,
        no_decision: 0,
        bad: 0,
        nd_positives: 0,
        nd_negatives: 0,
        early: 0,
        pct_correct: 0.0,
        pct_nd: 0.0,
        pct_bad: 0.0,
        tnr: None,
        fnr: None,
        early_exit_pct: 0.0,
    };
    for ((&b, &y), &(v, early)) in baseline.iter().zip(truths).zip(verdicts) {
        let positive = b == y;
        if positive {
            r.positives += 1;
        } else {
            r.negatives += 1;
        }
        match v {
            Verdict::NoDecision => {
                r.no_decision += 1;
                if positive {
                    r.nd_positives += 1;
                } else {
                    r.nd_negatives += 1;
                }
            }
            Verdict::Classified(c) if c == y => r.correct += 1,
            Verdict::Classified(_) => r.bad += 1,
        }
        r.early += usize::from(early);
    }
    r.pct_correct = pct(r.correct, n);
    r.pct_nd = pct(r.no_decision, n);
    r.pct_bad = pct(r.bad, n);
    r.early_exit_pct = pct(r.early, n);
    r.tnr = (r.negatives > 0).then(|| pct(r.nd_negatives, r.negatives));
    r.fnr = (r.positives > 0).then(|| pct(r.nd_positives, r.positives));
    Ok(r)
}
