//! Targeted L2 attacks in the Carlini-Wagner style.
//!
//! The image is reparameterized as `x = (tanh(w) + 1) / 2` to stay in the
//! unit box, and `|x - x0|^2 + lambda * margin(x)` is minimized by plain
//! gradient descent for each `lambda` of a fixed increasing schedule. The
//! full-knowledge attacker also pushes every auxiliary cell towards the
//! target with a binary cross-entropy term.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::inference::{check_racs, infer_with_costs, InferencePolicy, PathCosts};
use crate::nn::{LossSpec, Network};
use crate::rac::Rac;
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    ZeroKnowledge,
    FullKnowledge,
}

impl AttackMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackMode::ZeroKnowledge => "zero_knowledge",
            AttackMode::FullKnowledge => "full_knowledge",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    /// `(y + 1) mod c`.
    Next,
    /// Uniform over the other classes, seeded per sample.
    Random,
    /// The class with the lowest clean logit.
    LeastLikely,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub target: TargetRule,
    /// Margin the target logit must clear.
    pub kappa: f64,
    pub learning_rate: f64,
    /// Gradient steps per schedule entry.
    pub iterations: usize,
    /// Increasing weights of the misclassification term.
    pub lambdas: Vec<f64>,
    /// Weight of the cell loss relative to the margin (full knowledge only).
    pub rac_loss_weight: f64,
    /// Attack at most this many correctly classified samples.
    pub max_samples: Option<usize>,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            mode: AttackMode::ZeroKnowledge,
            target: TargetRule::Random,
            kappa: 0.0,
            learning_rate: 0.01,
            iterations: 100,
            lambdas: vec![0.1, 1.0, 10.0, 100.0],
            rac_loss_weight: 1.0,
            max_samples: None,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("attack.{m}")));
        if self.mode == AttackMode::FullKnowledge && !(self.rac_loss_weight > 0.0) {
            return bad("rac_loss_weight must be positive for a full-knowledge attack");
        }
        if self.lambdas.is_empty() || self.lambdas.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return bad("lambdas must be a non-empty list of positive numbers");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.kappa >= 0.0) {
            return bad("kappa must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialExample {
    /// Index into the attacked dataset.
    pub index: usize,
    pub true_label: usize,
    pub target: usize,
    pub input: Tensor,
    pub l2: f64,
    /// Every auxiliary cell also predicts the target.
    pub cells_fooled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialReport {
    pub mode: AttackMode,
    pub attempted: usize,
    pub succeeded: usize,
    /// Percent of attempted samples whose baseline prediction became the target.
    pub success_rate: f64,
    /// Mean L2 distortion over successful samples only.
    pub mean_l2: Option<f64>,
    pub cells_fooled: usize,
    pub flagged_nd: Option<usize>,
    /// Percent of successful adversaries that end in no decision.
    pub adv_tnr: Option<f64>,
}

fn pick_target(rule: TargetRule, y: usize, logits: &[f64], seed: u64, index: usize) -> usize {
    let c = logits.len();
    match rule {
        TargetRule::Next => (y + 1) % c,
        TargetRule::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64 + 1).wrapping_mul(0xA076_1D64_78BD_642F));
            (y + 1 + rng.random_range(0..c - 1)) % c
        }
        TargetRule::LeastLikely => {
            let neg: Vec<f64> = logits.iter().map(|v| -v).collect();
            argmax(&neg)
        }
    }
}

struct Candidate {
    input: Tensor,
    l2: f64,
    cells_fooled: bool,
}

fn better(new: &Candidate, old: &Option<Candidate>) -> bool {
    match old {
        None => true,
        Some(o) => (new.cells_fooled, -new.l2) > (o.cells_fooled, -o.l2),
    }
}

fn attack_one(net: &Network, racs: &[Rac], x0: &Tensor, target: usize, cfg: &AttackConfig) -> Result<Option<Candidate>> {
    let full = cfg.mode == AttackMode::FullKnowledge;
    let tap_ids: Vec<usize> = if full { racs.iter().map(|r| r.layer).collect() } else { vec![] };
    let margin = LossSpec::Margin {
        target,
        kappa: cfg.kappa,
    };
    let w0: Vec<f64> = x0
        .data()
        .iter()
        .map(|&v| (2.0 * v - 1.0).clamp(-1.0 + 1e-6, 1.0 - 1e-6).atanh())
        .collect();
    let mut best: Option<Candidate> = None;
    for &lambda in &cfg.lambdas {
        let mut w = w0.clone();
        for _ in 0..cfg.iterations {
            let t: Vec<f64> = w.iter().map(|v| v.tanh()).collect();
            let x = Tensor::new(x0.shape().to_vec(), t.iter().map(|v| 0.5 * (v + 1.0)).collect())?;
            let mut fooled_fc = false;
            let mut fooled_cells = !racs.is_empty() && full;
            let (_, grad_x) = net.input_gradient_with(&x, &tap_ids, |logits, taps| {
                fooled_fc = argmax(logits.data()) == target;
                let (m, mut dlogits) = margin.evaluate(logits)?;
                dlogits.data_mut().iter_mut().for_each(|g| *g *= lambda);
                let mut value = lambda * m;
                let mut tap_grads = BTreeMap::new();
                for rac in racs.iter().filter(|_| full) {
                    let tap = &taps[&rac.layer];
                    let out = rac.forward(tap)?;
                    fooled_cells &= out.class == target;
                    let (bce, g) = rac.target_loss_gradient(tap.data(), target)?;
                    let scale = lambda * cfg.rac_loss_weight;
                    value += scale * bce;
                    tap_grads.insert(
                        rac.layer,
                        Tensor::new(tap.shape().to_vec(), g.into_iter().map(|v| v * scale).collect())?,
                    );
                }
                Ok((value, dlogits, tap_grads))
            })?;
            let delta: Vec<f64> = x.data().iter().zip(x0.data()).map(|(a, b)| a - b).collect();
            if fooled_fc {
                let cand = Candidate {
                    l2: delta.iter().map(|d| d * d).sum::<f64>().sqrt(),
                    input: x.clone(),
                    cells_fooled: fooled_cells,
                };
                if better(&cand, &best) {
                    best = Some(cand);
                }
            }
            for (i, wi) in w.iter_mut().enumerate() {
                let g = (2.0 * delta[i] + grad_x.data()[i]) * 0.5 * (1.0 - t[i] * t[i]);
                *wi -= cfg.learning_rate * g;
            }
        }
        let done = match &best {
            Some(b) => !full || b.cells_fooled,
            None => false,
        };
        if done {
            break;
        }
    }
    Ok(best)
}

/// Attacks the samples of `data` that the network classifies correctly.
/// With `system`, successful adversaries are also run through the early-exit
/// system to measure how many end in no decision.
pub fn generate_adversarial(
    net: &Network,
    system: Option<(&[Rac], &InferencePolicy)>,
    data: &LabeledDataset,
    cfg: &AttackConfig,
) -> Result<(Vec<AdversarialExample>, AdversarialReport)> {
    cfg.validate()?;
    if let Some((racs, policy)) = system {
        check_racs(net, racs, policy)?;
    }
    let racs: &[Rac] = system.map_or(&[], |(r, _)| r);
    if cfg.mode == AttackMode::FullKnowledge && racs.is_empty() {
        return Err(Error::InvalidArgument("a full-knowledge attack needs the auxiliary cells".into()));
    }
    let mut chosen = Vec::new();
    for i in 0..data.len() {
        if cfg.max_samples.is_some_and(|m| chosen.len() >= m) {
            break;
        }
        let logits = net.forward(&data.input_tensor(i))?;
        if argmax(logits.data()) == data.label(i) {
            chosen.push((i, logits));
        }
    }
    let err = Mutex::new(None);
    let examples: Vec<AdversarialExample> = chosen
        .par_iter()
        .filter_map(|(i, logits)| {
            let y = data.label(*i);
            let target = pick_target(cfg.target, y, logits.data(), cfg.seed, *i);
            match attack_one(net, racs, &data.input_tensor(*i), target, cfg) {
                Ok(found) => found.map(|c| AdversarialExample {
                    index: *i,
                    true_label: y,
                    target,
                    input: c.input,
                    l2: c.l2,
                    cells_fooled: c.cells_fooled,
                }),
                Err(e) => {
                    err.lock().expect("not poisoned").get_or_insert(e);
                    None
                }
            }
        })
        .collect();
    if let Some(e) = err.into_inner().expect("not poisoned") {
        return Err(e);
    }

    let succeeded = examples.len();
    let attempted = chosen.len();
    let flagged_nd = match system {
        Some((racs, policy)) => {
            let costs = PathCosts::new(net, racs, policy)?;
            let mut nd = 0;
            for ex in &examples {
                nd += usize::from(infer_with_costs(net, racs, policy, &costs, &ex.input)?.verdict.is_nd());
            }
            Some(nd)
        }
        None => None,
    };
    let report = AdversarialReport {
        mode: cfg.mode,
        attempted,
        succeeded,
        success_rate: if attempted == 0 {
            0.0
        } else {
            100.0 * succeeded as f64 / attempted as f64
        },
        mean_l2: (succeeded > 0).then(|| examples.iter().map(|e| e.l2).sum::<f64>() / succeeded as f64),
        cells_fooled: examples.iter().filter(|e| e.cells_fooled).count(),
        flagged_nd,
        adv_tnr: flagged_nd
            .filter(|_| succeeded > 0)
            .map(|nd| 100.0 * nd as f64 / succeeded as f64),
    };
    Ok((examples, report))
}
