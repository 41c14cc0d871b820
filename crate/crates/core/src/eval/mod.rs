//! Detection metrics, the softmax-confidence baseline, out-of-distribution
//! scoring and adversarial example generation.

pub mod attack;
pub mod metrics;
pub mod msr;
pub mod ood;

pub use attack::{generate_adversarial, AdversarialExample, AdversarialReport, AttackConfig, AttackMode, TargetRule};
pub use metrics::{detection_metrics, detection_metrics_from_verdicts, DetectionReport};
pub use msr::{match_fnr, msr_confidence, msr_detect, msr_rates, MsrMatch};
pub use ood::{ood_eval, ood_report, OodReport};
