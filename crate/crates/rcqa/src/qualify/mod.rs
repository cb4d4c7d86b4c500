//! Confidence scoring: how sure is the system that the reader's answer is
//! right?
//!
//! Every scorer maps an instance to a confidence in [0, 1]:
//!
//! * [`ProbeCnnModel`] — a small convolutional network over the stacked
//!   per-layer probe distributions, trained to rank correct direct answers
//!   above wrong ones with a pairwise hinge ([`pairwise_hinge`]).
//! * [`proba_score`] — the reader's own maximum span probability.
//! * [`aes_score`] — averaged span probabilities across the reader's
//!   per-epoch snapshots, then the same maximum.
//! * [`ens_score`] — the same averaging across independently initialized
//!   readers.
//! * [`oracle_score`] — hindsight upper bound: 1 for correct direct answers,
//!   0 for wrong ones.
//!
//! [`score_instances`] runs one scorer over a dataset slice and emits the
//! scored records the decision module consumes.

mod baselines;
mod cnn;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use baselines::{aes_score, average_probs, ens_score, proba_score};
pub use cnn::{train_probe_cnn, CnnParams, ProbeCnnConfig, ProbeCnnModel, TrainedProbeCnn};

use crate::backbone::{decode, BackboneModel};
use crate::data::{categorize, web_qa_loss, Outcome, QaInstance};
use crate::decision::{Scope, ScoredInstance};
use crate::error::{Error, Result};
use crate::numerics::Dense3;
use crate::probes::{probe_forward, LayerSignals, ProbeParams};

/// Which probe layers feed the convolutional scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerMask {
    /// Every probed layer (the default).
    #[default]
    All,
    /// Only the top layer — the single-probe ablation.
    Last,
}

impl LayerMask {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerMask::All => "all",
            LayerMask::Last => "last",
        }
    }

    /// The slice of per-layer signals this mask admits.
    pub fn select<'a>(&self, signals: &'a [LayerSignals]) -> &'a [LayerSignals] {
        match self {
            LayerMask::All => signals,
            LayerMask::Last => {
                let n = signals.len();
                &signals[n.saturating_sub(1)..]
            }
        }
    }
}

impl fmt::Display for LayerMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(LayerMask::All),
            "last" => Ok(LayerMask::Last),
            other => Err(Error::InvalidInput(format!(
                "unknown layer mask {other:?} (expected \"all\" or \"last\")"
            ))),
        }
    }
}

/// Stack per-layer probe distributions into a 2-channel array: channel 0
/// holds the start vectors, channel 1 the end vectors, one row per layer
/// (bottom first), one column per slot.
pub fn stack_signals(signals: &[LayerSignals]) -> Result<Dense3> {
    if signals.is_empty() {
        return Err(Error::EmptyInput("signal stack".into()));
    }
    let cols = signals[0].start.len();
    let rows = signals.len();
    for (t, layer) in signals.iter().enumerate() {
        for (side, vec) in [("start", &layer.start), ("end", &layer.end)] {
            if vec.len() != cols {
                return Err(Error::Shape(format!(
                    "ragged signals: layer {t} {side} vector has {} slots, expected {cols}",
                    vec.len()
                )));
            }
        }
    }
    let mut values = Vec::with_capacity(2 * rows * cols);
    for layer in signals {
        values.extend_from_slice(&layer.start);
    }
    for layer in signals {
        values.extend_from_slice(&layer.end);
    }
    Dense3::new(2, rows, cols, values)
}

/// The pairwise ranking hinge: `max(0, 1 - g_correct + g_wrong)`. Zero once
/// the correct answer outscores the wrong one by a full margin; depends on
/// the scores only through their difference.
pub fn pairwise_hinge(g_correct: f64, g_wrong: f64) -> f64 {
    (1.0 - g_correct + g_wrong).max(0.0)
}

/// Hindsight confidence: one minus the outcome's loss, so every loss-free
/// outcome ranks above every lossy one and the oracle's ROC and AP are
/// always exactly 1 under either scope.
pub fn oracle_score(outcome: Outcome) -> f64 {
    1.0 - f64::from(web_qa_loss(outcome))
}

/// A confidence scorer. Averaging variants own the models they average over;
/// the trained reader being evaluated is supplied at scoring time.
#[derive(Debug, Clone)]
pub enum QualifyModel {
    /// Convolutional scorer over stacked probe signals.
    ProbeCnn(ProbeCnnModel),
    /// The reader's own maximum span probability.
    Proba,
    /// Average over per-epoch snapshots of the reader.
    Aes(Vec<BackboneModel>),
    /// Average over independently initialized readers.
    Ens(Vec<BackboneModel>),
    /// Hindsight 0/1 scorer.
    Oracle,
}

impl QualifyModel {
    pub fn name(&self) -> &'static str {
        match self {
            QualifyModel::ProbeCnn(_) => "probe-cnn",
            QualifyModel::Proba => "proba",
            QualifyModel::Aes(_) => "aes",
            QualifyModel::Ens(_) => "ens",
            QualifyModel::Oracle => "oracle",
        }
    }
}

/// Run one scorer over `instances`: decode the reader's prediction, keep the
/// outcomes `scope` admits, and attach the scorer's confidence. Records come
/// back in input order.
pub fn score_instances(
    model: &QualifyModel,
    backbone: &BackboneModel,
    probes: &ProbeParams,
    instances: &[QaInstance],
    scope: Scope,
) -> Result<Vec<ScoredInstance>> {
    let span_cap = backbone.config().span_cap;
    let mut out = Vec::with_capacity(instances.len());
    for inst in instances {
        inst.validate()?;
        let fwd = backbone.forward(&inst.query, &inst.passage)?;
        let pred = decode(&fwd.start_probs, &fwd.end_probs, span_cap)?;
        let outcome = categorize(&inst.gold, &pred);
        if !scope.admits(outcome) {
            continue;
        }
        let confidence = match model {
            QualifyModel::ProbeCnn(cnn) => {
                cnn.score(&probe_forward(probes, &fwd.activations)?)?
            }
            QualifyModel::Proba => proba_score(&fwd.start_probs, &fwd.end_probs, span_cap)?,
            QualifyModel::Aes(snapshots) => aes_score(snapshots, inst, span_cap)?,
            QualifyModel::Ens(members) => ens_score(members, inst, span_cap)?,
            QualifyModel::Oracle => oracle_score(outcome),
        };
        out.push(ScoredInstance::widened(inst.qid.clone(), outcome, confidence)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(start: &[f64], end: &[f64]) -> LayerSignals {
        LayerSignals {
            start: start.to_vec(),
            end: end.to_vec(),
        }
    }

    #[test]
    fn stack_has_documented_layout() {
        let signals = vec![
            layer(&[0.2, 0.3, 0.5, 0.0, 0.0], &[0.1, 0.1, 0.1, 0.1, 0.6]),
            layer(&[1.0, 0.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 0.0, 1.0]),
            layer(&[0.2, 0.2, 0.2, 0.2, 0.2], &[0.5, 0.5, 0.0, 0.0, 0.0]),
        ];
        let stacked = stack_signals(&signals).unwrap();
        assert_eq!(
            (stacked.channels(), stacked.rows(), stacked.cols()),
            (2, 3, 5)
        );
        for (t, sig) in signals.iter().enumerate() {
            for c in 0..5 {
                assert_eq!(stacked.get(0, t, c), sig.start[c]);
                assert_eq!(stacked.get(1, t, c), sig.end[c]);
            }
        }
        for channel in 0..2 {
            for row in 0..3 {
                let sum: f64 = (0..5).map(|c| stacked.get(channel, row, c)).sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn stack_rejects_ragged_and_empty_input() {
        assert!(stack_signals(&[]).is_err());
        let ragged = vec![
            layer(&[0.5, 0.5], &[0.5, 0.5]),
            layer(&[1.0], &[0.5, 0.5]),
        ];
        let err = stack_signals(&ragged).unwrap_err().to_string();
        assert!(err.contains("ragged"), "{err}");
    }

    #[test]
    fn layer_mask_selects_expected_slices() {
        let signals = vec![
            layer(&[1.0, 0.0], &[1.0, 0.0]),
            layer(&[0.0, 1.0], &[0.0, 1.0]),
        ];
        assert_eq!(LayerMask::All.select(&signals).len(), 2);
        let last = LayerMask::Last.select(&signals);
        assert_eq!(last.len(), 1);
        assert_eq!(last[0], signals[1]);
        assert_eq!("last".parse::<LayerMask>().unwrap(), LayerMask::Last);
        assert!("top".parse::<LayerMask>().is_err());
    }

    #[test]
    fn hinge_matches_hand_arithmetic() {
        assert!((pairwise_hinge(0.9, 0.2) - 0.3).abs() < 1e-15);
        assert!((pairwise_hinge(0.2, 0.9) - 1.7).abs() < 1e-15);
        assert_eq!(pairwise_hinge(1.0, 0.0), 0.0);
    }

    #[test]
    fn hinge_depends_only_on_score_differences() {
        for (a, b) in [(0.9, 0.2), (0.1, 0.7), (0.5, 0.5)] {
            for shift in [-0.4, 0.0, 0.3] {
                assert!(
                    (pairwise_hinge(a + shift, b + shift) - pairwise_hinge(a, b)).abs() < 1e-12
                );
            }
        }
    }

    #[test]
    fn oracle_score_is_one_minus_loss() {
        assert_eq!(oracle_score(Outcome::AdPlus), 1.0);
        assert_eq!(oracle_score(Outcome::AdMinus), 0.0);
        assert_eq!(oracle_score(Outcome::Ud), 0.0);
        assert_eq!(oracle_score(Outcome::An), 1.0);
        assert_eq!(oracle_score(Outcome::Un), 1.0);
    }
}
