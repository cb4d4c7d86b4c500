//! Decision model, risk calibration, and selective-prediction metrics.
//!
//! A scored instance pairs an outcome with its confidence. The decision model
//! accepts an instance when its confidence clears a threshold; everything
//! else is rejected (the system falls back to "no answer"). Risk counts only
//! wrong direct answers, so the metric suite works over losses derived from
//! outcomes:
//!
//! * [`coverage`] — fraction of instances accepted.
//! * [`selective_risk`] — mean loss over accepted instances (0 at coverage 0).
//! * [`rc_curve`] — risk at every empirical coverage level, sweeping the
//!   confidence ranking from the top.
//! * [`aurc`] — mean of the curve's risk values (lower is better).
//! * [`roc_auc`] / [`average_precision`] — ranking quality with loss-0
//!   instances as positives.
//! * [`calibrate`] — largest-coverage threshold whose selective risk stays
//!   within a target.
//!
//! By default evaluation covers instances the reader answered directly
//! ([`Scope::Direct`]); [`Scope::All`] widens it to every outcome, with null
//! outcomes carrying loss 0.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{web_qa_loss, Outcome};
use crate::error::{Error, Result};

/// Which outcomes enter a scored evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// Direct answers only: AD+, AD−, UD (the default).
    #[default]
    Direct,
    /// All five outcomes; AN and UN join with loss 0.
    All,
}

impl Scope {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scope::Direct => "direct",
            Scope::All => "all",
        }
    }

    /// Whether `outcome` belongs in a set of this scope.
    pub fn admits(&self, outcome: Outcome) -> bool {
        match self {
            Scope::Direct => outcome.is_direct(),
            Scope::All => true,
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Scope::Direct),
            "all" => Ok(Scope::All),
            other => Err(Error::InvalidInput(format!(
                "unknown scope {other:?} (expected \"direct\" or \"all\")"
            ))),
        }
    }
}

/// One evaluation unit: an outcome plus the confidence a scorer assigned to
/// it. Serialized as `{"qid", "outcome", "confidence"}`, the interchange
/// format between scoring and metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScored")]
pub struct ScoredInstance {
    qid: String,
    outcome: Outcome,
    confidence: f64,
}

#[derive(Deserialize)]
struct RawScored {
    qid: String,
    outcome: Outcome,
    confidence: f64,
}

impl TryFrom<RawScored> for ScoredInstance {
    type Error = Error;

    fn try_from(raw: RawScored) -> Result<Self> {
        ScoredInstance::widened(raw.qid, raw.outcome, raw.confidence)
    }
}

impl ScoredInstance {
    /// A direct-answer instance (the default evaluation scope). Null-answer
    /// outcomes are rejected here; use [`ScoredInstance::widened`] for them.
    pub fn direct(qid: impl Into<String>, outcome: Outcome, confidence: f64) -> Result<Self> {
        if !outcome.is_direct() {
            return Err(Error::InvalidInput(format!(
                "outcome {outcome} is not a direct answer; direct-scope sets exclude it"
            )));
        }
        Self::widened(qid, outcome, confidence)
    }

    /// An instance under widened scope: any outcome, loss 0 for null answers.
    pub fn widened(qid: impl Into<String>, outcome: Outcome, confidence: f64) -> Result<Self> {
        if !(confidence.is_finite() && (0.0..=1.0).contains(&confidence)) {
            return Err(Error::InvalidInput(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(ScoredInstance {
            qid: qid.into(),
            outcome,
            confidence,
        })
    }

    pub fn qid(&self) -> &str {
        &self.qid
    }

    pub fn outcome(&self) -> Outcome {
        self.outcome
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    /// 1 for a wrong direct answer, 0 otherwise.
    pub fn loss(&self) -> u8 {
        web_qa_loss(self.outcome)
    }
}

/// Write scored instances as JSON lines.
pub fn save_scored(path: impl AsRef<Path>, scored: &[ScoredInstance]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in scored {
        let line = serde_json::to_string(inst).expect("scored serialization cannot fail");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Load scored instances, validating confidences (range check happens in
/// deserialization).
pub fn load_scored(path: impl AsRef<Path>) -> Result<Vec<ScoredInstance>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut scored = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: ScoredInstance = serde_json::from_str(&line)
            .map_err(|e| Error::data_format(path, lineno + 1, e.to_string()))?;
        scored.push(inst);
    }
    Ok(scored)
}

/// Threshold rule over confidences: accept iff `confidence >= threshold`.
/// `reject_all` marks the degenerate model calibration falls back to when no
/// positive-coverage threshold meets the risk target — no finite threshold
/// in [0, 1] can reject a confidence of 1.0 otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionModel {
    pub threshold: f64,
    #[serde(default)]
    pub reject_all: bool,
}

impl DecisionModel {
    pub fn new(threshold: f64) -> Result<Self> {
        let dm = DecisionModel {
            threshold,
            reject_all: false,
        };
        dm.validate()?;
        Ok(dm)
    }

    /// The model that rejects every instance.
    pub fn reject_all() -> Self {
        DecisionModel {
            threshold: 1.0,
            reject_all: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold.is_finite() && (0.0..=1.0).contains(&self.threshold)) {
            return Err(Error::InvalidInput(format!(
                "decision threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }

    /// Accept or reject one confidence (boundary inclusive).
    pub fn accepts(&self, confidence: f64) -> bool {
        !self.reject_all && confidence >= self.threshold
    }
}

fn require_non_empty(scored: &[ScoredInstance], what: &str) -> Result<()> {
    if scored.is_empty() {
        return Err(Error::EmptyInput(what.into()));
    }
    Ok(())
}

/// Fraction of instances the decision model accepts.
pub fn coverage(scored: &[ScoredInstance], dm: &DecisionModel) -> Result<f64> {
    require_non_empty(scored, "coverage evaluation set")?;
    let accepted = scored.iter().filter(|s| dm.accepts(s.confidence)).count();
    Ok(accepted as f64 / scored.len() as f64)
}

/// Mean loss over accepted instances; 0 when nothing is accepted.
pub fn selective_risk(scored: &[ScoredInstance], dm: &DecisionModel) -> Result<f64> {
    require_non_empty(scored, "risk evaluation set")?;
    let mut accepted = 0usize;
    let mut losses = 0usize;
    for inst in scored {
        if dm.accepts(inst.confidence) {
            accepted += 1;
            losses += inst.loss() as usize;
        }
    }
    if accepted == 0 {
        return Ok(0.0);
    }
    Ok(losses as f64 / accepted as f64)
}

/// Indices of `scored` sorted by confidence descending, ties keeping input
/// order. Every ranking in this module flows through this one sort.
fn ranked_indices(scored: &[ScoredInstance]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[b]
            .confidence
            .partial_cmp(&scored[a].confidence)
            .expect("confidences are finite")
    });
    order
}

/// The empirical risk-coverage curve: for k = 1..n, the risk of accepting
/// exactly the k most-confident instances, as (k/n, risk-in-top-k) points.
pub fn rc_curve(scored: &[ScoredInstance]) -> Result<Vec<(f64, f64)>> {
    require_non_empty(scored, "risk-coverage evaluation set")?;
    let n = scored.len();
    let mut points = Vec::with_capacity(n);
    let mut losses = 0usize;
    for (k, &idx) in ranked_indices(scored).iter().enumerate() {
        let k = k + 1;
        losses += scored[idx].loss() as usize;
        points.push((k as f64 / n as f64, losses as f64 / k as f64));
    }
    Ok(points)
}

/// Area under the empirical risk-coverage curve: the mean of its n risk
/// values. Lower is better; 0 for an all-correct set.
pub fn aurc(scored: &[ScoredInstance]) -> Result<f64> {
    let points = rc_curve(scored)?;
    Ok(points.iter().map(|&(_, r)| r).sum::<f64>() / points.len() as f64)
}

/// Probability that a random loss-0 instance outranks a random loss-1
/// instance, ties counting half (the Mann–Whitney statistic). Computed by
/// average ranks; errors unless both classes are present.
pub fn roc_auc(scored: &[ScoredInstance]) -> Result<f64> {
    require_non_empty(scored, "ROC evaluation set")?;
    let mut by_conf: Vec<(f64, bool)> = scored
        .iter()
        .map(|s| (s.confidence, s.loss() == 0))
        .collect();
    by_conf.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("confidences are finite"));
    let positives = by_conf.iter().filter(|&&(_, pos)| pos).count();
    let negatives = by_conf.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::MetricUndefined(format!(
            "ROC-AUC needs both classes; set has {positives} positives and {negatives} negatives"
        )));
    }
    // sum of average ascending ranks (1-based) over positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < by_conf.len() {
        let mut j = i;
        while j < by_conf.len() && by_conf[j].0 == by_conf[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        let tied_positives = by_conf[i..j].iter().filter(|&&(_, pos)| pos).count();
        rank_sum += avg_rank * tied_positives as f64;
        i = j;
    }
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// Mean precision at the rank of each loss-0 instance, ranking by confidence
/// descending with stable ties. Errors when the set has no positives.
pub fn average_precision(scored: &[ScoredInstance]) -> Result<f64> {
    require_non_empty(scored, "AP evaluation set")?;
    let mut positives_seen = 0usize;
    let mut precision_sum = 0.0;
    for (k, &idx) in ranked_indices(scored).iter().enumerate() {
        if scored[idx].loss() == 0 {
            positives_seen += 1;
            precision_sum += positives_seen as f64 / (k + 1) as f64;
        }
    }
    if positives_seen == 0 {
        return Err(Error::MetricUndefined(
            "average precision needs at least one loss-0 instance".into(),
        ));
    }
    Ok(precision_sum / positives_seen as f64)
}

/// Candidate thresholds for calibration and sweeps: 0 plus every distinct
/// confidence, ascending. (The reject-all fallback is handled separately —
/// it is not a finite threshold.)
pub fn candidate_thresholds(scored: &[ScoredInstance]) -> Vec<f64> {
    let mut candidates: Vec<f64> = scored.iter().map(|s| s.confidence).collect();
    candidates.push(0.0);
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("confidences are finite"));
    candidates.dedup();
    candidates
}

/// Find the decision model with the largest coverage whose selective risk on
/// `scored` stays ≤ `target_risk`; among coverage ties the smallest threshold
/// wins. When no positive-coverage candidate is feasible the reject-all
/// model is returned (check `reject_all` to detect this).
pub fn calibrate(scored: &[ScoredInstance], target_risk: f64) -> Result<DecisionModel> {
    require_non_empty(scored, "calibration set")?;
    if !(target_risk.is_finite() && (0.0..=1.0).contains(&target_risk)) {
        return Err(Error::InvalidInput(format!(
            "target risk {target_risk} outside [0, 1]"
        )));
    }
    let mut best: Option<(f64, DecisionModel)> = None;
    for threshold in candidate_thresholds(scored) {
        let dm = DecisionModel::new(threshold)?;
        let cov = coverage(scored, &dm)?;
        if cov == 0.0 || selective_risk(scored, &dm)? > target_risk {
            continue;
        }
        // ascending thresholds: strict > keeps the smallest threshold per
        // coverage level
        if best.as_ref().is_none_or(|&(c, _)| cov > c) {
            best = Some((cov, dm));
        }
    }
    Ok(best.map_or_else(DecisionModel::reject_all, |(_, dm)| dm))
}
