//! Probability-based confidence baselines: the reader's own maximum span
//! probability, and its averages over training snapshots or independently
//! initialized readers.

use crate::backbone::BackboneModel;
use crate::data::QaInstance;
use crate::error::{Error, Result};

/// The maximum probability of any candidate answer span: max over non-null
/// spans `(s, e)` with `s <= e` and length at most `span_cap` of
/// `start_probs[s] * end_probs[e]`. The null slot (last entry) never enters
/// the max — this scores the best direct answer.
pub fn proba_score(start_probs: &[f64], end_probs: &[f64], span_cap: usize) -> Result<f64> {
    validate_distribution("start", start_probs)?;
    validate_distribution("end", end_probs)?;
    if start_probs.len() != end_probs.len() {
        return Err(Error::Shape(format!(
            "start and end vectors disagree: {} vs {} slots",
            start_probs.len(),
            end_probs.len()
        )));
    }
    if span_cap == 0 {
        return Err(Error::InvalidInput("span cap must be at least 1".into()));
    }
    let passage_len = start_probs.len() - 1;
    let mut best = 0.0f64;
    for s in 0..passage_len {
        let last = (s + span_cap - 1).min(passage_len - 1);
        for e in s..=last {
            best = best.max(start_probs[s] * end_probs[e]);
        }
    }
    Ok(best)
}

fn validate_distribution(name: &str, probs: &[f64]) -> Result<()> {
    if probs.len() < 2 {
        return Err(Error::Shape(format!(
            "{name} vector needs at least one passage slot plus the null slot, got {}",
            probs.len()
        )));
    }
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|&p| !p.is_finite() || p < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "{name} vector is not a probability distribution (sum {sum})"
        )));
    }
    Ok(())
}

/// Run every model on one instance and average the resulting start and end
/// probability vectors (equal weights). The average of distributions is a
/// distribution, so the result feeds [`proba_score`] directly.
pub fn average_probs(
    models: &[BackboneModel],
    instance: &QaInstance,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if models.is_empty() {
        return Err(Error::EmptyInput("model list for probability averaging".into()));
    }
    let slots = instance.passage.len() + 1;
    let mut start = vec![0.0; slots];
    let mut end = vec![0.0; slots];
    let weight = 1.0 / models.len() as f64;
    for model in models {
        let fwd = model.forward(&instance.query, &instance.passage)?;
        for (acc, p) in start.iter_mut().zip(&fwd.start_probs) {
            *acc += weight * p;
        }
        for (acc, p) in end.iter_mut().zip(&fwd.end_probs) {
            *acc += weight * p;
        }
    }
    Ok((start, end))
}

/// Snapshot-averaged confidence: average the span distributions across the
/// reader's per-epoch snapshots, then take the maximum span probability.
pub fn aes_score(
    snapshots: &[BackboneModel],
    instance: &QaInstance,
    span_cap: usize,
) -> Result<f64> {
    let (start, end) = average_probs(snapshots, instance)?;
    proba_score(&start, &end, span_cap)
}

/// Ensemble-averaged confidence: the same averaging rule over independently
/// initialized, independently trained readers.
pub fn ens_score(
    members: &[BackboneModel],
    instance: &QaInstance,
    span_cap: usize,
) -> Result<f64> {
    let (start, end) = average_probs(members, instance)?;
    proba_score(&start, &end, span_cap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::{GoldAnswer, Span, Split, Token};

    #[test]
    fn proba_enumerates_spans_and_skips_null() {
        // two passage slots plus null
        let s = [0.7, 0.2, 0.1];
        let e = [0.1, 0.8, 0.1];
        // spans: (0,0)=0.07, (0,1)=0.56, (1,1)=0.16
        assert!((proba_score(&s, &e, 2).unwrap() - 0.56).abs() < 1e-15);
        // cap 1 removes (0,1)
        assert!((proba_score(&s, &e, 1).unwrap() - 0.16).abs() < 1e-15);
    }

    #[test]
    fn proba_is_one_for_matching_one_hot_vectors() {
        let s = [0.0, 1.0, 0.0, 0.0];
        let e = [0.0, 1.0, 0.0, 0.0];
        assert_eq!(proba_score(&s, &e, 3).unwrap(), 1.0);
    }

    #[test]
    fn proba_on_uniform_vectors_is_inverse_square() {
        let m = 5.0;
        let probs = vec![1.0 / m; 5];
        // span cap wide enough that some span exists; every product is 1/m²
        assert!((proba_score(&probs, &probs, 4).unwrap() - 1.0 / (m * m)).abs() < 1e-15);
    }

    #[test]
    fn proba_rejects_non_probability_input() {
        assert!(proba_score(&[0.9, 0.9, 0.1], &[0.5, 0.4, 0.1], 2).is_err());
        assert!(proba_score(&[0.5, 0.5, f64::NAN], &[0.4, 0.3, 0.3], 2).is_err());
        assert!(proba_score(&[1.0], &[1.0], 2).is_err());
        assert!(proba_score(&[0.5, 0.5], &[0.5, 0.5], 0).is_err());
    }

    fn instance() -> QaInstance {
        QaInstance {
            qid: "q".into(),
            query: vec![Token(1), Token(2)],
            passage: vec![Token(3), Token(4), Token(5)],
            gold: GoldAnswer::answerable(vec![Span { start: 0, end: 1 }]).unwrap(),
            split: Split::Test,
        }
    }

    fn model(seed: u64) -> BackboneModel {
        BackboneModel::init(&BackboneConfig {
            vocab_size: 10,
            embed_width: 4,
            hidden_width: 4,
            layers: 2,
            span_cap: 3,
            positional: false,
            epochs: 1,
            batch_size: 1,
            learning_rate: 1e-3,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn identical_members_reduce_to_plain_proba() {
        let m = model(3);
        let inst = instance();
        let fwd = m.forward(&inst.query, &inst.passage).unwrap();
        let direct = proba_score(&fwd.start_probs, &fwd.end_probs, 3).unwrap();
        let trio = vec![m.clone(), m.clone(), m];
        assert!((aes_score(&trio, &inst, 3).unwrap() - direct).abs() < 1e-12);
        assert!((ens_score(&trio, &inst, 3).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn averaged_vectors_remain_distributions() {
        let members = vec![model(1), model(2), model(3)];
        let (start, end) = average_probs(&members, &instance()).unwrap();
        for vec in [&start, &end] {
            let sum: f64 = vec.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(vec.iter().all(|&p| p >= 0.0));
        }
        assert!(average_probs(&[], &instance()).is_err());
    }

    #[test]
    fn disjoint_one_hot_average_scores_a_quarter() {
        // two members concentrated on disjoint spans: averaging gives 0.5 on
        // each, and every candidate span peaks at 0.5 * 0.5
        let a_start = [1.0, 0.0, 0.0];
        let a_end = [1.0, 0.0, 0.0];
        let b_start = [0.0, 1.0, 0.0];
        let b_end = [0.0, 1.0, 0.0];
        let avg_start: Vec<f64> = a_start.iter().zip(&b_start).map(|(x, y)| (x + y) / 2.0).collect();
        let avg_end: Vec<f64> = a_end.iter().zip(&b_end).map(|(x, y)| (x + y) / 2.0).collect();
        assert!((proba_score(&avg_start, &avg_end, 2).unwrap() - 0.25).abs() < 1e-15);
    }
}
