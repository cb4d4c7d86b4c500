//! Core data model: tokens, spans, instances, prediction outcomes.
//!
//! An instance pairs a tokenized query with a tokenized passage. The gold
//! answer is either a non-empty set of spans in the passage or "null"
//! (no answer present). A reader produces either a direct span prediction or
//! abstains with a null prediction; crossing gold with prediction yields one
//! of five outcomes, two of which count as errors.

mod jsonl;
mod synth;

pub use jsonl::{load_jsonl, save_jsonl, Vocabulary};
pub use synth::{generate_synthetic, key_tokens, SynthConfig, KEYS, RESERVED_TOKENS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vocabulary id of a single token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u32);

impl Token {
    /// The id as a usize, for indexing embedding tables.
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Inclusive token span `[start, end]` within a passage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    /// Construct a span, rejecting `start > end`.
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(Error::InvalidInput(format!(
                "span start {start} exceeds end {end}"
            )));
        }
        Ok(Span { start, end })
    }

    /// Number of tokens covered (inclusive on both ends).
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false // a span always covers at least one token
    }
}

/// Gold answer for an instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GoldAnswer {
    /// At least one acceptable span exists in the passage.
    Answerable(Vec<Span>),
    /// The passage does not answer the query.
    Null,
}

impl GoldAnswer {
    /// Build an answerable gold answer; the span list must be non-empty.
    pub fn answerable(spans: Vec<Span>) -> Result<Self> {
        if spans.is_empty() {
            return Err(Error::InvalidInput(
                "answerable gold answer requires at least one span".into(),
            ));
        }
        Ok(GoldAnswer::Answerable(spans))
    }

    pub fn is_null(&self) -> bool {
        matches!(self, GoldAnswer::Null)
    }
}

/// Which portion of the corpus an instance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Calibration,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::Train,
        Split::Validation,
        Split::Calibration,
        Split::Test,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Calibration => "calibration",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One question-answering instance.
#[derive(Debug, Clone, PartialEq)]
pub struct QaInstance {
    pub qid: String,
    pub query: Vec<Token>,
    pub passage: Vec<Token>,
    pub gold: GoldAnswer,
    pub split: Split,
}

impl QaInstance {
    /// Check internal consistency: non-empty qid/query/passage and all gold
    /// spans inside the passage.
    pub fn validate(&self) -> Result<()> {
        if self.qid.is_empty() {
            return Err(Error::InvalidInput("instance has empty qid".into()));
        }
        if self.query.is_empty() {
            return Err(Error::InvalidInput(format!("{}: empty query", self.qid)));
        }
        if self.passage.is_empty() {
            return Err(Error::InvalidInput(format!("{}: empty passage", self.qid)));
        }
        if let GoldAnswer::Answerable(spans) = &self.gold {
            for span in spans {
                if span.end >= self.passage.len() {
                    return Err(Error::InvalidInput(format!(
                        "{}: gold span {}..{} exceeds passage length {}",
                        self.qid,
                        span.start,
                        span.end,
                        self.passage.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Check that every token id is below the vocabulary size.
    pub fn validate_vocab(&self, vocab_size: u32) -> Result<()> {
        for tok in self.query.iter().chain(self.passage.iter()) {
            if tok.0 >= vocab_size {
                return Err(Error::InvalidInput(format!(
                    "{}: token id {} out of range for vocabulary of {}",
                    self.qid, tok.0, vocab_size
                )));
            }
        }
        Ok(())
    }
}

/// Reader output for one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "PredictionRepr", into = "PredictionRepr")]
pub enum Prediction {
    /// A concrete answer span with the decoder's probability for it.
    Direct { span: Span, score: f64 },
    /// The reader declares the question unanswerable from this passage.
    Null,
}

impl Prediction {
    pub fn is_null(&self) -> bool {
        matches!(self, Prediction::Null)
    }
}

/// Serialized shape of [`Prediction`]: a tagged record that stays flat in
/// JSON lines.
#[derive(Serialize, Deserialize, Clone, Copy)]
#[serde(tag = "type", rename_all = "snake_case")]
enum PredictionRepr {
    Span { start: usize, end: usize, score: f64 },
    Null,
}

impl From<PredictionRepr> for Prediction {
    fn from(repr: PredictionRepr) -> Self {
        match repr {
            PredictionRepr::Span { start, end, score } => Prediction::Direct {
                span: Span { start, end },
                score,
            },
            PredictionRepr::Null => Prediction::Null,
        }
    }
}

impl From<Prediction> for PredictionRepr {
    fn from(pred: Prediction) -> Self {
        match pred {
            Prediction::Direct { span, score } => PredictionRepr::Span {
                start: span.start,
                end: span.end,
                score,
            },
            Prediction::Null => PredictionRepr::Null,
        }
    }
}

/// Joint outcome of gold answer and prediction.
///
/// Naming: `Ad*` = answerable gold with a direct prediction (correct `+` or
/// wrong `-`), `An` = answerable gold but the reader said null, `Un` = null
/// gold and the reader said null, `Ud` = null gold but the reader answered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    #[serde(rename = "AD+")]
    AdPlus,
    #[serde(rename = "AD-")]
    AdMinus,
    #[serde(rename = "AN")]
    An,
    #[serde(rename = "UN")]
    Un,
    #[serde(rename = "UD")]
    Ud,
}

impl Outcome {
    pub const ALL: [Outcome; 5] = [
        Outcome::AdPlus,
        Outcome::AdMinus,
        Outcome::An,
        Outcome::Un,
        Outcome::Ud,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::AdPlus => "AD+",
            Outcome::AdMinus => "AD-",
            Outcome::An => "AN",
            Outcome::Un => "UN",
            Outcome::Ud => "UD",
        }
    }

    /// Outcomes where the reader committed to a direct answer.
    pub fn is_direct(self) -> bool {
        matches!(self, Outcome::AdPlus | Outcome::AdMinus | Outcome::Ud)
    }
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Classify a prediction against the gold answer.
pub fn categorize(gold: &GoldAnswer, pred: &Prediction) -> Outcome {
    match (gold, pred) {
        (GoldAnswer::Answerable(spans), Prediction::Direct { span, .. }) => {
            if spans.contains(span) {
                Outcome::AdPlus
            } else {
                Outcome::AdMinus
            }
        }
        (GoldAnswer::Answerable(_), Prediction::Null) => Outcome::An,
        (GoldAnswer::Null, Prediction::Null) => Outcome::Un,
        (GoldAnswer::Null, Prediction::Direct { .. }) => Outcome::Ud,
    }
}

/// Task loss: wrong direct answers and answers to unanswerable questions
/// cost 1; everything else (correct answers and any abstention on either
/// side) costs 0.
pub fn web_qa_loss(outcome: Outcome) -> u8 {
    match outcome {
        Outcome::AdMinus | Outcome::Ud => 1,
        Outcome::AdPlus | Outcome::An | Outcome::Un => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(s: usize, e: usize) -> Span {
        Span::new(s, e).unwrap()
    }

    #[test]
    fn span_rejects_inverted_bounds() {
        assert!(Span::new(5, 3).is_err());
        assert_eq!(span(2, 2).len(), 1);
        assert_eq!(span(1, 4).len(), 4);
    }

    #[test]
    fn answerable_gold_requires_spans() {
        assert!(GoldAnswer::answerable(vec![]).is_err());
        assert!(GoldAnswer::answerable(vec![span(0, 1)]).is_ok());
    }

    #[test]
    fn categorize_matches_the_outcome_table() {
        let gold_a = GoldAnswer::answerable(vec![span(3, 5)]).unwrap();
        let hit = Prediction::Direct {
            span: span(3, 5),
            score: 0.9,
        };
        let miss = Prediction::Direct {
            span: span(3, 4),
            score: 0.9,
        };
        assert_eq!(categorize(&gold_a, &hit), Outcome::AdPlus);
        assert_eq!(categorize(&gold_a, &miss), Outcome::AdMinus);
        assert_eq!(categorize(&gold_a, &Prediction::Null), Outcome::An);
        assert_eq!(categorize(&GoldAnswer::Null, &Prediction::Null), Outcome::Un);
        assert_eq!(categorize(&GoldAnswer::Null, &hit), Outcome::Ud);
    }

    #[test]
    fn categorize_accepts_any_listed_gold_span() {
        let gold = GoldAnswer::answerable(vec![span(0, 1), span(7, 9)]).unwrap();
        let second = Prediction::Direct {
            span: span(7, 9),
            score: 0.2,
        };
        assert_eq!(categorize(&gold, &second), Outcome::AdPlus);
    }

    #[test]
    fn loss_is_one_exactly_for_wrong_commitments() {
        assert_eq!(web_qa_loss(Outcome::AdPlus), 0);
        assert_eq!(web_qa_loss(Outcome::AdMinus), 1);
        assert_eq!(web_qa_loss(Outcome::An), 0);
        assert_eq!(web_qa_loss(Outcome::Un), 0);
        assert_eq!(web_qa_loss(Outcome::Ud), 1);
    }

    #[test]
    fn loss_agrees_with_categorize_for_every_combination() {
        let golds = [
            GoldAnswer::answerable(vec![span(1, 2)]).unwrap(),
            GoldAnswer::Null,
        ];
        let preds = [
            Prediction::Direct {
                span: span(1, 2),
                score: 1.0,
            },
            Prediction::Direct {
                span: span(0, 0),
                score: 1.0,
            },
            Prediction::Null,
        ];
        for gold in &golds {
            for pred in &preds {
                let outcome = categorize(gold, pred);
                let committed_wrong = match (gold, pred) {
                    (GoldAnswer::Answerable(spans), Prediction::Direct { span, .. }) => {
                        !spans.contains(span)
                    }
                    (GoldAnswer::Null, Prediction::Direct { .. }) => true,
                    _ => false,
                };
                assert_eq!(
                    web_qa_loss(outcome) == 1,
                    committed_wrong,
                    "loss must flag exactly the wrong commitments (outcome {outcome})"
                );
            }
        }
    }

    #[test]
    fn outcome_serde_uses_compact_labels() {
        for outcome in Outcome::ALL {
            let json = serde_json::to_string(&outcome).unwrap();
            assert_eq!(json, format!("\"{}\"", outcome.as_str()));
            let back: Outcome = serde_json::from_str(&json).unwrap();
            assert_eq!(back, outcome);
        }
    }

    #[test]
    fn prediction_serde_round_trips() {
        let direct = Prediction::Direct {
            span: span(2, 4),
            score: 0.56,
        };
        let json = serde_json::to_string(&direct).unwrap();
        assert!(json.contains("\"type\":\"span\""), "got {json}");
        assert_eq!(serde_json::from_str::<Prediction>(&json).unwrap(), direct);

        let null_json = serde_json::to_string(&Prediction::Null).unwrap();
        assert!(null_json.contains("\"type\":\"null\""), "got {null_json}");
        assert_eq!(
            serde_json::from_str::<Prediction>(&null_json).unwrap(),
            Prediction::Null
        );
    }

    #[test]
    fn instance_validation_catches_out_of_range_spans() {
        let inst = QaInstance {
            qid: "q1".into(),
            query: vec![Token(1)],
            passage: vec![Token(2), Token(3)],
            gold: GoldAnswer::answerable(vec![span(1, 2)]).unwrap(),
            split: Split::Train,
        };
        assert!(inst.validate().is_err());
    }
}
