//! Synthetic corpus generator.
//!
//! The task is keyed span extraction. The vocabulary reserves its top 16 ids
//! for four *keys*, each with four role tokens: a marker, a span-start, a
//! span-middle, and a span-end. A query is background noise plus exactly one
//! key marker. An answerable passage embeds the pattern
//! `[marker, start, mid.., end]` for the query's key (the gold span covers
//! `start..=end`) along with distractor patterns built from other keys; an
//! unanswerable passage carries only distractor patterns. Remaining positions
//! are filled with background tokens.
//!
//! Every role is identified by token identity plus query key, so instances
//! are solvable position-by-position, yet distractor keys and noisy training
//! leave room for all five prediction outcomes.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{GoldAnswer, QaInstance, Span, Split, Token};
use crate::error::{Error, Result};

/// Number of distinct keys.
pub const KEYS: usize = 4;
/// Role tokens reserved at the top of the vocabulary (4 roles per key).
pub const RESERVED_TOKENS: u32 = (KEYS as u32) * 4;

/// Role tokens of one key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyTokens {
    pub marker: Token,
    pub start: Token,
    pub mid: Token,
    pub end: Token,
}

/// Role-token ids of `key` within a vocabulary of `vocab_size`.
pub fn key_tokens(vocab_size: u32, key: usize) -> KeyTokens {
    debug_assert!(key < KEYS);
    let base = vocab_size - RESERVED_TOKENS + 4 * key as u32;
    KeyTokens {
        marker: Token(base),
        start: Token(base + 1),
        mid: Token(base + 2),
        end: Token(base + 3),
    }
}

/// Parameters of the synthetic corpus. Length fields are inclusive
/// `[min, max]` ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub vocab_size: u32,
    pub train: usize,
    pub validation: usize,
    pub calibration: usize,
    pub test: usize,
    pub passage_len: (usize, usize),
    pub query_len: (usize, usize),
    pub answer_len: (usize, usize),
    /// Probability that an instance is unanswerable.
    pub p_null: f64,
    /// Number of wrong-key patterns planted in every passage.
    pub distractors: usize,
    /// Probability that an answerable passage also carries a second,
    /// non-gold pattern of the query's own key. Both patterns read
    /// identically, so resolving which one is gold requires evidence the
    /// passage does not provide.
    pub decoy: f64,
    /// Probability that the gold pattern loses its start or end role token
    /// to a plain background token, erasing one span boundary.
    pub smudge: f64,
    /// Probability that an unanswerable passage carries a partial pattern of
    /// the query's key: its marker and interior tokens, but no span
    /// boundaries. The topic is mentioned; no answer is present.
    pub lure: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 50,
            train: 2000,
            validation: 500,
            calibration: 500,
            test: 500,
            passage_len: (32, 64),
            query_len: (3, 6),
            answer_len: (2, 4),
            p_null: 0.35,
            distractors: 2,
            decoy: 0.0,
            smudge: 0.0,
            lure: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < RESERVED_TOKENS + 8 {
            return err(format!(
                "vocab_size {} too small: need {} reserved role tokens plus at least 8 background tokens",
                self.vocab_size,
                RESERVED_TOKENS
            ));
        }
        let unit = |name: &str, value: f64| {
            if (0.0..=1.0).contains(&value) {
                Ok(())
            } else {
                err(format!("{name} {value} outside [0, 1]"))
            }
        };
        unit("p_null", self.p_null)?;
        unit("decoy", self.decoy)?;
        unit("smudge", self.smudge)?;
        unit("lure", self.lure)?;
        let ordered = |name: &str, (lo, hi): (usize, usize)| {
            if lo > hi {
                err(format!("{name} range ({lo}, {hi}) has min > max"))
            } else {
                Ok(())
            }
        };
        ordered("passage_len", self.passage_len)?;
        ordered("query_len", self.query_len)?;
        ordered("answer_len", self.answer_len)?;
        if self.query_len.0 < 1 {
            return err("query_len min must be at least 1".into());
        }
        if self.answer_len.0 < 2 {
            return err(format!(
                "answer_len min {} must be at least 2 so span starts and ends stay distinct roles",
                self.answer_len.0
            ));
        }
        let pattern_slots = self.distractors + 1 + usize::from(self.decoy > 0.0);
        let worst_patterns = pattern_slots * (1 + self.answer_len.1);
        if self.passage_len.0 < worst_patterns {
            return err(format!(
                "passage_len min {} cannot hold {} patterns of up to {} tokens each",
                self.passage_len.0,
                pattern_slots,
                1 + self.answer_len.1
            ));
        }
        Ok(())
    }

    fn background_tokens(&self) -> u32 {
        self.vocab_size - RESERVED_TOKENS
    }

    fn total(&self) -> usize {
        self.train + self.validation + self.calibration + self.test
    }
}

/// Generate a deterministic corpus: identical `(config, seed)` pairs yield
/// identical instances, in a fixed order, with split tags assigned
/// train → validation → calibration → test.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Vec<QaInstance>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::with_capacity(config.total());
    let split_plan = [
        (Split::Train, config.train),
        (Split::Validation, config.validation),
        (Split::Calibration, config.calibration),
        (Split::Test, config.test),
    ];
    let mut serial = 0usize;
    for (split, count) in split_plan {
        for _ in 0..count {
            let qid = format!("synth-{serial:06}");
            serial += 1;
            instances.push(generate_instance(config, &mut rng, qid, split));
        }
    }
    Ok(instances)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PatternKind {
    /// The answer pattern the gold span points at.
    Gold,
    /// A second full pattern of the query's key; never the gold span.
    Decoy,
    /// A full pattern of some other key.
    Distractor,
    /// Marker plus interior tokens of the query's key, no span boundaries.
    Lure,
}

impl PatternKind {
    /// Tokens the pattern occupies in the passage, marker included.
    fn width(self, len: usize) -> usize {
        match self {
            PatternKind::Lure => len,
            _ => 1 + len,
        }
    }
}

fn generate_instance(
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
    qid: String,
    split: Split,
) -> QaInstance {
    let bg = config.background_tokens();
    let key = rng.gen_range(0..KEYS);
    let roles = key_tokens(config.vocab_size, key);

    // Query: background noise with the key marker planted at one position.
    let query_len = rng.gen_range(config.query_len.0..=config.query_len.1);
    let mut query: Vec<Token> = (0..query_len).map(|_| Token(rng.gen_range(0..bg))).collect();
    let marker_pos = rng.gen_range(0..query_len);
    query[marker_pos] = roles.marker;

    let answerable = rng.gen::<f64>() >= config.p_null;
    let passage_len = rng.gen_range(config.passage_len.0..=config.passage_len.1);

    // Assemble the patterns to plant.
    let mut patterns: Vec<(PatternKind, KeyTokens, usize)> = Vec::new();
    if answerable {
        let answer_len = rng.gen_range(config.answer_len.0..=config.answer_len.1);
        patterns.push((PatternKind::Gold, roles, answer_len));
        if config.decoy > 0.0 && rng.gen::<f64>() < config.decoy {
            let len = rng.gen_range(config.answer_len.0..=config.answer_len.1);
            patterns.push((PatternKind::Decoy, roles, len));
        }
    } else if config.lure > 0.0 && rng.gen::<f64>() < config.lure {
        let len = rng.gen_range(config.answer_len.0..=config.answer_len.1);
        patterns.push((PatternKind::Lure, roles, len));
    }
    for _ in 0..config.distractors {
        // Any key other than the query's key keeps the passage free of
        // accidental gold spans.
        let mut wrong = rng.gen_range(0..KEYS - 1);
        if wrong >= key {
            wrong += 1;
        }
        let len = rng.gen_range(config.answer_len.0..=config.answer_len.1);
        patterns.push((PatternKind::Distractor, key_tokens(config.vocab_size, wrong), len));
    }
    patterns.shuffle(rng);

    // Distribute the leftover background tokens into the gaps around the
    // patterns (stars and bars with sorted cut points).
    let pattern_tokens: usize = patterns.iter().map(|(kind, _, len)| kind.width(*len)).sum();
    let filler = passage_len - pattern_tokens;
    let mut cuts: Vec<usize> = (0..patterns.len()).map(|_| rng.gen_range(0..=filler)).collect();
    cuts.sort_unstable();

    let mut passage: Vec<Token> = Vec::with_capacity(passage_len);
    let mut gold_span: Option<Span> = None;
    let mut prev_cut = 0usize;
    for ((kind, tokens, len), cut) in patterns.into_iter().zip(cuts) {
        for _ in prev_cut..cut {
            passage.push(Token(rng.gen_range(0..bg)));
        }
        prev_cut = cut;
        passage.push(tokens.marker);
        if kind == PatternKind::Lure {
            for _ in 0..len - 1 {
                passage.push(tokens.mid);
            }
            continue;
        }
        let span_start = passage.len();
        passage.push(tokens.start);
        for _ in 0..len.saturating_sub(2) {
            passage.push(tokens.mid);
        }
        passage.push(tokens.end);
        if kind == PatternKind::Gold {
            gold_span = Some(Span {
                start: span_start,
                end: span_start + len - 1,
            });
        }
    }
    for _ in prev_cut..filler {
        passage.push(Token(rng.gen_range(0..bg)));
    }
    debug_assert_eq!(passage.len(), passage_len);

    // A smudged instance keeps its gold label but loses one span boundary
    // token, so the span can no longer be read off the surface form. The
    // replacement is always token 0, which also occurs as ordinary background
    // noise: a smudge scar is suggestive, never conclusive.
    if answerable && config.smudge > 0.0 && rng.gen::<f64>() < config.smudge {
        let gold = gold_span.expect("answerable instances carry a gold span");
        let position = if rng.gen_bool(0.5) { gold.start } else { gold.end };
        passage[position] = Token(0);
    }

    let gold = match gold_span {
        Some(span) => GoldAnswer::Answerable(vec![span]),
        None => GoldAnswer::Null,
    };
    QaInstance {
        qid,
        query,
        passage,
        gold,
        split,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SynthConfig {
        SynthConfig {
            vocab_size: 40,
            train: 40,
            validation: 10,
            calibration: 10,
            test: 10,
            passage_len: (18, 30),
            query_len: (2, 4),
            answer_len: (2, 3),
            p_null: 0.4,
            distractors: 2,
            decoy: 0.0,
            smudge: 0.0,
            lure: 0.0,
        }
    }

    fn query_key(config: &SynthConfig, inst: &QaInstance) -> usize {
        let reserved_base = config.vocab_size - RESERVED_TOKENS;
        let markers: Vec<u32> = inst
            .query
            .iter()
            .filter(|t| t.0 >= reserved_base)
            .map(|t| t.0)
            .collect();
        assert_eq!(markers.len(), 1, "query must carry exactly one role token");
        let offset = markers[0] - reserved_base;
        assert_eq!(offset % 4, 0, "the query role token must be a marker");
        (offset / 4) as usize
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let config = small_config();
        let a = generate_synthetic(&config, 7).unwrap();
        let b = generate_synthetic(&config, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&config, 8).unwrap();
        assert_ne!(a, c, "a different seed should change the corpus");
    }

    #[test]
    fn split_counts_follow_the_config() {
        let config = small_config();
        let instances = generate_synthetic(&config, 1).unwrap();
        let count = |s: Split| instances.iter().filter(|i| i.split == s).count();
        assert_eq!(count(Split::Train), 40);
        assert_eq!(count(Split::Validation), 10);
        assert_eq!(count(Split::Calibration), 10);
        assert_eq!(count(Split::Test), 10);
        assert_eq!(instances.len(), 70);
    }

    #[test]
    fn p_null_extremes_pin_answerability() {
        let mut config = small_config();
        config.p_null = 1.0;
        assert!(generate_synthetic(&config, 3)
            .unwrap()
            .iter()
            .all(|i| i.gold.is_null()));
        config.p_null = 0.0;
        assert!(generate_synthetic(&config, 3)
            .unwrap()
            .iter()
            .all(|i| !i.gold.is_null()));
    }

    #[test]
    fn null_rate_tracks_p_null() {
        let mut config = small_config();
        config.train = 4000;
        config.p_null = 0.35;
        let instances = generate_synthetic(&config, 11).unwrap();
        let nulls = instances.iter().filter(|i| i.gold.is_null()).count() as f64;
        let rate = nulls / instances.len() as f64;
        // three standard deviations of a binomial at n >= 1000
        let sigma = (0.35f64 * 0.65 / instances.len() as f64).sqrt();
        assert!(
            (rate - 0.35).abs() < 3.0 * sigma,
            "null rate {rate} strays too far from 0.35"
        );
    }

    #[test]
    fn gold_spans_carry_the_keyed_pattern() {
        let config = small_config();
        for inst in generate_synthetic(&config, 5).unwrap() {
            let key = query_key(&config, &inst);
            let roles = key_tokens(config.vocab_size, key);
            if let GoldAnswer::Answerable(spans) = &inst.gold {
                let span = spans[0];
                assert_eq!(inst.passage[span.start], roles.start);
                assert_eq!(inst.passage[span.end], roles.end);
                for pos in span.start + 1..span.end {
                    assert_eq!(inst.passage[pos], roles.mid);
                }
                assert_eq!(
                    inst.passage[span.start - 1],
                    roles.marker,
                    "the key marker precedes the gold span"
                );
            }
        }
    }

    #[test]
    fn unanswerable_passages_omit_the_query_key() {
        let config = small_config();
        for inst in generate_synthetic(&config, 9).unwrap() {
            if inst.gold.is_null() {
                let key = query_key(&config, &inst);
                let roles = key_tokens(config.vocab_size, key);
                assert!(
                    !inst.passage.iter().any(|t| *t == roles.start),
                    "{}: unanswerable passage contains the query key's start token",
                    inst.qid
                );
            }
        }
    }

    #[test]
    fn every_instance_validates() {
        let config = small_config();
        for inst in generate_synthetic(&config, 2).unwrap() {
            inst.validate().unwrap();
            inst.validate_vocab(config.vocab_size).unwrap();
            assert!(inst.passage.len() >= config.passage_len.0);
            assert!(inst.passage.len() <= config.passage_len.1);
        }
    }

    #[test]
    fn impossible_configs_are_rejected() {
        let mut tiny_vocab = small_config();
        tiny_vocab.vocab_size = 20;
        assert!(generate_synthetic(&tiny_vocab, 0).is_err());

        let mut cramped = small_config();
        cramped.passage_len = (4, 30);
        assert!(generate_synthetic(&cramped, 0).is_err());

        let mut single = small_config();
        single.answer_len = (1, 3);
        assert!(generate_synthetic(&single, 0).is_err());

        let mut bad_null = small_config();
        bad_null.p_null = 1.5;
        assert!(generate_synthetic(&bad_null, 0).is_err());
    }

    #[test]
    fn decoys_duplicate_the_query_pattern() {
        let mut config = small_config();
        config.decoy = 1.0;
        config.p_null = 0.0;
        for inst in generate_synthetic(&config, 13).unwrap() {
            let key = query_key(&config, &inst);
            let roles = key_tokens(config.vocab_size, key);
            let count = |t: Token| inst.passage.iter().filter(|&&p| p == t).count();
            assert_eq!(count(roles.marker), 2, "{}: gold plus one decoy marker", inst.qid);
            assert_eq!(count(roles.start), 2);
            assert_eq!(count(roles.end), 2);

            // The decoy reads as a complete pattern, outside the gold span.
            let GoldAnswer::Answerable(spans) = &inst.gold else {
                panic!("p_null = 0 must make every instance answerable");
            };
            let gold = spans[0];
            let decoy_start = inst
                .passage
                .iter()
                .position(|&t| t == roles.start)
                .filter(|&p| p != gold.start)
                .or_else(|| {
                    inst.passage[gold.start + 1..]
                        .iter()
                        .position(|&t| t == roles.start)
                        .map(|p| gold.start + 1 + p)
                })
                .unwrap();
            assert_eq!(inst.passage[decoy_start - 1], roles.marker);
            let decoy_end = (decoy_start..inst.passage.len())
                .find(|&p| inst.passage[p] == roles.end)
                .unwrap();
            assert!(decoy_end < gold.start || decoy_start > gold.end, "decoy overlaps gold");
            for pos in decoy_start + 1..decoy_end {
                assert_eq!(inst.passage[pos], roles.mid);
            }
        }
    }

    #[test]
    fn smudge_erases_exactly_one_gold_boundary() {
        let mut config = small_config();
        config.smudge = 1.0;
        config.p_null = 0.0;
        let reserved_base = config.vocab_size - RESERVED_TOKENS;
        for inst in generate_synthetic(&config, 17).unwrap() {
            let key = query_key(&config, &inst);
            let roles = key_tokens(config.vocab_size, key);
            let GoldAnswer::Answerable(spans) = &inst.gold else {
                panic!("p_null = 0 must make every instance answerable");
            };
            let gold = spans[0];
            let start_intact = inst.passage[gold.start] == roles.start;
            let end_intact = inst.passage[gold.end] == roles.end;
            assert!(
                start_intact != end_intact,
                "{}: exactly one boundary must be smudged",
                inst.qid
            );
            let smudged = if start_intact { gold.end } else { gold.start };
            assert!(
                inst.passage[smudged].0 < reserved_base,
                "the smudge writes a background token"
            );
            for pos in gold.start + 1..gold.end {
                assert_eq!(inst.passage[pos], roles.mid, "interior tokens stay intact");
            }
            assert_eq!(inst.passage[gold.start - 1], roles.marker);
        }
    }

    #[test]
    fn lures_mention_the_topic_without_an_answer() {
        let mut config = small_config();
        config.lure = 1.0;
        config.p_null = 1.0;
        for inst in generate_synthetic(&config, 19).unwrap() {
            assert!(inst.gold.is_null());
            let key = query_key(&config, &inst);
            let roles = key_tokens(config.vocab_size, key);
            let count = |t: Token| inst.passage.iter().filter(|&&p| p == t).count();
            assert_eq!(count(roles.marker), 1, "{}: the lure plants the marker", inst.qid);
            assert!(count(roles.mid) >= 1, "{}: the lure carries interior tokens", inst.qid);
            assert_eq!(count(roles.start), 0, "a lure must never open a span");
            assert_eq!(count(roles.end), 0, "a lure must never close a span");
        }
    }

    #[test]
    fn difficulty_knobs_must_be_probabilities() {
        for field in ["decoy", "smudge", "lure"] {
            let mut config = small_config();
            match field {
                "decoy" => config.decoy = -0.1,
                "smudge" => config.smudge = 1.5,
                _ => config.lure = f64::NAN,
            }
            let err = generate_synthetic(&config, 0).unwrap_err();
            assert!(err.to_string().contains(field), "error names the field: {err}");
        }
    }

    #[test]
    fn decoys_count_against_passage_capacity() {
        let mut config = small_config();
        config.passage_len = (14, 30);
        assert!(generate_synthetic(&config, 0).is_ok());
        config.decoy = 0.5;
        assert!(
            generate_synthetic(&config, 0).is_err(),
            "the extra pattern no longer fits the shortest passage"
        );
    }
}
