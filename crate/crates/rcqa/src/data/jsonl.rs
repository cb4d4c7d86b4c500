//! Dataset serialization: JSON-lines instances and plain-text vocabularies.
//!
//! Each dataset line is one record:
//! `{"qid": ..., "query": ..., "passage": ..., "answers": [...], "split": ...}`.
//! `query` and `passage` hold either token-id arrays or whitespace-separated
//! text; text requires a vocabulary to map tokens to ids. An empty `answers`
//! array marks the instance unanswerable.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{GoldAnswer, QaInstance, Span, Split, Token};
use crate::error::{Error, Result};

/// Token-string table. Ids are line indices in the backing file.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build from an ordered token list, rejecting duplicates and
    /// whitespace-bearing entries (they could not round-trip through text).
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::InvalidInput(format!(
                    "vocabulary entry {i} ({tok:?}) is empty or contains whitespace"
                )));
            }
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::InvalidInput(format!(
                    "vocabulary entry {i} duplicates token {tok:?}"
                )));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Load from a file with one token per line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::new(text.lines().map(str::to_owned).collect())
    }

    /// Write one token per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut body = String::new();
        for tok in &self.tokens {
            body.push_str(tok);
            body.push('\n');
        }
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<Token> {
        self.index.get(token).copied().map(Token)
    }

    pub fn token(&self, id: Token) -> Option<&str> {
        self.tokens.get(id.idx()).map(String::as_str)
    }
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    qid: String,
    query: TokenField,
    passage: TokenField,
    answers: Vec<RawSpan>,
    split: Split,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TokenField {
    Ids(Vec<u32>),
    Text(String),
}

#[derive(Serialize, Deserialize)]
struct RawSpan {
    start: usize,
    end: usize,
}

fn resolve_tokens(
    field: &TokenField,
    field_name: &str,
    vocab: Option<&Vocabulary>,
) -> std::result::Result<Vec<Token>, String> {
    match field {
        TokenField::Ids(ids) => {
            if let Some(v) = vocab {
                for &id in ids {
                    if id as usize >= v.len() {
                        return Err(format!(
                            "{field_name}: token id {id} out of range for vocabulary of {}",
                            v.len()
                        ));
                    }
                }
            }
            Ok(ids.iter().map(|&id| Token(id)).collect())
        }
        TokenField::Text(text) => {
            let v = vocab.ok_or_else(|| {
                format!("{field_name}: text form requires a vocabulary (pass one with --vocab)")
            })?;
            text.split_whitespace()
                .map(|word| {
                    v.id(word)
                        .ok_or_else(|| format!("{field_name}: unknown token {word:?}"))
                })
                .collect()
        }
    }
}

/// Load a JSON-lines dataset. A vocabulary is required when any record uses
/// text fields and, when present, also bounds-checks token ids. Errors name
/// the file, 1-based line, and offending field.
pub fn load_jsonl(path: impl AsRef<Path>, vocab: Option<&Vocabulary>) -> Result<Vec<QaInstance>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut instances = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line)
            .map_err(|e| Error::data_format(path, lineno, e.to_string()))?;
        let instance =
            raw_to_instance(&raw, vocab).map_err(|msg| Error::data_format(path, lineno, msg))?;
        instances.push(instance);
    }
    Ok(instances)
}

fn raw_to_instance(
    raw: &RawRecord,
    vocab: Option<&Vocabulary>,
) -> std::result::Result<QaInstance, String> {
    let query = resolve_tokens(&raw.query, "query", vocab)?;
    let passage = resolve_tokens(&raw.passage, "passage", vocab)?;
    let mut spans = Vec::with_capacity(raw.answers.len());
    for (i, ans) in raw.answers.iter().enumerate() {
        let span = Span::new(ans.start, ans.end)
            .map_err(|e| format!("answers[{i}]: {e}"))?;
        if span.end >= passage.len() {
            return Err(format!(
                "answers[{i}]: span end {} exceeds passage length {}",
                span.end,
                passage.len()
            ));
        }
        spans.push(span);
    }
    let gold = if spans.is_empty() {
        GoldAnswer::Null
    } else {
        GoldAnswer::Answerable(spans)
    };
    let instance = QaInstance {
        qid: raw.qid.clone(),
        query,
        passage,
        gold,
        split: raw.split,
    };
    instance.validate().map_err(|e| e.to_string())?;
    Ok(instance)
}

/// Write instances as JSON lines in token-id form, one record per line, in
/// input order.
pub fn save_jsonl(path: impl AsRef<Path>, instances: &[QaInstance]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    for inst in instances {
        let answers = match &inst.gold {
            GoldAnswer::Answerable(spans) => spans
                .iter()
                .map(|s| RawSpan {
                    start: s.start,
                    end: s.end,
                })
                .collect(),
            GoldAnswer::Null => Vec::new(),
        };
        let raw = RawRecord {
            qid: inst.qid.clone(),
            query: TokenField::Ids(inst.query.iter().map(|t| t.0).collect()),
            passage: TokenField::Ids(inst.passage.iter().map(|t| t.0).collect()),
            answers,
            split: inst.split,
        };
        let line = serde_json::to_string(&raw).expect("record serialization cannot fail");
        writeln!(writer, "{line}").map_err(|e| Error::io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}
