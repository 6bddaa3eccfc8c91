//! JSONL corpus records, validation and the train/test/val split.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FaetError, Result};

/// Binary sentiment label: 0 = negative, 1 = positive.
pub type Label = u8;

/// One sample: text tokens, emoji tokens and an optional label.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenizedDoc {
    pub text_tokens: Vec<String>,
    pub emoji_tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

impl TokenizedDoc {
    pub fn new(text: &[&str], emojis: &[&str], label: Option<Label>) -> Self {
        TokenizedDoc {
            text_tokens: text.iter().map(|s| s.to_string()).collect(),
            emoji_tokens: emojis.iter().map(|s| s.to_string()).collect(),
            label,
        }
    }

    /// Key identifying the document's text, used by the precomputed encoder.
    pub fn text_key(&self) -> String {
        self.text_tokens.join(" ")
    }
}

/// Whether records must carry a label and at least one emoji.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordMode {
    Labeled,
    Predict,
}

#[derive(Deserialize)]
struct RawRecord {
    text_tokens: Vec<String>,
    #[serde(default)]
    emoji_tokens: Vec<String>,
    #[serde(default)]
    label: Option<i64>,
}

/// Parses and validates one JSONL line (`line_no` is 1-based, for errors).
pub fn parse_jsonl_record(line: &str, line_no: usize, mode: RecordMode) -> Result<TokenizedDoc> {
    let err = |message: String| FaetError::Record {
        line: line_no,
        message,
    };
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| err(format!("malformed record: {e}")))?;
    if raw.text_tokens.is_empty() {
        return Err(err("empty text: text_tokens must hold at least one token".into()));
    }
    if raw.text_tokens.iter().chain(&raw.emoji_tokens).any(String::is_empty) {
        return Err(err("empty token string".into()));
    }
    let label = match raw.label {
        None => None,
        Some(l @ (0 | 1)) => Some(l as Label),
        Some(other) => return Err(err(format!("label must be 0 or 1, got {other}"))),
    };
    if mode == RecordMode::Labeled {
        if label.is_none() {
            return Err(err("label required".into()));
        }
        if raw.emoji_tokens.is_empty() {
            return Err(err("emoji required: labeled records need at least one emoji token".into()));
        }
    }
    Ok(TokenizedDoc {
        text_tokens: raw.text_tokens,
        emoji_tokens: raw.emoji_tokens,
        label,
    })
}

/// Reads a JSONL corpus, skipping blank lines.
pub fn read_jsonl(path: &Path, mode: RecordMode) -> Result<Vec<TokenizedDoc>> {
    let file = File::open(path).map_err(|e| FaetError::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| FaetError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(parse_jsonl_record(&line, i + 1, mode)?);
    }
    Ok(docs)
}

pub fn write_jsonl(path: &Path, docs: &[TokenizedDoc]) -> Result<()> {
    let file = File::create(path).map_err(|e| FaetError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for d in docs {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n").map_err(|e| FaetError::io(path, e))?;
    }
    out.flush().map_err(|e| FaetError::io(path, e))
}

/// Split proportions (train:test:val) and the shuffle seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub test: f64,
    pub val: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 7.0,
            test: 2.0,
            val: 1.0,
            seed: 0,
        }
    }
}

pub const MIN_SPLIT_DOCS: usize = 10;

impl SplitSpec {
    /// Parses `"7:2:1"`-style ratios.
    pub fn parse_ratios(text: &str, seed: u64) -> Result<Self> {
        let parts: Vec<f64> = text
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| FaetError::Config(format!("ratios {text:?}: {e}")))?;
        let [train, test, val] = parts[..] else {
            return Err(FaetError::Config(format!(
                "ratios {text:?}: expected train:test:val"
            )));
        };
        let spec = SplitSpec {
            train,
            test,
            val,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if [self.train, self.test, self.val]
            .iter()
            .any(|r| !r.is_finite() || *r <= 0.0)
        {
            return Err(FaetError::Config(format!(
                "split ratios must be positive, got {}:{}:{}",
                self.train, self.test, self.val
            )));
        }
        Ok(())
    }

    /// Partition sizes `(train, test, val)` for `n` documents: test and val
    /// are floored, train takes the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let total = self.train + self.test + self.val;
        // The epsilon absorbs representation error in ratios like 0.7:0.2:0.1.
        let part = |r: f64| ((n as f64) * r / total + 1e-9).floor() as usize;
        let n_test = part(self.test);
        let n_val = part(self.val);
        (n - n_test - n_val, n_test, n_val)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<TokenizedDoc>,
    pub test: Vec<TokenizedDoc>,
    pub val: Vec<TokenizedDoc>,
}

/// Seeded shuffle followed by the floor-rule partition of [`SplitSpec::sizes`].
pub fn split_corpus(docs: &[TokenizedDoc], spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    if docs.len() < MIN_SPLIT_DOCS {
        return Err(FaetError::Data(format!(
            "need at least {MIN_SPLIT_DOCS} documents to split, got {}",
            docs.len()
        )));
    }
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let (n_train, n_test, _) = spec.sizes(docs.len());
    let take = |range: &[usize]| range.iter().map(|&i| docs[i].clone()).collect();
    Ok(Splits {
        train: take(&order[..n_train]),
        test: take(&order[n_train..n_train + n_test]),
        val: take(&order[n_train + n_test..]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_valid_record() {
        let d = parse_jsonl_record(
            r#"{"text_tokens":["good","day"],"emoji_tokens":["smile"],"label":1}"#,
            1,
            RecordMode::Labeled,
        )
        .unwrap();
        assert_eq!(d.text_tokens.len(), 2);
        assert_eq!(d.emoji_tokens.len(), 1);
        assert_eq!(d.label, Some(1));
    }

    #[test]
    fn extra_fields_ignored() {
        let d = parse_jsonl_record(
            r#"{"id":7,"text_tokens":["a"],"emoji_tokens":["b"],"label":0,"src":"x"}"#,
            1,
            RecordMode::Labeled,
        )
        .unwrap();
        assert_eq!(d.label, Some(0));
    }

    #[test]
    fn empty_text_rejected_with_line() {
        let err = parse_jsonl_record(
            r#"{"text_tokens":[],"emoji_tokens":["smile"],"label":0}"#,
            4,
            RecordMode::Labeled,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 4") && msg.contains("empty text"), "{msg}");
    }

    #[test]
    fn emoji_required_when_labeled() {
        let line = r#"{"text_tokens":["hi"],"emoji_tokens":[],"label":1}"#;
        let err = parse_jsonl_record(line, 2, RecordMode::Labeled).unwrap_err();
        assert!(err.to_string().contains("emoji required"));
        assert!(parse_jsonl_record(line, 2, RecordMode::Predict).is_ok());
    }

    #[test]
    fn bad_labels_and_json() {
        for line in [
            r#"{"text_tokens":["a"],"emoji_tokens":["b"],"label":2}"#,
            r#"{"text_tokens":["a"],"emoji_tokens":["b"],"label":-1}"#,
            r#"{"text_tokens":["a"],"emoji_tokens":["b"],"label":"1"}"#,
            r#"{"text_tokens":["a"],"emoji_tokens":["b"]"#,
        ] {
            let err = parse_jsonl_record(line, 9, RecordMode::Labeled).unwrap_err();
            assert!(err.to_string().starts_with("line 9"), "{err}");
        }
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let spec = SplitSpec::default();
        assert_eq!(spec.sizes(8930), (6251, 1786, 893));
        assert_eq!(spec.sizes(10), (7, 2, 1));
        let frac = SplitSpec {
            train: 0.7,
            test: 0.2,
            val: 0.1,
            seed: 0,
        };
        assert_eq!(frac.sizes(8930), (6251, 1786, 893));
    }

    #[test]
    fn too_few_docs() {
        let docs = vec![TokenizedDoc::new(&["a"], &["e"], Some(1)); 9];
        assert!(split_corpus(&docs, &SplitSpec::default()).is_err());
    }

    #[test]
    fn ratio_parsing() {
        let s = SplitSpec::parse_ratios("7:2:1", 3).unwrap();
        assert_eq!((s.train, s.test, s.val, s.seed), (7.0, 2.0, 1.0, 3));
        assert!(SplitSpec::parse_ratios("7:2", 0).is_err());
        assert!(SplitSpec::parse_ratios("7:0:1", 0).is_err());
    }
}
