use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Label, TokenizedDoc};
use crate::error::{FaetError, Result};
use crate::vocab::{Vocab, PAD};

pub const DEFAULT_MAX_LEN: usize = 100;

/// A document mapped to vocabulary ids, text truncated to the length limit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedDoc {
    pub text_ids: Vec<usize>,
    pub emoji_ids: Vec<usize>,
    pub label: Option<Label>,
    /// Text tokens joined by spaces (after truncation).
    pub key: String,
    /// Emoji tokens absent from the vocabulary.
    pub dropped_emojis: usize,
}

pub fn encode_doc(doc: &TokenizedDoc, vocab: &Vocab, max_len: usize) -> EncodedDoc {
    let n = doc.text_tokens.len().min(max_len);
    let text = &doc.text_tokens[..n];
    let (emoji_ids, dropped_emojis) = vocab.encode_emojis(&doc.emoji_tokens);
    EncodedDoc {
        text_ids: vocab.encode_text(text),
        emoji_ids,
        label: doc.label,
        key: text.join(" "),
        dropped_emojis,
    }
}

/// Padded id matrices for a group of documents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// `rows x text_width` ids, padded with [`PAD`].
    pub text_ids: Vec<usize>,
    pub text_width: usize,
    pub text_lengths: Vec<usize>,
    /// `rows x emoji_width` ids; entries past `emoji_counts[r]` are 0 and unused.
    pub emoji_ids: Vec<usize>,
    pub emoji_width: usize,
    pub emoji_counts: Vec<usize>,
    pub labels: Vec<Option<Label>>,
    pub keys: Vec<String>,
}

impl Batch {
    pub fn from_encoded(docs: &[EncodedDoc]) -> Self {
        let text_width = docs.iter().map(|d| d.text_ids.len()).max().unwrap_or(0);
        let emoji_width = docs.iter().map(|d| d.emoji_ids.len()).max().unwrap_or(0);
        let mut text_ids = Vec::with_capacity(docs.len() * text_width);
        let mut emoji_ids = Vec::with_capacity(docs.len() * emoji_width);
        for d in docs {
            text_ids.extend(&d.text_ids);
            text_ids.extend(std::iter::repeat(PAD).take(text_width - d.text_ids.len()));
            emoji_ids.extend(&d.emoji_ids);
            emoji_ids.extend(std::iter::repeat(0).take(emoji_width - d.emoji_ids.len()));
        }
        Batch {
            text_ids,
            text_width,
            text_lengths: docs.iter().map(|d| d.text_ids.len()).collect(),
            emoji_ids,
            emoji_width,
            emoji_counts: docs.iter().map(|d| d.emoji_ids.len()).collect(),
            labels: docs.iter().map(|d| d.label).collect(),
            keys: docs.iter().map(|d| d.key.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.text_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text_lengths.is_empty()
    }

    pub fn text(&self, row: usize) -> &[usize] {
        let start = row * self.text_width;
        &self.text_ids[start..start + self.text_lengths[row]]
    }

    pub fn emojis(&self, row: usize) -> &[usize] {
        let start = row * self.emoji_width;
        &self.emoji_ids[start..start + self.emoji_counts[row]]
    }
}

fn batches_in_order(docs: &[TokenizedDoc], order: &[usize], vocab: &Vocab, batch_size: usize, max_len: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(FaetError::Config("batch_size must be at least 1".into()));
    }
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let encoded: Vec<EncodedDoc> = chunk.iter().map(|&i| encode_doc(&docs[i], vocab, max_len)).collect();
            Batch::from_encoded(&encoded)
        })
        .collect())
}

/// Seeded shuffle into batches of `batch_size`; the last batch may be short.
pub fn make_batches(docs: &[TokenizedDoc], vocab: &Vocab, batch_size: usize, max_len: usize, seed: u64) -> Result<Vec<Batch>> {
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    batches_in_order(docs, &order, vocab, batch_size, max_len)
}

/// Batches in input order, for evaluation and prediction.
pub fn make_ordered_batches(docs: &[TokenizedDoc], vocab: &Vocab, batch_size: usize, max_len: usize) -> Result<Vec<Batch>> {
    let order: Vec<usize> = (0..docs.len()).collect();
    batches_in_order(docs, &order, vocab, batch_size, max_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::build_vocab;

    fn corpus(n: usize) -> Vec<TokenizedDoc> {
        (0..n)
            .map(|i| {
                let w = format!("w{}", i % 7);
                TokenizedDoc::new(&[&w, "x"], &["e"], Some((i % 2) as Label))
            })
            .collect()
    }

    #[test]
    fn sizes_keep_partial_batch() {
        let docs = corpus(130);
        let vocab = build_vocab(&docs, 1);
        let sizes: Vec<usize> = make_batches(&docs, &vocab, 64, 100, 1)
            .unwrap()
            .iter()
            .map(Batch::len)
            .collect();
        assert_eq!(sizes, [64, 64, 2]);
    }

    #[test]
    fn long_text_truncated() {
        let tokens: Vec<String> = (0..120).map(|i| format!("t{i}")).collect();
        let doc = TokenizedDoc {
            text_tokens: tokens,
            emoji_tokens: vec!["e".into()],
            label: Some(1),
        };
        let vocab = build_vocab(std::slice::from_ref(&doc), 1);
        let b = &make_batches(&[doc], &vocab, 4, 100, 0).unwrap()[0];
        assert_eq!(b.text(0).len(), 100);
        assert_eq!(b.text_width, 100);
    }

    #[test]
    fn same_seed_same_order() {
        let docs = corpus(50);
        let vocab = build_vocab(&docs, 1);
        let a = make_batches(&docs, &vocab, 8, 100, 42).unwrap();
        let b = make_batches(&docs, &vocab, 8, 100, 42).unwrap();
        assert_eq!(a, b);
        let c = make_batches(&docs, &vocab, 8, 100, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn padding_uses_pad_id() {
        let docs = vec![
            TokenizedDoc::new(&["a"], &["e"], Some(1)),
            TokenizedDoc::new(&["a", "b", "c"], &["e", "e"], Some(0)),
        ];
        let vocab = build_vocab(&docs, 1);
        let b = make_ordered_batches(&docs, &vocab, 2, 100).unwrap().remove(0);
        assert_eq!(&b.text_ids[..3], &[2, PAD, PAD]);
        assert_eq!(b.text(0), &[2]);
        assert_eq!(b.emojis(1), &[0, 0]);
    }

    #[test]
    fn all_oov_text_is_valid() {
        let vocab = build_vocab(&[TokenizedDoc::new(&["a"], &["e"], Some(1))], 1);
        let enc = encode_doc(&TokenizedDoc::new(&["zz", "yy"], &["e"], Some(0)), &vocab, 100);
        assert_eq!(enc.text_ids, vec![crate::vocab::UNK; 2]);
    }

    #[test]
    fn zero_batch_size_rejected() {
        let docs = corpus(3);
        let vocab = build_vocab(&docs, 1);
        assert!(make_batches(&docs, &vocab, 0, 100, 0).is_err());
    }
}
