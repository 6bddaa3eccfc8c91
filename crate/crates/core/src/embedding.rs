//! Embedding layer: text token vectors and bi-sense inter-emoji vectors.
//!
//! Every emoji owns two sense vectors, one learned from positive contexts and
//! one from negative contexts. For an emoji occurrence the two senses are
//! scored against the document context with additive attention,
//! `u_i = v_a . tanh(W_a [e_i ; w])`, and mixed with `softmax(u)`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::Deserialize;

use crate::batch::Batch;
use crate::error::{FaetError, Result};
use crate::graph::{Axis, Graph, NodeId};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::{Vocab, PAD};

/// Range of the uniform initialisation for embedding tables.
pub const EMBED_INIT: f64 = 0.1;

/// Per-document contextual vectors loaded from a JSONL file.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecomputedVectors<S> {
    dim: usize,
    docs: HashMap<String, Tensor<S>>,
}

#[derive(Deserialize)]
struct PrecomputedRecord {
    text_tokens: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

impl<S: Scalar> PrecomputedVectors<S> {
    pub fn new(dim: usize) -> Self {
        PrecomputedVectors {
            dim,
            docs: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Registers the vectors (one row per token position) of a document.
    pub fn insert(&mut self, text_tokens: &[String], rows: &[Vec<f64>]) -> Result<()> {
        if rows.len() < text_tokens.len() {
            return Err(FaetError::Data(format!(
                "document {:?}: {} vectors for {} tokens",
                text_tokens.join(" "),
                rows.len(),
                text_tokens.len()
            )));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != self.dim) {
            return Err(FaetError::Data(format!(
                "document {:?}: vector of dimension {}, expected {}",
                text_tokens.join(" "),
                r.len(),
                self.dim
            )));
        }
        let data = rows.iter().flatten().map(|&v| S::of(v)).collect();
        let t = Tensor::new(vec![rows.len(), self.dim], data)?;
        self.docs.insert(text_tokens.join(" "), t);
        Ok(())
    }

    /// Loads `{"text_tokens": [...], "vectors": [[...], ...]}` lines.
    pub fn load(path: &Path, dim: usize) -> Result<Self> {
        let file = File::open(path).map_err(|e| FaetError::io(path, e))?;
        let mut out = Self::new(dim);
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| FaetError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PrecomputedRecord = serde_json::from_str(&line).map_err(|e| FaetError::Record {
                line: i + 1,
                message: e.to_string(),
            })?;
            out.insert(&rec.text_tokens, &rec.vectors).map_err(|e| FaetError::Record {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(out)
    }

    fn rows_for(&self, key: &str, n: usize) -> Result<Tensor<S>> {
        let t = self.docs.get(key).ok_or_else(|| {
            FaetError::Data(format!("no precomputed vectors for document {key:?}"))
        })?;
        let (rows, c) = t.dims2();
        if rows < n {
            return Err(FaetError::Data(format!(
                "document {key:?}: {rows} precomputed vectors for {n} tokens"
            )));
        }
        Ok(Tensor::new(vec![n, c], t.data()[..n * c].to_vec())?)
    }
}

/// Source of the text-token vectors.
#[derive(Clone, Debug, PartialEq)]
pub enum TextEncoder<S> {
    /// Trainable `vocab x d_w` table whose PAD row is frozen at zero.
    Table { table: ParamId, dim: usize },
    /// Fixed vectors supplied per document.
    Precomputed(PrecomputedVectors<S>),
}

impl<S: Scalar> TextEncoder<S> {
    pub fn trainable(store: &mut ParamStore<S>, vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let table = store.add_uniform("text_embedding", &[vocab_size, dim], EMBED_INIT, rng);
        store.freeze_row(table, PAD);
        TextEncoder::Table { table, dim }
    }

    pub fn dim(&self) -> usize {
        match self {
            TextEncoder::Table { dim, .. } => *dim,
            TextEncoder::Precomputed(p) => p.dim(),
        }
    }

    /// `n x d_w` vectors for the document's text.
    /// `key` is the space-joined text, used to look up precomputed vectors.
    pub fn embed(&self, g: &mut Graph<S>, bound: &Bound, text_ids: &[usize], key: &str) -> Result<NodeId> {
        match self {
            TextEncoder::Table { table, .. } => Ok(g.gather_rows(bound.node(*table), text_ids)?),
            TextEncoder::Precomputed(p) => Ok(g.constant(p.rows_for(key, text_ids.len())?)),
        }
    }

    /// `rows x width x d_w` embeddings of a padded batch; PAD positions are zero.
    pub fn embed_text(&self, store: &ParamStore<S>, batch: &Batch) -> Result<Tensor<S>> {
        let dim = self.dim();
        let width = batch.text_width;
        let mut out = Tensor::zeros(&[batch.len(), width, dim]);
        for r in 0..batch.len() {
            let ids = batch.text(r);
            let rows = match self {
                TextEncoder::Table { table, .. } => {
                    let t = store.value(*table);
                    let mut v = Vec::with_capacity(ids.len() * dim);
                    for &id in ids {
                        if id >= t.dims2().0 {
                            return Err(FaetError::Data(format!("text id {id} outside vocabulary")));
                        }
                        v.extend_from_slice(t.row_slice(id));
                    }
                    v
                }
                TextEncoder::Precomputed(p) => p.rows_for(&batch.keys[r], ids.len())?.into_data(),
            };
            let start = r * width * dim;
            out.data_mut()[start..start + rows.len()].copy_from_slice(&rows);
        }
        Ok(out)
    }
}

/// Two sense vectors per emoji plus the sense-attention parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BisenseEmojiTable {
    /// Sense used in positive contexts, `emoji_vocab x d_w`.
    pub positive: ParamId,
    /// Sense used in negative contexts, `emoji_vocab x d_w`.
    pub negative: ParamId,
    /// `d_w x 2 d_w`.
    pub w_a: ParamId,
    /// `1 x d_w`.
    pub v_a: ParamId,
}

/// Graph nodes produced for the emojis of one document.
#[derive(Clone, Copy, Debug)]
pub struct SenseAttention {
    /// `m x d_w` inter-emoji vectors.
    pub vectors: NodeId,
    /// `m x 2` sense weights.
    pub alpha: NodeId,
}

impl BisenseEmojiTable {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, emoji_vocab: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let positive = store.add_uniform("emoji_sense_pos", &[emoji_vocab, dim], EMBED_INIT, rng);
        let negative = store.add_uniform("emoji_sense_neg", &[emoji_vocab, dim], EMBED_INIT, rng);
        let w_a = store.add_uniform("sense_attn_w", &[dim, 2 * dim], (2.0 * dim as f64).sqrt().recip(), rng);
        let v_a = store.add_uniform("sense_attn_v", &[1, dim], (dim as f64).sqrt().recip(), rng);
        BisenseEmojiTable {
            positive,
            negative,
            w_a,
            v_a,
        }
    }

    /// Attends over the two senses of each emoji in `emoji_ids` given the
    /// `1 x d_w` document context.
    pub fn attend<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        emoji_ids: &[usize],
        context: NodeId,
    ) -> Result<SenseAttention> {
        let vocab = g.value(bound.node(self.positive)).dims2().0;
        if let Some(&bad) = emoji_ids.iter().find(|&&id| id >= vocab) {
            return Err(FaetError::Data(format!(
                "unknown emoji id {bad} (emoji vocabulary has {vocab} entries)"
            )));
        }
        let m = emoji_ids.len();
        let pos = g.gather_rows(bound.node(self.positive), emoji_ids)?;
        let neg = g.gather_rows(bound.node(self.negative), emoji_ids)?;
        let ctx = g.gather_rows(context, &vec![0; m])?;
        let mut scores = Vec::with_capacity(2);
        for sense in [pos, neg] {
            let x = g.concat(&[sense, ctx], Axis::Cols)?;
            let hidden = g.matmul_t(x, bound.node(self.w_a))?;
            let hidden = g.tanh(hidden);
            scores.push(g.matmul_t(hidden, bound.node(self.v_a))?);
        }
        let scores = g.concat(&scores, Axis::Cols)?;
        let alpha = g.softmax(scores, Axis::Cols)?;
        let a_pos = g.slice_cols(alpha, 0, 1)?;
        let a_neg = g.slice_cols(alpha, 1, 2)?;
        let wp = g.scale_rows(pos, a_pos)?;
        let wn = g.scale_rows(neg, a_neg)?;
        let vectors = g.add(wp, wn)?;
        Ok(SenseAttention { vectors, alpha })
    }
}

/// Inter-emoji vector and sense weights for one emoji, outside any training graph.
pub fn inter_emoji_embedding<S: Scalar>(
    emoji_id: usize,
    context: &[S],
    table: &BisenseEmojiTable,
    store: &ParamStore<S>,
) -> Result<(Vec<S>, [S; 2])> {
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let ctx = g.constant(Tensor::row(context.to_vec()));
    let att = table.attend(&mut g, &bound, &[emoji_id], ctx)?;
    let alpha = g.value(att.alpha).data();
    Ok((g.value(att.vectors).data().to_vec(), [alpha[0], alpha[1]]))
}

/// Outcome of [`load_pretrained_emoji_vectors`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PretrainedLoad {
    pub assigned: usize,
    pub ignored: usize,
}

/// Overwrites sense vectors from a word2vec-style text file.
///
/// The header is `count dim`; each following line is a token and `dim`
/// values. A token suffixed `_pos` or `_neg` sets only that sense; a bare
/// token sets both. Tokens not in the emoji vocabulary are counted and skipped.
pub fn load_pretrained_emoji_vectors<S: Scalar>(
    path: &Path,
    vocab: &Vocab,
    table: &BisenseEmojiTable,
    store: &mut ParamStore<S>,
) -> Result<PretrainedLoad> {
    let file = File::open(path).map_err(|e| FaetError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let bad = |line: usize, message: String| FaetError::Record { line, message };
    let header = lines
        .next()
        .ok_or_else(|| bad(1, "missing header".into()))?
        .map_err(|e| FaetError::io(path, e))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let [_, dim] = fields[..] else {
        return Err(bad(1, format!("header must be \"count dim\", got {header:?}")));
    };
    let dim: usize = dim.parse().map_err(|_| bad(1, format!("bad dimension {dim:?}")))?;
    let width = store.value(table.positive).dims2().1;
    if dim != width {
        return Err(FaetError::Data(format!(
            "pretrained emoji vectors have dimension {dim}, model uses {width}"
        )));
    }

    let mut report = PretrainedLoad { assigned: 0, ignored: 0 };
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(|e| FaetError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(' ').filter(|s| !s.is_empty());
        let token = parts.next().unwrap();
        let values: Vec<S> = parts
            .map(|v| v.parse::<f64>().map(S::of))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(line_no, format!("bad value: {e}")))?;
        if values.len() != dim {
            return Err(bad(line_no, format!("{} values, expected {dim}", values.len())));
        }
        let (name, senses): (&str, &[ParamId]) = if let Some(n) = token.strip_suffix("_pos") {
            (n, &[table.positive])
        } else if let Some(n) = token.strip_suffix("_neg") {
            (n, &[table.negative])
        } else {
            (token, &[table.positive, table.negative])
        };
        let Some(id) = vocab.emoji_id(name) else {
            report.ignored += 1;
            continue;
        };
        for &sense in senses {
            store.get_mut(sense).value.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
        }
        report.assigned += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use crate::batch::EncodedDoc;

    fn setup(dim: usize) -> (ParamStore<f64>, BisenseEmojiTable) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = BisenseEmojiTable::new(&mut store, 3, dim, &mut rng);
        (store, table)
    }

    #[test]
    fn equal_senses_give_that_sense() {
        let (mut store, table) = setup(4);
        let row: Vec<f64> = store.value(table.positive).row_slice(1).to_vec();
        store.get_mut(table.negative).value.data_mut()[4..8].copy_from_slice(&row);
        let (v, _) = inter_emoji_embedding(1, &[0.3, -0.2, 0.9, 0.0], &table, &store).unwrap();
        for (a, b) in v.iter().zip(&row) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_attention_weights_give_midpoint() {
        let (mut store, table) = setup(3);
        for p in [table.w_a, table.v_a] {
            store.get_mut(p).value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let (v, alpha) = inter_emoji_embedding(2, &[1.0, 2.0, 3.0], &table, &store).unwrap();
        assert_eq!(alpha, [0.5, 0.5]);
        let pos = store.value(table.positive).row_slice(2);
        let neg = store.value(table.negative).row_slice(2);
        for k in 0..3 {
            assert!((v[k] - 0.5 * (pos[k] + neg[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn unknown_emoji_id_is_an_error() {
        let (store, table) = setup(2);
        assert!(inter_emoji_embedding(3, &[0.0, 0.0], &table, &store).is_err());
    }

    #[test]
    fn pad_rows_embed_to_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = TextEncoder::trainable(&mut store, 5, 3, &mut rng);
        let docs = [
            EncodedDoc {
                text_ids: vec![2, 2],
                emoji_ids: vec![0],
                label: None,
                key: String::new(),
                dropped_emojis: 0,
            },
            EncodedDoc {
                text_ids: vec![3],
                emoji_ids: vec![0],
                label: None,
                key: String::new(),
                dropped_emojis: 0,
            },
        ];
        let batch = Batch::from_encoded(&docs);
        let out = enc.embed_text(&store, &batch).unwrap();
        assert_eq!(out.shape(), &[2, 2, 3]);
        let d = out.data();
        assert_eq!(&d[0..3], &d[3..6]);
        assert_eq!(&d[9..12], &[0.0; 3]);
        assert!(d[0..3].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn precomputed_dimension_checked() {
        let mut p = PrecomputedVectors::<f64>::new(3);
        let err = p.insert(&["a".into()], &[vec![1.0, 2.0]]).unwrap_err();
        assert!(err.to_string().contains("dimension"));
        p.insert(&["a".into()], &[vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(p.rows_for("b", 1).unwrap_err().to_string().contains("\"b\""));
    }
}
