//! The full classifier: embeddings, BiLSTM, attention, TextCNN head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{
    coarse_attention_aet, fine_attention, CoarseAttention, CoarseAttentionParams, FineAttention, FineAttentionParams,
};
use crate::batch::{Batch, EncodedDoc};
use crate::classifier::{textcnn_forward, HeadOutput, Prediction, TextCnnParams};
use crate::config::{EncoderMode, TrainConfig, Variant};
use crate::dropout::{maybe_dropout, Dropout};
use crate::embedding::{BisenseEmojiTable, PrecomputedVectors, SenseAttention, TextEncoder};
use crate::encoder::BiLstm;
use crate::error::{FaetError, Result};
use crate::graph::{Axis, Graph, NodeId};
use crate::objective::{alignment_loss, cross_entropy_node, total_loss_node, BatchLoss, LossConfig};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::Vocab;

/// Mixes a base seed with a stream tag so that parameter init, dropout masks
/// and batch order draw from unrelated sequences.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const INIT_STREAM: u64 = 1;
pub const DROPOUT_STREAM: u64 = 2;
pub const SHUFFLE_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionLayer {
    Fine(FineAttentionParams),
    Coarse(CoarseAttentionParams),
}

/// Parameter handles and the text encoder; the values live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network<S> {
    pub text: TextEncoder<S>,
    pub emoji: BisenseEmojiTable,
    pub bilstm: BiLstm,
    pub attention: AttentionLayer,
    pub head: TextCnnParams,
}

/// Ids and lookup key of one document.
#[derive(Clone, Copy, Debug)]
pub struct DocInput<'a> {
    pub text_ids: &'a [usize],
    pub emoji_ids: &'a [usize],
    pub key: &'a str,
}

impl<'a> From<&'a EncodedDoc> for DocInput<'a> {
    fn from(d: &'a EncodedDoc) -> Self {
        DocInput {
            text_ids: &d.text_ids,
            emoji_ids: &d.emoji_ids,
            key: &d.key,
        }
    }
}

impl Batch {
    pub fn doc(&self, row: usize) -> DocInput<'_> {
        DocInput {
            text_ids: self.text(row),
            emoji_ids: self.emojis(row),
            key: &self.keys[row],
        }
    }
}

/// Graph nodes of one document's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DocForward {
    pub head: HeadOutput,
    pub sense: Option<SenseAttention>,
    pub fine: Option<FineAttention>,
    pub coarse: Option<CoarseAttention>,
    /// `n x 2d` text rows of the BiLSTM output.
    pub text_states: NodeId,
    /// Alignment loss of the document (FAET only).
    pub alignment: Option<NodeId>,
}

impl<S: Scalar> Network<S> {
    pub fn build(config: &TrainConfig, vocab: &Vocab, text: Option<TextEncoder<S>>, store: &mut ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, INIT_STREAM));
        let text = match text {
            Some(t) => t,
            None => TextEncoder::trainable(store, vocab.text_len(), config.d_w, &mut rng),
        };
        if text.dim() != config.d_w {
            return Err(FaetError::Config(format!(
                "text encoder dimension {} differs from d_w {}",
                text.dim(),
                config.d_w
            )));
        }
        let emoji = BisenseEmojiTable::new(store, vocab.emoji_len(), config.d_w, &mut rng);
        let bilstm = BiLstm::new(store, config.d_w, config.d, &mut rng);
        let attention = match config.variant {
            Variant::Faet => AttentionLayer::Fine(FineAttentionParams::new(store, config.d, &mut rng)),
            Variant::Aet => AttentionLayer::Coarse(CoarseAttentionParams::new(store, config.d, &mut rng)),
        };
        let head = TextCnnParams::new(store, 6 * config.d, &config.kernel_widths, config.n_filters, &mut rng)?;
        Ok(Network {
            text,
            emoji,
            bilstm,
            attention,
            head,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        doc: DocInput<'_>,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<DocForward> {
        Ok(self.forward_batch(g, bound, &[doc], dropout)?.remove(0))
    }

    /// Forward pass for several documents. The BiLSTM runs over all of them
    /// at once; everything else is per document.
    pub fn forward_batch(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        docs: &[DocInput<'_>],
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<Vec<DocForward>> {
        let mut sequences = Vec::with_capacity(docs.len());
        let mut senses = Vec::with_capacity(docs.len());
        for doc in docs {
            if doc.text_ids.is_empty() {
                return Err(FaetError::Data(format!("document {:?} has no text tokens", doc.key)));
            }
            let text = self.text.embed(g, bound, doc.text_ids, doc.key)?;
            if doc.emoji_ids.is_empty() {
                sequences.push(text);
                senses.push(None);
            } else {
                let context = g.mean(text, Axis::Rows)?;
                let sense = self.emoji.attend(g, bound, doc.emoji_ids, context)?;
                sequences.push(g.concat(&[text, sense.vectors], Axis::Rows)?);
                senses.push(Some(sense));
            }
        }
        let lengths: Vec<usize> = docs.iter().map(|d| d.text_ids.len() + d.emoji_ids.len()).collect();
        let packed = g.concat(&sequences, Axis::Rows)?;
        let packed = maybe_dropout(dropout, g, packed)?;
        let all_states = self.bilstm.encode_packed(g, bound, packed, &lengths)?;

        let mut out = Vec::with_capacity(docs.len());
        let mut offset = 0;
        for ((doc, sense), len) in docs.iter().zip(senses).zip(lengths) {
            let (n, m) = (doc.text_ids.len(), doc.emoji_ids.len());
            let states = g.slice_rows(all_states, offset, offset + len)?;
            offset += len;
            let t = g.slice_rows(states, 0, n)?;
            let e = g.slice_rows(states, n, n + m)?;
            let (extra, fine, coarse, alignment) = match self.attention {
                AttentionLayer::Fine(p) => {
                    let fa = fine_attention(g, t, e, bound.node(p.w_u))?;
                    let align = match fa.beta {
                        Some(beta) => alignment_loss(g, beta, t, bound.node(p.w_d))?,
                        None => g.constant(Tensor::scalar(S::zero())),
                    };
                    (fa.fused, Some(fa), None, Some(align))
                }
                AttentionLayer::Coarse(p) => {
                    let ca = coarse_attention_aet(g, t, e, bound.node(p.w_c), bound.node(p.v_c))?;
                    let extra = g.concat(&[ca.sentence, ca.context], Axis::Cols)?;
                    (extra, None, Some(ca), None)
                }
            };
            let extra = maybe_dropout(dropout, g, extra)?;
            let head = textcnn_forward(g, bound, &self.head, states, extra, dropout)?;
            out.push(DocForward {
                head,
                sense,
                fine,
                coarse,
                text_states: t,
                alignment,
            });
        }
        Ok(out)
    }

    /// Mean cross-entropy plus weighted mean alignment loss over a labeled batch.
    pub fn batch_loss(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        batch: &Batch,
        loss: &LossConfig,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<BatchLoss> {
        Ok(self.batch_forward(g, bound, batch, loss, dropout)?.0)
    }

    /// [`Network::batch_loss`] that also returns each document's forward nodes.
    pub fn batch_forward(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        batch: &Batch,
        loss: &LossConfig,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<(BatchLoss, Vec<DocForward>)> {
        let inputs: Vec<DocInput<'_>> = (0..batch.len()).map(|r| batch.doc(r)).collect();
        let docs = self.forward_batch(g, bound, &inputs, dropout)?;
        let mut ce = Vec::with_capacity(batch.len());
        let mut align = Vec::with_capacity(batch.len());
        for (row, out) in docs.iter().enumerate() {
            let label = batch.labels[row]
                .ok_or_else(|| FaetError::Data(format!("document {:?} has no label", batch.keys[row])))?;
            ce.push(cross_entropy_node(g, out.head.probs, label, loss.label_smoothing)?);
            align.extend(out.alignment);
        }
        Ok((total_loss_node(g, &ce, &align, loss)?, docs))
    }
}

/// A trained or freshly initialised model with everything needed to run it.
#[derive(Clone, Debug, PartialEq)]
pub struct FaetModel<S> {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub params: ParamStore<S>,
    pub net: Network<S>,
}

/// Attention dump for one document.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Explanation {
    pub text_tokens: Vec<String>,
    pub emoji_tokens: Vec<String>,
    pub dropped_emojis: usize,
    pub prediction: Prediction,
    /// `[positive, negative]` sense weights per emoji.
    pub sense_weights: Vec<[f64; 2]>,
    /// Emoji importance from the interaction matrix (FAET).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emoji_attention: Option<Vec<f64>>,
    /// Text importance from the interaction matrix (FAET).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_attention: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interaction: Option<Vec<Vec<f64>>>,
    /// Per-text-word emoji distributions (FAET).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<Vec<f64>>>,
    /// Sentence-conditioned emoji weights (AET).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coarse_attention: Option<Vec<f64>>,
}

fn prediction_of<S: Scalar>(g: &Graph<S>, head: &HeadOutput) -> Prediction {
    let l = g.value(head.logits).data();
    let p = g.value(head.probs).data();
    let probs = [p[0].as_f64(), p[1].as_f64()];
    Prediction {
        probs,
        logits: [l[0].as_f64(), l[1].as_f64()],
        label: crate::classifier::predict_label(probs),
    }
}

impl<S: Scalar> FaetModel<S> {
    /// Initialises a model from `config`, loading precomputed text vectors
    /// from `config.precomputed_path` when that encoder is selected.
    pub fn new(config: TrainConfig, vocab: Vocab) -> Result<Self> {
        let text = match config.encoder {
            EncoderMode::TrainableTable => None,
            EncoderMode::PrecomputedFile => {
                let path = config
                    .precomputed_path
                    .as_deref()
                    .ok_or_else(|| FaetError::Config("precomputed_file encoder needs precomputed_path".into()))?;
                Some(TextEncoder::Precomputed(PrecomputedVectors::load(Path::new(path), config.d_w)?))
            }
        };
        Self::with_text_encoder(config, vocab, text)
    }

    pub fn with_text_encoder(config: TrainConfig, vocab: Vocab, text: Option<TextEncoder<S>>) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Network::build(&config, &vocab, text, &mut params)?;
        Ok(FaetModel {
            config,
            vocab,
            params,
            net,
        })
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_align: match self.config.variant {
                Variant::Faet => self.config.lambda_align,
                Variant::Aet => 0.0,
            },
            label_smoothing: self.config.label_smoothing,
        }
    }

    pub fn encode(&self, doc: &crate::corpus::TokenizedDoc) -> EncodedDoc {
        crate::batch::encode_doc(doc, &self.vocab, self.config.max_len)
    }

    /// Predictions for every row of `batch`, dropout off.
    pub fn predict_batch(&self, batch: &Batch) -> Result<Vec<Prediction>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let inputs: Vec<DocInput<'_>> = (0..batch.len()).map(|r| batch.doc(r)).collect();
        let docs = self.net.forward_batch(&mut g, &bound, &inputs, &mut None)?;
        Ok(docs.iter().map(|d| prediction_of(&g, &d.head)).collect())
    }

    /// Predictions plus the loss terms of a labeled batch, dropout off.
    pub fn score_batch(&self, batch: &Batch) -> Result<(Vec<Prediction>, f64)> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let (loss, docs) = self.net.batch_forward(&mut g, &bound, batch, &self.loss_config(), &mut None)?;
        let preds = docs.iter().map(|d| prediction_of(&g, &d.head)).collect();
        Ok((preds, g.value(loss.total).item().as_f64()))
    }

    pub fn explain(&self, doc: &EncodedDoc, emoji_tokens: &[String]) -> Result<Explanation> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let fwd = self.net.forward(&mut g, &bound, doc.into(), &mut None)?;
        let rows = |id: NodeId| g.value(id).to_f64_rows();
        let flat = |id: NodeId| g.value(id).to_f64_vec();
        let sense_weights = fwd
            .sense
            .map(|s| rows(s.alpha).into_iter().map(|r| [r[0], r[1]]).collect())
            .unwrap_or_default();
        let known: Vec<String> = emoji_tokens
            .iter()
            .filter(|t| self.vocab.emoji_id(t).is_some())
            .cloned()
            .collect();
        Ok(Explanation {
            text_tokens: doc.key.split(' ').map(str::to_string).collect(),
            emoji_tokens: known,
            dropped_emojis: doc.dropped_emojis,
            prediction: prediction_of(&g, &fwd.head),
            sense_weights,
            emoji_attention: fwd.fine.map(|f| flat(f.emoji_weights)),
            text_attention: fwd.fine.map(|f| flat(f.text_weights)),
            interaction: fwd.fine.map(|f| rows(f.interaction)),
            beta: fwd.fine.and_then(|f| f.beta).map(rows),
            coarse_attention: fwd.coarse.map(|c| flat(c.weights)),
        })
    }
}
