//! TextCNN head: convolutions over the encoded sequence with a document-level
//! feature vector appended to every position, max-over-time pooling, and an
//! affine layer to two logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dropout::{maybe_dropout, Dropout};
use crate::error::{FaetError, Result};
use crate::graph::{Axis, Graph, NodeId};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvFilter {
    pub width: usize,
    /// `n_f x (width * channels)`.
    pub kernel: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextCnnParams {
    pub filters: Vec<ConvFilter>,
    pub n_filters: usize,
    pub channels: usize,
    /// `2 x (widths * n_f)`.
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl TextCnnParams {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        channels: usize,
        widths: &[usize],
        n_filters: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) || n_filters == 0 || channels == 0 {
            return Err(FaetError::Config(format!(
                "invalid TextCNN shape: widths {widths:?}, {n_filters} filters, {channels} channels"
            )));
        }
        let filters = widths
            .iter()
            .map(|&width| {
                let fan_in = (width * channels) as f64;
                ConvFilter {
                    width,
                    kernel: store.add_uniform(format!("cnn_w{width}"), &[n_filters, width * channels], fan_in.sqrt().recip(), rng),
                    bias: store.add(format!("cnn_b{width}"), Tensor::zeros(&[n_filters])),
                }
            })
            .collect();
        let features = widths.len() * n_filters;
        let out_w = store.add_uniform("out_w", &[2, features], (features as f64).sqrt().recip(), rng);
        let out_b = store.add("out_b", Tensor::zeros(&[2]));
        Ok(TextCnnParams {
            filters,
            n_filters,
            channels,
            out_w,
            out_b,
        })
    }

    pub fn features(&self) -> usize {
        self.filters.len() * self.n_filters
    }
}

/// Graph nodes of one forward pass through the head.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `1 x 2` logits.
    pub logits: NodeId,
    /// `1 x 2` probabilities.
    pub probs: NodeId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: [f64; 2],
    pub logits: [f64; 2],
    pub label: u8,
}

impl Prediction {
    pub fn from_logits(logits: [f64; 2]) -> Self {
        let top = logits[0].max(logits[1]);
        let e = [(logits[0] - top).exp(), (logits[1] - top).exp()];
        let z = e[0] + e[1];
        let probs = [e[0] / z, e[1] / z];
        Prediction {
            probs,
            logits,
            label: predict_label(probs),
        }
    }
}

/// Argmax over the two classes; an exact tie goes to the negative class.
pub fn predict_label(probs: [f64; 2]) -> u8 {
    u8::from(probs[1] > probs[0])
}

/// Runs the head on an `L x c_h` sequence `h` with the `1 x c_f` vector
/// `extra` appended to every position.
pub fn textcnn_forward<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    params: &TextCnnParams,
    h: NodeId,
    extra: NodeId,
    dropout: &mut Option<&mut Dropout>,
) -> Result<HeadOutput> {
    let (steps, ch) = g.value(h).dims2();
    let (one, cf) = g.value(extra).dims2();
    if steps == 0 {
        return Err(FaetError::Data("TextCNN input has no positions".into()));
    }
    if one != 1 || ch + cf != params.channels {
        return Err(FaetError::Tensor(crate::error::TensorError::Shape {
            op: "textcnn_forward",
            detail: format!(
                "sequence {:?} with extra {:?}, head expects {} channels",
                (steps, ch),
                (one, cf),
                params.channels
            ),
        }));
    }
    let mut pooled = Vec::with_capacity(params.filters.len());
    for f in &params.filters {
        if steps < f.width {
            pooled.push(g.constant(Tensor::zeros(&[1, params.n_filters])));
            continue;
        }
        let maps = g.conv1d_broadcast(h, extra, bound.node(f.kernel), bound.node(f.bias), f.width)?;
        let maps = g.relu(maps);
        let best = g.max(maps, Axis::Rows)?;
        pooled.push(g.reshape(best, &[1, params.n_filters])?);
    }
    let features = g.concat(&pooled, Axis::Cols)?;
    let features = maybe_dropout(dropout, g, features)?;
    let logits = g.matmul_t(features, bound.node(params.out_w))?;
    let logits = g.add_row(logits, bound.node(params.out_b))?;
    let probs = g.softmax(logits, Axis::Cols)?;
    Ok(HeadOutput { logits, probs })
}
