//! Cross-entropy, the text alignment loss, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{FaetError, Result, TensorError};
use crate::graph::{Axis, Graph, NodeId, LOG_FLOOR};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_align: f64,
    pub label_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_align: 0.1,
            label_smoothing: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_align >= 0.0 && self.lambda_align.is_finite()) {
            return Err(FaetError::Config("lambda_align must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(FaetError::Config("label_smoothing must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `-log p[label]` on plain values, with `p` clamped at `1e-12`.
pub fn cross_entropy(probs: [f64; 2], label: u8) -> f64 {
    -probs[usize::from(label)].max(LOG_FLOOR).ln()
}

/// Cross-entropy of a `1 x 2` probability node. With smoothing `eps` the
/// target puts `1 - eps / 2` on `label` and `eps / 2` on the other class.
pub fn cross_entropy_node<S: Scalar>(g: &mut Graph<S>, probs: NodeId, label: u8, smoothing: f64) -> Result<NodeId> {
    if label > 1 {
        return Err(FaetError::Data(format!("label {label} is not 0 or 1")));
    }
    let logp = g.log(probs);
    if smoothing == 0.0 {
        let picked = g.pick(logp, usize::from(label))?;
        return Ok(g.scale(picked, -S::one()));
    }
    let mut target = [smoothing / 2.0; 2];
    target[usize::from(label)] = 1.0 - smoothing / 2.0;
    let w = g.constant(crate::tensor::Tensor::from_f64(&[1, 2], &target)?);
    let weighted = g.mul(logp, w)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, -S::one()))
}

/// Alignment loss over all unordered text-word pairs `(i, o)`:
/// `-sum d_io * sum_k (beta[i][k] - beta[o][k])^2` with
/// `d_io = sigmoid(w_d . [T_i ; T_o])`. Zero when there are fewer than two
/// text words.
pub fn alignment_loss<S: Scalar>(g: &mut Graph<S>, beta: NodeId, t: NodeId, w_d: NodeId) -> Result<NodeId> {
    let (n, m) = g.value(beta).dims2();
    let (tn, width) = g.value(t).dims2();
    if tn != n || g.value(w_d).len() != 2 * width {
        return Err(TensorError::Shape {
            op: "alignment_loss",
            detail: format!(
                "beta {:?}, T {:?}, w_d of length {}",
                (n, m),
                (tn, width),
                g.value(w_d).len()
            ),
        }
        .into());
    }
    if n < 2 || m == 0 {
        return Ok(g.constant(crate::tensor::Tensor::scalar(S::zero())));
    }
    let (first, second): (Vec<usize>, Vec<usize>) = (0..n).flat_map(|i| (i + 1..n).map(move |o| (i, o))).unzip();
    let ti = g.gather_rows(t, &first)?;
    let to = g.gather_rows(t, &second)?;
    let pair = g.concat(&[ti, to], Axis::Cols)?;
    let dist = g.matmul_t(pair, w_d)?;
    let dist = g.sigmoid(dist);
    let bi = g.gather_rows(beta, &first)?;
    let bo = g.gather_rows(beta, &second)?;
    let diff = g.sub(bi, bo)?;
    let sq = g.mul(diff, diff)?;
    let spread = g.sum_axis(sq, Axis::Cols);
    let weighted = g.mul(dist, spread)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, -S::one()))
}

/// Plain-value alignment loss; `beta` and `t` are row lists.
pub fn alignment_loss_value(beta: &[Vec<f64>], t: &[Vec<f64>], w_d: &[f64]) -> f64 {
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut loss = 0.0;
    for i in 0..beta.len() {
        for o in i + 1..beta.len() {
            let z: f64 = t[i].iter().chain(&t[o]).zip(w_d).map(|(a, b)| a * b).sum();
            let spread: f64 = beta[i].iter().zip(&beta[o]).map(|(a, b)| (a - b).powi(2)).sum();
            loss -= sigmoid(z) * spread;
        }
    }
    loss
}

/// `ce_mean + lambda * align_mean`.
pub fn total_loss(ce_mean: f64, align_mean: f64, config: &LossConfig) -> f64 {
    ce_mean + config.lambda_align * align_mean
}

/// Graph form of [`total_loss`] over per-document scalar nodes.
pub fn total_loss_node<S: Scalar>(
    g: &mut Graph<S>,
    ce: &[NodeId],
    align: &[NodeId],
    config: &LossConfig,
) -> Result<BatchLoss> {
    if ce.is_empty() {
        return Err(FaetError::Data("loss over an empty batch".into()));
    }
    let mean_of = |g: &mut Graph<S>, parts: &[NodeId]| -> Result<NodeId> {
        if parts.is_empty() {
            return Ok(g.constant(crate::tensor::Tensor::scalar(S::zero())));
        }
        let stacked = g.concat(parts, Axis::Rows)?;
        let s = g.sum(stacked);
        Ok(g.scale(s, S::of(1.0 / parts.len() as f64)))
    };
    let ce_mean = mean_of(g, ce)?;
    let align_mean = mean_of(g, align)?;
    let total = if config.lambda_align == 0.0 {
        ce_mean
    } else {
        let scaled = g.scale(align_mean, S::of(config.lambda_align));
        g.add(ce_mean, scaled)?
    };
    Ok(BatchLoss {
        total,
        ce_mean,
        align_mean,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: NodeId,
    pub ce_mean: NodeId,
    pub align_mean: NodeId,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cross_entropy_values() {
        assert!((cross_entropy([0.5, 0.5], 0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(cross_entropy([0.0, 1.0], 1), 0.0);
        assert!((cross_entropy([1.0, 0.0], 1) - 27.631021115928547).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_node_matches_value() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_f64(&[1, 2], &[0.3, 0.7]).unwrap());
        let l = cross_entropy_node(&mut g, p, 1, 0.0).unwrap();
        assert!((g.value(l).item() - cross_entropy([0.3, 0.7], 1)).abs() < 1e-15);
        let s = cross_entropy_node(&mut g, p, 1, 0.2).unwrap();
        let expect = -(0.9 * 0.7f64.ln() + 0.1 * 0.3f64.ln());
        assert!((g.value(s).item() - expect).abs() < 1e-15);
    }

    fn align(beta: &[f64], n: usize, m: usize, t: &[f64], w: &[f64]) -> f64 {
        let mut g = Graph::<f64>::new();
        let b = g.constant(Tensor::from_f64(&[n, m], beta).unwrap());
        let tt = g.constant(Tensor::from_f64(&[n, t.len() / n], t).unwrap());
        let wd = g.constant(Tensor::from_f64(&[1, w.len()], w).unwrap());
        let l = alignment_loss(&mut g, b, tt, wd).unwrap();
        g.value(l).item()
    }

    #[test]
    fn alignment_hand_example() {
        let v = align(&[1., 0., 0., 1.], 2, 2, &[0.3, -0.2, 0.9, 0.1], &[0.0; 4]);
        assert!((v + 1.0).abs() < 1e-15);
    }

    #[test]
    fn alignment_trivial_cases() {
        assert_eq!(align(&[0.2, 0.8], 1, 2, &[1.0, 2.0], &[0.5; 4]), 0.0);
        let v = align(&[0.3, 0.7, 0.3, 0.7, 0.3, 0.7], 3, 2, &[1., 2., 3., 4., 5., 6.], &[0.4; 4]);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn alignment_graph_matches_value_form() {
        let beta = [0.1, 0.9, 0.6, 0.4, 0.5, 0.5];
        let t = [0.2, -0.3, 1.1, 0.4, -0.7, 0.05];
        let w = [0.3, -0.8, 0.5, 0.2];
        let rows = |v: &[f64]| v.chunks(2).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let expect = alignment_loss_value(&rows(&beta), &rows(&t), &w);
        assert!((align(&beta, 3, 2, &t, &w) - expect).abs() < 1e-14);
    }

    #[test]
    fn total_loss_combines() {
        let cfg = LossConfig {
            lambda_align: 1.0,
            label_smoothing: 0.0,
        };
        assert!((total_loss(0.7, -1.0, &cfg) + 0.3).abs() < 1e-15);
        assert_eq!(total_loss(0.7, -1.0, &LossConfig { lambda_align: 0.0, ..cfg }), 0.7);
        let mut g = Graph::<f64>::new();
        let ce = [g.constant(Tensor::scalar(0.4)), g.constant(Tensor::scalar(0.8))];
        let al = [g.constant(Tensor::scalar(-2.0))];
        let b = total_loss_node(&mut g, &ce, &al, &LossConfig::default()).unwrap();
        assert!((g.value(b.total).item() - (0.6 - 0.2)).abs() < 1e-15);
    }
}
