//! Fine-grained emoji/text attention and the coarse ablation variant.
//!
//! With `T` the `n x 2d` text hidden states and `E` the `m x 2d` emoji hidden
//! states, the interaction matrix is
//! `U[i][j] = w_u . [E_j ; T_i ; E_j * T_i]`. Emoji weights come from the
//! column maxima of `U`, text weights from the row maxima, and the two
//! attended vectors are concatenated as `[m_ft ; m_fe]`.

use rand::Rng;

use crate::error::{FaetError, Result, TensorError};
use crate::graph::{Axis, Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FineAttentionParams {
    /// `1 x 6d` interaction weights.
    pub w_u: ParamId,
    /// `1 x 4d` text-pair distance weights used by the alignment loss.
    pub w_d: ParamId,
}

impl FineAttentionParams {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, d: usize, rng: &mut impl Rng) -> Self {
        let w_u = store.add_uniform("attn_w_u", &[1, 6 * d], (6.0 * d as f64).sqrt().recip(), rng);
        let w_d = store.add_uniform("align_w_d", &[1, 4 * d], (4.0 * d as f64).sqrt().recip(), rng);
        FineAttentionParams { w_u, w_d }
    }
}

/// `n x m` interaction matrix between text rows `t` and emoji rows `e`.
pub fn interaction_matrix<S: Scalar>(g: &mut Graph<S>, t: NodeId, e: NodeId, w_u: NodeId) -> Result<NodeId> {
    let ((n, dt), (m, de)) = (g.value(t).dims2(), g.value(e).dims2());
    let wu = g.value(w_u).len();
    if dt != de || wu != 3 * dt {
        return Err(TensorError::Shape {
            op: "interaction_matrix",
            detail: format!("T {:?}, E {:?}, w_u of length {wu}", (n, dt), (m, de)),
        }
        .into());
    }
    let text_rows: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(m)).collect();
    let emoji_rows: Vec<usize> = (0..n).flat_map(|_| 0..m).collect();
    let ti = g.gather_rows(t, &text_rows)?;
    let ej = g.gather_rows(e, &emoji_rows)?;
    let prod = g.mul(ej, ti)?;
    let pairs = g.concat(&[ej, ti, prod], Axis::Cols)?;
    let scores = g.matmul_t(pairs, w_u)?;
    Ok(g.reshape(scores, &[n, m])?)
}

/// Emoji attention `e_fe` (`1 x m`) and the attended emoji vector `m_fe`
/// (`1 x 2d`). With no emojis, `e_fe` is empty and `m_fe` is zero.
pub fn f_emoji2text<S: Scalar>(g: &mut Graph<S>, u: NodeId, e: NodeId) -> Result<(NodeId, NodeId)> {
    let (m, width) = g.value(e).dims2();
    if m == 0 {
        let weights = g.constant(Tensor::zeros(&[1, 0]));
        let attended = g.constant(Tensor::zeros(&[1, width]));
        return Ok((weights, attended));
    }
    let strongest = g.max(u, Axis::Rows)?;
    let weights = g.softmax(strongest, Axis::Cols)?;
    let attended = g.matmul(weights, e)?;
    Ok((weights, attended))
}

/// Text attention `t_ft` (`1 x n`) and the attended text vector `m_ft`
/// (`1 x 2d`). With no emojis the weights fall back to uniform.
pub fn f_text2emoji<S: Scalar>(g: &mut Graph<S>, u: NodeId, t: NodeId) -> Result<(NodeId, NodeId)> {
    let (n, m) = g.value(u).dims2();
    let weights = if m == 0 {
        g.constant(Tensor::full(&[1, n], S::one() / S::of(n as f64)))
    } else {
        let strongest = g.max(u, Axis::Cols)?;
        let strongest = g.reshape(strongest, &[1, n])?;
        g.softmax(strongest, Axis::Cols)?
    };
    let attended = g.matmul(weights, t)?;
    Ok((weights, attended))
}

/// Row-wise softmax of `U`: each text word's distribution over emojis.
pub fn per_text_emoji_attention<S: Scalar>(g: &mut Graph<S>, u: NodeId) -> Result<NodeId> {
    Ok(g.softmax(u, Axis::Cols)?)
}

/// `[m_ft ; m_fe]`.
pub fn fuse<S: Scalar>(g: &mut Graph<S>, m_ft: NodeId, m_fe: NodeId) -> Result<NodeId> {
    let (a, b) = (g.value(m_ft).dims2(), g.value(m_fe).dims2());
    if a != b || a.0 != 1 {
        return Err(FaetError::Tensor(TensorError::Shape {
            op: "fuse",
            detail: format!("m_ft {a:?} vs m_fe {b:?}"),
        }));
    }
    Ok(g.concat(&[m_ft, m_fe], Axis::Cols)?)
}

/// Every node produced by the fine-grained layer for one document.
#[derive(Clone, Copy, Debug)]
pub struct FineAttention {
    pub interaction: NodeId,
    pub emoji_weights: NodeId,
    pub text_weights: NodeId,
    /// `n x m` per-text-word emoji distributions (absent when `m = 0`).
    pub beta: Option<NodeId>,
    pub m_fe: NodeId,
    pub m_ft: NodeId,
    pub fused: NodeId,
}

pub fn fine_attention<S: Scalar>(g: &mut Graph<S>, t: NodeId, e: NodeId, w_u: NodeId) -> Result<FineAttention> {
    let interaction = interaction_matrix(g, t, e, w_u)?;
    let (emoji_weights, m_fe) = f_emoji2text(g, interaction, e)?;
    let (text_weights, m_ft) = f_text2emoji(g, interaction, t)?;
    let beta = if g.value(e).dims2().0 > 0 {
        Some(per_text_emoji_attention(g, interaction)?)
    } else {
        None
    };
    let fused = fuse(g, m_ft, m_fe)?;
    Ok(FineAttention {
        interaction,
        emoji_weights,
        text_weights,
        beta,
        m_fe,
        m_ft,
        fused,
    })
}

/// Parameters of the coarse attention: `w_c` is `2d x 4d`, `v_c` is `1 x 2d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoarseAttentionParams {
    pub w_c: ParamId,
    pub v_c: ParamId,
}

impl CoarseAttentionParams {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, d: usize, rng: &mut impl Rng) -> Self {
        let w_c = store.add_uniform("coarse_w_c", &[2 * d, 4 * d], (4.0 * d as f64).sqrt().recip(), rng);
        let v_c = store.add_uniform("coarse_v_c", &[1, 2 * d], (2.0 * d as f64).sqrt().recip(), rng);
        CoarseAttentionParams { w_c, v_c }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CoarseAttention {
    /// Mean of the text rows, `1 x 2d`.
    pub sentence: NodeId,
    /// `1 x m` weights over emojis.
    pub weights: NodeId,
    /// Weighted emoji vector, `1 x 2d`.
    pub context: NodeId,
}

/// One sentence-conditioned attention over the emoji rows:
/// `u_j = v_c . tanh(W_c [E_j ; mean(T)])`.
pub fn coarse_attention_aet<S: Scalar>(
    g: &mut Graph<S>,
    t: NodeId,
    e: NodeId,
    w_c: NodeId,
    v_c: NodeId,
) -> Result<CoarseAttention> {
    let (m, width) = g.value(e).dims2();
    let sentence = g.mean(t, Axis::Rows)?;
    if m == 0 {
        let weights = g.constant(Tensor::zeros(&[1, 0]));
        let context = g.constant(Tensor::zeros(&[1, width]));
        return Ok(CoarseAttention {
            sentence,
            weights,
            context,
        });
    }
    let repeated = g.gather_rows(sentence, &vec![0; m])?;
    let x = g.concat(&[e, repeated], Axis::Cols)?;
    let hidden = g.matmul_t(x, w_c)?;
    let hidden = g.tanh(hidden);
    let scores = g.matmul_t(hidden, v_c)?;
    let scores = g.reshape(scores, &[1, m])?;
    let weights = g.softmax(scores, Axis::Cols)?;
    let context = g.matmul(weights, e)?;
    Ok(CoarseAttention {
        sentence,
        weights,
        context,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn zero_weights_zero_interactions() {
        let mut g = Graph::new();
        let tn = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let en = g.constant(t(&[3, 2], &[1., 0., 0., 1., 1., 1.]));
        let w = g.constant(Tensor::zeros(&[1, 6]));
        let u = interaction_matrix(&mut g, tn, en, w).unwrap();
        assert_eq!(g.value(u).shape(), &[2, 3]);
        assert!(g.value(u).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_pair_matches_definition() {
        let mut g = Graph::new();
        let tn = g.constant(t(&[1, 2], &[0.5, -1.0]));
        let en = g.constant(t(&[1, 2], &[2.0, 3.0]));
        let wv = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let w = g.constant(t(&[1, 6], &wv));
        let u = interaction_matrix(&mut g, tn, en, w).unwrap();
        let feats = [2.0, 3.0, 0.5, -1.0, 1.0, -3.0];
        let expect: f64 = wv.iter().zip(feats).map(|(a, b)| a * b).sum();
        assert!((g.value(u).item() - expect).abs() < 1e-15);
    }

    #[test]
    fn zeroed_emoji_leaves_text_segment() {
        let mut g = Graph::new();
        let tn = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let en = g.constant(t(&[2, 2], &[0., 0., 5., 5.]));
        let w = g.constant(t(&[1, 6], &[1., 1., 0.5, -0.5, 1., 1.]));
        let u = interaction_matrix(&mut g, tn, en, w).unwrap();
        let v = g.value(u);
        assert_eq!(v.at(0, 0), 0.5 * 1. - 0.5 * 2.);
        assert_eq!(v.at(1, 0), 0.5 * 3. - 0.5 * 4.);
    }

    #[test]
    fn interaction_dimension_checked() {
        let mut g = Graph::new();
        let tn = g.constant(Tensor::<f64>::zeros(&[2, 2]));
        let en = g.constant(Tensor::zeros(&[2, 2]));
        let w = g.constant(Tensor::zeros(&[1, 5]));
        assert!(interaction_matrix(&mut g, tn, en, w).is_err());
    }

    #[test]
    fn single_emoji_gets_all_weight() {
        let mut g = Graph::new();
        let u = g.constant(t(&[3, 1], &[0.3, -2.0, 5.0]));
        let e = g.constant(t(&[1, 2], &[0.7, -0.1]));
        let (w, m_fe) = f_emoji2text(&mut g, u, e).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
        assert_eq!(g.value(m_fe).data(), &[0.7, -0.1]);
    }

    #[test]
    fn column_maxima_drive_emoji_weights() {
        let mut g = Graph::new();
        let u = g.constant(t(&[2, 2], &[2.0, -1.0, 0.5, 0.0]));
        let e = g.constant(t(&[2, 1], &[1.0, 0.0]));
        let (w, _) = f_emoji2text(&mut g, u, e).unwrap();
        let w = g.value(w).data();
        assert!((w[0] - 0.8808).abs() < 1e-4 && (w[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn text_weights_uniform_for_constant_u() {
        let mut g = Graph::new();
        let u = g.constant(Tensor::full(&[4, 3], 0.7));
        let tn = g.constant(t(&[4, 1], &[1., 2., 3., 4.]));
        let (w, m_ft) = f_text2emoji(&mut g, u, tn).unwrap();
        assert!(g.value(w).data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert!((g.value(m_ft).item() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn single_text_word() {
        let mut g = Graph::new();
        let u = g.constant(t(&[1, 2], &[0.1, 0.9]));
        let tn = g.constant(t(&[1, 2], &[3.0, 4.0]));
        let (w, m_ft) = f_text2emoji(&mut g, u, tn).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
        assert_eq!(g.value(m_ft).data(), &[3.0, 4.0]);
    }

    #[test]
    fn beta_rows() {
        let mut g = Graph::new();
        let u = g.constant(t(&[2, 2], &[2.0, 0.0, 1.0, 1.0]));
        let b = per_text_emoji_attention(&mut g, u).unwrap();
        let v = g.value(b);
        assert!((v.at(0, 0) - 0.8808).abs() < 1e-4);
        assert_eq!(v.at(1, 0), 0.5);
        let single = g.constant(t(&[3, 1], &[4.0, -1.0, 0.0]));
        let b1 = per_text_emoji_attention(&mut g, single).unwrap();
        assert_eq!(g.value(b1).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn fuse_order_and_checks() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1., 2.]));
        let b = g.constant(t(&[1, 2], &[3., 4.]));
        let f = fuse(&mut g, a, b).unwrap();
        assert_eq!(g.value(f).data(), &[1., 2., 3., 4.]);
        let c = g.constant(t(&[1, 3], &[0., 0., 0.]));
        assert!(fuse(&mut g, a, c).is_err());
    }

    #[test]
    fn no_emojis_fallback() {
        let mut g = Graph::new();
        let tn = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let en = g.constant(Tensor::zeros(&[0, 2]));
        let w = g.constant(Tensor::full(&[1, 6], 0.3));
        let fa = fine_attention(&mut g, tn, en, w).unwrap();
        assert!(fa.beta.is_none());
        assert_eq!(g.value(fa.m_fe).data(), &[0.0, 0.0]);
        assert_eq!(g.value(fa.text_weights).data(), &[0.5, 0.5]);
        assert_eq!(g.value(fa.fused).data(), &[2.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn coarse_single_emoji_and_equal_scores() {
        let mut g = Graph::new();
        let tn = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let e1 = g.constant(t(&[1, 2], &[0.3, 0.6]));
        let wc = g.constant(t(&[2, 4], &[0.1, -0.2, 0.3, 0.4, 0.5, 0.6, -0.7, 0.8]));
        let vc = g.constant(t(&[1, 2], &[1.0, -1.0]));
        let c = coarse_attention_aet(&mut g, tn, e1, wc, vc).unwrap();
        assert_eq!(g.value(c.context).data(), &[0.3, 0.6]);

        let e2 = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let zero_v = g.constant(Tensor::zeros(&[1, 2]));
        let c = coarse_attention_aet(&mut g, tn, e2, wc, zero_v).unwrap();
        assert_eq!(g.value(c.context).data(), &[0.5, 0.5]);
        assert_eq!(g.value(c.sentence).data(), &[2.0, 3.0]);
    }
}
