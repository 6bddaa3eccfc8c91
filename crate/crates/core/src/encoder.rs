//! Bidirectional LSTM over the embedded `[text ; emoji]` sequence.

use rand::Rng;

use crate::error::{FaetError, Result};
use crate::graph::{Axis, Graph, NodeId};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One LSTM direction. Gate blocks are stacked column-wise in the order
/// input, forget, output, candidate: `w` is `d_w x 4d`, `u` is `d x 4d`,
/// `b` is `4d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

/// Hidden and cell state nodes, each `1 x d`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: NodeId,
    pub c: NodeId,
}

impl LstmParams {
    /// Uniform `[-1/sqrt(d), 1/sqrt(d)]` weights, forget-gate bias 1.
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = (hidden as f64).sqrt().recip();
        let w = store.add_uniform(format!("{prefix}_w"), &[input, 4 * hidden], bound, rng);
        let u = store.add_uniform(format!("{prefix}_u"), &[hidden, 4 * hidden], bound, rng);
        let b = store.add_uniform(format!("{prefix}_b"), &[4 * hidden], bound, rng);
        store.get_mut(b).value.data_mut()[hidden..2 * hidden]
            .iter_mut()
            .for_each(|x| *x = S::one());
        LstmParams { w, u, b, hidden }
    }

    pub fn zero_state<S: Scalar>(&self, g: &mut Graph<S>) -> LstmState {
        let h = g.constant(Tensor::zeros(&[1, self.hidden]));
        let c = g.constant(Tensor::zeros(&[1, self.hidden]));
        LstmState { h, c }
    }

    /// Input projections `x W + b` for every row of an `L x d_w` sequence.
    pub fn project<S: Scalar>(&self, g: &mut Graph<S>, bound: &Bound, x: NodeId) -> Result<NodeId> {
        let xw = g.matmul(x, bound.node(self.w))?;
        Ok(g.add_row(xw, bound.node(self.b))?)
    }

    /// Advances one step from a precomputed `1 x 4d` input projection.
    pub fn step_projected<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        projected: NodeId,
        prev: LstmState,
    ) -> Result<LstmState> {
        let d = self.hidden;
        let rec = g.matmul(prev.h, bound.node(self.u))?;
        let z = g.add(projected, rec)?;
        let gates = g.slice_cols(z, 0, 3 * d)?;
        let gates = g.sigmoid(gates);
        let i = g.slice_cols(gates, 0, d)?;
        let f = g.slice_cols(gates, d, 2 * d)?;
        let o = g.slice_cols(gates, 2 * d, 3 * d)?;
        let cand = g.slice_cols(z, 3 * d, 4 * d)?;
        let cand = g.tanh(cand);
        let keep = g.mul(f, prev.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    /// One LSTM step on a `1 x d_w` input.
    pub fn step<S: Scalar>(&self, g: &mut Graph<S>, bound: &Bound, x: NodeId, prev: LstmState) -> Result<LstmState> {
        let projected = self.project(g, bound, x)?;
        self.step_projected(g, bound, projected, prev)
    }

    /// Runs several sequences stored back to back in the rows of `x`, all
    /// time steps of all sequences advancing together. `lengths` gives the
    /// row count of each sequence; with `reverse` each one is read back to
    /// front. Row `r` of the result is the hidden state produced at input row `r`.
    pub fn run_packed<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        x: NodeId,
        lengths: &[usize],
        reverse: bool,
    ) -> Result<NodeId> {
        let total: usize = lengths.iter().sum();
        if g.value(x).dims2().0 != total {
            return Err(FaetError::Data(format!(
                "{} input rows for sequences of total length {total}",
                g.value(x).dims2().0
            )));
        }
        if total == 0 {
            return Ok(g.constant(Tensor::zeros(&[0, self.hidden])));
        }
        let offsets: Vec<usize> = lengths
            .iter()
            .scan(0, |acc, &l| {
                let o = *acc;
                *acc += l;
                Some(o)
            })
            .collect();
        // Longest first, so the sequences still running are always a prefix.
        let mut order: Vec<usize> = (0..lengths.len()).filter(|&i| lengths[i] > 0).collect();
        order.sort_by(|&a, &b| lengths[b].cmp(&lengths[a]));
        let projected = self.project(g, bound, x)?;
        let zeros = Tensor::zeros(&[order.len(), self.hidden]);
        let mut state = LstmState {
            h: g.constant(zeros.clone()),
            c: g.constant(zeros),
        };
        let mut outputs = Vec::new();
        let mut source_rows = Vec::with_capacity(total);
        for t in 0..lengths[order[0]] {
            let active = order.iter().take_while(|&&i| lengths[i] > t).count();
            let rows: Vec<usize> = order[..active]
                .iter()
                .map(|&i| offsets[i] + if reverse { lengths[i] - 1 - t } else { t })
                .collect();
            let z = g.gather_rows(projected, &rows)?;
            if g.value(state.h).dims2().0 > active {
                state = LstmState {
                    h: g.slice_rows(state.h, 0, active)?,
                    c: g.slice_rows(state.c, 0, active)?,
                };
            }
            state = self.step_projected(g, bound, z, state)?;
            outputs.push(state.h);
            source_rows.extend(rows);
        }
        let stacked = g.concat(&outputs, Axis::Rows)?;
        let mut back = vec![0; total];
        for (k, &r) in source_rows.iter().enumerate() {
            back[r] = k;
        }
        Ok(g.gather_rows(stacked, &back)?)
    }

    /// Runs over all rows of `x` in order and stacks the hidden states (`L x d`).
    pub fn run<S: Scalar>(&self, g: &mut Graph<S>, bound: &Bound, x: NodeId) -> Result<NodeId> {
        let steps = g.value(x).dims2().0;
        let projected = self.project(g, bound, x)?;
        let mut state = self.zero_state(g);
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let row = g.slice_rows(projected, t, t + 1)?;
            state = self.step_projected(g, bound, row, state)?;
            outputs.push(state.h);
        }
        if outputs.is_empty() {
            return Ok(g.constant(Tensor::zeros(&[0, self.hidden])));
        }
        Ok(g.concat(&outputs, Axis::Rows)?)
    }
}

/// Evaluates one LSTM step on plain values; returns `(h, c)`.
pub fn lstm_step<S: Scalar>(
    params: &LstmParams,
    store: &ParamStore<S>,
    x: &[S],
    h: &[S],
    c: &[S],
) -> Result<(Vec<S>, Vec<S>)> {
    let d = params.hidden;
    let d_w = store.value(params.w).dims2().0;
    if x.len() != d_w || h.len() != d || c.len() != d {
        return Err(FaetError::Tensor(crate::error::TensorError::Shape {
            op: "lstm_step",
            detail: format!("x {} (want {d_w}), h {} and c {} (want {d})", x.len(), h.len(), c.len()),
        }));
    }
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let xn = g.constant(Tensor::row(x.to_vec()));
    let prev = LstmState {
        h: g.constant(Tensor::row(h.to_vec())),
        c: g.constant(Tensor::row(c.to_vec())),
    };
    let next = params.step(&mut g, &bound, xn, prev)?;
    Ok((g.value(next.h).data().to_vec(), g.value(next.c).data().to_vec()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiLstm {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl BiLstm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        BiLstm {
            forward: LstmParams::new(store, "lstm_fwd", input, hidden, rng),
            backward: LstmParams::new(store, "lstm_bwd", input, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden
    }

    /// [`BiLstm::encode`] over sequences stored back to back in the rows of `x`.
    pub fn encode_packed<S: Scalar>(&self, g: &mut Graph<S>, bound: &Bound, x: NodeId, lengths: &[usize]) -> Result<NodeId> {
        let fwd = self.forward.run_packed(g, bound, x, lengths, false)?;
        let bwd = self.backward.run_packed(g, bound, x, lengths, true)?;
        Ok(g.concat(&[fwd, bwd], Axis::Cols)?)
    }

    /// `L x d_w` sequence to `L x 2d`; row `t` is `[forward h_t ; backward h_t]`.
    pub fn encode<S: Scalar>(&self, g: &mut Graph<S>, bound: &Bound, x: NodeId) -> Result<NodeId> {
        let steps = g.value(x).dims2().0;
        let fwd = self.forward.run(g, bound, x)?;
        let reversed: Vec<usize> = (0..steps).rev().collect();
        let x_rev = g.gather_rows(x, &reversed)?;
        let bwd_rev = self.backward.run(g, bound, x_rev)?;
        let bwd = g.gather_rows(bwd_rev, &reversed)?;
        Ok(g.concat(&[fwd, bwd], Axis::Cols)?)
    }
}

/// Encodes a padded `rows x width x d_w` batch; outputs past each row's
/// length are zero.
pub fn bilstm_encode<S: Scalar>(
    bilstm: &BiLstm,
    store: &ParamStore<S>,
    embedded: &Tensor<S>,
    lengths: &[usize],
) -> Result<Tensor<S>> {
    let &[rows, width, dim] = embedded.shape() else {
        return Err(FaetError::Data(format!(
            "bilstm_encode expects a rank-3 input, got {:?}",
            embedded.shape()
        )));
    };
    if lengths.len() != rows {
        return Err(FaetError::Data(format!("{} lengths for {rows} rows", lengths.len())));
    }
    let out_dim = 2 * bilstm.hidden();
    let mut out = Tensor::zeros(&[rows, width, out_dim]);
    for (r, &len) in lengths.iter().enumerate() {
        if len > width {
            return Err(FaetError::Data(format!(
                "row {r}: length {len} exceeds sequence dimension {width}"
            )));
        }
        if len == 0 {
            continue;
        }
        let start = r * width * dim;
        let x = Tensor::new(vec![len, dim], embedded.data()[start..start + len * dim].to_vec())?;
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let xn = g.constant(x);
        let h = bilstm.encode(&mut g, &bound, xn)?;
        let o = r * width * out_dim;
        out.data_mut()[o..o + len * out_dim].copy_from_slice(g.value(h).data());
    }
    Ok(out)
}
