//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its result
//! and enough of its operands to run the backward rule. Nodes are appended in
//! execution order, so the node list is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower clamp applied to the input of [`Graph::log`].
pub const LOG_FLOOR: f64 = 1e-12;

/// Upper clamp applied to the input of [`Graph::exp`].
const EXP_CEIL: f64 = 700.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows; an `r x c` input gives a `1 x c` result.
    Rows,
    /// Reduce over columns; an `r x c` input gives an `r x 1` result.
    Cols,
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    ScaleRows(NodeId, NodeId),
    Scale(NodeId, S),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Transpose(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Relu(NodeId),
    Softmax(NodeId, Axis),
    /// Flat source index of each reduced element.
    Max {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Mean(NodeId, Axis),
    SumAxis(NodeId, Axis),
    Sum(NodeId),
    Concat(Vec<NodeId>, Axis),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    Gather(NodeId, Vec<usize>),
    Reshape(NodeId),
    Conv1d {
        input: NodeId,
        extra: Option<NodeId>,
        kernel: NodeId,
        bias: NodeId,
        width: usize,
    },
    Dropout(NodeId, Vec<S>),
    Pick(NodeId, usize),
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    grad: Option<Tensor<S>>,
}

#[derive(Clone, Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    /// Sequence and broadcast parts of convolution kernels, keyed by
    /// `(kernel, channels, broadcast columns, width)`.
    split_kernels: RefCell<HashMap<(usize, usize, usize, usize), Rc<SplitKernel<S>>>>,
}

#[derive(Debug)]
struct SplitKernel<S> {
    /// `F x (width * C)`.
    sequence: Vec<S>,
    /// `F x E`, summed over the window offsets.
    broadcast_sum: Vec<S>,
}

/// Row counts up to which products are computed with plain loops; GEMM
/// packing costs more than it saves for these shapes.
const SMALL_DIM: usize = 4;

/// `out = a b + beta out`, with `out` a row-major buffer.
fn matmul_into<S: Scalar>(a: ArrayView2<'_, S>, b: ArrayView2<'_, S>, out: &mut [S], beta: S) {
    let (m, k, n) = (a.nrows(), a.ncols(), b.ncols());
    if m > SMALL_DIM && k > SMALL_DIM {
        let mut c = ArrayViewMut2::from_shape((m, n), out).expect("output buffer");
        general_mat_mul(S::one(), &a, &b, beta, &mut c);
        return;
    }
    if beta == S::zero() {
        out.iter_mut().for_each(|x| *x = S::zero());
    } else if beta != S::one() {
        out.iter_mut().for_each(|x| *x *= beta);
    }
    let columns_contiguous = b.t().row(0).as_slice().is_some() && b.row(0).as_slice().is_none();
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        if columns_contiguous {
            // b is a transposed row-major matrix: each output is a dot product.
            for (j, o) in row.iter_mut().enumerate() {
                let col = b.column(j);
                let col = col.as_slice().unwrap();
                let mut acc = S::zero();
                for (x, y) in a.row(i).iter().zip(col) {
                    acc += *x * *y;
                }
                *o += acc;
            }
        } else {
            for (kk, &aik) in a.row(i).iter().enumerate() {
                match b.row(kk).as_slice() {
                    Some(br) => row.iter_mut().zip(br).for_each(|(o, &y)| *o += aik * y),
                    None => row.iter_mut().zip(b.row(kk)).for_each(|(o, &y)| *o += aik * y),
                }
            }
        }
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Lazily allocated gradient buffers for one backward sweep.
struct Grads<S> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    fn slot<'a>(&'a mut self, nodes: &[Node<S>], id: NodeId) -> &'a mut [S] {
        let shape = nodes[id.0].value.shape();
        self.slots[id.0]
            .get_or_insert_with(|| Tensor::zeros(shape))
            .data_mut()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            split_kernels: RefCell::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, operands: &[NodeId]) -> NodeId {
        let requires_grad = operands.iter().any(|o| self.nodes[o.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dims2()
    }

    fn data(&self, id: NodeId) -> &[S] {
        self.nodes[id.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), TensorError> {
        let (sa, sb) = (self.dims(a), self.dims(b));
        if sa != sb {
            return Err(TensorError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip(&mut self, a: NodeId, b: NodeId, f: impl Fn(S, S) -> S, op: Op<S>) -> NodeId {
        let shape = self.nodes[a.0].value.shape().to_vec();
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(Tensor::new(shape, data).unwrap(), op, &[a, b])
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(S) -> S, op: Op<S>) -> NodeId {
        let value = self.nodes[a.0].value.map(f);
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a length-`c` bias to every row of an `r x c` matrix.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims(a);
        if self.nodes[bias.0].value.len() != c {
            return Err(TensorError::shape(
                "add_row",
                format!("{:?} + bias {:?}", (r, c), self.nodes[bias.0].value.shape()),
            ));
        }
        let b = self.data(bias);
        let data = self
            .data(a)
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::AddRow(a, bias), &[a, bias]))
    }

    /// Multiplies row `i` of an `r x c` matrix by `scale[i]`.
    pub fn scale_rows(&mut self, a: NodeId, scale: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims(a);
        if self.nodes[scale.0].value.len() != r {
            return Err(TensorError::shape(
                "scale_rows",
                format!("{:?} rows vs {:?}", (r, c), self.nodes[scale.0].value.shape()),
            ));
        }
        let s = self.data(scale);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(self.data(a)[i * c..(i + 1) * c].iter().map(|&x| x * s[i]));
        }
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::ScaleRows(a, scale), &[a, scale]))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: NodeId, k: S) -> NodeId {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(TensorError::shape("matmul", format!("{:?} x {:?}", (m, k), (k2, n))));
        }
        let mut out = vec![S::zero(); m * n];
        let va = self.nodes[a.0].value.view2();
        let vb = self.nodes[b.0].value.view2();
        matmul_into(va, vb, &mut out, S::zero());
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a @ b^T`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let ((m, k), (n, k2)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(TensorError::shape(
                "matmul_t",
                format!("{:?} x {:?}^T", (m, k), (n, k2)),
            ));
        }
        let mut out = vec![S::zero(); m * n];
        let va = self.nodes[a.0].value.view2();
        let vb = self.nodes[b.0].value.view2();
        matmul_into(va, vb.t(), &mut out, S::zero());
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let src = self.data(a);
        let mut data = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                data.push(src[i * c + j]);
            }
        }
        self.push(Tensor::new(vec![c, r], data).unwrap(), Op::Transpose(a), &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    /// `exp`, with the input saturated at 700 so the result stays finite.
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let ceil = S::of(EXP_CEIL);
        self.unary(a, |x| x.min(ceil).exp(), Op::Exp(a))
    }

    /// Natural log of `max(x, LOG_FLOOR)`.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let floor = S::of(LOG_FLOOR);
        self.unary(a, |x| x.max(floor).ln(), Op::Log(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(S::zero()), Op::Relu(a))
    }

    /// Visits each reduction lane of an `r x c` matrix as `(lane, offsets)`.
    fn lanes(r: usize, c: usize, axis: Axis) -> Vec<Vec<usize>> {
        match axis {
            Axis::Cols => (0..r).map(|i| (0..c).map(|j| i * c + j).collect()).collect(),
            Axis::Rows => (0..c).map(|j| (0..r).map(|i| i * c + j).collect()).collect(),
        }
    }

    fn reduced_shape(r: usize, c: usize, axis: Axis) -> Vec<usize> {
        match axis {
            Axis::Rows => vec![1, c],
            Axis::Cols => vec![r, 1],
        }
    }

    fn check_axis(&self, op: &'static str, a: NodeId, axis: Axis) -> Result<(), TensorError> {
        let (r, c) = self.dims(a);
        let extent = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
        };
        if extent == 0 {
            return Err(TensorError::EmptyAxis {
                op,
                shape: self.nodes[a.0].value.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Numerically stable softmax along `axis`; `Axis::Cols` normalises each row.
    pub fn softmax(&mut self, a: NodeId, axis: Axis) -> Result<NodeId, TensorError> {
        self.check_axis("softmax", a, axis)?;
        let (r, c) = self.dims(a);
        let src = self.data(a);
        let mut out = vec![S::zero(); r * c];
        for lane in Self::lanes(r, c, axis) {
            let max = lane.iter().map(|&k| src[k]).fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for &k in &lane {
                let e = (src[k] - max).exp();
                out[k] = e;
                total += e;
            }
            for &k in &lane {
                out[k] /= total;
            }
        }
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::Softmax(a, axis), &[a]))
    }

    /// Maximum along `axis`. Ties resolve to the first maximal index, which is
    /// also where the backward rule routes the gradient.
    pub fn max(&mut self, a: NodeId, axis: Axis) -> Result<NodeId, TensorError> {
        self.check_axis("max", a, axis)?;
        let (r, c) = self.dims(a);
        let src = self.data(a);
        let mut out = Vec::new();
        let mut argmax = Vec::new();
        for lane in Self::lanes(r, c, axis) {
            let mut best = lane[0];
            for &k in &lane[1..] {
                if src[k] > src[best] {
                    best = k;
                }
            }
            out.push(src[best]);
            argmax.push(best);
        }
        let value = Tensor::new(Self::reduced_shape(r, c, axis), out)?;
        Ok(self.push(value, Op::Max { input: a, argmax }, &[a]))
    }

    pub fn mean(&mut self, a: NodeId, axis: Axis) -> Result<NodeId, TensorError> {
        self.check_axis("mean", a, axis)?;
        let (r, c) = self.dims(a);
        let n = S::of(match axis {
            Axis::Rows => r,
            Axis::Cols => c,
        } as f64);
        let src = self.data(a);
        let out = Self::lanes(r, c, axis)
            .iter()
            .map(|lane| lane.iter().map(|&k| src[k]).sum::<S>() / n)
            .collect();
        let value = Tensor::new(Self::reduced_shape(r, c, axis), out)?;
        Ok(self.push(value, Op::Mean(a, axis), &[a]))
    }

    /// Sum along `axis`; an empty axis sums to zero.
    pub fn sum_axis(&mut self, a: NodeId, axis: Axis) -> NodeId {
        let (r, c) = self.dims(a);
        let src = self.data(a);
        let out = Self::lanes(r, c, axis)
            .iter()
            .map(|lane| lane.iter().map(|&k| src[k]).sum::<S>())
            .collect();
        let value = Tensor::new(Self::reduced_shape(r, c, axis), out).unwrap();
        self.push(value, Op::SumAxis(a, axis), &[a])
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.data(a).iter().copied().sum::<S>();
        self.push(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// Concatenation; `Axis::Rows` stacks vertically, `Axis::Cols` side by side.
    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::shape("concat", "no operands"));
        }
        let dims: Vec<_> = parts.iter().map(|&p| self.dims(p)).collect();
        let value = match axis {
            Axis::Rows => {
                let c = dims[0].1;
                if let Some(d) = dims.iter().find(|d| d.1 != c) {
                    return Err(TensorError::shape(
                        "concat",
                        format!("column counts differ: {:?} vs {:?}", dims[0], d),
                    ));
                }
                let r = dims.iter().map(|d| d.0).sum();
                let mut data = Vec::with_capacity(r * c);
                for &p in parts {
                    data.extend_from_slice(self.data(p));
                }
                Tensor::new(vec![r, c], data)?
            }
            Axis::Cols => {
                let r = dims[0].0;
                if let Some(d) = dims.iter().find(|d| d.0 != r) {
                    return Err(TensorError::shape(
                        "concat",
                        format!("row counts differ: {:?} vs {:?}", dims[0], d),
                    ));
                }
                let c: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    for (&p, d) in parts.iter().zip(&dims) {
                        data.extend_from_slice(&self.data(p)[i * d.1..(i + 1) * d.1]);
                    }
                }
                Tensor::new(vec![r, c], data)?
            }
        };
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims(a);
        if start > end || end > r {
            return Err(TensorError::shape(
                "slice_rows",
                format!("{start}..{end} of {r} rows"),
            ));
        }
        let data = self.data(a)[start * c..end * c].to_vec();
        Ok(self.push(
            Tensor::new(vec![end - start, c], data)?,
            Op::SliceRows(a, start),
            &[a],
        ))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims(a);
        if start > end || end > c {
            return Err(TensorError::shape(
                "slice_cols",
                format!("{start}..{end} of {c} columns"),
            ));
        }
        let src = self.data(a);
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        Ok(self.push(
            Tensor::new(vec![r, end - start], data)?,
            Op::SliceCols(a, start),
            &[a],
        ))
    }

    /// Row lookup: result row `k` is input row `rows[k]`.
    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims(a);
        let src = self.data(a);
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    len: r,
                });
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Tensor::new(vec![rows.len(), c], data)?,
            Op::Gather(a, rows.to_vec()),
            &[a],
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let value = self.nodes[a.0].value.clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Valid 1-D convolution along the rows of an `L x C` input.
    ///
    /// `kernel` is `F x (width * C)`; entry `[f, k * C + c]` multiplies
    /// `input[t + k, c]`. The output is `(L - width + 1) x F` plus `bias`.
    pub fn conv1d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId, width: usize) -> Result<NodeId, TensorError> {
        self.conv1d_impl(input, None, kernel, bias, width)
    }

    /// [`Graph::conv1d`] over `[input ; extra]`, where the `1 x E` row `extra`
    /// is appended to every position. Equal to concatenating first, but the
    /// repeated block is convolved once instead of at every position.
    pub fn conv1d_broadcast(
        &mut self,
        input: NodeId,
        extra: NodeId,
        kernel: NodeId,
        bias: NodeId,
        width: usize,
    ) -> Result<NodeId, TensorError> {
        if self.dims(extra).0 != 1 {
            return Err(TensorError::shape(
                "conv1d_broadcast",
                format!("extra must be one row, got {:?}", self.dims(extra)),
            ));
        }
        self.conv1d_impl(input, Some(extra), kernel, bias, width)
    }

    fn conv1d_impl(
        &mut self,
        input: NodeId,
        extra: Option<NodeId>,
        kernel: NodeId,
        bias: NodeId,
        width: usize,
    ) -> Result<NodeId, TensorError> {
        let (l, c) = self.dims(input);
        let e = extra.map_or(0, |x| self.dims(x).1);
        let (f, kc) = self.dims(kernel);
        if width == 0 || kc != width * (c + e) || self.nodes[bias.0].value.len() != f {
            return Err(TensorError::shape(
                "conv1d",
                format!(
                    "input {:?} with {e} broadcast columns, kernel {:?}, bias {:?}, width {width}",
                    (l, c),
                    (f, kc),
                    self.nodes[bias.0].value.shape()
                ),
            ));
        }
        if l < width {
            return Err(TensorError::shape(
                "conv1d",
                format!("sequence of {l} rows is shorter than width {width}"),
            ));
        }
        let positions = l - width + 1;
        let mut out = Vec::with_capacity(positions * f);
        let mut base = self.data(bias).to_vec();
        if let Some(x) = extra {
            let summed = &self.split_kernel(kernel, c, e, width).broadcast_sum;
            let xv = self.data(x);
            for (fi, b) in base.iter_mut().enumerate() {
                for j in 0..e {
                    *b += summed[fi * e + j] * xv[j];
                }
            }
        }
        for _ in 0..positions {
            out.extend_from_slice(&base);
        }
        let cols = self.im2col(input, width);
        let windows = ArrayView2::from_shape((positions, width * c), &cols).unwrap();
        let split = self.split_kernel(kernel, c, e, width);
        let k_seq = ArrayView2::from_shape((f, width * c), &split.sequence).unwrap();
        matmul_into(windows, k_seq.t(), &mut out, S::one());
        Ok(self.push(
            Tensor::new(vec![positions, f], out)?,
            Op::Conv1d {
                input,
                extra,
                kernel,
                bias,
                width,
            },
            &[input, kernel, bias].into_iter().chain(extra).collect::<Vec<_>>(),
        ))
    }

    /// Kernels are graph leaves, so their split form is computed once per graph.
    fn split_kernel(&self, kernel: NodeId, c: usize, e: usize, width: usize) -> Rc<SplitKernel<S>> {
        let key = (kernel.0, c, e, width);
        if let Some(k) = self.split_kernels.borrow().get(&key) {
            return Rc::clone(k);
        }
        let split = Rc::new(SplitKernel {
            sequence: self.sequence_kernel(kernel, c, e, width),
            broadcast_sum: if e == 0 { Vec::new() } else { self.broadcast_kernel_sum(kernel, c, e, width) },
        });
        self.split_kernels.borrow_mut().insert(key, Rc::clone(&split));
        split
    }

    /// Kernel columns that touch the sequence part, `F x (width * C)`.
    fn sequence_kernel(&self, kernel: NodeId, c: usize, e: usize, width: usize) -> Vec<S> {
        let k = self.data(kernel);
        if e == 0 {
            return k.to_vec();
        }
        let stride = c + e;
        let f = k.len() / (width * stride);
        let mut out = Vec::with_capacity(f * width * c);
        for row in k.chunks(width * stride) {
            for block in row.chunks(stride) {
                out.extend_from_slice(&block[..c]);
            }
        }
        out
    }

    /// Broadcast-part kernel columns summed over the window offsets, `F x E`.
    fn broadcast_kernel_sum(&self, kernel: NodeId, c: usize, e: usize, width: usize) -> Vec<S> {
        let k = self.data(kernel);
        let stride = c + e;
        let f = k.len() / (width * stride);
        let mut out = vec![S::zero(); f * e];
        for (fi, row) in k.chunks(width * stride).enumerate() {
            for block in row.chunks(stride) {
                for j in 0..e {
                    out[fi * e + j] += block[c + j];
                }
            }
        }
        out
    }

    fn im2col(&self, input: NodeId, width: usize) -> Vec<S> {
        let (l, c) = self.dims(input);
        let src = self.data(input);
        let positions = l + 1 - width;
        let mut cols = Vec::with_capacity(positions * width * c);
        for t in 0..positions {
            cols.extend_from_slice(&src[t * c..(t + width) * c]);
        }
        cols
    }

    /// Applies a precomputed (inverted) dropout mask elementwise.
    pub fn dropout(&mut self, a: NodeId, mask: Vec<S>) -> Result<NodeId, TensorError> {
        if mask.len() != self.nodes[a.0].value.len() {
            return Err(TensorError::shape(
                "dropout",
                format!("mask of {} for {:?}", mask.len(), self.nodes[a.0].value.shape()),
            ));
        }
        let shape = self.nodes[a.0].value.shape().to_vec();
        let data = self.data(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        Ok(self.push(Tensor::new(shape, data)?, Op::Dropout(a, mask), &[a]))
    }

    /// One element (row-major flat index) as a scalar.
    pub fn pick(&mut self, a: NodeId, index: usize) -> Result<NodeId, TensorError> {
        let len = self.nodes[a.0].value.len();
        if index >= len {
            return Err(TensorError::Index {
                op: "pick",
                index,
                len,
            });
        }
        let v = self.data(a)[index];
        Ok(self.push(Tensor::scalar(v), Op::Pick(a, index), &[a]))
    }

    /// Accumulates `d loss / d leaf` into every leaf that requires a gradient.
    ///
    /// Gradients add onto whatever a previous call left behind; call
    /// [`Graph::zero_grad`] in between to start fresh.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads = Grads {
            slots: vec![None; loss.0 + 1],
        };
        grads.slots[loss.0] = Some(Tensor::full(lv.shape(), S::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads.slots[idx].take() else {
                continue;
            };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads.slots[idx] = Some(g);
                continue;
            }
            self.backward_node(idx, g.data(), &mut grads);
        }

        for (idx, slot) in grads.slots.into_iter().enumerate() {
            let node = &mut self.nodes[idx];
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.requires_grad, slot) {
                match node.grad.as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[S], grads: &mut Grads<S>) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        let y = node.value.data();
        let wants = |id: NodeId| nodes[id.0].requires_grad;
        let val = |id: NodeId| nodes[id.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (id, sign) in [(*a, S::one()), (*b, S::one())] {
                    if wants(id) {
                        for (d, &gi) in grads.slot(nodes, id).iter_mut().zip(g) {
                            *d += sign * gi;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                for (id, sign) in [(*a, S::one()), (*b, -S::one())] {
                    if wants(id) {
                        for (d, &gi) in grads.slot(nodes, id).iter_mut().zip(g) {
                            *d += sign * gi;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (id, other) in [(*a, *b), (*b, *a)] {
                    if wants(id) {
                        let o = val(other);
                        for ((d, &gi), &oi) in grads.slot(nodes, id).iter_mut().zip(g).zip(o) {
                            *d += gi * oi;
                        }
                    }
                }
            }
            Op::AddRow(a, bias) => {
                let (_, c) = node.value.dims2();
                if wants(*a) {
                    for (d, &gi) in grads.slot(nodes, *a).iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if wants(*bias) && c > 0 {
                    let db = grads.slot(nodes, *bias);
                    for row in g.chunks(c) {
                        for (d, &gi) in db.iter_mut().zip(row) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::ScaleRows(a, s) => {
                let (r, c) = node.value.dims2();
                if wants(*a) {
                    let sv = val(*s);
                    let da = grads.slot(nodes, *a);
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[i * c + j] * sv[i];
                        }
                    }
                }
                if wants(*s) {
                    let av = val(*a);
                    let ds = grads.slot(nodes, *s);
                    for i in 0..r {
                        let mut acc = S::zero();
                        for j in 0..c {
                            acc += g[i * c + j] * av[i * c + j];
                        }
                        ds[i] += acc;
                    }
                }
            }
            Op::Scale(a, k) => {
                for (d, &gi) in grads.slot(nodes, *a).iter_mut().zip(g) {
                    *d += gi * *k;
                }
            }
            Op::MatMul(a, b) => {
                let gv = ArrayView2::from_shape(node.value.dims2(), g).unwrap();
                if wants(*a) {
                    let bv = nodes[b.0].value.view2();
                    matmul_into(gv, bv.t(), grads.slot(nodes, *a), S::one());
                }
                if wants(*b) {
                    let av = nodes[a.0].value.view2();
                    matmul_into(av.t(), gv, grads.slot(nodes, *b), S::one());
                }
            }
            Op::MatMulT(a, b) => {
                let gv = ArrayView2::from_shape(node.value.dims2(), g).unwrap();
                if wants(*a) {
                    let bv = nodes[b.0].value.view2();
                    matmul_into(gv, bv, grads.slot(nodes, *a), S::one());
                }
                if wants(*b) {
                    let av = nodes[a.0].value.view2();
                    matmul_into(gv.t(), av, grads.slot(nodes, *b), S::one());
                }
            }
            Op::Transpose(a) => {
                let (r, c) = node.value.dims2();
                let da = grads.slot(nodes, *a);
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] += g[i * c + j];
                    }
                }
            }
            Op::Sigmoid(a) => {
                for ((d, &gi), &yi) in grads.slot(nodes, *a).iter_mut().zip(g).zip(y) {
                    *d += gi * yi * (S::one() - yi);
                }
            }
            Op::Tanh(a) => {
                for ((d, &gi), &yi) in grads.slot(nodes, *a).iter_mut().zip(g).zip(y) {
                    *d += gi * (S::one() - yi * yi);
                }
            }
            Op::Exp(a) => {
                let ceil = S::of(EXP_CEIL);
                let x = val(*a);
                for (((d, &gi), &yi), &xi) in grads.slot(nodes, *a).iter_mut().zip(g).zip(y).zip(x) {
                    if xi < ceil {
                        *d += gi * yi;
                    }
                }
            }
            Op::Log(a) => {
                let floor = S::of(LOG_FLOOR);
                let x = val(*a);
                for ((d, &gi), &xi) in grads.slot(nodes, *a).iter_mut().zip(g).zip(x) {
                    if xi >= floor {
                        *d += gi / xi;
                    }
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                for ((d, &gi), &xi) in grads.slot(nodes, *a).iter_mut().zip(g).zip(x) {
                    if xi > S::zero() {
                        *d += gi;
                    }
                }
            }
            Op::Softmax(a, axis) => {
                let (r, c) = node.value.dims2();
                let da = grads.slot(nodes, *a);
                for lane in Self::lanes(r, c, *axis) {
                    let dot: S = lane.iter().map(|&k| g[k] * y[k]).sum();
                    for &k in &lane {
                        da[k] += y[k] * (g[k] - dot);
                    }
                }
            }
            Op::Max { input, argmax } => {
                let da = grads.slot(nodes, *input);
                for (&k, &gi) in argmax.iter().zip(g) {
                    da[k] += gi;
                }
            }
            Op::Mean(a, axis) | Op::SumAxis(a, axis) => {
                let (r, c) = nodes[a.0].value.dims2();
                let scale = match (&node.op, axis) {
                    (Op::Mean(..), Axis::Rows) => S::one() / S::of(r as f64),
                    (Op::Mean(..), Axis::Cols) => S::one() / S::of(c as f64),
                    _ => S::one(),
                };
                let da = grads.slot(nodes, *a);
                for (lane, &gi) in Self::lanes(r, c, *axis).iter().zip(g) {
                    for &k in lane {
                        da[k] += gi * scale;
                    }
                }
            }
            Op::Sum(a) => {
                for d in grads.slot(nodes, *a).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Concat(parts, axis) => {
                let (r, c) = node.value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = nodes[p.0].value.dims2();
                    if wants(p) {
                        let dp = grads.slot(nodes, p);
                        match axis {
                            Axis::Rows => {
                                for (d, &gi) in dp.iter_mut().zip(&g[offset * c..(offset + pr) * c]) {
                                    *d += gi;
                                }
                            }
                            Axis::Cols => {
                                for i in 0..r {
                                    for j in 0..pc {
                                        dp[i * pc + j] += g[i * c + offset + j];
                                    }
                                }
                            }
                        }
                    }
                    offset += match axis {
                        Axis::Rows => pr,
                        Axis::Cols => pc,
                    };
                }
            }
            Op::SliceRows(a, start) => {
                let (_, c) = node.value.dims2();
                let da = grads.slot(nodes, *a);
                for (d, &gi) in da[start * c..].iter_mut().zip(g) {
                    *d += gi;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, w) = node.value.dims2();
                let (_, c) = nodes[a.0].value.dims2();
                let da = grads.slot(nodes, *a);
                for i in 0..r {
                    for j in 0..w {
                        da[i * c + start + j] += g[i * w + j];
                    }
                }
            }
            Op::Gather(a, rows) => {
                let (_, c) = node.value.dims2();
                let da = grads.slot(nodes, *a);
                for (k, &i) in rows.iter().enumerate() {
                    for j in 0..c {
                        da[i * c + j] += g[k * c + j];
                    }
                }
            }
            Op::Reshape(a) => {
                for (d, &gi) in grads.slot(nodes, *a).iter_mut().zip(g) {
                    *d += gi;
                }
            }
            Op::Conv1d {
                input,
                extra,
                kernel,
                bias,
                width,
            } => {
                let (positions, f) = node.value.dims2();
                let (_, c) = nodes[input.0].value.dims2();
                let e = extra.map_or(0, |x| nodes[x.0].value.len());
                let (width, stride) = (*width, c + e);
                let gv = ArrayView2::from_shape((positions, f), g).unwrap();
                let mut summed_g = vec![S::zero(); f];
                for row in g.chunks(f) {
                    for (d, &gi) in summed_g.iter_mut().zip(row) {
                        *d += gi;
                    }
                }
                if wants(*bias) {
                    for (d, &s) in grads.slot(nodes, *bias).iter_mut().zip(&summed_g) {
                        *d += s;
                    }
                }
                if wants(*kernel) {
                    let cols = self.im2col(*input, width);
                    let windows = ArrayView2::from_shape((positions, width * c), &cols).unwrap();
                    let mut dk = vec![S::zero(); f * width * c];
                    matmul_into(gv.t(), windows, &mut dk, S::zero());
                    let xv = extra.map(|x| nodes[x.0].value.data());
                    let dkernel = grads.slot(nodes, *kernel);
                    for fi in 0..f {
                        for k in 0..width {
                            let dst = fi * width * stride + k * stride;
                            let src = fi * width * c + k * c;
                            for j in 0..c {
                                dkernel[dst + j] += dk[src + j];
                            }
                            if let Some(xv) = xv {
                                for j in 0..e {
                                    dkernel[dst + c + j] += summed_g[fi] * xv[j];
                                }
                            }
                        }
                    }
                }
                if let Some(x) = extra.filter(|&x| wants(x)) {
                    let summed = &self.split_kernel(*kernel, c, e, width).broadcast_sum;
                    let dx = grads.slot(nodes, x);
                    for fi in 0..f {
                        for j in 0..e {
                            dx[j] += summed_g[fi] * summed[fi * e + j];
                        }
                    }
                }
                if wants(*input) {
                    let split = self.split_kernel(*kernel, c, e, width);
                    let k_seq = ArrayView2::from_shape((f, width * c), &split.sequence).unwrap();
                    let kc = width * c;
                    let mut dcols = vec![S::zero(); positions * kc];
                    matmul_into(gv, k_seq, &mut dcols, S::zero());
                    let dx = grads.slot(nodes, *input);
                    for t in 0..positions {
                        for (d, &v) in dx[t * c..t * c + kc].iter_mut().zip(&dcols[t * kc..(t + 1) * kc]) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => {
                for ((d, &gi), &m) in grads.slot(nodes, *a).iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }
            Op::Pick(a, index) => {
                grads.slot(nodes, *a)[*index] += g[0];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let z = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let p = g.softmax(z, Axis::Cols).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn activations_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(x);
        let th = g.tanh(x);
        assert_eq!(g.value(s).item(), 0.5);
        assert_eq!(g.value(th).item(), 0.0);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a = t(&[3, 2], &[1., -2., 3.5, 4., 0.25, 6.]);
        let an = g.constant(a.clone());
        let p = g.matmul(eye, an).unwrap();
        assert_eq!(g.value(p), &a.reshaped(&[3, 2]).unwrap());
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0), true);
        let y = g.sigmoid(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 0.25);
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_y() {
        let mut g = Graph::new();
        let z = g.leaf(t(&[1, 3], &[0.3, -1.2, 2.0]), true);
        let p = g.softmax(z, Axis::Cols).unwrap();
        let lp = g.log(p);
        let pick = g.pick(lp, 2).unwrap();
        let loss = g.scale(pick, -1.0);
        g.backward(loss).unwrap();
        let probs = g.value(p).data().to_vec();
        let grad = g.grad(z).unwrap().data();
        for k in 0..3 {
            let y = if k == 2 { 1.0 } else { 0.0 };
            assert!((grad[k] - (probs[k] - y)).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 12.0);
        g.zero_grad();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn unused_leaf_gets_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let unused = g.leaf(Tensor::scalar(1.0), true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(unused).map_or(true, |t| t.item() == 0.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = g.constant(Tensor::<f64>::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        let c = g.constant(Tensor::<f64>::zeros(&[3, 2]));
        assert!(g.concat(&[a, c], Axis::Rows).is_err());
    }

    #[test]
    fn softmax_over_empty_axis_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f64>::zeros(&[2, 0]));
        assert!(matches!(
            g.softmax(a, Axis::Cols),
            Err(TensorError::EmptyAxis { .. })
        ));
    }

    #[test]
    fn max_ties_route_to_first_index() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 3], &[2.0, 2.0, 1.0]), true);
        let m = g.max(x, Axis::Cols).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn log_is_clamped() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0), true);
        let y = g.log(x);
        assert!((g.value(y).item() - (1e-12f64).ln()).abs() < 1e-12);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 0.0);
    }

    #[test]
    fn large_sigmoid_inputs_stay_finite() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[-800.0, 800.0]));
        let y = g.sigmoid(x);
        assert!(g.value(y).is_finite());
        let e = g.exp(x);
        assert!(g.value(e).is_finite());
    }

    #[test]
    fn conv1d_matches_direct_sum() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]));
        let k = g.constant(t(&[1, 4], &[1., 0., 0., 1.]));
        let b = g.constant(t(&[1], &[0.5]));
        let y = g.conv1d(x, k, b, 2).unwrap();
        // window t: x[t,0] + x[t+1,1] + 0.5
        assert_eq!(g.value(y).data(), &[1. + 4. + 0.5, 3. + 6. + 0.5, 5. + 8. + 0.5]);
    }

    #[test]
    fn broadcast_conv_equals_concat_then_conv() {
        let xs = [0.3, -1.2, 0.8, 0.05, -0.4, 1.1, 0.9, -0.7];
        let es = [0.25, -0.6, 1.3];
        let ks: Vec<f64> = (0..2 * 2 * 5).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let run = |broadcast: bool| {
            let mut g = Graph::new();
            let x = g.leaf(t(&[4, 2], &xs), true);
            let e = g.leaf(t(&[1, 3], &es), true);
            let k = g.leaf(t(&[2, 10], &ks), true);
            let b = g.leaf(t(&[2], &[0.1, -0.2]), true);
            let y = if broadcast {
                g.conv1d_broadcast(x, e, k, b, 2).unwrap()
            } else {
                let rep = g.gather_rows(e, &[0, 0, 0, 0]).unwrap();
                let cat = g.concat(&[x, rep], Axis::Cols).unwrap();
                g.conv1d(cat, k, b, 2).unwrap()
            };
            let sq = g.mul(y, y).unwrap();
            let loss = g.sum(sq);
            g.backward(loss).unwrap();
            let mut out = g.value(y).data().to_vec();
            for id in [x, e, k, b] {
                out.extend_from_slice(g.grad(id).unwrap().data());
            }
            out
        };
        for (a, b) in run(true).iter().zip(run(false)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
