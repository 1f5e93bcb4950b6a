//! Eager reverse-mode automatic differentiation over dense f32 tensors.
//!
//! Operations execute as they are recorded, so data-dependent graph
//! construction (top-k selection, per-sample patch partitions) just works.
//! `backward` replays the recorded nodes in reverse. Every kernel output is
//! checked for finiteness; reductions run in a fixed order, so re-running
//! the same construction with the same inputs is bit-identical.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels as k;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
pub enum Op {
    Param,
    Const,
    Add,
    Sub,
    Mul,
    MaxElem,
    AddScalar(f32),
    MulScalar(f32),
    PowScalar(f32),
    Clamp { lo: f32, hi: f32 },
    Ln,
    Relu,
    Tanh,
    SoftmaxRows,
    MatMul,
    AddRow,
    ScaleRows,
    Transpose,
    Reshape,
    Concat0,
    ConcatCols,
    SliceCols { start: usize, end: usize },
    Gather(Vec<usize>),
    RowSum,
    SumAll,
    MeanAll,
    Conv2d { stride: usize },
    BilinearUp,
    CosinePairs,
    CosineMap,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Const => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MaxElem => "max_elem",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::PowScalar(_) => "pow_scalar",
            Op::Clamp { .. } => "clamp",
            Op::Ln => "ln",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::SoftmaxRows => "softmax_rows",
            Op::MatMul => "matmul",
            Op::AddRow => "add_row",
            Op::ScaleRows => "scale_rows",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::Concat0 => "concat0",
            Op::ConcatCols => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Gather(_) => "gather",
            Op::RowSum => "row_sum",
            Op::SumAll => "sum_all",
            Op::MeanAll => "mean_all",
            Op::Conv2d { .. } => "conv2d",
            Op::BilinearUp => "bilinear_upsample",
            Op::CosinePairs => "cosine_pairs",
            Op::CosineMap => "cosine_map",
        }
    }
}

pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub value: Tensor,
    pub requires_grad: bool,
}

/// Recording tape. Create one per forward pass.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    pub(crate) leaves: HashMap<String, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.dims()
    }

    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    /// Named trainable leaf. Gradients are collected per name.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Result<NodeId> {
        let id = self.push(Op::Param, vec![], value.clone(), true)?;
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    /// Untrainable leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Const, vec![], value, false)
    }

    pub fn scalar(&mut self, v: f32) -> Result<NodeId> {
        self.constant(Tensor::scalar(v))
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        let id = NodeId(self.nodes.len());
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node: id.0,
            });
        }
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Ok(id)
    }

    fn needs_grad(&self, inputs: &[NodeId]) -> bool {
        inputs.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    fn shape_err(&self, op: &Op, expected: String, got: String) -> Error {
        Error::ShapeMismatch {
            context: format!("{} (node {})", op.name(), self.nodes.len()),
            expected,
            got,
        }
    }

    fn binary_same_shape(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if da != db {
            return Err(self.shape_err(&op, format!("{da:?}"), format!("{db:?}")));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let data = match op {
            Op::Add => k::add(xa, xb),
            Op::Sub => k::sub(xa, xb),
            Op::Mul => k::mul(xa, xb),
            Op::MaxElem => k::max_elem(xa, xb),
            _ => unreachable!(),
        };
        let rg = self.needs_grad(&[a, b]);
        self.push(op, vec![a, b], Tensor::new(da, data)?, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Mul, a, b)
    }

    pub fn max_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::MaxElem, a, b)
    }

    fn unary(&mut self, op: Op, x: NodeId) -> Result<NodeId> {
        let dims = self.dims(x).to_vec();
        let xs = self.value(x).data();
        let data = match op {
            Op::AddScalar(s) => k::add_scalar(xs, s),
            Op::MulScalar(s) => k::mul_scalar(xs, s),
            Op::PowScalar(p) => k::pow_scalar(xs, p),
            Op::Clamp { lo, hi } => k::clamp(xs, lo, hi),
            Op::Ln => k::ln(xs),
            Op::Relu => k::relu(xs),
            Op::Tanh => k::tanh(xs),
            _ => unreachable!(),
        };
        let rg = self.needs_grad(&[x]);
        self.push(op, vec![x], Tensor::new(dims, data)?, rg)
    }

    pub fn add_scalar(&mut self, x: NodeId, s: f32) -> Result<NodeId> {
        self.unary(Op::AddScalar(s), x)
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: f32) -> Result<NodeId> {
        self.unary(Op::MulScalar(s), x)
    }

    pub fn pow_scalar(&mut self, x: NodeId, p: f32) -> Result<NodeId> {
        self.unary(Op::PowScalar(p), x)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f32, hi: f32) -> Result<NodeId> {
        self.unary(Op::Clamp { lo, hi }, x)
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Ln, x)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Relu, x)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Tanh, x)
    }

    /// Dims interpreted as rows×cols; a 1-D tensor is a single row.
    fn rows_cols(&self, id: NodeId) -> Result<(usize, usize)> {
        match self.dims(id) {
            [c] => Ok((1, *c)),
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch {
                context: "matrix op".into(),
                expected: "rank 1 or 2".into(),
                got: format!("{other:?}"),
            }),
        }
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x)?;
        let data = k::softmax_rows(self.value(x).data(), r, c);
        let dims = self.dims(x).to_vec();
        let rg = self.needs_grad(&[x]);
        self.push(Op::SoftmaxRows, vec![x], Tensor::new(dims, data)?, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, ka) = self.rows_cols(a)?;
        let (kb, m) = self.rows_cols(b)?;
        if ka != kb {
            return Err(self.shape_err(
                &Op::MatMul,
                format!("inner dims equal, lhs {:?}", self.dims(a)),
                format!("rhs {:?}", self.dims(b)),
            ));
        }
        let data = k::matmul(self.value(a).data(), self.value(b).data(), n, ka, m);
        let rg = self.needs_grad(&[a, b]);
        self.push(Op::MatMul, vec![a, b], Tensor::new(vec![n, m], data)?, rg)
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x)?;
        if self.dims(bias) != [c] {
            return Err(self.shape_err(&Op::AddRow, format!("bias [{c}]"), format!("{:?}", self.dims(bias))));
        }
        let data = k::add_row(self.value(x).data(), self.value(bias).data(), r, c);
        let dims = self.dims(x).to_vec();
        let rg = self.needs_grad(&[x, bias]);
        self.push(Op::AddRow, vec![x, bias], Tensor::new(dims, data)?, rg)
    }

    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x)?;
        if self.dims(s) != [r] {
            return Err(self.shape_err(&Op::ScaleRows, format!("scales [{r}]"), format!("{:?}", self.dims(s))));
        }
        let data = k::scale_rows(self.value(x).data(), self.value(s).data(), r, c);
        let dims = self.dims(x).to_vec();
        let rg = self.needs_grad(&[x, s]);
        self.push(Op::ScaleRows, vec![x, s], Tensor::new(dims, data)?, rg)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x)?;
        let data = k::transpose(self.value(x).data(), r, c);
        let rg = self.needs_grad(&[x]);
        self.push(Op::Transpose, vec![x], Tensor::new(vec![c, r], data)?, rg)
    }

    pub fn reshape(&mut self, x: NodeId, dims: Vec<usize>) -> Result<NodeId> {
        let t = self.value(x).reshape(dims)?;
        let rg = self.needs_grad(&[x]);
        self.push(Op::Reshape, vec![x], t, rg)
    }

    /// Concatenate along the leading axis; trailing dims must agree.
    pub fn concat0(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let da = self.dims(a).to_vec();
        let db = self.dims(b).to_vec();
        if da.len() != db.len() || da.is_empty() || da[1..] != db[1..] {
            return Err(self.shape_err(&Op::Concat0, format!("trailing dims of {da:?}"), format!("{db:?}")));
        }
        let mut dims = da.clone();
        dims[0] = da[0] + db[0];
        let mut data = Vec::with_capacity(self.value(a).len() + self.value(b).len());
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let rg = self.needs_grad(&[a, b]);
        self.push(Op::Concat0, vec![a, b], Tensor::new(dims, data)?, rg)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.rows_cols(a)?;
        let (rb, cb) = self.rows_cols(b)?;
        if ra != rb {
            return Err(self.shape_err(&Op::ConcatCols, format!("{ra} rows"), format!("{rb} rows")));
        }
        let data = k::concat_cols(self.value(a).data(), self.value(b).data(), ra, ca, cb);
        let rg = self.needs_grad(&[a, b]);
        self.push(Op::ConcatCols, vec![a, b], Tensor::new(vec![ra, ca + cb], data)?, rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x)?;
        if start >= end || end > c {
            return Err(Error::InvalidArgument {
                context: format!("slice_cols {start}..{end} on {c} columns"),
            });
        }
        let data = k::slice_cols(self.value(x).data(), r, c, start, end);
        let rg = self.needs_grad(&[x]);
        self.push(
            Op::SliceCols { start, end },
            vec![x],
            Tensor::new(vec![r, end - start], data)?,
            rg,
        )
    }

    /// Pick flat indices out of `x` into a 1-D tensor.
    pub fn gather(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let n = self.value(x).len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument {
                context: format!("gather index {bad} out of bounds for {n} elements"),
            });
        }
        let data = k::gather(self.value(x).data(), &idx);
        let dims = vec![idx.len()];
        let rg = self.needs_grad(&[x]);
        self.push(Op::Gather(idx), vec![x], Tensor::new(dims, data)?, rg)
    }

    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x)?;
        let data = k::row_sum(self.value(x).data(), r, c);
        let rg = self.needs_grad(&[x]);
        self.push(Op::RowSum, vec![x], Tensor::new(vec![r], data)?, rg)
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let v = k::sum_all(self.value(x).data());
        let rg = self.needs_grad(&[x]);
        self.push(Op::SumAll, vec![x], Tensor::scalar(v), rg)
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let v = k::mean_all(self.value(x).data());
        let rg = self.needs_grad(&[x]);
        self.push(Op::MeanAll, vec![x], Tensor::scalar(v), rg)
    }

    /// 3x3 conv, zero padding 1, stride 1 or 2. x: cin×h×w, w: cout×cin×3×3, b: cout.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        if stride != 1 && stride != 2 {
            return Err(Error::InvalidArgument {
                context: format!("conv2d stride must be 1 or 2, got {stride}"),
            });
        }
        let dx = self.dims(x).to_vec();
        let dw = self.dims(w).to_vec();
        let dbias = self.dims(b).to_vec();
        let op = Op::Conv2d { stride };
        let (cin, h, wd) = match dx[..] {
            [c0, h0, w0] => (c0, h0, w0),
            _ => return Err(self.shape_err(&op, "input [cin,h,w]".into(), format!("{dx:?}"))),
        };
        let cout = match dw[..] {
            [co, ci, 3, 3] if ci == cin => co,
            _ => {
                return Err(self.shape_err(&op, format!("weight [cout,{cin},3,3]"), format!("{dw:?}")))
            }
        };
        if dbias != [cout] {
            return Err(self.shape_err(&op, format!("bias [{cout}]"), format!("{dbias:?}")));
        }
        let (data, oh, ow) = k::conv2d(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            cin,
            h,
            wd,
            cout,
            stride,
        );
        let rg = self.needs_grad(&[x, w, b]);
        self.push(op, vec![x, w, b], Tensor::new(vec![cout, oh, ow], data)?, rg)
    }

    /// Bilinear upsample (half-pixel centers) of an h×w or c×h×w tensor.
    pub fn bilinear_upsample(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let dims = self.dims(x).to_vec();
        let (ch, h, w) = match dims[..] {
            [h0, w0] => (1, h0, w0),
            [c0, h0, w0] => (c0, h0, w0),
            _ => {
                return Err(self.shape_err(&Op::BilinearUp, "rank 2 or 3".into(), format!("{dims:?}")))
            }
        };
        if oh < h || ow < w {
            return Err(Error::InvalidArgument {
                context: format!("bilinear_upsample cannot downscale {h}x{w} to {oh}x{ow}"),
            });
        }
        let data = k::bilinear_upsample(self.value(x).data(), ch, h, w, oh, ow);
        let out_dims = if dims.len() == 2 {
            vec![oh, ow]
        } else {
            vec![ch, oh, ow]
        };
        let rg = self.needs_grad(&[x]);
        self.push(Op::BilinearUp, vec![x], Tensor::new(out_dims, data)?, rg)
    }

    /// All-pairs cosine similarity between rows of a (n×c) and b (m×c).
    pub fn cosine_pairs(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, ca) = self.rows_cols(a)?;
        let (m, cb) = self.rows_cols(b)?;
        if ca != cb {
            return Err(self.shape_err(&Op::CosinePairs, format!("vectors of dim {ca}"), format!("{cb}")));
        }
        let data = k::cosine_pairs(self.value(a).data(), self.value(b).data(), n, m, ca);
        let rg = self.needs_grad(&[a, b]);
        self.push(Op::CosinePairs, vec![a, b], Tensor::new(vec![n, m], data)?, rg)
    }

    /// Per-pixel channel-axis cosine of two c×h×w maps; output h×w.
    pub fn cosine_map(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let da = self.dims(a).to_vec();
        let db = self.dims(b).to_vec();
        if da != db || da.len() != 3 {
            return Err(self.shape_err(&Op::CosineMap, format!("matching [c,h,w], lhs {da:?}"), format!("{db:?}")));
        }
        let (cdim, h, w) = (da[0], da[1], da[2]);
        let data = k::cosine_map(self.value(a).data(), self.value(b).data(), cdim, h * w);
        let rg = self.needs_grad(&[a, b]);
        self.push(Op::CosineMap, vec![a, b], Tensor::new(vec![h, w], data)?, rg)
    }

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// grad-requiring node; look up parameter gradients by leaf name.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let ldims = self.dims(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss {
                dims: ldims.to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(ldims.to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Param | Op::Const) {
                grads[idx] = Some(g);
                continue;
            }
            let input_grads = self.vjp(node, &g)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(ig),
                }
            }
            if !matches!(self.nodes[idx].op, Op::Param | Op::Const) {
                grads[idx] = None;
            }
        }

        Ok(Gradients {
            leaves: self.leaves.clone(),
            dims: self
                .nodes
                .iter()
                .map(|n| n.value.dims().to_vec())
                .collect(),
            grads,
        })
    }

    /// Vector-Jacobian product: gradient of the loss w.r.t. each input of `node`.
    fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<Tensor>> {
        let val = |id: NodeId| self.value(id);
        let out = &node.value;
        let grads = match &node.op {
            Op::Param | Op::Const => vec![],
            Op::Add => vec![g.clone(), g.clone()],
            Op::Sub => {
                let neg = Tensor::new(g.dims().to_vec(), k::mul_scalar(g.data(), -1.0))?;
                vec![g.clone(), neg]
            }
            Op::Mul => {
                let (a, b) = (val(node.inputs[0]), val(node.inputs[1]));
                vec![
                    Tensor::new(a.dims().to_vec(), k::mul(g.data(), b.data()))?,
                    Tensor::new(b.dims().to_vec(), k::mul(g.data(), a.data()))?,
                ]
            }
            Op::MaxElem => {
                let (a, b) = (val(node.inputs[0]), val(node.inputs[1]));
                let mut ga = vec![0.0f32; a.len()];
                let mut gb = vec![0.0f32; b.len()];
                for i in 0..a.len() {
                    if a.data()[i] > b.data()[i] {
                        ga[i] = g.data()[i];
                    } else {
                        gb[i] = g.data()[i];
                    }
                }
                vec![
                    Tensor::new(a.dims().to_vec(), ga)?,
                    Tensor::new(b.dims().to_vec(), gb)?,
                ]
            }
            Op::AddScalar(_) => vec![g.clone()],
            Op::MulScalar(s) => vec![Tensor::new(g.dims().to_vec(), k::mul_scalar(g.data(), *s))?],
            Op::PowScalar(p) => {
                let x = val(node.inputs[0]);
                let data: Vec<f32> = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| gv * p * xv.powf(p - 1.0))
                    .collect();
                vec![Tensor::new(x.dims().to_vec(), data)?]
            }
            Op::Clamp { lo, hi } => {
                let x = val(node.inputs[0]);
                let data: Vec<f32> = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv >= *lo && xv <= *hi { gv } else { 0.0 })
                    .collect();
                vec![Tensor::new(x.dims().to_vec(), data)?]
            }
            Op::Ln => {
                let x = val(node.inputs[0]);
                let data: Vec<f32> = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| gv / xv)
                    .collect();
                vec![Tensor::new(x.dims().to_vec(), data)?]
            }
            Op::Relu => {
                let x = val(node.inputs[0]);
                let data: Vec<f32> = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                vec![Tensor::new(x.dims().to_vec(), data)?]
            }
            Op::Tanh => {
                let data: Vec<f32> = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&yv, &gv)| gv * (1.0 - yv * yv))
                    .collect();
                vec![Tensor::new(out.dims().to_vec(), data)?]
            }
            Op::SoftmaxRows => {
                let (r, cdim) = rows_cols_of(out.dims());
                let mut dx = vec![0.0f32; r * cdim];
                for row in 0..r {
                    let y = &out.data()[row * cdim..(row + 1) * cdim];
                    let gr = &g.data()[row * cdim..(row + 1) * cdim];
                    let mut dot = 0.0f32;
                    for i in 0..cdim {
                        dot += gr[i] * y[i];
                    }
                    for i in 0..cdim {
                        dx[row * cdim + i] = y[i] * (gr[i] - dot);
                    }
                }
                vec![Tensor::new(out.dims().to_vec(), dx)?]
            }
            Op::MatMul => {
                let (a, b) = (val(node.inputs[0]), val(node.inputs[1]));
                let (n, kk) = rows_cols_of(a.dims());
                let (_, m) = rows_cols_of(b.dims());
                let bt = k::transpose(b.data(), kk, m);
                let at = k::transpose(a.data(), n, kk);
                let da = k::matmul(g.data(), &bt, n, m, kk);
                let db = k::matmul(&at, g.data(), kk, n, m);
                vec![
                    Tensor::new(a.dims().to_vec(), da)?,
                    Tensor::new(b.dims().to_vec(), db)?,
                ]
            }
            Op::AddRow => {
                let bias = val(node.inputs[1]);
                let (r, cdim) = rows_cols_of(out.dims());
                let mut db = vec![0.0f32; cdim];
                for row in 0..r {
                    for i in 0..cdim {
                        db[i] += g.data()[row * cdim + i];
                    }
                }
                vec![g.clone(), Tensor::new(bias.dims().to_vec(), db)?]
            }
            Op::ScaleRows => {
                let (x, s) = (val(node.inputs[0]), val(node.inputs[1]));
                let (r, cdim) = rows_cols_of(x.dims());
                let mut dx = vec![0.0f32; r * cdim];
                let mut ds = vec![0.0f32; r];
                for row in 0..r {
                    let sv = s.data()[row];
                    for i in 0..cdim {
                        let gi = g.data()[row * cdim + i];
                        dx[row * cdim + i] = gi * sv;
                        ds[row] += gi * x.data()[row * cdim + i];
                    }
                }
                vec![
                    Tensor::new(x.dims().to_vec(), dx)?,
                    Tensor::new(s.dims().to_vec(), ds)?,
                ]
            }
            Op::Transpose => {
                let x = val(node.inputs[0]);
                let (r, cdim) = rows_cols_of(out.dims());
                let data = k::transpose(g.data(), r, cdim);
                vec![Tensor::new(x.dims().to_vec(), data)?]
            }
            Op::Reshape => {
                let x = val(node.inputs[0]);
                vec![g.reshape(x.dims().to_vec())?]
            }
            Op::Concat0 => {
                let (a, b) = (val(node.inputs[0]), val(node.inputs[1]));
                let ga = g.data()[..a.len()].to_vec();
                let gb = g.data()[a.len()..].to_vec();
                vec![
                    Tensor::new(a.dims().to_vec(), ga)?,
                    Tensor::new(b.dims().to_vec(), gb)?,
                ]
            }
            Op::ConcatCols => {
                let (a, b) = (val(node.inputs[0]), val(node.inputs[1]));
                let (r, ca) = rows_cols_of(a.dims());
                let (_, cb) = rows_cols_of(b.dims());
                let ga = k::slice_cols(g.data(), r, ca + cb, 0, ca);
                let gb = k::slice_cols(g.data(), r, ca + cb, ca, ca + cb);
                vec![
                    Tensor::new(a.dims().to_vec(), ga)?,
                    Tensor::new(b.dims().to_vec(), gb)?,
                ]
            }
            Op::SliceCols { start, end } => {
                let x = val(node.inputs[0]);
                let (r, cdim) = rows_cols_of(x.dims());
                let w = end - start;
                let mut dx = vec![0.0f32; x.len()];
                for row in 0..r {
                    for i in 0..w {
                        dx[row * cdim + start + i] = g.data()[row * w + i];
                    }
                }
                vec![Tensor::new(x.dims().to_vec(), dx)?]
            }
            Op::Gather(idx) => {
                let x = val(node.inputs[0]);
                let mut dx = vec![0.0f32; x.len()];
                for (pos, &i) in idx.iter().enumerate() {
                    dx[i] += g.data()[pos];
                }
                vec![Tensor::new(x.dims().to_vec(), dx)?]
            }
            Op::RowSum => {
                let x = val(node.inputs[0]);
                let (r, cdim) = rows_cols_of(x.dims());
                let mut dx = vec![0.0f32; r * cdim];
                for row in 0..r {
                    for i in 0..cdim {
                        dx[row * cdim + i] = g.data()[row];
                    }
                }
                vec![Tensor::new(x.dims().to_vec(), dx)?]
            }
            Op::SumAll => {
                let x = val(node.inputs[0]);
                vec![Tensor::full(x.dims().to_vec(), g.item())]
            }
            Op::MeanAll => {
                let x = val(node.inputs[0]);
                vec![Tensor::full(x.dims().to_vec(), g.item() / x.len() as f32)]
            }
            Op::Conv2d { stride } => self.conv2d_vjp(node, g, *stride)?,
            Op::BilinearUp => {
                let x = val(node.inputs[0]);
                let (ch, h, w) = chw_of(x.dims());
                let (_, oh, ow) = chw_of(out.dims());
                let xw: Vec<_> = (0..ow).map(|d| k::bilinear_axis(d, w, ow)).collect();
                let yw: Vec<_> = (0..oh).map(|d| k::bilinear_axis(d, h, oh)).collect();
                let mut dx = vec![0.0f32; x.len()];
                for c0 in 0..ch {
                    let gc = &g.data()[c0 * oh * ow..(c0 + 1) * oh * ow];
                    let dc = &mut dx[c0 * h * w..(c0 + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in yw.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xw.iter().enumerate() {
                            let gv = gc[oy * ow + ox];
                            let (fy, fx) = (fy as f32, fx as f32);
                            dc[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            dc[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            dc[y1 * w + x0] += gv * fy * (1.0 - fx);
                            dc[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                vec![Tensor::new(x.dims().to_vec(), dx)?]
            }
            Op::CosinePairs => self.cosine_pairs_vjp(node, g)?,
            Op::CosineMap => self.cosine_map_vjp(node, g)?,
        };
        Ok(grads)
    }

    fn conv2d_vjp(&self, node: &Node, g: &Tensor, stride: usize) -> Result<Vec<Tensor>> {
        let x = self.value(node.inputs[0]);
        let w = self.value(node.inputs[1]);
        let (cin, h, wd) = chw_of(x.dims());
        let (cout, _, _) = chw_of(node.value.dims());
        let (dx, dw, db) = k::conv2d_backward(x.data(), w.data(), g.data(), cin, h, wd, cout, stride);
        Ok(vec![
            Tensor::new(x.dims().to_vec(), dx)?,
            Tensor::new(w.dims().to_vec(), dw)?,
            Tensor::new(vec![cout], db)?,
        ])
    }

    fn cosine_pairs_vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<Tensor>> {
        let a = self.value(node.inputs[0]);
        let b = self.value(node.inputs[1]);
        let (n, cdim) = rows_cols_of(a.dims());
        let (m, _) = rows_cols_of(b.dims());
        let eps = k::COSINE_EPS as f32;
        let norm = |v: &[f32]| -> (f32, bool) {
            let q: f32 = v.iter().map(|x| x * x).sum();
            let nr = q.sqrt();
            if nr > eps {
                (nr, true)
            } else {
                (eps, false)
            }
        };
        let na: Vec<(f32, bool)> = (0..n).map(|i| norm(&a.data()[i * cdim..(i + 1) * cdim])).collect();
        let nb: Vec<(f32, bool)> = (0..m).map(|j| norm(&b.data()[j * cdim..(j + 1) * cdim])).collect();
        let s = node.value.data();
        let mut da = vec![0.0f32; a.len()];
        let mut db = vec![0.0f32; b.len()];
        for i in 0..n {
            let ai = &a.data()[i * cdim..(i + 1) * cdim];
            let (nai, live_a) = na[i];
            for j in 0..m {
                let gv = g.data()[i * m + j];
                if gv == 0.0 {
                    continue;
                }
                let bj = &b.data()[j * cdim..(j + 1) * cdim];
                let (nbj, live_b) = nb[j];
                let sij = s[i * m + j];
                for t in 0..cdim {
                    let mut ga = bj[t] / (nai * nbj);
                    if live_a {
                        ga -= sij * ai[t] / (nai * nai);
                    }
                    da[i * cdim + t] += gv * ga;
                    let mut gb = ai[t] / (nai * nbj);
                    if live_b {
                        gb -= sij * bj[t] / (nbj * nbj);
                    }
                    db[j * cdim + t] += gv * gb;
                }
            }
        }
        Ok(vec![
            Tensor::new(a.dims().to_vec(), da)?,
            Tensor::new(b.dims().to_vec(), db)?,
        ])
    }

    fn cosine_map_vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<Tensor>> {
        let a = self.value(node.inputs[0]);
        let b = self.value(node.inputs[1]);
        let (cdim, h, w) = chw_of(a.dims());
        let hw = h * w;
        let eps = k::COSINE_EPS as f32;
        let s = node.value.data();
        let mut da = vec![0.0f32; a.len()];
        let mut db = vec![0.0f32; b.len()];
        for p in 0..hw {
            let gv = g.data()[p];
            if gv == 0.0 {
                continue;
            }
            let mut qa = 0.0f32;
            let mut qb = 0.0f32;
            for ch in 0..cdim {
                qa += a.data()[ch * hw + p] * a.data()[ch * hw + p];
                qb += b.data()[ch * hw + p] * b.data()[ch * hw + p];
            }
            let (ra, live_a) = {
                let nr = qa.sqrt();
                if nr > eps { (nr, true) } else { (eps, false) }
            };
            let (rb, live_b) = {
                let nr = qb.sqrt();
                if nr > eps { (nr, true) } else { (eps, false) }
            };
            let sp = s[p];
            for ch in 0..cdim {
                let av = a.data()[ch * hw + p];
                let bv = b.data()[ch * hw + p];
                let mut ga = bv / (ra * rb);
                if live_a {
                    ga -= sp * av / (ra * ra);
                }
                da[ch * hw + p] += gv * ga;
                let mut gb = av / (ra * rb);
                if live_b {
                    gb -= sp * bv / (rb * rb);
                }
                db[ch * hw + p] += gv * gb;
            }
        }
        Ok(vec![
            Tensor::new(a.dims().to_vec(), da)?,
            Tensor::new(b.dims().to_vec(), db)?,
        ])
    }
}

pub(crate) fn rows_cols_of(dims: &[usize]) -> (usize, usize) {
    match dims {
        [c] => (1, *c),
        [r, c] => (*r, *c),
        _ => panic!("expected rank 1 or 2, got {dims:?}"),
    }
}

pub(crate) fn chw_of(dims: &[usize]) -> (usize, usize, usize) {
    match dims {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        _ => panic!("expected rank 2 or 3, got {dims:?}"),
    }
}

/// Gradients produced by `Tape::backward`.
pub struct Gradients {
    leaves: HashMap<String, NodeId>,
    dims: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn by_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for a named parameter leaf. A leaf that did not participate
    /// in the loss gets a zero gradient and a logged warning.
    pub fn by_name(&self, name: &str) -> Option<Tensor> {
        let id = self.leaves.get(name)?;
        match &self.grads[id.0] {
            Some(g) => Some(g.clone()),
            None => {
                log::warn!("parameter `{name}` detached from loss; returning zero gradient");
                Some(Tensor::zeros(self.dims[id.0].clone()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_graph_passes_through() {
        let mut t = Tape::new();
        let x = t
            .constant(Tensor::from_vec(vec![1.0, 2.0]))
            .unwrap();
        assert_eq!(t.value(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(vec![4])).unwrap();
        let y = t.tanh(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn softmax_closed_form() {
        let mut t = Tape::new();
        let x = t
            .constant(Tensor::from_vec(vec![0.0, 3.0f32.ln()]))
            .unwrap();
        let y = t.softmax_rows(x).unwrap();
        assert!((t.value(y).data()[0] - 0.25).abs() < 1e-6);
        assert!((t.value(y).data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn linear_map_gradient() {
        // y = sum(3*x): dy/dx = 3 everywhere
        let mut t = Tape::new();
        let x = t.param("x", &Tensor::from_vec(vec![1.0, -2.0, 0.5])).unwrap();
        let y = t.mul_scalar(x, 3.0).unwrap();
        let loss = t.sum_all(y).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.by_name("x").unwrap().data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn quadratic_gradient() {
        // y = sum(x*x), x=[1,-2] -> grad [2,-4]
        let mut t = Tape::new();
        let x = t.param("x", &Tensor::from_vec(vec![1.0, -2.0])).unwrap();
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum_all(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.by_name("x").unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.param("x", &Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        assert!(matches!(
            t.backward(x),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn detached_param_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param("x", &Tensor::from_vec(vec![1.0])).unwrap();
        let _unused = t.param("unused", &Tensor::from_vec(vec![5.0, 6.0])).unwrap();
        let loss = t.sum_all(x).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.by_name("unused").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_is_reported_with_node() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(vec![-1.0])).unwrap();
        let err = t.ln(x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "ln", .. }));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = t.constant(Tensor::zeros(vec![2, 2])).unwrap();
        let err = t.add(a, b).unwrap_err();
        match err {
            Error::ShapeMismatch { context, .. } => assert!(context.contains("add")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reevaluation_is_bit_identical() {
        let build = || {
            let mut t = Tape::new();
            let x = t
                .param("x", &crate::rng::gaussian(vec![4, 4], 1.0, 9))
                .unwrap();
            let w = t
                .param("w", &crate::rng::gaussian(vec![4, 4], 1.0, 10))
                .unwrap();
            let h = t.matmul(x, w).unwrap();
            let a = t.tanh(h).unwrap();
            let s = t.softmax_rows(a).unwrap();
            let loss = t.mean_all(s).unwrap();
            (t.value(loss).item(), {
                let g = t.backward(loss).unwrap();
                g.by_name("w").unwrap()
            })
        };
        let (l1, g1) = build();
        let (l2, g2) = build();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }
}
