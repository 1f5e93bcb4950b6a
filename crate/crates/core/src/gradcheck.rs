//! Finite-difference gradient verification on a 64-bit shadow path.
//!
//! `shadow_eval` re-walks a recorded tape entirely in f64, with optional
//! per-element overrides of leaf values. Central differences on that path
//! are compared against the f32 backward pass. The shadow walker only uses
//! forward kernels, so it is independent of the VJP code it checks.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels as k;
use crate::rng;
use crate::tape::{chw_of, rows_cols_of, NodeId, Op, Tape};

/// Exact f64 re-evaluation of node `target`, with leaf elements replaced
/// according to `overrides` (leaf node id, flat element index) -> value.
pub fn shadow_eval(
    tape: &Tape,
    target: NodeId,
    overrides: &HashMap<(usize, usize), f64>,
) -> Result<f64> {
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(target.0 + 1);
    for idx in 0..=target.0 {
        let node = &tape.nodes[idx];
        let dims = node.value.dims();
        let v: Vec<f64> = match &node.op {
            Op::Param | Op::Const => {
                let mut data: Vec<f64> = node.value.data().iter().map(|&x| x as f64).collect();
                for ((nid, elem), val) in overrides {
                    if *nid == idx {
                        data[*elem] = *val;
                    }
                }
                data
            }
            Op::Add => k::add(&values[node.inputs[0].0], &values[node.inputs[1].0]),
            Op::Sub => k::sub(&values[node.inputs[0].0], &values[node.inputs[1].0]),
            Op::Mul => k::mul(&values[node.inputs[0].0], &values[node.inputs[1].0]),
            Op::MaxElem => k::max_elem(&values[node.inputs[0].0], &values[node.inputs[1].0]),
            Op::AddScalar(s) => k::add_scalar(&values[node.inputs[0].0], *s as f64),
            Op::MulScalar(s) => k::mul_scalar(&values[node.inputs[0].0], *s as f64),
            Op::PowScalar(p) => k::pow_scalar(&values[node.inputs[0].0], *p as f64),
            Op::Clamp { lo, hi } => k::clamp(&values[node.inputs[0].0], *lo as f64, *hi as f64),
            Op::Ln => k::ln(&values[node.inputs[0].0]),
            Op::Relu => k::relu(&values[node.inputs[0].0]),
            Op::Tanh => k::tanh(&values[node.inputs[0].0]),
            Op::SoftmaxRows => {
                let (r, c) = rows_cols_of(dims);
                k::softmax_rows(&values[node.inputs[0].0], r, c)
            }
            Op::MatMul => {
                let a = tape.nodes[node.inputs[0].0].value.dims();
                let b = tape.nodes[node.inputs[1].0].value.dims();
                let (n, kk) = rows_cols_of(a);
                let (_, m) = rows_cols_of(b);
                k::matmul(&values[node.inputs[0].0], &values[node.inputs[1].0], n, kk, m)
            }
            Op::AddRow => {
                let (r, c) = rows_cols_of(tape.nodes[node.inputs[0].0].value.dims());
                k::add_row(&values[node.inputs[0].0], &values[node.inputs[1].0], r, c)
            }
            Op::ScaleRows => {
                let (r, c) = rows_cols_of(tape.nodes[node.inputs[0].0].value.dims());
                k::scale_rows(&values[node.inputs[0].0], &values[node.inputs[1].0], r, c)
            }
            Op::Transpose => {
                let (r, c) = rows_cols_of(tape.nodes[node.inputs[0].0].value.dims());
                k::transpose(&values[node.inputs[0].0], r, c)
            }
            Op::Reshape => values[node.inputs[0].0].clone(),
            Op::Concat0 => {
                let mut v = values[node.inputs[0].0].clone();
                v.extend_from_slice(&values[node.inputs[1].0]);
                v
            }
            Op::ConcatCols => {
                let (r, ca) = rows_cols_of(tape.nodes[node.inputs[0].0].value.dims());
                let (_, cb) = rows_cols_of(tape.nodes[node.inputs[1].0].value.dims());
                k::concat_cols(&values[node.inputs[0].0], &values[node.inputs[1].0], r, ca, cb)
            }
            Op::SliceCols { start, end } => {
                let (r, c) = rows_cols_of(tape.nodes[node.inputs[0].0].value.dims());
                k::slice_cols(&values[node.inputs[0].0], r, c, *start, *end)
            }
            Op::Gather(idx) => k::gather(&values[node.inputs[0].0], idx),
            Op::RowSum => {
                let (r, c) = rows_cols_of(tape.nodes[node.inputs[0].0].value.dims());
                k::row_sum(&values[node.inputs[0].0], r, c)
            }
            Op::SumAll => vec![k::sum_all(&values[node.inputs[0].0])],
            Op::MeanAll => vec![k::mean_all(&values[node.inputs[0].0])],
            Op::Conv2d { stride } => {
                let (cin, h, w) = chw_of(tape.nodes[node.inputs[0].0].value.dims());
                let cout = tape.nodes[node.inputs[1].0].value.dims()[0];
                k::conv2d(
                    &values[node.inputs[0].0],
                    &values[node.inputs[1].0],
                    &values[node.inputs[2].0],
                    cin,
                    h,
                    w,
                    cout,
                    *stride,
                )
                .0
            }
            Op::BilinearUp => {
                let (ch, h, w) = chw_of(tape.nodes[node.inputs[0].0].value.dims());
                let (_, oh, ow) = chw_of(dims);
                k::bilinear_upsample(&values[node.inputs[0].0], ch, h, w, oh, ow)
            }
            Op::CosinePairs => {
                let (n, c) = rows_cols_of(tape.nodes[node.inputs[0].0].value.dims());
                let (m, _) = rows_cols_of(tape.nodes[node.inputs[1].0].value.dims());
                k::cosine_pairs(&values[node.inputs[0].0], &values[node.inputs[1].0], n, m, c)
            }
            Op::CosineMap => {
                let (c, h, w) = chw_of(tape.nodes[node.inputs[0].0].value.dims());
                k::cosine_map(&values[node.inputs[0].0], &values[node.inputs[1].0], c, h * w)
            }
        };
        values.push(v);
    }
    let out = &values[target.0];
    if out.len() != 1 {
        return Err(Error::NonScalarLoss {
            dims: tape.nodes[target.0].value.dims().to_vec(),
        });
    }
    Ok(out[0])
}

/// Result of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Central-difference check of `loss` gradients for the named leaves.
///
/// Per leaf, at most `max_elems` elements are probed (seeded subsample when
/// the leaf is larger). Relative error uses a floor of 1e-2 on the
/// denominator so near-zero gradients are compared absolutely.
pub fn check_gradients(
    tape: &Tape,
    loss: NodeId,
    leaf_names: &[&str],
    h: f64,
    max_elems: usize,
    seed: u64,
) -> Result<GradCheck> {
    let grads = tape.backward(loss)?;
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (li, name) in leaf_names.iter().enumerate() {
        let id = tape.leaf(name).ok_or_else(|| Error::InvalidArgument {
            context: format!("unknown leaf `{name}`"),
        })?;
        let bp = grads.by_name(name).expect("leaf gradient");
        let n = bp.len();
        let elems: Vec<usize> = if n <= max_elems {
            (0..n).collect()
        } else {
            let perm = rng::permutation(n, rng::mix(seed, li as u64));
            perm[..max_elems].to_vec()
        };
        for e in elems {
            let base = tape.value(id).data()[e] as f64;
            let mut over = HashMap::new();
            over.insert((id.0, e), base + h);
            let up = shadow_eval(tape, loss, &over)?;
            over.insert((id.0, e), base - h);
            let down = shadow_eval(tape, loss, &over)?;
            let fd = (up - down) / (2.0 * h);
            let got = bp.data()[e] as f64;
            let denom = fd.abs().max(got.abs()).max(1e-2);
            let rel = (fd - got).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(GradCheck {
        checked,
        max_rel_err: max_rel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_loss_matches_finite_differences() {
        // 1 - cos(a, b) at random 8-dim vectors, seed 7.
        let mut t = Tape::new();
        let a = t.param("a", &rng::gaussian(vec![1, 8], 1.0, 7)).unwrap();
        let b = t.param("b", &rng::gaussian(vec![1, 8], 1.0, 8)).unwrap();
        let cos = t.cosine_pairs(a, b).unwrap();
        let neg = t.mul_scalar(cos, -1.0).unwrap();
        let one = t.add_scalar(neg, 1.0).unwrap();
        let loss = t.mean_all(one).unwrap();
        let rep = check_gradients(&t, loss, &["a", "b"], 1e-3, 16, 1).unwrap();
        assert!(rep.max_rel_err < 1e-3, "rel err {}", rep.max_rel_err);
        assert_eq!(rep.checked, 16);
    }

    #[test]
    fn shadow_eval_matches_f32_forward() {
        let mut t = Tape::new();
        let x = t.param("x", &rng::gaussian(vec![3, 5], 1.0, 3)).unwrap();
        let w = t.param("w", &rng::gaussian(vec![5, 2], 1.0, 4)).unwrap();
        let y = t.matmul(x, w).unwrap();
        let a = t.tanh(y).unwrap();
        let loss = t.mean_all(a).unwrap();
        let shadow = shadow_eval(&t, loss, &HashMap::new()).unwrap();
        assert!((shadow - t.value(loss).item() as f64).abs() < 1e-6);
    }

    #[test]
    fn shadow_requires_scalar() {
        let mut t = Tape::new();
        let x = t.param("x", &Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        assert!(shadow_eval(&t, x, &HashMap::new()).is_err());
    }
}
