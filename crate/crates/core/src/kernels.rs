//! Shape-explicit numeric kernels, generic over f32/f64.
//!
//! The tape instantiates these at f32; the gradient-check shadow evaluator
//! re-runs the same recorded graph at f64. All reductions use a fixed
//! left-to-right order so results are bit-reproducible.

use num_traits::Float;

/// Norm floor for cosine similarity, so zero vectors never produce NaN.
pub const COSINE_EPS: f64 = 1e-8;

fn c<T: Float>(v: f64) -> T {
    T::from(v).expect("constant conversion")
}

pub fn matmul<T: Float>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    let mut i = 0;
    // 4-row register tile: each B row is reused four times from cache and
    // the lane-parallel j loop carries no cross-lane reduction, so results
    // do not depend on vector width.
    while i + 4 <= n {
        let (a0, a1, a2, a3) = (
            &a[i * k..(i + 1) * k],
            &a[(i + 1) * k..(i + 2) * k],
            &a[(i + 2) * k..(i + 3) * k],
            &a[(i + 3) * k..(i + 4) * k],
        );
        let (lo, rest) = out[i * m..].split_at_mut(m);
        let (l1, rest) = rest.split_at_mut(m);
        let (l2, l3) = rest.split_at_mut(m);
        let l3 = &mut l3[..m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            let (v0, v1, v2, v3) = (a0[p], a1[p], a2[p], a3[p]);
            for j in 0..m {
                let bv = brow[j];
                lo[j] = bv.mul_add(v0, lo[j]);
                l1[j] = bv.mul_add(v1, l1[j]);
                l2[j] = bv.mul_add(v2, l2[j]);
                l3[j] = bv.mul_add(v3, l3[j]);
            }
        }
        i += 4;
    }
    while i < n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = bv.mul_add(av, *o);
            }
        }
        i += 1;
    }
    out
}

/// Unfold a cin×h×w input into the (cin·9)×(oh·ow) patch matrix of a 3x3
/// convolution with zero padding 1. Row index is (ci, ky, kx) row-major.
pub fn im2col<T: Float>(
    x: &[T],
    cin: usize,
    h: usize,
    wd: usize,
    stride: usize,
) -> (Vec<T>, usize, usize) {
    let oh = (h - 1) / stride + 1;
    let ow = (wd - 1) / stride + 1;
    let m = oh * ow;
    let mut col = vec![T::zero(); cin * 9 * m];
    for ci in 0..cin {
        let xc = &x[ci * h * wd..(ci + 1) * h * wd];
        for ky in 0..3 {
            for kx in 0..3 {
                let Some((ox_lo, ox_hi)) = valid_ox_range(kx, wd, stride, ow) else {
                    continue;
                };
                let row = &mut col[((ci * 3 + ky) * 3 + kx) * m..((ci * 3 + ky) * 3 + kx + 1) * m];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &xc[iy as usize * wd..(iy as usize + 1) * wd];
                    let orow = &mut row[oy * ow..(oy + 1) * ow];
                    for (o, xv) in orow[ox_lo..ox_hi]
                        .iter_mut()
                        .zip(xrow[ox_lo * stride + kx - 1..].iter().step_by(stride))
                    {
                        *o = *xv;
                    }
                }
            }
        }
    }
    (col, oh, ow)
}

/// 3x3 convolution with zero padding 1 and stride 1 or 2, via im2col.
/// `x`: cin×h×w, `w`: cout×cin×3×3, `b`: cout. Output is cout×oh×ow.
pub fn conv2d<T: Float>(
    x: &[T],
    w: &[T],
    b: &[T],
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    stride: usize,
) -> (Vec<T>, usize, usize) {
    let (col, oh, ow) = im2col(x, cin, h, wd, stride);
    let m = oh * ow;
    let k = cin * 9;
    let mut out = matmul(w, &col, cout, k, m);
    for co in 0..cout {
        let bv = b[co];
        for o in &mut out[co * m..(co + 1) * m] {
            *o = *o + bv;
        }
    }
    (out, oh, ow)
}

/// Gradients of conv2d w.r.t. input, weights and bias.
pub fn conv2d_backward<T: Float>(
    x: &[T],
    w: &[T],
    g: &[T],
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    stride: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (col, oh, ow) = im2col(x, cin, h, wd, stride);
    let m = oh * ow;
    let k = cin * 9;
    // db: per-channel sum of upstream gradient
    let mut db = vec![T::zero(); cout];
    for co in 0..cout {
        let mut acc = T::zero();
        for &gv in &g[co * m..(co + 1) * m] {
            acc = acc + gv;
        }
        db[co] = acc;
    }
    // dw = g · col^T and dcol = w^T · g, both through the tiled matmul
    let col_t = transpose(&col, k, m);
    let dw = matmul(g, &col_t, cout, m, k);
    let w_t = transpose(w, cout, k);
    let dcol = matmul(&w_t, g, k, cout, m);
    let mut dx = vec![T::zero(); cin * h * wd];
    for ci in 0..cin {
        let dxc = &mut dx[ci * h * wd..(ci + 1) * h * wd];
        for ky in 0..3 {
            for kx in 0..3 {
                let Some((ox_lo, ox_hi)) = valid_ox_range(kx, wd, stride, ow) else {
                    continue;
                };
                let drow = &dcol[((ci * 3 + ky) * 3 + kx) * m..((ci * 3 + ky) * 3 + kx + 1) * m];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * wd..(iy as usize + 1) * wd];
                    let src = &drow[oy * ow..(oy + 1) * ow];
                    for (i, &dv) in src[ox_lo..ox_hi].iter().enumerate() {
                        let ix = (ox_lo + i) * stride + kx - 1;
                        dst[ix] = dst[ix] + dv;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Output-column range with in-bounds input columns: 0 <= ox*stride+kx-1 < wd.
fn valid_ox_range(kx: usize, wd: usize, stride: usize, ow: usize) -> Option<(usize, usize)> {
    if kx > wd {
        return None;
    }
    let lo = if kx == 0 { 1usize.div_ceil(stride) } else { 0 };
    let hi = ((wd - kx) / stride + 1).min(ow);
    if lo >= hi {
        None
    } else {
        Some((lo, hi))
    }
}

pub fn relu<T: Float>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

pub fn tanh<T: Float>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v.tanh()).collect()
}

pub fn ln<T: Float>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v.ln()).collect()
}

pub fn clamp<T: Float>(x: &[T], lo: T, hi: T) -> Vec<T> {
    x.iter()
        .map(|&v| if v < lo { lo } else if v > hi { hi } else { v })
        .collect()
}

pub fn pow_scalar<T: Float>(x: &[T], p: T) -> Vec<T> {
    x.iter().map(|&v| v.powf(p)).collect()
}

pub fn add_scalar<T: Float>(x: &[T], s: T) -> Vec<T> {
    x.iter().map(|&v| v + s).collect()
}

pub fn mul_scalar<T: Float>(x: &[T], s: T) -> Vec<T> {
    x.iter().map(|&v| v * s).collect()
}

pub fn add<T: Float>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

pub fn sub<T: Float>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

pub fn mul<T: Float>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
}

pub fn max_elem<T: Float>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| if x > y { x } else { y })
        .collect()
}

/// Add `bias` (len cols) to every row of `x` (rows×cols).
pub fn add_row<T: Float>(x: &[T], bias: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for ci in 0..cols {
            out.push(x[r * cols + ci] + bias[ci]);
        }
    }
    out
}

/// Scale row `i` of `x` (rows×cols) by `s[i]`.
pub fn scale_rows<T: Float>(x: &[T], s: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for ci in 0..cols {
            out.push(x[r * cols + ci] * s[r]);
        }
    }
    out
}

pub fn row_sum<T: Float>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    (0..rows)
        .map(|r| {
            let mut acc = T::zero();
            for ci in 0..cols {
                acc = acc + x[r * cols + ci];
            }
            acc
        })
        .collect()
}

pub fn sum_all<T: Float>(x: &[T]) -> T {
    let mut acc = T::zero();
    for &v in x {
        acc = acc + v;
    }
    acc
}

pub fn mean_all<T: Float>(x: &[T]) -> T {
    sum_all(x) / c::<T>(x.len() as f64)
}

/// Numerically stable per-row softmax over the last axis.
pub fn softmax_rows<T: Float>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let mut z = T::zero();
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row.iter()) {
            let e = (v - mx).exp();
            *o = e;
            z = z + e;
        }
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o = *o / z;
        }
    }
    out
}

pub fn transpose<T: Float>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for ci in 0..cols {
            out[ci * rows + r] = x[r * cols + ci];
        }
    }
    out
}

fn guarded_norm<T: Float>(v: &[T]) -> T {
    let mut acc = T::zero();
    for &x in v {
        acc = acc + x * x;
    }
    let n = acc.sqrt();
    let eps = c::<T>(COSINE_EPS);
    if n > eps {
        n
    } else {
        eps
    }
}

/// Cosine similarity of two equal-length vectors with an epsilon-guarded norm.
pub fn cosine<T: Float>(a: &[T], b: &[T]) -> T {
    let mut dot = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
    }
    dot / (guarded_norm(a) * guarded_norm(b))
}

/// All-pairs cosine similarity between rows of `a` (n×c) and rows of `b` (m×c).
pub fn cosine_pairs<T: Float>(a: &[T], b: &[T], n: usize, m: usize, cdim: usize) -> Vec<T> {
    let na: Vec<T> = (0..n).map(|i| guarded_norm(&a[i * cdim..(i + 1) * cdim])).collect();
    let nb: Vec<T> = (0..m).map(|j| guarded_norm(&b[j * cdim..(j + 1) * cdim])).collect();
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let ai = &a[i * cdim..(i + 1) * cdim];
        for j in 0..m {
            let bj = &b[j * cdim..(j + 1) * cdim];
            let mut dot = T::zero();
            for (&x, &y) in ai.iter().zip(bj) {
                dot = dot + x * y;
            }
            out[i * m + j] = dot / (na[i] * nb[j]);
        }
    }
    out
}

/// Per-pixel cosine over the channel axis of two c×h×w maps; output h×w.
pub fn cosine_map<T: Float>(a: &[T], b: &[T], cdim: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); hw];
    for p in 0..hw {
        let mut dot = T::zero();
        let mut qa = T::zero();
        let mut qb = T::zero();
        for ch in 0..cdim {
            let x = a[ch * hw + p];
            let y = b[ch * hw + p];
            dot = dot + x * y;
            qa = qa + x * x;
            qb = qb + y * y;
        }
        let eps = c::<T>(COSINE_EPS);
        let na = qa.sqrt().max(eps);
        let nb = qb.sqrt().max(eps);
        out[p] = dot / (na * nb);
    }
    out
}

/// Source coordinate and blend weights for one output position under the
/// half-pixel (align-corners=false) convention.
pub fn bilinear_axis(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let mut src = (dst as f64 + 0.5) * scale - 0.5;
    if src < 0.0 {
        src = 0.0;
    }
    let max = (in_len - 1) as f64;
    if src > max {
        src = max;
    }
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

/// Per-channel bilinear upsampling of `x` (channels×h×w) to oh×ow.
pub fn bilinear_upsample<T: Float>(
    x: &[T],
    channels: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let xw: Vec<(usize, usize, f64)> = (0..ow).map(|d| bilinear_axis(d, w, ow)).collect();
    let yw: Vec<(usize, usize, f64)> = (0..oh).map(|d| bilinear_axis(d, h, oh)).collect();
    let mut out = vec![T::zero(); channels * oh * ow];
    for ch in 0..channels {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        let oc = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in yw.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xw.iter().enumerate() {
                let a = xc[y0 * w + x0];
                let b = xc[y0 * w + x1];
                let d = xc[y1 * w + x0];
                let e = xc[y1 * w + x1];
                let fy_t = c::<T>(fy);
                let fx_t = c::<T>(fx);
                let one = T::one();
                let top = a * (one - fx_t) + b * fx_t;
                let bot = d * (one - fx_t) + e * fx_t;
                oc[oy * ow + ox] = top * (one - fy_t) + bot * fy_t;
            }
        }
    }
    out
}

pub fn gather<T: Float>(x: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| x[i]).collect()
}

/// Columns `start..end` of every row of `x` (rows×cols).
pub fn slice_cols<T: Float>(x: &[T], rows: usize, cols: usize, start: usize, end: usize) -> Vec<T> {
    let w = end - start;
    let mut out = Vec::with_capacity(rows * w);
    for r in 0..rows {
        out.extend_from_slice(&x[r * cols + start..r * cols + end]);
    }
    out
}

/// Concatenate two row-major matrices along the column axis.
pub fn concat_cols<T: Float>(a: &[T], b: &[T], rows: usize, ca: usize, cb: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * (ca + cb));
    for r in 0..rows {
        out.extend_from_slice(&a[r * ca..(r + 1) * ca]);
        out.extend_from_slice(&b[r * cb..(r + 1) * cb]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let out = matmul(&[1.0f32, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(out, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_closed_form() {
        let out = softmax_rows(&[0.0f64, (3.0f64).ln()], 1, 2);
        assert!((out[0] - 0.25).abs() < 1e-12);
        assert!((out[1] - 0.75).abs() < 1e-12);
        let x: Vec<f32> = (0..12).map(|i| (i as f32 * 0.73).sin() * 3.0).collect();
        let s = softmax_rows(&x, 3, 4);
        for r in 0..3 {
            let sum: f32 = s[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(s[r * 4..(r + 1) * 4].iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn cosine_basic_properties() {
        let v = [0.3f32, -1.2, 0.7];
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        assert!((cosine(&v, &v) - 1.0).abs() < 1e-6);
        assert!((cosine(&v, &neg) + 1.0).abs() < 1e-6);
        assert!(cosine(&[1.0f32, 0.0], &[0.0, 1.0]).abs() < 1e-7);
        // scale invariance
        let scaled: Vec<f32> = v.iter().map(|x| x * 37.5).collect();
        let w = [0.9f32, 0.1, -0.4];
        assert!((cosine(&v, &w) - cosine(&scaled, &w)).abs() < 1e-6);
        // zero vector is guarded, not NaN
        assert_eq!(cosine(&[0.0f32, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn bilinear_identity_is_bit_exact() {
        let x: Vec<f32> = (0..12).map(|i| i as f32 * 0.37).collect();
        let out = bilinear_upsample(&x, 1, 3, 4, 3, 4);
        assert_eq!(out, x);
    }

    #[test]
    fn bilinear_2x2_to_4x4_reference() {
        // Hand-evaluated half-pixel bilinear of [[0,1],[2,3]].
        let out = bilinear_upsample(&[0.0f32, 1.0, 2.0, 3.0], 1, 2, 2, 4, 4);
        let expect = [
            0.0, 0.25, 0.75, 1.0, //
            0.5, 0.75, 1.25, 1.5, //
            1.5, 1.75, 2.25, 2.5, //
            2.0, 2.25, 2.75, 3.0,
        ];
        for (o, e) in out.iter().zip(expect.iter()) {
            assert!((o - e).abs() < 1e-6, "{out:?}");
        }
    }

    #[test]
    fn bilinear_constant_stays_constant() {
        let x = vec![0.5f32; 6];
        let out = bilinear_upsample(&x, 1, 2, 3, 7, 11);
        assert!(out.iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn conv2d_matches_naive_reference() {
        // Independent dense reference: loop over every output and kernel tap.
        fn naive(
            x: &[f32],
            w: &[f32],
            b: &[f32],
            cin: usize,
            h: usize,
            wd: usize,
            cout: usize,
            stride: usize,
        ) -> Vec<f32> {
            let oh = (h - 1) / stride + 1;
            let ow = (wd - 1) / stride + 1;
            let mut out = vec![0.0f32; cout * oh * ow];
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x[(ci * h + iy as usize) * wd + ix as usize]
                                        * w[((co * cin + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        out[(co * oh + oy) * ow + ox] = acc;
                    }
                }
            }
            out
        }

        let x = crate::rng::gaussian(vec![3, 6, 5], 1.0, 11);
        let w = crate::rng::gaussian(vec![4, 3, 3, 3], 0.5, 12);
        let b = crate::rng::gaussian(vec![4], 0.1, 13);
        for stride in [1, 2] {
            let (got, oh, ow) = conv2d(x.data(), w.data(), b.data(), 3, 6, 5, 4, stride);
            let want = naive(x.data(), w.data(), b.data(), 3, 6, 5, 4, stride);
            assert_eq!(got.len(), 4 * oh * ow);
            for (g, n) in got.iter().zip(want.iter()) {
                assert!((g - n).abs() < 1e-5);
            }
        }
    }
}
