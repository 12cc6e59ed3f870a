//! Plain-slice numeric kernels shared by the tape ops and the incremental
//! inference path, so both compute the same math through the same code.

use crate::numerics::Scalar;

pub const ROTARY_BASE: f64 = 10000.0;

/// Per-row layer normalization with affine transform. `gain`/`bias` have
/// length `cols`. Population variance, eps added under the square root.
pub fn layer_norm_row<S: Scalar>(x: &[S], gain: &[S], bias: &[S], eps: S, out: &mut [S]) {
    let n = S::of_f64(x.len() as f64);
    let mean = x.iter().copied().sum::<S>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    let inv = (var + eps).sqrt().recip();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * inv * gain[i] + bias[i];
    }
}

/// Scaled softmax over the unmasked entries of one row. Masked entries are
/// written as exact zeros (the -1e9 pre-softmax fill, taken to its limit,
/// underflows to zero anyway). Returns false if the row is fully masked.
pub fn masked_softmax_row<S: Scalar>(x: &[S], allowed: &[bool], scale: S, out: &mut [S]) -> bool {
    let mut max = S::neg_infinity();
    for (i, &a) in allowed.iter().enumerate() {
        if a {
            let v = x[i] * scale;
            if v > max {
                max = v;
            }
        }
    }
    if max == S::neg_infinity() {
        return false;
    }
    let mut sum = S::zero();
    for i in 0..x.len() {
        if allowed[i] {
            let e = (x[i] * scale - max).exp();
            out[i] = e;
            sum = sum + e;
        } else {
            out[i] = S::zero();
        }
    }
    let inv = sum.recip();
    for v in out.iter_mut() {
        *v = *v * inv;
    }
    true
}

/// log(sum(exp(x))) of one row, max-subtracted for stability.
pub fn logsumexp_row<S: Scalar>(x: &[S]) -> S {
    let mut max = x[0];
    for &v in &x[1..] {
        if v > max {
            max = v;
        }
    }
    let sum: S = x.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Rotation angle for pair `pair` of a rotated span of `span` dims at
/// absolute position `pos`. Geometric frequency schedule. Computed in f64
/// for stability at large positions, identically on every call site.
pub fn rotary_angle(pos: usize, pair: usize, span: usize) -> (f64, f64) {
    let theta = ROTARY_BASE.powf(-2.0 * pair as f64 / span as f64);
    let angle = theta * pos as f64;
    angle.sin_cos()
}

/// Rotate the leading `span` dims of one head row pairwise by its position;
/// the remaining dims pass through. `invert` applies the inverse rotation
/// (used by the backward pass: rotation is orthonormal).
pub fn rotary_row<S: Scalar>(x: &[S], pos: usize, span: usize, invert: bool, out: &mut [S]) {
    for pair in 0..span / 2 {
        let (sin, cos) = rotary_angle(pos, pair, span);
        let (sin, cos) = (S::of_f64(sin), S::of_f64(cos));
        let sin = if invert { -sin } else { sin };
        let (a, b) = (x[2 * pair], x[2 * pair + 1]);
        out[2 * pair] = a * cos - b * sin;
        out[2 * pair + 1] = a * sin + b * cos;
    }
    out[span..].copy_from_slice(&x[span..]);
}

/// max(x, 0)^2 elementwise.
pub fn squared_relu<S: Scalar>(x: &[S], out: &mut [S]) {
    for i in 0..x.len() {
        let r = if x[i] > S::zero() { x[i] } else { S::zero() };
        out[i] = r * r;
    }
}

/// Fixed sinusoidal embedding of one absolute position, interleaved
/// sin/cos over geometrically spaced frequencies.
pub fn sinusoid_row<S: Scalar>(pos: usize, out: &mut [S]) {
    let dims = out.len();
    let pairs = dims / 2;
    for pair in 0..pairs {
        let theta = ROTARY_BASE.powf(-2.0 * pair as f64 / dims as f64);
        let (sin, cos) = (theta * pos as f64).sin_cos();
        out[2 * pair] = S::of_f64(sin);
        out[2 * pair + 1] = S::of_f64(cos);
    }
    if dims % 2 == 1 {
        let theta = ROTARY_BASE.powf(-2.0 * pairs as f64 / dims as f64);
        out[dims - 1] = S::of_f64((theta * pos as f64).sin());
    }
}

/// out = a @ b for row-major contiguous slices.
pub fn matmul_into<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    S::gemm(false, false, m, k, n, S::one(), a, b, S::zero(), out);
}

/// out = a @ b^T where `b` is stored row-major as n x k.
pub fn matmul_bt_into<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    S::gemm(false, true, m, k, n, S::one(), a, b, S::zero(), out);
}
