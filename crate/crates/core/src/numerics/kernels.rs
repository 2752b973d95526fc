//! Row-level forward kernels.
//!
//! Both the recorded graph ops and the streaming inference paths call these,
//! so an offline forward and a frame-by-frame replay produce bit-identical
//! values as long as they feed the same rows in the same order.

pub const LN_EPS: f64 = 1e-5;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `out = W x (+ b)` with `W` stored row-major as `[out.len(), x.len()]`.
#[inline]
pub fn affine_row(x: &[f64], w: &[f64], b: Option<&[f64]>, out: &mut [f64]) {
    let d_in = x.len();
    for (o, slot) in out.iter_mut().enumerate() {
        let mut acc = dot(&w[o * d_in..(o + 1) * d_in], x);
        if let Some(b) = b {
            acc += b[o];
        }
        *slot = acc;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`sigmoid`] on `(0, 1)`.
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Layer normalisation of one row. Returns `(mean, 1/std)`.
pub fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64], out: &mut [f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gamma[i] + beta[i];
    }
    (mean, rstd)
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in z {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
}

pub fn softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Scaled dot-product attention for a single query row of one head.
///
/// `keys[i]` and `values[i]` are the head slices of the i-th visible key, in
/// the order the caller wants them summed. `bias[i]` is added to the i-th
/// score. `weights` receives the normalised attention weights.
pub fn attend_head(
    q: &[f64],
    keys: &[&[f64]],
    values: &[&[f64]],
    bias: &[f64],
    scale: f64,
    weights: &mut [f64],
    out: &mut [f64],
) {
    let mut max = f64::NEG_INFINITY;
    for (i, k) in keys.iter().enumerate() {
        let s = dot(q, k) * scale + bias[i];
        weights[i] = s;
        if s > max {
            max = s;
        }
    }
    let mut sum = 0.0;
    for w in weights.iter_mut() {
        *w = (*w - max).exp();
        sum += *w;
    }
    for w in weights.iter_mut() {
        *w /= sum;
    }
    out.fill(0.0);
    for (w, v) in weights.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += w * x;
        }
    }
}
