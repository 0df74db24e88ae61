//! Differentiable primitives for the forecaster: dense affine maps,
//! LayerNorm, row softmax, exact-erf GELU, and inverted dropout. Each forward
//! has a matching hand-written backward; the unit tests check every backward
//! against central finite differences so a sign or indexing slip is caught at
//! the primitive level rather than in the full network.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// LayerNorm variance floor.
pub const LN_EPS: f64 = 1e-5;

/// out[r, j] = Σ_i x[r, i]·w[i, j] + b[j] for `rows` rows.
pub fn linear_fwd(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    rows: usize,
    d_in: usize,
    d_out: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(x.len(), rows * d_in);
    debug_assert_eq!(w.len(), d_in * d_out);
    debug_assert_eq!(b.len(), d_out);
    debug_assert_eq!(out.len(), rows * d_out);
    for r in 0..rows {
        let xr = &x[r * d_in..(r + 1) * d_in];
        let or = &mut out[r * d_out..(r + 1) * d_out];
        or.copy_from_slice(b);
        for (i, &xi) in xr.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wrow = &w[i * d_out..(i + 1) * d_out];
            for (o, &wij) in or.iter_mut().zip(wrow) {
                *o += xi * wij;
            }
        }
    }
}

/// Accumulating backward of [`linear_fwd`]: `dx` is overwritten, `dw`/`db`
/// are accumulated into (callers zero them once per backward pass).
pub fn linear_bwd(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    rows: usize,
    d_in: usize,
    d_out: usize,
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    debug_assert_eq!(dx.len(), rows * d_in);
    debug_assert_eq!(dw.len(), d_in * d_out);
    debug_assert_eq!(db.len(), d_out);
    for r in 0..rows {
        let xr = &x[r * d_in..(r + 1) * d_in];
        let dor = &dout[r * d_out..(r + 1) * d_out];
        let dxr = &mut dx[r * d_in..(r + 1) * d_in];
        for (j, &d) in dor.iter().enumerate() {
            db[j] += d;
        }
        for i in 0..d_in {
            let wrow = &w[i * d_out..(i + 1) * d_out];
            let mut acc = 0.0;
            for (j, &d) in dor.iter().enumerate() {
                acc += d * wrow[j];
                dw[i * d_out + j] += xr[i] * d;
            }
            dxr[i] = acc;
        }
    }
}

/// Per-row LayerNorm over `d` features with learned scale `g` and shift `b`.
/// Writes the normalized activations into `xhat` and the reciprocal standard
/// deviations into `inv_std` for the backward pass.
pub fn layernorm_fwd(
    x: &[f64],
    g: &[f64],
    b: &[f64],
    rows: usize,
    d: usize,
    out: &mut [f64],
    xhat: &mut [f64],
    inv_std: &mut [f64],
) {
    debug_assert_eq!(x.len(), rows * d);
    debug_assert_eq!(inv_std.len(), rows);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = s;
        for j in 0..d {
            let xh = (xr[j] - mean) * s;
            xhat[r * d + j] = xh;
            out[r * d + j] = g[j] * xh + b[j];
        }
    }
}

/// Backward of [`layernorm_fwd`]; `dx` overwritten, `dg`/`db` accumulated.
pub fn layernorm_bwd(
    xhat: &[f64],
    inv_std: &[f64],
    g: &[f64],
    dout: &[f64],
    rows: usize,
    d: usize,
    dx: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
) {
    for r in 0..rows {
        let xh = &xhat[r * d..(r + 1) * d];
        let dor = &dout[r * d..(r + 1) * d];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxhat = dor[j] * g[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xh[j];
            dg[j] += dor[j] * xh[j];
            db[j] += dor[j];
        }
        let inv_d = 1.0 / d as f64;
        for j in 0..d {
            let dxhat = dor[j] * g[j];
            dx[r * d + j] =
                inv_std[r] * (dxhat - inv_d * sum_dxhat - xh[j] * inv_d * sum_dxhat_xhat);
        }
    }
}

/// Numerically stable softmax over each row of length `n`, in place.
pub fn softmax_rows(z: &mut [f64], rows: usize, n: usize) {
    for r in 0..rows {
        let zr = &mut z[r * n..(r + 1) * n];
        let max = zr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in zr.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in zr.iter_mut() {
            *v /= sum;
        }
    }
}

/// Backward of softmax given its output `a`: dz_i = a_i (dy_i − Σ_j dy_j a_j).
pub fn softmax_rows_bwd(a: &[f64], dout: &[f64], rows: usize, n: usize, dz: &mut [f64]) {
    for r in 0..rows {
        let ar = &a[r * n..(r + 1) * n];
        let dor = &dout[r * n..(r + 1) * n];
        let dot: f64 = ar.iter().zip(dor).map(|(x, y)| x * y).sum();
        for j in 0..n {
            dz[r * n + j] = ar[j] * (dor[j] - dot);
        }
    }
}

/// Exact GELU: x·Φ(x) with the Gaussian CDF via the error function (no tanh
/// approximation, so gradient checks hold to full double precision).
pub fn gelu(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// d/dx of [`gelu`]: Φ(x) + x·φ(x).
pub fn gelu_grad(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

pub fn gelu_slice(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = gelu(v);
    }
}

/// dx = dout ⊙ gelu'(x_preactivation), overwritten.
pub fn gelu_slice_bwd(x: &[f64], dout: &[f64], dx: &mut [f64]) {
    for ((d, &v), &g) in dx.iter_mut().zip(x).zip(dout) {
        *d = g * gelu_grad(v);
    }
}

/// Inverted-dropout mask: each element is 0 with probability `p`, else
/// 1/(1−p). `p = 0` yields an all-ones mask without consuming randomness, so
/// configurations without dropout stay deterministic regardless of seeding.
pub fn dropout_mask(rng: &mut ChaCha8Rng, len: usize, p: f64) -> Vec<f64> {
    if p == 0.0 {
        return vec![1.0; len];
    }
    let keep_scale = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep_scale })
        .collect()
}

/// x ⊙ mask, in place; its own backward (mask is constant).
pub fn apply_mask(x: &mut [f64], mask: &[f64]) {
    for (v, &m) in x.iter_mut().zip(mask) {
        *v *= m;
    }
}
