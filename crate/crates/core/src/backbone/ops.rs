//! Row-major dense kernels and their backward passes. Weights are stored
//! `[d_in x d_out]`; every `*_backward` accumulates into its outputs.

use super::Real;

const LN_EPS: f64 = 1e-5;

/// `y = x W + b` for `n` rows.
pub(crate) fn linear<T: Real>(
    x: &[T],
    n: usize,
    w: &[T],
    b: Option<&[T]>,
    d_in: usize,
    d_out: usize,
) -> Vec<T> {
    debug_assert_eq!(x.len(), n * d_in);
    debug_assert_eq!(w.len(), d_in * d_out);
    let mut y = vec![T::zero(); n * d_out];
    for r in 0..n {
        let yr = &mut y[r * d_out..(r + 1) * d_out];
        if let Some(b) = b {
            yr.copy_from_slice(b);
        }
        let xr = &x[r * d_in..(r + 1) * d_in];
        for (i, &xi) in xr.iter().enumerate() {
            let wi = &w[i * d_out..(i + 1) * d_out];
            for (y, &wv) in yr.iter_mut().zip(wi) {
                *y += xi * wv;
            }
        }
    }
    y
}

pub(crate) struct LinearGrads<'a, T> {
    pub dw: &'a mut [T],
    pub db: Option<&'a mut [T]>,
    pub dx: Option<&'a mut [T]>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Real>(
    x: &[T],
    dy: &[T],
    n: usize,
    w: &[T],
    d_in: usize,
    d_out: usize,
    grads: LinearGrads<'_, T>,
) {
    let LinearGrads { dw, db, dx } = grads;
    for r in 0..n {
        let xr = &x[r * d_in..(r + 1) * d_in];
        let dyr = &dy[r * d_out..(r + 1) * d_out];
        for (i, &xi) in xr.iter().enumerate() {
            let dwi = &mut dw[i * d_out..(i + 1) * d_out];
            for (g, &d) in dwi.iter_mut().zip(dyr) {
                *g += xi * d;
            }
        }
    }
    if let Some(db) = db {
        for r in 0..n {
            for (g, &d) in db.iter_mut().zip(&dy[r * d_out..(r + 1) * d_out]) {
                *g += d;
            }
        }
    }
    if let Some(dx) = dx {
        for r in 0..n {
            let dyr = &dy[r * d_out..(r + 1) * d_out];
            let dxr = &mut dx[r * d_in..(r + 1) * d_in];
            for (i, g) in dxr.iter_mut().enumerate() {
                let wi = &w[i * d_out..(i + 1) * d_out];
                let mut acc = T::zero();
                for (&wv, &d) in wi.iter().zip(dyr) {
                    acc += wv * d;
                }
                *g += acc;
            }
        }
    }
}

/// Affine-free layer normalization. Returns `(x_hat, 1/sigma)` per row.
pub(crate) fn layer_norm<T: Real>(x: &[T], n: usize, d: usize) -> (Vec<T>, Vec<T>) {
    let inv_d = T::lit(1.0 / d as f64);
    let eps = T::lit(LN_EPS);
    let mut xhat = vec![T::zero(); n * d];
    let mut rstd = vec![T::zero(); n];
    for r in 0..n {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = (var + eps).sqrt().recip();
        rstd[r] = rs;
        for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(xr) {
            *o = (v - mean) * rs;
        }
    }
    (xhat, rstd)
}

pub(crate) fn layer_norm_backward<T: Real>(
    dxhat: &[T],
    xhat: &[T],
    rstd: &[T],
    n: usize,
    d: usize,
    dx: &mut [T],
) {
    let inv_d = T::lit(1.0 / d as f64);
    for r in 0..n {
        let g = &dxhat[r * d..(r + 1) * d];
        let y = &xhat[r * d..(r + 1) * d];
        let mean_g = g.iter().copied().sum::<T>() * inv_d;
        let mean_gy = g.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
        for ((o, &gi), &yi) in dx[r * d..(r + 1) * d].iter_mut().zip(g).zip(y) {
            *o += rstd[r] * (gi - mean_g - yi * mean_gy);
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let th = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + th)
        + half * x * (T::one() - th * th) * k * (T::one() + T::lit(3.0) * c * x * x)
}

pub(crate) fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub(crate) fn silu_grad<T: Real>(x: T) -> T {
    let s = (T::one() + (-x).exp()).recip();
    s * (T::one() + x * (T::one() - s))
}

/// In-place softmax over a slice.
pub(crate) fn softmax_in_place<T: Real>(v: &mut [T]) {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in v.iter_mut() {
        *x /= z;
    }
}
