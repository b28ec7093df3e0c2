//! Forward and analytic backward kernels.
//!
//! The slice-level functions work on row-major buffers whose row width is
//! passed explicitly; the [`Tensor`] wrappers validate shapes and are the
//! public entry points for single calls.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const SINUSOID_PERIOD: f64 = 10_000.0;

/// `y = x W + b` for `x` of shape `[n, k]` and `W` of shape `[k, m]`.
pub fn affine(x: &[f64], k: usize, w: &[f64], m: usize, b: Option<&[f64]>) -> Vec<f64> {
    let n = x.len() / k;
    let mut y = vec![0.0; n * m];
    for (xi, yi) in x.chunks_exact(k).zip(y.chunks_exact_mut(m)) {
        if let Some(b) = b {
            yi.copy_from_slice(b);
        }
        for (kk, &xv) in xi.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &w[kk * m..(kk + 1) * m];
            for (o, &wv) in yi.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    }
    y
}

/// Accumulates `dW += xᵀ dy` and `db += Σ dy`.
pub fn affine_grad_params(
    x: &[f64],
    k: usize,
    dy: &[f64],
    m: usize,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    for (xi, dyi) in x.chunks_exact(k).zip(dy.chunks_exact(m)) {
        for (kk, &xv) in xi.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let dwr = &mut dw[kk * m..(kk + 1) * m];
            for (g, &d) in dwr.iter_mut().zip(dyi) {
                *g += xv * d;
            }
        }
    }
    if let Some(db) = db {
        for dyi in dy.chunks_exact(m) {
            for (g, &d) in db.iter_mut().zip(dyi) {
                *g += d;
            }
        }
    }
}

/// `dx = dy Wᵀ`.
pub fn affine_grad_input(dy: &[f64], w: &[f64], k: usize, m: usize) -> Vec<f64> {
    let n = dy.len() / m;
    let mut dx = vec![0.0; n * k];
    for (dyi, dxi) in dy.chunks_exact(m).zip(dx.chunks_exact_mut(k)) {
        for (kk, o) in dxi.iter_mut().enumerate() {
            let wr = &w[kk * m..(kk + 1) * m];
            *o = wr.iter().zip(dyi).map(|(a, b)| a * b).sum();
        }
    }
    dx
}

/// In-place max-stabilized softmax over contiguous rows of width `d`.
pub fn softmax_rows(x: &mut [f64], d: usize) {
    for row in x.chunks_exact_mut(d) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

/// Softmax backward from the forward output: `dx = y ⊙ (dy − ⟨y, dy⟩)`.
pub fn softmax_rows_backward(y: &[f64], dy: &[f64], d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, dyr), dxr) in y.chunks_exact(d).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *o = yv * (g - dot);
        }
    }
    dx
}

/// Saved state of a layer-norm forward.
#[derive(Debug, Clone, Default)]
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Layer normalization over rows of width `d` with affine `gamma`, `beta`.
pub fn layer_norm_rows(x: &[f64], d: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, LayerNormCache) {
    let n = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n];
    for (i, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = h * gamma[j] + beta[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

/// Layer-norm backward; accumulates into `dgamma`, `dbeta` and returns `dx`.
pub fn layer_norm_rows_backward(
    dy: &[f64],
    cache: &LayerNormCache,
    gamma: &[f64],
    d: usize,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; dy.len()];
    let mut g = vec![0.0; d];
    for (i, dyr) in dy.chunks_exact(d).enumerate() {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        for j in 0..d {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            g[j] = dyr[j] * gamma[j];
        }
        let mean_g = g.iter().sum::<f64>() / d as f64;
        let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let r = cache.rstd[i];
        for j in 0..d {
            dx[i * d + j] = r * (g[j] - mean_g - xh[j] * mean_gx);
        }
    }
    dx
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// ReLU backward given the pre-activation.
pub fn relu_backward(pre: &[f64], dy: &[f64]) -> Vec<f64> {
    pre.iter().zip(dy).map(|(&p, &g)| if p > 0.0 { g } else { 0.0 }).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sinusoidal code of a scalar position: `sin(pos / T^(2k/C))` on even
/// channels and the matching cosine on odd ones.
pub fn sinusoidal_embed(pos: f64, channels: usize) -> Result<Tensor> {
    if channels == 0 || channels % 2 != 0 {
        return Err(Error::Config(format!("sinusoidal embedding needs an even channel count, got {channels}")));
    }
    let mut out = vec![0.0; channels];
    for k in 0..channels / 2 {
        let arg = pos / SINUSOID_PERIOD.powf(2.0 * k as f64 / channels as f64);
        out[2 * k] = arg.sin();
        out[2 * k + 1] = arg.cos();
    }
    Tensor::new(vec![channels], out)
}

/// `x W + b` broadcast over every leading axis of `x`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = linear_dims(x, w, b)?;
    let y = affine(x.data(), k, w.data(), m, Some(b.data()));
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = m;
    Tensor::new(shape, y)
}

/// Backward of [`linear`]: accumulates into the gradient slots of `w` and
/// `b` and returns the input gradient.
pub fn linear_backward(x: &Tensor, w: &mut Tensor, b: &mut Tensor, dy: &Tensor) -> Result<Tensor> {
    let (k, m) = linear_dims(x, w, b)?;
    if dy.numel() != x.numel() / k * m {
        return Err(Error::Dimension("linear backward: upstream gradient has the wrong size".into()));
    }
    let dx = affine_grad_input(dy.data(), w.data(), k, m);
    affine_grad_params(x.data(), k, dy.data(), m, w.grad_mut(), Some(b.grad_mut()));
    Tensor::new(x.shape().to_vec(), dx)
}

fn linear_dims(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    if w.shape().len() != 2 {
        return Err(Error::Dimension(format!("weight must be 2-D, got {:?}", w.shape())));
    }
    let (k, m) = (w.shape()[0], w.shape()[1]);
    if x.last_dim() != k {
        return Err(Error::Dimension(format!("input inner extent {} != weight rows {k}", x.last_dim())));
    }
    if b.shape() != [m] {
        return Err(Error::Dimension(format!("bias shape {:?} != [{m}]", b.shape())));
    }
    Ok((k, m))
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, d, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    let mut row = vec![0.0; d];
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..d {
                row[j] = src[(o * d + j) * inner + i];
            }
            softmax_rows(&mut row, d);
            for j in 0..d {
                out[(o * d + j) * inner + i] = row[j];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Backward of [`softmax`] given its output `y`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor, axis: usize) -> Result<Tensor> {
    if y.shape() != dy.shape() {
        return Err(Error::Dimension("softmax backward: shape mismatch".into()));
    }
    let (outer, d, inner) = axis_split(y.shape(), axis)?;
    let mut dx = vec![0.0; y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * d + j) * inner + i;
            let dot: f64 = (0..d).map(|j| y.data()[at(j)] * dy.data()[at(j)]).sum();
            for j in 0..d {
                dx[at(j)] = y.data()[at(j)] * (dy.data()[at(j)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), dx)
}

/// Layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let d = x.last_dim();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::Dimension("layer norm: affine parameters must match the last axis".into()));
    }
    let (y, _) = layer_norm_rows(x.data(), d, gamma.data(), beta.data());
    Tensor::new(x.shape().to_vec(), y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity() {
        let y = linear(&t(&[2], &[1.0, 0.0]), &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), &t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
    }

    #[test]
    fn linear_two_by_two() {
        let y = linear(&t(&[2], &[1.0, 2.0]), &t(&[2, 2], &[1.0, 1.0, 1.0, -1.0]), &t(&[2], &[0.0, 1.0])).unwrap();
        assert_eq!(y.data(), &[3.0, 0.0]);
    }

    #[test]
    fn linear_shape_mismatch() {
        let r = linear(&t(&[3], &[1.0, 2.0, 3.0]), &t(&[2, 2], &[1.0; 4]), &t(&[2], &[0.0; 2]));
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let y = softmax(&t(&[3], &[0.0, 0.0, 0.0]), 0).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax(&t(&[3], &[1000.0, 0.0, 0.0]), 0).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-15 && y.data()[1] < 1e-300);
        let y = softmax(&t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]), 0).unwrap();
        for (v, e) in y.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_inner_axis() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]);
        let y = softmax(&x, 0).unwrap();
        for col in 0..3 {
            let s = y.data()[col] + y.data()[3 + col];
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn sinusoid_examples() {
        assert_eq!(sinusoidal_embed(0.0, 4).unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);
        let e = sinusoidal_embed(0.0, 8).unwrap();
        for (i, v) in e.data().iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        let e = sinusoidal_embed(0.5, 2).unwrap();
        assert_eq!(e.data(), &[0.5f64.sin(), 0.5f64.cos()]);
        assert!(matches!(sinusoidal_embed(0.5, 3), Err(Error::Config(_))));
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let x = t(&[1, 4], &[1.0, 2.0, 3.0, 10.0]);
        let y = layer_norm(&x, &t(&[4], &[1.0; 4]), &t(&[4], &[0.0; 4])).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
