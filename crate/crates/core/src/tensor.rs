//! Dense row-major tensors and the handful of kernels the models need.
//!
//! Everything is generic over [`Scalar`] so the same code runs in 32-bit for
//! training and in 64-bit for gradient verification.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Entries drawn from N(0, std²).
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| T::of(normal.sample(rng))).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `y[n, out] = x[n, in] · w[in, out] + b[out]`.
pub(crate) fn linear<T: Scalar>(x: &[T], n: usize, din: usize, w: &[T], b: &[T], dout: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(n * dout);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    for i in 0..n {
        let yi = &mut y[i * dout..(i + 1) * dout];
        for (k, &xv) in x[i * din..(i + 1) * din].iter().enumerate() {
            let wk = &w[k * dout..(k + 1) * dout];
            for (yo, &wv) in yi.iter_mut().zip(wk) {
                *yo = *yo + xv * wv;
            }
        }
    }
    y
}

/// Backward of [`linear`]: accumulates `dw`, `db` and returns `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    n: usize,
    din: usize,
    dout: usize,
    w: &[T],
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); n * din];
    for i in 0..n {
        let dyi = &dy[i * dout..(i + 1) * dout];
        for (g, &d) in db.iter_mut().zip(dyi) {
            *g = *g + d;
        }
        let xi = &x[i * din..(i + 1) * din];
        let dxi = &mut dx[i * din..(i + 1) * din];
        for k in 0..din {
            let wk = &w[k * dout..(k + 1) * dout];
            let dwk = &mut dw[k * dout..(k + 1) * dout];
            let mut acc = T::zero();
            for o in 0..dout {
                acc = acc + dyi[o] * wk[o];
                dwk[o] = dwk[o] + xi[k] * dyi[o];
            }
            dxi[k] = acc;
        }
    }
    dx
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Saved statistics of a row-wise layer norm.
#[derive(Debug, Clone)]
pub(crate) struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn layer_norm<T: Scalar>(x: &[T], d: usize, g: &[T], b: &[T]) -> (Vec<T>, LayerNormCache<T>) {
    let n = x.len() / d;
    let eps = T::of(LN_EPS);
    let dt = T::of(d as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dt;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / dt;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[i * d + j] = h;
            y[i * d + j] = h * g[j] + b[j];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    d: usize,
    cache: &LayerNormCache<T>,
    g: &[T],
    dg: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let n = dy.len() / d;
    let dt = T::of(d as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxhat = vec![T::zero(); d];
    for i in 0..n {
        let dyi = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for j in 0..d {
            dg[j] = dg[j] + dyi[j] * xh[j];
            db[j] = db[j] + dyi[j];
            dxhat[j] = dyi[j] * g[j];
            m1 = m1 + dxhat[j];
            m2 = m2 + dxhat[j] * xh[j];
        }
        m1 = m1 / dt;
        m2 = m2 / dt;
        let inv = cache.inv_std[i];
        for j in 0..d {
            dx[i * d + j] = inv * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub(crate) fn gelu<T: Scalar>(u: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * u * (T::one() + (c * (u + a * u * u * u)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(u: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (u + a * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * u * u)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
