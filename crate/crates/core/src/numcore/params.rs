//! Named parameter storage and the small layers built on top of it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{self, LayerNormCache};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `[-a, a]`.
    Uniform(f64),
    /// Xavier/Glorot uniform for a `[fan_in, fan_out]` weight.
    Xavier,
}

/// Ordered, named set of learnable tensors.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(a) => (0..n).map(|_| rng.gen_range(-a..=a)).collect(),
            Init::Xavier => {
                let fan_in = shape[0] as f64;
                let fan_out = if shape.len() > 1 { shape[1..].iter().product::<usize>() as f64 } else { 1.0 };
                let a = (6.0 / (fan_in + fan_out)).sqrt();
                (0..n).map(|_| rng.gen_range(-a..=a)).collect()
            }
        };
        self.push(name, Tensor::from_fn(shape, |i| data[i]))
    }

    pub fn push(&mut self, name: impl Into<String>, mut t: Tensor) -> ParamId {
        t.grad_mut();
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        self.tensors[id.0].data()
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.tensors[id.0].grad_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces every tensor's values with those of `other`, which must have
    /// the same names and shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Config("parameter names differ from the checkpoint".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::Config(format!("parameter shape {:?} != {:?}", dst.shape(), src.shape())));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Affine map `x W + b` over rows of width `in_dim`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = ps.add(format!("{name}.weight"), &[in_dim, out_dim], init, rng);
        let b = bias.then(|| ps.add(format!("{name}.bias"), &[out_dim], Init::Zeros, rng));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, ps: &ParamStore, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len() % self.in_dim, 0);
        kernels::affine(x, self.in_dim, ps.data(self.w), self.out_dim, self.b.map(|b| ps.data(b)))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, ps: &mut ParamStore, x: &[f64], dy: &[f64]) -> Vec<f64> {
        let dx = kernels::affine_grad_input(dy, ps.data(self.w), self.in_dim, self.out_dim);
        self.backward_params(ps, x, dy);
        dx
    }

    pub fn backward_params(&self, ps: &mut ParamStore, x: &[f64], dy: &[f64]) {
        kernels::affine_grad_params(x, self.in_dim, dy, self.out_dim, ps.grad_mut(self.w), None);
        if let Some(b) = self.b {
            let db = ps.grad_mut(b);
            for row in dy.chunks_exact(self.out_dim) {
                for (g, d) in db.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), &[dim], Init::Const(1.0), rng);
        let beta = ps.add(format!("{name}.beta"), &[dim], Init::Zeros, rng);
        Self { gamma, beta, dim }
    }

    pub fn forward(&self, ps: &ParamStore, x: &[f64]) -> (Vec<f64>, LayerNormCache) {
        kernels::layer_norm_rows(x, self.dim, ps.data(self.gamma), ps.data(self.beta))
    }

    pub fn backward(&self, ps: &mut ParamStore, cache: &LayerNormCache, dy: &[f64]) -> Vec<f64> {
        let gamma = ps.data(self.gamma).to_vec();
        let mut dgamma = vec![0.0; self.dim];
        let mut dbeta = vec![0.0; self.dim];
        let dx = kernels::layer_norm_rows_backward(dy, cache, &gamma, self.dim, &mut dgamma, &mut dbeta);
        add_into(ps.grad_mut(self.gamma), &dgamma);
        add_into(ps.grad_mut(self.beta), &dbeta);
        dx
    }
}

/// Two affine maps with a ReLU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl Mlp {
    /// `zero_out` zero-initializes the second layer so the block starts as
    /// a constant-zero map.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        zero_out: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fc1 = Linear::new(ps, &format!("{name}.fc1"), in_dim, hidden, true, Init::Xavier, rng);
        let init2 = if zero_out { Init::Zeros } else { Init::Xavier };
        let fc2 = Linear::new(ps, &format!("{name}.fc2"), hidden, out_dim, true, init2, rng);
        Self { fc1, fc2 }
    }

    pub fn forward(&self, ps: &ParamStore, x: &[f64]) -> (Vec<f64>, MlpCache) {
        let pre = self.fc1.forward(ps, x);
        let hidden = kernels::relu(&pre);
        let y = self.fc2.forward(ps, &hidden);
        (y, MlpCache { pre, hidden })
    }

    pub fn backward(&self, ps: &mut ParamStore, x: &[f64], cache: &MlpCache, dy: &[f64]) -> Vec<f64> {
        let dh = self.fc2.backward(ps, &cache.hidden, dy);
        let dpre = kernels::relu_backward(&cache.pre, &dh);
        self.fc1.backward(ps, x, &dpre)
    }
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
