//! Differentiable numeric core: tensors, kernels with analytic backward
//! passes, parameter storage and a finite-difference gradient checker.

pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_directional, grad_check_sampled, GradCheckReport, DEFAULT_EPS};
pub use kernels::{layer_norm, linear, linear_backward, sigmoid, sinusoidal_embed, softmax, softmax_backward};
pub use params::{Init, LayerNorm, Linear, Mlp, MlpCache, ParamId, ParamStore};
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for a `(seed, stream)` pair.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
