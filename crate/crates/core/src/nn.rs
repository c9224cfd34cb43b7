//! Shared parameter structs and initializers for model components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::{cast, Scalar};
use crate::tensor::{Tape, Tensor, TensorError};

/// Layer-norm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-6;

/// Init std for embeddings and projection weights.
pub const INIT_STD: f64 = 0.02;

/// Normal-init trainable tensor. Values are drawn in f64 and cast, so f32
/// and f64 models share the same parameter stream for a given rng state.
pub fn normal_param<T: Scalar>(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0f64, std).expect("valid std");
    let data: Vec<T> = (0..n).map(|_| cast(dist.sample(rng))).collect();
    Tensor::param(shape, data).expect("consistent shape")
}

pub fn zeros_param<T: Scalar>(shape: Vec<usize>) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![T::zero(); n]).expect("consistent shape")
}

pub fn ones_param<T: Scalar>(shape: Vec<usize>) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![T::one(); n]).expect("consistent shape")
}

/// Derives an independent rng stream from a base seed and a label.
pub fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Pre-sublayer layer norm with learnable gain, no bias.
pub struct LayerNormGain<T> {
    pub gain: Tensor<T>,
}

impl<T: Scalar> LayerNormGain<T> {
    pub fn new(dim: usize) -> Self {
        LayerNormGain {
            gain: ones_param(vec![dim]),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        tape.layer_norm(x, &self.gain, LN_EPS)
    }

    pub fn deep_clone(&self) -> Self {
        LayerNormGain {
            gain: self.gain.deep_clone(),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.gain"), &self.gain);
    }
}

/// Two-layer relu feed-forward: `relu(x W1 + b1) W2 + b2`.
pub struct FeedForward<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn init(d_model: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            w1: normal_param(vec![d_model, d_ff], INIT_STD, rng),
            b1: zeros_param(vec![d_ff]),
            w2: normal_param(vec![d_ff, d_model], INIT_STD, rng),
            b2: zeros_param(vec![d_model]),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let h = tape.add(&tape.matmul(x, &self.w1)?, &self.b1)?;
        let h = tape.relu(&h)?;
        tape.add(&tape.matmul(&h, &self.w2)?, &self.b2)
    }

    pub fn param_count(&self) -> usize {
        self.w1.numel() + self.b1.numel() + self.w2.numel() + self.b2.numel()
    }

    pub fn deep_clone(&self) -> Self {
        FeedForward {
            w1: self.w1.deep_clone(),
            b1: self.b1.deep_clone(),
            w2: self.w2.deep_clone(),
            b2: self.b2.deep_clone(),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }
}
