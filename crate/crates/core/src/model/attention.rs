//! Multi-head scaled dot-product attention with per-head projections.

use rand_chacha::ChaCha8Rng;

use crate::nn::{normal_param, INIT_STD};
use crate::scalar::{cast, Scalar};
use crate::tensor::{Tape, Tensor, TensorError};

pub struct AttentionHead<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
}

pub struct MultiHeadAttention<T> {
    pub heads: Vec<AttentionHead<T>>,
    pub wo: Tensor<T>,
    d_head: usize,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn init(d_model: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let d_head = d_model / n_heads;
        let heads = (0..n_heads)
            .map(|_| AttentionHead {
                wq: normal_param(vec![d_model, d_head], INIT_STD, rng),
                wk: normal_param(vec![d_model, d_head], INIT_STD, rng),
                wv: normal_param(vec![d_model, d_head], INIT_STD, rng),
            })
            .collect();
        MultiHeadAttention {
            heads,
            wo: normal_param(vec![d_model, d_model], INIT_STD, rng),
            d_head,
        }
    }

    /// Queries come from `q_input`, keys and values from `kv_input`
    /// (identical for self-attention). `mask` entries of 1 block attention.
    pub fn forward(
        &self,
        tape: &Tape<T>,
        q_input: &Tensor<T>,
        kv_input: &Tensor<T>,
        mask: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>, TensorError> {
        let scale = cast::<T>(1.0 / (self.d_head as f64).sqrt());
        let mut head_outputs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let q = tape.matmul(q_input, &head.wq)?;
            let k = tape.matmul(kv_input, &head.wk)?;
            let v = tape.matmul(kv_input, &head.wv)?;
            let scores = tape.scalar_mul(&tape.matmul(&q, &tape.transpose(&k)?)?, scale)?;
            let scores = match mask {
                Some(m) => tape.masked_fill(&scores, m, cast::<T>(-1e30))?,
                None => scores,
            };
            let weights = tape.softmax(&scores, 1)?;
            head_outputs.push(tape.matmul(&weights, &v)?);
        }
        let refs: Vec<&Tensor<T>> = head_outputs.iter().collect();
        let merged = tape.concat(&refs, 1)?;
        tape.matmul(&merged, &self.wo)
    }

    pub fn deep_clone(&self) -> Self {
        MultiHeadAttention {
            heads: self
                .heads
                .iter()
                .map(|h| AttentionHead {
                    wq: h.wq.deep_clone(),
                    wk: h.wk.deep_clone(),
                    wv: h.wv.deep_clone(),
                })
                .collect(),
            wo: self.wo.deep_clone(),
            d_head: self.d_head,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, h) in self.heads.iter().enumerate() {
            f(format!("{prefix}.h{i}.wq"), &h.wq);
            f(format!("{prefix}.h{i}.wk"), &h.wk);
            f(format!("{prefix}.h{i}.wv"), &h.wv);
        }
        f(format!("{prefix}.wo"), &self.wo);
    }
}

/// Mask with ones strictly above the diagonal: position `s` attends only to
/// positions `<= s`.
pub fn causal_mask<T: Scalar>(len: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            data[i * len + j] = T::one();
        }
    }
    Tensor::from_parts(vec![len, len], data, false)
}
