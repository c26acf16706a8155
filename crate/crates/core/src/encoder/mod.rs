//! Compact post-norm transformer encoder with hand-written backward pass.
//!
//! Both the masked-language generator and the discriminator use this trunk.
//! Batches are packed: only real (non-pad) tokens are materialized, so pad
//! positions take no part in attention and cost nothing.

mod kernels;
mod pass;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::scalar::Scalar;

pub use pass::{ForwardPass, HiddenStates, Mode, PackedBatch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
}

impl EncoderConfig {
    /// 256-wide embeddings, 4 layers of 4 heads, 256-wide feed-forward.
    pub fn standard(vocab_size: usize, max_len: usize) -> Self {
        EncoderConfig {
            embed_dim: 256,
            n_layers: 4,
            n_heads: 4,
            ff_dim: 256,
            max_len,
            vocab_size,
            dropout_rate: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ff_dim", self.ff_dim),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Normal(0, std) truncated to ±2 std.
    pub fn truncated_normal(shape: &[usize], std: f64, rng: &mut SeedRng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break S::from_f64_lossy(z * std);
                }
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill_zero(&mut self) {
        self.data.fill(S::zero());
    }
}

/// A fixed, ordered collection of named parameter tensors.
pub trait ParamSet<S: Scalar> {
    fn tensors(&self) -> Vec<(String, &Tensor<S>)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>>;

    fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.fill_zero();
        }
    }

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }
}

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<S> {
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
    pub ln1_gamma: Tensor<S>,
    pub ln1_beta: Tensor<S>,
    pub ff_in_w: Tensor<S>,
    pub ff_in_b: Tensor<S>,
    pub ff_out_w: Tensor<S>,
    pub ff_out_b: Tensor<S>,
    pub ln2_gamma: Tensor<S>,
    pub ln2_beta: Tensor<S>,
}

impl<S: Scalar> LayerParams<S> {
    fn build(
        cfg: &EncoderConfig,
        mut weight: impl FnMut(&[usize]) -> Tensor<S>,
        zero_scales: bool,
    ) -> Self {
        let d = cfg.embed_dim;
        let f = cfg.ff_dim;
        let scale = |shape: &[usize]| {
            if zero_scales {
                Tensor::zeros(shape)
            } else {
                Tensor::filled(shape, S::one())
            }
        };
        LayerParams {
            wq: weight(&[d, d]),
            bq: Tensor::zeros(&[d]),
            wk: weight(&[d, d]),
            bk: Tensor::zeros(&[d]),
            wv: weight(&[d, d]),
            bv: Tensor::zeros(&[d]),
            wo: weight(&[d, d]),
            bo: Tensor::zeros(&[d]),
            ln1_gamma: scale(&[d]),
            ln1_beta: Tensor::zeros(&[d]),
            ff_in_w: weight(&[d, f]),
            ff_in_b: Tensor::zeros(&[f]),
            ff_out_w: weight(&[f, d]),
            ff_out_b: Tensor::zeros(&[d]),
            ln2_gamma: scale(&[d]),
            ln2_beta: Tensor::zeros(&[d]),
        }
    }

    fn named(&self) -> [(&'static str, &Tensor<S>); 16] {
        [
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("ff.in_w", &self.ff_in_w),
            ("ff.in_b", &self.ff_in_b),
            ("ff.out_w", &self.ff_out_w),
            ("ff.out_b", &self.ff_out_b),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
        ]
    }

    fn all_mut(&mut self) -> [&mut Tensor<S>; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.ff_in_w,
            &mut self.ff_in_b,
            &mut self.ff_out_w,
            &mut self.ff_out_b,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
        ]
    }
}

/// Learnable parameters of the shared trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<S> {
    pub token_embedding: Tensor<S>,
    pub position_embedding: Tensor<S>,
    pub embed_ln_gamma: Tensor<S>,
    pub embed_ln_beta: Tensor<S>,
    pub layers: Vec<LayerParams<S>>,
}

impl<S: Scalar> EncoderParams<S> {
    /// Truncated-normal weights, zero biases, unit layer-norm scales.
    pub fn init(cfg: &EncoderConfig, rng: &mut SeedRng) -> Self {
        let d = cfg.embed_dim;
        let token_embedding = Tensor::truncated_normal(&[cfg.vocab_size, d], INIT_STD, rng);
        let position_embedding = Tensor::truncated_normal(&[cfg.max_len, d], INIT_STD, rng);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams::build(cfg, |s| Tensor::truncated_normal(s, INIT_STD, rng), false))
            .collect();
        EncoderParams {
            token_embedding,
            position_embedding,
            embed_ln_gamma: Tensor::filled(&[d], S::one()),
            embed_ln_beta: Tensor::zeros(&[d]),
            layers,
        }
    }

    /// All-zero tensors with this config's shapes (gradient accumulators).
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let d = cfg.embed_dim;
        EncoderParams {
            token_embedding: Tensor::zeros(&[cfg.vocab_size, d]),
            position_embedding: Tensor::zeros(&[cfg.max_len, d]),
            embed_ln_gamma: Tensor::zeros(&[d]),
            embed_ln_beta: Tensor::zeros(&[d]),
            layers: (0..cfg.n_layers)
                .map(|_| LayerParams::build(cfg, Tensor::zeros, true))
                .collect(),
        }
    }

    pub fn check_shapes(&self, cfg: &EncoderConfig) -> Result<()> {
        let expected = Self::zeros(cfg);
        let got = self.tensors();
        let want = expected.tensors();
        if got.len() != want.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                want.len(),
                got.len()
            )));
        }
        for ((name, t), (_, e)) in got.iter().zip(&want) {
            if t.shape != e.shape {
                return Err(Error::Config(format!(
                    "{name}: shape {:?} does not match config {:?}",
                    t.shape, e.shape
                )));
            }
        }
        Ok(())
    }
}

impl<S: Scalar> ParamSet<S> for EncoderParams<S> {
    fn tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![
            ("embed.token".to_string(), &self.token_embedding),
            ("embed.position".to_string(), &self.position_embedding),
            ("embed.ln.gamma".to_string(), &self.embed_ln_gamma),
            ("embed.ln.beta".to_string(), &self.embed_ln_beta),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(
                layer
                    .named()
                    .into_iter()
                    .map(|(n, t)| (format!("layer{i}.{n}"), t)),
            );
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.embed_ln_gamma,
            &mut self.embed_ln_beta,
        ];
        for layer in &mut self.layers {
            out.extend(layer.all_mut());
        }
        out
    }
}

#[cfg(test)]
mod tests;
