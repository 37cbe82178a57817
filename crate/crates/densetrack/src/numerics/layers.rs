//! Parameter-holding layer wrappers around the raw kernels.

use crate::error::Result;
use crate::numerics::element::Element;
use crate::numerics::ops::attention::multi_head_sdpa;
use crate::numerics::ops::conv::{conv2d, ConvSpec};
use crate::numerics::ops::dense::{layer_norm, linear};
use crate::numerics::ops::pointwise::scale_lastdim;
use crate::numerics::params::InitCtx;
use crate::numerics::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const WEIGHT_STD: f64 = 0.02;
pub const LAYER_SCALE_INIT: f64 = 1e-6;

pub struct Linear<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

impl<E: Element> Linear<E> {
    pub fn new(ctx: &mut InitCtx<E>, path: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: ctx.trunc_normal(&format!("{path}.weight"), &[out_dim, in_dim], WEIGHT_STD),
            bias: ctx.zeros(&format!("{path}.bias"), &[out_dim]),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Tensor<E> {
        linear(x, &self.weight, &self.bias)
    }
}

pub struct Conv2d<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
    pub spec: ConvSpec,
}

impl<E: Element> Conv2d<E> {
    pub fn new(
        ctx: &mut InitCtx<E>,
        path: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        spec: ConvSpec,
    ) -> Self {
        let cg = in_c / spec.groups;
        Conv2d {
            weight: ctx.trunc_normal(&format!("{path}.weight"), &[out_c, cg, k, k], WEIGHT_STD),
            bias: ctx.zeros(&format!("{path}.bias"), &[out_c]),
            spec,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Tensor<E> {
        conv2d(x, &self.weight, &self.bias, self.spec).expect("conv2d: validated at build time")
    }
}

/// Layer norm over the last axis (callers permute to channels-last).
pub struct LayerNorm<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
}

impl<E: Element> LayerNorm<E> {
    pub fn new(ctx: &mut InitCtx<E>, path: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: ctx.ones(&format!("{path}.gamma"), &[dim]),
            beta: ctx.zeros(&format!("{path}.beta"), &[dim]),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Tensor<E> {
        layer_norm(x, &self.gamma, &self.beta, LAYER_NORM_EPS)
    }
}

/// Per-channel residual-branch scaling, initialized small.
pub struct LayerScale<E: Element> {
    pub gamma: Tensor<E>,
}

impl<E: Element> LayerScale<E> {
    pub fn new(ctx: &mut InitCtx<E>, path: &str, dim: usize) -> Self {
        LayerScale {
            gamma: ctx.constant(&format!("{path}.gamma"), &[dim], LAYER_SCALE_INIT),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Tensor<E> {
        scale_lastdim(x, &self.gamma)
    }
}

/// Self-attention with learned Q/K/V/out projections.
pub struct MultiHeadAttention<E: Element> {
    pub wq: Linear<E>,
    pub wk: Linear<E>,
    pub wv: Linear<E>,
    pub wo: Linear<E>,
    pub heads: usize,
}

impl<E: Element> MultiHeadAttention<E> {
    pub fn new(ctx: &mut InitCtx<E>, path: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(crate::error::Error::config(format!(
                "attention dim {dim} not divisible by heads {heads}"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(ctx, &format!("{path}.q"), dim, dim),
            wk: Linear::new(ctx, &format!("{path}.k"), dim, dim),
            wv: Linear::new(ctx, &format!("{path}.v"), dim, dim),
            wo: Linear::new(ctx, &format!("{path}.out"), dim, dim),
            heads,
        })
    }

    /// Batched self-attention over [B, S, D].
    pub fn forward(&self, x: &Tensor<E>) -> Tensor<E> {
        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);
        let att = multi_head_sdpa(&q, &k, &v, self.heads).expect("attention: shape checked");
        self.wo.forward(&att)
    }

    /// Single-sequence form: [L, D] -> [L, D].
    pub fn forward_tokens(&self, x: &Tensor<E>) -> Tensor<E> {
        let l = x.shape()[0];
        let d = x.shape()[1];
        let y = self.forward(&x.reshape(&[1, l, d]));
        y.reshape(&[l, d])
    }
}
