//! Parameterized layers shared by the encoder and decoder.
//!
//! Layers only hold [`ParamId`]s and static shape information; values live in
//! a [`ParamStore`], so one model definition works in either precision.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::tensor::{cst, from_vec, Element, Tensor};

/// Standard deviation of the truncated normal used for linear and bias-table weights.
pub const TRUNC_NORMAL_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// Zero-mean normal truncated to ±2σ.
pub fn trunc_normal<T: Element, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break cst(z * std);
            }
        })
        .collect();
    from_vec(shape, data)
}

/// He-style normal with `std = sqrt(2 / fan_in)`.
pub fn fan_in_normal<T: Element, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| cst(rng.sample::<f64, _>(StandardNormal) * std)).collect();
    from_vec(shape, data)
}

pub fn zeros<T: Element>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape)
}

pub fn ones<T: Element>(shape: &[usize]) -> Tensor<T> {
    Tensor::ones(shape)
}

/// `y = x·W + b` over the last axis. Weight is stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), trunc_normal(rng, &[in_dim, out_dim], TRUNC_NORMAL_STD));
        let bias = store.add(format!("{name}.bias"), zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, x: &Var<T>) -> Var<T> {
        let y = g.matmul(x, &g.param(self.weight));
        let rank = y.shape().len();
        let mut bshape = vec![1; rank];
        bshape[rank - 1] = self.out_dim;
        let b = g.reshape(&g.param(self.bias), &bshape);
        g.add(&y, &b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), ones(&[dim])),
            beta: store.add(format!("{name}.bias"), zeros(&[dim])),
            dim,
        }
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, x: &Var<T>) -> Var<T> {
        g.layer_norm(x, &g.param(self.gamma), &g.param(self.beta), LN_EPS)
    }
}

/// Square-kernel 2-D convolution on NCHW tensors. Padding keeps the spatial
/// size for stride 1 (`pad = dilation·(k−1)/2`).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        dilation: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        let per_group = in_ch / groups;
        let fan_in = per_group * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_normal(rng, &[out_ch, per_group, kernel, kernel], fan_in),
        );
        let bias = Some(store.add(format!("{name}.bias"), zeros(&[out_ch])));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            dilation,
            groups,
        }
    }

    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, x: &Var<T>) -> Var<T> {
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, &g.param(self.weight), b.as_ref(), 1, self.padding(), self.dilation, self.groups)
    }
}

/// Kernel-2 stride-2 transposed convolution (2× upsampling).
#[derive(Debug, Clone)]
pub struct ConvTranspose2x2 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ConvTranspose2x2 {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), fan_in_normal(rng, &[in_ch, out_ch, 2, 2], in_ch)),
            bias: store.add(format!("{name}.bias"), zeros(&[out_ch])),
            in_ch,
            out_ch,
        }
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, x: &Var<T>) -> Var<T> {
        g.conv_transpose2x2(x, &g.param(self.weight), Some(&g.param(self.bias)))
    }
}

/// Converts `[B, H, W, C]` to `[B, C, H, W]`.
pub fn nhwc_to_nchw<T: Element>(g: &Graph<T>, x: &Var<T>) -> Var<T> {
    g.permute(x, &[0, 3, 1, 2])
}

/// Converts `[B, C, H, W]` to `[B, H, W, C]`.
pub fn nchw_to_nhwc<T: Element>(g: &Graph<T>, x: &Var<T>) -> Var<T> {
    g.permute(x, &[0, 2, 3, 1])
}
