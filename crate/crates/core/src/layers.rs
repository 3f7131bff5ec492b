use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{fan_in_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// `k×k` convolution with "same"-style padding `k/2`.
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add(format!("{name}.weight"), fan_in_uniform(&[cout, cin, k, k], cin * k * k, rng));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    pub fn zeroed(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let weight = ps.add(format!("{name}.weight"), Tensor::zeros(&[cout, cin, k, k]));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(ps, self.weight), g.param(ps, self.bias));
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Stride-2, kernel-2 transposed convolution: exact 2× spatial upsampling.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Upsample {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        let weight = ps.add(format!("{name}.weight"), fan_in_uniform(&[cin, cout, 2, 2], cin, rng));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(ps, self.weight), g.param(ps, self.bias));
        g.conv_transpose2d(x, w, Some(b), 2)
    }
}

/// Layer norm over the channel axis of the `B×N×C` view of a `B×C×H×W` map.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl ChannelNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, eps: f64) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            eps,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let (_, _, h, w) = g.value(x).dims4()?;
        let seq = g.to_seq(x)?;
        let (gamma, beta) = (g.param(ps, self.gamma), g.param(ps, self.beta));
        let n = g.layer_norm(seq, gamma, beta, self.eps)?;
        g.from_seq(n, h, w)
    }
}
