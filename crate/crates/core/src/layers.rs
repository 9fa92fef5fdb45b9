//! Small parameterised building blocks shared by the network modules.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Float, Graph, ParamId, ParamStore, Tensor, Var};

/// Fan-in scaled uniform initialisation, bound `sqrt(1 / fan_in)`.
pub(crate) fn fan_in_uniform<T: Float>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::uniform(shape, (1.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    /// Square-kernel convolution with bias; padding keeps "same" extents at stride 1.
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(&[out_c, in_c, kernel, kernel], fan_in, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), fan_in_uniform(&[out_c], fan_in, rng))?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, bound: &[Var], x: Var) -> Result<Var> {
        g.conv2d(x, bound[self.weight.0], Some(bound[self.bias.0]), self.stride, self.pad)
    }

    /// As [`forward`](Self::forward) but padding by edge replication, so a
    /// spatially constant input stays constant.
    pub fn forward_edge<T: Float>(&self, g: &mut Graph<T>, bound: &[Var], x: Var) -> Result<Var> {
        let x = g.pad_edge(x, self.pad)?;
        g.conv2d(x, bound[self.weight.0], Some(bound[self.bias.0]), self.stride, 0)
    }
}

/// Dense layer `y = x·W + b` over row vectors.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_f: usize,
        out_f: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(&[in_f, out_f], in_f, rng))?;
        let bias = store.add(format!("{name}.bias"), fan_in_uniform(&[out_f], in_f, rng))?;
        Ok(Self { weight, bias })
    }

    /// All-zero weight and bias, so the layer starts out as the zero map.
    pub fn zeroed<T: Float>(store: &mut ParamStore<T>, name: &str, in_f: usize, out_f: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[in_f, out_f]))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_f]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, bound: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, bound[self.weight.0])?;
        g.add_bias(y, bound[self.bias.0])
    }
}
