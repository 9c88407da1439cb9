//! Parameterized layers that register themselves in a [`ParamStore`].

use rand::Rng;

use super::{orthogonal_init, Bound, Graph, ParamId, ParamStore, Tensor, TensorError, Var};

/// Fully connected layer `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Orthogonally initialized weight with the given gain; zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        let weight = store.add(
            format!("{name}.weight"),
            orthogonal_init(in_dim, out_dim, gain, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let h = g.matmul(x, p.var(self.weight))?;
        g.add_bias(h, p.var(self.bias))
    }
}

/// Affine parameters of a layer normalization over the last axis.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self, TensorError> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[dim], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, TensorError> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}

/// Square-kernel convolution with zero padding.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Weight is orthogonal over the flattened `[out, in * k * k]` view.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        let flat = orthogonal_init(out_channels, in_channels * kernel * kernel, gain, rng);
        let weight = store.add(
            format!("{name}.weight"),
            flat.reshape(&[out_channels, in_channels, kernel, kernel])?,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, TensorError> {
        g.conv2d(x, p.var(self.weight), p.var(self.bias), self.stride, self.pad)
    }
}
