use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ModelParams, ParamId};
use super::tensor::Tensor;
use crate::error::Result;

/// Affine map `x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ModelParams,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_gain(params, name, fan_in, fan_out, 1.0, rng)
    }

    pub fn with_gain<R: Rng + ?Sized>(
        params: &mut ModelParams,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = params.insert_glorot(format!("{name}.w"), fan_in, fan_out, gain, rng)?;
        let bias = params.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]))?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    /// Re-binds to parameters already present in `params` under `name`.
    pub fn bind(params: &ModelParams, name: &str) -> Option<Self> {
        let weight = params.id(&format!("{name}.w"))?;
        let bias = params.id(&format!("{name}.b"))?;
        let shape = params.get(weight).shape();
        Some(Self {
            weight,
            bias,
            fan_in: shape[0],
            fan_out: shape[1],
        })
    }

    pub fn forward(&self, g: &mut Graph, params: &ModelParams, x: Var) -> Result<Var> {
        let w = g.param(params, self.weight);
        let b = g.param(params, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Stack of [`Linear`] layers with ReLU between them (not after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`.
    pub fn new<R: Rng + ?Sized>(params: &mut ModelParams, name: &str, dims: &[usize], rng: &mut R) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(params, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn bind(params: &ModelParams, name: &str) -> Option<Self> {
        let mut layers = Vec::new();
        while let Some(l) = Linear::bind(params, &format!("{name}.{}", layers.len())) {
            layers.push(l);
        }
        (!layers.is_empty()).then_some(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, params: &ModelParams, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.relu(h)?;
            }
            h = layer.forward(g, params, h)?;
        }
        Ok(h)
    }
}
