//! Small layer building blocks over [`ParamSet`]s.

use rand::Rng;

use crate::diffnum::{Bound, Graph, ParamSet, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Affine map over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Registers `prefix/w` (uniform in ±1/sqrt(fan_in)) and `prefix/b` (zeros).
    pub fn create<R: Rng + ?Sized>(p: &mut ParamSet, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        p.insert(format!("{prefix}/w"), Tensor::uniform(&[fan_in, fan_out], bound, rng));
        p.insert(format!("{prefix}/b"), Tensor::zeros(&[fan_out]));
        Self::named(prefix, fan_in, fan_out)
    }

    /// Same as [`Linear::create`] but with all-zero weights.
    pub fn create_zeroed(p: &mut ParamSet, prefix: &str, fan_in: usize, fan_out: usize) -> Self {
        p.insert(format!("{prefix}/w"), Tensor::zeros(&[fan_in, fan_out]));
        p.insert(format!("{prefix}/b"), Tensor::zeros(&[fan_out]));
        Self::named(prefix, fan_in, fan_out)
    }

    fn named(prefix: &str, fan_in: usize, fan_out: usize) -> Self {
        Self { weight: format!("{prefix}/w"), bias: format!("{prefix}/b"), fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.get(&self.weight), Some(p.get(&self.bias)))
    }
}

/// Learnable per-feature gain and offset after [`Graph::layer_norm`].
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: String,
    offset: String,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn create(p: &mut ParamSet, prefix: &str, dim: usize) -> Self {
        p.insert(format!("{prefix}/gain"), Tensor::full(&[dim], 1.0));
        p.insert(format!("{prefix}/offset"), Tensor::zeros(&[dim]));
        Self { gain: format!("{prefix}/gain"), offset: format!("{prefix}/offset") }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.layer_norm(x, Self::EPS);
        let y = g.mul(y, p.get(&self.gain))?;
        g.add(y, p.get(&self.offset))
    }
}

/// Unpadded strided temporal convolution over `[batch, time, channels]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    weight: String,
    bias: String,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    pub fn create<R: Rng + ?Sized>(
        p: &mut ParamSet,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        p.insert(format!("{prefix}/w"), Tensor::uniform(&[kernel, c_in, c_out], bound, rng));
        p.insert(format!("{prefix}/b"), Tensor::zeros(&[c_out]));
        Self { weight: format!("{prefix}/w"), bias: format!("{prefix}/b"), kernel, stride }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv1d(x, p.get(&self.weight), self.stride)?;
        g.add(y, p.get(&self.bias))
    }
}

/// Stack of [`Linear`] layers with an activation between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
    norms: Vec<Option<LayerNorm>>,
    act: Activation,
}

impl Mlp {
    /// `dims` lists every width including input and output. When
    /// `zero_last` is set the output layer starts at exactly zero.
    pub fn create<R: Rng + ?Sized>(
        p: &mut ParamSet,
        prefix: &str,
        dims: &[usize],
        act: Activation,
        layer_norm: bool,
        zero_last: bool,
        rng: &mut R,
    ) -> Self {
        let n = dims.len() - 1;
        let mut layers = Vec::with_capacity(n);
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let name = format!("{prefix}/l{i}");
            let last = i + 1 == n;
            layers.push(if last && zero_last {
                Linear::create_zeroed(p, &name, dims[i], dims[i + 1])
            } else {
                Linear::create(p, &name, dims[i], dims[i + 1], rng)
            });
            norms.push((layer_norm && !last).then(|| LayerNorm::create(p, &format!("{prefix}/ln{i}"), dims[i + 1])));
        }
        Self { layers, norms, act }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, (layer, norm)) in self.layers.iter().zip(&self.norms).enumerate() {
            x = layer.forward(g, p, x)?;
            if let Some(ln) = norm {
                x = ln.forward(g, p, x)?;
            }
            if i + 1 < n {
                x = self.act.apply(g, x);
            }
        }
        Ok(x)
    }
}
