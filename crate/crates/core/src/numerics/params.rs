use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::graph::{Graph, PatchGeom, Var};
use super::prng::Prng;
use super::tensor::Tensor;
use crate::{Error, Result};

/// Handle to one tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replace every tensor by the same-named tensor from `entries`.
    ///
    /// Names and shapes must match exactly.
    pub fn load(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.tensors.len() {
            return Err(Error::Config(alloc::format!(
                "weights hold {} tensors, model expects {}",
                entries.len(),
                self.tensors.len()
            )));
        }
        for (name, t) in entries {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::Config(alloc::format!("unexpected tensor `{name}`")))?;
            if t.shape() != self.tensors[id.0].shape() {
                return Err(Error::shape("ParamSet::load", self.tensors[id.0].shape(), t.shape()));
            }
            self.tensors[id.0] = t;
        }
        Ok(())
    }
}

/// Weight initialisation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    FanBalancedUniform { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

/// Draws a tensor of the given shape under `scheme`.
pub fn init_params(prng: &mut Prng, shape: &[usize], scheme: InitScheme) -> Tensor {
    let n: usize = shape.iter().product();
    let data = match scheme {
        InitScheme::FanBalancedUniform { fan_in, fan_out } => {
            let a = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
            (0..n).map(|_| prng.uniform_in(-a, a)).collect()
        }
        InitScheme::Zeros => alloc::vec![0.0; n],
        InitScheme::Ones => alloc::vec![1.0; n],
    };
    Tensor::new(shape, data).expect("shape product matches")
}

/// A standalone dense layer: `weight [in × out]`, `bias [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.len() != weight.cols() {
            return Err(Error::shape("LinearParams", weight.shape(), bias.shape()));
        }
        Ok(LinearParams { weight, bias })
    }

    pub fn init(prng: &mut Prng, in_dim: usize, out_dim: usize) -> Self {
        LinearParams {
            weight: init_params(
                prng,
                &[in_dim, out_dim],
                InitScheme::FanBalancedUniform { fan_in: in_dim, fan_out: out_dim },
            ),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Dense layer registered in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, prng: &mut Prng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let p = LinearParams::init(prng, in_dim, out_dim);
        Linear {
            weight: ps.add(join(name, "weight"), p.weight),
            bias: ps.add(join(name, "bias"), p.bias),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }

    /// `gelu(forward(x))`.
    pub fn forward_gelu(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let y = self.forward(g, x)?;
        Ok(g.gelu(y))
    }

    pub fn params(&self, ps: &ParamSet) -> LinearParams {
        LinearParams {
            weight: ps.get(self.weight).clone(),
            bias: ps.get(self.bias).clone(),
        }
    }
}

/// Instance normalisation with trainable gain and bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InstanceNormLayer {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl InstanceNormLayer {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        InstanceNormLayer {
            gain: ps.add(join(name, "gain"), Tensor::full(&[dim], 1.0)),
            bias: ps.add(join(name, "bias"), Tensor::zeros(&[dim])),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.instance_norm(x, gain, bias)
    }
}

/// Stride-1, zero-padded 3×3 convolution. Kernel layout `[(ky, kx, c_in), c_out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3x3Params {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv3x3Params {
    pub fn new(ps: &mut ParamSet, prng: &mut Prng, name: &str, c_in: usize, c_out: usize) -> Self {
        let kernel = init_params(
            prng,
            &[9 * c_in, c_out],
            InitScheme::FanBalancedUniform { fan_in: 9 * c_in, fan_out: 9 * c_out },
        );
        Conv3x3Params {
            kernel: ps.add(join(name, "kernel"), kernel),
            bias: ps.add(join(name, "bias"), Tensor::zeros(&[c_out])),
            c_in,
            c_out,
        }
    }

    /// `x` is an `h × w` grid stored as `[h·w, c_in]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, h: usize, w: usize) -> Result<Var> {
        let c = g.value(x).cols();
        if c != self.c_in {
            return Err(Error::shape("conv3x3", self.c_in, c));
        }
        let cols = g.im2col(x, PatchGeom { h, w, c, k: 3, stride: 1, pad: 1 })?;
        let k = g.param(self.kernel);
        let b = g.param(self.bias);
        g.linear(cols, k, Some(b))
    }
}

fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        alloc::format!("{prefix}.{leaf}")
    }
}
