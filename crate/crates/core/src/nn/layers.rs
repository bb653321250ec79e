//! Parameterized layers: each holds the ids of its weights in a
//! [`ParamStore`] and evaluates against the graph handles in a [`Bound`].

use phnet_tensor::{Element, Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{conv3d, conv_transpose3d, ConvGeometry};
use super::norm::{instance_norm, layer_norm};
use crate::error::{invalid, Result};
use crate::params::{fan_in_uniform, Bound, ParamId, ParamStore};

pub const NORM_EPS: f64 = 1e-5;

/// Uniform bound `sqrt(6 / fan_in)` for layers followed by a rectifier.
pub const CONV_GAIN: f64 = 2.449_489_742_783_178;
pub const LINEAR_GAIN: f64 = 1.0;

/// Affine map along the last axis: `y = x Wᵀ + b` with `W` of shape `(out, in)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
    ) -> Self {
        let w = fan_in_uniform(rng, &[out_features, in_features], in_features, LINEAR_GAIN);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_features])));
        Linear { weight, bias, in_features, out_features }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        linear(g, x, p[self.weight], self.bias.map(|b| p[b]))
    }

    /// Multiply-adds times two for `applications` input vectors.
    pub fn flops(&self, applications: usize) -> u64 {
        2 * (self.in_features * self.out_features * applications) as u64
    }
}

/// Functional form of [`Linear`]; `x` has shape `(..., in)`.
pub fn linear<T: Element>(g: &mut Graph<T>, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let w_shape = g.shape(weight).to_vec();
    let (Some(&inp), [out, w_in]) = (shape.last(), w_shape.as_slice()) else {
        return invalid(format!("linear: bad shapes x {shape:?}, weight {w_shape:?}"));
    };
    let (out, w_in) = (*out, *w_in);
    if inp != w_in {
        return invalid(format!("linear: input has {inp} features, weight {w_shape:?} expects {w_in}"));
    }
    let rows = shape.iter().product::<usize>() / inp.max(1);
    let flat = g.reshape(x, &[rows, inp])?;
    let wt = g.permute(weight, &[1, 0])?;
    let mut y = g.matmul(flat, wt)?;
    if let Some(b) = bias {
        y = g.add_bias(y, b, 1)?;
    }
    let mut out_shape = shape;
    *out_shape.last_mut().expect("rank checked above") = out;
    Ok(g.reshape(y, &out_shape)?)
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        geom: ConvGeometry,
        bias: bool,
    ) -> Self {
        let [kd, kh, kw] = geom.kernel;
        let fan_in = c_in * geom.kernel_volume();
        let w = fan_in_uniform(rng, &[c_out, c_in, kd, kh, kw], fan_in, CONV_GAIN);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Conv { weight, bias, geom, c_in, c_out }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        conv3d(g, x, p[self.weight], self.bias.map(|b| p[b]), self.geom)
    }

    pub fn output_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        self.geom.output_dims(dims)
    }

    pub fn flops(&self, batch: usize, dims: [usize; 3]) -> Result<u64> {
        let out: usize = self.output_dims(dims)?.iter().product();
        Ok(2 * (batch * self.c_out * self.c_in * self.geom.kernel_volume() * out) as u64)
    }
}

/// Transposed convolution with weight `(c_in, c_out, kd, kh, kw)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvTranspose {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        geom: ConvGeometry,
        bias: bool,
    ) -> Self {
        let [kd, kh, kw] = geom.kernel;
        let w = fan_in_uniform(rng, &[c_in, c_out, kd, kh, kw], c_in * geom.kernel_volume(), CONV_GAIN);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        ConvTranspose { weight, bias, geom, c_in, c_out }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        conv_transpose3d(g, x, p[self.weight], self.bias.map(|b| p[b]), self.geom)
    }

    pub fn output_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        self.geom.transpose_output_dims(dims)
    }

    /// Every input voxel scatters a `c_out × k` block per input channel.
    pub fn flops(&self, batch: usize, dims: [usize; 3]) -> u64 {
        let inp: usize = dims.iter().product();
        2 * (batch * self.c_in * self.c_out * self.geom.kernel_volume() * inp) as u64
    }
}

/// Per-channel affine normalization parameters shared by instance and layer norm.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub eps: f64,
}

impl Norm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[channels]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Norm { gamma, beta, channels, eps: NORM_EPS }
    }

    /// Instance normalization of a `(B, C, D, H, W)` map.
    pub fn instance<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        instance_norm(g, x, p[self.gamma], p[self.beta], self.eps)
    }

    /// Layer normalization over the last axis.
    pub fn layer<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        layer_norm(g, x, p[self.gamma], p[self.beta], self.eps)
    }
}

/// Shape-level description of a residual block, used by planners and tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

/// `relu(IN(conv₂(relu(IN(conv₁ x)))) + skip(x))`, where the skip is a
/// 1×1×1 projection whenever channels or extents change.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub norm1: Norm,
    pub conv2: Conv,
    pub norm2: Norm,
    pub skip: Option<Conv>,
}

impl ResidualBlock {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, spec: BlockSpec) -> Self {
        let BlockSpec { c_in, c_out, kernel, stride } = spec;
        let conv1 = Conv::new(store, rng, &format!("{name}.conv1"), c_in, c_out, ConvGeometry::same_strided(kernel, stride), false);
        let norm1 = Norm::new(store, &format!("{name}.norm1"), c_out);
        let conv2 = Conv::new(store, rng, &format!("{name}.conv2"), c_out, c_out, ConvGeometry::same(kernel), false);
        let norm2 = Norm::new(store, &format!("{name}.norm2"), c_out);
        let skip = (c_in != c_out || stride != [1, 1, 1]).then(|| {
            let geom = ConvGeometry::new([1, 1, 1], stride, [0, 0, 0]);
            Conv::new(store, rng, &format!("{name}.skip"), c_in, c_out, geom, false)
        });
        ResidualBlock { conv1, norm1, conv2, norm2, skip }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, p, x)?;
        let h = self.norm1.instance(g, p, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, p, h)?;
        let h = self.norm2.instance(g, p, h)?;
        let s = match &self.skip {
            Some(proj) => proj.forward(g, p, x)?,
            None => x,
        };
        let sum = g.add(h, s)?;
        Ok(g.relu(sum))
    }

    pub fn output_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        self.conv1.output_dims(dims)
    }

    pub fn flops(&self, batch: usize, dims: [usize; 3]) -> Result<u64> {
        let out = self.output_dims(dims)?;
        let mut total = self.conv1.flops(batch, dims)? + self.conv2.flops(batch, out)?;
        if let Some(skip) = &self.skip {
            total += skip.flops(batch, dims)?;
        }
        Ok(total)
    }
}

/// In-plane `(1,3,3)` then through-plane `(3,1,1)` convolution, each followed
/// by instance norm and ReLU.
#[derive(Clone, Debug)]
pub struct SeparableConv {
    pub in_plane: Conv,
    pub norm1: Norm,
    pub through_plane: Conv,
    pub norm2: Norm,
}

impl SeparableConv {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, c_in: usize, c_out: usize) -> Self {
        let in_plane = Conv::new(store, rng, &format!("{name}.in_plane"), c_in, c_out, ConvGeometry::same([1, 3, 3]), false);
        let norm1 = Norm::new(store, &format!("{name}.norm1"), c_out);
        let through_plane =
            Conv::new(store, rng, &format!("{name}.through_plane"), c_out, c_out, ConvGeometry::same([3, 1, 1]), false);
        let norm2 = Norm::new(store, &format!("{name}.norm2"), c_out);
        SeparableConv { in_plane, norm1, through_plane, norm2 }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.in_plane.forward(g, p, x)?;
        let h = self.norm1.instance(g, p, h)?;
        let h = g.relu(h);
        let h = self.through_plane.forward(g, p, h)?;
        let h = self.norm2.instance(g, p, h)?;
        Ok(g.relu(h))
    }

    pub fn flops(&self, batch: usize, dims: [usize; 3]) -> Result<u64> {
        Ok(self.in_plane.flops(batch, dims)? + self.through_plane.flops(batch, dims)?)
    }
}
