//! Multi-layer permute perceptron: axial in-plane token mixing with token
//! segmentation, an auxiliary window branch fused as residual attention, and
//! through-plane mixing along depth.
//!
//! Everything in this module works on channel-last maps `(B, D, H, W, C)`.
//! [`MlppBlock::forward`] converts from and back to `(B, C, D, H, W)`.

use phnet_tensor::{Element, Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, PhnetError, Result};
use crate::nn::{Linear, Norm};
use crate::params::{Bound, ParamStore};

/// Nonlinearity applied after each pathway projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    /// Purely linear pathways; used to probe the linear contracts of the block.
    Identity,
}

impl Activation {
    fn apply<T: Element>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlppConfig {
    pub channels: usize,
    /// In-plane segment length.
    pub l_ip: usize,
    /// Side of the square auxiliary windows.
    pub l_aa: usize,
    /// Depth segment length.
    pub l_tp: usize,
    /// Number of stacked layers.
    pub layers: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl MlppConfig {
    /// Defaults for a feature map of the given depth and width: in-plane
    /// segments and windows of half the width, depth segments of half the
    /// depth (at least 1), two layers.
    pub fn for_feature_map(channels: usize, depth: usize, width: usize) -> Self {
        let l_ip = (width / 2).max(1);
        MlppConfig { channels, l_ip, l_aa: l_ip, l_tp: (depth / 2).max(1), layers: 2, activation: Activation::Gelu }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return invalid("MLPP needs at least one layer");
        }
        for (name, l) in [("l_ip", self.l_ip), ("l_aa", self.l_aa), ("l_tp", self.l_tp)] {
            if l == 0 {
                return invalid(format!("{name} must be positive"));
            }
        }
        for (name, l) in [("l_ip", self.l_ip), ("l_tp", self.l_tp)] {
            if self.channels % l != 0 {
                return invalid(format!("channels {} not divisible by {name} = {l}", self.channels));
            }
        }
        Ok(())
    }

    /// Checks that `(depth, height, width)` can be segmented.
    pub fn check_extents(&self, dims: [usize; 3]) -> Result<()> {
        let [d, h, w] = dims;
        for (axis, n, l, name) in
            [("H", h, self.l_ip, "l_ip"), ("W", w, self.l_ip, "l_ip"), ("H", h, self.l_aa, "l_aa"), ("W", w, self.l_aa, "l_aa"), ("D", d, self.l_tp, "l_tp")]
        {
            if n % l != 0 {
                return invalid(format!("axis {axis} extent {n} not divisible by {name} = {l}"));
            }
        }
        Ok(())
    }
}

/// Axis of a channel-last map along which tokens are segmented.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentAxis {
    D,
    H,
    W,
}

/// A reshape–permute–reshape that turns a `(B, D, H, W, C)` map into a
/// matrix whose rows are flattened tokens, together with its inverse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    shape: Vec<usize>,
    split: Vec<usize>,
    perm: Vec<usize>,
    rows: usize,
    cols: usize,
}

fn shape5(shape: &[usize]) -> Result<[usize; 5]> {
    match shape {
        &[b, d, h, w, c] => Ok([b, d, h, w, c]),
        _ => invalid(format!("expected a channel-last (B, D, H, W, C) map, got {shape:?}")),
    }
}

impl TokenLayout {
    /// Segments of `len` consecutive positions along `axis`, each paired with
    /// one group of `C / len` channels, so every row has `C` entries.
    pub fn segments(shape: &[usize], axis: SegmentAxis, len: usize) -> Result<Self> {
        let [b, d, h, w, c] = shape5(shape)?;
        let name = format!("{axis:?}");
        let extent = match axis {
            SegmentAxis::D => d,
            SegmentAxis::H => h,
            SegmentAxis::W => w,
        };
        if len == 0 || extent % len != 0 {
            return invalid(format!("axis {name} extent {extent} not divisible by segment length {len}"));
        }
        if c % len != 0 {
            return invalid(format!("channels {c} not divisible by segment length {len} along axis {name}"));
        }
        let (groups, g) = (len, c / len);
        let (split, perm) = match axis {
            SegmentAxis::W => (vec![b, d, h, w / len, len, groups, g], vec![0, 1, 2, 3, 5, 4, 6]),
            SegmentAxis::H => (vec![b, d, h / len, len, w, groups, g], vec![0, 1, 2, 4, 5, 3, 6]),
            SegmentAxis::D => (vec![b, d / len, len, h, w, groups, g], vec![0, 1, 3, 4, 5, 2, 6]),
        };
        Ok(TokenLayout { shape: shape.to_vec(), split, perm, rows: b * d * h * w * c / (len * g), cols: len * g })
    }

    /// Non-overlapping `side × side` in-plane windows of a single channel,
    /// each flattened to `side²` entries.
    pub fn windows(shape: &[usize], side: usize) -> Result<Self> {
        let [b, d, h, w, c] = shape5(shape)?;
        for (axis, n) in [("H", h), ("W", w)] {
            if side == 0 || n % side != 0 {
                return invalid(format!("axis {axis} extent {n} not divisible by window side {side}"));
            }
        }
        Ok(TokenLayout {
            shape: shape.to_vec(),
            split: vec![b, d, h / side, side, w / side, side, c],
            perm: vec![0, 1, 2, 4, 6, 3, 5],
            rows: b * d * h * w * c / (side * side),
            cols: side * side,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn permuted_shape(&self) -> Vec<usize> {
        self.perm.iter().map(|&a| self.split[a]).collect()
    }

    fn inverse_perm(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (i, &a) in self.perm.iter().enumerate() {
            inv[a] = i;
        }
        inv
    }

    pub fn to_tokens<T: Element>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x.shape())?;
        Ok(x.reshape(&self.split)?.permute(&self.perm)?.reshape(&[self.rows, self.cols])?)
    }

    pub fn from_tokens<T: Element>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(t.reshape(&self.permuted_shape())?.permute(&self.inverse_perm())?.reshape(&self.shape)?)
    }

    pub fn to_tokens_graph<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.check(g.shape(x))?;
        let s = g.reshape(x, &self.split)?;
        let p = g.permute(s, &self.perm)?;
        Ok(g.reshape(p, &[self.rows, self.cols])?)
    }

    pub fn from_tokens_graph<T: Element>(&self, g: &mut Graph<T>, t: Var) -> Result<Var> {
        let s = g.reshape(t, &self.permuted_shape())?;
        let p = g.permute(s, &self.inverse_perm())?;
        Ok(g.reshape(p, &self.shape)?)
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        if shape != self.shape.as_slice() {
            return invalid(format!("token layout built for {:?}, applied to {shape:?}", self.shape));
        }
        Ok(())
    }
}

/// Projections of the in-plane branch: vertical and horizontal segment
/// mixers, a per-token channel mixer and the fusion of their sum.
#[derive(Clone, Debug)]
pub struct IpMlp {
    pub vertical: Linear,
    pub horizontal: Linear,
    pub channel: Linear,
    pub fuse: Linear,
}

/// Window mixer of the auxiliary branch, `side² × side²`.
#[derive(Clone, Debug)]
pub struct AaMlp {
    pub window: Linear,
}

/// Depth segment mixer.
#[derive(Clone, Debug)]
pub struct TpMlp {
    pub depth: Linear,
}

impl IpMlp {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, channels: usize) -> Self {
        let mut fc = |part: &str| Linear::new(store, rng, &format!("{name}.{part}"), channels, channels, true);
        IpMlp { vertical: fc("vertical"), horizontal: fc("horizontal"), channel: fc("channel"), fuse: fc("fuse") }
    }

    /// `(Y_H + Y_W + Y_C) W_fuse` on a channel-last map.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        l: usize,
        act: Activation,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let y_h = segment_mix(g, p, x, &TokenLayout::segments(&shape, SegmentAxis::H, l)?, &self.vertical, act)?;
        let y_w = segment_mix(g, p, x, &TokenLayout::segments(&shape, SegmentAxis::W, l)?, &self.horizontal, act)?;
        let y_c = self.channel.forward(g, p, x)?;
        let y_c = act.apply(g, y_c);
        let sum = g.add(y_h, y_w)?;
        let sum = g.add(sum, y_c)?;
        self.fuse.forward(g, p, sum)
    }

    /// Multiply-accumulate count per pathway for one `h × w` slice.
    pub fn flops(&self, h: usize, w: usize) -> IpFlops {
        let tokens = h * w;
        IpFlops {
            vertical: self.vertical.flops(tokens),
            horizontal: self.horizontal.flops(tokens),
            channel: self.channel.flops(tokens),
            fuse: self.fuse.flops(tokens),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IpFlops {
    pub vertical: u64,
    pub horizontal: u64,
    pub channel: u64,
    pub fuse: u64,
}

impl IpFlops {
    pub fn total(&self) -> u64 {
        self.vertical + self.horizontal + self.channel + self.fuse
    }
}

fn segment_mix<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    x: Var,
    layout: &TokenLayout,
    fc: &Linear,
    act: Activation,
) -> Result<Var> {
    let tokens = layout.to_tokens_graph(g, x)?;
    let mixed = fc.forward(g, p, tokens)?;
    let mixed = act.apply(g, mixed);
    layout.from_tokens_graph(g, mixed)
}

impl AaMlp {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, side: usize) -> Self {
        AaMlp { window: Linear::new(store, rng, &format!("{name}.window"), side * side, side * side, true) }
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        side: usize,
        act: Activation,
    ) -> Result<Var> {
        let layout = TokenLayout::windows(g.shape(x), side)?;
        segment_mix(g, p, x, &layout, &self.window, act)
    }

    /// `h·w·c / side²` windows, each an `side² × side²` product.
    pub fn flops(&self, h: usize, w: usize, c: usize) -> u64 {
        let side2 = self.window.in_features;
        self.window.flops(h * w * c / side2)
    }
}

impl TpMlp {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, channels: usize) -> Self {
        TpMlp { depth: Linear::new(store, rng, &format!("{name}.depth"), channels, channels, true) }
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        l: usize,
        act: Activation,
    ) -> Result<Var> {
        let layout = TokenLayout::segments(g.shape(x), SegmentAxis::D, l)?;
        segment_mix(g, p, x, &layout, &self.depth, act)
    }

    pub fn flops(&self, d: usize, h: usize, w: usize) -> u64 {
        self.depth.flops(d * h * w)
    }
}

/// `(1 + y_a) ⊙ y_ip`.
pub fn residual_attention_fuse<T: Element>(g: &mut Graph<T>, y_ip: Var, y_a: Var) -> Result<Var> {
    if g.shape(y_ip) != g.shape(y_a) {
        return invalid(format!("fuse shapes differ: {:?} vs {:?}", g.shape(y_ip), g.shape(y_a)));
    }
    let gate = g.add_scalar(y_a, T::one());
    Ok(g.mul(gate, y_ip)?)
}

/// One layer: `u = x + F_IP(LN₁ x)`, `y = u + TP(LN₂ u)`.
#[derive(Clone, Debug)]
pub struct MlppLayer {
    pub norm1: Norm,
    pub ip: IpMlp,
    pub aa: AaMlp,
    pub norm2: Norm,
    pub tp: TpMlp,
}

impl MlppLayer {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cfg: &MlppConfig) -> Self {
        let c = cfg.channels;
        MlppLayer {
            norm1: Norm::new(store, &format!("{name}.norm1"), c),
            ip: IpMlp::new(store, rng, &format!("{name}.ip"), c),
            aa: AaMlp::new(store, rng, &format!("{name}.aa"), cfg.l_aa),
            norm2: Norm::new(store, &format!("{name}.norm2"), c),
            tp: TpMlp::new(store, rng, &format!("{name}.tp"), c),
        }
    }

    /// `x` is channel-last.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var, cfg: &MlppConfig) -> Result<Var> {
        let n1 = self.norm1.layer(g, p, x)?;
        let y_ip = self.ip.forward(g, p, n1, cfg.l_ip, cfg.activation)?;
        let y_a = self.aa.forward(g, p, n1, cfg.l_aa, cfg.activation)?;
        let f_ip = residual_attention_fuse(g, y_ip, y_a)?;
        let u = g.add(x, f_ip)?;
        let n2 = self.norm2.layer(g, p, u)?;
        let f_tp = self.tp.forward(g, p, n2, cfg.l_tp, cfg.activation)?;
        Ok(g.add(u, f_tp)?)
    }

    pub fn flops(&self, batch: usize, dims: [usize; 3], channels: usize) -> u64 {
        let [d, h, w] = dims;
        let per_slice = self.ip.flops(h, w).total() + self.aa.flops(h, w, channels);
        (batch as u64) * (d as u64 * per_slice + self.tp.flops(d, h, w))
    }
}

/// `K` stacked [`MlppLayer`]s on a `(B, C, D, H, W)` map.
#[derive(Clone, Debug)]
pub struct MlppBlock {
    pub cfg: MlppConfig,
    pub layers: Vec<MlppLayer>,
}

impl MlppBlock {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cfg: MlppConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers).map(|k| MlppLayer::new(store, rng, &format!("{name}.layer{k}"), &cfg)).collect();
        Ok(MlppBlock { cfg, layers })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let [_, c, d, h, w] = match *g.shape(x) {
            [b, c, d, h, w] => [b, c, d, h, w],
            ref s => return invalid(format!("MLPP block expects (B, C, D, H, W), got {s:?}")),
        };
        if c != self.cfg.channels {
            return invalid(format!("MLPP block built for {} channels, got {c}", self.cfg.channels));
        }
        self.cfg.check_extents([d, h, w])?;
        let mut y = g.permute(x, &[0, 2, 3, 4, 1])?;
        for layer in &self.layers {
            y = layer.forward(g, p, y, &self.cfg)?;
        }
        Ok(g.permute(y, &[0, 4, 1, 2, 3])?)
    }

    pub fn flops(&self, batch: usize, dims: [usize; 3]) -> Result<u64> {
        self.cfg.check_extents(dims)?;
        Ok(self.layers.iter().map(|l| l.flops(batch, dims, self.cfg.channels)).sum())
    }
}

/// Flattened token-mixing baseline: every channel of an `h × w` slice is
/// mixed by a dense `hw × hw` matrix, so its weights depend on resolution.
#[derive(Clone, Debug)]
pub struct VanillaTokenMixer {
    pub mix: Linear,
    pub height: usize,
    pub width: usize,
}

impl VanillaTokenMixer {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, height: usize, width: usize) -> Self {
        let n = height * width;
        VanillaTokenMixer { mix: Linear::new(store, rng, &format!("{name}.mix"), n, n, true), height, width }
    }

    /// `x` is channel-last `(B, D, H, W, C)`.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let [b, d, h, w, c] = shape5(g.shape(x))?;
        if (h, w) != (self.height, self.width) {
            return Err(PhnetError::InvalidArgument(format!(
                "token mixer built for {}×{}, got {h}×{w}",
                self.height, self.width
            )));
        }
        let t = g.reshape(x, &[b * d, h * w, c])?;
        let t = g.permute(t, &[0, 2, 1])?;
        let mixed = self.mix.forward(g, p, t)?;
        let back = g.permute(mixed, &[0, 2, 1])?;
        Ok(g.reshape(back, &[b, d, h, w, c])?)
    }

    /// Token-mixing cost for one slice with `c` channels.
    pub fn flops(&self, c: usize) -> u64 {
        self.mix.flops(c)
    }
}
