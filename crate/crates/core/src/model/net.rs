use phnet_tensor::{Element, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::PhnetConfig;
use super::plan::{cumulative_strides, plan_stages, StageMode, StagePlan};
use crate::error::{invalid, PhnetError, Result};
use crate::mlpp::{MlppBlock, MlppConfig};
use crate::nn::{BlockSpec, Conv, ConvGeometry, ConvTranspose, Norm, ResidualBlock, SeparableConv};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Debug)]
pub enum EncoderStage {
    Conv { blocks: Vec<ResidualBlock> },
    /// Strided Conv-IN-ReLU downsampler followed by an MLPP block.
    Mlpp { down: Conv, norm: Norm, block: MlppBlock },
}

/// Upsample, concatenate the skip, project back to the skip's width, then
/// separable convolution.
#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub up: ConvTranspose,
    pub merge: Conv,
    pub conv: SeparableConv,
}

#[derive(Clone, Debug)]
pub struct PhNet<T: Element> {
    pub cfg: PhnetConfig,
    pub plan: Vec<StagePlan>,
    pub params: ParamStore<T>,
    pub encoder: Vec<EncoderStage>,
    /// Ordered from the deepest stage upward.
    pub decoder: Vec<DecoderStage>,
    pub head: Conv,
}

fn div_dims(dims: [usize; 3], by: [usize; 3]) -> [usize; 3] {
    [dims[0] / by[0], dims[1] / by[1], dims[2] / by[2]]
}

const AXES: [&str; 3] = ["D", "H", "W"];

/// MLPP settings for a stage whose feature map at the training patch size
/// has extents `dims`.
fn mlpp_config(cfg: &PhnetConfig, channels: usize, dims: [usize; 3]) -> MlppConfig {
    let defaults = MlppConfig::for_feature_map(channels, dims[0], dims[2]);
    let l_ip = cfg.mlpp.l_ip.unwrap_or(defaults.l_ip);
    MlppConfig {
        channels,
        l_ip,
        l_aa: cfg.mlpp.l_aa.unwrap_or(l_ip),
        l_tp: cfg.mlpp.l_tp.unwrap_or(defaults.l_tp),
        layers: cfg.mlpp.layers,
        activation: cfg.mlpp.activation,
    }
}

impl<T: Element> PhNet<T> {
    /// Builds and initializes the network; identical seeds give bitwise
    /// identical parameters.
    pub fn build(cfg: &PhnetConfig, seed: u64) -> Result<Self> {
        let plan = plan_stages(cfg)?;
        let cum = cumulative_strides(&plan);
        let patch = cfg.patch_dhw;
        for (i, c) in cum.iter().enumerate() {
            for a in 0..3 {
                if patch[a] % c[a] != 0 {
                    return Err(PhnetError::Config(format!(
                        "patch extent {} on axis {} is not divisible by the cumulative stride {} of stage {i}",
                        patch[a], AXES[a], c[a]
                    )));
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut encoder = Vec::with_capacity(plan.len());
        for (i, stage) in plan.iter().enumerate() {
            let name = format!("encoder.{i}");
            encoder.push(match stage.mode {
                StageMode::Conv2d | StageMode::Conv3d => {
                    let blocks = (0..cfg.blocks_per_stage)
                        .map(|b| {
                            let spec = BlockSpec {
                                c_in: if b == 0 { stage.channels_in } else { stage.channels_out },
                                c_out: stage.channels_out,
                                kernel: stage.kernel,
                                stride: if b == 0 { stage.stride } else { [1, 1, 1] },
                            };
                            ResidualBlock::new(&mut store, &mut rng, &format!("{name}.block{b}"), spec)
                        })
                        .collect();
                    EncoderStage::Conv { blocks }
                }
                StageMode::Mlpp => {
                    let geom = ConvGeometry::same_strided(stage.kernel, stage.stride);
                    let down = Conv::new(&mut store, &mut rng, &format!("{name}.down"), stage.channels_in, stage.channels_out, geom, false);
                    let norm = Norm::new(&mut store, &format!("{name}.down_norm"), stage.channels_out);
                    let dims = div_dims(patch, cum[i]);
                    let mcfg = mlpp_config(cfg, stage.channels_out, dims);
                    mcfg.validate().map_err(|e| PhnetError::Config(format!("stage {i}: {e}")))?;
                    mcfg.check_extents(dims).map_err(|e| PhnetError::Config(format!("stage {i} at patch size: {e}")))?;
                    let block = MlppBlock::new(&mut store, &mut rng, &format!("{name}.mlpp"), mcfg)?;
                    EncoderStage::Mlpp { down, norm, block }
                }
            });
        }
        let mut decoder = Vec::new();
        for i in (1..plan.len()).rev() {
            let (c_deep, c_skip) = (plan[i].channels_out, plan[i - 1].channels_out);
            let name = format!("decoder.{}", i - 1);
            let up_geom = ConvGeometry::new(plan[i].stride, plan[i].stride, [0, 0, 0]);
            decoder.push(DecoderStage {
                up: ConvTranspose::new(&mut store, &mut rng, &format!("{name}.up"), c_deep, c_skip, up_geom, false),
                merge: Conv::new(&mut store, &mut rng, &format!("{name}.merge"), 2 * c_skip, c_skip, ConvGeometry::pointwise(), false),
                conv: SeparableConv::new(&mut store, &mut rng, &format!("{name}.conv"), c_skip, c_skip),
            });
        }
        let head = Conv::new(&mut store, &mut rng, "head", plan[0].channels_out, cfg.num_classes, ConvGeometry::pointwise(), true);
        Ok(PhNet { cfg: cfg.clone(), plan, params: store, encoder, decoder, head })
    }

    pub fn count_params(&self) -> usize {
        self.params.count_scalars()
    }

    /// Same architecture with parameters converted to another element type.
    pub fn cast<U: Element>(&self) -> PhNet<U> {
        PhNet {
            cfg: self.cfg.clone(),
            plan: self.plan.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
        }
    }

    /// Verifies that spatial extents `(d, h, w)` can pass through every stage.
    pub fn check_extents(&self, dims: [usize; 3]) -> Result<()> {
        let cum = cumulative_strides(&self.plan);
        for (i, c) in cum.iter().enumerate() {
            for a in 0..3 {
                if dims[a] == 0 || dims[a] % c[a] != 0 {
                    return invalid(format!(
                        "input extent {} on axis {} is not divisible by the cumulative stride {} of stage {i}",
                        dims[a], AXES[a], c[a]
                    ));
                }
            }
            if let EncoderStage::Mlpp { block, .. } = &self.encoder[i] {
                block.cfg.check_extents(div_dims(dims, *c)).map_err(|e| PhnetError::InvalidArgument(format!("stage {i}: {e}")))?;
            }
        }
        Ok(())
    }

    /// Logits `(B, num_classes, D, H, W)` for input `(B, in_channels, D, H, W)`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 5 || shape[1] != self.cfg.in_channels {
            return invalid(format!("expected input (B, {}, D, H, W), got {shape:?}", self.cfg.in_channels));
        }
        self.check_extents([shape[2], shape[3], shape[4]])?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for stage in &self.encoder {
            h = match stage {
                EncoderStage::Conv { blocks } => {
                    for b in blocks {
                        h = b.forward(g, p, h)?;
                    }
                    h
                }
                EncoderStage::Mlpp { down, norm, block } => {
                    let d = down.forward(g, p, h)?;
                    let d = norm.instance(g, p, d)?;
                    let d = g.relu(d);
                    block.forward(g, p, d)?
                }
            };
            skips.push(h);
        }
        skips.pop();
        for stage in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            let up = stage.up.forward(g, p, h)?;
            let cat = g.concat(&[up, skip], 1)?;
            let merged = stage.merge.forward(g, p, cat)?;
            h = stage.conv.forward(g, p, merged)?;
        }
        self.head.forward(g, p, h)
    }

    /// Forward pass without recording gradients for the parameters.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }

    /// Multiply-accumulate FLOPs (two per multiply-add) of every layer for an
    /// input of `batch × (d, h, w)`; normalization, activations and bias
    /// additions are not counted.
    pub fn flop_breakdown(&self, batch: usize, dims: [usize; 3]) -> Result<Vec<(String, u64)>> {
        self.check_extents(dims)?;
        let mut out = Vec::new();
        let mut cur = dims;
        let mut enc_dims = Vec::new();
        for (i, stage) in self.encoder.iter().enumerate() {
            match stage {
                EncoderStage::Conv { blocks } => {
                    for (b, block) in blocks.iter().enumerate() {
                        out.push((format!("encoder.{i}.block{b}"), block.flops(batch, cur)?));
                        cur = block.output_dims(cur)?;
                    }
                }
                EncoderStage::Mlpp { down, block, .. } => {
                    out.push((format!("encoder.{i}.down"), down.flops(batch, cur)?));
                    cur = down.output_dims(cur)?;
                    out.push((format!("encoder.{i}.mlpp"), block.flops(batch, cur)?));
                }
            }
            enc_dims.push(cur);
        }
        for (j, stage) in self.decoder.iter().enumerate() {
            let level = self.encoder.len() - 2 - j;
            let name = format!("decoder.{level}");
            out.push((format!("{name}.up"), stage.up.flops(batch, cur)));
            cur = stage.up.output_dims(cur)?;
            debug_assert_eq!(cur, enc_dims[level]);
            out.push((format!("{name}.merge"), stage.merge.flops(batch, cur)?));
            out.push((format!("{name}.conv"), stage.conv.flops(batch, cur)?));
        }
        out.push(("head".into(), self.head.flops(batch, cur)?));
        Ok(out)
    }

    pub fn count_flops(&self, batch: usize, dims: [usize; 3]) -> Result<u64> {
        Ok(self.flop_breakdown(batch, dims)?.iter().map(|(_, f)| f).sum())
    }
}
