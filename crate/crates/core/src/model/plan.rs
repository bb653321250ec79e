use serde::{Deserialize, Serialize};

use super::config::PhnetConfig;
use crate::error::{invalid, PhnetError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMode {
    Conv2d,
    Conv3d,
    Mlpp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub mode: StageMode,
    /// Stride of the stage's first convolution, ordered `(d, h, w)`.
    pub stride: [usize; 3],
    /// Kernel of the stage's convolutions (the downsampler for MLPP stages).
    pub kernel: [usize; 3],
    pub channels_in: usize,
    pub channels_out: usize,
}

/// Number of leading in-plane-only stages for the given `(x, y, z)` spacing:
/// `round(log2(z / xy))` clamped to `[0, num_stages - 1]`, where `xy` is the
/// mean in-plane spacing.
pub fn planar_stage_count(spacing_mm: [f64; 3], num_stages: usize) -> Result<usize> {
    if spacing_mm.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return invalid(format!("spacing must be positive, got {spacing_mm:?}"));
    }
    if num_stages == 0 {
        return invalid("num_stages must be at least 1");
    }
    let in_plane = 0.5 * (spacing_mm[0] + spacing_mm[1]);
    let s = (spacing_mm[2] / in_plane).log2().round();
    Ok((s.max(0.0) as usize).min(num_stages - 1))
}

/// Stage `i > 0` halves the in-plane extents, and also depth once the
/// planar stages have been passed; planar stages use `1×3×3` kernels.
pub fn plan_stages(cfg: &PhnetConfig) -> Result<Vec<StagePlan>> {
    cfg.validate_shape()?;
    let planar = planar_stage_count(cfg.spacing_mm, cfg.num_stages)?;
    let mlpp = cfg.mlpp_stage_set();
    let mut plan = Vec::with_capacity(cfg.num_stages);
    for i in 0..cfg.num_stages {
        let stride = match i {
            0 => [1, 1, 1],
            i if i <= planar => [1, 2, 2],
            _ => [2, 2, 2],
        };
        let kernel = if i < planar { [1, 3, 3] } else { [3, 3, 3] };
        let mode = if mlpp.contains(&i) {
            StageMode::Mlpp
        } else if i < planar {
            StageMode::Conv2d
        } else {
            StageMode::Conv3d
        };
        let channels_in = if i == 0 { cfg.in_channels } else { cfg.channels(i - 1) };
        plan.push(StagePlan { mode, stride, kernel, channels_in, channels_out: cfg.channels(i) });
    }
    if let Some(w) = plan.windows(2).position(|w| w[0].mode == StageMode::Mlpp && w[1].mode != StageMode::Mlpp) {
        return Err(PhnetError::Config(format!("MLPP stage {w} is followed by a convolutional stage; MLPP stages must be deepest")));
    }
    Ok(plan)
}

/// Product of strides up to and including each stage.
pub fn cumulative_strides(plan: &[StagePlan]) -> Vec<[usize; 3]> {
    let mut acc = [1, 1, 1];
    plan.iter()
        .map(|s| {
            for a in 0..3 {
                acc[a] *= s.stride[a];
            }
            acc
        })
        .collect()
}
