use serde::{Deserialize, Serialize};

use crate::error::{PhnetError, Result};
use crate::mlpp::Activation;

/// Per-network MLPP settings. Segment lengths left unset are derived per
/// stage from the feature map the block sees at the training patch size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlppSettings {
    #[serde(default)]
    pub l_ip: Option<usize>,
    #[serde(default)]
    pub l_aa: Option<usize>,
    #[serde(default)]
    pub l_tp: Option<usize>,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default)]
    pub activation: Activation,
}

fn default_layers() -> usize {
    2
}

impl Default for MlppSettings {
    fn default() -> Self {
        MlppSettings { l_ip: None, l_aa: None, l_tp: None, layers: 2, activation: Activation::Gelu }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhnetConfig {
    pub num_stages: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Voxel spacing in millimetres, ordered `(x, y, z)`; `z` is the
    /// through-plane axis.
    pub spacing_mm: [f64; 3],
    /// Training patch extents ordered `(depth, height, width)`.
    pub patch_dhw: [usize; 3],
    /// Encoder stages built as MLPP stages; `None` selects the deepest two.
    #[serde(default)]
    pub mlpp_stages: Option<Vec<usize>>,
    #[serde(default)]
    pub mlpp: MlppSettings,
    #[serde(default = "default_blocks")]
    pub blocks_per_stage: usize,
}

fn default_blocks() -> usize {
    2
}

impl Default for PhnetConfig {
    fn default() -> Self {
        PhnetConfig {
            num_stages: 5,
            base_channels: 32,
            max_channels: 320,
            in_channels: 1,
            num_classes: 2,
            spacing_mm: [0.74, 0.74, 5.0],
            patch_dhw: [28, 224, 224],
            mlpp_stages: None,
            mlpp: MlppSettings::default(),
            blocks_per_stage: 2,
        }
    }
}

impl PhnetConfig {
    /// The small four-stage network used for desk-scale synthetic runs.
    pub fn small(num_classes: usize, spacing_mm: [f64; 3], patch_dhw: [usize; 3]) -> Self {
        PhnetConfig {
            num_stages: 4,
            base_channels: 8,
            max_channels: 64,
            in_channels: 1,
            num_classes,
            spacing_mm,
            patch_dhw,
            mlpp_stages: None,
            mlpp: MlppSettings::default(),
            blocks_per_stage: 2,
        }
    }

    pub fn mlpp_stage_set(&self) -> Vec<usize> {
        match &self.mlpp_stages {
            Some(s) => s.clone(),
            None => (self.num_stages.saturating_sub(2)..self.num_stages).collect(),
        }
    }

    pub fn channels(&self, stage: usize) -> usize {
        (self.base_channels << stage.min(30)).min(self.max_channels)
    }

    pub(crate) fn validate_shape(&self) -> Result<()> {
        let bad = |msg: String| Err(PhnetError::Config(msg));
        if self.num_stages == 0 {
            return bad("num_stages must be at least 1".into());
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return bad(format!("channel plan base {} / cap {} is invalid", self.base_channels, self.max_channels));
        }
        if self.in_channels == 0 || self.num_classes < 2 {
            return bad(format!("need in_channels ≥ 1 and num_classes ≥ 2, got {} and {}", self.in_channels, self.num_classes));
        }
        if self.blocks_per_stage == 0 {
            return bad("blocks_per_stage must be at least 1".into());
        }
        if self.spacing_mm.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(PhnetError::InvalidArgument(format!("spacing must be positive, got {:?}", self.spacing_mm)));
        }
        if let Some(stages) = &self.mlpp_stages {
            if let Some(s) = stages.iter().find(|&&s| s >= self.num_stages) {
                return bad(format!("MLPP stage {s} outside 0..{}", self.num_stages));
            }
        }
        Ok(())
    }
}
