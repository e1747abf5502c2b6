use std::path::Path;

use anyhow::{bail, Context};
use cfsg_core::crf::CrfParams;
use cfsg_core::imaging::{DomainShiftParams, PreprocessParams, SceneSpec};
use cfsg_core::network::ArchitectureConfig;
use cfsg_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

/// Whole-pipeline configuration. Every section has defaults; only
/// `version` must be present in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    #[serde(default)]
    pub architecture: ArchitectureConfig,
    #[serde(default = "desk_training")]
    pub training: TrainConfig,
    #[serde(default = "PreprocessParams::desk")]
    pub preprocessing: PreprocessParams,
    #[serde(default)]
    pub crf: CrfParams,
    #[serde(default)]
    pub mapping: MappingConfig,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
}

fn desk_training() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_epochs: 12,
        ..TrainConfig::default()
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            architecture: ArchitectureConfig::desk(),
            training: desk_training(),
            preprocessing: PreprocessParams::desk(),
            crf: CrfParams::default(),
            mapping: MappingConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MappingConfig {
    pub tile_size: usize,
    pub overlap: usize,
    pub gsd_mm_per_px: f64,
    /// Prescription grid sizes in pixels.
    pub grids: Vec<usize>,
    /// Weed pixels a cell needs before it is sprayed.
    pub min_weed_pixels: usize,
    pub heatmap_sigma: f32,
    /// Refine stitched ROI predictions with the CRF.
    pub use_crf: bool,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            tile_size: 64,
            overlap: 32,
            gsd_mm_per_px: 1.78,
            grids: vec![100, 50, 10],
            min_weed_pixels: 1,
            heatmap_sigma: 8.0,
            use_crf: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub scene: SceneSpec,
    pub domain_shift: DomainShiftParams,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            scene: SceneSpec::default(),
            domain_shift: DomainShiftParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| cfsg_core::Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.version != CONFIG_VERSION {
            bail!(cfsg_core::Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.architecture.validate()?;
        self.training.validate()?;
        self.synthetic.scene.validate()?;
        self.crf.validate()?;
        let m = &self.mapping;
        if m.tile_size == 0 || m.tile_size % 32 != 0 || m.overlap >= m.tile_size {
            bail!(cfsg_core::Error::Config("mapping tile_size must be a multiple of 32 above overlap".into()));
        }
        if !(m.gsd_mm_per_px > 0.0) {
            bail!(cfsg_core::Error::Config("mapping gsd_mm_per_px must be positive".into()));
        }
        Ok(())
    }
}
