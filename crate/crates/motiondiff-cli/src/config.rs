//! The pipeline configuration file: one TOML document covering data
//! preparation, windowing, the model architecture, the noise schedule,
//! optimization, and sampling defaults. Every section is optional and
//! defaults to the reference recipe; command-line flags override their
//! corresponding keys, and the digest of the merged result goes into the
//! run manifest.

use anyhow::{anyhow, Context, Result};
use motiondiff::denoiser::DenoiserConfig;
use motiondiff::nn::PaddingMode;
use motiondiff::schedule::ScheduleConfig;
use motiondiff::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::Usage;

/// Data preparation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Pipeline frame rate; motion is resampled and audio features are
    /// extracted at this rate.
    pub frame_rate: f64,
    /// Joints whose name contains one of these (case-insensitive) keep their
    /// first-frame pose instead of entering the feature vector.
    pub frozen_patterns: Vec<String>,
    /// MFCC coefficients in the audio conditioning stack.
    pub mfcc_coeffs: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            frame_rate: 30.0,
            frozen_patterns: Vec::new(),
            mfcc_coeffs: 5,
        }
    }
}

/// Training-window extraction settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowingSection {
    pub window: usize,
    pub hop: usize,
}

impl Default for WindowingSection {
    fn default() -> Self {
        Self {
            window: 120,
            hop: 30,
        }
    }
}

/// Architecture hyperparameters; data dimensions are filled in from the
/// feature store when the network is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_blocks: usize,
    pub layers_per_block: usize,
    pub dilation_cycle: usize,
    pub n_heads: usize,
    pub attention_width: usize,
    pub feedforward_width: usize,
    pub step_embed_dim: usize,
    pub max_relative_distance: usize,
    pub padding: PaddingMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        let r = DenoiserConfig::with_dims(1, 1);
        Self {
            n_blocks: r.n_blocks,
            layers_per_block: r.layers_per_block,
            dilation_cycle: r.dilation_cycle,
            n_heads: r.n_heads,
            attention_width: r.attention_width,
            feedforward_width: r.feedforward_width,
            step_embed_dim: r.step_embed_dim,
            max_relative_distance: r.max_relative_distance,
            padding: r.padding,
        }
    }
}

impl ModelSection {
    pub fn to_denoiser(&self, input_dim: usize, cond_dim: usize) -> DenoiserConfig {
        DenoiserConfig {
            n_blocks: self.n_blocks,
            layers_per_block: self.layers_per_block,
            dilation_cycle: self.dilation_cycle,
            n_heads: self.n_heads,
            attention_width: self.attention_width,
            feedforward_width: self.feedforward_width,
            input_dim,
            cond_dim,
            step_embed_dim: self.step_embed_dim,
            max_relative_distance: self.max_relative_distance,
            padding: self.padding,
        }
    }
}

/// Sampling defaults, each overridable by its flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub gamma: f64,
    pub temperature: f64,
    pub frames: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            temperature: 1.0,
            frames: 120,
        }
    }
}

/// The complete merged configuration of a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataSection,
    pub windowing: WindowingSection,
    pub model: ModelSection,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sample: SampleSection,
}

impl PipelineConfig {
    /// Loads a TOML file, or the defaults when no path is given. Syntax and
    /// schema problems are usage errors.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text)
            .map_err(|e| anyhow!(Usage(format!("config {}: {e}", path.display()))))
    }

    /// Hex SHA-256 of the canonical JSON form; identifies the merged
    /// configuration in manifests and reports.
    pub fn digest(&self) -> String {
        let canonical =
            serde_json::to_vec(self).expect("configuration serializes infallibly");
        let mut hasher = Sha256::new();
        hasher.update(&canonical);
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
