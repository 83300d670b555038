//! Run configuration, read from a sectioned TOML file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Split, SynthConfig};
use crate::decoder::{AblationFlags, DecoderConfig};
use crate::error::{Error, Result};
use crate::features::FeatureNetConfig;
use crate::losses::{LossConfig, LossWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossSection,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub io: IoConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Query pairs per clip.
    pub n_queries: usize,
    pub channels: usize,
    pub layers: usize,
    pub stride: usize,
    pub temporal_encoding: bool,
    pub max_frames: usize,
    pub spatial_encoding_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let f = FeatureNetConfig::default();
        let d = DecoderConfig::default();
        ModelConfig {
            n_queries: d.n_queries,
            channels: d.channels,
            layers: d.layers,
            stride: f.stride,
            temporal_encoding: f.temporal_encoding,
            max_frames: f.max_frames,
            spatial_encoding_scale: f.spatial_encoding_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub lambda6: f64,
    pub no_object_weight: f64,
    /// Contact dilation radius in feature cells.
    pub contact_radius: usize,
    pub dice_eps: f64,
    /// Hand-to-object cross attention.
    pub h2o_attn: bool,
    /// Object-to-hand cross attention.
    pub o2h_attn: bool,
    /// When false the contact terms are dropped (λ3 = λ6 = 0).
    pub contact_loss: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        let c = LossConfig::default();
        LossSection {
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            lambda4: w.lambda4,
            lambda5: w.lambda5,
            lambda6: w.lambda6,
            no_object_weight: w.no_object_weight,
            contact_radius: c.contact_radius,
            dice_eps: c.dice_eps,
            h2o_attn: true,
            o2h_attn: true,
            contact_loss: true,
        }
    }
}

impl LossSection {
    pub fn loss_config(&self) -> LossConfig {
        let mut weights = LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            lambda4: self.lambda4,
            lambda5: self.lambda5,
            lambda6: self.lambda6,
            no_object_weight: self.no_object_weight,
        };
        if !self.contact_loss {
            weights.lambda3 = 0.0;
            weights.lambda6 = 0.0;
        }
        LossConfig {
            weights,
            contact_radius: self.contact_radius,
            dice_eps: self.dice_eps,
        }
    }

    pub fn flags(&self) -> AblationFlags {
        AblationFlags {
            h2o_attn: self.h2o_attn,
            o2h_attn: self.o2h_attn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iterations: usize,
    /// Clips per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    /// Iterations between progress log lines.
    pub log_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            iterations: 2000,
            batch_size: 1,
            seed: 0,
            log_every: 50,
        }
    }
}

/// Where clips come from: a directory on disk, or the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory; when unset the synthetic spec is generated in memory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub n_clips: usize,
    pub split: Split,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            n_clips: 4,
            split: Split::Train,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub checkpoint_path: PathBuf,
    pub output_dir: PathBuf,
    pub score_thresh: f64,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            checkpoint_path: PathBuf::from("hoistlab.ckpt"),
            output_dir: PathBuf::from("out"),
            score_thresh: 0.5,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            Error::Config(e.message().replace('\n', " ").trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn feature_config(&self) -> FeatureNetConfig {
        FeatureNetConfig {
            channels: self.model.channels,
            stride: self.model.stride,
            temporal_encoding: self.model.temporal_encoding,
            max_frames: self.model.max_frames,
            spatial_encoding_scale: self.model.spatial_encoding_scale,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            n_queries: self.model.n_queries,
            channels: self.model.channels,
            layers: self.model.layers,
            h2o_attn: self.loss.h2o_attn,
            o2h_attn: self.loss.o2h_attn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.n_queries == 0 || m.channels < 4 || m.layers == 0 {
            return Err(Error::Config(
                "model needs n_queries >= 1, channels >= 4, layers >= 1".into(),
            ));
        }
        if m.stride == 0 || !m.stride.is_power_of_two() {
            return Err(Error::Config(format!("model.stride must be a power of two, got {}", m.stride)));
        }
        let lc = self.loss.loss_config();
        lc.weights.validate()?;
        if lc.contact_radius == 0 {
            return Err(Error::Config("loss.contact_radius must be at least 1".into()));
        }
        if !(lc.dice_eps > 0.0) {
            return Err(Error::Config("loss.dice_eps must be positive".into()));
        }
        let o = &self.optim;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::Config("optim.learning_rate must be positive".into()));
        }
        if !(o.weight_decay >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config("optim: need weight_decay >= 0, betas in [0, 1), eps > 0".into()));
        }
        if o.batch_size == 0 {
            return Err(Error::Config("optim.batch_size must be at least 1".into()));
        }
        if self.data.path.is_none() {
            self.data.synth.validate()?;
            if self.data.n_clips == 0 {
                return Err(Error::Config("data.n_clips must be at least 1".into()));
            }
        }
        if !(self.io.score_thresh > 0.0 && self.io.score_thresh < 1.0) {
            return Err(Error::Config("io.score_thresh must lie in (0, 1)".into()));
        }
        Ok(())
    }
}
