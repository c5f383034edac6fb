//! TOML run configuration shared by every CLI subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{FeatureBank, SegmentEncoder, SpeakerConfound, SyntheticEncoder};
use crate::error::{Error, Result};
use crate::heads::LossWeights;
use crate::preprocess::PreprocessConfig;
use crate::synth::{SynthConfig, SynthTruth};
use crate::trainer::{Ablation, ModelConfig, TrainConfig, TrainParams};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    /// Separate evaluation manifest; training data is scored when absent.
    pub eval_manifest: Option<PathBuf>,
    pub feature_bank: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Synthetic,
    Bank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Output width of the synthetic encoder.
    pub dim: usize,
    pub seed: u64,
    /// Ground-truth file whose speaker offsets are added to synthetic features.
    pub confound: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Synthetic,
            dim: 32,
            seed: 42,
            confound: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Meta {
    pub tool_version: String,
}

impl Default for Meta {
    fn default() -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub train: TrainParams,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub preprocess: PreprocessConfig,
    pub encoder: EncoderConfig,
    pub ablation: Ablation,
    pub synth: SynthConfig,
    pub meta: Meta,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Every field written out, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            train: self.train,
            model: self.model,
            loss: self.loss,
            preprocess: self.preprocess.clone(),
            ablation: self.ablation,
        }
    }

    pub fn build_encoder(&self, au_count: usize, keypoint_count: usize) -> Result<Box<dyn SegmentEncoder>> {
        match self.encoder.kind {
            EncoderKind::Synthetic => {
                let mut enc = SyntheticEncoder::new(self.encoder.seed, self.encoder.dim, au_count, keypoint_count);
                if let Some(path) = &self.encoder.confound {
                    let confound: SpeakerConfound = SynthTruth::read(path)?.confound;
                    enc = enc.with_confound(confound)?;
                }
                Ok(Box::new(enc))
            }
            EncoderKind::Bank => {
                let path = self.paths.feature_bank.as_ref().ok_or_else(|| {
                    Error::Config("encoder.kind = \"bank\" requires paths.feature_bank".into())
                })?;
                Ok(Box::new(FeatureBank::load(path, None)?))
            }
        }
    }
}
