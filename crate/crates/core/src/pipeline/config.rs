//! Run configuration: per-model hyperparameter blocks (desk and paper
//! presets), sampling controls, and training-loop settings. Serialized as
//! TOML; any field can be overridden with repeated `--set key.path=value`
//! flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ar::ArConfig;
use crate::audio::mel::MelConfig;
use crate::clvp::ClvpConfig;
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::vqvae::VqvaeConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub n_candidates: usize,
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub repetition_penalty: f64,
    /// Decode and score candidates in parallel (identical results either way).
    pub parallel_candidates: bool,
    pub griffin_lim_iters: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            n_candidates: 16,
            top_k: 1,
            top_p: 0.8,
            temperature: 0.8,
            repetition_penalty: 2.0,
            parallel_candidates: true,
            griffin_lim_iters: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub log_interval: usize,
    pub checkpoint_interval: usize,
    pub vqvae_steps: usize,
    pub ar_steps: usize,
    pub clvp_steps: usize,
    pub diffusion_steps: usize,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    /// Fixed training window (mel frames, multiple of 4) for the
    /// spectrogram-level stages.
    pub crop_frames: usize,
    pub parallel_batch: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 4,
            log_interval: 25,
            checkpoint_interval: 250,
            vqvae_steps: 450,
            ar_steps: 500,
            clvp_steps: 350,
            diffusion_steps: 1300,
            finetune_steps: 350,
            finetune_lr: 5e-4,
            crop_frames: 64,
            parallel_batch: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusSection {
    pub n_items: usize,
    pub n_speakers: usize,
    pub seed: u64,
    pub min_secs: f64,
    pub max_secs: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            n_items: 8,
            n_speakers: 2,
            seed: 7,
            min_secs: 0.6,
            max_secs: 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub mel: MelConfig,
    pub vqvae: VqvaeConfig,
    pub ar: ArConfig,
    pub clvp: ClvpConfig,
    pub diffusion: DiffusionConfig,
    pub sampling: SamplingConfig,
    pub training: TrainingConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PipelineConfig {
    /// Small dimensions that train and verify on a laptop CPU.
    pub fn desk() -> Self {
        PipelineConfig {
            seed: 7,
            corpus: CorpusSection::default(),
            mel: MelConfig::default(),
            vqvae: VqvaeConfig::desk(),
            ar: ArConfig::desk(),
            clvp: ClvpConfig::desk(),
            diffusion: DiffusionConfig::desk(),
            sampling: SamplingConfig::default(),
            training: TrainingConfig::default(),
        }
    }

    /// Full-scale hyperparameters as published; configuration values, not a
    /// reproduction target.
    pub fn paper() -> Self {
        PipelineConfig {
            vqvae: VqvaeConfig::paper(),
            ar: ArConfig::paper(),
            clvp: ClvpConfig::paper(),
            diffusion: DiffusionConfig::paper(),
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset {other}"))),
        }
    }

    /// Cross-model consistency: one codebook feeds every model.
    pub fn validate(&self) -> Result<()> {
        let k = self.vqvae.codebook_size;
        if self.ar.code_vocab != k || self.clvp.code_vocab != k || self.diffusion.code_vocab != k {
            return Err(Error::Config(format!(
                "codebook size mismatch: vqvae {k}, ar {}, clvp {}, diffusion {}",
                self.ar.code_vocab, self.clvp.code_vocab, self.diffusion.code_vocab
            )));
        }
        if self.vqvae.n_mels != self.mel.n_mels || self.diffusion.n_mels != self.mel.n_mels {
            return Err(Error::Config("n_mels mismatch across sections".into()));
        }
        if self.training.crop_frames % 4 != 0 {
            return Err(Error::Config("training.crop_frames must be a multiple of 4".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&body)
    }

    pub fn from_toml(body: &str) -> Result<Self> {
        toml::from_str(body).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    /// Apply `key.path=value` overrides on the TOML representation.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        if sets.is_empty() {
            return Ok(self.clone());
        }
        let mut value: toml::Value =
            toml::from_str(&self.to_toml()).expect("round trip through toml");
        for set in sets {
            let (path, raw) = set
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{set}' is not key=value")))?;
            let parsed = parse_toml_scalar(raw.trim());
            let mut cursor = &mut value;
            let parts: Vec<&str> = path.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = cursor
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("'{path}' does not address a table")))?;
                if i + 1 == parts.len() {
                    if !table.contains_key(*part) {
                        return Err(Error::Config(format!("unknown config key '{path}'")));
                    }
                    table.insert(part.to_string(), parsed.clone());
                } else {
                    cursor = table
                        .get_mut(*part)
                        .ok_or_else(|| Error::Config(format!("unknown config key '{path}'")))?;
                }
            }
        }
        let text = toml::to_string(&value).expect("toml value serializes");
        Self::from_toml(&text)
    }
}

fn parse_toml_scalar(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}
