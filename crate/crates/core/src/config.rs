use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pdlab_autograd::LrSchedule;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::objectives::LossConfig;
use crate::synth::DataConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Full fine-tuning with InfoNCE, no prompts.
    Baseline,
    /// Prompts and encoders optimized jointly with the stage-2 objective.
    OneStage,
    /// Prompt tuning on a frozen backbone, then encoder fine-tuning with
    /// frozen prompts.
    TwoStage,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Baseline, Strategy::OneStage, Strategy::TwoStage];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::OneStage => "one_stage",
            Strategy::TwoStage => "two_stage",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "baseline" => Ok(Strategy::Baseline),
            "one_stage" => Ok(Strategy::OneStage),
            "two_stage" => Ok(Strategy::TwoStage),
            _ => Err(Error::UnknownStrategy(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub encoder: EncoderConfig,
    pub data: DataConfig,
    pub data_seed: u64,
    pub prompt_len_text: usize,
    pub prompt_len_image: usize,
    pub prompt_dropout: f64,
    /// Prompt learning rate relative to the base rate, in every stage that
    /// trains prompts.
    pub prompt_lr_multiplier: f64,
    pub loss: LossConfig,
    /// Schedule of every adaptation stage; `total_epochs` is the per-stage epoch count.
    pub schedule: LrSchedule,
    pub pretrain_schedule: LrSchedule,
    pub batch_size: usize,
    /// Instances per identity in adaptation batches.
    pub instances_per_id: usize,
    pub seeds: Vec<u64>,
    pub strategy: Strategy,
    /// Sequences per forward pass during evaluation.
    pub eval_chunk: usize,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            data: DataConfig::default(),
            data_seed: 0,
            prompt_len_text: 2,
            prompt_len_image: 2,
            prompt_dropout: 0.3,
            prompt_lr_multiplier: 10.0,
            loss: LossConfig::default(),
            schedule: LrSchedule {
                base_lr: 3e-4,
                warmup_epochs: 5,
                warmup_start_lr: 3e-5,
                total_epochs: 25,
                ..LrSchedule::default()
            },
            pretrain_schedule: LrSchedule {
                base_lr: 1e-3,
                warmup_epochs: 2,
                warmup_start_lr: 1e-4,
                total_epochs: 20,
                ..LrSchedule::default()
            },
            batch_size: 32,
            instances_per_id: 2,
            seeds: vec![0, 1, 2],
            strategy: Strategy::TwoStage,
            eval_chunk: 64,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    /// Adaptation schedule with the published settings: 60 epochs per stage,
    /// 5 warmup epochs from 1e-6 to 1e-5, cosine decay, 5x classifier lr.
    pub fn published_schedule() -> LrSchedule {
        LrSchedule::default()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.data.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        self.pretrain_schedule.validate()?;
        if !(0.0..1.0).contains(&self.prompt_dropout) {
            return Err(Error::Config(format!("prompt dropout {} not in [0, 1)", self.prompt_dropout)));
        }
        if !(self.prompt_lr_multiplier > 0.0 && self.prompt_lr_multiplier.is_finite()) {
            return Err(Error::Config(format!("prompt lr multiplier must be > 0, got {}", self.prompt_lr_multiplier)));
        }
        if self.prompt_len_text.max(self.prompt_len_image) > self.encoder.max_prompt_len {
            return Err(Error::Config(format!(
                "prompt lengths {}/{} exceed the encoder limit {}",
                self.prompt_len_text, self.prompt_len_image, self.encoder.max_prompt_len
            )));
        }
        if self.instances_per_id == 0 || self.batch_size < 2 || self.batch_size % self.instances_per_id != 0 {
            return Err(Error::Config(format!(
                "batch size {} must be a multiple of instances per id {}",
                self.batch_size, self.instances_per_id
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.eval_chunk == 0 {
            return Err(Error::Config("eval_chunk must be positive".into()));
        }
        Ok(())
    }

    /// Reads JSON, or TOML when the extension is `.toml`.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            serde_json::from_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// SHA-256 of the canonical JSON form (sorted keys, output directory excluded).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_vec(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical))
    }

    /// Hash of the fields pretraining depends on; adaptation settings are
    /// excluded so a backbone can be shared across adaptation configs.
    pub fn backbone_hash(&self) -> String {
        let value = serde_json::json!({
            "encoder": self.encoder,
            "data": self.data,
            "data_seed": self.data_seed,
            "pretrain_schedule": self.pretrain_schedule,
            "batch_size": self.batch_size,
            "logit_scale": self.loss.logit_scale,
        });
        hex::encode(Sha256::digest(serde_json::to_vec(&value).expect("value serializes")))
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.out_dir.join("corpus")
    }
}
