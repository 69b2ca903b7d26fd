//! Run configuration, read from TOML.
//!
//! Every section is optional and falls back to the desk-scale defaults. The
//! seed is mandatory: it must come from the file or from the command line.
//!
//! ```toml
//! seed = 7
//! dataset = "data/ltcc"   # omit to synthesise from [synth]
//! protocols = ["general", "cloth_changing"]
//! kmax = 20
//!
//! [stage1]
//! epochs = 30
//! lr = 3.5e-4
//! schedule = "cosine"
//!
//! [stage2]
//! epochs = 30
//! schedule = "step_decay"
//! milestones = [10, 18]
//!
//! [variant]
//! use_sse = true
//! use_sim = true
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{LrSchedule, ScheduleKind};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::evalkit::Protocol;
use crate::model::{ModelConfig, StageSettings, Variant};
use crate::sim::SimConfig;
use crate::sse::SseConfig;
use crate::synthdata::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr: f32,
    pub schedule: ScheduleKind,
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "decay")]
    pub decay_factor: f32,
}

fn decay() -> f32 {
    0.1
}

impl StageConfig {
    pub fn stage1_default() -> Self {
        Self {
            epochs: 30,
            lr: 3.5e-4,
            schedule: ScheduleKind::Cosine,
            milestones: Vec::new(),
            decay_factor: decay(),
        }
    }

    pub fn stage2_default() -> Self {
        Self {
            epochs: 30,
            lr: 3.5e-4,
            schedule: ScheduleKind::StepDecay,
            milestones: vec![10, 18],
            decay_factor: decay(),
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        match self.schedule {
            ScheduleKind::Cosine => LrSchedule::cosine(self.lr, self.epochs),
            ScheduleKind::StepDecay => {
                let mut s = LrSchedule::step_decay(self.lr, self.milestones.clone(), self.decay_factor);
                s.total_epochs = self.epochs;
                s
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub p: usize,
    pub k: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { p: 4, k: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Directory of a saved dataset. Relative paths resolve against the
    /// config file's directory.
    pub dataset: Option<PathBuf>,
    pub synth: SynthConfig,
    pub encoder: EncoderConfig,
    pub sse: SseConfig,
    pub sim: SimConfig,
    #[serde(default = "StageConfig::stage1_default")]
    pub stage1: StageConfig,
    #[serde(default = "StageConfig::stage2_default")]
    pub stage2: StageConfig,
    pub sampler: SamplerConfig,
    pub variant: Variant,
    pub protocols: Vec<Protocol>,
    pub kmax: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            dataset: None,
            synth: SynthConfig::default(),
            encoder: EncoderConfig::default(),
            sse: SseConfig::default(),
            sim: SimConfig::default(),
            stage1: StageConfig::stage1_default(),
            stage2: StageConfig::stage2_default(),
            sampler: SamplerConfig::default(),
            variant: Variant::FULL,
            protocols: Protocol::ALL.to_vec(),
            kmax: 20,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "config".into());
            Error::config(field, e.message().to_string())
        })
    }

    /// Reads a config file, resolving `dataset` relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(d) = &cfg.dataset {
            if d.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.dataset = Some(base.join(d));
            }
        }
        if let Some(d) = &cfg.dataset {
            if !d.is_dir() {
                return Err(Error::config("dataset", format!("{} is not a directory", d.display())));
            }
        }
        Ok(cfg)
    }

    /// Applies a seed override and checks every field. The resolved seed
    /// also seeds the synthetic generator and model init.
    pub fn resolve(mut self, seed_override: Option<u64>) -> Result<Self> {
        if let Some(s) = seed_override {
            self.seed = Some(s);
        }
        let seed = self
            .seed
            .ok_or_else(|| Error::config("seed", "missing; set it in the config or pass --seed"))?;
        self.synth.seed = seed;
        self.encoder.seed = seed;
        self.validate()?;
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model_config().validate()?;
        self.stage1.schedule().validate("stage1")?;
        self.stage2.schedule().validate("stage2")?;
        if self.sampler.p == 0 {
            return Err(Error::config("sampler.p", "must be positive"));
        }
        if self.sampler.k == 0 {
            return Err(Error::config("sampler.k", "must be positive"));
        }
        if self.kmax == 0 {
            return Err(Error::config("kmax", "must be positive"));
        }
        if self.protocols.is_empty() {
            return Err(Error::config("protocols", "must name at least one protocol"));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            sse: self.sse.clone(),
            sim: self.sim.clone(),
            variant: self.variant,
        }
    }

    pub fn stage1_settings(&self) -> StageSettings {
        StageSettings {
            epochs: self.stage1.epochs,
            schedule: self.stage1.schedule(),
            p: self.sampler.p,
            k: self.sampler.k,
            seed: self.seed(),
        }
    }

    pub fn stage2_settings(&self) -> StageSettings {
        StageSettings {
            epochs: self.stage2.epochs,
            schedule: self.stage2.schedule(),
            p: self.sampler.p,
            k: self.sampler.k,
            seed: self.seed(),
        }
    }
}
