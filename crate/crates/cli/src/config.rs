use std::fs;
use std::path::Path;

use marmamba::analysis::{ErrorMapConfig, RenderWindow, SpectrumConfig};
use marmamba::backbone::{BlockRef, NetConfig};
use marmamba::ct::SynthConfig;
use marmamba::losses::LossConfig;
use marmamba::metrics::EvalConfig;
use marmamba::optim::{AdamConfig, ScheduleConfig};
use marmamba::train::{ProgressivePhase, TrainConfig};
use marmamba::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointPolicy {
    pub every: u64,
    pub keep: usize,
    /// Store parameters as 32-bit floats.
    pub f32: bool,
}

impl Default for CheckpointPolicy {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            every: t.checkpoint_every,
            keep: t.keep_checkpoints,
            f32: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub tap: BlockRef,
    pub spectrum: SpectrumConfig,
    pub error_map: ErrorMapConfig,
    pub window: RenderWindow,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            tap: BlockRef { stage: 0, block: 0 },
            spectrum: SpectrumConfig::default(),
            error_map: ErrorMapConfig::default(),
            window: RenderWindow::default(),
        }
    }
}

/// Everything a run depends on. One master `seed` drives network
/// initialisation, batch order and dataset synthesis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub net: NetConfig,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    pub phases: Vec<ProgressivePhase>,
    pub checkpoint: CheckpointPolicy,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: 0,
            net: NetConfig::micro(),
            loss: t.loss,
            schedule: t.schedule,
            adam: t.adam,
            phases: t.phases,
            checkpoint: CheckpointPolicy::default(),
            synth: SynthConfig::default(),
            eval: EvalConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        if cfg.synth.seed != 0 && cfg.synth.seed != cfg.seed {
            return Err("synth.seed is derived from the master seed; set `seed` instead".into());
        }
        Ok(cfg)
    }

    /// Propagates the master seed into the sections that carry their own.
    pub fn resolve(mut self) -> Self {
        self.synth.seed = self.seed;
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialise the resolved config: {e}")))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            phases: self.phases.clone(),
            seed: self.seed,
            loss: self.loss.clone(),
            schedule: self.schedule,
            adam: self.adam,
            checkpoint_every: self.checkpoint.every,
            keep_checkpoints: self.checkpoint.keep,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train_config().validate()?;
        self.synth.validate()?;
        self.analysis.spectrum.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default().resolve();
        let back = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("sed = 3").is_err());
        assert!(RunConfig::parse("[net]\nwidth = 3").is_err());
        assert!(RunConfig::parse("[schedule]\nlr_max = 1e-3").is_ok());
    }

    #[test]
    fn synth_seed_must_follow_master() {
        assert!(RunConfig::parse("seed = 4\n[synth]\nseed = 5").is_err());
        assert_eq!(RunConfig::parse("seed = 4").unwrap().resolve().synth.seed, 4);
    }
}
