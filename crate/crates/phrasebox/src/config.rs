//! Run configuration: one JSON document covering world generation, model
//! dimensions, pretraining, training, and evaluation, with flat dotted-key
//! overrides from the command line. Every run echoes its resolved config
//! next to its outputs so results replay from (config, seed).

use crate::ablate::{AblationConfig, PhraseOrder};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::order_embed::PretrainConfig;
use crate::synth::WorldSpec;
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub threshold: f64,
    pub nms_iou: f64,
    pub unguided: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { threshold: 0.5, nms_iou: 0.3, unguided: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldSpec,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let world = WorldSpec::default();
        let model = ModelConfig::desk(world.word_dim, world.feat_dim);
        RunConfig {
            seed: 7,
            world,
            model,
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let value: serde_json::Value =
            serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        RunConfig::from_value(value)
    }

    pub fn from_value(value: serde_json::Value) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        if self.model.encoder.word_dim != self.world.word_dim
            || self.model.encoder.feat_dim != self.world.feat_dim
        {
            return Err(Error::Config(format!(
                "model encoder dims (d_w {}, d_v {}) must match the world (d_w {}, d_v {})",
                self.model.encoder.word_dim,
                self.model.encoder.feat_dim,
                self.world.word_dim,
                self.world.feat_dim
            )));
        }
        Ok(())
    }

    /// Applies `--set a.b.c=value` overrides onto the JSON tree and
    /// re-deserializes. Values parse as JSON when possible, else as strings.
    pub fn with_overrides(self, overrides: &[String]) -> Result<RunConfig> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut tree = serde_json::to_value(&self)?;
        for item in overrides {
            let (path, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override '{item}' is not key=value")))?;
            let value: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let pointer = format!("/{}", path.replace('.', "/"));
            let slot = tree.pointer_mut(&pointer).ok_or_else(|| {
                Error::Usage(format!("override key '{path}' does not exist in the config"))
            })?;
            *slot = value;
        }
        RunConfig::from_value(tree)
    }

    /// Keeps the seed and the phrase order coherent across sections.
    pub fn apply_cli(&mut self, seed: Option<u64>, order: Option<PhraseOrder>) {
        if let Some(s) = seed {
            self.seed = s;
            self.world.seed = s;
            self.train.seed = s;
        } else {
            self.world.seed = self.seed;
            self.train.seed = self.seed;
        }
        if let Some(o) = order {
            self.model.ablation.phrase_order = o;
        }
    }

    pub fn set_preset(&mut self, preset: &str) -> Result<()> {
        let order = self.model.ablation.phrase_order;
        self.model.ablation = AblationConfig::preset(preset)?;
        self.model.ablation.phrase_order = order;
        Ok(())
    }

    /// Writes the resolved config echo next to a run's outputs.
    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let f = std::fs::File::create(dir.join("config.echo.json"))?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }
}
