//! Run configuration: one TOML file covering model, data, every training
//! stage, evaluation and ablation. Missing keys take the defaults below;
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vista_core::forge::manifest::Split;
use vista_core::forge::DataConfig;
use vista_core::retrieval::FusionMethod;
use vista_core::train::{Stage, TaskTag, TrainConfig};
use vista_core::ModelConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub fusion: FusionMethod,
    pub eval_split: Split,
    /// Write a checkpoint every this many steps, plus one at the end.
    pub checkpoint_every: usize,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub finetune: TrainConfig,
    pub pseudo_map: TrainConfig,
    pub ablation: AblationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let stage1 = TrainConfig {
            stage: Stage::Stage1,
            lr_init: 1e-3,
            total_steps: 400,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let stage2 = TrainConfig {
            stage: Stage::Stage2,
            lr_init: 1e-3,
            total_steps: 600,
            batch_size: 16,
            hard_negatives_per_query: 3,
            tasks: vec![TaskTag::It2i, TaskTag::T2it],
            ..TrainConfig::default()
        };
        let finetune = TrainConfig { stage: Stage::Finetune, lr_init: 2e-4, ..stage2.clone() };
        let pseudo_map = TrainConfig { stage: Stage::PseudoMap, lr_init: 1e-3, total_steps: 300, batch_size: 32, ..TrainConfig::default() };
        RunConfig {
            seed: 42,
            fusion: FusionMethod::Interleaved,
            eval_split: Split::Dev,
            checkpoint_every: 100,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            stage1,
            stage2,
            finetune,
            pseudo_map,
            ablation: AblationConfig { seeds: vec![1, 2, 3] },
        }
    }
}

/// Overlays `top` on `base`, table by table.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let user: toml::Value = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let mut merged = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
        merge(&mut merged, user);
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.data.validate()?;
        for (name, cfg, stage) in [
            ("stage1", &self.stage1, Stage::Stage1),
            ("stage2", &self.stage2, Stage::Stage2),
            ("finetune", &self.finetune, Stage::Finetune),
            ("pseudo_map", &self.pseudo_map, Stage::PseudoMap),
        ] {
            if cfg.stage != stage {
                return Err(CliError::Config(format!("[{name}] must keep stage = \"{}\"", stage.as_str())));
            }
            cfg.validate().map_err(|e| CliError::Config(format!("[{name}] {e}")))?;
        }
        if self.checkpoint_every == 0 {
            return Err(CliError::Config("checkpoint_every must be positive".into()));
        }
        if self.ablation.seeds.is_empty() {
            return Err(CliError::Config("ablation.seeds must not be empty".into()));
        }
        Ok(())
    }

    /// The trainer config of `stage`, seeded from the run seed.
    pub fn stage(&self, stage: Stage) -> TrainConfig {
        let base = match stage {
            Stage::Stage1 => &self.stage1,
            Stage::Stage2 => &self.stage2,
            Stage::Finetune => &self.finetune,
            Stage::PseudoMap => &self.pseudo_map,
        };
        TrainConfig { seed: self.seed, token_order: self.model.token_order, ..base.clone() }
    }

    /// Model config seeded from the run seed.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { seed: self.seed, ..self.model.clone() }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        RunConfig { seed, ..self.clone() }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the fully resolved config into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> CliResult<()> {
        let p = dir.join("resolved_config.toml");
        std::fs::write(&p, self.to_toml()).map_err(|e| CliError::Io(p, e))
    }
}
