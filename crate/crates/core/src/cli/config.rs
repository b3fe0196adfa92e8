//! Run configuration: defaults, then the TOML file, then flag overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::DatasetConfig;
use crate::bridge::BridgeConfig;
use crate::error::{Error, Result};
use crate::models::{ScoreArch, SeparatorArch};
use crate::rng;
use crate::training::{FinetuneOptions, Stage, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Splits {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for Splits {
    fn default() -> Self {
        Self {
            train: 2000,
            val: 20,
            test: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub separator: TrainConfig,
    pub geco: TrainConfig,
    pub finetune: TrainConfig,
    pub finetune_options: FinetuneOptions,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let base = TrainConfig {
            lr: 1e-3,
            ema_decay: 0.99,
            ..TrainConfig::default()
        };
        Self {
            separator: TrainConfig {
                lr: 2e-3,
                epochs: 15,
                ..base
            },
            geco: base,
            finetune: TrainConfig { epochs: 5, ..base },
            finetune_options: FinetuneOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub deterministic_final: bool,
    pub prior_noise: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            deterministic_final: false,
            prior_noise: true,
        }
    }
}

impl SamplerSection {
    pub fn reverse_options(&self) -> crate::sampler::ReverseOptions {
        crate::sampler::ReverseOptions {
            deterministic_final: self.deterministic_final,
            prior_noise: self.prior_noise,
            keep_trace: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub separator: SeparatorArch,
    pub score: ScoreArch,
}

/// Fully resolved configuration of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; stage seeds not set explicitly are derived from it.
    pub seed: u64,
    pub bridge: BridgeConfig,
    pub dataset: DatasetConfig,
    pub splits: Splits,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub sampler: SamplerSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            bridge: BridgeConfig::default(),
            dataset: DatasetConfig::default(),
            splits: Splits::default(),
            model: ModelSection::default(),
            training: TrainingSection::default(),
            sampler: SamplerSection::default(),
        };
        c.derive_stage_seeds(&[]);
        c
    }
}

const STAGES: [Stage; 3] = [Stage::Separator, Stage::Geco, Stage::Finetune];

impl RunConfig {
    pub fn train_config(&self, stage: Stage) -> &TrainConfig {
        match stage {
            Stage::Separator => &self.training.separator,
            Stage::Geco => &self.training.geco,
            Stage::Finetune => &self.training.finetune,
        }
    }

    fn train_config_mut(&mut self, stage: Stage) -> &mut TrainConfig {
        match stage {
            Stage::Separator => &mut self.training.separator,
            Stage::Geco => &mut self.training.geco,
            Stage::Finetune => &mut self.training.finetune,
        }
    }

    fn derive_stage_seeds(&mut self, explicit: &[Stage]) {
        let master = self.seed;
        for (i, s) in STAGES.into_iter().enumerate() {
            if !explicit.contains(&s) {
                // Kept within 63 bits so the TOML snapshot (signed integers) round-trips.
                self.train_config_mut(s).seed = rng::derive(master, 0x57a6e + i as u64) >> 1;
            }
        }
    }

    /// Seeds for the dataset splits.
    pub fn split_seed(&self, split: &str) -> u64 {
        let tag = match split {
            "train" => 1,
            "val" => 2,
            _ => 3,
        };
        rng::derive(self.seed, 0xda7a + tag)
    }

    pub fn validate(&self) -> Result<()> {
        self.bridge.validate()?;
        self.dataset.validate()?;
        for s in STAGES {
            self.train_config(s).validate()?;
        }
        if self.splits.train == 0 || self.splits.test == 0 {
            return Err(Error::Config("splits: train and test must be non-empty".into()));
        }
        self.model.score.check_bridge(&self.bridge)?;
        Ok(())
    }

    /// Resolves defaults ← file ← `overrides` (`section.key=value`) ← `seed`.
    pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        if let Some(s) = seed {
            if s > i64::MAX as u64 {
                return Err(Error::Config(format!("seed {s} exceeds {}", i64::MAX)));
            }
            table.insert("seed".into(), toml::Value::Integer(s as i64));
            if let Some(toml::Value::Table(training)) = table.get_mut("training") {
                for stage in STAGES {
                    if let Some(toml::Value::Table(t)) = training.get_mut(stage_key(stage)) {
                        t.remove("seed");
                    }
                }
            }
        }
        let explicit: Vec<Stage> = STAGES
            .into_iter()
            .filter(|s| {
                table
                    .get("training")
                    .and_then(|t| t.get(stage_key(*s)))
                    .and_then(|t| t.get("seed"))
                    .is_some()
            })
            .collect();
        let bridge_given = table.get("model").and_then(|m| m.get("score")).is_some_and(|s| {
            s.get("sigma_c").is_some() || s.get("sigma_v").is_some()
        });
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.derive_stage_seeds(&explicit);
        if !bridge_given {
            cfg.model.score.sigma_c = cfg.bridge.c;
            cfg.model.score.sigma_v = cfg.bridge.v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn stage_key(stage: Stage) -> &'static str {
    stage.name()
}

/// Applies `a.b.c=value`; the value is parsed as TOML, falling back to a string.
fn apply_override(table: &mut toml::Table, text: &str) -> Result<()> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not of the form key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn defaults_validate() {
        let c = RunConfig::resolve(None, &[], None).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.bridge, BridgeConfig::default());
    }

    #[test]
    fn precedence_flag_over_file_over_default() {
        let f = write("seed = 3\n[bridge]\nsteps = 12\n[training.geco]\nlr = 0.5\nseed = 9\n");
        let c = RunConfig::resolve(Some(f.path()), &[], None).unwrap();
        assert_eq!(c.bridge.steps, 12);
        assert_eq!(c.bridge.c, 0.51);
        assert_eq!(c.training.geco.lr, 0.5);
        assert_eq!(c.training.geco.seed, 9);
        assert_eq!(c.seed, 3);

        let c = RunConfig::resolve(Some(f.path()), &["bridge.steps=4".into()], Some(11)).unwrap();
        assert_eq!(c.bridge.steps, 4);
        assert_eq!(c.seed, 11);
        assert_ne!(c.training.geco.seed, 9, "--seed replaces stage seeds");
    }

    #[test]
    fn snapshot_round_trips() {
        let c = RunConfig::resolve(None, &["dataset.snr_low=-5.0".into()], Some(2)).unwrap();
        let f = write(&c.to_toml());
        assert_eq!(RunConfig::resolve(Some(f.path()), &[], None).unwrap(), c);
    }

    #[test]
    fn errors_are_config_errors() {
        for bad in [
            "[bridge]\nc = -1.0\n",
            "[bridge]\nbogus = 1\n",
            "not toml at all [",
            "[training.separator]\nlr = 0.0\n",
        ] {
            let f = write(bad);
            assert!(matches!(RunConfig::resolve(Some(f.path()), &[], None), Err(Error::Config(_))), "{bad}");
        }
        assert!(matches!(RunConfig::resolve(None, &["nokey".into()], None), Err(Error::Config(_))));
        assert!(RunConfig::resolve(Some(Path::new("/no/such/file.toml")), &[], None).is_err());
    }

    #[test]
    fn score_scaling_follows_bridge() {
        let c = RunConfig::resolve(None, &["bridge.c=0.4".into()], None).unwrap();
        assert_eq!(c.model.score.sigma_c, 0.4);
        let clash = ["bridge.c=0.4".to_string(), "model.score.sigma_c=0.5".to_string()];
        assert!(matches!(RunConfig::resolve(None, &clash, None), Err(Error::Config(_))));
    }
}
