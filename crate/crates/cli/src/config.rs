//! The run configuration: one TOML file whose sections overlay the preset
//! defaults, then command-line flags on top.
//!
//! ```toml
//! seed = 7
//! preset = "desk"        # desk | tiny | full
//! image_size = 32        # defaults to the preset's input size
//!
//! [encoder]              # any EncoderConfig field
//! state_dim = 8
//!
//! [decoder]              # masked-image decoder
//! depth = 1
//!
//! [pretrain]             # TrainConfig fields, per phase
//! epochs = 20
//!
//! [finetune]
//! base_lr = 5e-3
//!
//! [mil]                  # MilConfig fields except embed_dim
//! model_dim = 64
//! tasks = [{ name = "grade", kind = "classification", num_classes = 3 }]
//!
//! [mil_train]
//! epochs = 30
//!
//! [resampling]
//! n_rounds = 15
//! ```

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use ssmamba_core::backbone::EncoderConfig;
use ssmamba_core::mamim::{DecoderConfig, MamimConfig};
use ssmamba_core::mil::{MilConfig, Resampling, TaskSpec};
use ssmamba_core::train::{Phase, TrainConfig};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub preset: Option<String>,
    pub image_size: Option<usize>,
    pub mask_ratio: Option<f64>,
    pub encoder: Option<toml::Table>,
    pub decoder: Option<toml::Table>,
    pub pretrain: Option<toml::Table>,
    pub finetune: Option<toml::Table>,
    pub mil: Option<toml::Table>,
    pub mil_train: Option<toml::Table>,
    pub resampling: Option<toml::Table>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Input resolution each preset is built for.
pub fn preset_image_size(preset: &str) -> usize {
    match preset {
        "tiny" => 16,
        "full" => 224,
        _ => 32,
    }
}

/// `base` with the keys of `table` written over it, recursively.
pub fn overlay<T: Serialize + DeserializeOwned + Clone>(base: &T, table: Option<&toml::Table>, what: &str) -> Result<T> {
    let Some(table) = table else {
        return Ok(base.clone());
    };
    let mut v = serde_json::to_value(base)?;
    merge(&mut v, serde_json::to_value(table)?);
    serde_json::from_value(v).with_context(|| format!("invalid [{what}] section"))
}

fn merge(dst: &mut serde_json::Value, src: serde_json::Value) {
    match (dst, src) {
        (serde_json::Value::Object(d), serde_json::Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

/// Flags shared by the training subcommands; each overrides the config.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Mixup Beta parameter.
    #[arg(long, conflicts_with = "no_mixup")]
    pub mixup: Option<f64>,
    #[arg(long)]
    pub no_mixup: bool,
}

impl TrainFlags {
    pub fn apply(&self, tc: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            tc.epochs = v;
            // A shortened run keeps a warmup it can finish.
            if self.warmup_epochs.is_none() && tc.warmup_epochs >= v {
                tc.warmup_epochs = v.saturating_sub(1).min(tc.warmup_epochs);
            }
        }
        if let Some(v) = self.warmup_epochs {
            tc.warmup_epochs = v;
        }
        if let Some(v) = self.batch_size {
            tc.batch_size = v;
        }
        if let Some(v) = self.lr {
            tc.base_lr = v;
        }
        if let Some(v) = self.max_steps {
            tc.max_steps = Some(v);
        }
        if let Some(v) = self.mixup {
            tc.mixup_alpha = Some(v);
        }
        if self.no_mixup {
            tc.mixup_alpha = None;
        }
    }
}

/// Everything resolved from file + flags.
#[derive(Debug)]
pub struct Settings {
    pub seed: u64,
    pub preset: String,
    pub image_size: usize,
    pub encoder: EncoderConfig,
    pub file: FileConfig,
}

impl Settings {
    pub fn resolve(file: FileConfig, seed: Option<u64>, preset: Option<&str>) -> Result<Self> {
        let preset = preset.map(str::to_string).or_else(|| file.preset.clone()).unwrap_or_else(|| "desk".into());
        let encoder = overlay(&EncoderConfig::preset(&preset)?, file.encoder.as_ref(), "encoder")?;
        encoder.validate()?;
        let image_size = file.image_size.unwrap_or_else(|| preset_image_size(&preset));
        encoder.check_input(image_size, image_size)?;
        Ok(Settings {
            seed: seed.or(file.seed).unwrap_or(0),
            preset,
            image_size,
            encoder,
            file,
        })
    }

    /// The phase's recipe: paper-scale for the full preset, desk otherwise.
    pub fn train(&self, phase: Phase, flags: &TrainFlags) -> Result<TrainConfig> {
        let base = if self.preset == "full" { TrainConfig::paper(phase) } else { TrainConfig::desk(phase) };
        let (section, name) = match phase {
            Phase::Pretrain => (&self.file.pretrain, "pretrain"),
            Phase::Finetune => (&self.file.finetune, "finetune"),
            Phase::Mil => (&self.file.mil_train, "mil_train"),
        };
        let mut tc = overlay(&base, section.as_ref(), name)?;
        flags.apply(&mut tc);
        tc.validate()?;
        Ok(tc)
    }

    pub fn mamim(&self) -> Result<MamimConfig> {
        let mut cfg = MamimConfig::new(self.encoder.clone());
        cfg.decoder = overlay(&DecoderConfig::default(), self.file.decoder.as_ref(), "decoder")?;
        if let Some(r) = self.file.mask_ratio {
            cfg.mask_ratio = r;
        }
        if !(0.0..1.0).contains(&cfg.mask_ratio) {
            bail!("mask_ratio must be in [0, 1), got {}", cfg.mask_ratio);
        }
        Ok(cfg)
    }

    /// MIL model for bags of width `embed_dim`; `tasks` from flags win
    /// over the config's.
    pub fn mil(&self, embed_dim: usize, tasks: Vec<TaskSpec>) -> Result<MilConfig> {
        let mut table = self.file.mil.clone().unwrap_or_default();
        if table.contains_key("embed_dim") {
            bail!("[mil] embed_dim is read from the bag files");
        }
        if !tasks.is_empty() {
            table.remove("tasks");
        }
        let cfg = overlay(&MilConfig::new(embed_dim, tasks), Some(&table), "mil")?;
        if cfg.tasks.is_empty() {
            bail!("no MIL tasks: pass --task or set [mil] tasks");
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resampling(&self) -> Result<Resampling> {
        overlay(&Resampling::default(), self.file.resampling.as_ref(), "resampling")
    }
}

/// Parses `name:K` (classification with K classes) or `name:reg`.
pub fn parse_task(s: &str) -> Result<TaskSpec, String> {
    let (name, kind) = s.split_once(':').ok_or_else(|| format!("expected NAME:CLASSES or NAME:reg, got {s:?}"))?;
    if name.is_empty() {
        return Err("empty task name".into());
    }
    match kind {
        "reg" | "regression" => Ok(TaskSpec::regression(name)),
        k => k
            .parse::<usize>()
            .map(|n| TaskSpec::classification(name, n))
            .map_err(|_| format!("bad class count {k:?} in {s:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_replaces_only_named_keys() {
        let t: toml::Table = toml::from_str("epochs = 3\nmixup_alpha = 0.4").unwrap();
        let tc = overlay(&TrainConfig::desk(Phase::Finetune), Some(&t), "finetune").unwrap();
        assert_eq!(tc.epochs, 3);
        assert_eq!(tc.mixup_alpha, Some(0.4));
        assert_eq!(tc.batch_size, TrainConfig::desk(Phase::Finetune).batch_size);
        let bad: toml::Table = toml::from_str("epoch = 3").unwrap();
        assert!(overlay(&TrainConfig::desk(Phase::Finetune), Some(&bad), "finetune").is_err());
    }

    #[test]
    fn encoder_section_overlays_preset() {
        let file: FileConfig = toml::from_str("preset = \"tiny\"\n[encoder]\nstate_dim = 4").unwrap();
        let s = Settings::resolve(file, Some(9), None).unwrap();
        assert_eq!(s.encoder, EncoderConfig { state_dim: 4, ..EncoderConfig::tiny() });
        assert_eq!((s.seed, s.image_size), (9, 16));
    }

    #[test]
    fn task_flags() {
        assert_eq!(parse_task("grade:3").unwrap(), TaskSpec::classification("grade", 3));
        assert_eq!(parse_task("os:reg").unwrap(), TaskSpec::regression("os"));
        assert!(parse_task("os").is_err());
        assert!(parse_task(":2").is_err());
    }

    #[test]
    fn shortened_runs_keep_a_valid_warmup() {
        let mut tc = TrainConfig::desk(Phase::Pretrain);
        TrainFlags { epochs: Some(1), ..Default::default() }.apply(&mut tc);
        assert_eq!((tc.epochs, tc.warmup_epochs), (1, 0));
        assert!(tc.validate().is_ok());
    }
}
