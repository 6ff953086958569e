//! Run configuration with a total ordering of sources: built-in defaults,
//! then a JSON config file, then command-line flags, then the seed
//! environment variable. Unknown keys in the file are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use contigan::error::{Error, Result};
use contigan::model::{DiscriminatorConfig, GeneratorConfig};
use contigan::trainer::TrainConfig;

/// Environment variable overriding every other seed source.
pub const SEED_ENV: &str = "CONTIGAN_SEED";

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            train: TrainConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

/// Flag-level overrides; `None` means "not given on the command line".
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps_source: Option<usize>,
    pub steps_teacher: Option<usize>,
    pub steps_student: Option<usize>,
    pub wt: Option<f64>,
    pub ws: Option<f64>,
    pub alpha: Option<f64>,
    pub freeze_k: Option<usize>,
    pub resolution: Option<usize>,
    pub channels: Option<usize>,
}

impl RunConfig {
    /// defaults <- file <- flags <- env seed
    pub fn resolve(config_file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut cfg = match config_file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
                })?;
                let cfg: RunConfig = serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                if cfg.schema_version != CONFIG_SCHEMA_VERSION {
                    return Err(Error::Config(format!(
                        "unsupported config schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                        cfg.schema_version
                    )));
                }
                cfg
            }
            None => RunConfig::default(),
        };

        if let Some(v) = flags.steps_source {
            cfg.train.steps_source = v;
        }
        if let Some(v) = flags.steps_teacher {
            cfg.train.steps_teacher = v;
        }
        if let Some(v) = flags.steps_student {
            cfg.train.steps_student = v;
        }
        if let Some(v) = flags.wt {
            cfg.train.weights.w_t = v;
        }
        if let Some(v) = flags.ws {
            cfg.train.weights.w_s = v;
        }
        if let Some(v) = flags.alpha {
            cfg.train.weights.alpha = v;
        }
        if let Some(v) = flags.freeze_k {
            cfg.train.disc_trainable_suffix_k = v;
        }
        if let Some(v) = flags.resolution {
            cfg.generator.out_resolution = v;
            cfg.discriminator.in_resolution = v;
        }
        if let Some(v) = flags.channels {
            cfg.generator.out_channels = v;
            cfg.discriminator.in_channels = v;
        }
        if let Some(v) = flags.seed {
            cfg.train.seed = v;
            cfg.generator.seed = v;
            cfg.discriminator.seed = v.wrapping_add(1);
        }
        if let Ok(env_seed) = std::env::var(SEED_ENV) {
            let v: u64 = env_seed
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an integer, got '{env_seed}'")))?;
            cfg.train.seed = v;
            cfg.generator.seed = v;
            cfg.discriminator.seed = v.wrapping_add(1);
        }

        cfg.train.validate()?;
        cfg.generator.validate()?;
        cfg.discriminator.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap() + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::resolve(Some(path), &Overrides::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"schema_version": 1, "surprise": true}"#).unwrap();
        assert!(matches!(
            RunConfig::resolve(Some(&path), &Overrides::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let mut file_cfg = RunConfig::default();
        file_cfg.train.steps_teacher = 111;
        file_cfg.save(&path).unwrap();
        let flags = Overrides {
            steps_teacher: Some(222),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(Some(&path), &flags).unwrap();
        assert_eq!(cfg.train.steps_teacher, 222);
    }

    #[test]
    fn bad_schema_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"schema_version": 99}"#).unwrap();
        assert!(RunConfig::resolve(Some(&path), &Overrides::default()).is_err());
    }
}
