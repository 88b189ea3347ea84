//! Run configuration, read from JSON or TOML. Unknown keys are rejected by
//! name at any nesting level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::read_text;
use crate::conditioning::ConditionerConfig;
use crate::error::{Error, Result};
use crate::fitting::FitConfig;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Side of the square Gaussian maps.
    pub resolution: usize,
    /// Neighbours used to initialise base scales.
    pub knn: usize,
    pub conditioner: ConditionerConfig,
    pub fit: FitConfig,
    pub manifest: Option<PathBuf>,
    pub synth: SynthConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            resolution: 256,
            knn: 3,
            conditioner: ConditionerConfig::default(),
            fit: FitConfig::default(),
            manifest: None,
            synth: SynthConfig::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let mut cfg = parse_config(&text, toml).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(m) = &cfg.manifest {
            if m.is_relative() {
                cfg.manifest = Some(path.parent().unwrap_or(Path::new("")).join(m));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(Error::InvalidArgument(format!(
                "resolution {} is below 8",
                self.resolution
            )));
        }
        if self.knn == 0 {
            return Err(Error::InvalidArgument("knn must be at least 1".into()));
        }
        self.conditioner.validate()?;
        self.fit.loss.validate()?;
        Ok(())
    }
}

fn unknown_key(message: &str) -> Option<String> {
    let rest = &message[message.find("unknown field `")? + "unknown field `".len()..];
    Some(rest[..rest.find('`')?].to_string())
}

pub fn parse_config(text: &str, toml: bool) -> Result<Config> {
    let parsed = if toml {
        toml::from_str::<Config>(text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str::<Config>(text).map_err(|e| e.to_string())
    };
    parsed.map_err(|m| match unknown_key(&m) {
        Some(key) => Error::UnknownConfigKey(key),
        None => Error::Format(m),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(parse_config("{}", false).unwrap(), Config::default());
        assert_eq!(parse_config("", true).unwrap(), Config::default());
    }

    #[test]
    fn unknown_key_is_named() {
        match parse_config(r#"{"fit": {"iteratons": 5}}"#, false) {
            Err(Error::UnknownConfigKey(k)) => assert_eq!(k, "iteratons"),
            other => panic!("unexpected {other:?}"),
        }
        match parse_config("bogus = 1\n", true) {
            Err(Error::UnknownConfigKey(k)) => assert_eq!(k, "bogus"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nested_values_parse() {
        let cfg = parse_config(
            r#"{"resolution": 64, "fit": {"iterations": 7, "loss": {"ssim": 0.1}}, "conditioner": {"latent_dim": 8}}"#,
            false,
        )
        .unwrap();
        assert_eq!(cfg.resolution, 64);
        assert_eq!(cfg.fit.iterations, 7);
        assert_eq!(cfg.fit.loss.ssim, 0.1);
        assert_eq!(cfg.conditioner.latent_dim, 8);
    }
}
