//! Run configuration: one TOML document with `scene`, `stft`, `model`,
//! `train` and `eval` sections. Every field has a default, unknown keys are
//! errors, and `section.key=value` overrides are applied before parsing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::StftConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::fusion::FusionConfig;
use crate::model::ModelConfig;
use crate::scene::SceneConfig;
use crate::srn::SrnConfig;
use crate::training::TrainConfig;

/// Architecture settings other than the STFT.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub encoders: EncoderConfig,
    pub fusion: FusionConfig,
    pub srn: SrnConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub stft: StftConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// File name of the resolved config written next to every output.
pub const ECHO_FILE: &str = "config.toml";

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            stft: self.stft,
            encoders: self.model.encoders.clone(),
            fusion: self.model.fusion.clone(),
            srn: self.model.srn.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model_config().validate()?;
        self.train.validate()?;
        if self.eval.methods.is_empty() {
            return Err(Error::Config("eval.methods must not be empty".into()));
        }
        Ok(())
    }

    /// Parses `text`, applies `overrides` and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, or starts from defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides).map_err(|e| match (e, path) {
            (Error::Config(m), Some(p)) => Error::Config(format!("{}: {m}", p.display())),
            (e, _) => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable")
    }

    /// Writes the resolved config to `dir/config.toml`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}

/// Sets `a.b.c = value` inside `table`. The value is read as a TOML value
/// (`3`, `0.5`, `true`, `[1, 2]`, `"text"`); anything that does not parse
/// is taken as a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_toml("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml("[train]\nlearning_rate = 0.1\n", &[]).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert!(RunConfig::from_toml("[nonsense]\n", &[]).is_err());
        assert!(RunConfig::from_toml("", &["train.bogus=1".into()]).is_err());
    }

    #[test]
    fn overrides_replace_file_values() {
        let cfg = RunConfig::from_toml(
            "[train]\nepochs = 3\n",
            &["train.epochs=7".into(), "model.fusion.heads = 4".into(), "eval.methods=[\"mono_mono\"]".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.model.fusion.heads, 4);
        assert_eq!(cfg.eval.methods, vec![crate::eval::Method::MonoMono]);
        assert!(RunConfig::from_toml("", &["train.epochs".into()]).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::from_toml("", &["scene.seed=4".into(), "stft.hop=64".into()]).unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml(), &[]).unwrap(), cfg);
    }
}
