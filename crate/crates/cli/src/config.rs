//! Run configuration: a TOML file with sections `data`, `model`, `train`,
//! `eval` and `output`, overridden by `--section.key value` flags.
//!
//! Grammar: each section is a TOML table; keys are the field names below.
//! An override value is parsed as a TOML value (`true`, `3`, `1e-3`,
//! `[0.8, 1.2]`, `"text"`) and falls back to a bare string. Unknown
//! sections and keys are errors.

use std::path::{Path, PathBuf};

use melafuse::trainer::{ModelConfig, PipelineConfig, TrainConfig};
use melafuse::Error;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub csv: PathBuf,
    pub images: PathBuf,
    /// Manifest written by `split`; its `fold` column replaces a fresh split.
    pub manifest: Option<PathBuf>,
    pub pipeline: PipelineConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            csv: PathBuf::from("data/metadata.csv"),
            images: PathBuf::from("data/images"),
            manifest: None,
            pipeline: PipelineConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { batch_size: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub plots: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/latest"), plots: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub output: OutputSection,
}

impl RunConfig {
    /// File (if any) merged with overrides, then validated.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, Error> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (key, value) in parse_overrides(overrides)? {
            set_path(&mut table, &key, value)?;
        }
        let cfg: RunConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.pipeline.validate(self.model.image_size)?;
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// `--a.b value` and `--a.b=value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, toml::Value)>, Error> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .filter(|k| k.contains('.'))
            .ok_or_else(|| Error::Config(format!("unexpected argument `{arg}`; overrides look like --section.key value")))?;
        let (key, raw) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Error::Config(format!("override --{key} has no value")))?;
                (key.to_string(), v.clone())
            }
        };
        out.push((key, parse_value(&raw)));
    }
    Ok(out)
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, dotted: &str, value: toml::Value) -> Result<(), Error> {
    let parts: Vec<&str> = dotted.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in --{dotted} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_apply_with_types() {
        let cfg = RunConfig::load(
            None,
            &args(&["--train.epochs", "3", "--train.freeze_image_branch=true", "--data.pipeline.brightness", "[0.9, 1.1]", "--output.dir", "x/y"]),
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert!(cfg.train.freeze_image_branch);
        assert_eq!(cfg.data.pipeline.brightness, (0.9, 1.1));
        assert_eq!(cfg.output.dir, PathBuf::from("x/y"));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_errors() {
        assert!(RunConfig::load(None, &args(&["--train.epoch", "3"])).is_err());
        assert!(RunConfig::load(None, &args(&["--nosuch.key", "3"])).is_err());
        assert!(RunConfig::load(None, &args(&["--train.epochs", "0"])).is_err());
        assert!(RunConfig::load(None, &args(&["--train.epochs"])).is_err());
        assert!(RunConfig::load(None, &args(&["epochs"])).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = RunConfig::load(None, &args(&["--train.seed", "7", "--train.class_weights", "[1.0, 3.0]"])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, cfg.to_toml()).unwrap();
        assert_eq!(RunConfig::load(Some(&p), &[]).unwrap(), cfg);
    }
}
