//! Layered `key=value` run configuration: preset, then config file, then
//! command-line overrides.

use std::fs;
use std::path::Path;

use datr_core::model::ModelConfig;
use datr_core::trainer::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self, CliError> {
        let train = match name {
            "toy" => TrainConfig::toy(),
            "paper" => TrainConfig::paper(),
            other => return Err(CliError::Usage(format!("unknown preset `{other}` (toy or paper)"))),
        };
        Ok(RunConfig {
            preset: name.to_string(),
            model: ModelConfig::preset(name)?,
            train,
        })
    }

    /// Builds the effective configuration. `model_keys` says whether model
    /// settings are accepted; they are fixed by the checkpoint otherwise.
    pub fn resolve(
        preset: Option<&str>,
        file: Option<&Path>,
        overrides: &[String],
        seed: Option<u64>,
        model_keys: bool,
    ) -> Result<Self, CliError> {
        let mut pairs = Vec::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::Usage(format!("config {}:{}: expected key=value", path.display(), n + 1))
                })?;
                pairs.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{o}` is not key=value")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }

        let from_file = pairs.iter().rev().find(|(k, _)| k == "preset").map(|(_, v)| v.as_str());
        let mut cfg = Self::preset(preset.or(from_file).unwrap_or("toy"))?;
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            let usage = |e: datr_core::Error| CliError::Usage(e.to_string());
            if cfg.train.apply(k, v).map_err(usage)? {
                continue;
            }
            if cfg.model.apply(k, v).map_err(usage)? {
                if !model_keys {
                    return Err(CliError::Usage(format!("`{k}` is fixed by the checkpoint")));
                }
                continue;
            }
            return Err(CliError::Usage(format!("unknown setting `{k}`")));
        }
        if let Some(s) = seed {
            cfg.train.seed = s;
        }
        cfg.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        format!("preset={}\n{}{}", self.preset, self.model.to_text(), self.train.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# comment\nepochs = 7\nseed=3\nembed_dim=8\n").unwrap();
        let cfg = RunConfig::resolve(None, Some(&path), &["epochs=9".into()], Some(11), true).unwrap();
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.train.seed, 11);
        assert_eq!(cfg.model.encoder.embed_dim, 8);
    }

    #[test]
    fn rejects_unknown_and_fixed_keys() {
        assert!(matches!(
            RunConfig::resolve(None, None, &["nope=1".into()], None, true),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            RunConfig::resolve(None, None, &["window=2".into()], None, false),
            Err(CliError::Usage(_))
        ));
        assert!(RunConfig::resolve(Some("big"), None, &[], None, true).is_err());
    }

    #[test]
    fn text_lists_every_setting() {
        let cfg = RunConfig::preset("paper").unwrap();
        let text = cfg.to_text();
        assert!(text.starts_with("preset=paper\n"));
        assert!(text.contains("input_height=512") && text.contains("epochs=100"));
    }
}
