//! Experiment configuration: one TOML document with a section per stage.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use co2_core::data::SyntheticSpec;
use co2_core::eval::{FinetuneConfig, ProbeConfig};
use co2_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub alpha: Vec<f64>,
    pub tau_con: Vec<f64>,
    /// Cells run concurrently on up to this many threads.
    pub parallel: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            alpha: vec![0.0, 1.0, 10.0, 20.0],
            tau_con: vec![0.04, 0.05],
            parallel: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub finetune: FinetuneConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    /// Reads `path` (or starts empty), applies `key=value` overrides, fills
    /// everything else from defaults and finally applies `seed`.
    pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let (mut table, origin) = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                let table: toml::Table =
                    toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
                (table, p.display().to_string())
            }
            None => (toml::Table::new(), "<defaults>".to_string()),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: Self = toml::Value::Table(table)
            .try_into()
            .with_context(|| format!("invalid configuration in {origin}"))?;
        if let Some(seed) = seed {
            cfg.set_seed(seed);
        }
        cfg.train.validate().context("invalid [train] section")?;
        cfg.data.validate().context("invalid [data] section")?;
        if cfg.data.input_dim != cfg.train.encoder.input_dim {
            bail!(
                "data.input_dim = {} but train.encoder.input_dim = {}",
                cfg.data.input_dim,
                cfg.train.encoder.input_dim
            );
        }
        Ok(cfg)
    }

    /// One seed drives data generation, training, encoder init and the
    /// fine-tuning subset.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.center_seed = seed;
        self.train = self.train.clone().with_seed(seed);
        self.finetune.seed = seed;
    }
}

/// Sets `a.b.c = value` inside `table`. The value is parsed as a TOML value
/// when possible and taken as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!("override `{assignment}` is not of the form key=value");
    };
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` has an empty component");
    }
    let value = parse_value(raw.trim());
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cursor = table;
    for part in parents {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override `{key}`: `{part}` is not a section"),
        };
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use co2_core::trainer::LrSchedule;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn empty_config_is_default() {
        assert_eq!(ExperimentConfig::resolve(None, &[], None).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let f = write("[train]\nalpha = 0.0\n[train.encoder]\nhidden_dims = [8, 8]\n");
        let cfg = ExperimentConfig::resolve(Some(f.path()), &[], None).unwrap();
        assert_eq!(cfg.train.alpha, 0.0);
        assert_eq!(cfg.train.encoder.hidden_dims, vec![8, 8]);
        assert_eq!(cfg.train.tau_con, 0.04);
        assert_eq!(cfg.probe, ProbeConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let f = write("[train]\nalpah = 3\n");
        let err = ExperimentConfig::resolve(Some(f.path()), &[], None).unwrap_err();
        assert!(format!("{err:#}").contains("alpah"), "{err:#}");
        let err = ExperimentConfig::resolve(None, &["trian.alpha=1".into()], None).unwrap_err();
        assert!(format!("{err:#}").contains("trian"), "{err:#}");
    }

    #[test]
    fn overrides_parse_toml_values() {
        let cfg = ExperimentConfig::resolve(
            None,
            &[
                "train.alpha=0".into(),
                "train.tau_con = 0.05".into(),
                "train.encoder.hidden_dims=[16]".into(),
                "train.encoder.head=linear".into(),
                "train.lr_schedule={kind=\"step\", milestones=[120, 160], factor=0.1}".into(),
            ],
            None,
        )
        .unwrap();
        assert_eq!(cfg.train.alpha, 0.0);
        assert_eq!(cfg.train.tau_con, 0.05);
        assert_eq!(cfg.train.encoder.hidden_dims, vec![16]);
        assert_eq!(cfg.train.encoder.head, co2_core::encoder::Head::Linear);
        assert!(matches!(cfg.train.lr_schedule, LrSchedule::Step { .. }));
    }

    #[test]
    fn overrides_win_over_file() {
        let f = write("[train]\nalpha = 3.0\n");
        let cfg = ExperimentConfig::resolve(Some(f.path()), &["train.alpha=7".into()], None).unwrap();
        assert_eq!(cfg.train.alpha, 7.0);
    }

    #[test]
    fn seed_fans_out() {
        let cfg = ExperimentConfig::resolve(None, &[], Some(42)).unwrap();
        assert_eq!(cfg.data.center_seed, 42);
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.train.encoder.init_seed, 42);
        assert_eq!(cfg.finetune.seed, 42);
    }

    #[test]
    fn malformed_overrides() {
        assert!(ExperimentConfig::resolve(None, &["train.alpha".into()], None).is_err());
        assert!(ExperimentConfig::resolve(None, &["train..alpha=1".into()], None).is_err());
        assert!(ExperimentConfig::resolve(None, &["train.alpha=-1".into()], None).is_err());
    }

    #[test]
    fn mismatched_input_dim_is_rejected() {
        let err = ExperimentConfig::resolve(None, &["data.input_dim=8".into()], None).unwrap_err();
        assert!(err.to_string().contains("input_dim"));
    }
}
