//! Flat key-value configuration files and flag overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use attend::pipeline::ExperimentConfig;

use crate::failure::Failure;

/// Reads a flat TOML file of `key = value` pairs into a config. Arrays are
/// accepted for the list keys and joined with commas.
pub fn load(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|_| Failure::MissingInput(path.to_path_buf()))?;
    parse(&text).with_context(|| format!("reading {}", path.display()))
}

pub fn parse(text: &str) -> Result<ExperimentConfig> {
    let table: toml::Table = text.parse().map_err(|e| Failure::InvalidConfig(format!("{e}")))?;
    let mut config = ExperimentConfig::default();
    for (key, value) in &table {
        let flat = flatten(key, value)?;
        config
            .set(key, &flat)
            .map_err(|e| Failure::InvalidConfig(e.to_string()))?;
    }
    config.validate().map_err(|e| Failure::InvalidConfig(e.to_string()))?;
    Ok(config)
}

fn flatten(key: &str, value: &toml::Value) -> Result<String> {
    use toml::Value;
    Ok(match value {
        Value::String(s) => s.clone(),
        Value::Integer(i) => i.to_string(),
        Value::Float(f) => f.to_string(),
        Value::Boolean(b) => b.to_string(),
        Value::Array(items) => items
            .iter()
            .map(|v| flatten(key, v))
            .collect::<Result<Vec<_>>>()?
            .join(","),
        _ => bail!(Failure::InvalidConfig(format!("`{key}` must be a scalar or a list"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use attend::weighting::WeightScheme;

    #[test]
    fn reads_scalars_and_lists() {
        let c = parse("num_users = 12\nweighting = \"inv\"\ndepth_grid = [2, 3]\ncompress = false\n").unwrap();
        assert_eq!(c.generation.num_users, 12);
        assert_eq!(c.weighting, WeightScheme::InverseFrequency);
        assert_eq!(c.gbt.depth_grid, vec![2, 3]);
        assert!(!c.compress);
    }

    #[test]
    fn written_config_reads_back() {
        let mut c = ExperimentConfig::default();
        c.set("seq_len", "30").unwrap();
        c.set("holidays", "3,4").unwrap();
        assert_eq!(parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_keys_and_nesting() {
        let e = parse("bogus = 1").unwrap_err();
        assert!(matches!(e.downcast_ref::<Failure>(), Some(Failure::InvalidConfig(_))));
        assert!(parse("[section]\nx = 1").is_err());
        assert!(parse("patience = 0").is_err());
    }
}
