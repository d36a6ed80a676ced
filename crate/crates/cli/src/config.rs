//! Run config loading: TOML file, then `--set` overrides, then validation.

use std::path::Path;

use anyhow::{anyhow, Context, Result};
use toml::{Table, Value};
use tvc_core::trainer::RunConfig;

use crate::{ConfigArgs, Failure};

impl ConfigArgs {
    /// Loads `--config`, or `fallback` when it is absent, or the defaults.
    pub fn load_or(&self, fallback: Option<&Path>) -> Result<RunConfig> {
        let text = match self.config.as_deref().or(fallback) {
            Some(path) => Some(
                std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))
                    .context(Failure::Config)?,
            ),
            None => None,
        };
        parse(text.as_deref(), &self.set).context(Failure::Config)
    }

    pub fn load(&self) -> Result<RunConfig> {
        self.load_or(None)
    }
}

/// Parses `text` (or the defaults), applies the overrides and validates.
pub fn parse(text: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = match text {
        Some(t) => t.parse::<Table>().map_err(|e| anyhow!("{}", e.to_string().trim_end()))?,
        None => Table::try_from(RunConfig::default()).expect("defaults serialize"),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let config: RunConfig = Value::Table(table).try_into().map_err(|e: toml::de::Error| anyhow!("{}", e.message()))?;
    config.validate()?;
    Ok(config)
}

/// Sets `a.b.c=value`. The value is read as a TOML literal when it parses
/// as one and as a bare string otherwise.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not of the form KEY=VALUE"))?;
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(anyhow!("override key `{key}` has an empty segment"));
    }
    let (last, parents) = path.split_last().expect("split yields one segment");
    let mut node = table;
    for p in parents {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{key}`: `{p}` is not a table"))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

pub fn to_toml(config: &RunConfig) -> String {
    toml::to_string_pretty(config).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_take_precedence_and_keep_types() {
        let c = parse(Some("version = 1\n[train]\niters = 5\n"), &["train.iters=7".into(), "tta.learning_rate=1e-3".into()])
            .unwrap();
        assert_eq!(c.train.iters, 7);
        assert_eq!(c.tta.learning_rate, 1e-3);
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::desk();
        assert_eq!(parse(Some(&to_toml(&c)), &[]).unwrap(), c);
    }

    #[test]
    fn errors_name_the_field() {
        let e = parse(Some("[train]\niters = 5\n"), &[]).unwrap_err().to_string();
        assert!(e.contains("version"), "{e}");
        let e = parse(Some("version = 1\n[train]\niter = 5\n"), &[]).unwrap_err().to_string();
        assert!(e.contains("iter"), "{e}");
        let e = parse(Some("version = 1\n[train\n"), &[]).unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
    }
}
