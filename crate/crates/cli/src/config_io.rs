//! Loading run configs from TOML with presets and `key=value` overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use situ3d::config::RunConfig;
use toml::{Table, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Default,
    Smoke,
}

impl Preset {
    pub fn config(self) -> RunConfig {
        match self {
            Preset::Default => RunConfig::default(),
            Preset::Smoke => RunConfig::smoke(),
        }
    }
}

fn to_table(cfg: &RunConfig) -> Result<Table> {
    let text = toml::to_string(cfg).context("serializing config")?;
    Ok(toml::from_str(&text)?)
}

/// Recursively overlays `top` onto `base`, rejecting keys the base lacks.
fn merge(base: &mut Table, top: Table, path: &str) -> Result<()> {
    for (k, v) in top {
        let full = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t, &full)?,
            (Some(slot), v) => *slot = v,
            (None, _) => bail!("unknown config key `{full}`"),
        }
    }
    Ok(())
}

/// Parses the right-hand side of `--set` as a TOML value, falling back to a
/// bare string.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not of the form key=value"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        cur = match cur.get_mut(*p) {
            Some(Value::Table(t)) => t,
            _ => bail!("unknown config key `{key}`"),
        };
    }
    match cur.get_mut(*last) {
        Some(slot @ Value::Table(_)) => bail!("`{key}` is a section; set one of its fields ({slot})"),
        Some(slot) => {
            *slot = parse_value(raw.trim());
            Ok(())
        }
        None => bail!("unknown config key `{key}`"),
    }
}

/// Preset, then the optional file, then each override in order.
pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = to_table(&preset.config())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let top: Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        merge(&mut table, top, "")?;
    }
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: RunConfig = Value::Table(table).try_into().context("invalid config")?;
    cfg.validate().context("invalid config")?;
    Ok(cfg)
}

pub fn to_toml(cfg: &RunConfig) -> Result<String> {
    Ok(toml::to_string_pretty(cfg)?)
}

pub fn load_resolved(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}
