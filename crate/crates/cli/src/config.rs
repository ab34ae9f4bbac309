//! Loading run configurations from TOML with command-line overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use iwol_core::RunConfig;
use toml::{Table, Value};

/// Sections searched, in order, for a key given without a section prefix.
const SECTIONS: [&str; 4] = ["train", "traffic_junction", "simple_navigation", "material_transport"];

pub fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
    text.parse::<Table>()
        .with_context(|| format!("{} is not valid TOML", path.display()))
}

/// Parses `raw` as a TOML value, falling back to a plain string.
pub fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn insert_path(table: &mut Table, path: &[&str], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| anyhow!("empty key"))?;
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("`{p}` is not a section"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parses(table: &Table) -> bool {
    Value::Table(table.clone()).try_into::<RunConfig>().is_ok()
}

/// Sets `key` (dotted, or bare to search the top level and then each
/// section) and returns the fully qualified key that was used.
pub fn apply_override(table: &mut Table, key: &str, value: Value) -> Result<String> {
    let candidates: Vec<String> = if key.contains('.') {
        vec![key.to_string()]
    } else {
        std::iter::once(key.to_string())
            .chain(SECTIONS.iter().map(|s| format!("{s}.{key}")))
            .collect()
    };
    let mut first_error = None;
    for cand in &candidates {
        let mut trial = table.clone();
        let parts: Vec<&str> = cand.split('.').collect();
        insert_path(&mut trial, &parts, value.clone())?;
        match Value::Table(trial.clone()).try_into::<RunConfig>() {
            Ok(_) => {
                *table = trial;
                return Ok(cand.clone());
            }
            Err(e) if first_error.is_none() && !e.to_string().contains("unknown field") => {
                first_error = Some(format!("{cand}: {e}"))
            }
            Err(_) => {}
        }
    }
    match first_error {
        Some(e) => bail!("invalid value for `{key}`: {e}"),
        None if parses(table) => bail!("unknown config key `{key}`"),
        None => bail!("cannot apply `{key}` to a configuration that does not parse"),
    }
}

/// Splits `key=value`.
pub fn split_assignment(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| anyhow!("override `{s}` is not of the form key=value"))
}

pub fn materialize(table: Table) -> Result<RunConfig> {
    let config: RunConfig = Value::Table(table).try_into().context("invalid configuration")?;
    config.validate().context("invalid configuration")?;
    Ok(config)
}

/// Reads `path` and applies `key=value` overrides in order.
pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let mut table = read_table(path)?;
    for o in overrides {
        let (k, v) = split_assignment(o)?;
        apply_override(&mut table, k, parse_value(v))?;
    }
    materialize(table)
}
