//! Layered configuration: defaults < TOML file < `MODELAB__SECTION__KEY`
//! environment variables < `--set section.key=value` flags.

use std::path::Path;

use anyhow::Result;
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::Failure;

pub const ENV_PREFIX: &str = "MODELAB__";

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `raw` as a TOML value, falling back to a bare string.
fn literal(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| Failure::Config("empty key".into()))?;
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(Failure::Config(format!("`{p}` is not a section")).into()),
        };
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Resolves a configuration of type `C` from its defaults and the given
/// layers. Unknown keys are rejected by `C`'s deserializer.
pub fn resolve<C>(file: Option<&Path>, env: impl IntoIterator<Item = (String, String)>, sets: &[String]) -> Result<C>
where
    C: Serialize + DeserializeOwned + Default,
{
    let mut table = Table::try_from(C::default()).map_err(|e| Failure::Config(format!("defaults: {e}")))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
        let over: Table =
            toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        merge(&mut table, over);
    }
    let mut env: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    env.sort();
    for (key, raw) in env {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
        set_path(&mut table, &path, literal(&raw))?;
    }
    for s in sets {
        let (key, raw) = s.split_once('=').ok_or_else(|| Failure::Config(format!("`--set {s}` is not key=value")))?;
        let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
        set_path(&mut table, &path, literal(raw.trim()))?;
    }
    Ok(Value::Table(table).try_into().map_err(|e| Failure::Config(format!("invalid configuration: {e}")))?)
}
