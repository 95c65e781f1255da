//! Config files: keys mirror long flags and are spliced into the argument
//! list ahead of the user's own flags, which therefore win.

use std::ffi::OsString;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::Parser;
use serde_json::Value;

use crate::cli::Cli;

pub fn parse(argv: Vec<OsString>) -> Result<Cli, ExitCode> {
    let first = Cli::try_parse_from(&argv).map_err(usage)?;
    let Some(path) = first.config.clone() else {
        return Ok(first);
    };
    let table = load(&path).map_err(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(1)
    })?;
    let merged = splice(&argv, &table, first.command.name()).map_err(|e| {
        eprintln!("error: {}: {e:#}", path.display());
        ExitCode::from(1)
    })?;
    Cli::try_parse_from(merged).map_err(usage)
}

fn usage(e: clap::Error) -> ExitCode {
    let _ = e.print();
    if e.use_stderr() {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

pub fn load(path: &Path) -> anyhow::Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        let t: toml::Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
        serde_json::to_value(t)?
    };
    if !value.is_object() {
        bail!("{}: expected a table of options", path.display());
    }
    Ok(value)
}

fn flags(table: &serde_json::Map<String, Value>, skip_tables: bool) -> anyhow::Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (key, value) in table {
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            Value::Object(_) if skip_tables => {}
            Value::Bool(true) => out.push(flag.into()),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                for item in items {
                    out.push(flag.clone().into());
                    out.push(scalar(key, item)?.into());
                }
            }
            other => {
                out.push(flag.into());
                out.push(scalar(key, other)?.into());
            }
        }
    }
    Ok(out)
}

fn scalar(key: &str, v: &Value) -> anyhow::Result<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        _ => bail!("option {key} must be a string, number or boolean"),
    }
}

fn splice(argv: &[OsString], table: &Value, command: &str) -> anyhow::Result<Vec<OsString>> {
    let map = table.as_object().expect("checked in load");
    let globals = flags(map, true)?;
    let local = match map.get(command) {
        Some(Value::Object(t)) => flags(t, false)?,
        Some(_) => bail!("[{command}] must be a table"),
        None => Vec::new(),
    };
    let pos = argv.iter().skip(1).position(|a| a == command).map(|p| p + 1).unwrap_or(argv.len());
    let mut out = vec![argv[0].clone()];
    out.extend(globals);
    out.extend_from_slice(&argv[1..=pos.min(argv.len() - 1)]);
    out.extend(local);
    out.extend_from_slice(&argv[(pos + 1).min(argv.len())..]);
    Ok(out)
}
