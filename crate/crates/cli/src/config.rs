//! `--config FILE` support: keys of a JSON object become flags of the
//! chosen subcommand unless the same flag is already on the command line.

use std::ffi::OsString;
use std::fs;

use serde_json::Value;

fn flag_name(key: &str) -> String {
    format!("--{}", key.replace('_', "-"))
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Removes `--config FILE` (or `--config=FILE`) from `args` and appends the
/// file's entries as flags.
pub fn merge(mut args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(i) = args
        .iter()
        .position(|a| a == "--config" || a.to_string_lossy().starts_with("--config="))
    else {
        return Ok(args);
    };
    let first = args.remove(i).to_string_lossy().into_owned();
    let path = match first.strip_prefix("--config=") {
        Some(p) => p.to_string(),
        None => {
            if i >= args.len() {
                return Err("--config needs a file argument".into());
            }
            args.remove(i).to_string_lossy().into_owned()
        }
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| format!("config {path}: {e}"))?;
    let Value::Object(map) = value else {
        return Err(format!("config {path} must hold a JSON object"));
    };
    let given: Vec<String> = args
        .iter()
        .map(|a| a.to_string_lossy().split('=').next().unwrap_or_default().to_string())
        .collect();
    for (key, v) in map {
        let flag = flag_name(&key);
        if given.contains(&flag) {
            continue;
        }
        match &v {
            Value::Null | Value::Bool(false) => {}
            Value::Bool(true) => args.push(flag.into()),
            Value::Array(items) => {
                let parts = items
                    .iter()
                    .map(scalar)
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| format!("config key `{key}`: arrays must hold scalars"))?;
                if !parts.is_empty() {
                    args.push(format!("{flag}={}", parts.join(",")).into());
                }
            }
            Value::Object(_) => return Err(format!("config key `{key}`: nested objects are not flags")),
            other => args.push(format!("{flag}={}", scalar(other).unwrap_or_default()).into()),
        }
    }
    Ok(args)
}
