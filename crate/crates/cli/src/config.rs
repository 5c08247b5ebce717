//! `--config file.json` support.
//!
//! The config is a flat JSON object whose keys are flag names (`max_iters`
//! or `max-iters`). Its entries are spliced into argv right after the
//! subcommand, ahead of the user's own flags; with `args_override_self`
//! the later, explicit flags win.

use std::ffi::OsString;
use std::fs;

use anyhow::{bail, Context, Result};
use serde_json::Value;

/// Returns argv with the config (if any) expanded into flags.
pub fn expand_args(raw: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    let mut rest = Vec::with_capacity(raw.len());
    let mut it = raw.into_iter();
    while let Some(arg) = it.next() {
        let text = arg.to_string_lossy();
        if text == "--config" {
            let Some(p) = it.next() else {
                bail!("--config needs a file path")
            };
            path = Some(p);
        } else if let Some(p) = text.strip_prefix("--config=") {
            path = Some(OsString::from(p));
        } else {
            rest.push(arg);
        }
    }
    let Some(path) = path else { return Ok(rest) };
    let text = fs::read_to_string(&path)
        .with_context(|| format!("reading config {}", path.to_string_lossy()))?;
    let value: Value = serde_json::from_str(&text).context("parsing config JSON")?;
    let injected = config_flags(&value)?;
    // argv[0], subcommand, config flags, user flags
    let split = rest.len().min(2);
    let mut out: Vec<OsString> = rest[..split].to_vec();
    out.extend(injected.into_iter().map(OsString::from));
    out.extend(rest[split..].iter().cloned());
    Ok(out)
}

fn config_flags(value: &Value) -> Result<Vec<String>> {
    let Value::Object(map) = value else {
        bail!("config must be a JSON object")
    };
    let mut out = Vec::new();
    for (key, v) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        if flag == "--config" {
            bail!("config files cannot include other configs");
        }
        match v {
            Value::Bool(true) => out.push(flag),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                let parts: Result<Vec<String>> = items.iter().map(scalar).collect();
                out.push(flag);
                out.push(parts?.join(","));
            }
            other => {
                out.push(flag);
                out.push(scalar(other)?);
            }
        }
    }
    Ok(out)
}

fn scalar(v: &Value) -> Result<String> {
    Ok(match v {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        Value::Bool(b) => b.to_string(),
        other => bail!("unsupported config value {other}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flattens_values() {
        let flags = config_flags(
            &json!({"dims": [32, 32, 8], "seed": 3, "max_iters": 5, "verbose": true, "off": false}),
        )
        .unwrap();
        assert_eq!(
            flags,
            [
                "--dims",
                "32,32,8",
                "--max-iters",
                "5",
                "--seed",
                "3",
                "--verbose"
            ]
        );
    }

    #[test]
    fn config_goes_before_user_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"seed": 1}"#).unwrap();
        let args: Vec<OsString> = [
            "dcepk",
            "mask",
            "--config",
            p.to_str().unwrap(),
            "--seed",
            "2",
        ]
        .iter()
        .map(OsString::from)
        .collect();
        let out = expand_args(args).unwrap();
        assert_eq!(
            out,
            ["dcepk", "mask", "--seed", "1", "--seed", "2"].map(OsString::from)
        );
    }

    #[test]
    fn rejects_nested_config() {
        assert!(config_flags(&json!({"config": "x.json"})).is_err());
        assert!(config_flags(&json!([1, 2])).is_err());
    }
}
