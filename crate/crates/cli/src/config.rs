//! `--config` files: top-level TOML keys become long flags appended to the
//! command line unless the flag was given explicitly.

use std::ffi::OsString;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config key {key}: {message}")]
    Value { key: String, message: String },
}

impl ConfigError {
    pub fn exit_code(&self) -> u8 {
        match self {
            ConfigError::Read { .. } | ConfigError::Parse { .. } => 2,
            ConfigError::Value { .. } => 3,
        }
    }
}

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().map(|a| a.to_string_lossy());
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().map(|v| PathBuf::from(v.as_ref()));
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

fn scalar(key: &str, v: &toml::Value) -> Result<String, ConfigError> {
    match v {
        toml::Value::String(s) => Ok(s.clone()),
        toml::Value::Integer(i) => Ok(i.to_string()),
        toml::Value::Float(f) => Ok(f.to_string()),
        toml::Value::Datetime(d) => Ok(d.to_string()),
        _ => Err(ConfigError::Value {
            key: key.to_string(),
            message: "expected a string, number, date or a list of those".into(),
        }),
    }
}

/// Command line with config defaults appended.
pub fn merged_args(args: Vec<OsString>) -> Result<Vec<OsString>, ConfigError> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Read {
        path: path.clone(),
        source,
    })?;
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
        path: path.clone(),
        message: e.message().to_string(),
    })?;
    let given: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut out = args;
    for (key, value) in &table {
        let flag = format!("--{}", key.replace('_', "-"));
        let explicit = given
            .iter()
            .any(|a| *a == flag || a.starts_with(&format!("{flag}=")));
        if explicit || flag == "--config" {
            continue;
        }
        match value {
            toml::Value::Boolean(true) => out.push(flag.into()),
            toml::Value::Boolean(false) => {}
            toml::Value::Array(items) => {
                let parts = items.iter().map(|v| scalar(key, v)).collect::<Result<Vec<_>, _>>()?;
                out.push(flag.into());
                out.push(parts.join(",").into());
            }
            other => {
                out.push(flag.into());
                out.push(scalar(key, other)?.into());
            }
        }
    }
    Ok(out)
}
