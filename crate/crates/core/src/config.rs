//! Flat `key = value` configuration text.
//!
//! One setting per line; `#` starts a comment line; blank lines are ignored.
//! Booleans accept `true/false`, `on/off`, `yes/no` and `1/0`.

use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses configuration text into ordered `(key, value)` pairs.
pub fn parse_kv(text: &str, label: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: label.into(),
                line: n + 1,
                msg: format!("expected 'key = value', got {line:?}"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Parse {
                path: label.into(),
                line: n + 1,
                msg: "empty key".into(),
            });
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Parse {
                path: label.into(),
                line: n + 1,
                msg: format!("duplicate key '{k}'"),
            });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for '{key}'")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for '{key}'"))),
    }
}

pub fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}
