//! Flat `key = value` text format shared by training configs and the
//! architecture header of checkpoints. `#` starts a comment.

use std::str::FromStr;

use crate::error::{Error, Result};

pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1)));
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if out.iter().any(|(seen, _): &(String, String)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key {k}", lineno + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

/// Comma-separated list of exactly `N` values.
pub fn parse_list<T: FromStr + Copy + Default, const N: usize>(key: &str, value: &str) -> Result<[T; N]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(Error::Config(format!("{key}: expected {N} comma-separated values, got {value:?}")));
    }
    let mut out = [T::default(); N];
    for (slot, p) in out.iter_mut().zip(parts) {
        *slot = parse_value(key, p)?;
    }
    Ok(out)
}

pub fn join_list<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}
