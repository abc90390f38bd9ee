//! Flat `section.key = value` configuration files.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! There is no nesting. Typed config structs implement [`KvConfig`] and
//! reject keys they do not document.

use std::fmt::Display;
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KvEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse_kv(text: &str) -> Result<Vec<KvEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("line {}: expected `key = value`", i + 1))
        })?;
        let key = k.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(Error::InvalidConfig(format!(
                "line {}: bad key `{key}`",
                i + 1
            )));
        }
        out.push(KvEntry {
            key: key.to_string(),
            value: v.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

/// Parses a command-line override `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override `{s}` is not key=value")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "override `{s}` has an empty key"
        )));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

pub fn render_kv(entries: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(v);
        s.push('\n');
    }
    s
}

/// A configuration struct settable from flat keys.
pub trait KvConfig {
    /// Applies one key. Unknown keys yield [`Error::UnknownKey`].
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    /// Every documented key with its current value, in a stable order.
    fn entries(&self) -> Vec<(String, String)>;

    fn apply_text(&mut self, text: &str) -> Result<()> {
        for e in parse_kv(text)? {
            self.set(&e.key, &e.value)?;
        }
        Ok(())
    }

    fn to_text(&self) -> String {
        render_kv(&self.entries())
    }
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse::<T>().map_err(|_| Error::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::InvalidValue {
            key: key.to_string(),
            value: value.to_string(),
        }),
    }
}

pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|s| parse_value(key, s.trim()))
        .collect()
}

pub fn render_list<T: Display>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub(crate) fn kv(key: &str, value: impl Display) -> (String, String) {
    (key.to_string(), value.to_string())
}
