//! `key = value` run configuration.
//!
//! A config file is plain `key = value` lines with `#` comments. Files this
//! tool writes carry their resolved configuration and can be fed back as
//! `--config`: CSV outputs in `# key = value` header lines after the
//! `# schema = ...` marker, JSON reports in their `resolved` object and
//! `PSBR` containers in the `meta/config` section.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use sparse_prox::Container;

/// Keys accepted but not acted upon.
const IGNORED: &[&str] = &["command", "schema"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

/// Parses plain `key = value` text.
pub fn parse_plain(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected `key = value`", i + 1))?;
        out.insert(normalize(k), v.trim().to_owned());
    }
    Ok(out)
}

/// Header lines `# key = value` of a CSV this tool wrote.
fn parse_csv_header(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let Some(rest) = line.strip_prefix('#') else { break };
        if let Some((k, v)) = rest.split_once('=') {
            out.insert(normalize(k), v.trim().to_owned());
        }
    }
    Ok(out)
}

fn parse_json(text: &str) -> Result<BTreeMap<String, String>> {
    let v: serde_json::Value = serde_json::from_str(text).context("config is not valid JSON")?;
    let obj = v
        .get("resolved")
        .and_then(|r| r.as_object())
        .ok_or_else(|| anyhow!("JSON config has no `resolved` object"))?;
    obj.iter()
        .map(|(k, v)| {
            let v = v.as_str().map(str::to_owned).unwrap_or_else(|| v.to_string());
            Ok((normalize(k), v))
        })
        .collect()
}

/// Reads any supported config source.
pub fn load(path: &Path) -> Result<BTreeMap<String, String>> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read config {}", path.display()))?;
    if bytes.starts_with(sparse_prox::container::MAGIC) {
        let c = Container::from_bytes(&bytes)?;
        return match c.config_text()? {
            Some(t) => parse_plain(&t),
            None => bail!("{} carries no embedded config", path.display()),
        };
    }
    let text = String::from_utf8(bytes).with_context(|| format!("{} is not UTF-8 text", path.display()))?;
    if text.trim_start().starts_with('{') {
        parse_json(&text)
    } else if text.starts_with("# schema = psbr-") {
        parse_csv_header(&text)
    } else {
        parse_plain(&text)
    }
}

impl Settings {
    /// Defaults, overridden by the file, overridden by flags. Rejects file
    /// keys outside `defaults`.
    pub fn resolve(
        defaults: &[(&str, String)],
        file: &BTreeMap<String, String>,
        flags: &[(&str, Option<String>)],
    ) -> Result<Self> {
        let mut values: BTreeMap<String, String> =
            defaults.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        for (k, v) in file {
            if IGNORED.contains(&k.as_str()) || k.starts_with("machine.") {
                continue;
            }
            if !values.contains_key(k) {
                bail!("unknown config key `{k}`");
            }
            values.insert(k.clone(), v.clone());
        }
        for (k, v) in flags {
            if let Some(v) = v {
                values.insert(k.to_string(), v.clone());
            }
        }
        Ok(Self { values })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T>(&self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.raw(key)
            .parse()
            .map_err(|e| anyhow!("invalid value `{}` for `{key}`: {e}", self.raw(key)))
    }

    /// `none` (or empty) maps to `None`.
    pub fn get_opt<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.raw(key) {
            "" | "none" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            "true" | "on" | "yes" | "1" => Ok(true),
            "false" | "off" | "no" | "0" => Ok(false),
            other => bail!("invalid value `{other}` for `{key}`: expected true or false"),
        }
    }

    pub fn get_list<T>(&self, key: &str) -> Result<Vec<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| anyhow!("invalid entry `{s}` in `{key}`: {e}")))
            .collect()
    }

    /// Resolved configuration as `key = value` lines, led by `command`.
    pub fn to_text(&self, command: &str) -> String {
        let mut s = format!("command = {command}\n");
        for (k, v) in &self.values {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Same lines as [`Self::to_text`], as CSV comment headers.
    pub fn to_csv_header(&self, schema: &str, command: &str) -> String {
        let mut s = format!("# schema = {schema}\n");
        for line in self.to_text(command).lines() {
            s.push_str(&format!("# {line}\n"));
        }
        s
    }

    pub fn map(&self) -> &BTreeMap<String, String> {
        &self.values
    }
}
