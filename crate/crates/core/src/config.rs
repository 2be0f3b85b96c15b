//! `key = value` configuration files with `#` comments.
//!
//! Readers pull the keys they understand; `finish` rejects anything left
//! over so a misspelled key fails before any work starts.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {line_no}: expected `key = value`, got {line:?}"
                ))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {line_no}: empty key")));
            }
            if let Some((first, _)) =
                entries.insert(key.to_string(), (line_no, value.trim().to_string()))
            {
                return Err(Error::Config(format!(
                    "line {line_no}: key {key:?} already set on line {first}"
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Removes and parses `key`, if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, value)) => value.parse().map(Some).map_err(|e| {
                Error::Config(format!("line {line}: bad value {value:?} for {key}: {e}"))
            }),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn take_required<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.take(key)?
            .ok_or_else(|| Error::Config(format!("missing required key {key:?}")))
    }

    /// Parses `on|off|true|false|1|0`.
    pub fn take_flag(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some((line, value)) => match value.as_str() {
                "on" | "true" | "1" | "yes" => Ok(true),
                "off" | "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!(
                    "line {line}: {key} must be on or off, got {value:?}"
                ))),
            },
        }
    }

    pub fn finish(self) -> Result<()> {
        match self.entries.iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => {
                let all: Vec<&str> = self.entries.keys().map(String::as_str).collect();
                Err(Error::Config(format!(
                    "line {line}: unknown key {key:?} (unrecognised: {})",
                    all.join(", ")
                )))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects_leftovers() {
        let mut kv =
            KeyValues::parse("# run\nlr = 0.001  # step size\n\nmodel=tscnn\naugment = on\n")
                .unwrap();
        assert_eq!(kv.take::<f64>("lr").unwrap(), Some(0.001));
        assert_eq!(kv.take_or("epochs", 5usize).unwrap(), 5);
        assert!(kv.take_flag("augment", false).unwrap());
        assert!(kv.clone().finish().is_err());
        assert_eq!(kv.take_required::<String>("model").unwrap(), "tscnn");
        kv.finish().unwrap();
    }

    #[test]
    fn malformed_lines() {
        assert!(KeyValues::parse("just words").is_err());
        assert!(KeyValues::parse(" = 3").is_err());
        let err = KeyValues::parse("a = 1\na = 2").unwrap_err();
        assert!(err.to_string().contains("line 2"));
        let mut kv = KeyValues::parse("epochs = many").unwrap();
        assert!(kv.take::<usize>("epochs").is_err());
        let mut kv = KeyValues::parse("augment = maybe").unwrap();
        assert!(kv.take_flag("augment", false).is_err());
        let err = KeyValues::parse("lrr = 1").unwrap().finish().unwrap_err();
        assert!(err.to_string().contains("lrr"));
    }
}
