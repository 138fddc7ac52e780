//! Flat `key = value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored. Keys must be unique
//! and every key must be consumed by the reader, so typos fail loudly.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate key {key:?}"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    /// Removes `key` and parses it, leaving `slot` untouched when absent.
    pub fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some((v, line)) = self.entries.remove(key) {
            *slot = v.parse().map_err(|e| Error::Parse {
                line,
                message: format!("{key}: {e}"),
            })?;
        }
        Ok(())
    }

    pub fn take_bool(&mut self, key: &str, slot: &mut bool) -> Result<()> {
        if let Some((v, line)) = self.entries.remove(key) {
            *slot = match v.as_str() {
                "1" | "true" | "yes" | "on" => true,
                "0" | "false" | "no" | "off" => false,
                other => {
                    return Err(Error::Parse {
                        line,
                        message: format!("{key}: not a boolean: {other:?}"),
                    })
                }
            };
        }
        Ok(())
    }

    /// Errors if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (_, line))) => Err(Error::Parse {
                line,
                message: format!("unknown key {k:?}"),
            }),
        }
    }
}
