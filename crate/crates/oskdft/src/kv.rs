//! Flat `key = value` text format.
//!
//! One key per line, `#` starts a comment, blank lines ignored. Readers track
//! which keys were consumed so unknown keys can be rejected fail-fast.

use crate::error::{Error, Result};
use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};

pub struct Kv {
    map: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl Kv {
    pub fn parse(text: &str) -> Result<Kv> {
        let mut map = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(Error::Parse {
                line: idx + 1,
                msg: format!("expected `key = value`, got `{raw}`"),
            })?;
            let k = k.trim().to_string();
            let v = v.trim().to_string();
            if k.is_empty() {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: "empty key".into(),
                });
            }
            if map.insert(k.clone(), v).is_some() {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("duplicate key `{k}`"),
                });
            }
        }
        Ok(Kv {
            map,
            used: RefCell::new(BTreeSet::new()),
        })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    pub fn opt_str(&self, key: &str) -> Option<String> {
        let v = self.map.get(key).cloned();
        if v.is_some() {
            self.used.borrow_mut().insert(key.to_string());
        }
        v
    }

    pub fn get_str(&self, key: &str) -> Result<String> {
        self.opt_str(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, v: &str, kind: &str) -> Result<T> {
        v.parse::<T>()
            .map_err(|_| Error::Config(format!("key `{key}`: `{v}` is not a valid {kind}")))
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str, kind: &str) -> Result<T> {
        let v = self.get_str(key)?;
        self.parse_as(key, &v, kind)
    }

    pub fn get_or<T: std::str::FromStr>(&self, key: &str, default: T, kind: &str) -> Result<T> {
        match self.opt_str(key) {
            Some(v) => self.parse_as(key, &v, kind),
            None => Ok(default),
        }
    }

    pub fn get_bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.opt_str(key) {
            Some(v) => match v.as_str() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                other => Err(Error::Config(format!(
                    "key `{key}`: `{other}` is not a valid bool"
                ))),
            },
            None => Ok(default),
        }
    }

    /// Comma-separated positive integers.
    pub fn get_usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.get_str(key)?;
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("key `{key}`: `{s}` is not a valid usize")))
            })
            .collect()
    }

    /// Error if any key was never consumed.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&String> = self.map.keys().filter(|k| !used.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            let list = unknown
                .iter()
                .map(|s| format!("`{s}`"))
                .collect::<Vec<_>>()
                .join(", ");
            Err(Error::Config(format!("unknown keys: {list}")))
        }
    }
}

/// Render `(key, value)` pairs in the given order.
pub fn render(pairs: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}
