//! TOML run configuration.
//!
//! The task keys (`I`, `dims`, `signals`, `noise_var`, `rotation`), the
//! context length `L` and an optional `seed` sit at the top level; each
//! command reads its own table. Every lookup names the full key path in its
//! error, and unknown keys are rejected so typos do not pass silently.

use crate::CliError;
use attnlab::data_model::{TaskConfig, TaskSpec};
use serde::de::DeserializeOwned;
use std::path::Path;
use toml::{Table, Value};

const TOP_KEYS: &[&str] = &["I", "dims", "signals", "noise_var", "rotation", "L", "seed"];
const SECTIONS: &[&str] = &["dynamics", "moments", "optimal", "transfer", "check"];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    root: Table,
}

/// One table of the config (possibly absent, then every key is missing).
#[derive(Clone, Copy, Debug)]
pub struct Section<'a> {
    name: &'a str,
    table: Option<&'a Table>,
}

fn path(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, CliError> {
        let root: Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(format!("malformed config: {e}")))?;
        for (k, v) in &root {
            let known = TOP_KEYS.contains(&k.as_str()) || (SECTIONS.contains(&k.as_str()) && v.is_table());
            if !known {
                return Err(CliError::Config(format!("unknown config key `{k}`")));
            }
        }
        Ok(Config { root })
    }

    pub fn load(p: &Path) -> Result<Config, CliError> {
        let text = std::fs::read_to_string(p)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
        Config::parse(&text)
    }

    pub fn top(&self) -> Section<'_> {
        Section { name: "", table: Some(&self.root) }
    }

    pub fn section<'a>(&'a self, name: &'a str) -> Section<'a> {
        Section { name, table: self.root.get(name).and_then(Value::as_table) }
    }

    /// The task spec from the top-level keys.
    pub fn task_spec(&self) -> Result<TaskSpec, CliError> {
        let top = self.top();
        let tc = TaskConfig {
            i: top.req("I")?,
            dims: top.req("dims")?,
            signals: top.req("signals")?,
            noise_var: top.req("noise_var")?,
            rotation: top.opt("rotation", "identity".to_string())?,
        };
        TaskSpec::from_config(&tc).map_err(|e| CliError::Config(format!("data_model: {e}")))
    }

    pub fn len(&self) -> Result<usize, CliError> {
        let l: usize = self.top().req("L")?;
        if l == 0 {
            return Err(CliError::Config("config key `L` must be at least 1".into()));
        }
        Ok(l)
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.top().opt("seed", 0)
    }

    /// JSON snapshot for manifests.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.root).expect("TOML tables convert to JSON")
    }

    /// Canonical text of the config, used to derive run ids.
    pub fn canonical(&self) -> String {
        self.to_json().to_string()
    }
}

impl<'a> Section<'a> {
    fn get(&self, key: &str) -> Option<&'a Value> {
        self.table.and_then(|t| t.get(key))
    }

    fn convert<T: DeserializeOwned>(&self, key: &str, v: &Value) -> Result<T, CliError> {
        v.clone()
            .try_into()
            .map_err(|e| CliError::Config(format!("config key `{}`: {e}", path(self.name, key))))
    }

    /// A required key.
    pub fn req<T: DeserializeOwned>(&self, key: &str) -> Result<T, CliError> {
        match self.get(key) {
            Some(v) => self.convert(key, v),
            None => Err(CliError::Config(format!("missing config key `{}`", path(self.name, key)))),
        }
    }

    pub fn opt<T: DeserializeOwned>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.get(key) {
            Some(v) => self.convert(key, v),
            None => Ok(default),
        }
    }

    pub fn has(&self, key: &str) -> bool {
        self.get(key).is_some()
    }

    /// Rejects keys outside `allowed`.
    pub fn only(&self, allowed: &[&str]) -> Result<(), CliError> {
        if let Some(t) = self.table {
            if let Some(k) = t.keys().find(|k| !allowed.contains(&k.as_str())) {
                return Err(CliError::Config(format!("unknown config key `{}`", path(self.name, k))));
            }
        }
        Ok(())
    }
}

/// Time units of `dt` and `horizon`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeUnit {
    Raw,
    Rescaled,
}

impl TimeUnit {
    pub fn parse(s: &str, key: &str) -> Result<TimeUnit, CliError> {
        match s {
            "raw" => Ok(TimeUnit::Raw),
            "rescaled" => Ok(TimeUnit::Rescaled),
            _ => Err(CliError::Config(format!("config key `{key}` must be \"raw\" or \"rescaled\", got {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "I = 1\ndims = [4]\nsignals = [1.0]\nnoise_var = 0.1\nL = 50\n";

    #[test]
    fn task_keys_build_a_spec() {
        let c = Config::parse(BASE).unwrap();
        let spec = c.task_spec().unwrap();
        assert_eq!(spec.d(), 4);
        assert_eq!(c.len().unwrap(), 50);
        assert_eq!(c.seed().unwrap(), 0);
    }

    #[test]
    fn missing_and_mistyped_keys_name_the_path() {
        let c = Config::parse("I = 1\ndims = [4]\nsignals = [1.0]\nL = 5\n[dynamics]\nH = \"two\"\n").unwrap();
        let e = c.task_spec().unwrap_err().to_string();
        assert!(e.contains("`noise_var`"), "{e}");
        let e = c.section("dynamics").req::<usize>("H").unwrap_err().to_string();
        assert!(e.contains("`dynamics.H`"), "{e}");
        let e = c.section("optimal").req::<f64>("b_max").unwrap_err().to_string();
        assert!(e.contains("missing config key `optimal.b_max`"), "{e}");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::parse(&format!("{BASE}Lz = 3\n")).is_err());
        assert!(Config::parse(&format!("{BASE}dynamics = 3\n")).is_err());
        let c = Config::parse(&format!("{BASE}[moments]\nn = 5\nm = 1\n")).unwrap();
        let e = c.section("moments").only(&["n"]).unwrap_err().to_string();
        assert!(e.contains("moments.m"));
    }

    #[test]
    fn zero_length_and_bad_units() {
        let c = Config::parse(&BASE.replace("L = 50", "L = 0")).unwrap();
        assert!(matches!(c.len(), Err(CliError::Config(_))));
        assert_eq!(TimeUnit::parse("rescaled", "k").unwrap(), TimeUnit::Rescaled);
        assert!(TimeUnit::parse("seconds", "k").is_err());
    }

    #[test]
    fn canonical_form_ignores_layout() {
        let a = Config::parse(BASE).unwrap();
        let b = Config::parse(&format!("# comment\n{}", BASE.replace(" = ", "="))).unwrap();
        assert_eq!(a.canonical(), b.canonical());
    }
}
