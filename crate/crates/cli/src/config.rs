//! Settings resolution: command-line flag, then `--config` file, then default.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Every key a config file may set.
pub const KNOWN_KEYS: &[&str] = &[
    "corpus",
    "checkpoint",
    "out-dir",
    "seed",
    "steps",
    "lr",
    "batch",
    "warmup",
    "grad-clip",
    "log-every",
    "heldout",
    "model-dim",
    "heads",
    "layers",
    "ctx",
    "chunk",
    "window",
    "modes",
    "lengths",
    "stride",
    "eval-tokens",
    "depths",
    "trials",
    "len",
    "mode",
];

/// Parses `key = value` lines; `#` starts a comment and `_` in keys reads as `-`.
pub fn parse_config(text: &str, origin: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key=value, got '{line}'", n + 1)))?;
        let key = k.trim().replace('_', "-");
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(CliError::Usage(format!("{origin}:{}: unknown key '{key}'", n + 1)));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

pub fn load_config(path: Option<&Path>) -> Result<BTreeMap<String, String>, CliError> {
    match path {
        None => Ok(BTreeMap::new()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("config file {}: {e}", p.display())))?;
            parse_config(&text, &p.display().to_string())
        }
    }
}

/// Resolves settings and records each resolved value for CSV comments.
pub struct Resolver {
    file: BTreeMap<String, String>,
    resolved: Vec<(&'static str, String)>,
}

impl Resolver {
    pub fn new(file: BTreeMap<String, String>) -> Self {
        Self {
            file,
            resolved: Vec::new(),
        }
    }

    fn file_value<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        self.file
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| CliError::Usage(format!("config key '{key}': cannot parse '{v}': {e}")))
            })
            .transpose()
    }

    pub fn opt<T: FromStr + Display>(&mut self, key: &'static str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => self.file_value(key)?,
        };
        if let Some(v) = &v {
            self.resolved.push((key, v.to_string()));
        }
        Ok(v)
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &'static str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => v,
            None => self.file_value(key)?.unwrap_or(default),
        };
        self.resolved.push((key, v.to_string()));
        Ok(v)
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&mut self, key: &'static str, flag: Option<String>, default: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: Display,
    {
        let raw = self.get(key, flag, default.to_string())?;
        let items = raw
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| CliError::Usage(format!("--{key}: {e}"))))
            .collect::<Result<Vec<T>, _>>()?;
        if items.is_empty() {
            return Err(CliError::Usage(format!("--{key} must not be empty")));
        }
        Ok(items)
    }

    /// Records a derived value that did not come from a key.
    pub fn note(&mut self, key: &'static str, value: impl Display) {
        self.resolved.push((key, value.to_string()));
    }

    pub fn resolved(&self) -> Vec<(&str, String)> {
        let mut seen = BTreeMap::new();
        for (k, v) in &self.resolved {
            seen.insert(*k, v.clone());
        }
        self.resolved
            .iter()
            .filter_map(|(k, _)| seen.remove(k).map(|v| (*k, v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_parsing() {
        let m = parse_config("# comment\nsteps = 5\n\nmodel_dim=32 # trailing\n", "f").unwrap();
        assert_eq!(m["steps"], "5");
        assert_eq!(m["model-dim"], "32");
        assert!(matches!(parse_config("bogus = 1", "f"), Err(CliError::Usage(_))));
        assert!(matches!(parse_config("steps 5", "f"), Err(CliError::Usage(_))));
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let file = parse_config("steps = 5\nlr = 0.5", "f").unwrap();
        let mut r = Resolver::new(file);
        assert_eq!(r.get("steps", Some(9usize), 1).unwrap(), 9);
        assert_eq!(r.get("lr", None, 1.0f64).unwrap(), 0.5);
        assert_eq!(r.get("batch", None, 4usize).unwrap(), 4);
        assert_eq!(r.opt::<usize>("chunk", None).unwrap(), None);
        assert_eq!(
            r.resolved(),
            vec![("steps", "9".into()), ("lr", "0.5".into()), ("batch", "4".into())]
        );
    }

    #[test]
    fn lists_and_bad_values() {
        let mut r = Resolver::new(parse_config("lengths = 128, 512", "f").unwrap());
        assert_eq!(r.list::<usize>("lengths", None, "1").unwrap(), vec![128, 512]);
        assert!(r.list::<usize>("depths", Some("a,b".into()), "0").is_err());
        let mut r = Resolver::new(parse_config("steps = many", "f").unwrap());
        assert!(matches!(r.get("steps", None, 1usize), Err(CliError::Usage(_))));
    }
}
