//! Key-value config files: `key = value` lines, `#` comments. Flags given
//! on the command line override file values, which override defaults.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

const KNOWN_KEYS: &[&str] = &[
    "panel", "out", "estimate", "seed", "rank", "ell", "rho", "eta", "eta_grid", "eps",
    "max_iter", "init", "threads", "preset", "metrics", "pca", "entities", "dim", "nnz",
    "horizon", "sigma_shape", "sigma_scale", "burn_in", "ell_gen", "grid_points",
];

/// Parsed config file contents.
#[derive(Debug, Default)]
pub struct FileConfig {
    values: HashMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let mut values = HashMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("{}:{}: expected `key = value`", path.display(), ln + 1);
            };
            let key = key.trim().replace('-', "_");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                bail!("{}:{}: unknown config key `{key}`", path.display(), ln + 1);
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(Self { values })
    }

    /// Parses the value under `key`, if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => match raw.parse::<T>() {
                Ok(v) => Ok(Some(v)),
                Err(e) => bail!("config key `{key}`: cannot parse `{raw}`: {e}"),
            },
        }
    }

    pub fn get_flag(&self, key: &str) -> Result<bool> {
        Ok(self.get::<bool>(key)?.unwrap_or(false))
    }
}

/// A float parameter that may be left to its data-driven default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AutoOr {
    Auto,
    Value(f64),
}

impl FromStr for AutoOr {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(AutoOr::Auto);
        }
        s.parse::<f64>()
            .map(AutoOr::Value)
            .map_err(|_| format!("expected a number or `auto`, got `{s}`"))
    }
}

impl AutoOr {
    pub fn resolve(self, auto: f64) -> f64 {
        match self {
            AutoOr::Auto => auto,
            AutoOr::Value(v) => v,
        }
    }
}

/// `MIN:MAX:N` grid specification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl FromStr for GridSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("expected MIN:MAX:N, got `{s}`"));
        }
        let min: f64 = parts[0].parse().map_err(|_| format!("bad MIN `{}`", parts[0]))?;
        let max: f64 = parts[1].parse().map_err(|_| format!("bad MAX `{}`", parts[1]))?;
        let points: usize = parts[2].parse().map_err(|_| format!("bad N `{}`", parts[2]))?;
        if !(min > 0.0) || max < min || points == 0 {
            return Err(format!("need 0 < MIN <= MAX and N >= 1, got `{s}`"));
        }
        Ok(GridSpec { min, max, points })
    }
}
