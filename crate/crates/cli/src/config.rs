//! Flag, file and default resolution.
//!
//! A `--config` TOML file may hold top-level `seed` and `jobs` plus one
//! table per command (`[synth]`, `[ingest]`, `[train]`, `[predict]`,
//! `[baseline]`, `[evaluate]`, `[plot]`). Keys use the long flag names with
//! `-` replaced by `_`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use serde::de::DeserializeOwned;

use crate::failure;

pub const DEFAULT_SEED: u64 = 42;
const SECTIONS: [&str; 9] = [
    "seed", "jobs", "synth", "ingest", "train", "predict", "baseline", "evaluate", "plot",
];

pub struct Context {
    pub data_dir: PathBuf,
    pub seed: u64,
    file: toml::Table,
}

impl Context {
    pub fn new(data_dir: PathBuf, config: Option<&Path>, seed: Option<u64>, jobs: Option<usize>) -> Result<Self> {
        let file = match config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let table: toml::Table = text.parse().with_context(|| format!("parsing config {}", p.display()))?;
                if let Some(k) = table.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
                    return Err(failure::config(format!("unknown config key `{k}`")));
                }
                table
            }
            None => toml::Table::new(),
        };
        let file_seed = match file.get("seed") {
            Some(v) => Some(
                v.as_integer()
                    .and_then(|i| u64::try_from(i).ok())
                    .ok_or_else(|| failure::config("config `seed` must be a non-negative integer"))?,
            ),
            None => None,
        };
        let file_jobs = match file.get("jobs") {
            Some(v) => Some(
                v.as_integer()
                    .and_then(|i| usize::try_from(i).ok())
                    .ok_or_else(|| failure::config("config `jobs` must be a non-negative integer"))?,
            ),
            None => None,
        };
        let jobs = jobs.or(file_jobs).unwrap_or(0);
        // Ignore a second initialization, e.g. from tests calling in-process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
        Ok(Self {
            data_dir,
            seed: seed.or(file_seed).unwrap_or(DEFAULT_SEED),
            file,
        })
    }

    /// The command's table from the config file, or its default.
    pub fn section<T: DeserializeOwned + Default>(&self, name: &str) -> Result<T> {
        match self.file.get(name) {
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e: toml::de::Error| failure::config(format!("[{name}] in config: {e}"))),
            None => Ok(T::default()),
        }
    }

    pub fn path(&self, flag: &Option<PathBuf>, file: &Option<PathBuf>, default: &str) -> PathBuf {
        flag.clone()
            .or_else(|| file.clone())
            .unwrap_or_else(|| self.data_dir.join(default))
    }
}

/// Flag, then file, then default.
pub fn pick<T: Clone>(flag: &Option<T>, file: &Option<T>, default: T) -> T {
    flag.clone().or_else(|| file.clone()).unwrap_or(default)
}

/// Parses `a,b,c` train/val/test fractions.
pub fn parse_split(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| failure::config(format!("split `{s}` is not three comma-separated numbers")))?;
    let f: [f64; 3] = parts
        .try_into()
        .map_err(|_| failure::config(format!("split `{s}` needs exactly three fractions")))?;
    if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(failure::config(format!(
            "split fractions {f:?} must lie in [0, 1] and sum to 1"
        )));
    }
    if f[0] == 0.0 {
        return Err(failure::config("the training fraction must be positive"));
    }
    Ok(f)
}

/// Parses `name=dir`.
pub fn parse_method(s: &str) -> Result<(String, PathBuf)> {
    match s.split_once('=') {
        Some((n, d)) if !n.is_empty() && !d.is_empty() && !n.contains(',') => Ok((n.to_string(), PathBuf::from(d))),
        _ => Err(failure::config(format!("method `{s}` must look like name=directory"))),
    }
}
