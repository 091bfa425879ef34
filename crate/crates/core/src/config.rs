//! Flat `key = value` configuration with layered precedence and a content hash.
//!
//! Keys are the field names of [`SearchConfig`] and [`TrainConfig`]. A bare key
//! sets the field in every config that has it; `search.` and `train.`
//! prefixes target one. Lines starting with `#` and blank lines are ignored.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::autodiff::ScheduleKind;
use crate::error::{Error, Result};
use crate::search::SearchConfig;
use crate::train::TrainConfig;

const SEARCH_KEYS: &[&str] = &[
    "lambda",
    "tau",
    "epochs",
    "batch",
    "lr",
    "schedule",
    "momentum",
    "weight_decay",
    "arch_lr",
    "grad_clip",
    "cells",
    "channels",
    "seed",
    "no_skip",
    "no_zeroise",
    "no_dilated",
    "keep_sepconv",
    "no_div",
];

const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch",
    "lr",
    "schedule",
    "momentum",
    "weight_decay",
    "grad_clip",
    "seed",
    "crop",
    "flip",
    "grad_log",
];

/// Keys that belong to neither config but are read by the command line.
const EXTRA_KEYS: &[&str] = &[
    "gamma",
    "data",
    "subset",
    "preset",
    "train.cells",
    "train.channels",
];

/// Ordered key/value settings.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Settings {
    entries: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    if EXTRA_KEYS.contains(&key) {
        return true;
    }
    match key.split_once('.') {
        Some(("search", k)) => SEARCH_KEYS.contains(&k),
        Some(("train", k)) => TRAIN_KEYS.contains(&k),
        Some(_) => false,
        None => SEARCH_KEYS.contains(&key) || TRAIN_KEYS.contains(&key),
    }
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            s.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip(e))))?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `self` overridden by every entry of `over`.
    pub fn layered(&self, over: &Settings) -> Settings {
        let mut entries = self.entries.clone();
        entries.extend(over.entries.clone());
        Settings { entries }
    }

    /// Sorted `key=value` lines.
    pub fn canonical(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Hex sha256 of the canonical text.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.canonical().as_bytes());
        d.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Typed value for `section.key`, falling back to the bare key.
    pub fn lookup<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        let full = format!("{section}.{key}");
        let (name, raw) = match self.get(&full) {
            Some(v) => (full, v),
            None => match self.get(key) {
                Some(v) => (key.to_string(), v),
                None => return Ok(None),
            },
        };
        raw.parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("bad value `{raw}` for `{name}`")))
    }

    pub fn apply_search(&self, c: &mut SearchConfig) -> Result<()> {
        let s = "search";
        macro_rules! take {
            ($field:expr, $key:literal) => {
                if let Some(v) = self.lookup(s, $key)? {
                    $field = v;
                }
            };
        }
        take!(c.lambda, "lambda");
        take!(c.tau, "tau");
        take!(c.epochs, "epochs");
        take!(c.batch, "batch");
        take!(c.lr, "lr");
        take!(c.momentum, "momentum");
        take!(c.weight_decay, "weight_decay");
        take!(c.cells, "cells");
        take!(c.channels, "channels");
        take!(c.seed, "seed");
        take!(c.flags.no_skip, "no_skip");
        take!(c.flags.no_zeroise, "no_zeroise");
        take!(c.flags.no_dilated, "no_dilated");
        take!(c.flags.keep_sepconv, "keep_sepconv");
        take!(c.no_div, "no_div");
        if let Some(v) = self.lookup::<String>(s, "schedule")? {
            c.schedule = ScheduleKind::from_str(&v)?;
        }
        if let Some(v) = self.lookup::<String>(s, "arch_lr")? {
            c.arch_lr = optional(&v, "arch_lr")?;
        }
        if let Some(v) = self.lookup::<String>(s, "grad_clip")? {
            c.grad_clip = optional(&v, "grad_clip")?;
        }
        c.validate()
    }

    pub fn apply_train(&self, c: &mut TrainConfig) -> Result<()> {
        let s = "train";
        macro_rules! take {
            ($field:expr, $key:literal) => {
                if let Some(v) = self.lookup(s, $key)? {
                    $field = v;
                }
            };
        }
        take!(c.epochs, "epochs");
        take!(c.batch, "batch");
        take!(c.lr, "lr");
        take!(c.momentum, "momentum");
        take!(c.weight_decay, "weight_decay");
        take!(c.seed, "seed");
        take!(c.augment.crop, "crop");
        take!(c.augment.flip, "flip");
        take!(c.grad_log, "grad_log");
        if let Some(v) = self.lookup::<String>(s, "schedule")? {
            c.schedule = ScheduleKind::from_str(&v)?;
        }
        if let Some(v) = self.lookup::<String>(s, "grad_clip")? {
            c.grad_clip = optional(&v, "grad_clip")?;
        }
        c.validate()
    }
}

/// Named bundles of search, training and final-network sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub search: SearchConfig,
    pub train: TrainConfig,
    pub cells: usize,
    pub channels: usize,
}

impl Preset {
    /// Minutes-scale smoke run.
    pub fn tiny() -> Self {
        Preset {
            search: SearchConfig {
                epochs: 2,
                batch: 32,
                cells: 4,
                channels: 8,
                ..SearchConfig::default()
            },
            train: TrainConfig {
                epochs: 2,
                batch: 32,
                ..TrainConfig::desk()
            },
            cells: 4,
            channels: 8,
        }
    }

    pub fn desk() -> Self {
        Preset {
            search: SearchConfig {
                epochs: 15,
                ..SearchConfig::default()
            },
            train: TrainConfig::desk(),
            cells: 8,
            channels: 16,
        }
    }

    pub fn paper() -> Self {
        Preset {
            search: SearchConfig::default(),
            train: TrainConfig::paper(),
            cells: 20,
            channels: 36,
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    /// The preset selected by `preset` (default desk) with `settings` applied.
    pub fn resolve(settings: &Settings) -> Result<Self> {
        let mut p = Self::named(settings.get("preset").unwrap_or("desk"))?;
        settings.apply_search(&mut p.search)?;
        settings.apply_train(&mut p.train)?;
        if let Some(v) = settings.lookup("train", "cells")? {
            p.cells = v;
        }
        if let Some(v) = settings.lookup("train", "channels")? {
            p.channels = v;
        }
        Ok(p)
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

/// `none` or a number.
fn optional(v: &str, key: &str) -> Result<Option<f64>> {
    if v == "none" {
        return Ok(None);
    }
    v.parse()
        .map(Some)
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}
