//! Run configuration: defaults, a `key = value` file, `TCD_*` environment overrides,
//! then command-line flags, each layer replacing the previous one key by key.
//!
//! File format: one `key = value` per line, `#` starts a comment, blank lines ignored.
//! Keys are the field names of [`RunConfig`]; the environment variable for a key is
//! `TCD_` followed by the key in upper case (`TCD_TILE_SIZE`).

use std::path::Path;

use serde::Serialize;

use crate::dataset;
use crate::error::{Error, Result};
use crate::eval;
use crate::merge::{InstanceRunConfig, MergeConfig};
use crate::stitch::StitchConfig;

pub const ENV_PREFIX: &str = "TCD_";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub tile_size: usize,
    pub overlap: usize,
    pub batch_size: usize,
    pub workers: usize,
    pub retries: usize,
    pub skip_empty: bool,
    pub nodata_skip: bool,
    /// Semantic confidence threshold.
    pub threshold: f64,
    /// Instance confidence threshold.
    pub confidence: f64,
    pub nms_iou: f64,
    pub merge_iou: f64,
    pub semantic_fraction: Option<f64>,
    pub height_threshold: f64,
    pub seed: u64,
    pub k: usize,
    pub holdout_frac: f64,
    pub handshake_timeout_secs: f64,
    pub request_timeout_secs: f64,
    pub adapter_processes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = StitchConfig::default();
        let m = MergeConfig::default();
        RunConfig {
            tile_size: s.tile_size,
            overlap: s.overlap,
            batch_size: s.batch_size,
            workers: s.workers,
            retries: s.retries,
            skip_empty: s.skip_empty,
            nodata_skip: s.nodata_skip,
            threshold: s.threshold,
            confidence: m.confidence_threshold,
            nms_iou: m.nms_iou,
            merge_iou: m.merge_iou,
            semantic_fraction: m.semantic_filter_fraction,
            height_threshold: eval::DEFAULT_HEIGHT_THRESHOLD,
            seed: dataset::DEFAULT_SEED,
            k: dataset::DEFAULT_FOLDS,
            holdout_frac: dataset::DEFAULT_HOLDOUT_FRAC,
            handshake_timeout_secs: 10.0,
            request_timeout_secs: 600.0,
            adapter_processes: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("config key {key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::invalid(format!("config key {key}: expected a boolean, got {value:?}"))),
    }
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "tile_size",
        "overlap",
        "batch_size",
        "workers",
        "retries",
        "skip_empty",
        "nodata_skip",
        "threshold",
        "confidence",
        "nms_iou",
        "merge_iou",
        "semantic_fraction",
        "height_threshold",
        "seed",
        "k",
        "holdout_frac",
        "handshake_timeout_secs",
        "request_timeout_secs",
        "adapter_processes",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "tile_size" => self.tile_size = parse(key, value)?,
            "overlap" => self.overlap = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "retries" => self.retries = parse(key, value)?,
            "skip_empty" => self.skip_empty = parse_bool(key, value)?,
            "nodata_skip" => self.nodata_skip = parse_bool(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "confidence" => self.confidence = parse(key, value)?,
            "nms_iou" => self.nms_iou = parse(key, value)?,
            "merge_iou" => self.merge_iou = parse(key, value)?,
            "semantic_fraction" => {
                self.semantic_fraction = match value.trim() {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "height_threshold" => self.height_threshold = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "holdout_frac" => self.holdout_frac = parse(key, value)?,
            "handshake_timeout_secs" => self.handshake_timeout_secs = parse(key, value)?,
            "request_timeout_secs" => self.request_timeout_secs = parse(key, value)?,
            "adapter_processes" => self.adapter_processes = parse(key, value)?,
            _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("{origin}:{}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::invalid(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies every `TCD_<KEY>` variable that names a known key.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        for (name, value) in vars {
            let Some(key) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let key = key.to_ascii_lowercase();
            if Self::KEYS.contains(&key.as_str()) {
                self.set(&key, &value).map_err(|e| Error::invalid(format!("{name}: {e}")))?;
            }
        }
        Ok(())
    }

    /// Defaults, then the optional file, then the process environment.
    pub fn load(file: Option<&Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(p) = file {
            cfg.apply_file(p)?;
        }
        cfg.apply_env(std::env::vars())?;
        Ok(cfg)
    }

    pub fn stitch(&self) -> StitchConfig {
        StitchConfig {
            tile_size: self.tile_size,
            overlap: self.overlap,
            batch_size: self.batch_size,
            skip_empty: self.skip_empty,
            nodata_skip: self.nodata_skip,
            threshold: self.threshold,
            workers: self.workers,
            retries: self.retries,
        }
    }

    pub fn merge(&self) -> MergeConfig {
        MergeConfig {
            nms_iou: self.nms_iou,
            merge_iou: self.merge_iou,
            confidence_threshold: self.confidence,
            semantic_filter_fraction: self.semantic_fraction,
        }
    }

    pub fn instances(&self) -> InstanceRunConfig {
        InstanceRunConfig {
            tile_size: self.tile_size,
            overlap: self.overlap,
            batch_size: self.batch_size,
            skip_empty: self.skip_empty,
            workers: self.workers,
            retries: self.retries,
            merge: self.merge(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stitch().validate()?;
        self.merge().validate()?;
        if !self.height_threshold.is_finite() {
            return Err(Error::invalid("height_threshold must be finite"));
        }
        if self.k < 2 {
            return Err(Error::invalid(format!("k = {} must be at least 2", self.k)));
        }
        if !(self.holdout_frac > 0.0 && self.holdout_frac < 1.0) {
            return Err(Error::invalid(format!("holdout_frac = {} outside (0, 1)", self.holdout_frac)));
        }
        if !(self.handshake_timeout_secs > 0.0 && self.request_timeout_secs > 0.0) {
            return Err(Error::invalid("adapter timeouts must be > 0"));
        }
        if self.adapter_processes == 0 {
            return Err(Error::invalid("adapter_processes must be > 0"));
        }
        Ok(())
    }
}
