use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::report;

/// An error that maps to a specific process exit code.
#[derive(Debug)]
pub struct ExitError {
    pub code: u8,
    pub message: String,
}

pub const EXIT_VERIFICATION: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DEPENDENCY: u8 = 3;

impl fmt::Display for ExitError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for ExitError {}

pub fn fail(code: u8, message: impl Into<String>) -> anyhow::Error {
    ExitError {
        code,
        message: message.into(),
    }
    .into()
}

/// Directory layout of one experiment run.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn clean_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("clean.ckpt")
    }

    pub fn watermarked_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("watermarked.ckpt")
    }

    pub fn spec(&self) -> PathBuf {
        self.root.join("specs").join("watermark.json")
    }

    pub fn fingerprints(&self) -> PathBuf {
        self.root.join("fingerprints")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.reports().join(name)
    }

    pub fn metadata(&self) -> PathBuf {
        self.root.join("metadata")
    }

    pub fn create(&self) -> anyhow::Result<()> {
        for dir in [
            self.checkpoints(),
            self.root.join("specs"),
            self.fingerprints(),
            self.reports(),
            self.metadata(),
        ] {
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        self.write_schema()
    }

    /// Fails with a dependency error when `path` has not been produced yet.
    pub fn require(&self, path: &Path, producer: &str) -> anyhow::Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(fail(
                EXIT_DEPENDENCY,
                format!(
                    "missing {}; run `modelguard {producer}` first",
                    path.display()
                ),
            ))
        }
    }

    fn write_schema(&self) -> anyhow::Result<()> {
        let schema = json!({
            "layout": {
                "checkpoints/clean.ckpt": "baseline classifier written by `train`",
                "checkpoints/watermarked.ckpt": "protected classifier written by `embed`",
                "specs/watermark.json": "watermark spec (owner secret) written by `embed`",
                "fingerprints/manifest.json": "fingerprint library written by `genfp`",
                "fingerprints/user-NNNN/image.f32": "fingerprint image, little-endian f32, HWC",
                "reports/*.csv": "result tables, fixed column order below",
                "reports/*.json": "full resolved config and detailed results per command",
                "metadata/*.json": "timestamps, kept apart so reports are reproducible byte for byte"
            },
            "csv_columns": report::csv_columns(),
            "exit_codes": {
                "0": "success",
                "1": "verification failed (watermark mismatch, no fingerprint authenticated)",
                "2": "usage or configuration error",
                "3": "missing upstream artifact",
                "4": "other runtime error"
            }
        });
        let path = self.root.join("schema.json");
        fs::write(&path, serde_json::to_string_pretty(&schema)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }

    /// Writes `reports/<name>.json` with the resolved config and `results`.
    pub fn write_json_report<T: Serialize>(
        &self,
        name: &str,
        cfg: &ExperimentConfig,
        results: &T,
    ) -> anyhow::Result<()> {
        let doc = json!({
            "config_hash": cfg.hash(),
            "config": cfg,
            "results": results,
        });
        let path = self.report(&format!("{name}.json"));
        fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn write_metadata(
        &self,
        name: &str,
        cfg: &ExperimentConfig,
        started: SystemTime,
    ) -> anyhow::Result<()> {
        let secs = |t: SystemTime| {
            t.duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0)
        };
        let finished = SystemTime::now();
        let doc = json!({
            "command": name,
            "config_hash": cfg.hash(),
            "started_unix": secs(started),
            "finished_unix": secs(finished),
            "elapsed_seconds": secs(finished) - secs(started),
            "version": env!("CARGO_PKG_VERSION"),
        });
        let path = self.metadata().join(format!("{name}.json"));
        fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}

pub fn hash_tag(cfg: &ExperimentConfig) -> BTreeMap<String, String> {
    BTreeMap::from([("config_hash".to_string(), cfg.hash())])
}
