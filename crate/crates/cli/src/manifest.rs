use std::fs;
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Failure;

/// Record written next to every output set: enough to re-run the command.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// SHA-256 over the arguments (minus `--out` and `--jobs`, which do not
    /// change results) and the bytes of every input file.
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    pub timestamp: String,
}

impl RunManifest {
    pub fn new(command: &str, args: &[String], inputs: &[&Path], seed: u64) -> Result<Self, Failure> {
        let mut h = Sha256::new();
        for a in hashed_args(args) {
            h.update((a.len() as u64).to_le_bytes());
            h.update(a.as_bytes());
        }
        for p in inputs {
            let bytes = fs::read(p).map_err(|e| Failure(format!("cannot read {}: {e}", p.display())))?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        Ok(Self {
            command: command.into(),
            args: args.to_vec(),
            config_hash: hex::encode(h.finalize()),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            timestamp: timestamp(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Failure(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Failure(format!("cannot write {}: {e}", path.display())))
    }
}

fn hashed_args(args: &[String]) -> Vec<&String> {
    let mut out = Vec::new();
    let mut skip_next = false;
    for a in args {
        if skip_next {
            skip_next = false;
        } else if a == "--out" || a == "--jobs" {
            skip_next = true;
        } else if !(a.starts_with("--out=") || a.starts_with("--jobs=")) {
            out.push(a);
        }
    }
    out
}

/// RFC 3339 UTC time, taken from `SOURCE_DATE_EPOCH` when set so that
/// repeated runs can produce identical manifests.
fn timestamp() -> String {
    let fixed = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| DateTime::<Utc>::from_timestamp(secs, 0));
    fixed
        .unwrap_or_else(Utc::now)
        .to_rfc3339_opts(SecondsFormat::Secs, true)
}
