//! Deterministic artifact writing: sorted-key JSON, CSV with a header row,
//! and a run manifest listing every emitted file.
//!
//! Byte-identical reruns are a hard requirement, so every writer here is
//! deterministic: JSON objects are serialized through a canonical value tree
//! (sorted keys, fixed indentation, trailing newline), CSV floats use Rust's
//! shortest round-trip formatting, and the only wall-clock field — the
//! manifest timestamp — disappears under `--no-timestamp`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::Serialize;

/// Provenance record written as `manifest.json` at the end of every command.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the effective config (see `config::config_hash`).
    pub config_hash: String,
    /// Tool version (the crate version).
    pub version: String,
    /// Start-of-run wall clock; omitted under `--no-timestamp`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp_unix_secs: Option<u64>,
    /// Every file the command emitted (including this manifest), in
    /// emission order, relative to the output directory.
    pub files: Vec<String>,
}

/// Collects artifacts for one command run and finishes with the manifest.
pub struct Emitter {
    dir: PathBuf,
    files: Vec<String>,
    timestamp: Option<u64>,
}

/// Serialize any value as canonical JSON: keys sorted (via the value tree),
/// two-space indentation, trailing newline.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let tree = serde_json::to_value(value).context("serializing report")?;
    let mut text = serde_json::to_string_pretty(&tree).context("rendering report")?;
    text.push('\n');
    Ok(text)
}

impl Emitter {
    pub fn new(dir: &Path, no_timestamp: bool) -> Result<Self> {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        let timestamp = if no_timestamp {
            None
        } else {
            Some(
                SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            )
        };
        Ok(Emitter {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            timestamp,
        })
    }

    /// Absolute path a named artifact will be written to.
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Record a file written by other means (e.g. the weight container).
    pub fn record(&mut self, name: &str) {
        self.files.push(name.to_string());
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = canonical_json(value)?;
        fs::write(self.path(name), text)
            .with_context(|| format!("writing {}", self.path(name).display()))?;
        self.record(name);
        Ok(())
    }

    /// Write a CSV with one header row. Every row must match the header
    /// width; fields are written verbatim (callers keep them comma-free).
    pub fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut text = String::new();
        text.push_str(&header.join(","));
        text.push('\n');
        for (i, row) in rows.iter().enumerate() {
            if row.len() != header.len() {
                bail!(
                    "csv {name}: row {i} has {} fields, header has {}",
                    row.len(),
                    header.len()
                );
            }
            text.push_str(&row.join(","));
            text.push('\n');
        }
        fs::write(self.path(name), text)
            .with_context(|| format!("writing {}", self.path(name).display()))?;
        self.record(name);
        Ok(())
    }

    /// Write `manifest.json` and return the list of emitted files.
    pub fn finish(mut self, command: &str, config_hash: &str) -> Result<Vec<String>> {
        self.files.push("manifest.json".to_string());
        let manifest = RunManifest {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp_unix_secs: self.timestamp,
            files: self.files.clone(),
        };
        let text = canonical_json(&manifest)?;
        fs::write(self.dir.join("manifest.json"), text).with_context(|| {
            format!("writing {}", self.dir.join("manifest.json").display())
        })?;
        Ok(self.files)
    }
}

/// Shortest round-trip decimal form of a float (Rust's default `Display`),
/// the fixed CSV number format.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Serialize;

    #[derive(Serialize)]
    struct Demo {
        zeta: u32,
        alpha: u32,
    }

    #[test]
    fn json_keys_come_out_sorted_with_trailing_newline() {
        let text = canonical_json(&Demo { zeta: 1, alpha: 2 }).unwrap();
        let z = text.find("zeta").unwrap();
        let a = text.find("alpha").unwrap();
        assert!(a < z, "keys must be sorted: {text}");
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn csv_rejects_ragged_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut em = Emitter::new(dir.path(), true).unwrap();
        let bad = em.write_csv("x.csv", &["a", "b"], &[vec!["1".into()]]);
        assert!(bad.is_err());
        em.write_csv("x.csv", &["a", "b"], &[vec!["1".into(), "2".into()]])
            .unwrap();
        let text = fs::read_to_string(dir.path().join("x.csv")).unwrap();
        assert_eq!(text, "a,b\n1,2\n");
    }

    #[test]
    fn manifest_lists_every_file_and_suppresses_timestamp() {
        let dir = tempfile::tempdir().unwrap();
        let mut em = Emitter::new(dir.path(), true).unwrap();
        em.write_json("r.json", &Demo { zeta: 0, alpha: 0 }).unwrap();
        em.record("weights.bin");
        let files = em.finish("demo", "abc123").unwrap();
        assert_eq!(files, vec!["r.json", "weights.bin", "manifest.json"]);
        let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        assert!(text.contains("\"config_hash\": \"abc123\""));
        assert!(!text.contains("timestamp"));
        let with_ts = Emitter::new(dir.path(), false).unwrap();
        let _ = with_ts.finish("demo", "abc123").unwrap();
        let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        assert!(text.contains("timestamp_unix_secs"));
    }

    #[test]
    fn float_format_is_shortest_round_trip() {
        assert_eq!(fmt_f64(0.1), "0.1");
        assert_eq!(fmt_f64(1.0), "1");
        assert_eq!(fmt_f64(-2.5e-7), "-0.00000025");
        let x = 0.1f64 + 0.2;
        assert_eq!(x.to_string().parse::<f64>().unwrap(), x);
    }
}
