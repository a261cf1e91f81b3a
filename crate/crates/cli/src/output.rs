//! Run directories, artifact manifests and trace files.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use dwf_core::metrics::format_f64;
use dwf_core::optimizer::EpochTrace;

use crate::config::ExperimentConfig;
use crate::error::CliResult;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: &'a str,
    artifacts: &'a [Artifact],
}

/// Output directory `<base>/<command>-<hash>` where `hash` is derived from
/// the resolved configuration.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
    command: String,
    config_hash: String,
    artifacts: Vec<Artifact>,
}

impl RunDir {
    pub fn create(base: &Path, command: &str, cfg: &ExperimentConfig) -> CliResult<Self> {
        let text = cfg.canonical_json();
        let config_hash = sha256_hex(text.as_bytes());
        let path = base.join(format!("{command}-{}", &config_hash[..16]));
        std::fs::create_dir_all(&path)?;
        let mut dir = Self {
            path,
            command: command.to_string(),
            config_hash,
            artifacts: Vec::new(),
        };
        dir.write("config.json", text.as_bytes())?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let p = self.path.join(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&p, bytes)?;
        self.artifacts.retain(|a| a.path != name);
        self.artifacts.push(Artifact {
            path: name.to_string(),
            bytes: bytes.len(),
            sha256: sha256_hex(bytes),
        });
        Ok(p)
    }

    /// Records a file already written inside the run directory.
    pub fn register(&mut self, name: &str) -> CliResult<()> {
        let bytes = std::fs::read(self.path.join(name))?;
        self.artifacts.retain(|a| a.path != name);
        self.artifacts.push(Artifact {
            path: name.to_string(),
            bytes: bytes.len(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes `manifest.json` listing every artifact in path order.
    pub fn finish(mut self) -> CliResult<PathBuf> {
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            command: &self.command,
            config_hash: &self.config_hash,
            artifacts: &self.artifacts,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(self.path.join("manifest.json"), text)?;
        Ok(self.path)
    }
}

/// CSV table with a fixed header; values are pre-formatted strings.
pub fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

pub fn trace_header(n_layers: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "epoch",
        "lr",
        "train_loss",
        "train_acc",
        "val_acc",
        "cr",
        "l2_collapsed",
        "misalignment",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((0..n_layers).map(|l| format!("misalign_l{l}")));
    h.extend((0..n_layers).map(|l| format!("cr_l{l}")));
    h
}

pub fn trace_row(t: &EpochTrace) -> Vec<String> {
    let mut r = vec![
        t.epoch.to_string(),
        format_f64(t.lr),
        format_f64(t.train_loss),
        format_f64(t.train_acc),
        format_f64(t.val_acc),
        format_f64(t.cr),
        format_f64(t.l2_collapsed),
        format_f64(t.misalignment),
    ];
    r.extend(t.misalignment_per_layer.iter().map(|v| format_f64(*v)));
    r.extend(t.cr_per_layer.iter().map(|v| format_f64(*v)));
    r
}

pub fn trace_csv(traces: &[EpochTrace], n_layers: usize) -> CliResult<Vec<u8>> {
    let rows: Vec<Vec<String>> = traces.iter().map(trace_row).collect();
    csv_bytes(&trace_header(n_layers), &rows)
}

/// Writes `<stem>.csv` and its JSON mirror `<stem>.json`.
pub fn write_traces(dir: &mut RunDir, stem: &str, traces: &[EpochTrace], n_layers: usize) -> CliResult<()> {
    dir.write(&format!("{stem}.csv"), &trace_csv(traces, n_layers)?)?;
    dir.write_json(&format!("{stem}.json"), &traces)?;
    Ok(())
}
