//! Output directory handling: tables, JSON documents, plots and the run
//! manifest. Every file is written to a temporary name and renamed into
//! place, so readers never observe a partial file.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use headlab_core::{Error, Result};
use serde::Serialize;

use crate::config::{ExperimentConfig, Format};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub artifact_version: String,
    pub seed: u64,
    pub timestamp: String,
    pub wall_time_s: f64,
    pub outputs: Vec<String>,
}

pub struct OutputDir {
    root: PathBuf,
    format: Format,
    files: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path, format: Format) -> Result<Self> {
        fs::create_dir_all(root)
            .map_err(|e| Error::Io(format!("cannot create {}: {e}", root.display())))?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            format,
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn format(&self) -> Format {
        self.format
    }

    /// Names of the files written so far, in write order.
    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        atomic_write(&self.root.join(name), bytes)?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write_bytes(name, &json_bytes(value)?)
    }

    /// Writes `rows` as `<stem>.csv` or `<stem>.json` depending on the run
    /// format. The CSV header is `columns`, so empty tables keep their schema.
    pub fn write_table<T: Serialize>(&mut self, stem: &str, columns: &[&str], rows: &[T]) -> Result<()> {
        match self.format {
            Format::Csv => self.write_bytes(&format!("{stem}.csv"), &csv_bytes(columns, rows)?),
            Format::Json => self.write_json(&format!("{stem}.json"), rows),
        }
    }

    /// Writes `<stem>.svg` next to a CSV holding the plotted data. The CSV
    /// is written even for JSON runs so that each plot has a tabular twin.
    pub fn write_plot<T: Serialize>(&mut self, stem: &str, svg: &str, columns: &[&str], rows: &[T]) -> Result<()> {
        let csv_name = format!("{stem}.csv");
        if !self.files.contains(&csv_name) {
            self.write_bytes(&csv_name, &csv_bytes(columns, rows)?)?;
        }
        self.write_bytes(&format!("{stem}.svg"), svg.as_bytes())
    }

    /// Records the run; called only after the command succeeded.
    pub fn finish(&mut self, cfg: &ExperimentConfig, started: Instant) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: cfg.command.to_string(),
            config_hash: cfg.hash(),
            artifact_version: ARTIFACT_VERSION.to_string(),
            seed: cfg.seed,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            wall_time_s: started.elapsed().as_secs_f64(),
            outputs: self.files.clone(),
        };
        atomic_write(&self.root.join(MANIFEST_NAME), &json_bytes(&manifest)?)?;
        Ok(manifest)
    }
}

pub fn json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|e| Error::Io(format!("json encoding: {e}")))?;
    v.push(b'\n');
    Ok(v)
}

pub fn csv_bytes<T: Serialize>(columns: &[&str], rows: &[T]) -> Result<Vec<u8>> {
    let io = |e: csv::Error| Error::Io(format!("csv encoding: {e}"));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(columns).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::Io(format!("csv encoding: {e}")))
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::Io(format!("cannot write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| Error::Io(format!("cannot move {} into place: {e}", path.display())))
}
