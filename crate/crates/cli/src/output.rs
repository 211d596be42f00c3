//! CSV and manifest emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Shortest round-trip decimal form.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Writes a header plus rows; every row must match the header width.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        assert_eq!(row.len(), header.len(), "csv row width for {}", path.display());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn numeric_rows(rows: impl IntoIterator<Item = Vec<f64>>) -> Vec<Vec<String>> {
    rows.into_iter().map(|r| r.into_iter().map(num).collect()).collect()
}

pub fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

pub fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Record of one command run, written as `manifest.txt`.
#[derive(Debug, Clone, Default)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: String,
    pub artifacts: Vec<PathBuf>,
    /// Result summary, e.g. convergence flags.
    pub values: Vec<(String, String)>,
    /// Wall time per phase in seconds.
    pub phases: Vec<(String, f64)>,
}

impl RunManifest {
    pub fn new(command: &str, resolved_config: &str) -> Self {
        Self {
            command: command.to_string(),
            config_sha256: sha256_hex(resolved_config),
            ..Default::default()
        }
    }

    pub fn value(&mut self, key: &str, value: impl ToString) {
        self.values.push((key.to_string(), value.to_string()));
    }

    pub fn phase(&mut self, name: &str, seconds: f64) {
        self.phases.push((name.to_string(), seconds));
    }

    pub fn lookup(&self, key: &str) -> Option<&str> {
        self.values.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "tool = netmor {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "config_sha256 = {}", self.config_sha256);
        for a in &self.artifacts {
            let name = a.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let _ = writeln!(s, "artifact = {name}");
        }
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        for (k, v) in &self.phases {
            let _ = writeln!(s, "time.{k} = {}", num(*v));
        }
        s
    }

    /// Writes `manifest.txt` into `dir` and lists it as an artifact.
    pub fn write(&mut self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join("manifest.txt");
        self.artifacts.push(path.clone());
        fs::write(&path, self.render()).map_err(io_err(&path))?;
        Ok(path)
    }
}
