//! Output files. Every CSV starts with a `# config_hash=` comment line and
//! every JSON document carries a `config_hash` field, so results can be
//! matched to the configuration that produced them. Wall-clock data goes to
//! a separate metadata file and never into results.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{Format, RunConfig};
use crate::CliError;

pub struct Output {
    dir: PathBuf,
    hash: String,
    pub format: Format,
    written: Vec<PathBuf>,
}

impl Output {
    pub fn new(config: &RunConfig) -> Result<Self, CliError> {
        fs::create_dir_all(&config.out).map_err(|e| io_error(&config.out, e))?;
        Ok(Self {
            dir: config.out.clone(),
            hash: config.hash(),
            format: config.format,
            written: Vec::new(),
        })
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    /// Writes `<name>.csv` through `body`, after the hash header.
    pub fn csv(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
    ) -> Result<(), CliError> {
        let path = self.dir.join(format!("{name}.csv"));
        let result = (|| {
            let mut w = BufWriter::new(File::create(&path)?);
            writeln!(w, "# config_hash={}", self.hash)?;
            body(&mut w)?;
            w.flush()
        })();
        result.map_err(|e| io_error(&path, e))?;
        self.written.push(path);
        Ok(())
    }

    /// Writes `<name>.json` as `{"config_hash": ..., "data": value}`.
    pub fn json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let path = self.dir.join(format!("{name}.json"));
        let doc = serde_json::json!({ "config_hash": self.hash, "data": value });
        let text = serde_json::to_string_pretty(&doc).expect("reports serialise");
        fs::write(&path, text + "\n").map_err(|e| io_error(&path, e))?;
        self.written.push(path);
        Ok(())
    }

    /// Run metadata (version, command, wall time) kept apart from results.
    pub fn metadata(
        &mut self,
        command: &str,
        wall_seconds: f64,
        passed: bool,
    ) -> Result<(), CliError> {
        let path = self.dir.join("metadata.json");
        let started = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0.0, |d| d.as_secs_f64() - wall_seconds);
        let doc = serde_json::json!({
            "config_hash": self.hash,
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "threads": rayon::current_num_threads(),
            "started_unix": started,
            "wall_seconds": wall_seconds,
            "passed": passed,
        });
        let text = serde_json::to_string_pretty(&doc).expect("metadata serialises");
        fs::write(&path, text + "\n").map_err(|e| io_error(&path, e))?;
        Ok(())
    }
}

pub fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Formats an optional number for CSV, leaving the cell empty when absent.
pub fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}
