//! Artifact files: a versioned JSON envelope and `#`-headed CSV, both stamped
//! with the model hash and tool version.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SCHEMA: &str = "pdmp-result/1";
pub const TOOL: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Where artifacts go and what every one of them is stamped with.
pub struct Sink {
    pub dir: PathBuf,
    pub model_sha256: String,
    pub deterministic: bool,
    pub threads: usize,
    pub started: Instant,
}

impl Sink {
    pub fn new(dir: &Path, model_sha256: String, deterministic: bool) -> Result<Self, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::io(format!("cannot create output directory {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            model_sha256,
            deterministic,
            threads: rayon::current_num_threads(),
            started: Instant::now(),
        })
    }

    fn envelope<T: Serialize>(&self, kind: &str, data: &T) -> Result<Value, CliError> {
        let data = serde_json::to_value(data).map_err(|e| CliError::io(e.to_string()))?;
        let mut v = json!({
            "schema": SCHEMA,
            "kind": kind,
            "tool": TOOL,
            "version": VERSION,
            "model_sha256": self.model_sha256,
            "data": data,
        });
        if !self.deterministic {
            v["elapsed_seconds"] = json!(self.started.elapsed().as_secs_f64());
            v["threads"] = json!(self.threads);
        }
        Ok(v)
    }

    pub fn write_json<T: Serialize>(&self, file: &str, kind: &str, data: &T) -> Result<PathBuf, CliError> {
        let v = self.envelope(kind, data)?;
        let mut text = serde_json::to_string_pretty(&v).map_err(|e| CliError::io(e.to_string()))?;
        text.push('\n');
        self.write(file, text.as_bytes())
    }

    /// CSV with a single `#` provenance line ahead of the column header.
    pub fn write_csv<R: Serialize>(&self, file: &str, kind: &str, rows: &[R]) -> Result<PathBuf, CliError> {
        let mut out = format!(
            "# schema={SCHEMA} kind={kind} tool={TOOL} version={VERSION} model_sha256={}\n",
            self.model_sha256
        )
        .into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            for r in rows {
                w.serialize(r).map_err(|e| CliError::io(e.to_string()))?;
            }
            w.flush().map_err(|e| CliError::io(e.to_string()))?;
        }
        self.write(file, &out)
    }

    fn write(&self, file: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(file);
        fs::write(&path, bytes).map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

/// Accepts either an artifact envelope (payload under `data`) or a bare payload.
pub fn unwrap_envelope(v: Value) -> Value {
    match v {
        Value::Object(mut m) if m.contains_key("schema") && m.contains_key("data") => {
            m.remove("data").unwrap_or(Value::Null)
        }
        other => other,
    }
}
