use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SCHEMA_VERSION: &str = "sunspin-output/1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Serialize)]
struct Entry {
    file: String,
    bytes: usize,
    sha256: String,
}

#[derive(Serialize)]
struct Input {
    path: String,
    sha256: String,
}

/// Sole writer for one output directory; records every file for the manifest.
pub struct Output {
    dir: PathBuf,
    written: Vec<Entry>,
    inputs: Vec<Input>,
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

impl Output {
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self, CliError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        Ok(Self { dir, written: Vec::new(), inputs: Vec::new() })
    }

    pub fn record_input(&mut self, path: &str, bytes: &[u8]) {
        self.inputs.push(Input { path: path.to_string(), sha256: sha256_hex(bytes) });
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| io(&path, e))?;
        self.written.push(Entry { file: name.to_string(), bytes: bytes.len(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    /// CSV with a single header line; `header` entries carry their unit.
    pub fn csv(&mut self, name: &str, header: &[String], rows: &[Vec<f64>]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| CliError::Io(format!("{name}: {e}"));
        w.write_record(header).map_err(fail)?;
        for r in rows {
            w.write_record(r.iter().map(|x| x.to_string())).map_err(fail)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(format!("{name}: {e}")))?;
        self.write(name, &bytes)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Io(format!("{name}: {e}")))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// Writes `manifest.json` listing the inputs, the resolved config and every output hash.
    pub fn finish(self, command: &str, config: Option<&Value>) -> Result<PathBuf, CliError> {
        let manifest = json!({
            "schema_version": SCHEMA_VERSION,
            "tool": { "name": "sunspin", "version": env!("CARGO_PKG_VERSION") },
            "command": command,
            "inputs": self.inputs,
            "config": config,
            "outputs": self.written,
        });
        let path = self.dir.join("manifest.json");
        let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
        bytes.push(b'\n');
        fs::write(&path, bytes).map_err(|e| io(&path, e))?;
        Ok(self.dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn manifest_lists_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Output::create(dir.path().join("o")).unwrap();
        out.csv("a.csv", &["t [s]".into(), "y [1]".into()], &[vec![0.0, 1.5], vec![0.1, -2.0]]).unwrap();
        let text = fs::read_to_string(dir.path().join("o/a.csv")).unwrap();
        assert_eq!(text, "t [s],y [1]\n0,1.5\n0.1,-2\n");
        let dir_path = out.finish("test", None).unwrap();
        let m: Value = serde_json::from_slice(&fs::read(dir_path.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["schema_version"], SCHEMA_VERSION);
        assert_eq!(m["outputs"][0]["sha256"], sha256_hex(text.as_bytes()));
    }
}
