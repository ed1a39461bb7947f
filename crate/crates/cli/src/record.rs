//! Output bookkeeping and run.json.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use tba_core::container::sha256_hex;
use tba_core::report::CsvTable;
use tba_core::{Container, Error};

/// Writes files under the output directory and remembers their hashes.
pub struct Run {
    dir: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    resolved: BTreeMap<String, Value>,
}

impl Run {
    pub fn new(dir: &Path) -> Result<Self, Error> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            resolved: BTreeMap::new(),
        })
    }

    /// Records the hash of an input file.
    pub fn input(&mut self, path: &Path) -> Result<(), Error> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// Records a value chosen at run time (defaults resolved against data).
    pub fn resolve(&mut self, key: &str, value: impl Serialize) {
        self.resolved
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    pub fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), Error> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn csv(&mut self, name: &str, table: &CsvTable) -> Result<(), Error> {
        self.bytes(name, table.as_str().as_bytes())
    }

    pub fn container(&mut self, name: &str, c: &Container) -> Result<(), Error> {
        self.bytes(name, &c.to_bytes())
    }

    pub fn json(&mut self, name: &str, value: &impl Serialize) -> Result<(), Error> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Argument(e.to_string()))?;
        text.push('\n');
        self.bytes(name, text.as_bytes())
    }

    /// Writes run.json: the parsed command, resolved defaults and the
    /// hashes of every input and output.
    pub fn finish(mut self, command: &impl Serialize) -> Result<(), Error> {
        let argv: Vec<String> = std::env::args().collect();
        let record = serde_json::json!({
            "tool": "tba",
            "version": env!("CARGO_PKG_VERSION"),
            "argv": argv,
            "config": command,
            "resolved": self.resolved,
            "inputs": self.inputs,
            "outputs": self.outputs,
        });
        let outputs = std::mem::take(&mut self.outputs);
        self.json("run.json", &record)?;
        self.outputs = outputs;
        Ok(())
    }
}
