//! Reproducibility record written next to every command's outputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use vqa_core::{Error, Result};

use crate::config::{Resolved, RunConfig, Source};

pub const RUN_FILE: &str = "run.json";
pub const RUN_SCHEMA: &str = "vqa-run/1";

/// Contains no timestamps or thread counts, so two runs with identical
/// records are expected to produce identical outputs.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub schema: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub provenance: BTreeMap<String, Source>,
    pub inputs: BTreeMap<String, String>,
    pub notes: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn new(command: &str, resolved: &Resolved) -> Self {
        RunRecord {
            schema: RUN_SCHEMA,
            version: vqa_core::VERSION,
            command: command.into(),
            seed: resolved.config.seed,
            config: resolved.config.clone(),
            provenance: resolved.provenance.clone(),
            inputs: BTreeMap::new(),
            notes: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, name: &str, path: impl AsRef<Path>) {
        self.inputs.insert(name.into(), path.as_ref().display().to_string());
    }

    pub fn output(&mut self, name: &str, path: impl AsRef<Path>) {
        self.outputs.insert(name.into(), path.as_ref().display().to_string());
    }

    pub fn note(&mut self, name: &str, value: String) {
        self.notes.insert(name.into(), value);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::Format {
            path: path.into(),
            message: format!("cannot write run record: {e}"),
        })
    }
}
