use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bindlogic::dataset::FEATURIZATION_VERSION;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Provenance for one artifact: resolved configuration, input and output
/// digests, seed, versions and wall time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    /// Path to lowercase hex SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub featurization_version: u32,
    pub threads: usize,
    pub wall_time_seconds: f64,
    pub summary: BTreeMap<String, serde_json::Value>,
    /// Manifests written by the steps of a composite run.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<String>,
    #[serde(skip, default = "Instant::now")]
    started: Instant,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// `<artifact>.manifest.json`.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn key(path: &Path) -> String {
    path.display().to_string()
}

impl RunManifest {
    pub fn new(subcommand: &str, config: serde_json::Value, threads: usize) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seed: None,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            featurization_version: FEATURIZATION_VERSION,
            threads,
            wall_time_seconds: 0.0,
            summary: BTreeMap::new(),
            steps: Vec::new(),
            started: Instant::now(),
        }
    }

    /// Records an input; unreadable inputs are left to the step to report.
    pub fn input(&mut self, path: &Path) {
        if let Ok(d) = sha256_file(path) {
            self.inputs.insert(key(path), d);
        }
    }

    /// Marks an output; its digest is taken when the manifest is written.
    pub fn output(&mut self, path: &Path) {
        self.outputs.insert(key(path), String::new());
    }

    pub fn child(&self, subcommand: &str) -> RunManifest {
        let mut m = RunManifest::new(subcommand, self.config.clone(), self.threads);
        m.seed = self.seed;
        m
    }

    /// Folds a finished step into a composite manifest.
    pub fn absorb(&mut self, (path, step): (PathBuf, RunManifest)) {
        for (p, d) in step.outputs {
            self.outputs.insert(p, d);
        }
        for (p, d) in step.inputs {
            if !self.outputs.contains_key(&p) {
                self.inputs.insert(p, d);
            }
        }
        for (k, v) in step.summary {
            self.summary.insert(format!("{}.{k}", step.subcommand), v);
        }
        self.steps.push(key(&path));
    }

    fn seal(&mut self) -> Result<(), CliError> {
        self.wall_time_seconds = self.started.elapsed().as_secs_f64();
        for (p, d) in self.outputs.iter_mut() {
            *d = sha256_file(Path::new(p))?;
        }
        Ok(())
    }

    pub fn write_to(mut self, path: &Path) -> Result<(PathBuf, RunManifest), CliError> {
        self.seal()?;
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Ok((path.to_path_buf(), self))
    }

    /// Writes the manifest beside `artifact`.
    pub fn finish(self, artifact: &Path) -> Result<(PathBuf, RunManifest), CliError> {
        self.write_to(&manifest_path(artifact))
    }
}
