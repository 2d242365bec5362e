use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::Failure;

/// Record of one command invocation: enough to rerun it exactly.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    /// Fully resolved settings the command ran with.
    pub settings: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Headline numbers (APs, losses, calibrated parameters).
    pub results: serde_json::Map<String, serde_json::Value>,
    pub timings_seconds: Vec<(String, f64)>,
    #[serde(skip)]
    clock: Option<(String, Instant)>,
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, seed: Option<u64>, threads: Option<usize>) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            config_path: config_path.map(Path::to_path_buf),
            seed,
            threads,
            settings: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            results: serde_json::Map::new(),
            timings_seconds: Vec::new(),
            clock: None,
        }
    }

    pub fn settings(&mut self, value: &impl Serialize) -> Result<(), Failure> {
        self.settings = serde_json::to_value(value).map_err(|e| Failure::Runtime(e.to_string()))?;
        Ok(())
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }

    pub fn result(&mut self, key: &str, value: impl Serialize) {
        self.results
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
    }

    /// Starts timing a phase, closing the previous one.
    pub fn phase(&mut self, name: &str) {
        self.stop();
        self.clock = Some((name.to_string(), Instant::now()));
    }

    fn stop(&mut self) {
        if let Some((name, t)) = self.clock.take() {
            self.timings_seconds.push((name, t.elapsed().as_secs_f64()));
        }
    }

    pub fn write(mut self, dir: &Path) -> Result<PathBuf, Failure> {
        self.stop();
        let path = dir.join(format!("manifest-{}.json", self.command.replace(' ', "-")));
        let text = serde_json::to_string_pretty(&self).map_err(|e| Failure::Runtime(e.to_string()))?;
        ctxhead::dataio::write_text(&path, &(text + "\n"))?;
        Ok(path)
    }
}
