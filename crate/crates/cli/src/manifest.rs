//! Run manifests attached to every artifact a command writes.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

/// The reproducible part of a run. Checkpoints embed this in their header,
/// so it holds nothing that changes between identical invocations.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: &'static str,
    /// Version of the CSV layout for commands that write a fixed table.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv_schema: Option<u32>,
}

/// Manifest plus timing, written next to each output as
/// `<output>.manifest.json`.
#[derive(Serialize)]
struct Sidecar<'a> {
    #[serde(flatten)]
    run: &'a RunManifest,
    started_unix_secs: u64,
    wall_clock_secs: f64,
}

pub struct Run {
    pub manifest: RunManifest,
    started: SystemTime,
    clock: Instant,
}

impl Run {
    pub fn start(command: &str, config: Option<&Path>, seed: Option<u64>) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                config: config.map(Path::to_path_buf),
                seed,
                inputs: Vec::new(),
                outputs: Vec::new(),
                tool_version: env!("CARGO_PKG_VERSION"),
                csv_schema: None,
            },
            started: SystemTime::now(),
            clock: Instant::now(),
        }
    }

    pub fn input(&mut self, p: &Path) {
        self.manifest.inputs.push(p.to_path_buf());
    }

    pub fn output(&mut self, p: &Path) {
        self.manifest.outputs.push(p.to_path_buf());
    }

    pub fn header_value(&self) -> Value {
        serde_json::to_value(&self.manifest).expect("manifest serialises")
    }

    /// Writes one sidecar per recorded output.
    pub fn finish(self) -> Result<()> {
        let sidecar = Sidecar {
            run: &self.manifest,
            started_unix_secs: self
                .started
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            wall_clock_secs: self.clock.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&sidecar)?;
        for out in &self.manifest.outputs {
            let path = sidecar_path(out);
            std::fs::write(&path, &text)
                .with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
