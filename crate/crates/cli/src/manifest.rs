use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use tunevec_core::{Error, Result};

pub const TOOL: &str = "tunevec";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub role: String,
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// What a report was computed from. Worker count and wall time are left out
/// so reruns compare byte for byte; they go to the `.run.json` sidecar.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub seed: u64,
    pub config: Value,
    pub inputs: Vec<InputDigest>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: u64, global: &impl Serialize, args: &impl Serialize) -> Self {
        let mut config = Map::new();
        config.insert(
            "global".into(),
            serde_json::to_value(global).expect("serializable options"),
        );
        config.insert(
            "command".into(),
            serde_json::to_value(args).expect("serializable options"),
        );
        Self {
            tool: TOOL,
            version: VERSION,
            subcommand: subcommand.to_owned(),
            seed,
            config: Value::Object(config),
            inputs: Vec::new(),
        }
    }

    pub fn record_bytes(&mut self, role: &str, path: &Path, bytes: &[u8]) {
        self.inputs.push(InputDigest {
            role: role.to_owned(),
            path: path.display().to_string(),
            bytes: bytes.len() as u64,
            sha256: hex(&Sha256::digest(bytes)),
        });
    }

    /// Read a whole input file and record its digest.
    pub fn read_input(&mut self, role: &str, path: &Path) -> Result<Vec<u8>> {
        let bytes = read_file(path)?;
        self.record_bytes(role, path, &bytes);
        Ok(bytes)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("manifest serializes")
    }
}

/// Wall-clock and worker information for one run, kept out of the report.
#[derive(Debug, Serialize)]
pub struct RunInfo<'a> {
    pub manifest: &'a RunManifest,
    pub threads: usize,
    pub elapsed_seconds: f64,
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

pub fn write_sidecar(out: &Path, manifest: &RunManifest, started: Instant) -> Result<()> {
    let info = RunInfo {
        manifest,
        threads: rayon::current_num_threads(),
        elapsed_seconds: started.elapsed().as_secs_f64(),
    };
    let mut text = serde_json::to_string_pretty(&info)?;
    text.push('\n');
    write_file(&sidecar_path(out), text.as_bytes())
}
