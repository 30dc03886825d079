use std::fs;
use std::path::{Path, PathBuf};

use dint_core::config::{hash_text, RunConfig};
use serde::Serialize;
use serde_json::Value;

use crate::Failure;

pub const FILE: &str = "manifest.json";

/// Record of one invocation, written before any computation starts.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'static str,
    pub seed: u64,
    pub config: String,
    pub config_hash: String,
    pub args: Value,
    pub out_dir: PathBuf,
    /// Hash of every field above except `out_dir`, so runs that differ only
    /// in where they write share a hash.
    pub manifest_hash: String,
}

#[derive(Serialize)]
struct Hashed<'a> {
    tool: &'a str,
    version: &'a str,
    subcommand: &'a str,
    seed: u64,
    config: &'a str,
    args: &'a Value,
}

impl Manifest {
    pub fn new(subcommand: &'static str, cfg: Option<&RunConfig>, seed: u64, args: Value, out_dir: &Path) -> Self {
        let config = cfg.map(RunConfig::to_text).unwrap_or_default();
        let version = env!("CARGO_PKG_VERSION");
        let hashed = Hashed { tool: "dint", version, subcommand, seed, config: &config, args: &args };
        let manifest_hash = hash_text(&serde_json::to_string(&hashed).expect("manifest serializes"));
        Manifest {
            tool: "dint",
            version,
            subcommand,
            seed,
            config_hash: hash_text(&config),
            config,
            args,
            out_dir: out_dir.to_path_buf(),
            manifest_hash,
        }
    }

    pub fn hash(&self) -> &str {
        &self.manifest_hash
    }

    /// Creates `out_dir` and writes `manifest.json` into it.
    pub fn write(&self) -> Result<(), Failure> {
        fs::create_dir_all(&self.out_dir).map_err(|e| Failure::io(&self.out_dir, e))?;
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_file(&self.out_dir.join(FILE), &(text + "\n"))
    }

    /// Leading comment line of every CSV output.
    pub fn csv_tag(&self) -> String {
        format!("# manifest={}\n", self.manifest_hash)
    }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::io(path, e))
}
