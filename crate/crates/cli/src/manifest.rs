use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::commands::CliResult;

/// Hex sha256 of the config's JSON serialization.
pub fn config_hash<T: Serialize>(config: &T) -> CliResult<String> {
    let bytes = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// `run_manifest.json`: command, seed, config hash, tool version and the
/// effective config.
pub fn write_run_manifest<T: Serialize>(out_dir: &Path, command: &str, seed: u64, config: &T) -> CliResult<()> {
    fs::create_dir_all(out_dir)?;
    let doc = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": seed,
        "config_sha256": config_hash(config)?,
        "config": config,
    });
    fs::write(out_dir.join("run_manifest.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}
