//! `manifest.json`: what produced an output directory, and a SHA-256 of
//! every file in it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    version: u32,
    command: &'a str,
    seed: u64,
    config: &'a C,
    files: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    created_unix: Option<u64>,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::usage(format!("{}: {e}", path.display()))
}

/// Relative paths (with `/` separators) and digests of every file under
/// `dir` except the manifest itself, in sorted order.
pub fn hash_tree(dir: &Path) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| io_err(&d, e))? {
            let path = entry.map_err(|e| io_err(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(dir).expect("walked from dir");
            let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            if rel == MANIFEST_NAME {
                continue;
            }
            let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
            out.insert(rel, hex::encode(Sha256::digest(&bytes)));
        }
    }
    Ok(out)
}

pub fn write<C: Serialize>(dir: &Path, command: &str, seed: u64, config: &C, timestamp: bool) -> CliResult {
    let created_unix = timestamp.then(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0));
    let manifest = Manifest {
        version: crate::config::CONFIG_VERSION,
        command,
        seed,
        config,
        files: hash_tree(dir)?,
        created_unix,
    };
    nas3r_core::json::write_pretty(&manifest, &dir.join(MANIFEST_NAME))?;
    Ok(())
}
