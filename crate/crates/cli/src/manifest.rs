//! Run manifests and atomic output writes.
//!
//! Every subcommand writes a manifest next to its outputs carrying the
//! resolved configuration, the seeds, and digests of the input files —
//! enough to reproduce the run byte for byte.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::Serialize;

#[derive(Serialize)]
pub struct InputDigest {
    pub path: String,
    pub fnv1a64: String,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub args: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub seeds: Vec<u64>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, args: serde_json::Value) -> Self {
        Self {
            tool: "deferkit",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            args,
            inputs: Vec::new(),
            seeds: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> std::io::Result<()> {
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            fnv1a64: format!("{:016x}", fnv1a64_file(path)?),
        });
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        atomic_write(path, text.as_bytes())
    }
}

/// FNV-1a 64-bit digest of a file's bytes.
pub fn fnv1a64_file(path: &Path) -> std::io::Result<u64> {
    let mut file = fs::File::open(path)?;
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut buf = [0u8; 8192];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        for &byte in &buf[..n] {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    Ok(hash)
}

/// Write bytes to a temporary file in the destination directory, then
/// rename over the final path.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = temp_sibling(path);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

/// Run a writer against a temporary sibling path, then rename into place.
pub fn atomic_write_with<E>(
    path: &Path,
    write: impl FnOnce(&Path) -> Result<(), E>,
) -> Result<(), WriteError<E>> {
    let tmp = temp_sibling(path);
    write(&tmp).map_err(WriteError::Writer)?;
    fs::rename(&tmp, path).map_err(WriteError::Rename)?;
    Ok(())
}

pub enum WriteError<E> {
    Writer(E),
    Rename(std::io::Error),
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    name.push_str(&format!(".tmp-{}", std::process::id()));
    path.with_file_name(name)
}
