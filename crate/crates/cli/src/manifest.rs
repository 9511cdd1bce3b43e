use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one command run, enough to repeat it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, input paths made absolute and
    /// `--out` removed.
    pub args: Vec<String>,
    pub tool_version: String,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<FileDigest>,
    pub seed: Option<u64>,
    pub outputs: Vec<FileDigest>,
    pub warnings: Vec<String>,
    /// Exit code of the recorded run; nonzero only for a failed comparison.
    pub exit_code: i32,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn digest(path: &Path) -> std::io::Result<FileDigest> {
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

/// Flags whose value names an input file.
pub const INPUT_FLAGS: [&str; 4] = ["--config", "--eta-file", "--data", "--manifest"];

/// Makes input paths absolute and drops `--out`, so the argument list can be
/// replayed from any directory into any output directory.
pub fn normalize_args(raw: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = raw.iter().peekable();
    while let Some(a) = it.next() {
        let (flag, inline) = match a.split_once('=') {
            Some((f, v)) if f.starts_with("--") => (f.to_string(), Some(v.to_string())),
            _ => (a.clone(), None),
        };
        if flag == "--out" {
            if inline.is_none() {
                it.next();
            }
            continue;
        }
        if INPUT_FLAGS.contains(&flag.as_str()) {
            let value = inline.or_else(|| it.next().cloned()).unwrap_or_default();
            out.push(flag);
            out.push(absolute(Path::new(&value)).display().to_string());
            continue;
        }
        out.push(a.clone());
    }
    out
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf()))
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        let path = dir.join(MANIFEST_NAME);
        let mut text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}
