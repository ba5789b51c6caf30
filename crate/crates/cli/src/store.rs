//! Stage manifests: which key produced a directory's files, and their hashes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "stage.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    /// Hash of the stage's configuration and its upstream keys.
    pub key: String,
    pub config_hash: String,
    /// Relative path to SHA-256 of every file the stage wrote.
    pub files: BTreeMap<String, String>,
}

pub fn file_hash(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn read_manifest(dir: &Path) -> Option<StageManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST)).ok()?;
    serde_json::from_str(&text).ok()
}

/// Records `files` (relative to `dir`) under `key`.
pub fn write_manifest(dir: &Path, stage: &str, key: &str, config_hash: &str, files: &[String]) -> Result<()> {
    let mut hashes = BTreeMap::new();
    for f in files {
        hashes.insert(f.clone(), file_hash(&dir.join(f))?);
    }
    let m = StageManifest {
        stage: stage.to_string(),
        key: key.to_string(),
        config_hash: config_hash.to_string(),
        files: hashes,
    };
    write_json(&dir.join(MANIFEST), &m)
}

/// Checks that `dir` holds intact output of `stage` under `key`.
pub fn verify(dir: &Path, stage: &str, key: &str) -> Result<StageManifest> {
    let Some(m) = read_manifest(dir) else {
        bail!("no {stage} output in {}", dir.display());
    };
    if m.stage != stage {
        bail!("{} holds {} output, not {stage}", dir.display(), m.stage);
    }
    if m.key != key {
        bail!(
            "{stage} output in {} was produced by a different configuration (key {} != {key})",
            dir.display(),
            m.key
        );
    }
    for (f, want) in &m.files {
        let got = file_hash(&dir.join(f)).with_context(|| format!("{stage} output is incomplete"))?;
        if &got != want {
            bail!("{} changed since the {stage} stage wrote it", dir.join(f).display());
        }
    }
    Ok(m)
}

/// Removes a previous manifest so a half-written stage is never trusted.
pub fn invalidate(dir: &Path) -> Result<()> {
    match fs::remove_file(dir.join(MANIFEST)) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
        _ => Ok(()),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
