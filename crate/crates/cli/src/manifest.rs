//! Per-stage run manifests: what went in, what came out, and their hashes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use prefrank_core::imageio::sha256_hex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the manifest's directory when the file lives below it.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub version: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn display_path(dir: &Path, p: &Path) -> String {
    let (dir, p) = (dir.canonicalize().unwrap_or(dir.into()), p.canonicalize().unwrap_or(p.into()));
    p.strip_prefix(&dir).unwrap_or(&p).to_string_lossy().into_owned()
}

fn hash_file(p: &Path) -> anyhow::Result<String> {
    Ok(sha256_hex(&fs::read(p).with_context(|| format!("reading {}", p.display()))?))
}

/// Collects a stage's artifacts and writes `manifest-{stage}.json` on [`finish`](Self::finish).
pub struct Recorder {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Recorder {
    pub fn start(dir: &Path, stage: impl Into<String>, config: &impl Serialize, seed: Option<u64>) -> anyhow::Result<Self> {
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                stage: stage.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                config: serde_json::to_value(config)?,
                seed,
                inputs: Vec::new(),
                outputs: Vec::new(),
                started_unix_ms: now_ms(),
                finished_unix_ms: 0,
            },
        })
    }

    pub fn input(&mut self, p: &Path) -> anyhow::Result<()> {
        let sha256 = hash_file(p)?;
        self.manifest.inputs.push(Artifact { path: display_path(&self.dir, p), sha256 });
        Ok(())
    }

    pub fn output(&mut self, p: &Path) -> anyhow::Result<()> {
        let sha256 = hash_file(p)?;
        self.manifest.outputs.push(Artifact { path: display_path(&self.dir, p), sha256 });
        Ok(())
    }

    pub fn finish(mut self) -> anyhow::Result<PathBuf> {
        self.manifest.finished_unix_ms = now_ms();
        let path = self.dir.join(format!("manifest-{}.json", self.manifest.stage));
        fs::write(&path, serde_json::to_string_pretty(&self.manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Reads `p`, failing if a manifest next to it recorded different contents.
pub fn read_verified(p: &Path) -> anyhow::Result<Vec<u8>> {
    let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
    let dir = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let target = p.canonicalize()?;
    let Ok(listing) = fs::read_dir(dir) else { return Ok(bytes) };
    let mut manifests: Vec<PathBuf> = listing
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|m| m.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("manifest-") && n.ends_with(".json")))
        .collect();
    manifests.sort();
    let actual = sha256_hex(&bytes);
    for m in manifests {
        let Ok(run) = serde_json::from_slice::<RunManifest>(&fs::read(&m)?) else { continue };
        for a in &run.outputs {
            if dir.join(&a.path).canonicalize().is_ok_and(|c| c == target) && a.sha256 != actual {
                bail!("{} changed since stage {} wrote it (see {})", p.display(), run.stage, m.display());
            }
        }
    }
    Ok(bytes)
}

pub fn read_verified_string(p: &Path) -> anyhow::Result<String> {
    String::from_utf8(read_verified(p)?).with_context(|| format!("{} is not UTF-8", p.display()))
}
