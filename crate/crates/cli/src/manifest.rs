//! Run manifests, artifact hashes and output-directory locks.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Config, SEED_KEYS};

/// Environment variable naming the root for relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "EXAGGERATOR_OUT";
/// Append-only log of every run in an output directory, one JSON object per line.
pub const MANIFEST_FILE: &str = "runs.jsonl";
pub const LOCK_FILE: &str = ".lock";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    /// Input path to sha256 of its contents.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
    pub version: String,
}

/// Resolves `--out`: relative paths land under `$EXAGGERATOR_OUT` when set.
pub fn output_dir(out: Option<&Path>, command: &str) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
    match (out, root) {
        (Some(p), _) if p.is_absolute() => p.to_path_buf(),
        (Some(p), Some(r)) => r.join(p),
        (Some(p), None) => p.to_path_buf(),
        (None, Some(r)) => r.join(command),
        (None, None) => PathBuf::from("runs").join(command),
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "output directory {} is locked by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn hash_into(h: &mut Sha256, root: &Path, dir: &Path) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if name.starts_with('.') || name == MANIFEST_FILE {
            continue;
        }
        if p.is_dir() {
            hash_into(h, root, &p)?;
        } else {
            let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            h.update(rel.as_bytes());
            h.update([0]);
            h.update(fs::read(&p).with_context(|| format!("reading {}", p.display()))?);
        }
    }
    Ok(())
}

/// sha256 of a file, or of every file under a directory (relative names
/// included, hidden files and run logs skipped).
pub fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        hash_into(&mut h, path, path)?;
    } else {
        h.update(fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(format!("{:x}", h.finalize()))
}

/// Collects the manifest of one run while it executes.
pub struct RunRecorder {
    command: String,
    config: Config,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    started: Instant,
    started_unix: u64,
}

impl RunRecorder {
    pub fn start(command: &str, config: &Config) -> Self {
        Self {
            command: command.into(),
            config: config.clone(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        }
    }

    /// Hashes an input before it is read.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            bail!("input {} does not exist", path.display());
        }
        self.inputs.insert(path.display().to_string(), hash_path(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Appends the manifest to `<dir>/runs.jsonl`.
    pub fn finish(self, dir: &Path) -> Result<RunManifest> {
        let resolved = self.config.resolved();
        let seeds = SEED_KEYS
            .iter()
            .filter_map(|k| resolved.get(*k).and_then(|v| v.parse().ok()).map(|v| (k.to_string(), v)))
            .collect();
        let m = RunManifest {
            command: self.command,
            config: resolved,
            seeds,
            inputs: self.inputs,
            outputs: self.outputs,
            started_unix: self.started_unix,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(MANIFEST_FILE))
            .with_context(|| format!("opening {}", dir.join(MANIFEST_FILE).display()))?;
        writeln!(f, "{}", serde_json::to_string(&m)?)?;
        Ok(m)
    }
}

pub fn read_manifests(dir: &Path) -> Result<Vec<RunManifest>> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).context("malformed run manifest line"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = OutputLock::acquire(dir.path()).unwrap();
        assert!(OutputLock::acquire(dir.path()).unwrap_err().to_string().contains("locked"));
        drop(a);
        OutputLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn directory_hash_tracks_content_not_logs() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), "1").unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/b.txt"), "2").unwrap();
        let h0 = hash_path(dir.path()).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{}").unwrap();
        fs::write(dir.path().join(LOCK_FILE), "1").unwrap();
        assert_eq!(hash_path(dir.path()).unwrap(), h0);
        fs::write(dir.path().join("sub/b.txt"), "3").unwrap();
        assert_ne!(hash_path(dir.path()).unwrap(), h0);
        // known digest of a single file
        fs::write(dir.path().join("abc"), "abc").unwrap();
        assert_eq!(
            hash_path(&dir.path().join("abc")).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifests_append() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = Config::parse("train.seed = 4").unwrap();
        for _ in 0..2 {
            let mut r = RunRecorder::start("synth-data", &cfg);
            r.output(&dir.path().join("x"));
            r.finish(dir.path()).unwrap();
        }
        let ms = read_manifests(dir.path()).unwrap();
        assert_eq!(ms.len(), 2);
        assert_eq!(ms[0].seeds["train.seed"], 4);
        assert_eq!(ms[1].command, "synth-data");
    }
}
