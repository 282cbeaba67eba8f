//! Corpus listing, run manifests and atomic text output.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use lbm::wav::read_wav;
use lbm::Waveform;
use log::warn;
use serde::Serialize;

/// `.wav` files directly inside `dir`, sorted by name.
pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))? {
        let path = entry?.path();
        let is_wav = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("wav"))
            .unwrap_or(false);
        if path.is_file() && is_wav {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Reads every WAV in `dir`, warning about and skipping unreadable files.
pub fn read_corpus(dir: &Path) -> Result<Vec<(PathBuf, Waveform)>> {
    let mut out = Vec::new();
    for path in list_wavs(dir)? {
        match read_wav(&path) {
            Ok(w) => out.push((path, w)),
            Err(e) => warn!("skipping {}: {e}", path.display()),
        }
    }
    if out.is_empty() {
        bail!("no readable WAV files in {}", dir.display());
    }
    Ok(out)
}

pub fn file_name(path: &Path) -> OsString {
    path.file_name().map(|s| s.to_owned()).unwrap_or_default()
}

/// `<path><suffix>`, e.g. `out.wav` → `out.wav.manifest.json`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn write_text_atomic(path: &Path, text: &str) -> Result<()> {
    lbm::checkpoint::write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

/// Record of one command invocation, written next to its main output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub started_unix_s: u64,
    pub wall_clock_s: f64,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn start(command: &str, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            config: Vec::new(),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: version_string(),
            started_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            wall_clock_s: 0.0,
            started: Some(Instant::now()),
        }
    }

    /// Stamps the elapsed time and writes the manifest to `<anchor>.manifest.json`.
    pub fn finish(mut self, anchor: &Path) -> Result<()> {
        self.wall_clock_s = self.started.map(|t| t.elapsed().as_secs_f64()).unwrap_or(0.0);
        let text = serde_json::to_string_pretty(&self)?;
        write_text_atomic(&sidecar(anchor, ".manifest.json"), &text)
    }
}

/// Package version plus the source revision when the build provides one.
pub fn version_string() -> String {
    match option_env!("LBM_GIT_REV") {
        Some(rev) => format!("{}+{rev}", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}
