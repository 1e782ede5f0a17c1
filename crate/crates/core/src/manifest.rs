//! Tab-separated utterance manifests: `utterance_id<TAB>speaker_id<TAB>path`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utterance: String,
    pub speaker: String,
    pub path: PathBuf,
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [utterance, speaker, path] = fields[..] else {
            return Err(Error::format("manifest", format!("line {}: expected 3 tab-separated fields, got {}", n + 1, fields.len())));
        };
        if utterance.is_empty() || speaker.is_empty() || path.is_empty() {
            return Err(Error::format("manifest", format!("line {}: empty field", n + 1)));
        }
        let path = Path::new(path);
        out.push(ManifestEntry {
            utterance: utterance.to_string(),
            speaker: speaker.to_string(),
            path: if path.is_absolute() { path.to_path_buf() } else { base.join(path) },
        });
    }
    Ok(out)
}

/// Reads a manifest; relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Writes entries with paths relative to `base` where possible.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry], base: &Path) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        let p = e.path.strip_prefix(base).unwrap_or(&e.path);
        writeln!(out, "{}\t{}\t{}", e.utterance, e.speaker, p.display())?;
    }
    fs::write(path, out)?;
    Ok(())
}
