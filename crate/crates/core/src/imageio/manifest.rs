//! Tab-separated dataset manifests.
//!
//! Two record shapes share one file format, one record per line:
//!
//! ```text
//! cleanPath<TAB>depthPath
//! degradedPath<TAB>gtPath<TAB>waterType<TAB>B_r,B_g,B_b<TAB>depthMax<TAB>seed
//! ```
//!
//! Paths are relative to the directory containing the manifest. Blank lines
//! are ignored.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::watersim::WaterType;

/// Synthesis parameters recorded for a degraded image.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisRecord {
    pub water_type: WaterType,
    pub background: [f64; 3],
    pub depth_max: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Clean image (source manifests) or degraded image (paired manifests).
    pub first: String,
    /// Depth map (source manifests) or ground truth (paired manifests).
    pub second: String,
    pub synthesis: Option<SynthesisRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    base_dir: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        DatasetManifest {
            base_dir: base_dir.into(),
            entries: Vec::new(),
        }
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends an entry, rejecting a repeated first path.
    pub fn push(&mut self, entry: ManifestEntry) -> Result<()> {
        if self.entries.iter().any(|e| e.first == entry.first) {
            return Err(Error::format(
                &self.base_dir,
                format!("duplicate manifest path {:?}", entry.first),
            ));
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Absolute (or base-relative) location of a manifest path.
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    /// Serialized form; exactly what [`write_manifest`] puts on disk.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.first);
            out.push('\t');
            out.push_str(&e.second);
            if let Some(s) = &e.synthesis {
                let [r, g, b] = s.background;
                write!(
                    out,
                    "\t{}\t{r},{g},{b}\t{}\t{}",
                    s.water_type, s.depth_max, s.seed
                )
                .expect("writing to a String");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>, origin: &Path) -> Result<Self> {
        let mut manifest = DatasetManifest::new(base_dir);
        let mut seen = HashSet::new();
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let err = |msg: String| Error::format(origin, format!("line {lineno}: {msg}"));
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let synthesis = match fields.len() {
                2 => None,
                6 => {
                    let water_type: WaterType =
                        fields[2].parse().map_err(|e: Error| err(e.to_string()))?;
                    let bg: Vec<f64> = fields[3]
                        .split(',')
                        .map(|v| v.trim().parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| err(format!("bad background light {:?}: {e}", fields[3])))?;
                    let background: [f64; 3] = bg.try_into().map_err(|_| {
                        err(format!(
                            "background light needs 3 values, got {:?}",
                            fields[3]
                        ))
                    })?;
                    let depth_max = fields[4]
                        .parse()
                        .map_err(|e| err(format!("bad depthMax {:?}: {e}", fields[4])))?;
                    let seed = fields[5]
                        .parse()
                        .map_err(|e| err(format!("bad seed {:?}: {e}", fields[5])))?;
                    Some(SynthesisRecord {
                        water_type,
                        background,
                        depth_max,
                        seed,
                    })
                }
                n => {
                    return Err(err(format!(
                        "expected 2 or 6 tab-separated fields, got {n}"
                    )))
                }
            };
            if fields[0].is_empty() || fields[1].is_empty() {
                return Err(err("empty path field".into()));
            }
            if !seen.insert(fields[0].to_string()) {
                return Err(err(format!("duplicate path {:?}", fields[0])));
            }
            manifest.entries.push(ManifestEntry {
                first: fields[0].to_string(),
                second: fields[1].to_string(),
                synthesis,
            });
        }
        Ok(manifest)
    }

    /// Copy holding only the entries at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> DatasetManifest {
        DatasetManifest {
            base_dir: self.base_dir.clone(),
            entries: indices.iter().map(|&i| self.entries[i].clone()).collect(),
        }
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes)
        .map_err(|e| Error::format(path, format!("manifest is not UTF-8: {e}")))?;
    DatasetManifest::parse(&text, parent_dir(path), path)
}

/// Writes the manifest. Entry paths are written verbatim, so they should be
/// relative to `path`'s directory.
pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    super::atomic_write(path, manifest.to_text().as_bytes())
}
