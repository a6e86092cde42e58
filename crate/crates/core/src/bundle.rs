//! Dump bundles: a directory holding `manifest.json` plus one `.npy` file per
//! recorded layer.
//!
//! ```json
//! {"format_version": 1, "model": "vit", "dataset": "cifar10",
//!  "sample_ids": [7],
//!  "entries": [{"name": "block0.attn", "kind": "attention",
//!               "file": "block0.attn.npy", "shape": [8, 65, 65], "index": 0}]}
//! ```
//!
//! Loading validates every entry against its kind and checks each file's npy
//! header and payload length. Tensors themselves are decoded on demand.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::npy::{self, NpyError};
use crate::tensor::DenseTensor;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Activation,
    Attention,
    FeatureMap,
    InputImage,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Activation => "activation",
            LayerKind::Attention => "attention",
            LayerKind::FeatureMap => "feature_map",
            LayerKind::InputImage => "input_image",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub kind: LayerKind,
    pub file: String,
    pub shape: Vec<usize>,
    pub index: u64,
}

/// Raw manifest as stored on disk. Unknown top-level keys are ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: String,
    pub dataset: String,
    pub sample_ids: Vec<i64>,
    pub entries: Vec<LayerEntry>,
}

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("no {MANIFEST} in {0}")]
    MissingManifest(PathBuf),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest schema violation: {0}")]
    SchemaViolation(String),
    #[error("unsupported format_version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("duplicate entry name {0:?}")]
    DuplicateEntry(String),
    #[error("entry {entry:?}: index {index} does not follow previous index {previous}")]
    IndexOrder {
        entry: String,
        index: u64,
        previous: u64,
    },
    #[error("entry {entry:?}: shape {shape:?} invalid for kind {kind}: {reason}")]
    InvalidEntryShape {
        entry: String,
        kind: LayerKind,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("entry {entry:?}: file {file:?} not found")]
    MissingFile { entry: String, file: String },
    #[error("entry {entry:?}: manifest declares shape {declared:?} but file holds {actual:?}")]
    ShapeMismatch {
        entry: String,
        declared: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("entry {entry:?}: {source}")]
    Tensor { entry: String, source: NpyError },
    #[error("no entry named {0:?}")]
    UnknownEntry(String),
}

impl BundleError {
    pub fn code(&self) -> &'static str {
        match self {
            BundleError::MissingManifest(_) => "MissingManifest",
            BundleError::Io { .. } => "Io",
            BundleError::SchemaViolation(_) => "SchemaViolation",
            BundleError::UnsupportedVersion(_) => "UnsupportedVersion",
            BundleError::DuplicateEntry(_) => "DuplicateEntry",
            BundleError::IndexOrder { .. } => "IndexOrder",
            BundleError::InvalidEntryShape { .. } => "InvalidEntryShape",
            BundleError::MissingFile { .. } => "MissingFile",
            BundleError::ShapeMismatch { .. } => "ShapeMismatch",
            BundleError::Tensor { source, .. } => source.code(),
            BundleError::UnknownEntry(_) => "UnknownEntry",
        }
    }
}

/// A validated bundle on disk.
#[derive(Debug, Clone)]
pub struct DumpBundle {
    root: PathBuf,
    pub model: String,
    pub dataset: String,
    pub sample_ids: Vec<i64>,
    pub entries: Vec<LayerEntry>,
    pub format_version: u32,
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<DumpBundle, BundleError> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(BundleError::MissingManifest(dir.to_path_buf()));
    }
    let text = std::fs::read_to_string(&manifest_path).map_err(|source| BundleError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| BundleError::SchemaViolation(e.to_string()))?;
    validate_manifest(&manifest)?;

    for entry in &manifest.entries {
        check_file(dir, entry)?;
    }

    Ok(DumpBundle {
        root: dir.to_path_buf(),
        model: manifest.model,
        dataset: manifest.dataset,
        sample_ids: manifest.sample_ids,
        entries: manifest.entries,
        format_version: manifest.format_version,
    })
}

/// Checks everything that can be checked without touching tensor files.
pub fn validate_manifest(manifest: &Manifest) -> Result<(), BundleError> {
    if manifest.format_version != FORMAT_VERSION {
        return Err(BundleError::UnsupportedVersion(manifest.format_version));
    }
    let mut names = HashSet::new();
    let mut previous: Option<u64> = None;
    for entry in &manifest.entries {
        if entry.name.is_empty() {
            return Err(BundleError::SchemaViolation("entry with empty name".into()));
        }
        if !names.insert(entry.name.as_str()) {
            return Err(BundleError::DuplicateEntry(entry.name.clone()));
        }
        if let Some(prev) = previous {
            if entry.index <= prev {
                return Err(BundleError::IndexOrder {
                    entry: entry.name.clone(),
                    index: entry.index,
                    previous: prev,
                });
            }
        }
        previous = Some(entry.index);
        if !is_relative_inside(&entry.file) {
            return Err(BundleError::SchemaViolation(format!(
                "entry {:?}: file {:?} must be a relative path inside the bundle",
                entry.name, entry.file
            )));
        }
        check_entry_shape(entry, manifest.sample_ids.len())?;
    }
    Ok(())
}

fn is_relative_inside(file: &str) -> bool {
    let path = Path::new(file);
    !file.is_empty() && path.components().all(|c| matches!(c, Component::Normal(_)))
}

fn check_entry_shape(entry: &LayerEntry, n_samples: usize) -> Result<(), BundleError> {
    let invalid = |reason: &str| BundleError::InvalidEntryShape {
        entry: entry.name.clone(),
        kind: entry.kind,
        shape: entry.shape.clone(),
        reason: reason.to_string(),
    };
    let shape = entry.shape.as_slice();
    if shape.contains(&0) {
        return Err(invalid("dimensions must be positive"));
    }
    match entry.kind {
        LayerKind::Attention => match *shape {
            [_, t, t2] if t == t2 && t >= 2 => Ok(()),
            [_, _, _] => Err(invalid("expected (heads, T, T) with T >= 2")),
            _ => Err(invalid("expected rank 3 (heads, T, T)")),
        },
        LayerKind::FeatureMap => match *shape {
            [_, _, _] => Ok(()),
            _ => Err(invalid("expected rank 3 (C, H, W)")),
        },
        LayerKind::Activation => match *shape {
            [m, _] if m < 2 => Err(invalid("need at least 2 examples")),
            [m, _] if m != n_samples => Err(invalid(&format!(
                "example count {m} differs from {n_samples} sample_ids"
            ))),
            [_, _] => Ok(()),
            _ => Err(invalid("expected rank 2 (m, p)")),
        },
        LayerKind::InputImage => match *shape {
            [3, _, _] | [_, _] => Ok(()),
            _ => Err(invalid("expected (3, H, W) or (H, W)")),
        },
    }
}

fn check_file(dir: &Path, entry: &LayerEntry) -> Result<(), BundleError> {
    let path = dir.join(&entry.file);
    let file = File::open(&path).map_err(|_| BundleError::MissingFile {
        entry: entry.name.clone(),
        file: entry.file.clone(),
    })?;
    let len = file
        .metadata()
        .map_err(|source| BundleError::Io {
            path: path.clone(),
            source,
        })?
        .len() as usize;
    let header =
        npy::read_header_from(&mut BufReader::new(file)).map_err(|source| BundleError::Tensor {
            entry: entry.name.clone(),
            source,
        })?;
    if header.shape != entry.shape {
        return Err(BundleError::ShapeMismatch {
            entry: entry.name.clone(),
            declared: entry.shape.clone(),
            actual: header.shape,
        });
    }
    let expected = header.shape.iter().product::<usize>() * header.dtype.size();
    let actual = len.saturating_sub(header.data_offset);
    let source = if actual < expected {
        NpyError::TruncatedPayload { expected, actual }
    } else if actual > expected {
        NpyError::TrailingBytes(actual - expected)
    } else {
        return Ok(());
    };
    Err(BundleError::Tensor {
        entry: entry.name.clone(),
        source,
    })
}

impl DumpBundle {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry(&self, name: &str) -> Option<&LayerEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn entries_of(&self, kind: LayerKind) -> impl Iterator<Item = &LayerEntry> {
        self.entries.iter().filter(move |e| e.kind == kind)
    }

    /// Decodes one entry's tensor.
    pub fn tensor(&self, name: &str) -> Result<DenseTensor, BundleError> {
        let entry = self
            .entry(name)
            .ok_or_else(|| BundleError::UnknownEntry(name.to_string()))?;
        self.load_entry(entry)
    }

    pub fn load_entry(&self, entry: &LayerEntry) -> Result<DenseTensor, BundleError> {
        let path = self.root.join(&entry.file);
        let bytes = std::fs::read(&path).map_err(|_| BundleError::MissingFile {
            entry: entry.name.clone(),
            file: entry.file.clone(),
        })?;
        let tensor = npy::read_npy(&bytes).map_err(|source| BundleError::Tensor {
            entry: entry.name.clone(),
            source,
        })?;
        if tensor.shape() != entry.shape.as_slice() {
            return Err(BundleError::ShapeMismatch {
                entry: entry.name.clone(),
                declared: entry.shape.clone(),
                actual: tensor.shape().to_vec(),
            });
        }
        Ok(tensor)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: self.format_version,
            model: self.model.clone(),
            dataset: self.dataset.clone(),
            sample_ids: self.sample_ids.clone(),
            entries: self.entries.clone(),
        }
    }
}

/// Entry-name filter: comma-separated glob patterns (`*`, `?`, `[..]`).
/// An empty filter matches everything.
#[derive(Debug, Clone, Default)]
pub struct LayerFilter {
    patterns: Vec<glob::Pattern>,
}

impl LayerFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, glob::PatternError> {
        let patterns = text
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(glob::Pattern::new)
            .collect::<Result<_, _>>()?;
        Ok(Self { patterns })
    }

    pub fn matches(&self, name: &str) -> bool {
        self.patterns.is_empty() || self.patterns.iter().any(|p| p.matches(name))
    }
}

/// Writes a bundle directory from in-memory tensors. Entry files are named
/// after the entry and indices follow list order.
pub fn write_bundle(
    dir: impl AsRef<Path>,
    model: &str,
    dataset: &str,
    sample_ids: &[i64],
    tensors: &[(&str, LayerKind, &DenseTensor)],
) -> Result<DumpBundle, BundleError> {
    let dir = dir.as_ref();
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| BundleError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut entries = Vec::with_capacity(tensors.len());
    for (index, (name, kind, tensor)) in tensors.iter().enumerate() {
        let file = format!("{}.npy", name.replace(['/', '\\'], "_"));
        let path = dir.join(&file);
        std::fs::write(&path, npy::write_npy(tensor)).map_err(io(&path))?;
        entries.push(LayerEntry {
            name: name.to_string(),
            kind: *kind,
            file,
            shape: tensor.shape().to_vec(),
            index: index as u64,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.to_string(),
        dataset: dataset.to_string(),
        sample_ids: sample_ids.to_vec(),
        entries,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json).map_err(io(&path))?;
    load_bundle(dir)
}
