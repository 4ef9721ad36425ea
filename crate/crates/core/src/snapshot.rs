//! ASNAP activation snapshots and run manifests.
//!
//! An ASNAP file holds the activations of every recorded layer for one input
//! population at one checkpoint. Layout, little-endian throughout:
//!
//! ```text
//! magic "ABES"        4 bytes
//! version             u32 (= 1)
//! checkpoint_index    u64
//! population_tag      u8  (0 = source_valid, 1 = target, 2 = other)
//! layer_count         u32
//! per layer:
//!   layer_id          u32
//!   n_examples        u32
//!   n_features        u32
//!   payload           n_examples * n_features f32, row-major (example-major)
//! ```
//!
//! Recorders should dump post-nonlinearity activations, flattening
//! convolutional maps as channel, height, width (row-major). Whether the
//! capture point sits before or after normalisation layers is left to the
//! experimenter; the format carries whatever is written.
//!
//! A run manifest is a JSON document naming the checkpoints, the per-layer
//! feature counts, and one file per (population, checkpoint):
//!
//! ```json
//! {
//!   "run_id": "demo",
//!   "checkpoints": [0, 1, 2],
//!   "layers": [{"id": 0, "features": 64}],
//!   "populations": [
//!     {"tag": "source_valid", "files": [{"checkpoint": 0, "path": "source_valid_000000.asnap"}]}
//!   ],
//!   "meta": {"epochs_per_checkpoint": 1}
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{self, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"ABES";
pub const FORMAT_VERSION: u32 = 1;
/// Bytes before the first layer header.
pub const FILE_HEADER_LEN: u64 = 4 + 4 + 8 + 1 + 4;
pub const LAYER_HEADER_LEN: u64 = 12;

pub const SOURCE_VALID_TAG: &str = "source_valid";
pub const TARGET_TAG: &str = "target";

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic: expected \"ABES\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {0} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("truncated {section}: expected at least {expected} bytes, file has {actual}")]
    Truncated {
        section: &'static str,
        expected: u64,
        actual: u64,
    },
    #[error("trailing data: layout accounts for {expected} bytes, file has {actual}")]
    TrailingBytes { expected: u64, actual: u64 },
    #[error("unknown population tag byte {0}")]
    BadPopulationTag(u8),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("layer order: position {position} carries layer_id {found}")]
    LayerOrder { position: usize, found: u32 },
    #[error("non-finite activation {value} at layer {layer}, row {row}, col {col}")]
    NonFinite {
        layer: u32,
        row: usize,
        col: usize,
        value: f32,
    },
    #[error("manifest {path}: {source}")]
    ManifestParse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("manifest: {0}")]
    InvalidManifest(String),
    #[error("population {population:?} has no snapshot listed for checkpoint {checkpoint}")]
    MissingSnapshot { population: String, checkpoint: u64 },
    #[error("population {population:?}, checkpoint {checkpoint}: file {path} does not exist")]
    MissingFile {
        population: String,
        checkpoint: u64,
        path: PathBuf,
    },
    #[error("population {population:?} lists checkpoint {checkpoint}, which is not in the declared checkpoint list")]
    UnexpectedCheckpoint { population: String, checkpoint: u64 },
    #[error("population {population:?} lists checkpoint {checkpoint} more than once")]
    DuplicateEntry { population: String, checkpoint: u64 },
    #[error("{path}: header says {what} {found}, manifest says {expected}")]
    HeaderMismatch {
        path: PathBuf,
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("dimension drift: population {population:?}, checkpoint {checkpoint}, layer {layer} has {found} {what}, expected {expected}")]
    DimensionDrift {
        population: String,
        checkpoint: u64,
        layer: u32,
        what: &'static str,
        expected: u32,
        found: u32,
    },
    #[error("unknown population {0:?}")]
    UnknownPopulation(String),
}

/// Population tag as stored in the binary header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopulationKind {
    SourceValid,
    Target,
    Other,
}

impl PopulationKind {
    pub fn to_byte(self) -> u8 {
        match self {
            PopulationKind::SourceValid => 0,
            PopulationKind::Target => 1,
            PopulationKind::Other => 2,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self, SnapshotError> {
        match b {
            0 => Ok(PopulationKind::SourceValid),
            1 => Ok(PopulationKind::Target),
            2 => Ok(PopulationKind::Other),
            other => Err(SnapshotError::BadPopulationTag(other)),
        }
    }

    /// Manifest tags `source_valid` and `target` are reserved; any other label
    /// is an `Other` population.
    pub fn from_tag(tag: &str) -> Self {
        match tag {
            SOURCE_VALID_TAG => PopulationKind::SourceValid,
            TARGET_TAG => PopulationKind::Target,
            _ => PopulationKind::Other,
        }
    }
}

/// One layer's activations for a batch of examples, row-major by example.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    pub layer_id: u32,
    pub n_examples: usize,
    pub n_features: usize,
    pub values: Vec<f32>,
}

impl LayerActivations {
    pub fn new(layer_id: u32, n_examples: usize, n_features: usize, values: Vec<f32>) -> Self {
        LayerActivations {
            layer_id,
            n_examples,
            n_features,
            values,
        }
    }

    /// Builds a layer from per-example rows. Rows must share a length.
    pub fn from_rows(layer_id: u32, rows: &[Vec<f32>]) -> Self {
        let n_features = rows.first().map_or(0, Vec::len);
        let values = rows.iter().flat_map(|r| r.iter().copied()).collect();
        LayerActivations::new(layer_id, rows.len(), n_features, values)
    }

    pub fn row(&self, n: usize) -> &[f32] {
        &self.values[n * self.n_features..(n + 1) * self.n_features]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.n_features.max(1))
    }

    pub fn validate(&self) -> Result<(), SnapshotError> {
        if self.n_examples == 0 || self.n_features == 0 {
            return Err(SnapshotError::DimensionMismatch(format!(
                "layer {} has {} examples x {} features; both must be at least 1",
                self.layer_id, self.n_examples, self.n_features
            )));
        }
        if self.n_examples > u32::MAX as usize || self.n_features > u32::MAX as usize {
            return Err(SnapshotError::DimensionMismatch(format!(
                "layer {} dimensions exceed u32",
                self.layer_id
            )));
        }
        let expected = self.n_examples * self.n_features;
        if self.values.len() != expected {
            return Err(SnapshotError::DimensionMismatch(format!(
                "layer {} declares {}x{} = {} values but holds {}",
                self.layer_id,
                self.n_examples,
                self.n_features,
                expected,
                self.values.len()
            )));
        }
        check_finite(self.layer_id, self.n_features, &self.values)
    }
}

fn check_finite(layer: u32, n_features: usize, values: &[f32]) -> Result<(), SnapshotError> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(SnapshotError::NonFinite {
            layer,
            row: i / n_features,
            col: i % n_features,
            value: values[i],
        }),
    }
}

/// All recorded layers for one population at one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSnapshot {
    pub checkpoint: u64,
    pub population: PopulationKind,
    pub layers: Vec<LayerActivations>,
}

impl ActivationSnapshot {
    pub fn new(checkpoint: u64, population: PopulationKind, layers: Vec<LayerActivations>) -> Self {
        ActivationSnapshot {
            checkpoint,
            population,
            layers,
        }
    }

    pub fn n_examples(&self) -> usize {
        self.layers.first().map_or(0, |l| l.n_examples)
    }

    pub fn validate(&self) -> Result<(), SnapshotError> {
        validate_layout(self.layers.iter().map(|l| LayerShape {
            layer_id: l.layer_id,
            n_examples: l.n_examples as u32,
            n_features: l.n_features as u32,
        }))?;
        self.layers.iter().try_for_each(LayerActivations::validate)
    }

    /// Exact size of the encoded file.
    pub fn encoded_len(&self) -> u64 {
        FILE_HEADER_LEN
            + self
                .layers
                .iter()
                .map(|l| LAYER_HEADER_LEN + 4 * l.values.len() as u64)
                .sum::<u64>()
    }

    /// Encodes the snapshot after validating it.
    pub fn to_bytes(&self) -> Result<Vec<u8>, SnapshotError> {
        self.validate()?;
        let mut buf = Vec::with_capacity(self.encoded_len() as usize);
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.checkpoint.to_le_bytes());
        buf.push(self.population.to_byte());
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            buf.extend_from_slice(&layer.layer_id.to_le_bytes());
            buf.extend_from_slice(&(layer.n_examples as u32).to_le_bytes());
            buf.extend_from_slice(&(layer.n_features as u32).to_le_bytes());
            for v in &layer.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    /// Decodes and validates a complete ASNAP byte image.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SnapshotError> {
        let actual = bytes.len() as u64;
        let header = parse_file_header(take(bytes, 0, FILE_HEADER_LEN, "file header")?)?;
        let mut offset = FILE_HEADER_LEN;
        let mut layers = Vec::with_capacity(header.layer_count.min(1024) as usize);
        let mut shapes = Vec::new();
        for _ in 0..header.layer_count {
            let shape = parse_layer_header(take(bytes, offset, LAYER_HEADER_LEN, "layer header")?);
            offset += LAYER_HEADER_LEN;
            let payload_len = shape.payload_len();
            let payload = take(bytes, offset, payload_len, "layer payload")?;
            offset += payload_len;
            let values: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            shapes.push(shape);
            layers.push(LayerActivations::new(
                shape.layer_id,
                shape.n_examples as usize,
                shape.n_features as usize,
                values,
            ));
        }
        if offset != actual {
            return Err(SnapshotError::TrailingBytes {
                expected: offset,
                actual,
            });
        }
        validate_layout(shapes.into_iter())?;
        for layer in &layers {
            check_finite(layer.layer_id, layer.n_features, &layer.values)?;
        }
        Ok(ActivationSnapshot::new(header.checkpoint, header.population, layers))
    }
}

fn take<'a>(bytes: &'a [u8], offset: u64, len: u64, section: &'static str) -> Result<&'a [u8], SnapshotError> {
    let end = offset.checked_add(len).ok_or(SnapshotError::Truncated {
        section,
        expected: u64::MAX,
        actual: bytes.len() as u64,
    })?;
    if end > bytes.len() as u64 {
        // Magic is checked before anything else so a short garbage file
        // still reports the more useful error.
        if offset == 0 && bytes.len() >= 4 && bytes[..4] != MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(&bytes[..4]);
            return Err(SnapshotError::BadMagic { found });
        }
        return Err(SnapshotError::Truncated {
            section,
            expected: end,
            actual: bytes.len() as u64,
        });
    }
    Ok(&bytes[offset as usize..end as usize])
}

/// Dimensions of one layer as declared in its header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub layer_id: u32,
    pub n_examples: u32,
    pub n_features: u32,
}

impl LayerShape {
    fn payload_len(&self) -> u64 {
        4 * self.n_examples as u64 * self.n_features as u64
    }
}

/// File and layer headers of a snapshot, without the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotHeader {
    pub checkpoint: u64,
    pub population: PopulationKind,
    pub layers: Vec<LayerShape>,
}

struct FileHeader {
    checkpoint: u64,
    population: PopulationKind,
    layer_count: u32,
}

fn parse_file_header(b: &[u8]) -> Result<FileHeader, SnapshotError> {
    if b[..4] != MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(&b[..4]);
        return Err(SnapshotError::BadMagic { found });
    }
    let version = u32::from_le_bytes(b[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(SnapshotError::UnsupportedVersion(version));
    }
    let checkpoint = u64::from_le_bytes(b[8..16].try_into().unwrap());
    let population = PopulationKind::from_byte(b[16])?;
    let layer_count = u32::from_le_bytes(b[17..21].try_into().unwrap());
    Ok(FileHeader {
        checkpoint,
        population,
        layer_count,
    })
}

fn parse_layer_header(b: &[u8]) -> LayerShape {
    LayerShape {
        layer_id: u32::from_le_bytes(b[0..4].try_into().unwrap()),
        n_examples: u32::from_le_bytes(b[4..8].try_into().unwrap()),
        n_features: u32::from_le_bytes(b[8..12].try_into().unwrap()),
    }
}

fn validate_layout(shapes: impl Iterator<Item = LayerShape>) -> Result<(), SnapshotError> {
    let mut n_examples = None;
    let mut count = 0;
    for (position, shape) in shapes.enumerate() {
        count += 1;
        if shape.layer_id as usize != position {
            return Err(SnapshotError::LayerOrder {
                position,
                found: shape.layer_id,
            });
        }
        if shape.n_examples == 0 || shape.n_features == 0 {
            return Err(SnapshotError::DimensionMismatch(format!(
                "layer {} has {} examples x {} features; both must be at least 1",
                shape.layer_id, shape.n_examples, shape.n_features
            )));
        }
        match n_examples {
            None => n_examples = Some(shape.n_examples),
            Some(n) if n != shape.n_examples => {
                return Err(SnapshotError::DimensionMismatch(format!(
                    "layer {} has {} examples, layer 0 has {}",
                    shape.layer_id, shape.n_examples, n
                )))
            }
            Some(_) => {}
        }
    }
    if count == 0 {
        return Err(SnapshotError::DimensionMismatch("snapshot has no layers".into()));
    }
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SnapshotError + '_ {
    move |source| SnapshotError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `snapshot` to `path` atomically. Invalid snapshots (including any
/// non-finite activation) are rejected before anything touches the disk.
pub fn write_snapshot(snapshot: &ActivationSnapshot, path: &Path) -> Result<(), SnapshotError> {
    let bytes = snapshot.to_bytes()?;
    crate::fsutil::write_atomic(path, &bytes).map_err(io_err(path))
}

pub fn read_snapshot(path: &Path) -> Result<ActivationSnapshot, SnapshotError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    ActivationSnapshot::from_bytes(&bytes)
}

/// Reads only the headers, seeking past payloads, and checks that the file
/// length matches the declared layout exactly.
pub fn read_snapshot_header(path: &Path) -> Result<SnapshotHeader, SnapshotError> {
    let mut file = File::open(path).map_err(io_err(path))?;
    let actual = file.metadata().map_err(io_err(path))?.len();
    let mut head = [0u8; FILE_HEADER_LEN as usize];
    read_section(&mut file, &mut head, 0, actual, "file header", path)?;
    let header = parse_file_header(&head)?;
    let mut offset = FILE_HEADER_LEN;
    let mut layers = Vec::new();
    for _ in 0..header.layer_count {
        let mut lh = [0u8; LAYER_HEADER_LEN as usize];
        read_section(&mut file, &mut lh, offset, actual, "layer header", path)?;
        let shape = parse_layer_header(&lh);
        offset += LAYER_HEADER_LEN + shape.payload_len();
        if offset > actual {
            return Err(SnapshotError::Truncated {
                section: "layer payload",
                expected: offset,
                actual,
            });
        }
        file.seek(SeekFrom::Start(offset)).map_err(io_err(path))?;
        layers.push(shape);
    }
    if offset != actual {
        return Err(SnapshotError::TrailingBytes {
            expected: offset,
            actual,
        });
    }
    validate_layout(layers.iter().copied())?;
    Ok(SnapshotHeader {
        checkpoint: header.checkpoint,
        population: header.population,
        layers,
    })
}

fn read_section(
    file: &mut File,
    buf: &mut [u8],
    offset: u64,
    actual: u64,
    section: &'static str,
    path: &Path,
) -> Result<(), SnapshotError> {
    let end = offset + buf.len() as u64;
    if end > actual {
        if offset == 0 && actual >= 4 {
            let mut found = [0u8; 4];
            file.read_exact(&mut found).map_err(io_err(path))?;
            if found != MAGIC {
                return Err(SnapshotError::BadMagic { found });
            }
        }
        return Err(SnapshotError::Truncated {
            section,
            expected: end,
            actual,
        });
    }
    file.read_exact(buf).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: u32,
    pub features: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub checkpoint: u64,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopulationFiles {
    pub tag: String,
    pub files: Vec<FileEntry>,
}

/// JSON run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub checkpoints: Vec<u64>,
    pub layers: Vec<LayerSpec>,
    pub populations: Vec<PopulationFiles>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Map<String, serde_json::Value>>,
}

impl RunManifest {
    pub fn layer_dims(&self) -> Vec<u32> {
        self.layers.iter().map(|l| l.features).collect()
    }

    pub fn population_tags(&self) -> impl Iterator<Item = &str> {
        self.populations.iter().map(|p| p.tag.as_str())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serialises");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), SnapshotError> {
        crate::fsutil::write_atomic(path, self.to_json().as_bytes()).map_err(io_err(path))
    }

    fn check_structure(&self) -> Result<(), SnapshotError> {
        if self.checkpoints.is_empty() {
            return Err(SnapshotError::InvalidManifest("checkpoint list is empty".into()));
        }
        if let Some(w) = self.checkpoints.windows(2).find(|w| w[0] >= w[1]) {
            return Err(SnapshotError::InvalidManifest(format!(
                "checkpoints must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        if self.layers.is_empty() {
            return Err(SnapshotError::InvalidManifest("layer list is empty".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.id as usize != i {
                return Err(SnapshotError::InvalidManifest(format!(
                    "layer ids must be 0.. in order; position {i} has id {}",
                    layer.id
                )));
            }
            if layer.features == 0 {
                return Err(SnapshotError::InvalidManifest(format!("layer {i} has zero features")));
            }
        }
        let mut seen = BTreeSet::new();
        for p in &self.populations {
            if !seen.insert(p.tag.as_str()) {
                return Err(SnapshotError::InvalidManifest(format!(
                    "population {:?} listed twice",
                    p.tag
                )));
            }
        }
        Ok(())
    }
}

/// A verified run: manifest plus a (population, checkpoint) -> file index.
/// Payloads are read on demand.
#[derive(Debug, Clone)]
pub struct Run {
    pub manifest: RunManifest,
    pub base_dir: PathBuf,
    files: BTreeMap<(String, u64), PathBuf>,
    n_examples: BTreeMap<String, u32>,
}

/// Parses a manifest and eagerly verifies every listed file's headers against
/// it. Snapshot payloads are not read.
pub fn load_run(manifest_path: &Path) -> Result<Run, SnapshotError> {
    let text = std::fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|source| SnapshotError::ManifestParse {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let base_dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    Run::new(manifest, base_dir)
}

impl Run {
    pub fn new(manifest: RunManifest, base_dir: PathBuf) -> Result<Run, SnapshotError> {
        manifest.check_structure()?;
        let declared: BTreeSet<u64> = manifest.checkpoints.iter().copied().collect();
        let mut files = BTreeMap::new();
        let mut n_examples = BTreeMap::new();

        for pop in &manifest.populations {
            let mut listed = BTreeSet::new();
            for entry in &pop.files {
                if !declared.contains(&entry.checkpoint) {
                    return Err(SnapshotError::UnexpectedCheckpoint {
                        population: pop.tag.clone(),
                        checkpoint: entry.checkpoint,
                    });
                }
                if !listed.insert(entry.checkpoint) {
                    return Err(SnapshotError::DuplicateEntry {
                        population: pop.tag.clone(),
                        checkpoint: entry.checkpoint,
                    });
                }
            }
            if let Some(&checkpoint) = declared.difference(&listed).next() {
                return Err(SnapshotError::MissingSnapshot {
                    population: pop.tag.clone(),
                    checkpoint,
                });
            }

            let kind = PopulationKind::from_tag(&pop.tag);
            let mut pop_examples: Option<u32> = None;
            let mut entries: Vec<&FileEntry> = pop.files.iter().collect();
            entries.sort_by_key(|e| e.checkpoint);
            for entry in entries {
                let path = base_dir.join(&entry.path);
                if !path.is_file() {
                    return Err(SnapshotError::MissingFile {
                        population: pop.tag.clone(),
                        checkpoint: entry.checkpoint,
                        path,
                    });
                }
                let header = read_snapshot_header(&path)?;
                if header.checkpoint != entry.checkpoint {
                    return Err(SnapshotError::HeaderMismatch {
                        path,
                        what: "checkpoint",
                        expected: entry.checkpoint.to_string(),
                        found: header.checkpoint.to_string(),
                    });
                }
                if header.population != kind {
                    return Err(SnapshotError::HeaderMismatch {
                        path,
                        what: "population",
                        expected: format!("{kind:?}"),
                        found: format!("{:?}", header.population),
                    });
                }
                if header.layers.len() != manifest.layers.len() {
                    return Err(SnapshotError::HeaderMismatch {
                        path,
                        what: "layer count",
                        expected: manifest.layers.len().to_string(),
                        found: header.layers.len().to_string(),
                    });
                }
                for (shape, spec) in header.layers.iter().zip(&manifest.layers) {
                    if shape.n_features != spec.features {
                        return Err(SnapshotError::DimensionDrift {
                            population: pop.tag.clone(),
                            checkpoint: entry.checkpoint,
                            layer: spec.id,
                            what: "features",
                            expected: spec.features,
                            found: shape.n_features,
                        });
                    }
                }
                let n = header.layers[0].n_examples;
                match pop_examples {
                    None => pop_examples = Some(n),
                    Some(expected) if expected != n => {
                        return Err(SnapshotError::DimensionDrift {
                            population: pop.tag.clone(),
                            checkpoint: entry.checkpoint,
                            layer: 0,
                            what: "examples",
                            expected,
                            found: n,
                        })
                    }
                    Some(_) => {}
                }
                files.insert((pop.tag.clone(), entry.checkpoint), path);
            }
            if let Some(n) = pop_examples {
                n_examples.insert(pop.tag.clone(), n);
            }
        }

        Ok(Run {
            manifest,
            base_dir,
            files,
            n_examples,
        })
    }

    pub fn checkpoints(&self) -> &[u64] {
        &self.manifest.checkpoints
    }

    pub fn n_layers(&self) -> usize {
        self.manifest.layers.len()
    }

    pub fn has_population(&self, tag: &str) -> bool {
        self.n_examples.contains_key(tag)
    }

    /// Example count of a population (constant across checkpoints).
    pub fn n_examples(&self, tag: &str) -> Option<u32> {
        self.n_examples.get(tag).copied()
    }

    pub fn snapshot_path(&self, population: &str, checkpoint: u64) -> Result<&Path, SnapshotError> {
        if !self.has_population(population) {
            return Err(SnapshotError::UnknownPopulation(population.to_string()));
        }
        self.files
            .get(&(population.to_string(), checkpoint))
            .map(PathBuf::as_path)
            .ok_or_else(|| SnapshotError::MissingSnapshot {
                population: population.to_string(),
                checkpoint,
            })
    }

    /// Loads and fully validates one snapshot, re-checking it against the
    /// manifest in case the file changed after the run was opened.
    pub fn snapshot(&self, population: &str, checkpoint: u64) -> Result<ActivationSnapshot, SnapshotError> {
        let path = self.snapshot_path(population, checkpoint)?;
        let snap = read_snapshot(path)?;
        if snap.checkpoint != checkpoint {
            return Err(SnapshotError::HeaderMismatch {
                path: path.to_path_buf(),
                what: "checkpoint",
                expected: checkpoint.to_string(),
                found: snap.checkpoint.to_string(),
            });
        }
        for (layer, spec) in snap.layers.iter().zip(&self.manifest.layers) {
            if layer.n_features as u32 != spec.features {
                return Err(SnapshotError::DimensionDrift {
                    population: population.to_string(),
                    checkpoint,
                    layer: spec.id,
                    what: "features",
                    expected: spec.features,
                    found: layer.n_features as u32,
                });
            }
        }
        if snap.layers.len() != self.manifest.layers.len() {
            return Err(SnapshotError::HeaderMismatch {
                path: path.to_path_buf(),
                what: "layer count",
                expected: self.manifest.layers.len().to_string(),
                found: snap.layers.len().to_string(),
            });
        }
        Ok(snap)
    }
}
