//! On-disk layout shared by the generators: one ASNAP file per population
//! and checkpoint, `manifest.json`, and curve CSVs.

use std::path::Path;

use crate::eval::AccuracyCurve;
use crate::snapshot::{write_snapshot, ActivationSnapshot, FileEntry, LayerSpec, PopulationFiles, RunManifest, SnapshotError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VALID_CURVE_FILE: &str = "valid_curve.csv";
pub const TARGET_CURVE_FILE: &str = "target_curve.csv";

pub fn snapshot_file_name(tag: &str, checkpoint: u64) -> String {
    format!("{tag}_{checkpoint:06}.asnap")
}

/// What goes into one run directory.
pub struct RunDir<'a> {
    pub run_id: &'a str,
    pub checkpoints: &'a [u64],
    pub layer_dims: &'a [usize],
    pub populations: &'a [(&'a str, &'a [ActivationSnapshot])],
    pub curves: &'a [(&'a str, &'a AccuracyCurve)],
    pub meta: serde_json::Map<String, serde_json::Value>,
}

impl RunDir<'_> {
    /// Writes every file atomically into `dir` (created if needed) and
    /// returns the manifest.
    pub fn write(&self, dir: &Path) -> Result<RunManifest, SnapshotError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| SnapshotError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let mut populations = Vec::new();
        for (tag, snaps) in self.populations {
            let mut files = Vec::new();
            for snap in snaps.iter() {
                let name = snapshot_file_name(tag, snap.checkpoint);
                write_snapshot(snap, &dir.join(&name))?;
                files.push(FileEntry {
                    checkpoint: snap.checkpoint,
                    path: name,
                });
            }
            populations.push(PopulationFiles {
                tag: tag.to_string(),
                files,
            });
        }
        let manifest = RunManifest {
            run_id: self.run_id.to_string(),
            checkpoints: self.checkpoints.to_vec(),
            layers: self
                .layer_dims
                .iter()
                .enumerate()
                .map(|(i, d)| LayerSpec {
                    id: i as u32,
                    features: *d as u32,
                })
                .collect(),
            populations,
            meta: Some(self.meta.clone()),
        };
        manifest.save(&dir.join(MANIFEST_FILE))?;
        for (name, curve) in self.curves {
            let path = dir.join(name);
            crate::fsutil::write_atomic(&path, curve.to_csv_string().as_bytes()).map_err(io(&path))?;
        }
        Ok(manifest)
    }
}
