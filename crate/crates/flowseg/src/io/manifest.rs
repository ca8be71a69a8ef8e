//! Corpus manifest: one JSON document listing every generated volume, its
//! files, per-slice labels, and fold assignment.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct VolumeEntry {
    pub id: usize,
    /// Per-volume generator seed.
    pub seed: u64,
    /// Paths relative to the manifest's directory.
    pub image: String,
    pub mask: String,
    /// One weak label per axial slice.
    pub labels: Vec<u8>,
    /// Eval fold this volume belongs to.
    pub fold: usize,
    pub nodule_count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub k_folds: usize,
    pub volumes: Vec<VolumeEntry>,
}

impl Manifest {
    /// Structural checks plus existence of every referenced file.
    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        let mut ids: Vec<usize> = self.volumes.iter().map(|v| v.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.volumes.len() {
            return Err(Error::Format("manifest has duplicate volume ids".into()));
        }
        for v in &self.volumes {
            for rel in [&v.image, &v.mask] {
                let p = base.join(rel);
                if !p.is_file() {
                    return Err(Error::MissingArtifact(format!(
                        "manifest references missing file {}",
                        p.display()
                    )));
                }
            }
            if v.labels.len() != self.dims[2] {
                return Err(Error::Format(format!(
                    "volume {} has {} labels for {} slices",
                    v.id,
                    v.labels.len(),
                    self.dims[2]
                )));
            }
            if v.fold >= self.k_folds {
                return Err(Error::Format(format!(
                    "volume {} assigned to fold {} of {}",
                    v.id, v.fold, self.k_folds
                )));
            }
        }
        Ok(())
    }

    pub fn ids_in_fold(&self, fold: usize) -> Vec<usize> {
        self.volumes.iter().filter(|v| v.fold == fold).map(|v| v.id).collect()
    }

    pub fn ids_not_in_fold(&self, fold: usize) -> Vec<usize> {
        self.volumes.iter().filter(|v| v.fold != fold).map(|v| v.id).collect()
    }

    pub fn entry(&self, id: usize) -> Result<&VolumeEntry> {
        self.volumes
            .iter()
            .find(|v| v.id == id)
            .ok_or_else(|| Error::MissingArtifact(format!("volume id {id} not in manifest")))
    }
}

pub fn write_manifest(path: &Path, m: &Manifest) -> Result<()> {
    let json = serde_json::to_string_pretty(m)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    fs::write(path, json + "\n").map_err(Error::from)
}

/// Parse and validate; file references are resolved against the manifest's
/// own directory.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::MissingArtifact(format!("manifest {}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    m.validate(base)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::write_volume;
    use crate::phantom::Volume;

    fn sample(dir: &Path) -> Manifest {
        let v = Volume::zeros([4, 4, 4], [1.0; 3]);
        write_volume(&dir.join("vol_000.fsvl"), &v).unwrap();
        write_volume(&dir.join("mask_000.fsvl"), &v).unwrap();
        Manifest {
            version: MANIFEST_VERSION,
            seed: 7,
            dims: [4, 4, 4],
            spacing: [1.0; 3],
            k_folds: 2,
            volumes: vec![VolumeEntry {
                id: 0,
                seed: 701,
                image: "vol_000.fsvl".into(),
                mask: "mask_000.fsvl".into(),
                labels: vec![0, 1, 1, 0],
                fold: 1,
                nodule_count: 1,
            }],
        }
    }

    #[test]
    fn round_trip_preserves_content() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample(dir.path());
        let path = dir.path().join("labels.json");
        write_manifest(&path, &m).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn writes_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample(dir.path());
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        write_manifest(&a, &m).unwrap();
        write_manifest(&b, &m).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    #[test]
    fn missing_file_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = sample(dir.path());
        m.volumes[0].mask = "gone.fsvl".into();
        let err = m.validate(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("gone.fsvl"));
    }

    #[test]
    fn duplicate_ids_fail_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = sample(dir.path());
        let mut dup = m.volumes[0].clone();
        dup.fold = 0;
        m.volumes.push(dup);
        let err = m.validate(dir.path()).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn label_length_must_match_depth() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = sample(dir.path());
        m.volumes[0].labels.pop();
        let err = m.validate(dir.path()).unwrap_err().to_string();
        assert!(err.contains("labels"), "{err}");
    }

    #[test]
    fn fold_ids_partition() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample(dir.path());
        assert_eq!(m.ids_in_fold(1), vec![0]);
        assert!(m.ids_in_fold(0).is_empty());
        assert_eq!(m.ids_not_in_fold(0), vec![0]);
    }
}
