//! JSON manifest + raw `f32` feature files.
//!
//! Each trial file is `"EVFA"`, a little-endian `u32` version, then
//! `count × electrodes × bands` little-endian `f32` values in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetIndex, LabeledSample, Schema};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"EVFA";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: Schema,
    pub classes: Vec<String>,
    pub subjects: Vec<ManifestSubject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSubject {
    pub id: u32,
    pub sessions: Vec<ManifestSession>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSession {
    pub id: u32,
    pub trials: Vec<ManifestTrial>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestTrial {
    pub id: u32,
    pub label: usize,
    /// Relative to the manifest's directory.
    pub file: String,
    pub count: usize,
}

/// Loads a manifest and all of its feature files.
///
/// Time indices are assigned by walking each session's trials in ascending
/// trial id and each file's rows in order.
pub fn import_features(manifest_path: impl AsRef<Path>) -> Result<DatasetIndex> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::Ingest {
        path: manifest_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Ingest {
        path: manifest_path.to_path_buf(),
        reason: format!("invalid manifest: {e}"),
    })?;
    let Schema { electrodes, bands } = manifest.schema;
    if electrodes == 0 || bands == 0 {
        return Err(Error::Schema(format!(
            "schema {electrodes}×{bands} has an empty axis"
        )));
    }
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let per_row = electrodes * bands;
    let mut samples = Vec::new();
    for subject in &manifest.subjects {
        for session in &subject.sessions {
            let mut trials: Vec<&ManifestTrial> = session.trials.iter().collect();
            trials.sort_by_key(|t| t.id);
            let mut clock: u32 = 0;
            for trial in trials {
                if trial.label >= manifest.classes.len() {
                    return Err(Error::Schema(format!(
                        "subject {} session {} trial {}: label {} but only {} classes",
                        subject.id,
                        session.id,
                        trial.id,
                        trial.label,
                        manifest.classes.len()
                    )));
                }
                let path = root.join(&trial.file);
                let values = read_feature_file(&path, trial.count * per_row)?;
                for (row, chunk) in values.chunks(per_row).enumerate() {
                    if let Some(i) = chunk.iter().position(|v| !v.is_finite()) {
                        return Err(Error::Data {
                            coords: format!(
                                "subject {}, session {}, trial {}, row {row}",
                                subject.id, session.id, trial.id
                            ),
                            reason: format!("feature {i} is {}", chunk[i]),
                        });
                    }
                    let data = chunk.iter().map(|&v| f64::from(v)).collect();
                    samples.push(LabeledSample {
                        subject_id: subject.id,
                        session_id: session.id,
                        trial_id: trial.id,
                        time_index: clock,
                        features: Tensor::new(&[electrodes, bands], data)?,
                        label: trial.label,
                    });
                    clock += 1;
                }
            }
        }
    }
    DatasetIndex::new(samples, manifest.classes, manifest.schema)
}

fn read_feature_file(path: &Path, expected_values: usize) -> Result<Vec<f32>> {
    let ingest = |reason: String| Error::Ingest {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| ingest(e.to_string()))?;
    if bytes.len() < HEADER_LEN {
        return Err(ingest(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(ingest("bad magic, expected \"EVFA\"".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FEATURE_VERSION {
        return Err(ingest(format!("unsupported version {version}")));
    }
    let payload = &bytes[HEADER_LEN..];
    let want = expected_values * 4;
    if payload.len() < want {
        return Err(ingest(format!(
            "truncated payload: {} bytes, manifest implies {want}",
            payload.len()
        )));
    }
    if payload.len() != want {
        return Err(Error::Schema(format!(
            "{}: payload is {} bytes, manifest implies {want}",
            path.display(),
            payload.len()
        )));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

/// Writes `ds` as `manifest.json` plus one feature file per trial under `dir`.
/// Returns the manifest path. Values are narrowed to `f32`.
pub fn export_features(ds: &DatasetIndex, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("features"))?;

    let mut trials: BTreeMap<(u32, u32, u32), Vec<&LabeledSample>> = BTreeMap::new();
    for s in ds.samples() {
        trials
            .entry((s.subject_id, s.session_id, s.trial_id))
            .or_default()
            .push(s);
    }

    let mut subjects: Vec<ManifestSubject> = Vec::new();
    for ((subject, session, trial), rows) in trials {
        let label = rows[0].label;
        if let Some(odd) = rows.iter().find(|r| r.label != label) {
            return Err(Error::Schema(format!(
                "{}: label {} differs from trial label {label}",
                odd.coords(),
                odd.label
            )));
        }
        let file = format!("features/sub{subject:03}_ses{session}_trial{trial:03}.evfa");
        let mut bytes = Vec::with_capacity(HEADER_LEN + rows.len() * rows[0].features.len() * 4);
        bytes.extend_from_slice(FEATURE_MAGIC);
        bytes.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        for r in &rows {
            for &v in r.features.data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        fs::write(dir.join(&file), bytes)?;

        if subjects.last().map(|s| s.id) != Some(subject) {
            subjects.push(ManifestSubject {
                id: subject,
                sessions: Vec::new(),
            });
        }
        let sessions = &mut subjects.last_mut().expect("pushed above").sessions;
        if sessions.last().map(|s| s.id) != Some(session) {
            sessions.push(ManifestSession {
                id: session,
                trials: Vec::new(),
            });
        }
        sessions.last_mut().expect("pushed above").trials.push(ManifestTrial {
            id: trial,
            label,
            file,
            count: rows.len(),
        });
    }

    let manifest = Manifest {
        schema: ds.schema(),
        classes: ds.class_names().to_vec(),
        subjects,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_trial(dir: &Path, name: &str, values: &[f32]) {
        let mut bytes = FEATURE_MAGIC.to_vec();
        bytes.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(name), bytes).unwrap();
    }

    fn small_manifest(dir: &Path) -> PathBuf {
        let manifest = serde_json::json!({
            "schema": {"electrodes": 4, "bands": 2},
            "classes": ["neg", "pos"],
            "subjects": [{"id": 1, "sessions": [{"id": 1, "trials": [
                {"id": 1, "label": 0, "file": "t1.evfa", "count": 3},
                {"id": 2, "label": 1, "file": "t2.evfa", "count": 3}
            ]}]}]
        });
        let vals: Vec<f32> = (0..24).map(|i| i as f32 * 0.5).collect();
        write_trial(dir, "t1.evfa", &vals);
        write_trial(dir, "t2.evfa", &vals);
        let p = dir.join("manifest.json");
        fs::write(&p, manifest.to_string()).unwrap();
        p
    }

    #[test]
    fn imports_counted_samples() {
        let dir = tempfile::tempdir().unwrap();
        let ds = import_features(small_manifest(dir.path())).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.schema(), Schema { electrodes: 4, bands: 2 });
        let times: Vec<u32> = ds.samples().iter().map(|s| s.time_index).collect();
        assert_eq!(times, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(ds.samples()[4].label, 1);
    }

    #[test]
    fn truncated_file_is_ingest_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = small_manifest(dir.path());
        write_trial(dir.path(), "t2.evfa", &[1.0; 23]);
        assert!(matches!(import_features(p), Err(Error::Ingest { .. })));
    }

    #[test]
    fn oversized_file_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = small_manifest(dir.path());
        write_trial(dir.path(), "t2.evfa", &[1.0; 32]);
        assert!(matches!(import_features(p), Err(Error::Schema(_))));
    }

    #[test]
    fn missing_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = small_manifest(dir.path());
        fs::remove_file(dir.path().join("t1.evfa")).unwrap();
        match import_features(p) {
            Err(Error::Ingest { path, .. }) => assert!(path.ends_with("t1.evfa")),
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_value_reports_coordinates() {
        let dir = tempfile::tempdir().unwrap();
        let p = small_manifest(dir.path());
        let mut vals = vec![0.0f32; 24];
        vals[9] = f32::INFINITY;
        write_trial(dir.path(), "t2.evfa", &vals);
        match import_features(p) {
            Err(Error::Data { coords, .. }) => assert!(coords.contains("trial 2, row 1")),
            other => panic!("expected data error, got {other:?}"),
        }
    }
}
