//! Dataset manifests: binding targets with pocket priors, and labelled
//! molecule–target samples. A manifest with one target is a
//! single-binding-target dataset; with several it is their union.
//!
//! Manifests are JSON. Embedding paths are relative to the manifest file.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::embedding::{load_embedding, read_header};
use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, Scalar};
use crate::model::mps::validate_pocket;
use crate::model::{InputDims, SampleInput, Task};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (train|test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetRecord {
    /// n × d_pro per-residue embedding file.
    pub embedding: String,
    pub pocket_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub sample_id: String,
    /// m × d_mol per-atom embedding file.
    pub molecule: String,
    pub target_id: String,
    /// Potency change for regression, 0/1 for classification.
    pub label: f64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub task: Task,
    pub targets: BTreeMap<String, TargetRecord>,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// A validated manifest. Payloads are read lazily, one sample at a time.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
    dims: InputDims,
}

/// One sample's matrices, loaded on demand.
#[derive(Clone, Debug)]
pub struct LoadedSample<T> {
    pub sample_id: String,
    pub target_id: String,
    pub mol: FeatureMatrix<T>,
    pub target: FeatureMatrix<T>,
    pub pocket: Vec<usize>,
    pub label: f64,
}

impl<T: Scalar> LoadedSample<T> {
    pub fn input(&self) -> SampleInput<'_, T> {
        SampleInput {
            mol: &self.mol,
            target: &self.target,
            pocket: &self.pocket,
            target_id: &self.target_id,
        }
    }
}

/// Parses and validates a manifest, checking every referenced embedding's
/// header (not its payload). All problems are reported together.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Dataset::validate(root, manifest)
}

impl Dataset {
    pub fn validate(root: PathBuf, manifest: DatasetManifest) -> Result<Self> {
        let mut issues = Vec::new();
        if manifest.schema_version != SCHEMA_VERSION {
            issues.push(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                manifest.schema_version
            ));
        }
        if manifest.targets.is_empty() {
            issues.push("no targets".to_string());
        }
        if manifest.samples.is_empty() {
            issues.push("no samples".to_string());
        }

        let mut d_pro = None;
        let mut target_ok = BTreeMap::new();
        for (id, t) in &manifest.targets {
            match read_header(root.join(&t.embedding)) {
                Ok(h) => {
                    if h.rows == 0 {
                        issues.push(format!("target {id}: embedding has no rows"));
                    }
                    match d_pro {
                        None => d_pro = Some(h.cols),
                        Some(d) if d != h.cols => issues.push(format!(
                            "target {id}: width {} differs from {d} used by other targets",
                            h.cols
                        )),
                        _ => {}
                    }
                    let pocket_ok = validate_pocket(id, &t.pocket_indices, h.rows);
                    if let Err(e) = &pocket_ok {
                        issues.push(e.to_string());
                    }
                    target_ok.insert(id.clone(), pocket_ok.is_ok());
                }
                Err(e) => {
                    issues.push(format!("target {id}: {e}"));
                    target_ok.insert(id.clone(), false);
                }
            }
        }

        let mut d_mol = None;
        let mut ids = HashSet::new();
        for s in &manifest.samples {
            let sid = &s.sample_id;
            if !ids.insert(sid.as_str()) {
                issues.push(format!("sample {sid}: duplicate sample_id"));
            }
            if !manifest.targets.contains_key(&s.target_id) {
                issues.push(format!("sample {sid}: unknown target_id {:?}", s.target_id));
            }
            if !s.label.is_finite() {
                issues.push(format!("sample {sid}: label is not finite"));
            } else if manifest.task == Task::Classification && s.label != 0.0 && s.label != 1.0 {
                issues.push(format!("sample {sid}: classification label {} not in {{0, 1}}", s.label));
            }
            match read_header(root.join(&s.molecule)) {
                Ok(h) => {
                    if h.rows == 0 {
                        issues.push(format!("sample {sid}: molecule has no atoms"));
                    }
                    match d_mol {
                        None => d_mol = Some(h.cols),
                        Some(d) if d != h.cols => issues.push(format!(
                            "sample {sid}: molecule width {} differs from {d}",
                            h.cols
                        )),
                        _ => {}
                    }
                }
                Err(e) => issues.push(format!("sample {sid}: {e}")),
            }
        }

        if !issues.is_empty() {
            return Err(Error::Validation(issues));
        }
        let dims = InputDims {
            d_mol: d_mol.expect("at least one sample"),
            d_pro: d_pro.expect("at least one target"),
        };
        Ok(Self {
            root,
            manifest,
            dims,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn task(&self) -> Task {
        self.manifest.task
    }

    pub fn dims(&self) -> InputDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn n_targets(&self) -> usize {
        self.manifest.targets.len()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.manifest.samples[i].split == split)
            .collect()
    }

    pub fn find_sample(&self, sample_id: &str) -> Option<usize> {
        self.manifest
            .samples
            .iter()
            .position(|s| s.sample_id == sample_id)
    }

    pub fn load_sample<T: Scalar>(&self, index: usize) -> Result<LoadedSample<T>> {
        let s = self
            .manifest
            .samples
            .get(index)
            .ok_or_else(|| Error::Data(format!("sample index {index} out of range")))?;
        let t = &self.manifest.targets[&s.target_id];
        let mol = load_embedding(self.root.join(&s.molecule))?.into_matrix();
        let target = load_embedding(self.root.join(&t.embedding))?.into_matrix();
        Ok(LoadedSample {
            sample_id: s.sample_id.clone(),
            target_id: s.target_id.clone(),
            mol,
            target,
            pocket: t.pocket_indices.clone(),
            label: s.label,
        })
    }

    pub fn load_split<T: Scalar>(&self, split: Split) -> Result<Vec<LoadedSample<T>>> {
        self.split_indices(split)
            .into_iter()
            .map(|i| self.load_sample(i))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::embedding::save_embedding;

    fn write_target(dir: &Path, name: &str, rows: usize, cols: usize) -> String {
        let rel = format!("{name}.mtpe");
        save_embedding(&FeatureMatrix::<f32>::filled(rows, cols, 0.5), dir.join(&rel)).unwrap();
        rel
    }

    fn sample(id: &str, mol: &str, target: &str, label: f64) -> SampleRecord {
        SampleRecord {
            sample_id: id.into(),
            molecule: mol.into(),
            target_id: target.into(),
            label,
            split: Split::Train,
        }
    }

    fn manifest(dir: &Path, n_targets: usize, per_target: usize) -> DatasetManifest {
        let mut targets = BTreeMap::new();
        let mut samples = Vec::new();
        let mol = write_target(dir, "mol", 3, 4);
        for t in 0..n_targets {
            let id = format!("T{t}");
            let emb = write_target(dir, &id, 6, 5);
            targets.insert(
                id.clone(),
                TargetRecord {
                    embedding: emb,
                    pocket_indices: vec![0, 3, 5],
                },
            );
            for s in 0..per_target {
                samples.push(sample(&format!("{id}-{s}"), &mol, &id, s as f64));
            }
        }
        DatasetManifest {
            schema_version: 1,
            task: Task::Regression,
            targets,
            samples,
        }
    }

    #[test]
    fn single_and_multi_target_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(dir.path(), 1, 4);
        let path = dir.path().join("one.json");
        m.write(&path).unwrap();
        let ds = load_manifest(&path).unwrap();
        assert_eq!((ds.n_targets(), ds.len()), (1, 4));
        assert_eq!(ds.dims(), InputDims { d_mol: 4, d_pro: 5 });

        let m = manifest(dir.path(), 3, 5);
        let path = dir.path().join("three.json");
        m.write(&path).unwrap();
        let ds = load_manifest(&path).unwrap();
        assert_eq!((ds.n_targets(), ds.len()), (3, 15));
        let s = ds.load_sample::<f32>(7).unwrap();
        assert_eq!(s.target_id, "T1");
        assert_eq!(s.target.shape(), (6, 5));
        assert_eq!(s.pocket, vec![0, 3, 5]);
    }

    #[test]
    fn bad_pocket_index_names_target() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest(dir.path(), 3, 2);
        m.targets.get_mut("T2").unwrap().pocket_indices = vec![1, 6];
        let Err(Error::Validation(issues)) = Dataset::validate(dir.path().into(), m) else {
            panic!("expected validation error")
        };
        assert_eq!(issues.len(), 1);
        assert!(issues[0].contains("T2") && issues[0].contains('6'), "{issues:?}");
    }

    #[test]
    fn every_problem_is_listed() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest(dir.path(), 2, 2);
        m.samples[0].target_id = "nope".into();
        m.samples[1].molecule = "missing.mtpe".into();
        m.samples[2].label = f64::NAN;
        m.samples[3].sample_id = m.samples[2].sample_id.clone();
        let Err(Error::Validation(issues)) = Dataset::validate(dir.path().into(), m) else {
            panic!("expected validation error")
        };
        assert_eq!(issues.len(), 4, "{issues:?}");
        assert!(issues[0].contains("T0-0") && issues[0].contains("nope"));
        assert!(issues[1].contains("missing.mtpe"));
    }

    #[test]
    fn classification_labels_must_be_binary() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest(dir.path(), 1, 3);
        m.task = Task::Classification;
        m.samples[0].label = 1.0;
        m.samples[1].label = 0.0;
        m.samples[2].label = 0.5;
        let Err(Error::Validation(issues)) = Dataset::validate(dir.path().into(), m) else {
            panic!("expected validation error")
        };
        assert_eq!(issues.len(), 1);
    }

    #[test]
    fn malformed_json_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        fs::write(&path, "{\"schema_version\": 1, \"task\": \"regression\"").unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Parse { .. })));
        fs::write(&path, "{\"schema_version\": 1, \"task\": \"regression\", \"targets\": {}, \"samples\": [], \"extra\": 1}").unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Parse { .. })));
        assert!(matches!(load_manifest(dir.path().join("absent.json")), Err(Error::Io { .. })));
    }
}
