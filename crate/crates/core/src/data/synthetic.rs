//! Seeded synthetic datasets whose labels depend on the binding pocket.
//!
//! Labels follow `y = ⟨mean(F_mol), mean(F_pocket)⟩ + σ·ε` over the first
//! `min(d_mol, d_pro)` columns. The same molecule gets different labels on
//! different targets, so a model that ignores the receptor cannot fit it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::embedding::save_embedding;
use crate::data::manifest::{DatasetManifest, SampleRecord, Split, TargetRecord, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;
use crate::model::Task;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LabelRule {
    #[default]
    ReceptorConditioned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_targets: usize,
    pub samples_per_target: usize,
    /// Inclusive `[min, max]` atom counts.
    pub mol_rows: [usize; 2],
    /// Inclusive `[min, max]` residue counts.
    pub target_rows: [usize; 2],
    /// Inclusive `[min, max]` pocket sizes.
    pub pocket_rows: [usize; 2],
    pub d_mol: usize,
    pub d_pro: usize,
    pub label_rule: LabelRule,
    pub noise_sigma: f64,
    /// Fraction of each target's samples assigned to the test split.
    pub test_fraction: f64,
    pub task: Task,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_targets: 2,
            samples_per_target: 32,
            mol_rows: [4, 8],
            target_rows: [12, 20],
            pocket_rows: [3, 6],
            d_mol: 8,
            d_pro: 8,
            label_rule: LabelRule::ReceptorConditioned,
            noise_sigma: 0.0,
            test_fraction: 0.25,
            task: Task::Regression,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(format!("synthetic spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: String| Err(Error::Config(format!("synthetic spec field `{name}`: {msg}")));
        let range = |name: &str, r: [usize; 2]| {
            if r[0] == 0 || r[0] > r[1] {
                return field(name, format!("range {r:?} must satisfy 1 <= min <= max"));
            }
            Ok(())
        };
        if self.n_targets == 0 {
            return field("n_targets", "must be at least 1".into());
        }
        if self.samples_per_target == 0 {
            return field("samples_per_target", "must be at least 1".into());
        }
        range("mol_rows", self.mol_rows)?;
        range("target_rows", self.target_rows)?;
        range("pocket_rows", self.pocket_rows)?;
        if self.pocket_rows[1] > self.target_rows[0] {
            return field(
                "pocket_rows",
                format!("max {} exceeds smallest target size {}", self.pocket_rows[1], self.target_rows[0]),
            );
        }
        if self.d_mol == 0 {
            return field("d_mol", "must be at least 1".into());
        }
        if self.d_pro == 0 {
            return field("d_pro", "must be at least 1".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return field("noise_sigma", format!("{} must be finite and >= 0", self.noise_sigma));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return field("test_fraction", format!("{} not in [0, 1)", self.test_fraction));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.n_targets * self.samples_per_target
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix<f32> {
    FeatureMatrix::from_fn(rows, cols, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        v as f32
    })
}

fn column_means(m: &FeatureMatrix<f32>, rows: &[usize], cols: usize) -> Vec<f64> {
    (0..cols)
        .map(|j| rows.iter().map(|&i| m.get(i, j) as f64).sum::<f64>() / rows.len() as f64)
        .collect()
}

/// `⟨mean(mol), mean(pocket rows of target)⟩` over the shared columns.
pub fn receptor_conditioned_label(
    mol: &FeatureMatrix<f32>,
    target: &FeatureMatrix<f32>,
    pocket: &[usize],
) -> f64 {
    let d = mol.cols().min(target.cols());
    let all: Vec<usize> = (0..mol.rows()).collect();
    let a = column_means(mol, &all, d);
    let b = column_means(target, pocket, d);
    a.iter().zip(&b).map(|(x, y)| x * y).sum()
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Writes `manifest.json`, `targets/*.mtpe` and `molecules/*.mtpe` under
/// `out_dir` and returns the manifest.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    spec.validate()?;
    let out = out_dir.as_ref();
    for sub in ["targets", "molecules"] {
        let p = out.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut targets = BTreeMap::new();
    let mut target_mats = Vec::with_capacity(spec.n_targets);
    for t in 0..spec.n_targets {
        let id = format!("T{t:03}");
        let n = rng.random_range(spec.target_rows[0]..=spec.target_rows[1]);
        let p = rng.random_range(spec.pocket_rows[0]..=spec.pocket_rows[1]);
        let m = gaussian(n, spec.d_pro, &mut rng);
        let mut pocket = index::sample(&mut rng, n, p).into_vec();
        pocket.sort_unstable();
        let rel = format!("targets/{id}.mtpe");
        save_embedding(&m, out.join(&rel))?;
        targets.insert(
            id.clone(),
            TargetRecord {
                embedding: rel,
                pocket_indices: pocket.clone(),
            },
        );
        target_mats.push((id, m, pocket));
    }

    let n_test = (spec.samples_per_target as f64 * spec.test_fraction).round() as usize;
    let mut samples = Vec::with_capacity(spec.total_samples());
    let mut raw_labels = Vec::with_capacity(spec.total_samples());
    for (id, target, pocket) in &target_mats {
        for s in 0..spec.samples_per_target {
            let sample_id = format!("S{:05}", samples.len());
            let m = rng.random_range(spec.mol_rows[0]..=spec.mol_rows[1]);
            let mol = gaussian(m, spec.d_mol, &mut rng);
            let noise: f64 = StandardNormal.sample(&mut rng);
            let y = match spec.label_rule {
                LabelRule::ReceptorConditioned => receptor_conditioned_label(&mol, target, pocket),
            } + spec.noise_sigma * noise;
            let rel = format!("molecules/{sample_id}.mtpe");
            save_embedding(&mol, out.join(&rel))?;
            let split = if s >= spec.samples_per_target - n_test {
                Split::Test
            } else {
                Split::Train
            };
            raw_labels.push(y);
            samples.push(SampleRecord {
                sample_id,
                molecule: rel,
                target_id: id.clone(),
                label: y,
                split,
            });
        }
    }

    if spec.task == Task::Classification {
        let threshold = median(&raw_labels);
        for s in &mut samples {
            s.label = if s.label > threshold { 1.0 } else { 0.0 };
        }
    }

    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        task: spec.task,
        targets,
        samples,
    };
    manifest.write(out.join("manifest.json"))?;
    Ok(manifest)
}
