#![allow(dead_code)]

use std::io::Write;

use mtp::model::{AdaLnStyle, MtpConfig, Task};
use mtp::FeatureMatrix;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn randn<T: mtp::Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix<T> {
    FeatureMatrix::from_fn(rows, cols, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        T::of(v)
    })
}

pub fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

pub fn pocket(n: usize, p: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v = index::sample(rng, n, p).into_vec();
    v.sort_unstable();
    v
}

/// Small random configuration with every flag drawn at random.
pub fn random_config(rng: &mut ChaCha8Rng) -> MtpConfig {
    let n_heads = [1, 2][rng.random_range(0..2)];
    MtpConfig {
        d_model: n_heads * rng.random_range(2..=6),
        n_layers: rng.random_range(1..=3),
        n_heads,
        ffn_hidden: rng.random_range(2..=8),
        dropout_p: 0.1,
        enable_mts: rng.random_bool(0.5),
        enable_mps: rng.random_bool(0.5),
        enable_ffn: rng.random_bool(0.5),
        kv_concat_mol: rng.random_bool(0.5),
        adaln_style: if rng.random_bool(0.5) {
            AdaLnStyle::Direct
        } else {
            AdaLnStyle::OnePlusGamma
        },
        task: if rng.random_bool(0.5) {
            Task::Regression
        } else {
            Task::Classification
        },
        seed: rng.random(),
    }
}

/// Writes one result line straight to the process stdout so it shows up
/// even when the harness captures test output.
pub fn report(id: u32, name: &str, passed: bool, detail: &str) {
    let tag = if passed { "PASS" } else { "FAIL" };
    let line = format!("[criterion {id}] {tag} {name}: {detail}\n");
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}
