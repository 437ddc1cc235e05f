//! Recorded attention maps and per-atom attention scores.

use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    /// Ligand atoms attend to ligand atoms (queries = keys = atoms).
    SelfAttention,
    /// Ligand atoms query pocket residues (plus the atoms themselves when
    /// keys/values are concatenated).
    Cross,
}

#[derive(Clone, Debug)]
pub struct AttentionMap<T> {
    pub kind: MapKind,
    /// 0 for the self-attention block, `l` for pocket layer `l` (1-based).
    pub layer: usize,
    pub head: usize,
    /// queries × keys, rows sum to one.
    pub weights: FeatureMatrix<T>,
}

impl<T> AttentionMap<T> {
    /// File-name stem such as `self_l0_h0` or `cross_l2_h1`.
    pub fn label(&self) -> String {
        let kind = match self.kind {
            MapKind::SelfAttention => "self",
            MapKind::Cross => "cross",
        };
        format!("{kind}_l{}_h{}", self.layer, self.head)
    }
}

#[derive(Clone, Debug, Default)]
pub struct AttentionRecord<T> {
    pub maps: Vec<AttentionMap<T>>,
}

impl<T: Scalar> AttentionRecord<T> {
    pub fn new() -> Self {
        Self { maps: Vec::new() }
    }

    pub fn push(&mut self, kind: MapKind, layer: usize, head: usize, weights: FeatureMatrix<T>) {
        self.maps.push(AttentionMap {
            kind,
            layer,
            head,
            weights,
        });
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// Per-atom attention scores in `[0, 1]`.
///
/// Each map contributes one value per atom `j`:
/// - self-attention: mean attention mass atom `j` receives as a key
///   (column mean);
/// - cross-attention: focus of query `j`, `1 - H(row_j) / ln(#keys)`
///   (a single key counts as fully focused).
///
/// Contributions are averaged over all maps and min-max normalized. When
/// every atom ends up with the same raw score, all scores are `0.5`.
pub fn atom_attention_scores<T: Scalar>(record: &AttentionRecord<T>) -> Result<Vec<f64>> {
    let first = record
        .maps
        .first()
        .ok_or_else(|| Error::Contract("no attention maps recorded".into()))?;
    let m = first.weights.rows();
    let mut raw = vec![0.0f64; m];
    for map in &record.maps {
        let w = &map.weights;
        if w.rows() != m {
            return Err(Error::shape("atom_attention_scores", (m, m), w.shape()));
        }
        match map.kind {
            MapKind::SelfAttention => {
                if w.cols() != m {
                    return Err(Error::shape("atom_attention_scores", (m, m), w.shape()));
                }
                for (j, r) in raw.iter_mut().enumerate() {
                    let col: f64 = (0..m).map(|i| w.get(i, j).as_f64()).sum();
                    *r += col / m as f64;
                }
            }
            MapKind::Cross => {
                let keys = w.cols();
                for (j, r) in raw.iter_mut().enumerate() {
                    *r += if keys <= 1 {
                        1.0
                    } else {
                        let h: f64 = w
                            .row(j)
                            .iter()
                            .map(|v| v.as_f64())
                            .filter(|&p| p > 0.0)
                            .map(|p| -p * p.ln())
                            .sum();
                        1.0 - h / (keys as f64).ln()
                    };
                }
            }
        }
    }
    let n = record.maps.len() as f64;
    for r in &mut raw {
        *r /= n;
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 1e-12 {
        return Ok(vec![0.5; m]);
    }
    Ok(raw.into_iter().map(|r| (r - lo) / (hi - lo)).collect())
}
