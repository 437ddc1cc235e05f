//! Micro-level pocket semantic guidance: ligand-to-pocket cross-attention.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::matrix::Scalar;
use crate::model::attention::{AttentionRecord, MapKind};
use crate::model::config::MtpConfig;
use crate::model::layers::{multi_head_attention, MapTag};
use crate::model::params::MpsLayer;
use crate::tape::Var;

/// Checks a pocket index list against a target with `n_rows` residues.
pub fn validate_pocket(target_id: &str, indices: &[usize], n_rows: usize) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::Data(format!("target {target_id}: pocket index list is empty")));
    }
    let mut seen = HashSet::with_capacity(indices.len());
    for &i in indices {
        if i >= n_rows {
            return Err(Error::Data(format!(
                "target {target_id}: pocket index {i} out of range for {n_rows} residues"
            )));
        }
        if !seen.insert(i) {
            return Err(Error::Data(format!(
                "target {target_id}: duplicate pocket index {i}"
            )));
        }
    }
    Ok(())
}

/// Rows of the target matrix at the pocket indices, in index order.
pub fn pocket_select<'t, T: Scalar>(
    target: Var<'t, T>,
    indices: &[usize],
    target_id: &str,
) -> Result<Var<'t, T>> {
    validate_pocket(target_id, indices, target.shape().0)?;
    target.select_rows(indices)
}

/// Cross-attention delta for one pocket layer: `softmax(Q Kᵀ/√d_k) V · W_o`
/// with `Q = F_mol W_q` and `K, V` from the pocket (or `[F_mol; F_pocket]`).
pub fn mps_forward<'t, T: Scalar>(
    mol: Var<'t, T>,
    pocket: Var<'t, T>,
    p: &MpsLayer<Var<'t, T>>,
    layer: usize,
    config: &MtpConfig,
    record: &mut AttentionRecord<T>,
) -> Result<Var<'t, T>> {
    if pocket.shape().0 == 0 {
        return Err(Error::Data("pocket has no rows".into()));
    }
    if mol.shape().1 != pocket.shape().1 {
        return Err(Error::shape("mps_forward", mol.shape(), pocket.shape()));
    }
    let kv = if config.kv_concat_mol {
        mol.concat_rows(pocket)?
    } else {
        pocket
    };
    let tag = MapTag {
        kind: MapKind::Cross,
        layer,
    };
    multi_head_attention(mol, kv, &p.attn, config.n_heads, tag, record)
}
