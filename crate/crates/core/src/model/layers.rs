//! Sub-blocks shared by the self-attention and pocket blocks.

use rand::RngCore;

use crate::error::Result;
use crate::matrix::Scalar;
use crate::model::attention::{AttentionRecord, MapKind};
use crate::model::params::{Affine, Attention, Ffn};
use crate::ops::{Mode, LN_EPS};
use crate::tape::Var;

/// Forward-pass mode plus the randomness source for dropout.
pub struct Pass<'r> {
    pub mode: Mode,
    pub rng: &'r mut dyn RngCore,
}

impl<'r> Pass<'r> {
    pub fn new(mode: Mode, rng: &'r mut dyn RngCore) -> Self {
        Self { mode, rng }
    }
}

/// Where an attention call should log its maps.
pub struct MapTag {
    pub kind: MapKind,
    pub layer: usize,
}

/// Multi-head scaled dot-product attention. Queries come from `query_src`,
/// keys and values from `kv_src`; heads are concatenated and sent through
/// `W_o`.
pub fn multi_head_attention<'t, T: Scalar>(
    query_src: Var<'t, T>,
    kv_src: Var<'t, T>,
    p: &Attention<Var<'t, T>>,
    n_heads: usize,
    tag: MapTag,
    record: &mut AttentionRecord<T>,
) -> Result<Var<'t, T>> {
    let q = query_src.matmul(p.wq)?;
    let k = kv_src.matmul(p.wk)?;
    let v = kv_src.matmul(p.wv)?;
    let d = q.shape().1;
    let dk = d / n_heads;
    let scale = T::one() / T::of(dk as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                q.slice_cols(h * dk, dk)?,
                k.slice_cols(h * dk, dk)?,
                v.slice_cols(h * dk, dk)?,
            )
        };
        let weights = qh.matmul(kh.transpose())?.scale(scale).softmax_rows();
        record.push(tag.kind, tag.layer, h, (*weights.value()).clone());
        heads.push(weights.mix(vh)?);
    }
    let merged = if n_heads == 1 {
        heads[0]
    } else {
        Var::concat_cols(&heads)?
    };
    merged.matmul(p.wo)
}

/// `Linear → ReLU → dropout → Linear`.
pub fn feed_forward<'t, T: Scalar>(
    x: Var<'t, T>,
    p: &Ffn<Var<'t, T>>,
    dropout_p: f64,
    pass: &mut Pass<'_>,
) -> Result<Var<'t, T>> {
    let hidden = x.linear(p.up.weight, p.up.bias)?.relu();
    let hidden = hidden.dropout(dropout_p, pass.mode, &mut *pass.rng)?;
    hidden.linear(p.down.weight, p.down.bias)
}

/// Layer norm with learned, input-independent scale and shift.
pub fn affine_layer_norm<'t, T: Scalar>(x: Var<'t, T>, p: &Affine<Var<'t, T>>) -> Result<Var<'t, T>> {
    x.layer_norm_core(T::of(LN_EPS))?.mul_row(p.gamma)?.add_row(p.beta)
}
