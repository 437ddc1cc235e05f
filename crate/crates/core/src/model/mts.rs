//! Macro-level target semantic guidance: target-conditioned self-attention.

use crate::error::{Error, Result};
use crate::matrix::Scalar;
use crate::model::attention::{AttentionRecord, MapKind};
use crate::model::config::{AdaLnStyle, MtpConfig};
use crate::model::layers::{affine_layer_norm, feed_forward, multi_head_attention, MapTag, Pass};
use crate::model::params::{Linear, Mts};
use crate::ops::LN_EPS;
use crate::tape::Var;

/// Average-pools target rows into one global summary row.
pub fn feature_abstractor<'t, T: Scalar>(target: Var<'t, T>) -> Result<Var<'t, T>> {
    if target.shape().0 == 0 {
        return Err(Error::Data("target feature matrix has no rows".into()));
    }
    target.mean_rows()
}

/// The six conditional vectors `(γ₁, β₁, γ₂, β₂, γ₃, β₃)`.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning<V> {
    pub gamma: [V; 3],
    pub beta: [V; 3],
}

/// One linear map `1×d → 1×6d`, split into six consecutive `d`-wide rows.
pub fn weight_regressor<'t, T: Scalar>(
    compress: Var<'t, T>,
    p: &Linear<Var<'t, T>>,
) -> Result<Conditioning<Var<'t, T>>> {
    let out = compress.linear(p.weight, p.bias)?;
    let width = out.shape().1;
    if width % 6 != 0 {
        return Err(Error::shape("weight_regressor", compress.shape(), out.shape()));
    }
    let d = width / 6;
    let piece = |k: usize| out.slice_cols(k * d, d);
    Ok(Conditioning {
        gamma: [piece(0)?, piece(2)?, piece(4)?],
        beta: [piece(1)?, piece(3)?, piece(5)?],
    })
}

/// Adaptive layer norm: `LN(x) ⊙ γ + β` (or `⊙ (1 + γ)`), rowwise.
pub fn adaln<'t, T: Scalar>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    style: AdaLnStyle,
) -> Result<Var<'t, T>> {
    let d = x.shape().1;
    if gamma.shape() != (1, d) || beta.shape() != (1, d) {
        return Err(Error::shape("adaln", x.shape(), gamma.shape()));
    }
    let scale = match style {
        AdaLnStyle::Direct => gamma,
        AdaLnStyle::OnePlusGamma => gamma.shift(T::one()),
    };
    x.layer_norm_core(T::of(LN_EPS))?.mul_row(scale)?.add_row(beta)
}

/// Self-attention block over the projected ligand `mol` (m×d).
///
/// `x ← x + SA(LN₁(x))`, `x ← x + FFN(LN₂(x))`, `out = LN₃(x)`. With
/// target conditioning enabled the three norms take their scale and shift
/// from the pooled, regressed target summary; otherwise they are static
/// learned layer norms.
pub fn mts_forward<'t, T: Scalar>(
    mol: Var<'t, T>,
    target: Var<'t, T>,
    p: &Mts<Var<'t, T>>,
    config: &MtpConfig,
    pass: &mut Pass<'_>,
    record: &mut AttentionRecord<T>,
) -> Result<Var<'t, T>> {
    let d = config.d_model;
    if mol.shape().1 != d || target.shape().1 != d {
        return Err(Error::shape("mts_forward", mol.shape(), target.shape()));
    }
    let cond = if config.enable_mts {
        Some(weight_regressor(feature_abstractor(target)?, &p.regressor)?)
    } else {
        None
    };
    let norms = [&p.norm1, &p.norm2, &p.norm3];
    let norm = |i: usize, x: Var<'t, T>| match &cond {
        Some(c) => adaln(x, c.gamma[i], c.beta[i], config.adaln_style),
        None => affine_layer_norm(x, norms[i]),
    };

    let h = norm(0, mol)?;
    let tag = MapTag {
        kind: MapKind::SelfAttention,
        layer: 0,
    };
    let mut x = mol.add(multi_head_attention(h, h, &p.attn, config.n_heads, tag, record)?)?;
    if config.enable_ffn {
        let h = norm(1, x)?;
        x = x.add(feed_forward(h, &p.ffn, config.dropout_p, pass)?)?;
    }
    norm(2, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::FeatureMatrix;
    use crate::tape::Tape;

    type M = FeatureMatrix<f64>;

    #[test]
    fn abstractor_examples() {
        let tape = Tape::new();
        let t = tape.leaf(M::from_rows(&[&[1.0, 3.0], &[3.0, 5.0]]));
        assert_eq!(*feature_abstractor(t).unwrap().value(), M::row_vector(&[2.0, 4.0]));
        let c = tape.leaf(M::filled(5, 3, 0.7));
        assert_eq!(*feature_abstractor(c).unwrap().value(), M::filled(1, 3, 0.7));
        let empty = tape.leaf(M::zeros(0, 3));
        assert!(matches!(feature_abstractor(empty), Err(Error::Data(_))));
    }

    #[test]
    fn regressor_splits_in_order() {
        let tape = Tape::new();
        let d = 4;
        // Weight column k of the 4×24 matrix is e_{k mod 4} scaled by (k / 4 + 1).
        let w = M::from_fn(d, 6 * d, |i, k| if i == k % d { (k / d + 1) as f64 } else { 0.0 });
        let b = M::from_fn(1, 6 * d, |_, k| 0.01 * k as f64);
        let x = M::row_vector(&[0.5, -1.0, 2.0, 0.25]);
        let p = Linear {
            weight: tape.leaf(w),
            bias: tape.leaf(b),
        };
        let c = weight_regressor(tape.leaf(x.clone()), &p).unwrap();
        let order = [c.gamma[0], c.beta[0], c.gamma[1], c.beta[1], c.gamma[2], c.beta[2]];
        for (chunk, v) in order.iter().enumerate() {
            let v = v.value();
            for j in 0..d {
                let expect = x.get(0, j) * (chunk + 1) as f64 + 0.01 * (chunk * d + j) as f64;
                assert!((v.get(0, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn regressor_zero_weights_gives_bias() {
        let tape = Tape::new();
        let b = M::from_fn(1, 12, |_, k| k as f64);
        let p = Linear {
            weight: tape.leaf(M::zeros(2, 12)),
            bias: tape.leaf(b),
        };
        for x in [[3.0, -4.0], [0.0, 100.0]] {
            let c = weight_regressor(tape.leaf(M::row_vector(&x)), &p).unwrap();
            assert_eq!(*c.beta[2].value(), M::row_vector(&[10.0, 11.0]));
        }
    }

    #[test]
    fn adaln_examples() {
        let tape = Tape::new();
        let x = tape.leaf(M::from_rows(&[&[1.0, 2.0, 3.0], &[-1.0, 4.0, 0.5]]));
        let ones = tape.leaf(M::filled(1, 3, 1.0));
        let zeros = tape.leaf(M::zeros(1, 3));
        let plain = x.layer_norm_core(1e-5).unwrap();
        let y = adaln(x, ones, zeros, AdaLnStyle::Direct).unwrap();
        assert!(y.value().bit_eq(&plain.value()));
        let y = adaln(x, zeros, zeros, AdaLnStyle::OnePlusGamma).unwrap();
        assert!(y.value().bit_eq(&plain.value()));

        let b = tape.leaf(M::row_vector(&[0.3, -2.0, 9.0]));
        let y = adaln(x, zeros, b, AdaLnStyle::Direct).unwrap().value();
        for i in 0..2 {
            assert_eq!(y.row(i), b.value().row(0));
        }

        let row = tape.leaf(M::from_rows(&[&[1.0, 2.0, 3.0]]));
        let y = adaln(row, tape.leaf(M::filled(1, 3, 2.0)), ones, AdaLnStyle::Direct)
            .unwrap()
            .value();
        for (a, e) in y.row(0).iter().zip([-1.4495, 1.0, 3.4495]) {
            assert!((a - e).abs() < 1e-4, "{a} vs {e}");
        }

        let bad = tape.leaf(M::zeros(1, 2));
        assert!(matches!(adaln(x, bad, zeros, AdaLnStyle::Direct), Err(Error::Shape { .. })));
    }
}
