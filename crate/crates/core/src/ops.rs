//! Forward kernels shared by the tape and by plain (non-recording) callers.

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::{set_sum, FeatureMatrix, Scalar};

/// Normalization epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn matmul<T: Scalar>(a: &FeatureMatrix<T>, b: &FeatureMatrix<T>) -> Result<FeatureMatrix<T>> {
    if a.cols() != b.rows() {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (r, k, c) = (a.rows(), a.cols(), b.cols());
    let mut out = FeatureMatrix::zeros(r, c);
    for i in 0..r {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate().take(k) {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(b.row(p)) {
                *o = *o + av * bv;
            }
        }
    }
    Ok(out)
}

/// Product `weights · values` whose inner reduction runs over a set (atoms,
/// pocket residues, attention keys). Each output entry is summed with
/// [`set_sum`], so permuting the rows of `values` together with the columns
/// of `weights` leaves the result bitwise unchanged.
pub fn mix<T: Scalar>(
    weights: &FeatureMatrix<T>,
    values: &FeatureMatrix<T>,
) -> Result<FeatureMatrix<T>> {
    if weights.cols() != values.rows() {
        return Err(Error::shape("mix", weights.shape(), values.shape()));
    }
    let k = weights.cols();
    let mut buf = vec![T::zero(); k];
    Ok(FeatureMatrix::from_fn(weights.rows(), values.cols(), |i, j| {
        for (p, slot) in buf.iter_mut().enumerate() {
            *slot = weights.get(i, p) * values.get(p, j);
        }
        set_sum(&mut buf)
    }))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &FeatureMatrix<T>) -> FeatureMatrix<T> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        for v in row.iter_mut() {
            *v = (*v - max).exp();
        }
        let mut buf = row.to_vec();
        let total = set_sum(&mut buf);
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

/// Affine-free layer normalization with population variance. Returns the
/// normalized matrix and the per-row `1/sqrt(var + eps)`.
pub(crate) fn layer_norm_with_stats<T: Scalar>(
    x: &FeatureMatrix<T>,
    eps: T,
) -> Result<(FeatureMatrix<T>, Vec<T>)> {
    if x.cols() < 2 {
        return Err(Error::Contract(format!(
            "layer norm needs at least 2 columns, got {}",
            x.cols()
        )));
    }
    let n = T::of(x.cols() as f64);
    let mut out = x.clone();
    let mut inv_stds = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        if row.iter().all(|&v| v == row[0]) {
            row.fill(T::zero());
            inv_stds.push(T::one() / eps.sqrt());
            continue;
        }
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let inv = T::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_stds.push(inv);
    }
    Ok((out, inv_stds))
}

pub fn layer_norm_core<T: Scalar>(x: &FeatureMatrix<T>, eps: T) -> Result<FeatureMatrix<T>> {
    layer_norm_with_stats(x, eps).map(|(out, _)| out)
}

/// Column-wise mean over rows; order-independent.
pub fn avg_pool_rows<T: Scalar>(x: &FeatureMatrix<T>) -> Result<FeatureMatrix<T>> {
    if x.rows() == 0 {
        return Err(Error::EmptyInput("avg_pool_rows"));
    }
    let n = T::of(x.rows() as f64);
    let mut buf = vec![T::zero(); x.rows()];
    Ok(FeatureMatrix::from_fn(1, x.cols(), |_, j| {
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = x.get(i, j);
        }
        set_sum(&mut buf) / n
    }))
}

pub fn add_row<T: Scalar>(x: &FeatureMatrix<T>, row: &FeatureMatrix<T>) -> Result<FeatureMatrix<T>> {
    if row.rows() != 1 || row.cols() != x.cols() {
        return Err(Error::shape("add_row", x.shape(), row.shape()));
    }
    Ok(FeatureMatrix::from_fn(x.rows(), x.cols(), |i, j| {
        x.get(i, j) + row.get(0, j)
    }))
}

pub fn mul_row<T: Scalar>(x: &FeatureMatrix<T>, row: &FeatureMatrix<T>) -> Result<FeatureMatrix<T>> {
    if row.rows() != 1 || row.cols() != x.cols() {
        return Err(Error::shape("mul_row", x.shape(), row.shape()));
    }
    Ok(FeatureMatrix::from_fn(x.rows(), x.cols(), |i, j| {
        x.get(i, j) * row.get(0, j)
    }))
}

/// `x · w + b`, with `b` broadcast over rows.
pub fn linear<T: Scalar>(
    x: &FeatureMatrix<T>,
    w: &FeatureMatrix<T>,
    b: &FeatureMatrix<T>,
) -> Result<FeatureMatrix<T>> {
    add_row(&matmul(x, w)?, b)
}

pub fn relu<T: Scalar>(x: &FeatureMatrix<T>) -> FeatureMatrix<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn check_dropout_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} not in [0, 1)")));
    }
    Ok(())
}

/// Inverted-dropout mask: each entry is `0` with probability `p`, otherwise
/// `1/(1-p)`. Entries are drawn in row-major order.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    p: f64,
    rng: &mut R,
) -> Result<FeatureMatrix<T>> {
    check_dropout_p(p)?;
    let keep = T::of(1.0 / (1.0 - p));
    Ok(FeatureMatrix::from_fn(rows, cols, |_, _| {
        if p > 0.0 && rng.random::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    }))
}

pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    x: &FeatureMatrix<T>,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<FeatureMatrix<T>> {
    check_dropout_p(p)?;
    match mode {
        Mode::Eval => Ok(x.clone()),
        Mode::Train if p == 0.0 => Ok(x.clone()),
        Mode::Train => {
            let mask = dropout_mask(x.rows(), x.cols(), p, rng)?;
            Ok(x.zip_map(&mask, |a, m| a * m))
        }
    }
}

/// Numerically stable `-[y ln σ(z) + (1-y) ln(1-σ(z))]`.
pub fn logistic_loss<T: Scalar>(logit: T, label: T) -> T {
    let zero = T::zero();
    logit.max(zero) - logit * label + (-logit.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type M = FeatureMatrix<f64>;

    #[test]
    fn matmul_examples() {
        let x = M::from_rows(&[&[1.5, -2.0], &[0.25, 4.0]]);
        assert_eq!(matmul(&M::identity(2), &x).unwrap(), x);
        let a = M::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = M::from_rows(&[&[1.0], &[1.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), M::from_rows(&[&[3.0], &[7.0]]));
        assert_eq!(matmul(&M::zeros(3, 2), &x).unwrap(), M::zeros(3, 2));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&M::zeros(2, 3), &M::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(err, Error::Shape { left: (2, 3), right: (2, 3), .. }));
    }

    #[test]
    fn mix_matches_matmul() {
        let a = M::from_rows(&[&[0.2, 0.3, 0.5], &[1.0, 0.0, 0.0]]);
        let v = M::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        assert!(mix(&a, &v).unwrap().max_abs_diff(&matmul(&a, &v).unwrap()) < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&M::from_rows(&[&[1.0, 1.0, 1.0]]));
        for &v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let s = softmax_rows(&M::from_rows(&[&[0.0, 2f64.ln()]]));
        assert!((s.get(0, 0) - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.get(0, 1) - 2.0 / 3.0).abs() < 1e-12);
        let s = softmax_rows(&FeatureMatrix::<f32>::from_rows(&[&[1000.0, 0.0]]));
        assert!(s.is_finite());
        assert!((s.get(0, 0) - 1.0).abs() < 1e-6 && s.get(0, 1) < 1e-6);
    }

    #[test]
    fn layer_norm_examples() {
        let y = layer_norm_core(&M::from_rows(&[&[1.0, 2.0, 3.0]]), 1e-5).unwrap();
        let expect = [-1.2247, 0.0, 1.2247];
        for (a, b) in y.row(0).iter().zip(expect) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        let y = layer_norm_core(&M::from_rows(&[&[0.1, 0.1, 0.1]]), 1e-5).unwrap();
        assert_eq!(y, M::zeros(1, 3));
        let z = layer_norm_core(&y.map(|v| v + 0.0), 1e-5).unwrap();
        assert_eq!(z, M::zeros(1, 3));
        let normed = M::from_rows(&[&[-1.224744871391589, 0.0, 1.224744871391589]]);
        let again = layer_norm_core(&normed, 1e-5).unwrap();
        assert!(again.max_abs_diff(&normed) < 1e-4);
        assert!(layer_norm_core(&M::zeros(2, 1), 1e-5).is_err());
    }

    #[test]
    fn avg_pool_examples() {
        let x = M::from_rows(&[&[1.0, 3.0], &[3.0, 5.0]]);
        assert_eq!(avg_pool_rows(&x).unwrap(), M::row_vector(&[2.0, 4.0]));
        let r = M::row_vector(&[0.3, -7.0]);
        assert_eq!(avg_pool_rows(&r).unwrap(), r);
        let p = x.select_rows(&[1, 0]);
        assert!(avg_pool_rows(&p).unwrap().bit_eq(&avg_pool_rows(&x).unwrap()));
        assert!(matches!(avg_pool_rows(&M::zeros(0, 2)), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn linear_examples() {
        let x = M::from_rows(&[&[0.5, -1.0], &[2.0, 3.0]]);
        assert_eq!(linear(&x, &M::identity(2), &M::zeros(1, 2)).unwrap(), x);
        let y = linear(
            &M::from_rows(&[&[1.0, 1.0]]),
            &M::from_rows(&[&[1.0], &[2.0]]),
            &M::row_vector(&[3.0]),
        )
        .unwrap();
        assert_eq!(y, M::from_rows(&[&[6.0]]));
        let b = M::row_vector(&[1.0, -2.0]);
        let y = linear(&x, &M::zeros(2, 2), &b).unwrap();
        assert_eq!(y.row(0), b.row(0));
        assert_eq!(y.row(1), b.row(0));
        assert!(linear(&x, &M::zeros(3, 2), &b).is_err());
    }

    #[test]
    fn relu_and_dropout() {
        assert_eq!(
            relu(&M::row_vector(&[-1.0, 0.0, 2.0])),
            M::row_vector(&[0.0, 0.0, 2.0])
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = M::from_fn(4, 5, |i, j| (i * 5 + j) as f64 - 7.5);
        assert!(dropout(&x, 0.0, Mode::Train, &mut rng).unwrap().bit_eq(&x));
        assert!(dropout(&x, 0.5, Mode::Eval, &mut rng).unwrap().bit_eq(&x));
        assert!(matches!(
            dropout(&x, 1.0, Mode::Train, &mut rng),
            Err(Error::Config(_))
        ));

        let a = dropout(&x, 0.5, Mode::Train, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = dropout(&x, 0.5, Mode::Train, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(a.bit_eq(&b));
        for (o, i) in a.data().iter().zip(x.data()) {
            assert!(*o == 0.0 || *o == 2.0 * i);
        }
    }

    #[test]
    fn logistic_loss_values() {
        assert!((logistic_loss(0.0f64, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!(logistic_loss(800.0f64, 1.0).abs() < 1e-12);
        assert!((logistic_loss(-800.0f64, 1.0) - 800.0).abs() < 1e-9);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }
}
