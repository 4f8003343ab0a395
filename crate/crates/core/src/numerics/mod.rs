//! Dense linear algebra used throughout the crate.

mod eigen;
pub mod io;
mod matrix;
mod qr;

pub use eigen::{sym_eig, EigenResult};
pub use matrix::{dot, norm, Matrix};
pub use qr::qr_orthonormalize;

use crate::{Error, Result};

/// Second-moment matrix `(1/n)·XᵀX`, optionally of the column-centred batch.
pub fn covariance(x: &Matrix, center: bool) -> Result<Matrix> {
    if x.rows() == 0 {
        return Err(Error::EmptyInput("covariance of an empty batch".into()));
    }
    let centered;
    let x = if center {
        centered = x.center_columns();
        &centered
    } else {
        x
    };
    let n = x.rows() as f64;
    Ok(x.t_matmul(x).scale(1.0 / n).symmetrized())
}

/// Euclidean step `v − step` followed by a QR retraction onto the Stiefel manifold.
pub fn stiefel_retract(v: &Matrix, step: &Matrix) -> Result<Matrix> {
    if v.shape() != step.shape() {
        return Err(Error::dim(format!(
            "retraction step {:?} does not match point {:?}",
            step.shape(),
            v.shape()
        )));
    }
    qr_orthonormalize(&v.sub(step))
}

/// `‖MᵀM − I‖_F`, the distance of `m` from having orthonormal columns.
pub fn orthogonality_defect(m: &Matrix) -> f64 {
    m.t_matmul(m).sub(&Matrix::identity(m.cols())).frobenius_norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn covariance_examples() {
        let c = covariance(&Matrix::from_rows(&[[1.0, 2.0]]), false).unwrap();
        assert_eq!(c, Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]));
        let c = covariance(&Matrix::identity(2), false).unwrap();
        assert_eq!(c, Matrix::from_diag(&[0.5, 0.5]));
        assert!(covariance(&Matrix::zeros(0, 3), true).is_err());
    }

    #[test]
    fn covariance_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for center in [false, true] {
            let x = Matrix::from_fn(7, 10, |_, _| rng.gen_range(-2.0..2.0));
            let c = covariance(&x, center).unwrap();
            let e = sym_eig(&c).unwrap();
            let tr = c.trace();
            assert!(e.eigenvalues.iter().all(|&l| l >= -1e-10 * tr));
        }
    }

    #[test]
    fn retraction_examples() {
        let v = qr_orthonormalize(&Matrix::from_rows(&[[1.0, 0.3], [0.2, 1.0], [0.5, -0.4]]))
            .unwrap();
        let same = stiefel_retract(&v, &Matrix::zeros(3, 2)).unwrap();
        assert!(same.sub(&v).max_abs() <= 1e-12);
        // v - (-v) = 2v, whose Q factor is v itself
        let doubled = stiefel_retract(&v, &v.scale(-1.0)).unwrap();
        let oracle = qr_orthonormalize(&v.scale(2.0)).unwrap();
        assert!(doubled.sub(&oracle).max_abs() <= 1e-12);
        assert!(doubled.sub(&v).max_abs() <= 1e-12);
        assert!(stiefel_retract(&v, &Matrix::zeros(2, 2)).is_err());
    }

    proptest! {
        #[test]
        fn retraction_stays_on_manifold(seed in 0u64..10_000, scale in 1e-3f64..1e3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = qr_orthonormalize(&Matrix::from_fn(6, 3, |_, _| rng.gen_range(-1.0..1.0))).unwrap();
            let step = Matrix::from_fn(6, 3, |_, _| rng.gen_range(-1.0..1.0) * scale);
            if let Ok(out) = stiefel_retract(&v, &step) {
                prop_assert!(orthogonality_defect(&out) <= 1e-10);
            }
        }

        #[test]
        fn qr_is_idempotent(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::from_fn(8, 4, |_, _| rng.gen_range(-1.0..1.0));
            let q = qr_orthonormalize(&a).unwrap();
            let qq = qr_orthonormalize(&q).unwrap();
            prop_assert!(qq.sub(&q).max_abs() <= 1e-12);
            prop_assert!(orthogonality_defect(&q) <= 1e-10);
        }
    }
}
