use super::matrix::{dot, norm};
use super::Matrix;
use crate::{Error, Result};

/// Columns whose residual after orthogonalisation falls below this fraction of
/// the largest input column norm are treated as linearly dependent.
const RANK_TOL: f64 = 1e-12;

/// Q factor of the thin QR decomposition of a tall matrix, with the R factor's
/// diagonal forced positive.
///
/// Modified Gram-Schmidt with one re-orthogonalisation pass, which keeps
/// `‖QᵀQ − I‖` at the level of machine precision for well-conditioned input.
pub fn qr_orthonormalize(a: &Matrix) -> Result<Matrix> {
    let (n, k) = a.shape();
    if n < k {
        return Err(Error::dim(format!(
            "qr_orthonormalize needs rows >= cols, got {n}x{k}"
        )));
    }
    a.ensure_finite("qr input")?;
    let columns: Vec<Vec<f64>> = (0..k).map(|j| a.column(j)).collect();
    let largest = columns.iter().map(|c| norm(c)).fold(0.0, f64::max);
    if largest == 0.0 && k > 0 {
        return Err(Error::RankDeficient { column: 0 });
    }

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    for (j, col) in columns.into_iter().enumerate() {
        let mut v = col;
        for _ in 0..2 {
            for q in &basis {
                let r = dot(q, &v);
                v.iter_mut().zip(q).for_each(|(x, qi)| *x -= r * qi);
            }
        }
        let nrm = norm(&v);
        if nrm <= RANK_TOL * largest {
            return Err(Error::RankDeficient { column: j });
        }
        v.iter_mut().for_each(|x| *x /= nrm);
        basis.push(v);
    }

    let mut q = Matrix::zeros(n, k);
    for (j, col) in basis.iter().enumerate() {
        q.set_column(j, col);
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn inverse_2x2(m: &Matrix) -> Matrix {
        let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        Matrix::from_rows(&[
            [m[(1, 1)] / det, -m[(0, 1)] / det],
            [-m[(1, 0)] / det, m[(0, 0)] / det],
        ])
    }

    #[test]
    fn orthonormal_input_is_fixed_point() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let a = Matrix::from_rows(&[[h, 0.0], [h, 0.0], [0.0, 1.0]]);
        let q = qr_orthonormalize(&a).unwrap();
        assert!(q.sub(&a).max_abs() <= 1e-12);
    }

    #[test]
    fn positive_diagonal_scaling_gives_identity() {
        let q = qr_orthonormalize(&Matrix::from_rows(&[[2.0, 0.0], [0.0, 3.0]])).unwrap();
        assert!(q.sub(&Matrix::identity(2)).max_abs() <= 1e-15);
    }

    #[test]
    fn projector_equality_on_random_tall_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Matrix::from_fn(5, 2, |_, _| rng.gen_range(-1.0..1.0));
        let q = qr_orthonormalize(&a).unwrap();
        assert!(q.t_matmul(&q).sub(&Matrix::identity(2)).frobenius_norm() <= 1e-10);
        // P = a (aᵀa)⁻¹ aᵀ computed independently of the QR path
        let p_direct = a.matmul(&inverse_2x2(&a.t_matmul(&a))).matmul_t(&a);
        let p_qr = q.matmul_t(&q);
        assert!(p_direct.sub(&p_qr).max_abs() <= 1e-8);
    }

    #[test]
    fn rank_deficiency_names_column() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 0.0], [1.0, 2.0, 1.0], [0.0, 0.0, 1.0]]);
        assert!(matches!(
            qr_orthonormalize(&a),
            Err(Error::RankDeficient { column: 1 })
        ));
    }

    #[test]
    fn wide_input_rejected() {
        assert!(matches!(
            qr_orthonormalize(&Matrix::zeros(2, 3)),
            Err(Error::Dimension(_))
        ));
    }
}
