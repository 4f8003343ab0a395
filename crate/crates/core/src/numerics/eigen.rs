use super::Matrix;
use crate::{Error, Result};

const MAX_SWEEPS: usize = 100;
const ASYMMETRY_TOL: f64 = 1e-10;
/// Relative tolerance used to decide that two eigenvector entries tie in magnitude.
const SIGN_TIE_TOL: f64 = 1e-12;

/// Spectrum of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct EigenResult {
    /// Non-increasing.
    pub eigenvalues: Vec<f64>,
    /// One column per eigenvalue.
    pub eigenvectors: Matrix,
}

impl EigenResult {
    /// Leading `k` eigenvectors as a `n x k` matrix.
    pub fn top(&self, k: usize) -> Matrix {
        self.eigenvectors.leading_columns(k)
    }
}

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Eigenvalues come back in descending order (a stable sort, so equal values
/// keep the order in which the rotations left them on the diagonal). Each
/// eigenvector is signed so that its entry of largest magnitude is positive,
/// with near-ties resolved towards the lowest index.
pub fn sym_eig(a: &Matrix) -> Result<EigenResult> {
    if !a.is_square() {
        return Err(Error::dim(format!(
            "sym_eig needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    a.ensure_finite("sym_eig input")?;
    let asym = a.relative_asymmetry();
    if asym > ASYMMETRY_TOL {
        return Err(Error::Asymmetric(asym));
    }

    let n = a.rows();
    let mut m = a.symmetrized();
    let mut v = Matrix::identity(n);
    let scale = m.frobenius_norm();

    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&m) <= f64::EPSILON * scale {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                rotate(&mut m, &mut v, p, q);
            }
        }
    }

    let diag: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]));

    let eigenvalues = order.iter().map(|&i| diag[i]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src);
        canonical_sign(&mut col);
        eigenvectors.set_column(dst, &col);
    }
    Ok(EigenResult {
        eigenvalues,
        eigenvectors,
    })
}

fn off_diagonal_norm(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += m[(i, j)] * m[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Annihilates `m[p][q]` with a Jacobi rotation and accumulates it into `v`.
fn rotate(m: &mut Matrix, v: &mut Matrix, p: usize, q: usize) {
    let apq = m[(p, q)];
    if apq == 0.0 {
        return;
    }
    let app = m[(p, p)];
    let aqq = m[(q, q)];
    let tau = (aqq - app) / (2.0 * apq);
    let t = if tau >= 0.0 {
        1.0 / (tau + (1.0 + tau * tau).sqrt())
    } else {
        -1.0 / (-tau + (1.0 + tau * tau).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;
    let n = m.rows();

    for k in 0..n {
        let mkp = m[(k, p)];
        let mkq = m[(k, q)];
        m[(k, p)] = c * mkp - s * mkq;
        m[(k, q)] = s * mkp + c * mkq;
    }
    for k in 0..n {
        let mpk = m[(p, k)];
        let mqk = m[(q, k)];
        m[(p, k)] = c * mpk - s * mqk;
        m[(q, k)] = s * mpk + c * mqk;
    }
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Flips `col` so that its largest-magnitude entry (lowest index on ties) is positive.
fn canonical_sign(col: &mut [f64]) {
    let max = col.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return;
    }
    let pivot = col
        .iter()
        .position(|v| v.abs() >= max * (1.0 - SIGN_TIE_TOL))
        .unwrap_or(0);
    if col[pivot] < 0.0 {
        col.iter_mut().for_each(|v| *v = -*v);
    }
}
