//! Loss terms of the layer-wise distillation objective
//!
//! ```text
//! E_output(a_T⁽ᴸ⁾, a_θ⁽ᴸ⁾) + Σ_l α_l · E_l(a_T⁽ˡ⁾, a_θ⁽ˡ⁾)
//! ```
//!
//! with the orthogonal subspace-matching layer loss
//! `E_l = E‖V(a_θ − μ_θ) − Uᵀ(a_T − μ_T)‖²`, the `(W, b)` baseline
//! `E‖W a_θ + b − a_T‖²`, and the soft orthogonality penalty. Every function
//! returns exact gradients alongside the value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::{softmax_probs, ActivationBatch};
use crate::numerics::{qr_orthonormalize, Matrix};
use crate::subspace::Subspace;
use crate::{Error, Result};

/// Default weight of the soft orthogonality penalty.
pub const DEFAULT_PENALTY_WEIGHT: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrthoMode {
    /// Retract onto the Stiefel manifold after every update.
    Stiefel,
    /// Add `weight·‖VᵀV − I‖²_F` to the objective.
    SoftPenalty { weight: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuPolicy {
    BatchMean,
    Zero,
}

/// Learnable side of the subspace adapter: `V` maps the student's centred
/// activation into the coordinates of `U`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    /// `k_U x K_student`; square unless dimensionality reduction is disabled.
    pub v: Matrix,
    pub orthogonality: OrthoMode,
    pub mu_policy: MuPolicy,
    /// Student mean frozen after training, used for batch-independent reports.
    pub running_mean: Option<Vec<f64>>,
}

impl Adapter {
    /// `V = I` for square adapters, a seeded random orthonormal frame otherwise.
    pub fn init(
        rows: usize,
        cols: usize,
        orthogonality: OrthoMode,
        mu_policy: MuPolicy,
        seed: u64,
    ) -> Result<Self> {
        if rows < cols {
            return Err(Error::dim(format!(
                "adapter must be square or tall, got {rows}x{cols}"
            )));
        }
        let v = if rows == cols {
            Matrix::identity(rows)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            qr_orthonormalize(&Matrix::from_fn(rows, cols, |_, _| {
                StandardNormal.sample(&mut rng)
            }))?
        };
        Ok(Self {
            v,
            orthogonality,
            mu_policy,
            running_mean: None,
        })
    }
}

/// Teacher layer / student layer pairing with its subspace, adapter and weight.
#[derive(Debug, Clone)]
pub struct LayerBinding {
    pub teacher_layer: usize,
    pub student_layer: usize,
    pub subspace: Subspace,
    pub adapter: Adapter,
    pub alpha_l: f64,
}

impl LayerBinding {
    pub fn k(&self) -> usize {
        self.subspace.k
    }

    pub fn validate(&self, student_width: usize) -> Result<()> {
        if self.adapter.v.shape() != (self.subspace.k, student_width) {
            return Err(Error::dim(format!(
                "binding {}→{}: adapter {:?}, subspace K {}, student width {student_width}",
                self.teacher_layer,
                self.student_layer,
                self.adapter.v.shape(),
                self.subspace.k
            )));
        }
        Ok(())
    }
}

/// Which student mean to subtract.
#[derive(Debug, Clone, Copy)]
pub enum Centering<'a> {
    /// Mean of the current batch; its dependence on `a_θ` enters the gradient.
    BatchMean,
    /// A frozen mean.
    Fixed(&'a [f64]),
    Zero,
}

#[derive(Debug, Clone)]
pub struct LayerLoss {
    pub loss: f64,
    pub grad_v: Matrix,
    pub grad_student: Matrix,
}

/// `E‖V(a_θ − μ_θ) − Uᵀ(a_T − μ_T)‖²` for the binding's adapter policy.
pub fn subdistill_layer_loss(
    binding: &LayerBinding,
    teacher_batch: &ActivationBatch,
    student_batch: &ActivationBatch,
) -> Result<LayerLoss> {
    let centering = match binding.adapter.mu_policy {
        MuPolicy::BatchMean => Centering::BatchMean,
        MuPolicy::Zero => Centering::Zero,
    };
    subspace_matching_loss(
        &binding.adapter.v,
        &binding.subspace,
        &teacher_batch.values,
        &student_batch.values,
        centering,
    )
}

/// Core of [`subdistill_layer_loss`] with an explicit centering choice.
pub fn subspace_matching_loss(
    v: &Matrix,
    subspace: &Subspace,
    teacher: &Matrix,
    student: &Matrix,
    centering: Centering<'_>,
) -> Result<LayerLoss> {
    let n = teacher.rows();
    if n == 0 {
        return Err(Error::EmptyInput("layer loss on an empty batch".into()));
    }
    if student.rows() != n {
        return Err(Error::dim(format!(
            "teacher batch has {n} rows, student batch {}",
            student.rows()
        )));
    }
    if teacher.cols() != subspace.dim() {
        return Err(Error::dim(format!(
            "teacher width {} vs subspace dimension {}",
            teacher.cols(),
            subspace.dim()
        )));
    }
    if v.shape() != (subspace.k, student.cols()) {
        return Err(Error::dim(format!(
            "adapter {:?} does not map student width {} to K = {}",
            v.shape(),
            student.cols(),
            subspace.k
        )));
    }

    let centered_student = match centering {
        Centering::BatchMean => student.center_columns(),
        Centering::Fixed(mu) => {
            if mu.len() != student.cols() {
                return Err(Error::dim("frozen student mean has wrong length"));
            }
            student.sub_row(mu)
        }
        Centering::Zero => student.clone(),
    };
    let target = subspace.project(teacher);
    let residual = centered_student.matmul_t(v).sub(&target);
    let nf = n as f64;
    let loss = residual.frobenius_norm_sq() / nf;
    let grad_v = residual.t_matmul(&centered_student).scale(2.0 / nf);
    let mut grad_student = residual.matmul(v).scale(2.0 / nf);
    if let Centering::BatchMean = centering {
        // μ_θ depends on every row: subtract the column mean of the row gradients
        grad_student = grad_student.center_columns();
    }
    Ok(LayerLoss {
        loss,
        grad_v,
        grad_student,
    })
}

/// `α / E‖Uᵀ(a_T − μ_T)‖²` over the teacher activations in `teacher_batches`.
pub fn alpha_l_normalizer<'a>(
    subspace: &Subspace,
    teacher_batches: impl IntoIterator<Item = &'a Matrix>,
    alpha: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in teacher_batches {
        if batch.cols() != subspace.dim() {
            return Err(Error::dim("teacher batch width does not match subspace"));
        }
        total += subspace.project(batch).frobenius_norm_sq();
        count += batch.rows();
    }
    if count == 0 {
        return Err(Error::EmptyInput("normaliser needs teacher activations".into()));
    }
    let energy = total / count as f64;
    if !(energy > 0.0) {
        return Err(Error::DegenerateLayer(format!(
            "teacher layer {} has zero projected variance",
            subspace.layer_index
        )));
    }
    Ok(alpha / energy)
}

/// `(W, b)` baseline adapter mapping the student into the teacher's full space.
#[derive(Debug, Clone, PartialEq)]
pub struct WbAdapter {
    /// `d_teacher x K_student`
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl WbAdapter {
    /// Seeded `±1/√K` uniform weights and a zero bias.
    pub fn init(d: usize, k: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (k as f64).sqrt();
        Self {
            w: Matrix::from_fn(d, k, |_, _| rng.gen_range(-bound..bound)),
            b: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone)]
pub struct WbLoss {
    pub loss: f64,
    pub grad_w: Matrix,
    pub grad_b: Vec<f64>,
    pub grad_student: Matrix,
}

/// `E‖W a_θ + b − a_T‖²`
pub fn wb_layer_loss(
    adapter: &WbAdapter,
    teacher_batch: &ActivationBatch,
    student_batch: &ActivationBatch,
) -> Result<WbLoss> {
    let teacher = &teacher_batch.values;
    let student = &student_batch.values;
    let n = teacher.rows();
    if n == 0 {
        return Err(Error::EmptyInput("layer loss on an empty batch".into()));
    }
    if student.rows() != n
        || adapter.w.shape() != (teacher.cols(), student.cols())
        || adapter.b.len() != teacher.cols()
    {
        return Err(Error::dim(format!(
            "(W,b) adapter {:?} with teacher {:?} and student {:?}",
            adapter.w.shape(),
            teacher.shape(),
            student.shape()
        )));
    }
    let residual = student.matmul_t(&adapter.w).add_row(&adapter.b).sub(teacher);
    let nf = n as f64;
    Ok(WbLoss {
        loss: residual.frobenius_norm_sq() / nf,
        grad_w: residual.t_matmul(student).scale(2.0 / nf),
        grad_b: residual.col_sums().iter().map(|v| 2.0 * v / nf).collect(),
        grad_student: residual.matmul(&adapter.w).scale(2.0 / nf),
    })
}

/// `weight·‖MᵀM − I‖²_F` and its gradient `4·weight·M(MᵀM − I)`.
pub fn orthogonality_penalty(m: &Matrix, weight: f64) -> (f64, Matrix) {
    let defect = m.t_matmul(m).sub(&Matrix::identity(m.cols()));
    let value = weight * defect.frobenius_norm_sq();
    let grad = m.matmul(&defect).scale(4.0 * weight);
    (value, grad)
}

/// Mean over the batch of `KL(p_teacher ‖ p_student)` at temperature `T`, with
/// its gradient with respect to the student logits.
pub fn output_kl(
    teacher_logits: &Matrix,
    student_logits: &Matrix,
    temperature: f64,
) -> Result<(f64, Matrix)> {
    if teacher_logits.shape() != student_logits.shape() {
        return Err(Error::dim(format!(
            "teacher logits {:?} vs student logits {:?}",
            teacher_logits.shape(),
            student_logits.shape()
        )));
    }
    let n = teacher_logits.rows();
    if n == 0 {
        return Err(Error::EmptyInput("KL over an empty batch".into()));
    }
    let pt = softmax_probs(teacher_logits, temperature)?;
    let ps = softmax_probs(student_logits, temperature)?;
    let mut loss = 0.0;
    for (rt, rs) in pt.row_iter().zip(ps.row_iter()) {
        for (&t, &s) in rt.iter().zip(rs) {
            if t > 0.0 {
                loss += t * (t.ln() - s.ln());
            }
        }
    }
    let nf = n as f64;
    let grad = ps.sub(&pt).scale(1.0 / (nf * temperature));
    Ok((loss / nf, grad))
}

/// Cross-entropy of softmax(logits) against integer labels, with its logit gradient.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(Error::dim("one label per logit row expected"));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("cross-entropy over an empty batch".into()));
    }
    let mut probs = softmax_probs(logits, 1.0)?;
    let nf = labels.len() as f64;
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= logits.cols() {
            return Err(Error::Index(format!("label {y} for {} classes", logits.cols())));
        }
        loss -= probs[(i, y)].max(f64::MIN_POSITIVE).ln();
        probs[(i, y)] -= 1.0;
    }
    Ok((loss / nf, probs.scale(1.0 / nf)))
}

/// One evaluation of the composite objective.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub output_loss: f64,
    /// Raw layer losses `E_l`, before weighting.
    pub per_layer_losses: Vec<f64>,
    pub alphas: Vec<f64>,
    pub penalty_terms: Vec<f64>,
    pub total: f64,
}

impl LossReport {
    pub fn new(output_loss: f64, per_layer_losses: Vec<f64>, alphas: Vec<f64>, penalty_terms: Vec<f64>) -> Self {
        let mut r = Self {
            output_loss,
            per_layer_losses,
            alphas,
            penalty_terms,
            total: 0.0,
        };
        r.total = r.recompute_total();
        r
    }

    /// `output + Σ α_l·E_l + Σ penalties`
    pub fn recompute_total(&self) -> f64 {
        self.output_loss
            + self
                .per_layer_losses
                .iter()
                .zip(&self.alphas)
                .map(|(l, a)| a * l)
                .sum::<f64>()
            + self.penalty_terms.iter().sum::<f64>()
    }

    /// Element-wise mean of several reports with identical layout.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let Some(first) = reports.first() else {
            return LossReport::default();
        };
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&LossReport) -> &Vec<f64>| -> Vec<f64> {
            (0..f(first).len())
                .map(|i| reports.iter().map(|r| f(r)[i]).sum::<f64>() / n)
                .collect()
        };
        LossReport::new(
            reports.iter().map(|r| r.output_loss).sum::<f64>() / n,
            avg(&|r| &r.per_layer_losses),
            first.alphas.clone(),
            avg(&|r| &r.penalty_terms),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelTag;
    use crate::numerics::orthogonality_defect;
    use crate::subspace::random_subspace;
    use rand::Rng;

    fn random(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn tb(m: Matrix) -> ActivationBatch {
        ActivationBatch::new(1, m, ModelTag::Teacher)
    }

    fn sb(m: Matrix) -> ActivationBatch {
        ActivationBatch::new(1, m, ModelTag::Student)
    }

    fn binding(d: usize, k: usize, seed: u64) -> LayerBinding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let subspace = random_subspace(d, k, seed, mu, 1).unwrap();
        let v = qr_orthonormalize(&random(k, k, seed + 1)).unwrap();
        LayerBinding {
            teacher_layer: 1,
            student_layer: 1,
            subspace,
            adapter: Adapter {
                v,
                orthogonality: OrthoMode::Stiefel,
                mu_policy: MuPolicy::BatchMean,
                running_mean: None,
            },
            alpha_l: 1.0,
        }
    }

    #[test]
    fn perfect_copy_has_zero_loss() {
        let b = binding(6, 3, 4);
        let teacher = random(10, 6, 5);
        let shift = [0.3, -2.0, 7.0];
        // a_θ = Vᵀ Uᵀ(a_T − μ_T) + shift
        let student = b
            .subspace
            .project(&teacher)
            .matmul(&b.adapter.v)
            .add_row(&shift);
        let l = subdistill_layer_loss(&b, &tb(teacher.clone()), &sb(student)).unwrap();
        // the projected teacher batch is not mean-zero, so only its centred part can be matched
        let target = b.subspace.project(&teacher);
        let centered_target = target.center_columns();
        let expected = target.sub(&centered_target).frobenius_norm_sq() / 10.0;
        assert!((l.loss - expected).abs() < 1e-12);

        let centered_teacher = teacher.sub_row(&teacher.col_means());
        let mut b2 = b.clone();
        b2.subspace.mu_teacher = teacher.col_means();
        let student = b2.subspace.project(&teacher).matmul(&b2.adapter.v).add_row(&shift);
        let l = subdistill_layer_loss(&b2, &tb(teacher), &sb(student)).unwrap();
        assert!(l.loss < 1e-24, "{}", l.loss);
        assert!(centered_teacher.col_means().iter().all(|m| m.abs() < 1e-12));
    }

    #[test]
    fn translation_invariance_and_wb_witness() {
        let b = binding(5, 2, 7);
        let teacher = random(8, 5, 1);
        let student = random(8, 2, 2);
        let shifted = student.add_row(&[3.0, -1.5]);
        let a = subdistill_layer_loss(&b, &tb(teacher.clone()), &sb(student.clone())).unwrap();
        let c = subdistill_layer_loss(&b, &tb(teacher.clone()), &sb(shifted.clone())).unwrap();
        assert!((a.loss - c.loss).abs() < 1e-10);

        let wb = WbAdapter::init(5, 2, 3);
        let a = wb_layer_loss(&wb, &tb(teacher.clone()), &sb(student)).unwrap();
        let c = wb_layer_loss(&wb, &tb(teacher), &sb(shifted)).unwrap();
        assert!((a.loss - c.loss).abs() > 1e-3);
    }

    #[test]
    fn dimension_errors() {
        let b = binding(5, 2, 7);
        assert!(subdistill_layer_loss(&b, &tb(random(4, 5, 1)), &sb(random(3, 2, 1))).is_err());
        assert!(subdistill_layer_loss(&b, &tb(random(4, 4, 1)), &sb(random(4, 2, 1))).is_err());
        assert!(subdistill_layer_loss(&b, &tb(Matrix::zeros(0, 5)), &sb(Matrix::zeros(0, 2))).is_err());
    }

    #[test]
    fn normaliser_examples() {
        // Uᵀ(a − μ) = ±2 on one axis → E‖·‖² = 4
        let s = Subspace {
            u: Matrix::column_vector(&[1.0, 0.0]),
            mu_teacher: vec![1.0, 0.0],
            layer_index: 1,
            k: 1,
            beta_used: 0.0,
            method: crate::subspace::SubspaceMethod::Pca,
            eigenvalues: vec![],
        };
        let batch = Matrix::from_rows(&[[3.0, 5.0], [-1.0, 2.0]]);
        let a = alpha_l_normalizer(&s, [&batch], 0.1).unwrap();
        assert!((a - 0.025).abs() < 1e-15);

        let doubled = batch.scale(2.0);
        let mut s2 = s.clone();
        s2.mu_teacher = vec![2.0, 0.0];
        let a2 = alpha_l_normalizer(&s2, [&doubled], 0.1).unwrap();
        assert!((a2 - a / 4.0).abs() < 1e-15);

        let flat = Matrix::from_rows(&[[1.0, 5.0], [1.0, 2.0]]);
        assert!(matches!(
            alpha_l_normalizer(&s, [&flat], 0.1),
            Err(Error::DegenerateLayer(_))
        ));
    }

    #[test]
    fn wb_mean_predictor() {
        let teacher = random(12, 4, 3);
        let mu = teacher.col_means();
        let wb = WbAdapter {
            w: Matrix::zeros(4, 2),
            b: mu,
        };
        let l = wb_layer_loss(&wb, &tb(teacher.clone()), &sb(random(12, 2, 4))).unwrap();
        let cov = crate::numerics::covariance(&teacher, true).unwrap();
        assert!((l.loss - cov.trace()).abs() < 1e-12);
    }

    #[test]
    fn penalty_examples() {
        let q = qr_orthonormalize(&random(4, 2, 1)).unwrap();
        let (p, g) = orthogonality_penalty(&q, 1000.0);
        assert!(p < 1e-20 && g.max_abs() < 1e-10);
        let (p, _) = orthogonality_penalty(&Matrix::identity(2).scale(2.0), 1.0);
        assert!((p - 18.0).abs() < 1e-12);
        assert!(orthogonality_defect(&q) < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let t = Matrix::from_rows(&[[8f64.ln(), 0.0, 0.0]]);
        let s = Matrix::zeros(1, 3);
        let (l, _) = output_kl(&t, &s, 1.0).unwrap();
        let expected = 0.8 * 2.4f64.ln() + 0.2 * 0.3f64.ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.4596).abs() < 1e-4);
        let (l, g) = output_kl(&t, &t, 2.0).unwrap();
        assert!(l.abs() < 1e-15 && g.max_abs() < 1e-15);
        assert!(output_kl(&t, &Matrix::zeros(1, 2), 1.0).is_err());
    }

    #[test]
    fn report_total_is_reproducible() {
        let r = LossReport::new(0.5, vec![2.0, 4.0], vec![0.1, 0.01], vec![0.25]);
        assert!((r.total - (0.5 + 0.2 + 0.04 + 0.25)).abs() < 1e-12);
        let m = LossReport::mean(&[r.clone(), r.clone()]);
        assert!((m.total - r.total).abs() < 1e-12);
    }
}
