//! Task-relevant subspaces of a teacher layer.
//!
//! The relevant subspace `U` is the span that best expresses the teacher's
//! classification margin. With centred activations `ã` and response vectors
//! `c = ∂Δ/∂ã`, the extraction maximises
//!
//! ```text
//! E[⟨Uᵀã, Uᵀc⟩] + β⁻¹·E[‖Uᵀã‖²] + β·E[‖Uᵀc‖²]   s.t. UᵀU = I
//! ```
//!
//! which equals `tr(UᵀMU)` for the symmetric matrix
//! `M = ½(Σ_ac + Σ_ca) + β⁻¹Σ_a + βΣ_c`, so the maximiser is spanned by the top
//! eigenvectors of `M`. `β = √(tr Σ_a / tr Σ_c)` balances the two variance
//! terms when chosen automatically.

mod file;

pub use file::{decode_subspace, encode_subspace, load_subspace, save_subspace};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::{softmax_probs, ActivationBatch, NetworkState};
use crate::numerics::{covariance, qr_orthonormalize, sym_eig, Matrix};
use crate::{Error, Result};

/// A subset of the teacher's classes to distil.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubtaskSpec {
    pub name: String,
    pub class_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
}

impl SubtaskSpec {
    pub fn new(name: impl Into<String>, class_ids: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            class_ids,
            class_names: None,
        }
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    /// At least two distinct classes, all below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.class_ids.len() < 2 {
            return Err(Error::Subtask(format!(
                "subtask '{}' needs at least two classes",
                self.name
            )));
        }
        let mut seen = self.class_ids.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Subtask(format!(
                "subtask '{}' lists a class twice",
                self.name
            )));
        }
        if let Some(&bad) = self.class_ids.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Subtask(format!(
                "class {bad} is out of range for {num_classes} classes"
            )));
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.class_ids.len() {
                return Err(Error::Subtask(
                    "class_names must match class_ids in length".into(),
                ));
            }
        }
        Ok(())
    }

    /// Columns of `logits` belonging to the subtask, in subtask order.
    pub fn slice_logits(&self, logits: &Matrix) -> Matrix {
        Matrix::from_fn(logits.rows(), self.class_ids.len(), |i, j| {
            logits[(i, self.class_ids[j])]
        })
    }
}

/// Margin between the two most probable subtask classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Margin {
    pub delta: f64,
    pub j_star: usize,
    pub j_dagger: usize,
}

/// `Δ = log p(j⋆)/p(j†)` where `j⋆`, `j†` are the best and runner-up subtask
/// classes of one probability row. Ties go to the lower class id.
pub fn margin_delta(probs_row: &[f64], subtask: &SubtaskSpec) -> Result<Margin> {
    subtask.validate(probs_row.len())?;
    let mut best: Option<(usize, f64)> = None;
    let mut second: Option<(usize, f64)> = None;
    let mut ids = subtask.class_ids.clone();
    ids.sort_unstable();
    for &c in &ids {
        let p = probs_row[c];
        if !(p > 0.0) {
            return Err(Error::Parameter(format!(
                "probability of class {c} must be positive, got {p}"
            )));
        }
        match best {
            Some((_, bp)) if p <= bp => match second {
                Some((_, sp)) if p <= sp => {}
                _ => second = Some((c, p)),
            },
            _ => {
                second = best;
                best = Some((c, p));
            }
        }
    }
    let (j_star, p_star) = best.unwrap();
    let (j_dagger, p_dagger) = second.unwrap();
    Ok(Margin {
        delta: (p_star / p_dagger).ln(),
        j_star,
        j_dagger,
    })
}

/// Response vectors `c_T` of one teacher layer, row-aligned with its activations.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseBatch {
    pub layer_index: usize,
    pub values: Matrix,
}

/// Gradient of the margin `Δ` with respect to the layer's activation, one row
/// per input, with `j⋆` and `j†` held at their local values.
///
/// With unit temperature `Δ = z_{j⋆} − z_{j†}`, so the logit cotangent is
/// `e_{j⋆} − e_{j†}` and the rest is ordinary backpropagation through the
/// frozen teacher.
pub fn response_vectors(
    teacher: &NetworkState,
    inputs: &Matrix,
    layer_index: usize,
    subtask: &SubtaskSpec,
) -> Result<ResponseBatch> {
    let depth = teacher.depth();
    if layer_index == 0 || layer_index >= depth {
        return Err(Error::Index(format!(
            "response layer {layer_index} outside hidden range 1..{}",
            depth - 1
        )));
    }
    subtask.validate(teacher.spec.output_dim())?;
    let trace = teacher.forward(inputs)?;
    let probs = softmax_probs(trace.logits(), 1.0)?;
    let mut cotangent = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let m = margin_delta(probs.row(i), subtask)?;
        cotangent[(i, m.j_star)] = 1.0;
        cotangent[(i, m.j_dagger)] = -1.0;
    }
    let grads = teacher.backward(&trace, &cotangent, &[])?;
    Ok(ResponseBatch {
        layer_index,
        values: grads.activations[layer_index].clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubspaceMethod {
    Prca,
    Pca,
    Random,
}

impl SubspaceMethod {
    pub fn tag(self) -> u8 {
        match self {
            SubspaceMethod::Prca => 0,
            SubspaceMethod::Pca => 1,
            SubspaceMethod::Random => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(SubspaceMethod::Prca),
            1 => Some(SubspaceMethod::Pca),
            2 => Some(SubspaceMethod::Random),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SubspaceMethod::Prca => "prca",
            SubspaceMethod::Pca => "pca",
            SubspaceMethod::Random => "random",
        }
    }
}

/// Orthonormal projection `U` (`d x K`) of one teacher layer and its mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    pub u: Matrix,
    pub mu_teacher: Vec<f64>,
    pub layer_index: usize,
    pub k: usize,
    /// β used by PRCA; zero for the PCA and random baselines.
    pub beta_used: f64,
    pub method: SubspaceMethod,
    /// Top eigenvalues of the objective matrix, for reporting.
    pub eigenvalues: Vec<f64>,
}

impl Subspace {
    pub fn dim(&self) -> usize {
        self.u.rows()
    }

    /// `Uᵀ(a − μ_T)` for every row of `a`.
    pub fn project(&self, a: &Matrix) -> Matrix {
        a.sub_row(&self.mu_teacher).matmul(&self.u)
    }

    /// `U Uᵀ`
    pub fn projector(&self) -> Matrix {
        self.u.matmul_t(&self.u)
    }

    /// The whole `d`-dimensional space, used when dimensionality reduction is
    /// switched off.
    pub fn identity(mu_teacher: Vec<f64>, layer_index: usize) -> Self {
        let d = mu_teacher.len();
        Self {
            u: Matrix::identity(d),
            mu_teacher,
            layer_index,
            k: d,
            beta_used: 0.0,
            method: SubspaceMethod::Pca,
            eigenvalues: Vec::new(),
        }
    }
}

/// Symmetric objective matrix `M` and the β it was built with.
#[derive(Debug, Clone)]
pub struct PrcaObjective {
    pub matrix: Matrix,
    pub beta: f64,
    pub sigma_a: Matrix,
    pub sigma_c: Matrix,
    pub sigma_ac: Matrix,
}

/// Builds `M` from already-centred activations and their responses.
pub fn prca_objective(centered: &Matrix, responses: &Matrix, beta_mode: BetaMode) -> Result<PrcaObjective> {
    if centered.shape() != responses.shape() {
        return Err(Error::dim(format!(
            "activations {:?} and responses {:?} are not row-aligned",
            centered.shape(),
            responses.shape()
        )));
    }
    let n = centered.rows();
    if n == 0 {
        return Err(Error::EmptyInput("PRCA needs at least one sample".into()));
    }
    let sigma_a = covariance(centered, false)?;
    let sigma_c = covariance(responses, false)?;
    let sigma_ac = centered.t_matmul(responses).scale(1.0 / n as f64);
    let beta = match beta_mode {
        BetaMode::Fixed(b) => {
            if !(b > 0.0) || !b.is_finite() {
                return Err(Error::Parameter(format!("β must be positive, got {b}")));
            }
            b
        }
        BetaMode::Auto => {
            let tr_c = sigma_c.trace();
            let tr_a = sigma_a.trace();
            if tr_c <= 0.0 {
                return Err(Error::DegenerateResponse(
                    "responses have zero total variance, β is undefined".into(),
                ));
            }
            if tr_a <= 0.0 {
                return Err(Error::DegenerateInput(
                    "activations have zero total variance".into(),
                ));
            }
            (tr_a / tr_c).sqrt()
        }
    };
    let mut m = sigma_ac.add(&sigma_ac.transpose()).scale(0.5);
    m.axpy(1.0 / beta, &sigma_a);
    m.axpy(beta, &sigma_c);
    Ok(PrcaObjective {
        matrix: m.symmetrized(),
        beta,
        sigma_a,
        sigma_c,
        sigma_ac,
    })
}

/// `tr(UᵀMU)`
pub fn subspace_objective(u: &Matrix, m: &Matrix) -> f64 {
    u.t_matmul(&m.matmul(u)).trace()
}

fn check_k(k: usize, d: usize) -> Result<()> {
    if k == 0 || k > d {
        return Err(Error::dim(format!("subspace size {k} must lie in 1..={d}")));
    }
    Ok(())
}

/// Relevant subspace of a teacher layer from its activations and responses.
pub fn prca_subspace(
    activations: &ActivationBatch,
    responses: &ResponseBatch,
    k: usize,
    beta_mode: BetaMode,
) -> Result<Subspace> {
    check_k(k, activations.dim())?;
    if activations.len() < 2 {
        return Err(Error::EmptyInput("PRCA needs at least two samples".into()));
    }
    let mu = activations.values.col_means();
    let centered = activations.values.sub_row(&mu);
    let objective = prca_objective(&centered, &responses.values, beta_mode)?;
    let eig = sym_eig(&objective.matrix)?;
    Ok(Subspace {
        u: eig.top(k),
        mu_teacher: mu,
        layer_index: activations.layer_index,
        k,
        beta_used: objective.beta,
        method: SubspaceMethod::Prca,
        eigenvalues: eig.eigenvalues[..k].to_vec(),
    })
}

/// Top-`k` principal directions of the centred activations.
pub fn pca_subspace(activations: &ActivationBatch, k: usize) -> Result<Subspace> {
    check_k(k, activations.dim())?;
    if activations.is_empty() {
        return Err(Error::EmptyInput("PCA of an empty batch".into()));
    }
    let cov = covariance(&activations.values, true)?;
    let eig = sym_eig(&cov)?;
    Ok(Subspace {
        u: eig.top(k),
        mu_teacher: activations.values.col_means(),
        layer_index: activations.layer_index,
        k,
        beta_used: 0.0,
        method: SubspaceMethod::Pca,
        eigenvalues: eig.eigenvalues[..k].to_vec(),
    })
}

/// QR-orthonormalised seeded Gaussian frame; the mean is supplied by the caller.
pub fn random_subspace(
    d: usize,
    k: usize,
    seed: u64,
    mu_teacher: Vec<f64>,
    layer_index: usize,
) -> Result<Subspace> {
    check_k(k, d)?;
    if mu_teacher.len() != d {
        return Err(Error::dim(format!(
            "mean has {} entries for a {d}-dimensional layer",
            mu_teacher.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Matrix::from_fn(d, k, |_, _| StandardNormal.sample(&mut rng));
    Ok(Subspace {
        u: qr_orthonormalize(&g)?,
        mu_teacher,
        layer_index,
        k,
        beta_used: 0.0,
        method: SubspaceMethod::Random,
        eigenvalues: Vec::new(),
    })
}

/// Frobenius distance between the orthogonal projectors of two frames.
pub fn projector_distance(a: &Matrix, b: &Matrix) -> f64 {
    a.matmul_t(a).sub(&b.matmul_t(b)).frobenius_norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelTag, NetworkSpec};
    use crate::numerics::orthogonality_defect;
    use rand::Rng;

    fn batch(values: Matrix) -> ActivationBatch {
        ActivationBatch::new(1, values, ModelTag::Teacher)
    }

    fn responses(values: Matrix) -> ResponseBatch {
        ResponseBatch {
            layer_index: 1,
            values,
        }
    }

    fn random(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn margin_examples() {
        let st = SubtaskSpec::new("s", vec![0, 1, 2]);
        let m = margin_delta(&[0.8, 0.1, 0.1], &st).unwrap();
        assert!((m.delta - 8f64.ln()).abs() < 1e-12);
        assert_eq!((m.j_star, m.j_dagger), (0, 1));
        let m = margin_delta(&[0.4, 0.4, 0.2], &st).unwrap();
        assert_eq!(m.delta, 0.0);
        assert_eq!((m.j_star, m.j_dagger), (0, 1));
        assert!(margin_delta(&[0.5, 0.5], &SubtaskSpec::new("one", vec![1])).is_err());
    }

    #[test]
    fn margin_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let st = SubtaskSpec::new("s", vec![5, 1, 3, 7]);
        for _ in 0..200 {
            let mut p: Vec<f64> = (0..8).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
            // brute force over ordered pairs
            let mut best = (f64::NEG_INFINITY, 0, 0);
            for &a in &st.class_ids {
                if st.class_ids.iter().all(|&b| p[a] >= p[b]) {
                    for &b in &st.class_ids {
                        if b != a && st.class_ids.iter().filter(|&&c| c != a).all(|&c| p[b] >= p[c]) {
                            best = ((p[a] / p[b]).ln(), a, b);
                        }
                    }
                }
            }
            let m = margin_delta(&p, &st).unwrap();
            assert_eq!((m.j_star, m.j_dagger), (best.1, best.2));
            assert!((m.delta - best.0).abs() < 1e-14);
        }
    }

    #[test]
    fn subtask_validation() {
        assert!(SubtaskSpec::new("d", vec![1, 1]).validate(3).is_err());
        assert!(SubtaskSpec::new("r", vec![1, 4]).validate(3).is_err());
        assert!(SubtaskSpec::new("ok", vec![2, 0]).validate(3).is_ok());
    }

    /// Moments Σ_a = diag(4,1), Σ_c = diag(0,1), Σ_ac = 0, with a non-zero mean.
    fn worked_example() -> (ActivationBatch, ResponseBatch) {
        let a = Matrix::from_rows(&[[2.0, 1.0], [2.0, -1.0], [-2.0, 1.0], [-2.0, -1.0]])
            .add_row(&[5.0, -3.0]);
        let c = Matrix::from_rows(&[[0.0, 1.0], [0.0, -1.0], [0.0, -1.0], [0.0, 1.0]]);
        (batch(a), responses(c))
    }

    #[test]
    fn worked_example_selects_response_direction() {
        let (a, c) = worked_example();
        let centered = a.values.center_columns();
        let obj = prca_objective(&centered, &c.values, BetaMode::Auto).unwrap();
        assert!(obj.sigma_ac.max_abs() < 1e-15);
        let s5 = 5f64.sqrt();
        assert!((obj.beta - s5).abs() < 1e-14);
        let expected = Matrix::from_diag(&[4.0 / s5, 1.0 / s5 + s5]);
        assert!(obj.matrix.sub(&expected).max_abs() < 1e-14);
        let s = prca_subspace(&a, &c, 1, BetaMode::Auto).unwrap();
        assert_eq!(s.u, Matrix::column_vector(&[0.0, 1.0]));
        assert_eq!(s.mu_teacher, vec![5.0, -3.0]);
        assert_eq!(s.method, SubspaceMethod::Prca);
    }

    #[test]
    fn zero_responses_reduce_to_pca() {
        let a = batch(random(40, 5, 1).matmul(&Matrix::from_diag(&[3.0, 2.0, 1.0, 0.5, 0.1])));
        let c = responses(Matrix::zeros(40, 5));
        let prca = prca_subspace(&a, &c, 2, BetaMode::Fixed(0.7)).unwrap();
        let pca = pca_subspace(&a, 2).unwrap();
        assert!(projector_distance(&prca.u, &pca.u) < 1e-10);
        assert!(matches!(
            prca_subspace(&a, &c, 2, BetaMode::Auto),
            Err(Error::DegenerateResponse(_))
        ));
    }

    #[test]
    fn prca_beats_random_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = batch(random(30, 3, 5));
        let c = responses(random(30, 3, 6));
        let s = prca_subspace(&a, &c, 1, BetaMode::Auto).unwrap();
        let obj = prca_objective(&a.values.center_columns(), &c.values, BetaMode::Auto).unwrap();
        let at_u = subspace_objective(&s.u, &obj.matrix);
        let mut best = f64::NEG_INFINITY;
        for _ in 0..1_000_000 {
            let v: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = crate::numerics::norm(&v);
            let u = Matrix::column_vector(&v.iter().map(|x| x / n).collect::<Vec<_>>());
            best = best.max(subspace_objective(&u, &obj.matrix));
        }
        assert!(at_u >= best - 1e-6, "{at_u} < {best}");
    }

    #[test]
    fn objective_matrix_is_psd_and_nested() {
        for seed in 0..10 {
            let a = random(25, 6, seed);
            let c = random(25, 6, seed + 100).scale(0.1);
            let obj = prca_objective(&a.center_columns(), &c, BetaMode::Auto).unwrap();
            let eig = sym_eig(&obj.matrix).unwrap();
            let tr = obj.matrix.trace();
            assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-10 * tr));
            let mut prev = f64::NEG_INFINITY;
            for k in 1..=6 {
                let v = subspace_objective(&eig.top(k), &obj.matrix);
                assert!(v >= prev - 1e-12);
                prev = v;
            }
        }
    }

    #[test]
    fn pca_examples() {
        // points on a line through the mean
        let dir = [0.6, 0.8, 0.0];
        let a = batch(Matrix::from_fn(10, 3, |i, j| (i as f64 - 3.0) * dir[j] + 1.0));
        let s = pca_subspace(&a, 1).unwrap();
        assert!(projector_distance(&s.u, &Matrix::column_vector(&dir)) < 1e-10);
        // isotropic: every frame is optimal, so only reconstruction matters
        let iso = batch(Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]));
        let s = pca_subspace(&iso, 2).unwrap();
        assert!(s.projector().sub(&Matrix::identity(2)).max_abs() < 1e-12);
        assert!(pca_subspace(&iso, 3).is_err());
    }

    #[test]
    fn random_subspace_properties() {
        let a = random_subspace(7, 3, 11, vec![0.0; 7], 2).unwrap();
        assert!(orthogonality_defect(&a.u) <= 1e-10);
        assert_eq!(a, random_subspace(7, 3, 11, vec![0.0; 7], 2).unwrap());
        let full = random_subspace(4, 4, 1, vec![0.0; 4], 2).unwrap();
        assert!(full.projector().sub(&Matrix::identity(4)).max_abs() < 1e-12);
        assert!(random_subspace(3, 4, 1, vec![0.0; 3], 1).is_err());
    }

    #[test]
    fn responses_reject_bad_layer() {
        let t = NetworkState::init(&NetworkSpec::relu(vec![3, 4, 4, 3], 1)).unwrap();
        let st = SubtaskSpec::new("s", vec![0, 2]);
        let x = random(5, 3, 2);
        assert!(response_vectors(&t, &x, 0, &st).is_err());
        assert!(response_vectors(&t, &x, 3, &st).is_err());
        assert!(response_vectors(&t, &x, 1, &SubtaskSpec::new("s", vec![0, 9])).is_err());
    }

    #[test]
    fn dead_path_gives_zero_responses() {
        let mut t = NetworkState::init(&NetworkSpec::relu(vec![3, 4, 4, 3], 1)).unwrap();
        // layer 2 is always inactive, so layer-1 activations cannot reach the logits
        t.layers[1].weight = Matrix::zeros(4, 4);
        t.layers[1].bias = vec![-1.0; 4];
        let r = response_vectors(&t, &random(6, 3, 3), 1, &SubtaskSpec::new("s", vec![0, 1, 2])).unwrap();
        assert_eq!(r.values.max_abs(), 0.0);
    }
}
