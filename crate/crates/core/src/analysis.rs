//! Alignment and attribution measures between teacher and student.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::model::NetworkState;
use crate::numerics::Matrix;
use crate::{Error, Result};

/// Linear centred kernel alignment `‖X̃ᵀỸ‖²_F / (‖X̃ᵀX̃‖_F·‖ỸᵀỸ‖_F)`.
pub fn linear_cka(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::dim(format!(
            "CKA needs row-aligned inputs, got {} and {} rows",
            x.rows(),
            y.rows()
        )));
    }
    if x.rows() < 2 {
        return Err(Error::EmptyInput("CKA needs at least two samples".into()));
    }
    let xc = x.center_columns();
    let yc = y.center_columns();
    let sxx = xc.t_matmul(&xc).frobenius_norm_sq();
    let syy = yc.t_matmul(&yc).frobenius_norm_sq();
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput(
            "CKA argument has zero centred variance".into(),
        ));
    }
    let sxy = xc.t_matmul(&yc).frobenius_norm_sq();
    Ok((sxy / (sxx * syy).sqrt()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub values: Matrix,
    pub centered: bool,
}

impl KernelMatrix {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    /// Entries of the `range x range` block.
    pub fn block(&self, range: Range<usize>) -> Matrix {
        let n = range.len();
        Matrix::from_fn(n, n, |i, j| self.values[(range.start + i, range.start + j)])
    }
}

/// `K = X̃X̃ᵀ` with rows centred over the batch.
pub fn centered_kernel(batch: &Matrix) -> Result<KernelMatrix> {
    if batch.rows() < 2 {
        return Err(Error::EmptyInput(
            "a centred kernel needs at least two samples".into(),
        ));
    }
    let xc = batch.center_columns();
    Ok(KernelMatrix {
        values: xc.matmul_t(&xc).symmetrized(),
        centered: true,
    })
}

fn check_range(range: &Range<usize>, n: usize) -> Result<()> {
    if range.is_empty() || range.end > n {
        return Err(Error::Parameter(format!(
            "relevant range {range:?} is empty or exceeds {n}"
        )));
    }
    Ok(())
}

/// Pearson correlation between the relevant blocks of two kernels, each kernel
/// first scaled to unit Frobenius norm.
pub fn band_alignment_score(
    teacher_kernel: &KernelMatrix,
    student_kernel: &KernelMatrix,
    relevant: Range<usize>,
) -> Result<f64> {
    if teacher_kernel.values.shape() != student_kernel.values.shape() {
        return Err(Error::dim("kernels differ in size"));
    }
    check_range(&relevant, teacher_kernel.len())?;
    let normalised = |k: &KernelMatrix| {
        let f = k.values.frobenius_norm();
        let b = k.block(relevant.clone());
        if f > 0.0 {
            b.scale(1.0 / f)
        } else {
            b
        }
    };
    let t = normalised(teacher_kernel);
    let s = normalised(student_kernel);
    pearson(t.as_slice(), s.as_slice())
}

/// Fraction of a kernel's squared Frobenius mass inside the relevant block.
pub fn kernel_mass_fraction(kernel: &KernelMatrix, relevant: Range<usize>) -> Result<f64> {
    check_range(&relevant, kernel.len())?;
    let total = kernel.values.frobenius_norm_sq();
    if total == 0.0 {
        return Err(Error::DegenerateInput("kernel is identically zero".into()));
    }
    Ok(kernel.block(relevant).frobenius_norm_sq() / total)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::dim("pearson inputs differ in length"));
    }
    if xs.len() < 2 {
        return Err(Error::EmptyInput("pearson needs two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput(
            "zero variance in correlation input".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Propagation rule for one dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrpRule {
    Epsilon(f64),
    Gamma(f64),
}

pub const DEFAULT_GAMMA: f64 = 0.25;
pub const DEFAULT_EPSILON: f64 = 1e-6;

impl LrpRule {
    /// γ-rule below the output layer and ε-rule on the output layer.
    pub fn composite(depth: usize) -> Vec<LrpRule> {
        (1..=depth)
            .map(|l| {
                if l == depth {
                    LrpRule::Epsilon(DEFAULT_EPSILON)
                } else {
                    LrpRule::Gamma(DEFAULT_GAMMA)
                }
            })
            .collect()
    }

    pub fn label(&self) -> String {
        match self {
            LrpRule::Epsilon(e) => format!("epsilon({e})"),
            LrpRule::Gamma(g) => format!("gamma({g})"),
        }
    }
}

/// Per-feature relevance of one prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceMap {
    pub values: Vec<f64>,
    pub target: usize,
    /// Rule used at each layer, from layer 1 upwards.
    pub rule_trace: Vec<String>,
}

impl RelevanceMap {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// LRP relevance of the input features for the logit of `target_class`.
///
/// `rules[l - 1]` is applied at weight layer `l`. Relevance flowing to biases
/// is dropped, so the decomposition conserves the logit only for bias-free
/// networks (as ε → 0).
pub fn lrp_attribute(
    state: &NetworkState,
    input_row: &[f64],
    target_class: usize,
    rules: &[LrpRule],
) -> Result<RelevanceMap> {
    let depth = state.depth();
    if rules.len() != depth {
        return Err(Error::Parameter(format!(
            "{} rules for a network with {depth} layers",
            rules.len()
        )));
    }
    for r in rules {
        match *r {
            LrpRule::Epsilon(e) if !(e >= 0.0) => {
                return Err(Error::Parameter(format!("ε must be non-negative, got {e}")))
            }
            LrpRule::Gamma(g) if !(g >= 0.0) => {
                return Err(Error::Parameter(format!("γ must be non-negative, got {g}")))
            }
            _ => {}
        }
    }
    if target_class >= state.spec.output_dim() {
        return Err(Error::Index(format!(
            "target class {target_class} for {} outputs",
            state.spec.output_dim()
        )));
    }
    let trace = state.forward(&Matrix::row_vector(input_row))?;
    let mut relevance = vec![0.0; state.spec.output_dim()];
    relevance[target_class] = trace.logits()[(0, target_class)];

    for l in (1..=depth).rev() {
        let layer = &state.layers[l - 1];
        let a = trace.layer(l - 1).row(0);
        let (gamma, eps) = match rules[l - 1] {
            LrpRule::Epsilon(e) => (0.0, e),
            LrpRule::Gamma(g) => (g, 0.0),
        };
        let w = |k: usize, j: usize| {
            let v = layer.weight[(k, j)];
            v + gamma * v.max(0.0)
        };
        let mut lower = vec![0.0; a.len()];
        for (k, &r_k) in relevance.iter().enumerate() {
            if r_k == 0.0 {
                continue;
            }
            let b = layer.bias[k];
            let mut z = b + gamma * b.max(0.0);
            for (j, &aj) in a.iter().enumerate() {
                z += aj * w(k, j);
            }
            let denom = z + eps * if z >= 0.0 { 1.0 } else { -1.0 };
            if denom == 0.0 {
                continue;
            }
            let s = r_k / denom;
            for (j, &aj) in a.iter().enumerate() {
                lower[j] += aj * w(k, j) * s;
            }
        }
        relevance = lower;
    }
    Ok(RelevanceMap {
        values: relevance,
        target: target_class,
        rule_trace: rules.iter().map(LrpRule::label).collect(),
    })
}

/// Element-wise mean of maps over the same grid and target.
pub fn average_maps(maps: &[RelevanceMap]) -> Result<RelevanceMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::EmptyInput("no relevance maps to average".into()))?;
    if maps.iter().any(|m| m.values.len() != first.values.len()) {
        return Err(Error::dim("relevance maps differ in length"));
    }
    let n = maps.len() as f64;
    let values = (0..first.values.len())
        .map(|i| maps.iter().map(|m| m.values[i]).sum::<f64>() / n)
        .collect();
    Ok(RelevanceMap {
        values,
        target: first.target,
        rule_trace: first.rule_trace.clone(),
    })
}

/// Relevance summed over `patch x patch` tiles of a `(height, width)` grid;
/// edge tiles may be smaller.
pub fn patch_sums(map: &RelevanceMap, grid: (usize, usize), patch: usize) -> Result<Vec<f64>> {
    let (h, w) = grid;
    if map.values.len() != h * w {
        return Err(Error::dim(format!(
            "map of {} values on a {h}x{w} grid",
            map.values.len()
        )));
    }
    if patch == 0 {
        return Err(Error::Parameter("patch size must be positive".into()));
    }
    let (ph, pw) = (h.div_ceil(patch), w.div_ceil(patch));
    let mut sums = vec![0.0; ph * pw];
    for r in 0..h {
        for c in 0..w {
            sums[(r / patch) * pw + c / patch] += map.values[r * w + c];
        }
    }
    Ok(sums)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchCorrelation {
    pub pearson: f64,
    /// `(map_a patch, map_b patch)` pairs.
    pub points: Vec<(f64, f64)>,
}

/// Pearson correlation of patch-summed relevance between two maps.
pub fn patch_correlation(
    map_a: &RelevanceMap,
    map_b: &RelevanceMap,
    grid: (usize, usize),
    patch: usize,
) -> Result<PatchCorrelation> {
    pooled_patch_correlation(&[(map_a, map_b)], grid, patch)
}

/// Patch correlation pooled over many map pairs (the whole-dataset scatter).
pub fn pooled_patch_correlation(
    pairs: &[(&RelevanceMap, &RelevanceMap)],
    grid: (usize, usize),
    patch: usize,
) -> Result<PatchCorrelation> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (a, b) in pairs {
        if a.values.len() != b.values.len() {
            return Err(Error::dim("relevance maps differ in length"));
        }
        xs.extend(patch_sums(a, grid, patch)?);
        ys.extend(patch_sums(b, grid, patch)?);
    }
    let r = pearson(&xs, &ys)?;
    Ok(PatchCorrelation {
        pearson: r,
        points: xs.into_iter().zip(ys).collect(),
    })
}
