mod common;

use common::{gaussian, numeric_gradient, rng};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use subdistill::loss::{wb_layer_loss, WbAdapter};
use subdistill::model::{ActivationBatch, ModelTag};
use subdistill::numerics::{sym_eig, Matrix};
use subdistill::subspace::{
    prca_objective, prca_subspace, projector_distance, BetaMode, ResponseBatch,
};

fn teacher_batch(values: Matrix) -> ActivationBatch {
    ActivationBatch::new(1, values, ModelTag::Teacher)
}

fn response_batch(values: Matrix) -> ResponseBatch {
    ResponseBatch {
        layer_index: 1,
        values,
    }
}

/// Activations with a few dominant directions and responses that are partly
/// aligned with them.
fn correlated(n: usize, d: usize, seed: u64) -> (Matrix, Matrix) {
    let mut r = rng(seed);
    let scales: Vec<f64> = (0..d).map(|_| r.gen_range(0.2..3.0)).collect();
    let a = gaussian(n, d, &mut r)
        .matmul(&Matrix::from_diag(&scales))
        .add_row(&(0..d).map(|_| r.gen_range(-2.0..2.0)).collect::<Vec<_>>());
    let mix = gaussian(d, d, &mut r);
    let c = a.center_columns().matmul(&mix).scale(0.3).add(&gaussian(n, d, &mut r).scale(0.2));
    (a, c)
}

/// `E[ã cᵀ]`-style second moments summed by hand.
fn moment(x: &Matrix, y: &Matrix) -> Matrix {
    let n = x.rows() as f64;
    Matrix::from_fn(x.cols(), y.cols(), |i, j| {
        (0..x.rows()).map(|s| x[(s, i)] * y[(s, j)]).sum::<f64>() / n
    })
}

#[test]
fn closed_form_subspace_beats_a_million_random_directions() {
    for seed in 0..10u64 {
        let d = 2 + (seed as usize % 3);
        let (a, c) = correlated(50, d, seed);
        let centered = a.center_columns();
        let beta = 0.5 + 0.25 * seed as f64;
        let obj = prca_objective(&centered, &c, BetaMode::Fixed(beta)).unwrap();
        let (saa, scc, sac) = (moment(&centered, &centered), moment(&c, &c), moment(&centered, &c));
        let m = Matrix::from_fn(d, d, |i, j| {
            0.5 * (sac[(i, j)] + sac[(j, i)]) + saa[(i, j)] / beta + beta * scc[(i, j)]
        });
        assert!(obj.matrix.sub(&m).max_abs() < 1e-12);

        let s = prca_subspace(&teacher_batch(a), &response_batch(c), 1, BetaMode::Fixed(beta)).unwrap();
        let u = s.u.column(0);
        let quad = |v: &[f64]| -> f64 {
            (0..d).map(|i| (0..d).map(|j| v[i] * m[(i, j)] * v[j]).sum::<f64>()).sum()
        };
        let closed = quad(&u);
        let mut r = rng(1000 + seed);
        let mut best = f64::NEG_INFINITY;
        let mut v = vec![0.0; d];
        for _ in 0..1_000_000 {
            v.iter_mut().for_each(|x| *x = StandardNormal.sample(&mut r));
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            best = best.max(quad(&v));
        }
        assert!(closed >= best - 1e-6, "seed {seed}: {closed} < {best}");
    }
}

#[test]
fn worked_example_picks_second_axis() {
    // Σ_a = diag(4, 1), Σ_c = diag(0, 1), no cross term
    let a = Matrix::from_rows(&[[2.0, 1.0], [2.0, -1.0], [-2.0, 1.0], [-2.0, -1.0]]);
    let c = Matrix::from_rows(&[[0.0, 1.0], [0.0, -1.0], [0.0, -1.0], [0.0, 1.0]]);
    let s = prca_subspace(&teacher_batch(a), &response_batch(c), 1, BetaMode::Auto).unwrap();
    assert_eq!(s.u, Matrix::column_vector(&[0.0, 1.0]));
}

#[test]
fn beta_heuristic_equals_unit_variance_rescaling() {
    for seed in 0..10u64 {
        let (a, c) = correlated(60, 5, 50 + seed);
        let centered = a.center_columns();
        let tr_a = moment(&centered, &centered).trace();
        let tr_c = moment(&c, &c).trace();
        let k = 2;
        let raw = prca_subspace(
            &teacher_batch(a.clone()),
            &response_batch(c.clone()),
            k,
            BetaMode::Fixed((tr_a / tr_c).sqrt()),
        )
        .unwrap();
        let scaled = prca_subspace(
            &teacher_batch(a.scale(1.0 / tr_a.sqrt())),
            &response_batch(c.scale(1.0 / tr_c.sqrt())),
            k,
            BetaMode::Fixed(1.0),
        )
        .unwrap();
        let dist = projector_distance(&raw.u, &scaled.u);
        assert!(dist <= 1e-8, "seed {seed}: {dist}");
        let auto = prca_subspace(&teacher_batch(a), &response_batch(c), k, BetaMode::Auto).unwrap();
        assert!(projector_distance(&raw.u, &auto.u) <= 1e-8);
    }
}

/// Numerical Hessian of the `(W, b)` loss with respect to row `r` of `W`,
/// from central differences of the loss itself.
fn wb_row_hessian(student: &Matrix, teacher: &Matrix, adapter: &WbAdapter, r: usize) -> Matrix {
    let k = student.cols();
    let h = 1e-4;
    let tb = teacher_batch(teacher.clone());
    let sb = ActivationBatch::new(1, student.clone(), ModelTag::Student);
    let loss = |row: &[f64]| {
        let mut a = adapter.clone();
        a.w.row_mut(r).copy_from_slice(row);
        wb_layer_loss(&a, &tb, &sb).unwrap().loss
    };
    let w0 = adapter.w.row(r).to_vec();
    let mut hess = Matrix::zeros(k, k);
    for i in 0..k {
        let mut plus = w0.clone();
        plus[i] += h;
        let mut minus = w0.clone();
        minus[i] -= h;
        let gp = numeric_gradient(&plus, h, &loss);
        let gm = numeric_gradient(&minus, h, &loss);
        for j in 0..k {
            hess[(i, j)] = (gp[j] - gm[j]) / (2.0 * h);
        }
    }
    hess.symmetrized()
}

fn condition(m: &Matrix) -> f64 {
    let e = sym_eig(m).unwrap().eigenvalues;
    e[0] / e[e.len() - 1]
}

#[test]
fn wb_curvature_is_the_uncentred_second_moment() {
    for seed in 0..10u64 {
        let mut r = rng(70 + seed);
        let student = gaussian(40, 3, &mut r).add_row(&[0.5, -1.0, 2.0]);
        let teacher = gaussian(40, 4, &mut r);
        let adapter = WbAdapter::init(4, 3, seed);
        let hess = wb_row_hessian(&student, &teacher, &adapter, (seed % 4) as usize);
        let expected = moment(&student, &student).scale(2.0);
        let he = sym_eig(&hess).unwrap().eigenvalues;
        let ee = sym_eig(&expected).unwrap().eigenvalues;
        for (a, b) in he.iter().zip(&ee) {
            assert!((a - b).abs() <= 1e-6 * b.abs(), "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn centering_improves_conditioning_tenfold() {
    let mut r = rng(5);
    let noise = gaussian(200, 3, &mut r);
    let std = (moment(&noise.center_columns(), &noise.center_columns()).trace() / 3.0).sqrt();
    let offset = [1.0, 1.0, 1.0].map(|v: f64| v * 10.0 * std / 3f64.sqrt());
    let student = noise.add_row(&offset);
    let mean_norm = offset.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((mean_norm / std - 10.0).abs() < 1e-9);
    let teacher = gaussian(200, 2, &mut r);
    let adapter = WbAdapter::init(2, 3, 0);
    let raw = condition(&wb_row_hessian(&student, &teacher, &adapter, 0));
    let centred = condition(&wb_row_hessian(&student.center_columns(), &teacher, &adapter, 0));
    assert!(raw / centred >= 10.0, "raw {raw}, centred {centred}");
}
