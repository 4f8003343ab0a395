#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use subdistill::data::{apply_subtask, make_split, LabeledDataset, SplitPlan};
use subdistill::model::{NetworkSpec, NetworkState};
use subdistill::numerics::Matrix;
use subdistill::subspace::SubtaskSpec;
use subdistill::trainer::{train_teacher, DistillTask, TeacherConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn gaussian(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(n, d, |_, _| StandardNormal.sample(rng))
}

/// Gaussian blobs with one random centre per class.
pub fn blobs(classes: usize, per_class: usize, dim: usize, seed: u64) -> LabeledDataset {
    let mut r = rng(seed);
    let centres = Matrix::from_fn(classes, dim, |_, _| 2.0 * r.gen_range(-1.0..1.0));
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..classes * per_class {
        let c = i % classes;
        let noise: Vec<f64> = (0..dim)
            .map(|_| 0.6 * Distribution::<f64>::sample(&StandardNormal, &mut r))
            .collect();
        rows.push(
            centres
                .row(c)
                .iter()
                .zip(&noise)
                .map(|(a, b)| a + b)
                .collect::<Vec<_>>(),
        );
        labels.push(c);
    }
    LabeledDataset::new(Matrix::from_rows(&rows), labels, "blobs".into()).unwrap()
}

pub struct Fixture {
    pub teacher: NetworkState,
    pub student_spec: NetworkSpec,
    pub dataset: LabeledDataset,
    pub split: SplitPlan,
    pub subtask: SubtaskSpec,
}

impl Fixture {
    pub fn task(&self) -> DistillTask<'_> {
        DistillTask {
            teacher: &self.teacher,
            student_spec: &self.student_spec,
            dataset: &self.dataset,
            split: &self.split,
            subtask: &self.subtask,
            subspaces: None,
        }
    }
}

/// Five-class blobs, a teacher with four hidden layers and a three-class
/// subtask for a narrower four-hidden-layer student.
pub fn fixture() -> Fixture {
    let full = blobs(5, 40, 10, 11);
    let teacher = train_teacher(
        &NetworkSpec::relu(vec![10, 24, 24, 24, 24, 5], 0),
        &full,
        &TeacherConfig {
            epochs: 30,
            ..TeacherConfig::default()
        },
    )
    .unwrap()
    .state;
    let subtask = SubtaskSpec::new("odd", vec![1, 3, 4]);
    let dataset = apply_subtask(&full, &subtask).unwrap();
    let split = make_split(&dataset, [0.6, 0.2, 0.2], 1.0, 0).unwrap();
    Fixture {
        teacher,
        student_spec: NetworkSpec::relu(vec![10, 8, 8, 8, 8, 3], 0),
        dataset,
        split,
        subtask,
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = subdistill::numerics::norm(a).max(subdistill::numerics::norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}
