//! One-dimensional manifold experiment: a teacher whose kernel is banded
//! along the manifold, with only the middle third relevant to the task, and
//! students distilled at one hidden layer with either the subspace loss or the
//! `(W, b)` loss.

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{band_alignment_score, centered_kernel, kernel_mass_fraction, KernelMatrix};
use crate::data::{LabeledDataset, SplitPlan};
use crate::model::{NetworkSpec, NetworkState};
use crate::numerics::io::save_matrix;
use crate::numerics::Matrix;
use crate::subspace::{BetaMode, SubspaceMethod, SubtaskSpec};
use crate::svg;
use crate::trainer::{
    distill_decoupled, extract_subspaces, train_teacher, DistillConfig, DistillTask, Method,
    TeacherConfig, TrainingMode,
};
use crate::{Error, Result};

/// Frequencies of the curve's trigonometric pairs, in cycles over `t ∈ [0, 1]`.
pub const FREQUENCY_RANGE: std::ops::Range<f64> = 1.0..4.0;

/// Class of the points outside the relevant segment.
pub const BACKGROUND_CLASS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldDataset {
    /// Rows ordered by the manifold coordinate.
    pub inputs: Matrix,
    pub t: Vec<f64>,
    pub relevant_range: Range<usize>,
    /// 0 and 1 split the relevant segment at its midpoint; the rest is 2.
    pub labels: Vec<usize>,
}

impl ManifoldDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_labeled(&self) -> Result<LabeledDataset> {
        let mut ds = LabeledDataset::new(
            self.inputs.clone(),
            self.labels.clone(),
            "synthetic-manifold".into(),
        )?;
        ds.class_names = vec!["relevant_low".into(), "relevant_high".into(), "background".into()];
        Ok(ds)
    }
}

/// Points on a random closed-form curve through `d0` dimensions.
///
/// Coordinates come in `(cos, sin)` pairs of a shared random frequency and
/// phase, so the noiseless curve has constant speed; an odd last coordinate
/// is a linear ramp. Gaussian noise of `noise_scale` is added per entry.
pub fn generate_manifold(n: usize, d0: usize, seed: u64, noise_scale: f64) -> Result<ManifoldDataset> {
    if n < 16 {
        return Err(Error::Parameter(format!("manifold needs n ≥ 16, got {n}")));
    }
    if d0 < 2 {
        return Err(Error::Parameter(format!("manifold needs d0 ≥ 2, got {d0}")));
    }
    if !(noise_scale >= 0.0) || !noise_scale.is_finite() {
        return Err(Error::Parameter(format!(
            "noise scale must be non-negative, got {noise_scale}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = d0 / 2;
    let amplitude = 1.0 / (pairs as f64).sqrt();
    let waves: Vec<(f64, f64)> = (0..pairs)
        .map(|_| {
            (
                rng.gen_range(FREQUENCY_RANGE),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let noise = Normal::new(0.0, noise_scale.max(f64::MIN_POSITIVE)).expect("valid normal");
    let t: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let mut inputs = Matrix::zeros(n, d0);
    for (i, &ti) in t.iter().enumerate() {
        let row = inputs.row_mut(i);
        for (p, &(f, phase)) in waves.iter().enumerate() {
            let angle = std::f64::consts::TAU * f * ti + phase;
            row[2 * p] = amplitude * angle.cos();
            row[2 * p + 1] = amplitude * angle.sin();
        }
        if d0 % 2 == 1 {
            row[d0 - 1] = 2.0 * ti - 1.0;
        }
        if noise_scale > 0.0 {
            row.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
    }
    let relevant_range = n / 3..2 * n / 3;
    let mid = (relevant_range.start + relevant_range.end) / 2;
    let labels = (0..n)
        .map(|i| {
            if !relevant_range.contains(&i) {
                BACKGROUND_CLASS
            } else if i < mid {
                0
            } else {
                1
            }
        })
        .collect();
    Ok(ManifoldDataset {
        inputs,
        t,
        relevant_range,
        labels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BandExperimentConfig {
    pub n: usize,
    pub d0: usize,
    pub noise_scale: f64,
    /// Teacher hidden widths; the last one is the distilled layer.
    pub teacher_hidden: Vec<usize>,
    /// Student hidden widths; the last one is the bound layer and sets K.
    pub student_hidden: Vec<usize>,
    pub teacher: TeacherConfig,
    pub student_epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// One full repetition (data, teacher, students) per seed.
    pub seeds: Vec<u64>,
}

impl Default for BandExperimentConfig {
    fn default() -> Self {
        Self {
            n: 240,
            d0: 16,
            noise_scale: 0.0,
            teacher_hidden: vec![32, 32],
            student_hidden: vec![32, 8],
            teacher: TeacherConfig {
                epochs: 300,
                learning_rate: 0.05,
                momentum: 0.9,
                batch_size: 16,
                seed: 0,
            },
            student_epochs: 300,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 16,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedScores {
    pub seed: u64,
    pub teacher_accuracy: f64,
    pub subdistill_band: f64,
    pub wb_band: f64,
    pub teacher_mass: f64,
    pub subdistill_mass: f64,
    pub wb_mass: f64,
}

#[derive(Debug, Clone)]
pub struct BandReport {
    pub scores: Vec<SeedScores>,
    pub relevant_range: Range<usize>,
    /// Kernels of the first seed.
    pub teacher_kernel: KernelMatrix,
    pub subdistill_kernel: KernelMatrix,
    pub wb_kernel: KernelMatrix,
}

impl BandReport {
    pub fn scores_csv(&self) -> String {
        let mut out = String::from(
            "seed,teacher_accuracy,subdistill_band,wb_band,teacher_mass,subdistill_mass,wb_mass\n",
        );
        for s in &self.scores {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.seed,
                s.teacher_accuracy,
                s.subdistill_band,
                s.wb_band,
                s.teacher_mass,
                s.subdistill_mass,
                s.wb_mass
            ));
        }
        out
    }

    pub fn kernels_svg(&self, timestamp: Option<String>) -> String {
        svg::kernel_panels(
            &[
                ("teacher", &self.teacher_kernel.values),
                ("SubDistill student", &self.subdistill_kernel.values),
                ("(W,b) student", &self.wb_kernel.values),
            ],
            Some(self.relevant_range.clone()),
            timestamp,
        )
    }

    /// `kernels_{teacher,subdistill,wb}.sdmx`, `kernels.svg`, `scores.csv`.
    pub fn write_dir(&self, dir: impl AsRef<Path>, timestamp: Option<String>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_matrix(dir.join("kernels_teacher.sdmx"), &self.teacher_kernel.values)?;
        save_matrix(dir.join("kernels_subdistill.sdmx"), &self.subdistill_kernel.values)?;
        save_matrix(dir.join("kernels_wb.sdmx"), &self.wb_kernel.values)?;
        let svg_path = dir.join("kernels.svg");
        std::fs::write(&svg_path, self.kernels_svg(timestamp)).map_err(|e| Error::io(&svg_path, e))?;
        let csv_path = dir.join("scores.csv");
        std::fs::write(&csv_path, self.scores_csv()).map_err(|e| Error::io(&csv_path, e))?;
        Ok(())
    }
}

/// Trained teacher of one repetition, with its kernel at the distilled layer.
pub struct ManifoldTeacher {
    pub data: ManifoldDataset,
    pub state: NetworkState,
    pub accuracy: f64,
    pub kernel: KernelMatrix,
}

pub fn train_manifold_teacher(config: &BandExperimentConfig, seed: u64) -> Result<ManifoldTeacher> {
    let data = generate_manifold(config.n, config.d0, seed, config.noise_scale)?;
    let ds = data.to_labeled()?;
    let mut widths = vec![config.d0];
    widths.extend(&config.teacher_hidden);
    widths.push(3);
    let spec = NetworkSpec::relu(widths, seed);
    let outcome = train_teacher(
        &spec,
        &ds,
        &TeacherConfig {
            seed,
            ..config.teacher.clone()
        },
    )?;
    let layer = config.teacher_hidden.len();
    let kernel = centered_kernel(outcome.state.forward(&data.inputs)?.layer(layer))?;
    Ok(ManifoldTeacher {
        data,
        state: outcome.state,
        accuracy: outcome.train_accuracy,
        kernel,
    })
}

/// Students of both kinds after `epochs` epochs of layer-only distillation.
pub fn manifold_students(
    config: &BandExperimentConfig,
    teacher: &ManifoldTeacher,
    seed: u64,
    epochs: usize,
) -> Result<(KernelMatrix, KernelMatrix)> {
    let data = &teacher.data;
    let ds = data.to_labeled()?;
    let all: Vec<usize> = (0..data.len()).collect();
    let split = SplitPlan {
        train_pool: all.clone(),
        train: all.clone(),
        val: all.clone(),
        test: all,
        training_fraction: 1.0,
        seed,
    };
    let subtask = SubtaskSpec::new("relevant", vec![0, 1]);
    let bound = config.student_hidden.len();
    let k = *config.student_hidden.last().ok_or_else(|| {
        Error::Parameter("student needs at least one hidden layer".into())
    })?;
    let mut widths = vec![config.d0];
    widths.extend(&config.student_hidden);
    widths.push(3);
    let student_spec = NetworkSpec::relu(widths, seed);
    let teacher_layer = config.teacher_hidden.len();
    // the relevant directions are estimated where the subtask lives
    let middle: Vec<usize> = data.relevant_range.clone().collect();
    let subspaces = extract_subspaces(
        &teacher.state,
        &data.inputs.select_rows(&middle),
        &subtask,
        &[(teacher_layer, k)],
        SubspaceMethod::Prca,
        BetaMode::Auto,
        seed,
    )?;
    let base = DistillConfig {
        alpha: 1.0,
        layers: vec![bound],
        epochs,
        output_stage_epochs: Some(0),
        learning_rate: config.learning_rate,
        momentum: config.momentum,
        batch_size: config.batch_size,
        seed,
        training_mode: TrainingMode::Decoupled,
        ..DistillConfig::default()
    };
    let mut kernels = Vec::new();
    for method in [Method::Subdistill, Method::WbBaseline] {
        let task = DistillTask {
            teacher: &teacher.state,
            student_spec: &student_spec,
            dataset: &ds,
            split: &split,
            subtask: &SubtaskSpec::new("all", vec![0, 1, 2]),
            subspaces: (method == Method::Subdistill).then_some(&subspaces[..]),
        };
        let record = distill_decoupled(&task, &DistillConfig { method, ..base.clone() })?;
        let acts = record.student.forward(&data.inputs)?;
        kernels.push(centered_kernel(acts.layer(bound))?);
    }
    let wb = kernels.pop().expect("two kernels");
    let sd = kernels.pop().expect("two kernels");
    Ok((sd, wb))
}

/// Teacher, SubDistill student and `(W, b)` student for every seed, compared
/// on the relevant block of their centred kernels.
pub fn run_band_experiment(config: &BandExperimentConfig) -> Result<BandReport> {
    if config.seeds.is_empty() {
        return Err(Error::Parameter("band experiment needs at least one seed".into()));
    }
    let runs: Vec<_> = config
        .seeds
        .par_iter()
        .map(|&seed| -> Result<_> {
            let teacher = train_manifold_teacher(config, seed)?;
            let (sd, wb) = manifold_students(config, &teacher, seed, config.student_epochs)?;
            let r = teacher.data.relevant_range.clone();
            let scores = SeedScores {
                seed,
                teacher_accuracy: teacher.accuracy,
                subdistill_band: band_alignment_score(&teacher.kernel, &sd, r.clone())?,
                wb_band: band_alignment_score(&teacher.kernel, &wb, r.clone())?,
                teacher_mass: kernel_mass_fraction(&teacher.kernel, r.clone())?,
                subdistill_mass: kernel_mass_fraction(&sd, r.clone())?,
                wb_mass: kernel_mass_fraction(&wb, r.clone())?,
            };
            Ok((scores, teacher.kernel, sd, wb, r))
        })
        .collect::<Result<_>>()?;
    let scores = runs.iter().map(|r| r.0.clone()).collect();
    let first = runs.into_iter().next().map(|(_, t, sd, wb, r)| (t, sd, wb, r));
    let (teacher_kernel, subdistill_kernel, wb_kernel, relevant_range) =
        first.expect("at least one seed");
    Ok(BandReport {
        scores,
        relevant_range,
        teacher_kernel,
        subdistill_kernel,
        wb_kernel,
    })
}

/// Mean cosine similarity `κ(i, i+ℓ) / √(κ(i,i) κ(i+ℓ,i+ℓ))` at each lag `ℓ`
/// along the manifold. Pairs with a zero-norm point are skipped.
pub fn lag_profile(kernel: &KernelMatrix, lags: &[usize]) -> Vec<f64> {
    let n = kernel.len();
    let k = &kernel.values;
    lags.iter()
        .map(|&l| {
            let (sum, count) = (0..n.saturating_sub(l))
                .filter_map(|i| {
                    let d = (k[(i, i)] * k[(i + l, i + l)]).sqrt();
                    (d > 0.0).then(|| k[(i, i + l)] / d)
                })
                .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            if count == 0 {
                f64::NAN
            } else {
                sum / count as f64
            }
        })
        .collect()
}
