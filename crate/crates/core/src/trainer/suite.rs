use rayon::prelude::*;

use super::distill::{distill, DistillTask};
use super::record::RunRecord;
use super::{Ablation, DistillConfig};
use crate::{Error, Result};

/// Candidate values of the global layer-loss weight.
pub const ALPHA_GRID: [f64; 5] = [1e-2, 1e-1, 1.0, 1e1, 1e2];

/// Worker count: `SUBDISTILL_THREADS` when set to a positive integer, else
/// the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("SUBDISTILL_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run_parallel<T: Send>(
    threads: usize,
    jobs: Vec<T>,
    f: impl Fn(T) -> SuiteCell + Sync + Send,
) -> Vec<SuiteCell> {
    match rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
    {
        Ok(pool) => pool.install(|| jobs.into_par_iter().map(&f).collect()),
        Err(_) => jobs.into_iter().map(f).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct SuiteRow {
    pub name: String,
    pub config: DistillConfig,
}

/// One (row, seed) run; failures are kept as `(error kind, message)`.
#[derive(Debug, Clone)]
pub struct SuiteCell {
    pub row: String,
    pub seed: u64,
    pub outcome: std::result::Result<RunRecord, (String, String)>,
}

impl SuiteCell {
    pub fn record(&self) -> Option<&RunRecord> {
        self.outcome.as_ref().ok()
    }
}

fn subset_name(layers: &[usize]) -> String {
    if layers.is_empty() {
        "layers_none".into()
    } else {
        let ids: Vec<String> = layers.iter().map(usize::to_string).collect();
        format!("layers_{}", ids.join("_"))
    }
}

/// The base configuration, one row per single ablation, one per layer subset.
pub fn suite_rows(base: &DistillConfig, ablations: &[Ablation], subsets: &[Vec<usize>]) -> Vec<SuiteRow> {
    let mut rows = vec![SuiteRow {
        name: base.label(),
        config: base.clone(),
    }];
    for &a in ablations {
        let mut c = base.clone();
        if !c.ablations.contains(&a) {
            c.ablations.push(a);
        }
        rows.push(SuiteRow {
            name: c.label(),
            config: c,
        });
    }
    for s in subsets {
        rows.push(SuiteRow {
            name: subset_name(s),
            config: DistillConfig {
                layers: s.clone(),
                ..base.clone()
            },
        });
    }
    rows
}

/// Every row of [`suite_rows`] for every seed; a failing cell is recorded and
/// the others still run.
pub fn run_ablation_suite(
    task: &DistillTask<'_>,
    base: &DistillConfig,
    ablations: &[Ablation],
    subsets: &[Vec<usize>],
    seeds: &[u64],
    threads: usize,
) -> Vec<SuiteCell> {
    let jobs: Vec<(String, DistillConfig)> = suite_rows(base, ablations, subsets)
        .into_iter()
        .flat_map(|row| {
            seeds.iter().map(move |&seed| {
                (
                    row.name.clone(),
                    DistillConfig {
                        seed,
                        ..row.config.clone()
                    },
                )
            })
        })
        .collect();
    run_parallel(threads, jobs, |(row, config)| SuiteCell {
        seed: config.seed,
        outcome: distill(task, &config).map_err(|e| (e.kind().to_string(), e.to_string())),
        row,
    })
}

/// Mean and standard error (sample standard deviation over `√n`).
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// One line per row in first-seen order: mean and standard error of the
/// validation and test accuracies, plus the larger of the two errors.
pub fn league_table_csv(cells: &[SuiteCell]) -> String {
    let mut rows: Vec<&str> = Vec::new();
    for c in cells {
        if !rows.contains(&c.row.as_str()) {
            rows.push(&c.row);
        }
    }
    let mut out = String::from(
        "row,runs,failed,val_accuracy_mean,val_accuracy_stderr,test_accuracy_mean,test_accuracy_stderr,largest_stderr\n",
    );
    for row in rows {
        let group: Vec<&SuiteCell> = cells.iter().filter(|c| c.row == row).collect();
        let ok: Vec<&RunRecord> = group.iter().filter_map(|c| c.record()).collect();
        let val: Vec<f64> = ok.iter().map(|r| r.val_accuracy).collect();
        let test: Vec<f64> = ok.iter().map(|r| r.test_accuracy).collect();
        let (vm, vs) = mean_and_stderr(&val);
        let (tm, ts) = mean_and_stderr(&test);
        out.push_str(&format!(
            "{row},{},{},{vm},{vs},{tm},{ts},{}\n",
            ok.len(),
            group.len() - ok.len(),
            vs.max(ts)
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct AlphaSweep {
    pub cells: Vec<SuiteCell>,
    pub alphas: Vec<f64>,
    /// Grid value with the highest validation accuracy; ties go to the smaller α.
    pub selected_alpha: f64,
}

impl AlphaSweep {
    pub fn selected(&self) -> Option<&RunRecord> {
        self.alphas
            .iter()
            .position(|&a| a == self.selected_alpha)
            .and_then(|i| self.cells[i].record())
    }
}

/// Runs `base` once per grid value and selects α on validation accuracy.
pub fn alpha_sweep(
    task: &DistillTask<'_>,
    base: &DistillConfig,
    grid: &[f64],
    threads: usize,
) -> Result<AlphaSweep> {
    let jobs: Vec<DistillConfig> = grid
        .iter()
        .map(|&alpha| DistillConfig {
            alpha,
            ..base.clone()
        })
        .collect();
    let cells = run_parallel(threads, jobs, |config| SuiteCell {
        row: format!("alpha={}", config.alpha),
        seed: config.seed,
        outcome: distill(task, &config).map_err(|e| (e.kind().to_string(), e.to_string())),
    });
    let mut best: Option<(f64, f64)> = None;
    for (&alpha, cell) in grid.iter().zip(&cells) {
        if let Some(r) = cell.record() {
            if best.is_none_or(|(_, acc)| r.val_accuracy > acc) {
                best = Some((alpha, r.val_accuracy));
            }
        }
    }
    let (selected_alpha, _) = best.ok_or_else(|| {
        Error::Parameter("every cell of the α sweep failed".into())
    })?;
    Ok(AlphaSweep {
        cells,
        alphas: grid.to_vec(),
        selected_alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stderr_matches_hand_computation() {
        let (m, s) = mean_and_stderr(&[0.5, 0.7, 0.9]);
        assert!((m - 0.7).abs() < 1e-15);
        // sample std 0.2, over √3
        assert!((s - 0.2 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_and_stderr(&[0.3]), (0.3, 0.0));
    }

    #[test]
    fn rows_cover_base_ablations_and_subsets() {
        let rows = suite_rows(
            &DistillConfig::default(),
            &[Ablation::NoCentering, Ablation::PcaSubspace],
            &[vec![], vec![1, 2]],
        );
        let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "subdistill",
                "subdistill+no_centering",
                "subdistill+pca_subspace",
                "layers_none",
                "layers_1_2"
            ]
        );
    }
}
