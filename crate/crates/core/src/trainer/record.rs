use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DistillConfig;
use crate::loss::LossReport;
use crate::model::save_checkpoint;
use crate::model::NetworkState;
use crate::numerics::Matrix;
use crate::subspace::{save_subspace, Subspace};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// Counted across all stages, starting at 1.
    pub epoch: usize,
    /// 0 for joint training; decoupled stages count from 1, the output stage last.
    pub stage: usize,
    /// Mean of the per-batch reports of the epoch.
    pub report: LossReport,
    pub val_accuracy: f64,
    pub max_orthogonality_defect: f64,
}

/// Outcome of one distillation run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: DistillConfig,
    pub epochs: Vec<EpochLog>,
    pub student: NetworkState,
    /// `(student layer, teacher layer)` per binding.
    pub bindings: Vec<(usize, usize)>,
    pub subspaces: Vec<Subspace>,
    /// Final adapter matrices (`V`, or `W` for the baseline), one per binding.
    pub adapters: Vec<Matrix>,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    /// Largest `‖VᵀV − I‖_F` seen after any update.
    pub max_orthogonality_defect: f64,
    pub final_orthogonality_defect: f64,
    pub wall_clock_secs: f64,
    pub dataset_digest: String,
    pub notes: Vec<String>,
}

/// The `run.json` document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub config: DistillConfig,
    pub bindings: Vec<(usize, usize)>,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub final_total_loss: f64,
    pub max_orthogonality_defect: f64,
    pub final_orthogonality_defect: f64,
    pub epochs_run: usize,
    /// Omitted in deterministic mode.
    pub wall_clock_secs: Option<f64>,
    pub dataset_digest: String,
    pub student_checkpoint: String,
    pub subspace_files: Vec<String>,
    pub notes: Vec<String>,
}

impl RunRecord {
    pub fn final_report(&self) -> Option<&LossReport> {
        self.epochs.last().map(|e| &e.report)
    }

    pub fn summary(&self, deterministic: bool) -> RunSummary {
        RunSummary {
            label: self.config.label(),
            config: self.config.clone(),
            bindings: self.bindings.clone(),
            train_accuracy: self.train_accuracy,
            val_accuracy: self.val_accuracy,
            test_accuracy: self.test_accuracy,
            final_total_loss: self.final_report().map_or(0.0, |r| r.total),
            max_orthogonality_defect: self.max_orthogonality_defect,
            final_orthogonality_defect: self.final_orthogonality_defect,
            epochs_run: self.epochs.len(),
            wall_clock_secs: (!deterministic).then_some(self.wall_clock_secs),
            dataset_digest: self.dataset_digest.clone(),
            student_checkpoint: "student.sdck".into(),
            subspace_files: self
                .subspaces
                .iter()
                .map(|s| format!("subspace_l{}.sdsu", s.layer_index))
                .collect(),
            notes: self.notes.clone(),
        }
    }

    /// `epoch,stage,output_loss,layer_loss_l*,alpha_l*,penalty_l*,total,val_accuracy`
    pub fn losses_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["epoch".to_string(), "stage".into(), "output_loss".into()];
        for (s, _) in &self.bindings {
            header.push(format!("layer_loss_l{s}"));
        }
        for (s, _) in &self.bindings {
            header.push(format!("alpha_l{s}"));
        }
        for (s, _) in &self.bindings {
            header.push(format!("penalty_l{s}"));
        }
        header.extend(["total".into(), "val_accuracy".into()]);
        w.write_record(&header).map_err(csv_err)?;
        for e in &self.epochs {
            let mut row = vec![
                e.epoch.to_string(),
                e.stage.to_string(),
                e.report.output_loss.to_string(),
            ];
            row.extend(e.report.per_layer_losses.iter().map(f64::to_string));
            row.extend(e.report.alphas.iter().map(f64::to_string));
            row.extend(e.report.penalty_terms.iter().map(f64::to_string));
            row.push(e.report.total.to_string());
            row.push(e.val_accuracy.to_string());
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Stream(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `run.json`, `losses.csv`, `student.sdck` and `subspace_l*.sdsu`.
    pub fn write_dir(&self, dir: impl AsRef<Path>, deterministic: bool) -> Result<RunSummary> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let summary = self.summary(deterministic);
        write_file(
            &dir.join("run.json"),
            serde_json::to_string_pretty(&summary)?.as_bytes(),
        )?;
        write_file(&dir.join("losses.csv"), self.losses_csv()?.as_bytes())?;
        save_checkpoint(&self.student, dir.join("student.sdck"))?;
        for s in &self.subspaces {
            save_subspace(s, dir.join(format!("subspace_l{}.sdsu", s.layer_index)))?;
        }
        Ok(summary)
    }
}

impl RunSummary {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path: PathBuf = dir.as_ref().join("run.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            context: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Stream(std::io::Error::other(e))
}
