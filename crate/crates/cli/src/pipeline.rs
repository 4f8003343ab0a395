use std::path::{Path, PathBuf};

use subdistill::data::{apply_subtask, load_dataset, load_subtask, make_split, LabeledDataset, SplitPlan};
use subdistill::model::{load_checkpoint, NetworkSpec, NetworkState};
use subdistill::subspace::{load_subspace, Subspace, SubtaskSpec};
use subdistill::trainer::{teacher_layer_for, DistillConfig, DistillTask};

use crate::config::RunConfigFile;
use crate::error::CliError;

pub fn load_full_dataset(cfg: &RunConfigFile) -> Result<LabeledDataset, CliError> {
    let source = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| CliError::Input("config has no [dataset] section".into()))?;
    Ok(load_dataset(source)?)
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::input_path(path, format!("{what} not found")))
    }
}

/// Everything a distillation run on the configured subtask needs.
pub struct Context {
    pub teacher: NetworkState,
    pub subtask: SubtaskSpec,
    /// Subtask rows relabelled densely.
    pub dataset: LabeledDataset,
    /// Split of the subtask rows at training fraction one.
    pub split: SplitPlan,
    pub student_spec: NetworkSpec,
    pub subspaces: Option<Vec<Subspace>>,
}

impl Context {
    pub fn load(cfg: &RunConfigFile) -> Result<Self, CliError> {
        let teacher_path = &cfg.teacher()?.checkpoint;
        require_file(teacher_path, "teacher checkpoint")?;
        let teacher = load_checkpoint(teacher_path)?;
        let subtask_path = cfg
            .subtask
            .as_ref()
            .ok_or_else(|| CliError::Input("config names no subtask file".into()))?;
        require_file(subtask_path, "subtask file")?;
        let subtask = load_subtask(subtask_path)?;
        let full = load_full_dataset(cfg)?;
        let dataset = apply_subtask(&full, &subtask)?;
        let split = make_split(&dataset, cfg.split, 1.0, cfg.split_seed)?;
        let mut widths = vec![dataset.input_dim()];
        widths.extend(&cfg.student()?.hidden);
        widths.push(subtask.len());
        let student_spec = NetworkSpec::relu(widths, cfg.distill.seed);
        Ok(Self {
            teacher,
            subtask,
            dataset,
            split,
            student_spec,
            subspaces: None,
        })
    }

    pub fn task(&self) -> DistillTask<'_> {
        DistillTask {
            teacher: &self.teacher,
            student_spec: &self.student_spec,
            dataset: &self.dataset,
            split: &self.split,
            subtask: &self.subtask,
            subspaces: self.subspaces.as_deref(),
        }
    }

    pub fn student_hidden(&self) -> usize {
        self.student_spec.depth() - 1
    }

    /// `(teacher layer, K)` for each bound student layer of `config`.
    pub fn requests(&self, config: &DistillConfig) -> Result<Vec<(usize, usize)>, CliError> {
        let teacher_hidden = self.teacher.depth() - 1;
        config
            .bound_layers()
            .iter()
            .map(|&s| {
                let t = teacher_layer_for(s, self.student_hidden(), teacher_hidden)?;
                Ok((t, self.student_spec.layer_widths[s]))
            })
            .collect()
    }

    /// Loads `subspace_l{t}.sdsu` from `dir` for every binding of `config`.
    pub fn attach_subspaces(&mut self, dir: &Path, config: &DistillConfig) -> Result<(), CliError> {
        let mut out = Vec::new();
        for (t, _) in self.requests(config)? {
            let path = subspace_path(dir, t);
            require_file(&path, "subspace file")?;
            out.push(load_subspace(&path)?);
        }
        self.subspaces = Some(out);
        Ok(())
    }
}

pub fn subspace_path(dir: &Path, teacher_layer: usize) -> PathBuf {
    dir.join(format!("subspace_l{teacher_layer}.sdsu"))
}

/// Timestamp for SVG metadata, or nothing in deterministic mode.
pub fn timestamp(deterministic: bool) -> Option<String> {
    if deterministic {
        return None;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .ok()
        .map(|d| format!("unix {}", d.as_secs()))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Comma-separated layer list; `none` or an empty string selects no layer.
pub fn parse_layers(s: &str) -> Result<Vec<usize>, CliError> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Input(format!("bad layer id '{p}' in '{s}'")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_lists() {
        assert_eq!(parse_layers("1,2").unwrap(), vec![1, 2]);
        assert_eq!(parse_layers(" 3 ").unwrap(), vec![3]);
        assert!(parse_layers("none").unwrap().is_empty());
        assert!(parse_layers("1,x").is_err());
    }
}
