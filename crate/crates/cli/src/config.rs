use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use subdistill::data::DatasetSource;
use subdistill::synth::BandExperimentConfig;
use subdistill::trainer::{DistillConfig, TeacherConfig};

use crate::error::CliError;

/// Name of the resolved-config copy written into every output directory.
pub const RESOLVED_NAME: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSource>,
    /// Subtask definition file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtask: Option<PathBuf>,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<TeacherSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student: Option<StudentSection>,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subspaces: Option<SubspaceSection>,
    #[serde(default)]
    pub suite: SuiteSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub synth: BandExperimentConfig,
}

fn default_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    pub checkpoint: PathBuf,
    /// Hidden widths; only needed to train the teacher.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub training: TeacherConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSection {
    pub hidden: Vec<usize>,
}

/// Precomputed subspace files to use instead of extracting them per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubspaceSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteSection {
    pub seeds: Vec<u64>,
    pub ablations: Vec<String>,
    pub layer_subsets: Vec<Vec<usize>>,
}

impl Default for SuiteSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            ablations: Vec::new(),
            layer_subsets: vec![vec![], vec![1], vec![1, 2], vec![1, 2, 3], vec![1, 2, 3, 4]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Side length of the square patches used for attribution correlation.
    pub patch: usize,
    /// Test images attributed per run.
    pub samples: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            patch: 8,
            samples: 50,
        }
    }
}

impl RunConfigFile {
    /// Parses `path` and makes every relative path relative to its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input_path(path, format!("cannot read config: {e}")))?;
        let mut cfg: RunConfigFile = toml::from_str(&text)
            .map_err(|e| CliError::input_path(path, format!("invalid config: {e}")))?;
        let base = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let base = std::path::absolute(&base).unwrap_or(base);
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = normalize(&base.join(&*p));
            }
        };
        fix(&mut self.output_dir);
        if let Some(s) = &mut self.subtask {
            fix(s);
        }
        match &mut self.dataset {
            Some(DatasetSource::CsvLabeled { path }) => fix(path),
            Some(DatasetSource::IdxPair { images, labels }) => {
                fix(images);
                fix(labels);
            }
            None => {}
        }
        if let Some(t) = &mut self.teacher {
            fix(&mut t.checkpoint);
        }
        if let Some(s) = &mut self.subspaces {
            fix(&mut s.dir);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(RESOLVED_NAME);
        std::fs::write(&path, self.to_toml()).map_err(|e| CliError::io(&path, e))
    }

    pub fn teacher(&self) -> Result<&TeacherSection, CliError> {
        self.teacher
            .as_ref()
            .ok_or_else(|| CliError::Input("config has no [teacher] section".into()))
    }

    pub fn student(&self) -> Result<&StudentSection, CliError> {
        self.student
            .as_ref()
            .ok_or_else(|| CliError::Input("config has no [student] section".into()))
    }
}

/// Drops `.` and folds `..` lexically so resolved copies stay readable.
fn normalize(p: &Path) -> PathBuf {
    use std::path::Component;
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_dir = "out"
subtask = "sub/subtask.toml"

[dataset]
format = "csv_labeled"
path = "../data.csv"

[teacher]
checkpoint = "t.sdck"
hidden = [8, 8]

[student]
hidden = [4]

[distill]
alpha = 0.5
layers = [1]
"#;

    #[test]
    fn paths_resolve_against_the_config_directory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_dir = dir.path().join("cfg");
        std::fs::create_dir_all(&cfg_dir).unwrap();
        let path = cfg_dir.join("run.toml");
        std::fs::write(&path, MINIMAL).unwrap();
        let cfg = RunConfigFile::load(&path).unwrap();
        assert_eq!(cfg.output_dir, cfg_dir.join("out"));
        assert_eq!(cfg.subtask.as_deref(), Some(cfg_dir.join("sub/subtask.toml").as_path()));
        assert_eq!(
            cfg.dataset,
            Some(DatasetSource::CsvLabeled {
                path: dir.path().join("data.csv")
            })
        );
        assert_eq!(cfg.distill.alpha, 0.5);
        assert_eq!(cfg.split, [0.6, 0.2, 0.2]);
    }

    #[test]
    fn resolved_copy_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, MINIMAL).unwrap();
        let cfg = RunConfigFile::load(&path).unwrap();
        cfg.write_resolved(dir.path()).unwrap();
        let again = RunConfigFile::load(&dir.path().join(RESOLVED_NAME)).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, format!("{MINIMAL}\nlearning_rat = 3\n")).unwrap();
        assert!(RunConfigFile::load(&path).is_err());
        std::fs::write(&path, MINIMAL.replace("alpha = 0.5", "alpha = 0.5\nalpah = 1")).unwrap();
        assert!(RunConfigFile::load(&path).is_err());
    }
}
