//! Distillation drivers: joint optimisation of the composite objective,
//! decoupled layer-wise training, teacher training and the ablation suite.

mod distill;
mod record;
mod suite;
mod teacher;

use serde::{Deserialize, Serialize};

use crate::loss::{OrthoMode, DEFAULT_PENALTY_WEIGHT};
use crate::model::{argmax_rows, NetworkState};
use crate::numerics::Matrix;
use crate::subspace::BetaMode;
use crate::{Error, Result};

pub use distill::{
    distill, distill_decoupled, distill_joint, extract_subspaces, teacher_layer_for, DistillTask,
};
pub use record::{EpochLog, RunRecord, RunSummary};
pub use suite::{
    alpha_sweep, league_table_csv, mean_and_stderr, run_ablation_suite, worker_threads, AlphaSweep,
    SuiteCell, SuiteRow, ALPHA_GRID,
};
pub use teacher::{train_teacher, TeacherConfig, TeacherOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Subdistill,
    WbBaseline,
    OutputOnly,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Subdistill => "subdistill",
            Method::WbBaseline => "wb_baseline",
            Method::OutputOnly => "output_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Joint,
    Decoupled,
}

/// A single switch of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// `μ_θ := 0`
    NoCentering,
    /// `α_l := α`
    NoNormalization,
    /// `U := I`, tall `V` kept orthonormal by the soft penalty.
    NoDimredV1,
    /// `U := I`, tall `V` on the Stiefel manifold.
    NoDimredV2,
    PcaSubspace,
    RandomSubspace,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::NoCentering,
        Ablation::NoNormalization,
        Ablation::NoDimredV1,
        Ablation::NoDimredV2,
        Ablation::PcaSubspace,
        Ablation::RandomSubspace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoCentering => "no_centering",
            Ablation::NoNormalization => "no_normalization",
            Ablation::NoDimredV1 => "no_dimred_v1",
            Ablation::NoDimredV2 => "no_dimred_v2",
            Ablation::PcaSubspace => "pca_subspace",
            Ablation::RandomSubspace => "random_subspace",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }
}

/// Everything that defines one distillation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub alpha: f64,
    pub temperature: f64,
    /// Student hidden layers that receive a layer loss.
    pub layers: Vec<usize>,
    pub method: Method,
    pub ablations: Vec<Ablation>,
    pub training_fraction: f64,
    pub epochs: usize,
    /// Epochs of the final output-only stage in decoupled mode; defaults to `epochs`.
    pub output_stage_epochs: Option<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub training_mode: TrainingMode,
    pub orthogonality: OrthoMode,
    pub beta: BetaMode,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            temperature: 1.0,
            layers: vec![1, 2, 3, 4],
            method: Method::Subdistill,
            ablations: Vec::new(),
            training_fraction: 1.0,
            epochs: 30,
            output_stage_epochs: None,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
            training_mode: TrainingMode::Joint,
            orthogonality: OrthoMode::Stiefel,
            beta: BetaMode::Auto,
        }
    }
}

impl DistillConfig {
    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    pub fn validate(&self) -> Result<()> {
        let param = |msg: String| Err(Error::Parameter(msg));
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return param(format!("alpha must be a non-negative number, got {}", self.alpha));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return param(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.training_fraction > 0.0 && self.training_fraction <= 1.0) {
            return param(format!(
                "training fraction must lie in (0, 1], got {}",
                self.training_fraction
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return param(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return param(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size < 2 {
            return param("batch size must be at least 2 for batch centring".into());
        }
        if let OrthoMode::SoftPenalty { weight } = self.orthogonality {
            if !(weight > 0.0) || !weight.is_finite() {
                return param(format!("penalty weight must be positive, got {weight}"));
            }
        }
        if let BetaMode::Fixed(b) = self.beta {
            if !(b > 0.0) || !b.is_finite() {
                return param(format!("β must be positive, got {b}"));
            }
        }
        let mut sorted = self.layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.layers.len() || sorted.first() == Some(&0) {
            return param(format!("layers {:?} must be distinct and ≥ 1", self.layers));
        }
        if !self.ablations.is_empty() && self.method != Method::Subdistill {
            return param(format!(
                "ablations only apply to subdistill, not {}",
                self.method.name()
            ));
        }
        let swaps = [
            Ablation::NoDimredV1,
            Ablation::NoDimredV2,
            Ablation::PcaSubspace,
            Ablation::RandomSubspace,
        ]
        .iter()
        .filter(|&&a| self.has(a))
        .count();
        if swaps > 1 {
            return param("at most one subspace replacement ablation may be set".into());
        }
        Ok(())
    }

    /// Layers sorted ascending; empty for output-only runs.
    pub fn bound_layers(&self) -> Vec<usize> {
        if self.method == Method::OutputOnly {
            return Vec::new();
        }
        let mut l = self.layers.clone();
        l.sort_unstable();
        l
    }

    /// Orthogonality handling of the adapter, including the two
    /// no-dimensionality-reduction variants that fix it.
    pub fn effective_orthogonality(&self) -> OrthoMode {
        if self.has(Ablation::NoDimredV1) {
            OrthoMode::SoftPenalty {
                weight: DEFAULT_PENALTY_WEIGHT,
            }
        } else if self.has(Ablation::NoDimredV2) {
            OrthoMode::Stiefel
        } else {
            self.orthogonality
        }
    }

    /// Short human-readable label, e.g. `subdistill+no_centering`.
    pub fn label(&self) -> String {
        let mut s = self.method.name().to_string();
        for a in &self.ablations {
            s.push('+');
            s.push_str(a.name());
        }
        s
    }
}

/// Fraction of rows whose arg-max logit equals the label.
pub fn accuracy(state: &NetworkState, inputs: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("accuracy over an empty set".into()));
    }
    let predicted = argmax_rows(&state.predict(inputs)?);
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = DistillConfig::default();
        c.validate().unwrap();
        c.ablations = vec![Ablation::PcaSubspace, Ablation::RandomSubspace];
        assert!(c.validate().is_err());
        c.ablations = vec![Ablation::NoCentering];
        c.method = Method::WbBaseline;
        assert!(c.validate().is_err());
        c = DistillConfig {
            layers: vec![1, 1],
            ..DistillConfig::default()
        };
        assert!(c.validate().is_err());
        c.layers = vec![2, 1];
        assert_eq!(c.bound_layers(), vec![1, 2]);
        c.method = Method::OutputOnly;
        assert!(c.bound_layers().is_empty());
    }

    #[test]
    fn config_toml_round_trip() {
        let c = DistillConfig {
            ablations: vec![Ablation::NoDimredV1],
            orthogonality: OrthoMode::SoftPenalty { weight: 10.0 },
            beta: BetaMode::Fixed(2.0),
            ..DistillConfig::default()
        };
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<DistillConfig>(&text).unwrap(), c);
        assert!(toml::from_str::<DistillConfig>("alpah = 1.0").is_err());
        assert_eq!(
            c.effective_orthogonality(),
            OrthoMode::SoftPenalty { weight: 1000.0 }
        );
    }
}
