use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::accuracy;
use super::distill::Sgd;
use crate::data::LabeledDataset;
use crate::loss::cross_entropy;
use crate::model::{NetworkSpec, NetworkState};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Seeds both the initialisation and the shuffling.
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TeacherOutcome {
    pub state: NetworkState,
    pub train_accuracy: f64,
    /// Mean cross-entropy per epoch.
    pub losses: Vec<f64>,
}

/// Mini-batch SGD on the cross-entropy of `dataset`, from a seeded initialisation.
pub fn train_teacher(
    spec: &NetworkSpec,
    dataset: &LabeledDataset,
    config: &TeacherConfig,
) -> Result<TeacherOutcome> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("teacher training set is empty".into()));
    }
    if spec.input_dim() != dataset.input_dim() || spec.output_dim() < dataset.num_classes() {
        return Err(Error::dim(format!(
            "network {:?} cannot fit {}-dimensional inputs with {} classes",
            spec.layer_widths,
            dataset.input_dim(),
            dataset.num_classes()
        )));
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::Parameter(
            "teacher batch size and learning rate must be positive".into(),
        ));
    }
    let mut spec = spec.clone();
    spec.seed = config.seed;
    let mut state = NetworkState::init(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut opt = Sgd::new(config.learning_rate, config.momentum);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let x = dataset.inputs.select_rows(batch);
            let y = dataset.select_labels(batch);
            let trace = state.forward(&x)?;
            let (loss, grad) = cross_entropy(trace.logits(), &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            total += loss * batch.len() as f64;
            let grads = state.backward(&trace, &grad, &[])?;
            let depth = state.depth();
            opt.step_layers(&mut state, &grads, 1..=depth);
        }
        losses.push(total / dataset.len() as f64);
    }
    let train_accuracy = accuracy(&state, &dataset.inputs, &dataset.labels)?;
    Ok(TeacherOutcome {
        state,
        train_accuracy,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::encode_checkpoint;
    use crate::numerics::Matrix;
    use rand::Rng;

    fn separable(n: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let x: [f64; 2] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let margin = x[0] + 0.5 * x[1];
            if margin.abs() < 0.1 {
                continue;
            }
            labels.push(usize::from(margin > 0.0));
            rows.push(x);
        }
        LabeledDataset::new(Matrix::from_rows(&rows), labels, "toy".into()).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let ds = separable(50, 1);
        let spec = NetworkSpec::relu(vec![2, 8, 2], 7);
        let cfg = TeacherConfig {
            epochs: 0,
            seed: 7,
            ..TeacherConfig::default()
        };
        let out = train_teacher(&spec, &ds, &cfg).unwrap();
        assert_eq!(out.state, NetworkState::init(&spec).unwrap());
    }

    #[test]
    fn fits_separable_data_deterministically() {
        let ds = separable(200, 2);
        let spec = NetworkSpec::relu(vec![2, 16, 2], 0);
        let cfg = TeacherConfig {
            epochs: 200,
            ..TeacherConfig::default()
        };
        let a = train_teacher(&spec, &ds, &cfg).unwrap();
        assert!(a.train_accuracy >= 0.99, "accuracy {}", a.train_accuracy);
        let b = train_teacher(&spec, &ds, &cfg).unwrap();
        assert_eq!(encode_checkpoint(&a.state), encode_checkpoint(&b.state));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let ds = separable(20, 3).subset(&[]);
        let spec = NetworkSpec::relu(vec![2, 4, 2], 0);
        assert!(train_teacher(&spec, &ds, &TeacherConfig::default()).is_err());
    }
}
