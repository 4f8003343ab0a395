//! Dense feedforward networks used as teachers and students.
//!
//! Every layer stores its weight as an `out x in` matrix, so a batch of row
//! vectors `X` maps to `X·Wᵀ + b`. Hidden layers apply their activation; the
//! final layer is always linear and produces logits.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the post-activation value.
    #[inline]
    fn derivative_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Architecture of a network: widths from input to logits, one activation per
/// hidden layer, and the initialisation seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layer_widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub seed: u64,
}

impl NetworkSpec {
    /// ReLU on every hidden layer.
    pub fn relu(layer_widths: Vec<usize>, seed: u64) -> Self {
        let hidden = layer_widths.len().saturating_sub(2);
        Self {
            layer_widths,
            activations: vec![Activation::Relu; hidden],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::Parameter(
                "a network needs at least an input and an output width".into(),
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::Parameter("layer widths must be positive".into()));
        }
        if self.activations.len() != self.layer_widths.len() - 2 {
            return Err(Error::Parameter(format!(
                "{} hidden layers but {} activations",
                self.layer_widths.len() - 2,
                self.activations.len()
            )));
        }
        Ok(())
    }

    /// Number of weight layers, `L`.
    pub fn depth(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    /// Activation applied after weight layer `l` (1-based); identity for the output.
    pub fn activation_of(&self, l: usize) -> Activation {
        if l == self.depth() {
            Activation::Identity
        } else {
            self.activations[l - 1]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Trainable parameters of a network together with its spec.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub spec: NetworkSpec,
    /// `layers[l - 1]` maps activation `l - 1` to activation `l`.
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTag {
    Teacher,
    Student,
}

/// Post-activation values of one layer over a batch. Layer 0 is the input.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    pub layer_index: usize,
    pub values: Matrix,
    pub model_tag: ModelTag,
}

impl ActivationBatch {
    pub fn new(layer_index: usize, values: Matrix, model_tag: ModelTag) -> Self {
        Self {
            layer_index,
            values,
            model_tag,
        }
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// One batch per layer `0..=L`; the last one holds the logits.
    pub activations: Vec<ActivationBatch>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Matrix {
        &self.activations.last().unwrap().values
    }

    pub fn layer(&self, l: usize) -> &Matrix {
        &self.activations[l].values
    }

    pub fn depth(&self) -> usize {
        self.activations.len() - 1
    }
}

/// Reverse-mode gradients of an implicit scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    /// `activations[l]` is the gradient with respect to activation `l`
    /// (index 0 is the input gradient).
    pub activations: Vec<Matrix>,
}

impl Gradients {
    pub fn input(&self) -> &Matrix {
        &self.activations[0]
    }
}

impl NetworkState {
    /// Seeded He-uniform initialisation in `±√(6/fan_in)`, zero biases.
    pub fn init(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                Layer {
                    weight: Matrix::from_fn(fan_out, fan_in, |_, _| {
                        rng.gen_range(-bound..bound)
                    }),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum()
    }

    /// Checks that parameter shapes agree with the spec and are finite.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.layers.len() != self.spec.depth() {
            return Err(Error::dim(format!(
                "{} layers for a spec of depth {}",
                self.layers.len(),
                self.spec.depth()
            )));
        }
        for (l, (layer, w)) in self
            .layers
            .iter()
            .zip(self.spec.layer_widths.windows(2))
            .enumerate()
        {
            if layer.weight.shape() != (w[1], w[0]) || layer.bias.len() != w[1] {
                return Err(Error::dim(format!(
                    "layer {} has weight {:?} and bias {}, spec wants {}x{}",
                    l + 1,
                    layer.weight.shape(),
                    layer.bias.len(),
                    w[1],
                    w[0]
                )));
            }
            if !layer.weight.is_finite() || layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite(format!("layer {} parameters", l + 1)));
            }
        }
        Ok(())
    }

    /// Applies weight layer `l` (1-based) to a batch of previous activations.
    pub fn layer_forward(&self, l: usize, input: &Matrix) -> Matrix {
        let layer = &self.layers[l - 1];
        let act = self.spec.activation_of(l);
        let mut z = input.matmul_t(&layer.weight);
        for i in 0..z.rows() {
            for (v, &b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
                *v = act.apply(*v + b);
            }
        }
        z
    }

    pub fn forward_tagged(&self, inputs: &Matrix, tag: ModelTag) -> Result<ForwardTrace> {
        if inputs.cols() != self.spec.input_dim() {
            return Err(Error::dim(format!(
                "inputs have {} features, network expects {}",
                inputs.cols(),
                self.spec.input_dim()
            )));
        }
        let mut activations = Vec::with_capacity(self.depth() + 1);
        activations.push(ActivationBatch::new(0, inputs.clone(), tag));
        for l in 1..=self.depth() {
            let next = self.layer_forward(l, &activations[l - 1].values);
            activations.push(ActivationBatch::new(l, next, tag));
        }
        Ok(ForwardTrace { activations })
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<ForwardTrace> {
        self.forward_tagged(inputs, ModelTag::Student)
    }

    /// Logits only.
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward(inputs)?.activations.pop().unwrap().values)
    }

    /// Exact gradients of the scalar whose logit cotangent is `logit_gradients`,
    /// with `extra_activation_gradients` injected at their layers on the way down.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        logit_gradients: &Matrix,
        extra_activation_gradients: &[(usize, Matrix)],
    ) -> Result<Gradients> {
        let depth = self.depth();
        if trace.depth() != depth {
            return Err(Error::dim("trace depth does not match network".to_string()));
        }
        if logit_gradients.shape() != trace.logits().shape() {
            return Err(Error::dim(format!(
                "logit gradients {:?} vs logits {:?}",
                logit_gradients.shape(),
                trace.logits().shape()
            )));
        }
        let mut extras: Vec<Option<Matrix>> = vec![None; depth + 1];
        for (l, g) in extra_activation_gradients {
            if *l > depth {
                return Err(Error::Index(format!(
                    "activation gradient for layer {l}, network has {depth} layers"
                )));
            }
            if g.shape() != trace.layer(*l).shape() {
                return Err(Error::dim(format!(
                    "extra gradient at layer {l} has shape {:?}, activation is {:?}",
                    g.shape(),
                    trace.layer(*l).shape()
                )));
            }
            match &mut extras[*l] {
                Some(acc) => acc.axpy(1.0, g),
                slot @ None => *slot = Some(g.clone()),
            }
        }

        let mut weights = vec![Matrix::zeros(0, 0); depth];
        let mut biases = vec![Vec::new(); depth];
        let mut act_grads = vec![Matrix::zeros(0, 0); depth + 1];

        let mut upstream = logit_gradients.clone();
        if let Some(e) = extras[depth].take() {
            upstream.axpy(1.0, &e);
        }
        for l in (1..=depth).rev() {
            let act = self.spec.activation_of(l);
            let out = trace.layer(l);
            let mut delta = upstream.clone();
            if act != Activation::Identity {
                for (d, &y) in delta.as_mut_slice().iter_mut().zip(out.as_slice()) {
                    *d *= act.derivative_at_output(y);
                }
            }
            weights[l - 1] = delta.t_matmul(trace.layer(l - 1));
            biases[l - 1] = delta.col_sums();
            act_grads[l] = upstream;
            let mut below = delta.matmul(&self.layers[l - 1].weight);
            if let Some(e) = extras[l - 1].take() {
                below.axpy(1.0, &e);
            }
            upstream = below;
        }
        act_grads[0] = upstream;
        Ok(Gradients {
            weights,
            biases,
            activations: act_grads,
        })
    }
}

/// Row-wise softmax of `logits / temperature`, stabilised by the row maximum.
pub fn softmax_probs(logits: &Matrix, temperature: f64) -> Result<Matrix> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i), temperature);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Index of the largest entry of each row (lowest index on ties).
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.row_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}
