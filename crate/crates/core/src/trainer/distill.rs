use std::ops::RangeInclusive;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::record::{EpochLog, RunRecord};
use super::{accuracy, Ablation, DistillConfig, Method, TrainingMode};
use crate::data::{LabeledDataset, SplitPlan};
use crate::loss::{
    alpha_l_normalizer, orthogonality_penalty, output_kl, subdistill_layer_loss, wb_layer_loss,
    Adapter, LayerBinding, LossReport, MuPolicy, OrthoMode, WbAdapter,
};
use crate::model::{ActivationBatch, Gradients, ModelTag, NetworkSpec, NetworkState};
use crate::numerics::{orthogonality_defect, qr_orthonormalize, Matrix};
use crate::subspace::{
    pca_subspace, prca_subspace, random_subspace, response_vectors, BetaMode, Subspace,
    SubspaceMethod, SubtaskSpec,
};
use crate::{Error, Result};

const DIVERGENCE_LIMIT: f64 = 1e6;

/// Plain SGD with optional heavy-ball momentum, one velocity buffer per slot.
pub(crate) struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub(crate) fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub(crate) fn step(&mut self, slot: usize, param: &mut [f64], grad: &[f64]) {
        if self.momentum == 0.0 {
            for (p, g) in param.iter_mut().zip(grad) {
                *p -= self.lr * g;
            }
            return;
        }
        if self.velocity.len() <= slot {
            self.velocity.resize(slot + 1, Vec::new());
        }
        let v = &mut self.velocity[slot];
        if v.is_empty() {
            v.resize(grad.len(), 0.0);
        }
        for ((p, g), v) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
    }

    pub(crate) fn step_layers(
        &mut self,
        state: &mut NetworkState,
        grads: &Gradients,
        layers: RangeInclusive<usize>,
    ) {
        for l in layers {
            let layer = &mut state.layers[l - 1];
            self.step(2 * l, layer.weight.as_mut_slice(), grads.weights[l - 1].as_slice());
            self.step(2 * l + 1, &mut layer.bias, &grads.biases[l - 1]);
        }
    }
}

/// Teacher layer paired with a student hidden layer: equal indices below the
/// student's last hidden layer, last hidden layer to last hidden layer.
pub fn teacher_layer_for(
    student_layer: usize,
    student_hidden: usize,
    teacher_hidden: usize,
) -> Result<usize> {
    if student_layer == 0 || student_layer > student_hidden {
        return Err(Error::Index(format!(
            "student layer {student_layer} is not a hidden layer (1..={student_hidden})"
        )));
    }
    if student_hidden > teacher_hidden {
        return Err(Error::Parameter(format!(
            "student has {student_hidden} hidden layers, teacher only {teacher_hidden}"
        )));
    }
    Ok(if student_layer == student_hidden {
        teacher_hidden
    } else {
        student_layer
    })
}

/// Inputs shared by every run on one subtask.
#[derive(Debug, Clone, Copy)]
pub struct DistillTask<'a> {
    pub teacher: &'a NetworkState,
    pub student_spec: &'a NetworkSpec,
    /// Subtask rows, labels relabelled densely in subtask order.
    pub dataset: &'a LabeledDataset,
    /// Split over `dataset`; the run's training fraction is applied on top.
    pub split: &'a SplitPlan,
    /// Subtask expressed in teacher class ids.
    pub subtask: &'a SubtaskSpec,
    /// Precomputed subspaces, one per bound layer in ascending order.
    pub subspaces: Option<&'a [Subspace]>,
}

/// Relevant subspaces of the requested `(teacher layer, K)` pairs.
pub fn extract_subspaces(
    teacher: &NetworkState,
    inputs: &Matrix,
    subtask: &SubtaskSpec,
    requests: &[(usize, usize)],
    method: SubspaceMethod,
    beta: BetaMode,
    seed: u64,
) -> Result<Vec<Subspace>> {
    let trace = teacher.forward_tagged(inputs, ModelTag::Teacher)?;
    let mut out = Vec::with_capacity(requests.len());
    for &(layer, k) in requests {
        if layer == 0 || layer >= teacher.depth() {
            return Err(Error::Index(format!(
                "teacher layer {layer} is not a hidden layer"
            )));
        }
        let acts = trace.activations[layer].clone();
        let s = match method {
            SubspaceMethod::Prca => {
                let responses = response_vectors(teacher, inputs, layer, subtask)?;
                prca_subspace(&acts, &responses, k, beta)?
            }
            SubspaceMethod::Pca => pca_subspace(&acts, k)?,
            SubspaceMethod::Random => random_subspace(
                acts.dim(),
                k,
                seed ^ (0x5eed_0000 + layer as u64),
                acts.values.col_means(),
                layer,
            )?,
        };
        out.push(s);
    }
    Ok(out)
}

/// Dispatches on `config.training_mode`.
pub fn distill(task: &DistillTask<'_>, config: &DistillConfig) -> Result<RunRecord> {
    match config.training_mode {
        TrainingMode::Joint => distill_joint(task, config),
        TrainingMode::Decoupled => distill_decoupled(task, config),
    }
}

enum Term {
    Sub(LayerBinding),
    Wb {
        adapter: WbAdapter,
        alpha_l: f64,
        teacher_layer: usize,
        student_layer: usize,
    },
}

impl Term {
    fn student_layer(&self) -> usize {
        match self {
            Term::Sub(b) => b.student_layer,
            Term::Wb { student_layer, .. } => *student_layer,
        }
    }

    fn teacher_layer(&self) -> usize {
        match self {
            Term::Sub(b) => b.teacher_layer,
            Term::Wb { teacher_layer, .. } => *teacher_layer,
        }
    }

    fn alpha(&self) -> f64 {
        match self {
            Term::Sub(b) => b.alpha_l,
            Term::Wb { alpha_l, .. } => *alpha_l,
        }
    }

    fn defect(&self) -> f64 {
        match self {
            Term::Sub(b) => orthogonality_defect(&b.adapter.v),
            Term::Wb { .. } => 0.0,
        }
    }

    fn adapter_matrix(&self) -> Matrix {
        match self {
            Term::Sub(b) => b.adapter.v.clone(),
            Term::Wb { adapter, .. } => adapter.w.clone(),
        }
    }
}

struct Prepared {
    train_x: Matrix,
    val_x: Matrix,
    val_y: Vec<usize>,
    test_x: Matrix,
    test_y: Vec<usize>,
    train_y: Vec<usize>,
    teacher_logits: Matrix,
    /// Teacher activations on the training rows, one per term.
    teacher_acts: Vec<Matrix>,
    subspaces: Vec<Subspace>,
    terms: Vec<Term>,
}

fn prepare(task: &DistillTask<'_>, config: &DistillConfig, stagewise: bool) -> Result<Prepared> {
    config.validate()?;
    task.student_spec.validate()?;
    task.teacher.validate()?;
    task.subtask.validate(task.teacher.spec.output_dim())?;
    let ds = task.dataset;
    if task.student_spec.input_dim() != ds.input_dim()
        || task.teacher.spec.input_dim() != ds.input_dim()
    {
        return Err(Error::dim("teacher, student and dataset input widths differ"));
    }
    if task.student_spec.output_dim() != task.subtask.len() {
        return Err(Error::dim(format!(
            "student has {} outputs for a {}-class subtask",
            task.student_spec.output_dim(),
            task.subtask.len()
        )));
    }
    let split = task.split.with_fraction(config.training_fraction)?;
    if split.train.len() < 2 || split.val.is_empty() || split.test.is_empty() {
        return Err(Error::EmptyInput(format!(
            "split has {} train, {} val and {} test rows",
            split.train.len(),
            split.val.len(),
            split.test.len()
        )));
    }
    let train_x = ds.inputs.select_rows(&split.train);
    let trace = task.teacher.forward_tagged(&train_x, ModelTag::Teacher)?;
    let teacher_logits = task.subtask.slice_logits(trace.logits());

    let student_hidden = task.student_spec.depth() - 1;
    let teacher_hidden = task.teacher.depth() - 1;
    let layers = config.bound_layers();
    let pairs: Vec<(usize, usize)> = layers
        .iter()
        .map(|&s| Ok((s, teacher_layer_for(s, student_hidden, teacher_hidden)?)))
        .collect::<Result<_>>()?;
    let teacher_acts: Vec<Matrix> = pairs
        .iter()
        .map(|&(_, t)| trace.layer(t).clone())
        .collect();
    let width = |s: usize| task.student_spec.layer_widths[s];
    let alpha = if stagewise { 1.0 } else { config.alpha };
    let adapter_seed = |s: usize| config.seed ^ (0xada9_0000 + s as u64);

    let mut subspaces = Vec::new();
    let mut terms = Vec::new();
    match config.method {
        Method::OutputOnly => {}
        Method::WbBaseline => {
            for (&(s, t), acts) in pairs.iter().zip(&teacher_acts) {
                let full = Subspace::identity(acts.col_means(), t);
                terms.push(Term::Wb {
                    adapter: WbAdapter::init(acts.cols(), width(s), adapter_seed(s)),
                    alpha_l: alpha_l_normalizer(&full, [acts], alpha)?,
                    teacher_layer: t,
                    student_layer: s,
                });
            }
        }
        Method::Subdistill => {
            let no_dimred =
                config.has(Ablation::NoDimredV1) || config.has(Ablation::NoDimredV2);
            subspaces = if no_dimred {
                pairs
                    .iter()
                    .zip(&teacher_acts)
                    .map(|(&(_, t), a)| Subspace::identity(a.col_means(), t))
                    .collect()
            } else {
                let method = if config.has(Ablation::PcaSubspace) {
                    SubspaceMethod::Pca
                } else if config.has(Ablation::RandomSubspace) {
                    SubspaceMethod::Random
                } else {
                    SubspaceMethod::Prca
                };
                match task.subspaces {
                    Some(pre) => {
                        check_precomputed(pre, &pairs, method, &width)?;
                        pre.to_vec()
                    }
                    None => {
                        let requests: Vec<(usize, usize)> =
                            pairs.iter().map(|&(s, t)| (t, width(s))).collect();
                        extract_subspaces(
                            task.teacher,
                            &train_x,
                            task.subtask,
                            &requests,
                            method,
                            config.beta,
                            config.seed,
                        )?
                    }
                }
            };
            let mu_policy = if config.has(Ablation::NoCentering) {
                MuPolicy::Zero
            } else {
                MuPolicy::BatchMean
            };
            for ((&(s, t), sub), acts) in pairs.iter().zip(&subspaces).zip(&teacher_acts) {
                let alpha_l = if config.has(Ablation::NoNormalization) {
                    alpha
                } else {
                    alpha_l_normalizer(sub, [acts], alpha)?
                };
                let adapter = Adapter::init(
                    sub.k,
                    width(s),
                    config.effective_orthogonality(),
                    mu_policy,
                    adapter_seed(s),
                )?;
                let binding = LayerBinding {
                    teacher_layer: t,
                    student_layer: s,
                    subspace: sub.clone(),
                    adapter,
                    alpha_l,
                };
                binding.validate(width(s))?;
                terms.push(Term::Sub(binding));
            }
        }
    }

    Ok(Prepared {
        train_y: ds.select_labels(&split.train),
        val_x: ds.inputs.select_rows(&split.val),
        val_y: ds.select_labels(&split.val),
        test_x: ds.inputs.select_rows(&split.test),
        test_y: ds.select_labels(&split.test),
        train_x,
        teacher_logits,
        teacher_acts,
        subspaces,
        terms,
    })
}

fn check_precomputed(
    pre: &[Subspace],
    pairs: &[(usize, usize)],
    method: SubspaceMethod,
    width: &dyn Fn(usize) -> usize,
) -> Result<()> {
    if pre.len() != pairs.len() {
        return Err(Error::Parameter(format!(
            "{} precomputed subspaces for {} bindings",
            pre.len(),
            pairs.len()
        )));
    }
    for (s, &(sl, tl)) in pre.iter().zip(pairs) {
        if s.layer_index != tl || s.k != width(sl) || s.method != method {
            return Err(Error::Parameter(format!(
                "subspace for teacher layer {} (K {}, {}) does not match binding {sl}→{tl} \
                 (K {}, {})",
                s.layer_index,
                s.k,
                s.method.name(),
                width(sl),
                method.name()
            )));
        }
    }
    Ok(())
}

/// Which parts of the objective a training phase optimises.
struct Phase {
    stage: usize,
    epochs: usize,
    trainable: RangeInclusive<usize>,
    output: bool,
    /// Index into the terms, or all terms when `None`.
    term: Option<usize>,
}

struct Run<'p> {
    prep: &'p mut Prepared,
    student: NetworkState,
    rng: ChaCha8Rng,
    config: &'p DistillConfig,
    logs: Vec<EpochLog>,
    epoch: usize,
    max_defect: f64,
}

impl Run<'_> {
    fn active(&self, phase: &Phase, i: usize) -> bool {
        phase.term.is_none_or(|t| t == i)
    }

    fn train_phase(&mut self, phase: &Phase) -> Result<()> {
        let mut opt = Sgd::new(self.config.learning_rate, self.config.momentum);
        let n = self.prep.train_x.rows();
        let mut order: Vec<usize> = (0..n).collect();
        let penalty_offset = 4 * (self.student.depth() + 1);
        for _ in 0..phase.epochs {
            self.epoch += 1;
            order.shuffle(&mut self.rng);
            let mut reports = Vec::new();
            let mut epoch_defect: f64 = 0.0;
            for batch in order.chunks(self.config.batch_size).filter(|b| b.len() >= 2) {
                let report = self.step(batch, phase, &mut opt, penalty_offset)?;
                if !report.total.is_finite() || report.total > DIVERGENCE_LIMIT {
                    return Err(Error::Diverged {
                        epoch: self.epoch,
                        loss: report.total,
                    });
                }
                for (i, t) in self.prep.terms.iter().enumerate() {
                    if self.active(phase, i) {
                        epoch_defect = epoch_defect.max(t.defect());
                    }
                }
                reports.push(report);
            }
            self.max_defect = self.max_defect.max(epoch_defect);
            self.logs.push(EpochLog {
                epoch: self.epoch,
                stage: phase.stage,
                report: LossReport::mean(&reports),
                val_accuracy: accuracy(&self.student, &self.prep.val_x, &self.prep.val_y)?,
                max_orthogonality_defect: epoch_defect,
            });
        }
        Ok(())
    }

    fn step(
        &mut self,
        batch: &[usize],
        phase: &Phase,
        opt: &mut Sgd,
        slot_base: usize,
    ) -> Result<LossReport> {
        let x = self.prep.train_x.select_rows(batch);
        let trace = self.student.forward(&x)?;
        let (output_loss, logit_grad) = if phase.output {
            let t_logits = self.prep.teacher_logits.select_rows(batch);
            output_kl(&t_logits, trace.logits(), self.config.temperature)?
        } else {
            let l = trace.logits();
            (0.0, Matrix::zeros(l.rows(), l.cols()))
        };

        let nterms = self.prep.terms.len();
        let mut layer_losses = vec![0.0; nterms];
        let mut alphas = vec![0.0; nterms];
        let mut penalties = vec![0.0; nterms];
        let mut extras = Vec::new();
        let mut adapter_updates = Vec::new();
        for (i, term) in self.prep.terms.iter().enumerate() {
            if !self.active(phase, i) {
                continue;
            }
            let a = term.alpha();
            alphas[i] = a;
            let s_layer = term.student_layer();
            let teacher = ActivationBatch::new(
                term.teacher_layer(),
                self.prep.teacher_acts[i].select_rows(batch),
                ModelTag::Teacher,
            );
            let student = ActivationBatch::new(
                s_layer,
                trace.layer(s_layer).clone(),
                ModelTag::Student,
            );
            match term {
                Term::Sub(b) => {
                    let ll = subdistill_layer_loss(b, &teacher, &student)?;
                    layer_losses[i] = ll.loss;
                    extras.push((s_layer, ll.grad_student.scale(a)));
                    let penalty = match b.adapter.orthogonality {
                        OrthoMode::SoftPenalty { weight } => {
                            let (p, g) = orthogonality_penalty(&b.adapter.v, weight);
                            penalties[i] = p;
                            Some((g, weight))
                        }
                        OrthoMode::Stiefel => None,
                    };
                    adapter_updates.push((i, vec![ll.grad_v.scale(a)], penalty));
                }
                Term::Wb { adapter, .. } => {
                    let wl = wb_layer_loss(adapter, &teacher, &student)?;
                    layer_losses[i] = wl.loss;
                    extras.push((s_layer, wl.grad_student.scale(a)));
                    let gb = Matrix::row_vector(&wl.grad_b).scale(a);
                    adapter_updates.push((i, vec![wl.grad_w.scale(a), gb], None));
                }
            }
        }
        let report = LossReport::new(output_loss, layer_losses, alphas, penalties);
        if !report.total.is_finite() || report.total > DIVERGENCE_LIMIT {
            return Ok(report);
        }

        let grads = self.student.backward(&trace, &logit_grad, &extras)?;
        opt.step_layers(&mut self.student, &grads, phase.trainable.clone());

        let lr = self.config.learning_rate;
        for (i, grad, penalty) in adapter_updates {
            let slot = slot_base + 2 * i;
            match &mut self.prep.terms[i] {
                Term::Sub(b) => {
                    opt.step(slot, b.adapter.v.as_mut_slice(), grad[0].as_slice());
                    match penalty {
                        Some((_, weight)) => {
                            // The penalty's curvature is ~8·weight, far stiffer than the
                            // loss, so its flow over the same time `lr` is integrated in
                            // substeps no longer than 1/(16·weight).
                            let substeps = ((lr * 16.0 * weight).ceil() as usize).clamp(1, 10_000);
                            let h = lr / substeps as f64;
                            for _ in 0..substeps {
                                let (_, g) = orthogonality_penalty(&b.adapter.v, weight);
                                b.adapter.v.axpy(-h, &g);
                            }
                        }
                        None => b.adapter.v = qr_orthonormalize(&b.adapter.v)?,
                    }
                }
                Term::Wb { adapter, .. } => {
                    opt.step(slot, adapter.w.as_mut_slice(), grad[0].as_slice());
                    opt.step(slot + 1, &mut adapter.b, grad[1].as_slice());
                }
            }
        }
        Ok(report)
    }

    fn finish(self, started: Instant, dataset_digest: &str, notes: Vec<String>) -> Result<RunRecord> {
        let Run {
            prep,
            student,
            config,
            logs,
            max_defect,
            ..
        } = self;
        let trace = student.forward(&prep.train_x)?;
        for t in &mut prep.terms {
            if let Term::Sub(b) = t {
                b.adapter.running_mean = Some(trace.layer(b.student_layer).col_means());
            }
        }
        let final_defect = prep.terms.iter().map(Term::defect).fold(0.0, f64::max);
        Ok(RunRecord {
            config: config.clone(),
            bindings: prep
                .terms
                .iter()
                .map(|t| (t.student_layer(), t.teacher_layer()))
                .collect(),
            subspaces: prep.subspaces.clone(),
            adapters: prep.terms.iter().map(Term::adapter_matrix).collect(),
            train_accuracy: accuracy(&student, &prep.train_x, &prep.train_y)?,
            val_accuracy: accuracy(&student, &prep.val_x, &prep.val_y)?,
            test_accuracy: accuracy(&student, &prep.test_x, &prep.test_y)?,
            max_orthogonality_defect: max_defect.max(final_defect),
            final_orthogonality_defect: final_defect,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            dataset_digest: dataset_digest.to_string(),
            epochs: logs,
            student,
            notes,
        })
    }
}

fn start<'p>(
    task: &DistillTask<'_>,
    config: &'p DistillConfig,
    prep: &'p mut Prepared,
) -> Result<Run<'p>> {
    let mut spec = task.student_spec.clone();
    spec.seed = config.seed;
    let student = NetworkState::init(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let max_defect = prep.terms.iter().map(Term::defect).fold(0.0, f64::max);
    Ok(Run {
        prep,
        student,
        rng,
        config,
        logs: Vec::new(),
        epoch: 0,
        max_defect,
    })
}

/// Simultaneous optimisation of the output loss and every weighted layer loss.
pub fn distill_joint(task: &DistillTask<'_>, config: &DistillConfig) -> Result<RunRecord> {
    let started = Instant::now();
    let mut prep = prepare(task, config, false)?;
    let mut run = start(task, config, &mut prep)?;
    let depth = run.student.depth();
    run.train_phase(&Phase {
        stage: 0,
        epochs: config.epochs,
        trainable: 1..=depth,
        output: true,
        term: None,
    })?;
    run.finish(started, &task.dataset.source_digest, Vec::new())
}

/// Layer-wise training: each binding in turn trains the not yet frozen layers
/// below it against its own normalised layer loss, then a last stage fits the
/// remaining layers to the output loss alone.
pub fn distill_decoupled(task: &DistillTask<'_>, config: &DistillConfig) -> Result<RunRecord> {
    let started = Instant::now();
    let mut notes = vec!["decoupled: staged freeze, no shared output head during layer stages".into()];
    let mut prep = prepare(task, config, true)?;
    if config.alpha == 0.0 {
        prep.terms.clear();
        prep.subspaces.clear();
        notes.push("alpha = 0: layer stages skipped".into());
    }
    let mut run = start(task, config, &mut prep)?;
    let depth = run.student.depth();
    let layers: Vec<usize> = run.prep.terms.iter().map(Term::student_layer).collect();
    let mut frozen = 0;
    for (i, &s) in layers.iter().enumerate() {
        run.train_phase(&Phase {
            stage: i + 1,
            epochs: config.epochs,
            trainable: frozen + 1..=s,
            output: false,
            term: Some(i),
        })?;
        frozen = s;
    }
    run.train_phase(&Phase {
        stage: layers.len() + 1,
        epochs: config.output_stage_epochs.unwrap_or(config.epochs),
        trainable: frozen + 1..=depth,
        output: true,
        term: Some(usize::MAX),
    })?;
    run.finish(started, &task.dataset.source_digest, notes)
}
