//! The teacher-student training loop.
//!
//! Each step perturbs the batch twice, runs the student on the tape and the
//! teacher detached, and minimizes
//!
//! ```text
//! L = L_s + λ(e) · (L_c + β·L_sc + γ·L_tc)
//! ```
//!
//! with Adam on the student. The teacher then tracks the student by EMA, and
//! the student's relation matrix and graph for the batch are cached for the
//! next visit to the same batch.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::data::{batch_partition, Batch, Dataset, Labels, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, relation_distance, MetricsReport};
use crate::model::{
    ema_update, forward, forward_tape, init_image_params, init_params, predict, probabilities, BoundParams,
    HeadMode, ImageFront, ModelParams, Perturbation,
};
use crate::relation::{
    individual_consistency_tape, relation_matrix, relation_tape, spatial_consistency_tape, RelationMatrix,
};
use crate::rng::{sub_seed, Stream};
use crate::temporal::{
    binarize, stable_substructures, temporal_consistency_tape, BatchKey, RelationCache, StableSubstructureSet,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    /// `lr₀ · decay^e`
    Exponential,
    /// `lr₀ · (1 − e/E)^decay`
    Poly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossSwitches {
    pub use_lc: bool,
    pub use_lsc: bool,
    pub use_ltc: bool,
}

impl LossSwitches {
    pub const ALL: LossSwitches = LossSwitches {
        use_lc: true,
        use_lsc: true,
        use_ltc: true,
    };
    pub const NONE: LossSwitches = LossSwitches {
        use_lc: false,
        use_lsc: false,
        use_ltc: false,
    };

    /// The eight on/off combinations, ordered none, singles, pairs, all.
    pub fn grid() -> [LossSwitches; 8] {
        let s = |c, sc, tc| LossSwitches {
            use_lc: c,
            use_lsc: sc,
            use_ltc: tc,
        };
        [
            s(false, false, false),
            s(true, false, false),
            s(false, true, false),
            s(false, false, true),
            s(true, true, false),
            s(true, false, true),
            s(false, true, true),
            s(true, true, true),
        ]
    }

    pub fn any_relation(&self) -> bool {
        self.use_lsc || self.use_ltc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalModel {
    Student,
    Teacher,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_max: f64,
    pub beta: f64,
    pub gamma: f64,
    pub alpha_ema: f64,
    pub tau: f64,
    pub ramp_up_epochs: usize,
    pub tsc_start_epoch: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_decay: f64,
    pub lr_schedule: LrSchedule,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub head_mode: HeadMode,
    pub switches: LossSwitches,
    /// Gaussian input noise of both perturbations.
    pub noise_sigma: f64,
    /// Horizontal flip probability (image inputs only).
    pub flip_prob: f64,
    /// Which network is scored on the validation set.
    pub eval_model: EvalModel,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_max: 1.0,
            beta: 1.0,
            gamma: 1.0,
            alpha_ema: 0.99,
            tau: 0.5,
            ramp_up_epochs: 20,
            tsc_start_epoch: 20,
            epochs: 60,
            batch_size: 64,
            lr_initial: 1e-4,
            lr_decay: 0.9,
            lr_schedule: LrSchedule::Exponential,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            head_mode: HeadMode::SingleLabel,
            switches: LossSwitches::ALL,
            noise_sigma: 0.1,
            flip_prob: 0.0,
            eval_model: EvalModel::Student,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_max", self.lambda_max),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("noise_sigma", self.noise_sigma),
        ];
        for (name, w) in weights {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::contract(format!("{name} must be a finite value >= 0, got {w}")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha_ema) {
            return Err(Error::contract(format!("alpha_ema {} outside [0, 1]", self.alpha_ema)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::contract(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if self.batch_size < 1 || (self.batch_size < 2 && self.switches.any_relation()) {
            return Err(Error::contract(format!(
                "batch_size {} too small: relation losses need at least 2 samples",
                self.batch_size
            )));
        }
        if !(self.lr_initial > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::contract("lr_initial must be > 0 and lr_decay in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::contract("Adam betas must be in [0, 1) and eps > 0"));
        }
        Ok(())
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Exponential => lr_schedule(epoch, self.lr_initial, self.lr_decay),
            LrSchedule::Poly => poly_lr_schedule(epoch, self.epochs, self.lr_initial, self.lr_decay),
        }
    }

    pub fn lambda(&self, epoch: usize) -> f64 {
        ramp_up(epoch, self.ramp_up_epochs, self.lambda_max)
    }
}

/// Sigmoid-shaped ramp `λ_max · exp(−5 (1 − min(e/R, 1))²)`.
pub fn ramp_up(epoch: usize, ramp_up_epochs: usize, lambda_max: f64) -> f64 {
    if ramp_up_epochs == 0 {
        return lambda_max;
    }
    let p = (epoch as f64 / ramp_up_epochs as f64).min(1.0);
    let q = 1.0 - p;
    lambda_max * libm::exp(-5.0 * q * q)
}

/// `lr₀ · decay^epoch`
pub fn lr_schedule(epoch: usize, lr_initial: f64, decay: f64) -> f64 {
    lr_initial * libm::pow(decay, epoch as f64)
}

/// `lr₀ · (1 − epoch/total)^power`, clamped at zero past the end.
pub fn poly_lr_schedule(epoch: usize, total_epochs: usize, lr_initial: f64, power: f64) -> f64 {
    if total_epochs == 0 {
        return lr_initial;
    }
    let frac = (1.0 - epoch as f64 / total_epochs as f64).max(0.0);
    lr_initial * libm::pow(frac, power)
}

/// Adam first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamState,
    lr: f64,
    hyper: AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        p.expect_same_shape(g, "adam_step")?;
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - libm::pow(hyper.beta1, t);
    let c2 = 1.0 - libm::pow(hyper.beta2, t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * gi;
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (libm::sqrt(v_hat) + hyper.eps);
        }
    }
    Ok(())
}

/// Cross-entropy (single-label) or per-class binary cross-entropy
/// (multi-label) over the rows of `logits`, recorded on the tape.
pub fn supervised_loss_tape(tape: &mut Tape, logits: Var, targets: &Labels) -> Result<Var> {
    let (n, c) = tape.value(logits).expect_matrix("supervised_loss")?;
    if targets.len() != n || targets.classes() != c {
        return Err(Error::Shape {
            op: "supervised_loss",
            left: vec![n, c],
            right: vec![targets.len(), targets.classes()],
        });
    }
    if n == 0 {
        return Err(Error::contract("supervised loss needs at least one labeled sample"));
    }
    match targets {
        Labels::Single { labels, .. } => {
            let mut onehot = Tensor::zeros(&[n, c]);
            for (i, &y) in labels.iter().enumerate() {
                if y >= c {
                    return Err(Error::IndexOutOfRange { index: y, len: c });
                }
                onehot.data_mut()[i * c + y] = 1.0;
            }
            let onehot = tape.constant(onehot);
            let logp = tape.log_softmax_rows(logits)?;
            let picked = tape.mul(onehot, logp)?;
            let total = tape.sum(picked)?;
            tape.scale(total, -1.0 / n as f64)
        }
        Labels::Multi { bits, .. } => {
            let y = Tensor::new(
                vec![n, c],
                bits.iter().flat_map(|b| b.iter().map(|&v| if v { 1.0 } else { 0.0 })).collect(),
            )?;
            let y = tape.constant(y);
            // softplus(z) − y·z == −[y log σ(z) + (1 − y) log(1 − σ(z))]
            let sp = tape.softplus(logits)?;
            let yz = tape.mul(y, logits)?;
            let per = tape.sub(sp, yz)?;
            tape.mean(per)
        }
    }
}

pub fn supervised_loss(logits: &Tensor, targets: &Labels) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let l = supervised_loss_tape(&mut tape, z, targets)?;
    Ok(tape.value(l).item())
}

/// Values of the four loss terms of one step. Absent terms are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub l_s: f64,
    pub l_c: f64,
    pub l_sc: f64,
    pub l_tc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    pub switches: LossSwitches,
}

impl LossWeights {
    pub fn from_config(config: &TrainConfig, epoch: usize) -> Self {
        LossWeights {
            lambda: config.lambda(epoch),
            beta: config.beta,
            gamma: config.gamma,
            switches: config.switches,
        }
    }

    /// Multipliers of `(L_c, L_sc, L_tc)` in the total; disabled terms get 0.
    pub fn term_weights(&self) -> [f64; 3] {
        let on = |b: bool, w: f64| if b { self.lambda * w } else { 0.0 };
        [
            on(self.switches.use_lc, 1.0),
            on(self.switches.use_lsc, self.beta),
            on(self.switches.use_ltc, self.gamma),
        ]
    }
}

/// `L_s + λ·(𝟙_c L_c + β 𝟙_sc L_sc + γ 𝟙_tc L_tc)`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> f64 {
    let s = weights.switches;
    let mut unsup = 0.0;
    if s.use_lc {
        unsup += parts.l_c;
    }
    if s.use_lsc {
        unsup += weights.beta * parts.l_sc;
    }
    if s.use_ltc {
        unsup += weights.gamma * parts.l_tc;
    }
    parts.l_s + weights.lambda * unsup
}

/// Everything one step records on its tape.
#[derive(Debug)]
pub struct LossGraph {
    pub tape: Tape,
    pub bound: BoundParams,
    pub l_s: Option<Var>,
    pub l_c: Var,
    pub l_sc: Var,
    /// Present when a previous visit exists and temporal consistency is active.
    pub l_tc: Option<Var>,
    pub total: Var,
    pub r_student: RelationMatrix,
    pub r_teacher: RelationMatrix,
    pub substructures: Option<StableSubstructureSet>,
    pub adjacency: crate::temporal::AdjacencyMatrix,
}

impl LossGraph {
    pub fn parts(&self) -> LossParts {
        let v = |x: Option<Var>| x.map_or(0.0, |x| self.tape.value(x).item());
        LossParts {
            l_s: v(self.l_s),
            l_c: v(Some(self.l_c)),
            l_sc: v(Some(self.l_sc)),
            l_tc: v(self.l_tc),
        }
    }
}

/// Inputs of one step apart from the student weights.
pub struct StepInputs<'a> {
    pub x: &'a Tensor,
    pub batch_ids: &'a [u64],
    /// Batch positions carrying labels, and their labels.
    pub labeled: &'a [usize],
    pub targets: &'a Labels,
    pub teacher_out: &'a crate::model::FeatureBatch,
    pub student_pert: Perturbation,
    /// Previous visit's relation snapshot and graph, if temporal consistency
    /// applies this step.
    pub previous: Option<&'a crate::temporal::CacheEntry>,
    pub iteration: u64,
}

/// Records the full loss of one step for `student`.
pub fn build_loss_graph(
    student: &ModelParams,
    inputs: &StepInputs<'_>,
    weights: &LossWeights,
    tau: f64,
) -> Result<LossGraph> {
    let mut tape = Tape::new();
    let bound = student.bind(&mut tape);
    let out = forward_tape(student, &bound, &mut tape, inputs.x, &inputs.student_pert)?;

    let l_s = if inputs.labeled.is_empty() {
        None
    } else {
        let z = tape.select_rows(out.logits, inputs.labeled)?;
        Some(supervised_loss_tape(&mut tape, z, inputs.targets)?)
    };

    let p_student = match student.head_mode {
        HeadMode::SingleLabel => tape.softmax_rows(out.logits)?,
        HeadMode::MultiLabel => tape.sigmoid(out.logits)?,
    };
    let p_teacher = tape.constant(probabilities(&inputs.teacher_out.logits, student.head_mode)?);
    let l_c = individual_consistency_tape(&mut tape, p_student, p_teacher)?;

    let (r_var, zero_rows) = relation_tape(&mut tape, out.features)?;
    let r_student = RelationMatrix {
        values: tape.value(r_var).clone(),
        batch_ids: inputs.batch_ids.to_vec(),
        zero_rows,
    };
    let r_teacher = relation_matrix(&inputs.teacher_out.features, inputs.batch_ids)?;
    let r_teacher_var = tape.constant(r_teacher.values.clone());
    let l_sc = spatial_consistency_tape(&mut tape, r_var, r_teacher_var)?;

    let mut adjacency = binarize(&r_student, tau);
    adjacency.iteration = inputs.iteration;
    let (l_tc, substructures) = match inputs.previous {
        Some(prev) => {
            let s = stable_substructures(&adjacency, &prev.adjacency)?;
            let l = temporal_consistency_tape(&mut tape, r_var, &prev.relation, &s)?;
            (Some(l), Some(s))
        }
        None => (None, None),
    };

    let [wc, wsc, wtc] = weights.term_weights();
    let mut total = match l_s {
        Some(l) => l,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    for (term, w, on) in [
        (Some(l_c), wc, weights.switches.use_lc),
        (Some(l_sc), wsc, weights.switches.use_lsc),
        (l_tc, wtc, weights.switches.use_ltc),
    ] {
        if let (Some(term), true) = (term, on) {
            let scaled = tape.scale(term, w)?;
            total = tape.add(total, scaled)?;
        }
    }

    Ok(LossGraph {
        tape,
        bound,
        l_s,
        l_c,
        l_sc,
        l_tc,
        total,
        r_student,
        r_teacher,
        substructures,
        adjacency,
    })
}

/// Network shape beyond what the dataset fixes (input width, class count).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    /// `(kernel, channels)` of the convolution front for image datasets.
    pub conv: Option<(usize, usize)>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            hidden: vec![32, 32],
            conv: None,
        }
    }
}

impl Architecture {
    pub fn init(&self, dataset: &Dataset, seed: u64) -> Result<ModelParams> {
        let head = dataset.labels.head_mode();
        let c = dataset.classes();
        match (self.conv, dataset.image) {
            (Some((kernel, channels)), Some((height, width))) => {
                let front = ImageFront {
                    height,
                    width,
                    kernel,
                    channels,
                };
                let mut dims = vec![front.output_dim()];
                dims.extend(&self.hidden);
                dims.push(c);
                init_image_params(front, &dims, head, seed)
            }
            (Some(_), None) => Err(Error::contract("a convolution front needs an image dataset")),
            (None, _) => {
                let mut dims = vec![dataset.dim()];
                dims.extend(&self.hidden);
                dims.push(c);
                init_params(&dims, head, seed)
            }
        }
    }
}

/// Per-epoch log entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub l_s: f64,
    pub l_c: f64,
    pub l_sc: f64,
    pub l_tc: f64,
    /// Stable sub-structures found over all steps of the epoch.
    pub substructures: usize,
    pub val: MetricsReport,
    /// Mean `|R_student − R_teacher|` over the epoch's steps.
    pub relation_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub iteration: u64,
    pub epoch: usize,
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub adam: AdamState,
    pub cache: RelationCache,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    /// Fresh state; the teacher starts as a copy of the student.
    pub fn new(student: ModelParams) -> Self {
        let adam = AdamState::zeros_like(&student.tensors());
        TrainState {
            iteration: 0,
            epoch: 0,
            teacher: student.clone(),
            student,
            adam,
            cache: RelationCache::new(),
            history: Vec::new(),
        }
    }

    pub fn eval_params(&self, which: EvalModel) -> &ModelParams {
        match which {
            EvalModel::Student => &self.student,
            EvalModel::Teacher => &self.teacher,
        }
    }
}

/// What one step computed.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub iteration: u64,
    pub parts: LossParts,
    pub total: f64,
    pub lambda: f64,
    pub lr: f64,
    pub r_student: RelationMatrix,
    pub r_teacher: RelationMatrix,
    pub relation_distance: f64,
    pub substructures: Option<StableSubstructureSet>,
}

pub fn perturbations(config: &TrainConfig, iteration: u64) -> (Perturbation, Perturbation) {
    let make = |stream| Perturbation {
        noise_sigma: config.noise_sigma,
        flip_prob: config.flip_prob,
        seed: sub_seed(config.seed, stream, iteration),
    };
    (make(Stream::PerturbStudent), make(Stream::PerturbTeacher))
}

/// One optimization step on `batch`.
pub fn train_step(state: &mut TrainState, dataset: &Dataset, batch: &Batch, config: &TrainConfig) -> Result<StepReport> {
    let x = dataset.features.select_rows(&batch.rows)?;
    let labeled = batch.labeled_positions();
    let labeled_rows: Vec<usize> = labeled.iter().map(|&p| batch.rows[p]).collect();
    let targets = dataset.labels.subset(&labeled_rows);
    let (student_pert, teacher_pert) = perturbations(config, state.iteration);
    let teacher_out = forward(&state.teacher, &x, &teacher_pert)?;

    let temporal_active = state.epoch >= config.tsc_start_epoch;
    let previous = if temporal_active { state.cache.get(&batch.key) } else { None };
    let weights = LossWeights::from_config(config, state.epoch);
    let inputs = StepInputs {
        x: &x,
        batch_ids: &batch.key.0,
        labeled: &labeled,
        targets: &targets,
        teacher_out: &teacher_out,
        student_pert,
        previous,
        iteration: state.iteration,
    };
    let graph = build_loss_graph(&state.student, &inputs, &weights, config.tau)?;
    let grads = graph.tape.backward(graph.total)?;
    let grad_list: Vec<&Tensor> = graph
        .bound
        .vars
        .iter()
        .map(|&v| grads.get(v).expect("every bound parameter has a gradient"))
        .collect();
    let lr = config.learning_rate(state.epoch);
    let hyper = AdamHyper {
        beta1: config.adam_beta1,
        beta2: config.adam_beta2,
        eps: config.adam_eps,
    };
    adam_step(&mut state.student.tensors_mut(), &grad_list, &mut state.adam, lr, hyper)?;
    state.teacher = ema_update(&state.teacher, &state.student, config.alpha_ema)?;

    let distance = relation_distance(&graph.r_student, &graph.r_teacher)?.mean_abs;
    let parts = graph.parts();
    let total = graph.tape.value(graph.total).item();
    state.cache.update(
        batch.key.clone(),
        graph.r_student.clone(),
        graph.adjacency.clone(),
        state.iteration,
    );
    state.iteration += 1;
    Ok(StepReport {
        iteration: state.iteration - 1,
        parts,
        total,
        lambda: weights.lambda,
        lr,
        r_student: graph.r_student,
        r_teacher: graph.r_teacher,
        relation_distance: distance,
        substructures: graph.substructures,
    })
}

/// Snapshot handed to the epoch observer.
#[derive(Debug, Clone)]
pub struct EpochReport<'a> {
    pub record: &'a EpochRecord,
    /// Student and teacher relation matrices of the first batch.
    pub first_batch_relations: Option<(&'a RelationMatrix, &'a RelationMatrix)>,
    /// Stable sub-structures per batch, translated to sample ids.
    pub substructures: &'a [(BatchKey, Vec<Vec<u64>>)],
    pub state: &'a TrainState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestCheckpoint {
    pub params: ModelParams,
    pub epoch: usize,
    pub val: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub state: TrainState,
    /// Highest validation AUC; equal AUCs are ranked by validation accuracy,
    /// then by recency. An undefined AUC never displaces a defined one.
    pub best: Option<BestCheckpoint>,
}

impl FitResult {
    pub fn history(&self) -> &[EpochRecord] {
        &self.state.history
    }
}

pub fn evaluate_params(params: &ModelParams, data: &Dataset) -> Result<MetricsReport> {
    let probs = predict(params, &data.features)?;
    evaluate(&probs, &data.labels)
}

/// Trains for `config.epochs` epochs over a fixed batch partition, scoring the
/// validation split after every epoch.
pub fn fit(
    dataset: &Dataset,
    split: &Split,
    arch: &Architecture,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochReport<'_>),
) -> Result<FitResult> {
    config.validate()?;
    if split.labeled.is_empty() {
        return Err(Error::contract("the labeled training set is empty"));
    }
    if dataset.labels.head_mode() != config.head_mode {
        return Err(Error::contract("config head_mode does not match the dataset labels"));
    }
    let val = dataset.subset(&split.val)?;
    if config.epochs > 0 && val.is_empty() {
        return Err(Error::contract("the validation split is empty"));
    }
    let batches = batch_partition(dataset, &split.labeled, &split.unlabeled, config.batch_size, config.seed)?;
    if config.epochs > 0 && batches.is_empty() {
        return Err(Error::contract("no mini-batch with at least two samples"));
    }
    let mut state = TrainState::new(arch.init(dataset, config.seed)?);
    let mut best: Option<BestCheckpoint> = None;

    for epoch in 0..config.epochs {
        state.epoch = epoch;
        let mut sums = LossParts::default();
        let mut labeled_steps = 0usize;
        let mut distance = 0.0;
        let mut k_total = 0usize;
        let mut first: Option<(RelationMatrix, RelationMatrix)> = None;
        let mut dumps = Vec::new();
        for batch in &batches {
            let report = train_step(&mut state, dataset, batch, config)?;
            if batch.labeled.iter().any(|&l| l) {
                labeled_steps += 1;
            }
            sums.l_s += report.parts.l_s;
            sums.l_c += report.parts.l_c;
            sums.l_sc += report.parts.l_sc;
            sums.l_tc += report.parts.l_tc;
            distance += report.relation_distance;
            if let Some(s) = &report.substructures {
                k_total += s.len();
                let ids = s
                    .components
                    .iter()
                    .map(|c| {
                        let mut v: Vec<u64> = c.iter().map(|&i| batch.key.0[i]).collect();
                        v.sort_unstable();
                        v
                    })
                    .collect();
                dumps.push((batch.key.clone(), ids));
            }
            if first.is_none() {
                first = Some((report.r_student, report.r_teacher));
            }
        }
        let steps = batches.len() as f64;
        let val_report = evaluate_params(state.eval_params(config.eval_model), &val)?;
        let record = EpochRecord {
            epoch,
            lr: config.learning_rate(epoch),
            lambda: config.lambda(epoch),
            l_s: if labeled_steps > 0 { sums.l_s / labeled_steps as f64 } else { 0.0 },
            l_c: sums.l_c / steps,
            l_sc: sums.l_sc / steps,
            l_tc: sums.l_tc / steps,
            substructures: k_total,
            val: val_report.clone(),
            relation_distance: distance / steps,
        };
        let better = match &best {
            None => true,
            Some(b) => {
                b.val.auc.is_nan()
                    || val_report.auc > b.val.auc
                    || (val_report.auc == b.val.auc && val_report.accuracy >= b.val.accuracy)
            }
        };
        if better {
            best = Some(BestCheckpoint {
                params: state.eval_params(config.eval_model).clone(),
                epoch,
                val: val_report,
            });
        }
        state.history.push(record);
        let record = state.history.last().expect("just pushed");
        observer(&EpochReport {
            record,
            first_batch_relations: first.as_ref().map(|(a, b)| (a, b)),
            substructures: &dumps,
            state: &state,
        });
    }
    Ok(FitResult { state, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs, split as split_data, SplitSpec};

    #[test]
    fn ramp_up_examples() {
        assert_eq!(ramp_up(30, 20, 2.0), 2.0);
        assert_eq!(ramp_up(20, 20, 2.0), 2.0);
        assert_eq!(ramp_up(0, 0, 3.0), 3.0);
        assert!((ramp_up(10, 20, 1.0) - (-1.25f64).exp()).abs() < 1e-15);
        assert!((ramp_up(0, 20, 1.0) - (-5.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn lr_examples() {
        assert_eq!(lr_schedule(0, 1e-4, 0.9), 1e-4);
        assert!((lr_schedule(1, 1e-4, 0.9) - 9e-5).abs() < 1e-20);
        assert_eq!(lr_schedule(17, 1e-3, 1.0), 1e-3);
        assert_eq!(poly_lr_schedule(0, 10, 1e-3, 0.9), 1e-3);
        assert_eq!(poly_lr_schedule(10, 10, 1e-3, 0.9), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let parts = LossParts { l_s: 0.5, l_c: 0.1, l_sc: 0.2, l_tc: 0.3 };
        let w = LossWeights { lambda: 1.0, beta: 1.0, gamma: 1.0, switches: LossSwitches::ALL };
        assert!((total_loss(&parts, &w) - 1.1).abs() < 1e-15);
        let off = LossWeights { switches: LossSwitches::NONE, ..w };
        assert_eq!(total_loss(&parts, &off), 0.5);
        let zero = LossWeights { lambda: 0.0, ..w };
        assert_eq!(total_loss(&parts, &zero), 0.5);
    }

    #[test]
    fn adam_zero_grad_is_fixed_point() {
        let mut p = Tensor::from_rows(&[[1.0, -2.0]]).unwrap();
        let g = Tensor::zeros(&[1, 2]);
        let mut st = AdamState::zeros_like(&[&p]);
        adam_step(&mut [&mut p], &[&g], &mut st, 0.1, AdamHyper::default()).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_magnitude() {
        // f(x) = x has gradient 1 everywhere
        let mut x = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut st = AdamState::zeros_like(&[&x]);
        adam_step(&mut [&mut x], &[&g], &mut st, 0.1, AdamHyper::default()).unwrap();
        assert!((x.item() + 0.1).abs() < 1e-8);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = Tensor::zeros(&[1, 2]);
        let g = Tensor::zeros(&[2, 1]);
        let mut st = AdamState::zeros_like(&[&p]);
        assert!(adam_step(&mut [&mut p], &[&g], &mut st, 0.1, AdamHyper::default()).is_err());
    }

    #[test]
    fn supervised_loss_examples() {
        let labels = Labels::Single { classes: 2, labels: vec![0, 1] };
        let sharp = Tensor::from_rows(&[[20.0, 0.0], [0.0, 20.0]]).unwrap();
        assert!(supervised_loss(&sharp, &labels).unwrap() <= 1e-6);
        let flat = Tensor::zeros(&[2, 2]);
        assert!((supervised_loss(&flat, &labels).unwrap() - 2f64.ln()).abs() < 1e-15);
        let ml = Labels::Multi { classes: 3, bits: vec![vec![true, false, true], vec![false, false, true]] };
        assert!((supervised_loss(&Tensor::zeros(&[2, 3]), &ml).unwrap() - 2f64.ln()).abs() < 1e-15);
        let bad = Labels::Single { classes: 2, labels: vec![0, 1, 1] };
        assert!(supervised_loss(&flat, &bad).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.batch_size = 1;
        assert!(c.validate().is_err());
        c.switches = LossSwitches { use_lc: true, use_lsc: false, use_ltc: false };
        assert!(c.validate().is_ok());
        c.beta = -1.0;
        assert!(c.validate().is_err());
    }

    fn small_setup() -> (Dataset, Split, TrainConfig) {
        let d = gen_blobs(120, 3, 2, 3.0, 0.5, 11).unwrap();
        let s = split_data(&d, &SplitSpec { labeled_ratio: 0.25, seed: 1, ..SplitSpec::default() }).unwrap();
        let c = TrainConfig {
            epochs: 3,
            batch_size: 16,
            lr_initial: 1e-2,
            ramp_up_epochs: 1,
            tsc_start_epoch: 1,
            ..TrainConfig::default()
        };
        (d, s, c)
    }

    #[test]
    fn fit_zero_epochs_is_noop() {
        let (d, s, mut c) = small_setup();
        c.epochs = 0;
        let arch = Architecture::default();
        let r = fit(&d, &s, &arch, &c, &mut |_| {}).unwrap();
        assert_eq!(r.state, TrainState::new(arch.init(&d, c.seed).unwrap()));
        assert!(r.best.is_none());
    }

    #[test]
    fn fit_is_deterministic_and_rejects_empty_labels() {
        let (d, s, c) = small_setup();
        let arch = Architecture::default();
        let a = fit(&d, &s, &arch, &c, &mut |_| {}).unwrap();
        let b = fit(&d, &s, &arch, &c, &mut |_| {}).unwrap();
        assert_eq!(a.history(), b.history());
        assert_eq!(a.history().len(), 3);
        let empty = Split { labeled: vec![], ..s };
        assert!(fit(&d, &empty, &arch, &c, &mut |_| {}).is_err());
    }
}
