//! Reprogramming objective and training loop.
//!
//! Loss per step: mean cross-entropy of the remapped scores over the batch
//! plus `lambda * (|theta|^2 + |W_head|^2)`. The victim only ever appears on
//! the tape as constants.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use xmar_tensor::{AdamState, Checkpoint, Element, Tape, Tensor, Var};

use crate::data::{Example, LabeledDataset};
use crate::error::{Result, XmarError};
use crate::program::Program;
use crate::remap::{
    build_roundrobin, infer_target_label, sources_per_target, top_q_labels, Aggregation, HeadVars, LinearHead,
    Remap, DEFAULT_SOURCES_PER_TARGET,
};
use crate::victim::VictimModel;

pub const DEFAULT_BATCH: usize = 4;
pub const DEFAULT_LR: f64 = 0.001;
pub const DEFAULT_LAMBDA: f64 = 1e-4;
pub const DEFAULT_STEPS: usize = 100_000;
pub const DEFAULT_BOUNDED_STEPS: usize = 200_000;
pub const EVAL_BATCH: usize = 32;
/// Test examples whose concealed images are checked against the bound at
/// every evaluation.
pub const BOUND_SPOT_CHECKS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RemapMode {
    Max,
    Linear,
}

impl std::str::FromStr for RemapMode {
    type Err = XmarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(RemapMode::Max),
            "linear" => Ok(RemapMode::Linear),
            _ => Err(XmarError::invalid(format!("unknown remap mode {s:?} (expected max or linear)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// `None` means 0.001, divided by epsilon in bounded mode.
    pub lr: Option<f64>,
    pub lambda: f64,
    pub max_steps: usize,
    pub m: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub remap_mode: RemapMode,
    pub epsilon: Option<f64>,
    pub q: Option<usize>,
    pub accessible: Option<Vec<usize>>,
    pub use_bias: bool,
    pub aggregation: Aggregation,
    /// Stop after this many evaluations without a test-accuracy gain.
    pub patience: Option<usize>,
    pub checkpoint_every: Option<usize>,
    /// Evaluate train accuracy on at most this many train examples.
    pub train_eval_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH,
            lr: None,
            lambda: DEFAULT_LAMBDA,
            max_steps: DEFAULT_STEPS,
            m: DEFAULT_SOURCES_PER_TARGET,
            eval_every: 1000,
            seed: 0,
            remap_mode: RemapMode::Max,
            epsilon: None,
            q: None,
            accessible: None,
            use_bias: false,
            aggregation: Aggregation::Max,
            patience: None,
            checkpoint_every: None,
            train_eval_limit: None,
        }
    }
}

impl TrainConfig {
    /// Defaults for a bounded run.
    pub fn bounded(epsilon: f64) -> Self {
        Self { epsilon: Some(epsilon), max_steps: DEFAULT_BOUNDED_STEPS, ..Self::default() }
    }

    pub fn effective_lr(&self) -> f64 {
        match (self.lr, self.epsilon) {
            (Some(lr), _) => lr,
            (None, Some(eps)) if eps > 0.0 => DEFAULT_LR / eps,
            (None, _) => DEFAULT_LR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(XmarError::invalid(msg));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.max_steps == 0 || self.eval_every == 0 || self.m == 0 {
            return fail("max_steps, eval_every and m must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        let lr = self.effective_lr();
        if !(lr >= 0.0 && lr.is_finite()) {
            return fail(format!("lr must be finite and non-negative, got {lr}"));
        }
        if let Some(eps) = self.epsilon {
            if !(0.0..=1.0).contains(&eps) {
                return fail(format!("epsilon must lie in [0, 1], got {eps}"));
            }
        }
        if self.remap_mode == RemapMode::Linear && self.q.is_none() && self.accessible.is_none() {
            return fail("linear remap needs q or an accessible label list".into());
        }
        if let (Some(q), Some(list)) = (self.q, &self.accessible) {
            if q != list.len() {
                return fail(format!("q = {q} but {} accessible labels were listed", list.len()));
            }
        }
        if self.checkpoint_every == Some(0) || self.patience == Some(0) {
            return fail("checkpoint_every and patience must be positive when set".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        json!({
            "batch_size": self.batch_size,
            "lr": self.effective_lr(),
            "lambda": self.lambda,
            "max_steps": self.max_steps,
            "m": self.m,
            "eval_every": self.eval_every,
            "seed": self.seed,
            "remap_mode": match self.remap_mode { RemapMode::Max => "max", RemapMode::Linear => "linear" },
            "epsilon": self.epsilon,
            "q": self.q,
            "accessible": self.accessible,
            "use_bias": self.use_bias,
            "aggregation": match self.aggregation { Aggregation::Max => "max", Aggregation::Mean => "mean" },
            "patience": self.patience,
            "checkpoint_every": self.checkpoint_every,
            "train_eval_limit": self.train_eval_limit,
        })
    }
}

/// Trainable tensors in a given precision.
#[derive(Clone, Debug)]
pub struct Params<T: Element> {
    pub theta: Tensor<T>,
    pub head_weight: Option<Tensor<T>>,
    pub head_bias: Option<Tensor<T>>,
}

impl Params<f32> {
    pub fn current(program: &Program, remap: &Remap) -> Self {
        let head = remap.head();
        Self {
            theta: program.inner().theta().clone(),
            head_weight: head.map(|h| h.weight().clone()),
            head_bias: head.and_then(|h| h.bias().cloned()),
        }
    }
}

/// Handles into a recorded objective.
#[derive(Clone, Copy, Debug)]
pub struct LossGraph {
    pub loss: Var,
    pub scores: Var,
    pub logits: Var,
    pub theta: Var,
    pub head: Option<HeadVars>,
}

/// Records the objective for a batch of padded sequences.
#[allow(clippy::too_many_arguments)]
pub fn record_loss<T: Element>(
    tape: &mut Tape<T>,
    program: &Program,
    victim: &VictimModel,
    remap: &Remap,
    params: &Params<T>,
    sequences: &[Vec<usize>],
    labels: &[usize],
    lambda: f64,
) -> Result<LossGraph> {
    if sequences.is_empty() || sequences.len() != labels.len() {
        return Err(XmarError::invalid("batch must be nonempty with one label per sequence"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= remap.num_targets()) {
        return Err(XmarError::invalid(format!("label {l} out of range for {} targets", remap.num_targets())));
    }
    let theta = tape.param(params.theta.clone())?;
    let head = match (&params.head_weight, remap) {
        (Some(w), Remap::Linear(_)) => {
            let weight = tape.param(w.clone())?;
            let bias = params.head_bias.clone().map(|b| tape.param(b)).transpose()?;
            Some(HeadVars { weight, bias })
        }
        (None, Remap::Linear(_)) => return Err(XmarError::invalid("linear remap needs head parameters")),
        _ => None,
    };
    let images = program.render_on(tape, theta, sequences)?;
    let bound = victim.bind(tape, false)?;
    let logits = victim.forward_on(tape, &bound, images)?;
    let scores = remap.scores_on(tape, logits, head)?;
    let ce = tape.cross_entropy(scores, labels)?;
    let mut penalty = {
        let sq = tape.mul(theta, theta)?;
        tape.sum(sq)?
    };
    if let Some(h) = head {
        let sq = tape.mul(h.weight, h.weight)?;
        let s = tape.sum(sq)?;
        penalty = tape.add(penalty, s)?;
    }
    let penalty = tape.scale(penalty, lambda)?;
    let loss = tape.add(ce, penalty)?;
    Ok(LossGraph { loss, scores, logits, theta, head })
}

/// Loss value and per-example target probabilities for a batch.
pub fn loss(
    program: &Program,
    victim: &VictimModel,
    remap: &Remap,
    batch: &[Example],
    lambda: f64,
) -> Result<(f64, Tensor<f32>)> {
    let sequences: Vec<Vec<usize>> = batch.iter().map(|e| program.inner().pad(&e.tokens)).collect();
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let mut tape = Tape::<f32>::new();
    let params = Params::current(program, remap);
    let graph = record_loss(&mut tape, program, victim, remap, &params, &sequences, &labels, lambda)?;
    let probs = tape.softmax(graph.scores, 1)?;
    Ok((tape.value(graph.loss).item() as f64, tape.value(probs).clone()))
}

/// Victim logits for the base image (bounded) or an all-zero image.
pub fn base_scores(program: &Program, victim: &VictimModel) -> Result<Vec<f32>> {
    let image = match program {
        Program::Bounded(b) => b.base().clone(),
        Program::Plain(p) => Tensor::zeros(p.image_spec().shape().to_vec())?,
    };
    Ok(victim.logits(&image)?.into_vec())
}

/// Builds the label remapping a run starts from.
pub fn initial_remap(program: &Program, victim: &VictimModel, num_targets: usize, config: &TrainConfig) -> Result<Remap> {
    let scores = base_scores(program, victim)?;
    match config.remap_mode {
        RemapMode::Max => {
            let m = sources_per_target(scores.len(), num_targets, config.m);
            if m == 0 {
                return Err(XmarError::invalid(format!(
                    "victim exposes {} labels, too few for {num_targets} targets",
                    scores.len()
                )));
            }
            Ok(Remap::ManyToOne { mapping: build_roundrobin(&scores, num_targets, m)?, aggregation: config.aggregation })
        }
        RemapMode::Linear => {
            let accessible = match (&config.accessible, config.q) {
                (Some(list), _) => list.clone(),
                (None, Some(q)) => top_q_labels(&scores, q)?,
                (None, None) => return Err(XmarError::invalid("linear remap needs q or an accessible list")),
            };
            let head = LinearHead::new(num_targets, accessible, config.use_bias, config.seed ^ 0x5eed_4ead)?;
            Ok(Remap::Linear(head))
        }
    }
}

/// Predicted target labels for a dataset.
pub fn predict(program: &Program, victim: &VictimModel, remap: &Remap, dataset: &LabeledDataset) -> Result<Vec<usize>> {
    let theta = program.inner().theta().clone();
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.examples.chunks(EVAL_BATCH) {
        let sequences: Vec<Vec<usize>> = chunk.iter().map(|e| program.inner().pad(&e.tokens)).collect();
        let mut tape = Tape::<f32>::new();
        let t = tape.constant(theta.clone())?;
        let images = program.render_on(&mut tape, t, &sequences)?;
        let bound = victim.bind(&mut tape, false)?;
        let logits = victim.forward_on(&mut tape, &bound, images)?;
        let l = victim.num_labels();
        for row in tape.value(logits).data().chunks(l) {
            out.push(infer_target_label(remap, row)?);
        }
    }
    Ok(out)
}

/// Fraction of examples whose predicted target equals the gold label.
pub fn evaluate(program: &Program, victim: &VictimModel, remap: &Remap, dataset: &LabeledDataset) -> Result<f64> {
    let predictions = predict(program, victim, remap, dataset)?;
    let correct = predictions.iter().zip(&dataset.examples).filter(|(p, e)| **p == e.label).count();
    Ok(correct as f64 / dataset.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub step: u64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub elapsed_s: f64,
}

impl RunMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }

    /// Equality ignoring wall-clock time.
    pub fn same_values(&self, other: &RunMetrics) -> bool {
        self.step == other.step
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.train_acc.to_bits() == other.train_acc.to_bits()
            && self.test_acc.to_bits() == other.test_acc.to_bits()
    }
}

/// Everything needed to continue a run exactly where it stopped. Wall-clock
/// time is not part of it, so equal runs give equal checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub program: Program,
    pub remap: Remap,
    adam: AdamState<f32>,
    step: u64,
    loss_sum: f64,
    loss_count: u64,
    best_test: f64,
    evals_since_best: u64,
}

impl TrainState {
    pub fn new(program: Program, victim: &VictimModel, num_targets: usize, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let remap = initial_remap(&program, victim, num_targets, config)?;
        let params = Params::current(&program, &remap);
        let mut refs = vec![&params.theta];
        refs.extend(params.head_weight.iter());
        refs.extend(params.head_bias.iter());
        let adam = AdamState::for_params(&refs)?;
        Ok(Self {
            program,
            remap,
            adam,
            step: 0,
            loss_sum: 0.0,
            loss_count: 0,
            best_test: f64::NEG_INFINITY,
            evals_since_best: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.program.to_checkpoint();
        ck.set_meta("kind", "reprogram");
        ck.set_meta("remap", self.remap.to_json());
        self.remap.write_arrays(&mut ck);
        ck.set_meta("step", self.step);
        ck.set_meta("loss_sum", self.loss_sum);
        ck.set_meta("loss_count", self.loss_count);
        ck.set_meta("best_test", if self.best_test.is_finite() { json!(self.best_test) } else { Value::Null });
        ck.set_meta("evals_since_best", self.evals_since_best);
        ck.set_meta("adam_step", self.adam.step_count());
        for (i, (m, v)) in self.adam.first_moments().iter().zip(self.adam.second_moments()).enumerate() {
            ck.push_array(&format!("adam.m{i}"), m.clone());
            ck.push_array(&format!("adam.v{i}"), v.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let program = Program::from_checkpoint(ck)?;
        let remap = Remap::from_checkpoint(ck)?;
        let n = 1 + remap.head().map_or(0, |h| 1 + h.bias().is_some() as usize);
        let mut first = Vec::with_capacity(n);
        let mut second = Vec::with_capacity(n);
        for i in 0..n {
            first.push(ck.array(&format!("adam.m{i}"))?.clone());
            second.push(ck.array(&format!("adam.v{i}"))?.clone());
        }
        let adam = AdamState::from_parts(ck.meta_u64("adam_step")?, first, second)?;
        Ok(Self {
            program,
            remap,
            adam,
            step: ck.meta_u64("step")?,
            loss_sum: ck.meta_f64("loss_sum")?,
            loss_count: ck.meta_u64("loss_count")?,
            best_test: ck.meta_value("best_test")?.as_f64().unwrap_or(f64::NEG_INFINITY),
            evals_since_best: ck.meta_u64("evals_since_best")?,
        })
    }
}

pub enum TrainEvent<'a> {
    /// Loss of the batch just optimized.
    Step { step: u64, loss: f64 },
    Metrics(&'a RunMetrics),
    Checkpoint(&'a TrainState),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_metrics: Option<RunMetrics>,
    pub early_stopped: bool,
}

/// Example order: position `i` of epoch `e` is `perm_e[i]`, where `perm_e`
/// is a shuffle seeded by `(seed, e)`.
struct Schedule {
    seed: u64,
    n: usize,
    epoch: u64,
    perm: Vec<usize>,
}

impl Schedule {
    fn new(seed: u64, n: usize) -> Self {
        Self { seed, n, epoch: u64::MAX, perm: Vec::new() }
    }

    fn index(&mut self, position: u64) -> usize {
        let epoch = position / self.n as u64;
        if epoch != self.epoch {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch);
            self.perm = (0..self.n).collect();
            self.perm.shuffle(&mut rng);
            self.epoch = epoch;
        }
        self.perm[(position % self.n as u64) as usize]
    }
}

fn check_bound(state: &TrainState, test: &LabeledDataset) -> Result<()> {
    if let Program::Bounded(b) = &state.program {
        for e in test.examples.iter().take(BOUND_SPOT_CHECKS) {
            let image = b.conceal(&b.inner.pad(&e.tokens))?;
            let worst = image
                .data()
                .iter()
                .zip(b.base().data())
                .map(|(&x, &c)| (x as f64 - c as f64).abs())
                .fold(0.0, f64::max);
            if worst > b.epsilon() {
                return Err(XmarError::invalid(format!(
                    "concealed image deviates by {worst} from the base image, bound is {}",
                    b.epsilon()
                )));
            }
        }
    }
    Ok(())
}

/// Runs optimizer steps from `state.step()` up to `config.max_steps`.
pub fn train(
    state: &mut TrainState,
    victim: &VictimModel,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    config: &TrainConfig,
    observer: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainSummary> {
    config.validate()?;
    if !victim.is_frozen() {
        return Err(XmarError::invalid("victim must be frozen before reprogramming"));
    }
    if train_set.num_labels() > state.remap.num_targets() {
        return Err(XmarError::invalid(format!(
            "dataset has {} labels, remap covers {}",
            train_set.num_labels(),
            state.remap.num_targets()
        )));
    }
    let vocab = state.program.inner().vocab_size();
    for set in [train_set, test_set] {
        if let Some(t) = set.examples.iter().flat_map(|e| &e.tokens).find(|&&t| t >= vocab) {
            return Err(XmarError::invalid(format!("token id {t} outside the program vocabulary of {vocab}")));
        }
    }
    let train_eval = match config.train_eval_limit {
        Some(limit) if limit < train_set.len() => train_set.subset(&(0..limit.max(1)).collect::<Vec<_>>())?,
        _ => train_set.clone(),
    };
    let lr = config.effective_lr();
    let mut schedule = Schedule::new(config.seed, train_set.len());
    let started = Instant::now();
    let mut last = None;
    let mut early_stopped = false;

    while state.step < config.max_steps as u64 {
        let base = state.step * config.batch_size as u64;
        let batch: Vec<&Example> = (0..config.batch_size as u64)
            .map(|j| &train_set.examples[schedule.index(base + j)])
            .collect();
        let sequences: Vec<Vec<usize>> = batch.iter().map(|e| state.program.inner().pad(&e.tokens)).collect();
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();

        let mut tape = Tape::<f32>::new();
        let params = Params::current(&state.program, &state.remap);
        let graph = record_loss(&mut tape, &state.program, victim, &state.remap, &params, &sequences, &labels, config.lambda)?;
        let batch_loss = tape.value(graph.loss).item() as f64;
        state.loss_sum += batch_loss;
        state.loss_count += 1;
        let mut grads = tape.backward(graph.loss)?;
        let mut grad_list = vec![grads.take(graph.theta).expect("theta gradient")];
        if let Some(h) = graph.head {
            grad_list.push(grads.take(h.weight).expect("head gradient"));
            if let Some(b) = h.bias {
                grad_list.push(grads.take(b).expect("bias gradient"));
            }
        }
        let grad_refs: Vec<&Tensor<f32>> = grad_list.iter().collect();
        {
            let Params { mut theta, head_weight, head_bias } = params;
            drop(tape);
            let mut w = head_weight;
            let mut b = head_bias;
            let mut slots: Vec<&mut Tensor<f32>> = vec![&mut theta];
            slots.extend(w.iter_mut());
            slots.extend(b.iter_mut());
            state.adam.step(&mut slots, &grad_refs, lr, true)?;
            *state.program.inner_mut().theta_mut() = theta;
            if let Some(head) = state.remap.head_mut() {
                *head.weight_mut() = w.expect("head weight");
                if let (Some(slot), Some(b)) = (head.bias_mut(), b) {
                    *slot = b;
                }
            }
        }
        state.step += 1;
        observer(TrainEvent::Step { step: state.step, loss: batch_loss })?;

        let at_end = state.step == config.max_steps as u64;
        if state.step % config.eval_every as u64 == 0 || at_end {
            check_bound(state, test_set)?;
            let train_loss = state.loss_sum / state.loss_count.max(1) as f64;
            let metrics = RunMetrics {
                step: state.step,
                train_loss,
                train_acc: evaluate(&state.program, victim, &state.remap, &train_eval)?,
                test_acc: evaluate(&state.program, victim, &state.remap, test_set)?,
                elapsed_s: started.elapsed().as_secs_f64(),
            };
            state.loss_sum = 0.0;
            state.loss_count = 0;
            if metrics.test_acc > state.best_test {
                state.best_test = metrics.test_acc;
                state.evals_since_best = 0;
            } else {
                state.evals_since_best += 1;
            }
            observer(TrainEvent::Metrics(&metrics))?;
            last = Some(metrics);
            if config.patience.is_some_and(|p| state.evals_since_best >= p as u64) {
                early_stopped = true;
            }
        }
        if config.checkpoint_every.is_some_and(|k| state.step % k as u64 == 0) || at_end || early_stopped {
            observer(TrainEvent::Checkpoint(state))?;
        }
        if early_stopped {
            break;
        }
    }
    Ok(TrainSummary { steps: state.step, final_metrics: last, early_stopped })
}
