//! Sequential task training with fine-tuning, EWC and rotated EWC.
//!
//! After each task the learner keeps only its parameters, one anchor and,
//! for the rotated method, the rotation pairs of its current basis. The
//! Fisher information for a task is computed when that task ends, from the
//! task's held-out samples, and the head grows before the next task starts.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledData, TaskDataset, TaskSequence};
use crate::error::{Error, Result};
use crate::fim::{estimate_diag_fim, ewc_penalty, EwcAnchor, FimMode, DEFAULT_FIM_SAMPLES};
use crate::nn::{adam_step, argmax, Activations, AdamState, Network};
use crate::rotation::{
    accumulate_correlations, combine_network, rotate_layers, GradientLabels, RotationPair,
    RotationScope,
};

pub const DEFAULT_LAMBDA: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    /// Plain fine-tuning, no penalty.
    Ft,
    Ewc,
    /// EWC in the rotated parameter basis.
    Rewc,
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MethodKind::Ft => "ft",
            MethodKind::Ewc => "ewc",
            MethodKind::Rewc => "rewc",
        })
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ft" => Ok(MethodKind::Ft),
            "ewc" => Ok(MethodKind::Ewc),
            "rewc" => Ok(MethodKind::Rewc),
            other => Err(Error::InvalidArgument(format!(
                "unknown method {other:?} (expected ft, ewc or rewc)"
            ))),
        }
    }
}

/// A continual-learning method and its regularization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub kind: MethodKind,
    pub lambda: f64,
    /// Used by the rotated method only.
    pub scope: RotationScope,
    pub fim_samples: usize,
    pub fim_mode: FimMode,
}

impl Method {
    pub fn ft() -> Self {
        Self {
            kind: MethodKind::Ft,
            lambda: 0.0,
            scope: RotationScope::default(),
            fim_samples: DEFAULT_FIM_SAMPLES,
            fim_mode: FimMode::Sampled,
        }
    }

    pub fn ewc(lambda: f64) -> Self {
        Self {
            kind: MethodKind::Ewc,
            lambda,
            ..Self::ft()
        }
    }

    pub fn rewc(lambda: f64, scope: RotationScope) -> Self {
        Self {
            kind: MethodKind::Rewc,
            lambda,
            scope,
            ..Self::ft()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.kind == MethodKind::Ft && self.lambda != 0.0 {
            return Err(Error::InvalidArgument("fine-tuning takes no lambda".into()));
        }
        if self.fim_samples == 0 {
            return Err(Error::InvalidArgument(
                "fim sample budget must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Short label such as `ewc(l=100)` or `rewc(all_no_last,l=100)`.
    pub fn label(&self) -> String {
        match self.kind {
            MethodKind::Ft => "ft".into(),
            MethodKind::Ewc => format!("ewc(l={})", self.lambda),
            MethodKind::Rewc => format!("rewc({},l={})", self.scope, self.lambda),
        }
    }
}

/// Optimizer and schedule settings shared by every task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            lr: 0.001,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [a, b] {
        h = (h ^ v).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    h
}

/// Per-task training summary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    /// Mean cross-entropy of each epoch.
    pub epoch_loss: Vec<f64>,
    /// Mean penalty of each epoch (zero without an anchor).
    pub epoch_penalty: Vec<f64>,
    pub steps: u64,
}

/// Trains `net` on `data` with Adam, adding the anchor's penalty if given.
pub fn train_task(
    net: &mut Network,
    data: &LabeledData,
    anchor: Option<&EwcAnchor>,
    cfg: &TrainConfig,
    task: usize,
) -> Result<TrainStats> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training data is empty".into()));
    }
    if let Some(&bad) = data.labels.iter().find(|&&y| y >= net.head_classes()) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} does not fit a head of {} classes",
            net.head_classes()
        )));
    }
    let mut adam = AdamState::new(net);
    let mut stats = TrainStats::default();
    let shape = data.shape();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, task as u64, epoch as u64));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut penalty_sum, mut batches) = (0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let rows: Vec<&[f64]> = batch.iter().map(|&i| data.inputs.sample(i)).collect();
            let x = Activations::from_samples(shape, &rows)?;
            let y: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let cache = net.forward(&x)?;
            let (loss, mut grads) = net.backward(&cache, &y)?;
            if let Some(anchor) = anchor {
                let (penalty, pg) = ewc_penalty(net, anchor)?;
                grads.add_scaled(&pg, 1.0)?;
                penalty_sum += penalty;
            }
            adam_step(net, &grads, &mut adam, cfg.lr)?;
            loss_sum += loss;
            batches += 1;
        }
        if !loss_sum.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        stats.epoch_loss.push(loss_sum / batches as f64);
        stats.epoch_penalty.push(penalty_sum / batches as f64);
    }
    stats.steps = adam.step_count();
    Ok(stats)
}

/// Fraction of `data` classified correctly by argmax over the whole head.
pub fn accuracy(net: &Network, data: &LabeledData) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let classes = net.head_classes();
    let sample_len = data.shape().len();
    let mut correct = 0usize;
    for (ci, labels) in data.labels.chunks(256).enumerate() {
        let start = ci * 256;
        let x = Activations::new(
            labels.len(),
            data.shape(),
            data.inputs.data()[start * sample_len..(start + labels.len()) * sample_len].to_vec(),
        )?;
        let logits = net.logits(&x)?;
        correct += logits
            .data()
            .chunks_exact(classes)
            .zip(labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// `acc[t][k]`: accuracy on task `k`'s test set after training task `t`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub acc: Vec<Vec<f64>>,
}

impl EvalMatrix {
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.acc.len() + 1 {
            return Err(Error::dim("evaluation row", self.acc.len() + 1, row.len()));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidArgument(
                "accuracies must lie in [0, 1]".into(),
            ));
        }
        self.acc.push(row);
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.acc.len()
    }

    pub fn get(&self, t: usize, k: usize) -> Option<f64> {
        self.acc.get(t).and_then(|r| r.get(k)).copied()
    }

    /// Mean accuracy over tasks seen so far, after step `t`.
    pub fn step_average(&self, t: usize) -> f64 {
        let row = &self.acc[t];
        row.iter().sum::<f64>() / row.len() as f64
    }

    pub fn step_averages(&self) -> Vec<f64> {
        (0..self.acc.len()).map(|t| self.step_average(t)).collect()
    }

    pub fn final_row(&self) -> &[f64] {
        self.acc.last().map_or(&[], Vec::as_slice)
    }
}

/// Test accuracy of every task up to and including `upto`.
pub fn evaluate_matrix(net: &Network, tasks: &TaskSequence, upto: usize) -> Result<Vec<f64>> {
    tasks.tasks()[..=upto]
        .iter()
        .map(|t| accuracy(net, &t.test))
        .collect()
}

/// Parameters plus the single anchor and the rotation basis they live in.
#[derive(Clone, Debug)]
pub struct Learner {
    net: Network,
    anchor: Option<EwcAnchor>,
    pairs: Vec<RotationPair>,
}

impl Learner {
    pub fn new(net: Network) -> Self {
        Self {
            net,
            anchor: None,
            pairs: Vec::new(),
        }
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn anchor(&self) -> Option<&EwcAnchor> {
        self.anchor.as_ref()
    }

    pub fn pairs(&self) -> &[RotationPair] {
        &self.pairs
    }

    /// The network with any rotations fused back.
    pub fn plain_network(&self) -> Result<Network> {
        if self.pairs.is_empty() {
            Ok(self.net.clone())
        } else {
            combine_network(&self.net, &self.pairs)
        }
    }

    pub fn into_parts(self) -> (Network, Option<EwcAnchor>, Vec<RotationPair>) {
        (self.net, self.anchor, self.pairs)
    }
}

/// What [`finalize_task`] did, for reporting.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinalizeReport {
    /// Plain indices of the layers rotated.
    pub rotated_layers: Vec<usize>,
    pub fim_median: Option<f64>,
    pub fim_max: Option<f64>,
}

/// Prepares the learner for the next task after finishing `task`.
///
/// Fuses any previous rotation, then for EWC anchors the current parameters
/// with their diagonal Fisher information; the rotated method first rotates
/// the network using the task's held-out samples and anchors in that basis.
/// When `head_will_grow` the head is never rotated. The previous anchor is
/// replaced.
pub fn finalize_task(
    learner: &Learner,
    task: &TaskDataset,
    method: &Method,
    seed: u64,
    head_will_grow: bool,
) -> Result<(Learner, FinalizeReport)> {
    method.validate()?;
    let plain = learner.plain_network()?;
    let mut report = FinalizeReport::default();
    if method.kind == MethodKind::Ft {
        return Ok((Learner::new(plain), report));
    }
    let held = &task.validation;
    let budget = method.fim_samples.min(held.len());
    let fim_seed = mix(seed, task.id as u64, 0xF15);
    let (net, pairs) = match method.kind {
        MethodKind::Rewc => {
            let mut layers = method.scope.select(&plain)?;
            let head = plain.head_index()?;
            if head_will_grow && layers.contains(&head) {
                info!(
                    "scope {} would rotate the growing head; leaving it unrotated",
                    method.scope
                );
                layers.retain(|&l| l != head);
            }
            let stats = accumulate_correlations(
                &plain,
                &held.inputs,
                budget,
                GradientLabels::Model,
                fim_seed,
            )?;
            report.rotated_layers = layers.clone();
            rotate_layers(&plain, &stats, &layers)?
        }
        _ => (plain, Vec::new()),
    };
    let fim = estimate_diag_fim(&net, &held.inputs, budget, method.fim_mode, fim_seed)?;
    report.fim_median = Some(fim.median());
    report.fim_max = Some(fim.flat().into_iter().fold(0.0, f64::max));
    let anchor = EwcAnchor::new(&net, fim, method.lambda)?;
    Ok((
        Learner {
            net,
            anchor: Some(anchor),
            pairs,
        },
        report,
    ))
}

/// Per-task record of a sequence run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskDiagnostics {
    pub task: usize,
    pub train: TrainStats,
    pub finalize: Option<FinalizeReport>,
    pub seconds: f64,
}

/// A sequence in progress. Cloning after a step lets several methods share
/// the identical first task.
#[derive(Clone, Debug)]
pub struct SequenceRun {
    learner: Learner,
    eval: EvalMatrix,
    diagnostics: Vec<TaskDiagnostics>,
    next_task: usize,
}

/// Result of a full sequence.
#[derive(Clone, Debug)]
pub struct SequenceOutcome {
    pub net: Network,
    pub eval: EvalMatrix,
    pub diagnostics: Vec<TaskDiagnostics>,
}

impl SequenceRun {
    /// Checks that `net` fits the first task, growing its head if smaller.
    pub fn start(mut net: Network, tasks: &TaskSequence) -> Result<Self> {
        let needed = tasks.classes_through(0);
        if net.input_shape() != tasks.input_shape() {
            return Err(Error::dim(
                "network input",
                tasks.input_shape(),
                net.input_shape(),
            ));
        }
        match net.head_classes() {
            h if h == needed => {}
            h if h < needed => net.grow_head(needed - h)?,
            h => {
                return Err(Error::dim("head classes for the first task", needed, h));
            }
        }
        Ok(Self {
            learner: Learner::new(net),
            eval: EvalMatrix::default(),
            diagnostics: Vec::new(),
            next_task: 0,
        })
    }

    pub fn learner(&self) -> &Learner {
        &self.learner
    }

    pub fn eval(&self) -> &EvalMatrix {
        &self.eval
    }

    pub fn next_task(&self) -> usize {
        self.next_task
    }

    pub fn is_done(&self, tasks: &TaskSequence) -> bool {
        self.next_task >= tasks.len()
    }

    /// Finalizes the previous task (if any), grows the head, trains the next
    /// task and evaluates every task seen so far.
    pub fn step(&mut self, tasks: &TaskSequence, method: &Method, cfg: &TrainConfig) -> Result<()> {
        let k = self.next_task;
        let task = tasks
            .tasks()
            .get(k)
            .ok_or_else(|| Error::State("every task has already been trained".into()))?;
        let clock = Instant::now();
        let mut finalize = None;
        if k > 0 {
            let (mut learner, report) =
                finalize_task(&self.learner, &tasks.tasks()[k - 1], method, cfg.seed, true)?;
            learner.net.grow_head(task.classes.len())?;
            self.learner = learner;
            finalize = Some(report);
        }
        if self.learner.net.head_classes() != tasks.classes_through(k) {
            return Err(Error::dim(
                "head classes",
                tasks.classes_through(k),
                self.learner.net.head_classes(),
            ));
        }
        let anchor = self.learner.anchor.clone();
        let train = train_task(&mut self.learner.net, &task.train, anchor.as_ref(), cfg, k)?;
        let row = evaluate_matrix(&self.learner.net, tasks, k)?;
        info!(
            "{} task {}: loss {:.4}, accuracies {:?}",
            method.label(),
            k + 1,
            train.epoch_loss.last().copied().unwrap_or(f64::NAN),
            row.iter()
                .map(|a| (a * 1000.0).round() / 10.0)
                .collect::<Vec<_>>()
        );
        self.eval.push_row(row)?;
        self.diagnostics.push(TaskDiagnostics {
            task: k,
            train,
            finalize,
            seconds: clock.elapsed().as_secs_f64(),
        });
        self.next_task += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<SequenceOutcome> {
        let net = self.learner.plain_network()?;
        if self.next_task == 0 {
            warn!("sequence finished before any task was trained");
        }
        Ok(SequenceOutcome {
            net,
            eval: self.eval,
            diagnostics: self.diagnostics,
        })
    }
}

/// Trains `tasks` in order with `method` and returns the evaluation matrix.
pub fn run_sequence(
    net: Network,
    tasks: &TaskSequence,
    method: &Method,
    cfg: &TrainConfig,
) -> Result<SequenceOutcome> {
    method.validate()?;
    let mut run = SequenceRun::start(net, tasks)?;
    while !run.is_done(tasks) {
        run.step(tasks, method, cfg)?;
    }
    run.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_tasks;
    use crate::nn::build_network;

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 32,
            lr: 0.01,
            seed: 4,
        }
    }

    #[test]
    fn single_task_matrix_is_plain_accuracy() {
        let tasks = synthetic_tasks(0, 1, 3, 6, 8.0).unwrap();
        let net = build_network(&"mlp-6-16-3".parse().unwrap(), 1).unwrap();
        let out = run_sequence(net, &tasks, &Method::ft(), &quick()).unwrap();
        assert_eq!(out.eval.steps(), 1);
        let acc = accuracy(&out.net, &tasks.tasks()[0].test).unwrap();
        assert_eq!(out.eval.get(0, 0), Some(acc));
        assert!(acc > 0.95);
    }

    #[test]
    fn head_is_grown_per_task() {
        let tasks = synthetic_tasks(1, 3, 2, 4, 8.0).unwrap();
        let net = build_network(&"mlp-4-8-1".parse().unwrap(), 1).unwrap();
        let out = run_sequence(
            net,
            &tasks,
            &Method::rewc(10.0, RotationScope::All),
            &quick(),
        )
        .unwrap();
        assert_eq!(out.net.head_classes(), 6);
        assert!(!out.net.is_rotated());
        assert_eq!(
            out.eval.acc.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        let too_big = build_network(&"mlp-4-8-5".parse().unwrap(), 1).unwrap();
        assert!(run_sequence(too_big, &tasks, &Method::ft(), &quick()).is_err());
    }

    #[test]
    fn finalize_contracts() {
        let tasks = synthetic_tasks(2, 2, 2, 5, 6.0).unwrap();
        let net = build_network(&"mlp-5-7-6-2".parse().unwrap(), 3).unwrap();
        let mut run = SequenceRun::start(net, &tasks).unwrap();
        run.step(&tasks, &Method::ft(), &quick()).unwrap();
        let learner = run.learner().clone();
        let task = &tasks.tasks()[0];

        let (ft, _) = finalize_task(&learner, task, &Method::ft(), 0, true).unwrap();
        assert!(ft.anchor().is_none());
        assert_eq!(ft.net(), learner.net());

        let (ewc, _) = finalize_task(&learner, task, &Method::ewc(100.0), 0, true).unwrap();
        let anchor = ewc.anchor().unwrap();
        let theta: Vec<Vec<f64>> = ewc
            .net()
            .params()
            .into_iter()
            .map(<[f64]>::to_vec)
            .collect();
        assert_eq!(anchor.theta_star(), theta.as_slice());
        assert_eq!(ewc_penalty(ewc.net(), anchor).unwrap().0, 0.0);

        let (rewc, report) = finalize_task(
            &learner,
            task,
            &Method::rewc(100.0, RotationScope::All),
            0,
            true,
        )
        .unwrap();
        assert_eq!(report.rotated_layers, vec![0, 2]);
        assert!(rewc.net().is_rotated());
        assert_eq!(
            rewc.anchor().unwrap().layout().hash(),
            rewc.net().layout().hash()
        );
        assert_ne!(rewc.net().layout().hash(), learner.net().layout().hash());
        assert_eq!(
            ewc_penalty(rewc.net(), rewc.anchor().unwrap()).unwrap().0,
            0.0
        );
        let x = &task.test.inputs;
        let (a, b) = (
            learner.net().logits(x).unwrap(),
            rewc.net().logits(x).unwrap(),
        );
        let gap = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(gap < 1e-8);
    }

    #[test]
    fn zero_lambda_matches_fine_tuning_exactly() {
        let tasks = synthetic_tasks(3, 2, 2, 5, 4.0).unwrap();
        let net = build_network(&"mlp-5-8-2".parse().unwrap(), 2).unwrap();
        let ft = run_sequence(net.clone(), &tasks, &Method::ft(), &quick()).unwrap();
        let ewc = run_sequence(net, &tasks, &Method::ewc(0.0), &quick()).unwrap();
        assert_eq!(ft.eval, ewc.eval);
        assert_eq!(ft.net.flat_params(), ewc.net.flat_params());
    }

    #[test]
    fn untrained_head_is_near_chance() {
        let tasks = synthetic_tasks(4, 1, 10, 8, 6.0).unwrap();
        let mean: f64 = (0..30)
            .map(|seed| {
                let net = build_network(&"mlp-8-10".parse().unwrap(), seed).unwrap();
                evaluate_matrix(&net, &tasks, 0).unwrap()[0]
            })
            .sum::<f64>()
            / 30.0;
        assert!((mean - 0.1).abs() < 0.03, "{mean}");
    }

    #[test]
    fn eval_matrix_shape_is_enforced() {
        let mut m = EvalMatrix::default();
        m.push_row(vec![0.9]).unwrap();
        assert!(m.push_row(vec![0.5]).is_err());
        assert!(m.push_row(vec![0.5, 1.5]).is_err());
        m.push_row(vec![0.5, 0.7]).unwrap();
        assert!((m.step_average(1) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn method_validation() {
        let mut ft = Method::ft();
        ft.lambda = 1.0;
        assert!(ft.validate().is_err());
        assert!(Method::ewc(-1.0).validate().is_err());
        assert_eq!(
            Method::rewc(100.0, RotationScope::AllNoLast).label(),
            "rewc(all_no_last,l=100)"
        );
        assert_eq!("rewc".parse::<MethodKind>().unwrap(), MethodKind::Rewc);
    }
}
