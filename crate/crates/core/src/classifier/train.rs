use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{filter_retained, smoothed_targets, EnsembleState};
use super::metrics::{classification_metrics, Metrics};
use super::model::Classifier;
use crate::error::{Error, Result};
use crate::lm::{Backbone, LabeledSequence};
use crate::numerics::{Adam, Gradients, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    /// Label smoothing `ε` for both stages.
    pub epsilon: f64,
    /// Ensemble momentum `γ`.
    pub gamma: f64,
    /// Weight `λ` of the ensemble regularizer.
    pub lambda: f64,
    /// Filter threshold `δ`.
    pub delta: f64,
    /// Stage-2 steps between ensemble refreshes.
    pub period: usize,
    /// Stage-2 steps `T`.
    pub steps: usize,
    pub stage2_lr: f64,
    pub stage2_batch: usize,
    /// Stage-1 Adam learning rates tried.
    pub stage1_lrs: Vec<f64>,
    /// Stage-1 batch sizes tried.
    pub stage1_batches: Vec<usize>,
    pub stage1_steps: usize,
    /// Record per-sample ensemble states after every refresh.
    pub trace: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.15,
            gamma: 0.9,
            lambda: 20.0,
            delta: 0.8,
            period: 20,
            steps: 600,
            stage2_lr: 1e-3,
            stage2_batch: 16,
            stage1_lrs: alloc::vec![1e-3, 2e-3],
            stage1_batches: alloc::vec![4, 8],
            stage1_steps: 100,
            trace: false,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad("epsilon must lie in [0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be non-negative");
        }
        if !(0.0..1.0).contains(&self.delta) {
            return bad("delta must lie in [0, 1)");
        }
        if self.period == 0 || self.stage2_batch == 0 {
            return bad("period and stage-2 batch size must be positive");
        }
        if self.stage1_lrs.is_empty() || self.stage1_batches.is_empty() || self.stage1_batches.contains(&0) {
            return bad("stage-1 grid must be non-empty with positive batch sizes");
        }
        if [self.stage2_lr].iter().chain(&self.stage1_lrs).any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return bad("learning rates must be finite and non-negative");
        }
        Ok(())
    }
}

/// Stage-1 model and the grid point that produced it.
#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    pub classifier: Classifier,
    pub lr: f64,
    pub batch: usize,
    pub dev_accuracy: f64,
    /// Dev accuracy of every grid point, in `lrs × batches` order.
    pub grid: Vec<(f64, usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Step {
    pub step: usize,
    pub loss: f64,
    /// Retained samples the step's minibatch was drawn from.
    pub retained: usize,
}

/// One sample's ensemble state after a refresh.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleTrace {
    pub sample_id: u64,
    pub t: u32,
    pub z_bar: Vec<f64>,
    pub retained: bool,
}

#[derive(Debug, Clone)]
pub struct Stage2Outcome {
    pub classifier: Classifier,
    pub history: Vec<Stage2Step>,
    /// `(step, retained count)` after each refresh.
    pub refreshes: Vec<(usize, usize)>,
    pub trace: Vec<EnsembleTrace>,
    /// Whether any prediction hit the probability floor.
    pub floored: bool,
}

fn check_data(data: &[LabeledSequence], num_labels: usize) -> Result<()> {
    if let Some(s) = data.iter().find(|s| s.label >= num_labels) {
        return Err(Error::LabelOutOfRange { label: s.label, num_labels });
    }
    if data.iter().any(|s| s.tokens.is_empty()) {
        return Err(Error::InvalidSequence("empty sequence"));
    }
    Ok(())
}

/// Batch-mean classification loss and its gradient. `ensembles[i] = None` turns the
/// regularizer off for that sample.
pub fn class_loss_gradient(
    clf: &Classifier,
    batch: &[&LabeledSequence],
    ensembles: &[Option<&[f64]>],
    epsilon: f64,
    lambda: f64,
) -> Result<(f64, Gradients, bool)> {
    let mut tape = Tape::new();
    let w = clf.params().bind(&mut tape);
    let mut total = None;
    let mut floored = false;
    let l = clf.num_labels();
    for (seq, ens) in batch.iter().zip(ensembles) {
        let lp = clf.record(&mut tape, &w, seq)?;
        floored |= tape.value(lp).data().iter().any(|v| *v < libm::log(super::loss::PROB_FLOOR));
        let q = smoothed_targets(seq.label, l, epsilon)?;
        let qv = tape.input(Tensor::from_fn(&[l], |i| q[i]));
        let ce = tape.dot(qv, lp);
        let mut loss = tape.scale(ce, -1.0);
        if let (Some(z), true) = (ens, lambda > 0.0) {
            let zv = tape.input(Tensor::from_fn(&[l], |i| z[i]));
            let cross = tape.dot(zv, lp);
            let entropy: f64 = z.iter().filter(|v| **v > 0.0).map(|v| v * libm::log(*v)).sum();
            let reg = tape.add_scalar(cross, -entropy);
            let reg = tape.scale(reg, -lambda);
            loss = tape.add(loss, reg);
        }
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss),
        });
    }
    let total = total.ok_or(Error::Empty("minibatch"))?;
    let mean = tape.scale(total, 1.0 / batch.len() as f64);
    let grad = tape.backward(mean)?.wrt(clf.params());
    Ok((tape.scalar(mean), grad, floored))
}

fn fit_stage1(init: &Classifier, train: &[LabeledSequence], lr: f64, batch: usize, steps: usize, epsilon: f64, seed: u64) -> Result<Classifier> {
    let mut clf = init.clone();
    let mut adam = Adam::new(clf.params(), lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = batch.min(train.len());
    for step in 0..steps {
        let idx = sample(&mut rng, train.len(), b);
        let items: Vec<&LabeledSequence> = idx.iter().map(|i| &train[i]).collect();
        let (loss, grad, _) = class_loss_gradient(&clf, &items, &alloc::vec![None; b], epsilon, 0.0)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::Divergence { step });
        }
        adam.step(clf.params_mut(), &grad);
    }
    Ok(clf)
}

/// Supervised fitting on the few-shot set with smoothed cross-entropy; each grid point
/// starts from the same initialization and the best dev accuracy wins (first on ties).
pub fn train_stage1(
    backbone: &Backbone,
    train: &[LabeledSequence],
    dev: &[LabeledSequence],
    num_labels: usize,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<Stage1Outcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    check_data(train, num_labels)?;
    check_data(dev, num_labels)?;
    let init = Classifier::from_backbone(backbone, num_labels, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut best: Option<Stage1Outcome> = None;
    let mut grid = Vec::new();
    for &lr in &config.stage1_lrs {
        for &batch in &config.stage1_batches {
            let clf = fit_stage1(&init, train, lr, batch, config.stage1_steps, config.epsilon, seed ^ 0x5157)?;
            let acc = if dev.is_empty() { 0.0 } else { evaluate_classifier(&clf, dev)?.accuracy };
            grid.push((lr, batch, acc));
            if best.as_ref().is_none_or(|b| acc > b.dev_accuracy) {
                best = Some(Stage1Outcome { classifier: clf, lr, batch, dev_accuracy: acc, grid: Vec::new() });
            }
        }
    }
    let mut out = best.expect("non-empty grid");
    out.grid = grid;
    Ok(out)
}

/// Predictions on every sample.
fn refresh(clf: &Classifier, data: &[LabeledSequence], states: &mut [EnsembleState], gamma: f64) -> Result<()> {
    for (seq, state) in data.iter().zip(states.iter_mut()) {
        let p = clf.predict_proba(seq)?;
        state.update(&p, gamma);
    }
    Ok(())
}

/// Regularized fitting on generated data: smoothed cross-entropy plus the ensemble
/// regularizer, minibatches drawn from the retained samples, and a refresh of every
/// sample's ensemble followed by re-filtering every `period` steps.
pub fn train_stage2(stage1: &Classifier, generated: &[LabeledSequence], config: &ClassifierConfig, seed: u64) -> Result<Stage2Outcome> {
    config.validate()?;
    let mut clf = stage1.clone();
    if config.steps == 0 {
        return Ok(Stage2Outcome { classifier: clf, history: Vec::new(), refreshes: Vec::new(), trace: Vec::new(), floored: false });
    }
    if generated.is_empty() {
        return Err(Error::Empty("generated set"));
    }
    check_data(generated, clf.num_labels())?;
    let labels: Vec<usize> = generated.iter().map(|s| s.label).collect();
    let mut states = alloc::vec![EnsembleState::new(clf.num_labels()); generated.len()];
    let mut retained: Vec<usize> = (0..generated.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::with_capacity(config.steps);
    let mut refreshes = Vec::new();
    let mut trace = Vec::new();
    let mut floored = false;
    for step in 0..config.steps {
        let mut loss = f64::NAN;
        if !retained.is_empty() {
            let b = config.stage2_batch.min(retained.len());
            let idx = sample(&mut rng, retained.len(), b);
            let picked: Vec<usize> = idx.iter().map(|i| retained[i]).collect();
            let items: Vec<&LabeledSequence> = picked.iter().map(|&i| &generated[i]).collect();
            let ens: Vec<Option<&[f64]>> =
                picked.iter().map(|&i| (!states[i].is_fresh()).then_some(states[i].z_bar.as_slice())).collect();
            let (l, grad, f) = class_loss_gradient(&clf, &items, &ens, config.epsilon, config.lambda)?;
            if !l.is_finite() || !grad.is_finite() {
                return Err(Error::Divergence { step });
            }
            floored |= f;
            clf.params_mut().sgd_step(&grad, config.stage2_lr);
            loss = l;
        }
        history.push(Stage2Step { step, loss, retained: retained.len() });
        if (step + 1) % config.period == 0 {
            refresh(&clf, generated, &mut states, config.gamma)?;
            retained = filter_retained(&labels, &states, config.delta);
            refreshes.push((step + 1, retained.len()));
            if config.trace {
                let mut keep = alloc::vec![false; generated.len()];
                for &i in &retained {
                    keep[i] = true;
                }
                for (i, s) in states.iter().enumerate() {
                    trace.push(EnsembleTrace { sample_id: generated[i].id, t: s.t, z_bar: s.z_bar.clone(), retained: keep[i] });
                }
            }
        }
    }
    Ok(Stage2Outcome { classifier: clf, history, refreshes, trace, floored })
}

#[derive(Debug, Clone)]
pub struct ClassifierOutcome {
    pub stage1: Stage1Outcome,
    pub stage2: Stage2Outcome,
}

/// Both stages in sequence.
pub fn train_classifier(
    backbone: &Backbone,
    train: &[LabeledSequence],
    dev: &[LabeledSequence],
    generated: &[LabeledSequence],
    num_labels: usize,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<ClassifierOutcome> {
    let stage1 = train_stage1(backbone, train, dev, num_labels, config, seed)?;
    let stage2 = train_stage2(&stage1.classifier, generated, config, seed.wrapping_add(1))?;
    Ok(ClassifierOutcome { stage1, stage2 })
}

pub fn evaluate_classifier(clf: &Classifier, data: &[LabeledSequence]) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let predicted = data.iter().map(|s| clf.predict(s)).collect::<Result<Vec<_>>>()?;
    let actual: Vec<usize> = data.iter().map(|s| s.label).collect();
    classification_metrics(&predicted, &actual, clf.num_labels())
}
