//! Coarse-to-fine curriculum training.
//!
//! A stage schedule walks the label tree from the root's children down to the
//! leaves: each stage trains the classifier against the labels of one stratum,
//! and at every stage boundary the head is rebuilt for the next, finer
//! stratum. With warm-up transfer each child row starts as a copy of its
//! parent's row, which preserves the coarse decision boundaries exactly: the
//! aggregated child logits equal the old parent logits up to `+ln(fan-out)`.
//! The scratch variant re-initializes the head randomly instead and serves as
//! the ablation baseline.
//!
//! Three trainers can drive the stages: plain cross entropy, free adversarial
//! training (a persistent perturbation buffer replayed several times per
//! minibatch, each replay counting against the iteration budget), and
//! KL-regularized robust training with an inner sign-step maximization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{cross_entropy, AttackError};
use crate::hierarchy::{Hierarchy, NodeRef, TreeError};
use crate::net::{log_softmax, AdamConfig, AdamState, Classifier, LinearHead, NetError};
use crate::seed::{derive_seed, stream};
use crate::synth::Dataset;

use rand::seq::SliceRandom;
use rand::Rng;

const TAG_STAGE: u64 = 10;
const TAG_BATCH: u64 = 11;
const TAG_NOISE: u64 = 12;
const TAG_HEAD: u64 = 13;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{total} iterations are too few for a {num_levels}-level curriculum (need >= {minimum})")]
    TooFewIterations {
        total: usize,
        num_levels: usize,
        minimum: usize,
    },
    #[error("head has {head} rows, stratum needs {expected}")]
    HeadSizeMismatch { head: usize, expected: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid training config: {0}")]
    ConfigInvalid(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    Exponential,
    Linear,
}

/// Iteration indices at which the active stratum deepens by one level.
/// `boundaries` has `num_levels - 1` entries, strictly increasing and all
/// below `total_iterations`; the segment after the last boundary trains the
/// leaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub total_iterations: usize,
    pub num_levels: usize,
    pub mode: ScheduleMode,
    pub boundaries: Vec<usize>,
}

/// Reference stage-start fractions for a seven-level tree; other depths use a
/// geometric profile with the same final anchor so the leaf stage always gets
/// 65% of the budget.
const SEVEN_LEVEL_FRACTIONS: [f64; 6] = [0.02, 0.04, 0.06, 0.15, 0.25, 0.35];
const PROFILE_RATIO: f64 = 1.67;
const LAST_FRACTION: f64 = 0.35;

/// Builds the deepening schedule. Exponential mode front-loads coarse stages
/// and leaves most of the budget to the finest stratum; linear mode splits the
/// budget evenly across `num_levels` segments.
pub fn make_schedule(
    total_iterations: usize,
    num_levels: usize,
    mode: ScheduleMode,
) -> Result<StageSchedule, TrainError> {
    if num_levels < 2 {
        return Err(TrainError::ConfigInvalid(format!(
            "curriculum needs at least 2 levels, got {num_levels}"
        )));
    }
    let minimum = 10 * (num_levels - 1);
    if total_iterations < minimum {
        return Err(TrainError::TooFewIterations {
            total: total_iterations,
            num_levels,
            minimum,
        });
    }
    let k = num_levels - 1;
    let mut boundaries: Vec<usize> = match mode {
        ScheduleMode::Linear => (1..=k).map(|s| total_iterations * s / num_levels).collect(),
        ScheduleMode::Exponential => {
            let fractions: Vec<f64> = if num_levels == 7 {
                SEVEN_LEVEL_FRACTIONS.to_vec()
            } else {
                (1..=k)
                    .map(|i| LAST_FRACTION * PROFILE_RATIO.powi(i as i32 - k as i32))
                    .collect()
            };
            fractions
                .iter()
                .map(|f| (f * total_iterations as f64).round() as usize)
                .collect()
        }
    };
    // Rounding can collide for tiny budgets; restore strict monotonicity
    // while keeping every boundary below the total.
    for i in 1..boundaries.len() {
        if boundaries[i] <= boundaries[i - 1] {
            boundaries[i] = boundaries[i - 1] + 1;
        }
    }
    for i in (0..boundaries.len()).rev() {
        let cap = total_iterations - (boundaries.len() - i);
        if boundaries[i] > cap {
            boundaries[i] = cap;
        }
    }
    debug_assert!(boundaries.windows(2).all(|w| w[0] < w[1]));
    debug_assert!(boundaries.last().map_or(true, |&b| b < total_iterations));
    Ok(StageSchedule {
        total_iterations,
        num_levels,
        mode,
        boundaries,
    })
}

/// One trained stage: iterations `[start, end)` against stratum `height`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub height: usize,
    pub start: usize,
    pub end: usize,
}

impl Stage {
    pub fn iterations(&self) -> usize {
        self.end - self.start
    }
}

impl StageSchedule {
    /// Materializes the trained stages. Segment `s` nominally targets height
    /// `H-1-s`, but the root stratum is a single class and cannot be trained,
    /// so the first segment is clamped to the root's children and merged with
    /// the second. Heights then descend one stratum per stage down to the
    /// leaves, and the stage lengths sum to the full budget.
    pub fn stages(&self) -> Vec<Stage> {
        let h = self.num_levels;
        let mut ends: Vec<usize> = self.boundaries.clone();
        ends.push(self.total_iterations);
        let mut stages: Vec<Stage> = Vec::new();
        let mut start = 0usize;
        for (s, &end) in ends.iter().enumerate() {
            let height = (h - 1).saturating_sub(s).min(h - 2);
            match stages.last_mut() {
                Some(prev) if prev.height == height => prev.end = end,
                _ => stages.push(Stage { height, start, end }),
            }
            start = end;
        }
        stages
    }
}

/// Child head rows copied from the parent rows one stratum up: row `i` of the
/// new head equals row `parent(i)` of `head`, biases included. The old head
/// is discarded. Requires `head` to be sized for stratum `height >= 1`.
pub fn warm_up(
    head: &LinearHead,
    height: usize,
    tree: &Hierarchy,
) -> Result<LinearHead, TrainError> {
    if height == 0 || height >= tree.num_levels() {
        return Err(TrainError::ConfigInvalid(format!(
            "cannot warm up from height {height}"
        )));
    }
    let expected = tree.level_sizes()[height];
    if head.n_classes != expected {
        return Err(TrainError::HeadSizeMismatch {
            head: head.n_classes,
            expected,
        });
    }
    let child_count = tree.level_sizes()[height - 1];
    let mut weights = Vec::with_capacity(child_count * head.feat_dim);
    let mut bias = Vec::with_capacity(child_count);
    for child in 0..child_count {
        let parent = tree
            .parent(NodeRef::new(height - 1, child))?
            .expect("non-root nodes have parents")
            .index;
        weights.extend_from_slice(head.row(parent));
        bias.push(head.bias[parent]);
    }
    Ok(LinearHead {
        n_classes: child_count,
        feat_dim: head.feat_dim,
        weights,
        bias,
    })
}

/// Maps leaf labels to their ancestors at `height`.
pub fn relabel(labels: &[usize], tree: &Hierarchy, height: usize) -> Result<Vec<usize>, TrainError> {
    let leaves = tree.num_leaves();
    labels
        .iter()
        .map(|&l| {
            if l >= leaves {
                return Err(TrainError::LabelOutOfRange {
                    label: l,
                    classes: leaves,
                });
            }
            Ok(tree.leaf_ancestor(l, height))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FatConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub replays: usize,
    pub minibatch: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TradesConfig {
    pub beta: f64,
    pub epsilon: f64,
    pub inner_alpha: f64,
    pub inner_steps: usize,
    pub minibatch: usize,
}

impl TradesConfig {
    /// Robustness weight used when nothing else is requested.
    pub const DEFAULT_BETA: f64 = 6.0;
}

/// The per-stage optimization procedure.
#[derive(Debug, Clone, Copy)]
pub enum TrainerKind {
    Clean { minibatch: usize },
    Fat(FatConfig),
    Trades(TradesConfig),
}

impl TrainerKind {
    fn minibatch(&self) -> usize {
        match self {
            TrainerKind::Clean { minibatch } => *minibatch,
            TrainerKind::Fat(cfg) => cfg.minibatch,
            TrainerKind::Trades(cfg) => cfg.minibatch,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.minibatch() == 0 {
            return Err(TrainError::ConfigInvalid("minibatch must be >= 1".into()));
        }
        match self {
            TrainerKind::Clean { .. } => Ok(()),
            TrainerKind::Fat(cfg) => {
                if cfg.replays == 0 {
                    return Err(TrainError::ConfigInvalid("replays must be >= 1".into()));
                }
                if !(cfg.epsilon.is_finite() && cfg.epsilon >= 0.0 && cfg.alpha > 0.0) {
                    return Err(TrainError::ConfigInvalid(
                        "fat eps must be >= 0 and alpha > 0".into(),
                    ));
                }
                Ok(())
            }
            TrainerKind::Trades(cfg) => {
                if !(cfg.beta.is_finite() && cfg.beta >= 0.0) {
                    return Err(TrainError::ConfigInvalid("beta must be >= 0".into()));
                }
                if !(cfg.epsilon.is_finite() && cfg.epsilon >= 0.0 && cfg.inner_alpha > 0.0) {
                    return Err(TrainError::ConfigInvalid(
                        "trades eps must be >= 0 and inner_alpha > 0".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Deterministic minibatch order: a fresh seeded shuffle per epoch.
struct BatchSampler {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        BatchSampler {
            n,
            batch: batch.min(n),
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order = (0..self.n).collect();
            let mut rng = stream(self.seed, &[TAG_BATCH, self.epoch]);
            self.order.shuffle(&mut rng);
            self.epoch += 1;
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        batch
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<(), TrainError> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(TrainError::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    Ok(())
}

/// Mean cross entropy over the batch plus the per-sample logit gradients.
fn batch_ce(
    classifier: &Classifier,
    inputs: &[Vec<f64>],
    labels: &[usize],
) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(inputs.len());
    for (x, &y) in inputs.iter().zip(labels) {
        let z = classifier.forward(x)?;
        let (loss, grad) = cross_entropy(&z, y)?;
        total += loss;
        grads.push(grad);
    }
    Ok((total / inputs.len() as f64, grads))
}

fn apply_param_step(
    classifier: &mut Classifier,
    opt: &mut AdamState,
    inputs: &[Vec<f64>],
    grads: &[Vec<f64>],
) -> Result<(), TrainError> {
    let batch: Vec<(&[f64], &[f64])> = inputs
        .iter()
        .zip(grads)
        .map(|(x, g)| (x.as_slice(), g.as_slice()))
        .collect();
    let bundle = classifier.param_gradient(&batch)?;
    opt.step(classifier, &bundle)?;
    Ok(())
}

/// Plain minibatch cross-entropy training for `iterations` optimizer steps.
/// Returns the final minibatch loss.
pub fn clean_train(
    classifier: &mut Classifier,
    data: &Dataset,
    labels: &[usize],
    minibatch: usize,
    iterations: usize,
    opt: &mut AdamState,
    seed: u64,
) -> Result<f64, TrainError> {
    TrainerKind::Clean { minibatch }.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_labels(labels, classifier.n_classes())?;
    let mut sampler = BatchSampler::new(data.len(), minibatch, seed);
    let mut last_loss = f64::NAN;
    for _ in 0..iterations {
        let idx = sampler.next_batch();
        let inputs: Vec<Vec<f64>> = idx.iter().map(|&i| data.row(i).to_vec()).collect();
        let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (loss, grads) = batch_ce(classifier, &inputs, &batch_labels)?;
        apply_param_step(classifier, opt, &inputs, &grads)?;
        last_loss = loss;
    }
    Ok(last_loss)
}

/// Free adversarial training. Each minibatch keeps a perturbation buffer that
/// is replayed `replays` times: every replay trains on `clip(x + delta)`,
/// updates the parameters, and advances `delta` with the input-gradient sign
/// from the same backward pass. Every replay counts against the iteration
/// budget, so the wall-clock cost matches plain training.
pub fn fat_train(
    classifier: &mut Classifier,
    data: &Dataset,
    labels: &[usize],
    cfg: &FatConfig,
    iterations: usize,
    opt: &mut AdamState,
    seed: u64,
) -> Result<f64, TrainError> {
    TrainerKind::Fat(*cfg).validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_labels(labels, classifier.n_classes())?;
    let mut sampler = BatchSampler::new(data.len(), cfg.minibatch, seed);
    let mut last_loss = f64::NAN;
    let mut done = 0usize;
    while done < iterations {
        let idx = sampler.next_batch();
        let clean: Vec<Vec<f64>> = idx.iter().map(|&i| data.row(i).to_vec()).collect();
        let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        // The buffer starts at zero for each fresh minibatch.
        let mut delta = vec![vec![0.0; data.dim]; clean.len()];
        for _ in 0..cfg.replays {
            if done == iterations {
                break;
            }
            let perturbed: Vec<Vec<f64>> = clean
                .iter()
                .zip(&delta)
                .map(|(x, d)| {
                    x.iter()
                        .zip(d)
                        .map(|(v, dv)| (v + dv).clamp(0.0, 1.0))
                        .collect()
                })
                .collect();
            let (loss, grads) = batch_ce(classifier, &perturbed, &batch_labels)?;
            // One backward pass serves both updates: parameters first, then
            // the perturbation ascends the same gradients.
            apply_param_step(classifier, opt, &perturbed, &grads)?;
            for ((d, x), g) in delta.iter_mut().zip(&perturbed).zip(&grads) {
                let input_grad = classifier.input_gradient(x, g)?;
                for (dv, gv) in d.iter_mut().zip(&input_grad) {
                    let step = if *gv > 0.0 {
                        cfg.alpha
                    } else if *gv < 0.0 {
                        -cfg.alpha
                    } else {
                        0.0
                    };
                    *dv = (*dv + step).clamp(-cfg.epsilon, cfg.epsilon);
                }
            }
            last_loss = loss;
            done += 1;
        }
    }
    Ok(last_loss)
}

/// KL-regularized robust training: minimizes
/// `CE(z(x), y) + beta * KL(softmax(z(x)) || softmax(z(x')))` where `x'`
/// maximizes the KL term inside the epsilon ball via sign steps. The gradient
/// flows through both branches; one optimizer step per minibatch.
pub fn trades_train(
    classifier: &mut Classifier,
    data: &Dataset,
    labels: &[usize],
    cfg: &TradesConfig,
    iterations: usize,
    opt: &mut AdamState,
    seed: u64,
) -> Result<f64, TrainError> {
    TrainerKind::Trades(*cfg).validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_labels(labels, classifier.n_classes())?;
    let mut sampler = BatchSampler::new(data.len(), cfg.minibatch, seed);
    let mut last_loss = f64::NAN;
    for step in 0..iterations {
        let idx = sampler.next_batch();
        let mut noise = stream(seed, &[TAG_NOISE, step as u64]);
        let mut inputs_clean = Vec::with_capacity(idx.len());
        let mut inputs_adv = Vec::with_capacity(idx.len());
        let mut grads_clean = Vec::with_capacity(idx.len());
        let mut grads_adv = Vec::with_capacity(idx.len());
        let mut total = 0.0;
        for &i in &idx {
            let x = data.row(i).to_vec();
            let y = labels[i];
            let (u, lp) = {
                let u = classifier.forward(&x)?;
                let lp = log_softmax(&u)?;
                (u, lp)
            };
            let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();

            // Inner maximization of the KL term, started from uniform noise
            // like the evaluation attack.
            let lower: Vec<f64> = x.iter().map(|&v| (v - cfg.epsilon).max(0.0)).collect();
            let upper: Vec<f64> = x.iter().map(|&v| (v + cfg.epsilon).min(1.0)).collect();
            let mut xp = x.clone();
            if cfg.epsilon > 0.0 {
                for v in xp.iter_mut() {
                    *v += noise.random_range(-cfg.epsilon..=cfg.epsilon);
                }
            }
            for ((v, lo), hi) in xp.iter_mut().zip(&lower).zip(&upper) {
                *v = v.clamp(*lo, *hi);
            }
            for _ in 0..cfg.inner_steps {
                let v = classifier.forward(&xp)?;
                let lq = log_softmax(&v)?;
                // d KL / d v = q - p.
                let g: Vec<f64> = lq.iter().zip(&p).map(|(l, pj)| l.exp() - pj).collect();
                let gx = classifier.input_gradient(&xp, &g)?;
                for ((vv, gv), (lo, hi)) in
                    xp.iter_mut().zip(&gx).zip(lower.iter().zip(&upper))
                {
                    let s = if *gv > 0.0 {
                        1.0
                    } else if *gv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *vv = (*vv + cfg.inner_alpha * s).clamp(*lo, *hi);
                }
            }

            let v = classifier.forward(&xp)?;
            let (objective, gu, gv) = trades_logit_grads(&u, &v, y, cfg.beta)?;
            total += objective;
            inputs_clean.push(x);
            inputs_adv.push(xp);
            grads_clean.push(gu);
            grads_adv.push(gv);
        }
        let batch_u: Vec<(&[f64], &[f64])> = inputs_clean
            .iter()
            .zip(&grads_clean)
            .map(|(x, g)| (x.as_slice(), g.as_slice()))
            .collect();
        let batch_v: Vec<(&[f64], &[f64])> = inputs_adv
            .iter()
            .zip(&grads_adv)
            .map(|(x, g)| (x.as_slice(), g.as_slice()))
            .collect();
        let mut bundle = classifier.param_gradient(&batch_u)?;
        bundle.add(&classifier.param_gradient(&batch_v)?)?;
        opt.step(classifier, &bundle)?;
        last_loss = total / idx.len() as f64;
    }
    Ok(last_loss)
}

/// Per-sample robust objective `CE(u, y) + beta * KL(softmax(u) || softmax(v))`
/// with its gradients in both logit vectors:
/// `d/du_j = ce_grad_j + beta * p_j (lp_j - lq_j - KL)` and
/// `d/dv_j = beta * (q_j - p_j)`.
pub fn trades_logit_grads(
    u: &[f64],
    v: &[f64],
    y: usize,
    beta: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>), TrainError> {
    let lp = log_softmax(u)?;
    let lq = log_softmax(v)?;
    let p: Vec<f64> = lp.iter().map(|e| e.exp()).collect();
    let kl: f64 = p
        .iter()
        .zip(&lp)
        .zip(&lq)
        .map(|((pj, lpj), lqj)| pj * (lpj - lqj))
        .sum();
    let (ce, ce_grad) = cross_entropy(u, y)?;
    let gu: Vec<f64> = ce_grad
        .iter()
        .zip(&p)
        .zip(lp.iter().zip(&lq))
        .map(|((g, pj), (lpj, lqj))| g + beta * pj * (lpj - lqj - kl))
        .collect();
    let gv: Vec<f64> = lq
        .iter()
        .zip(&p)
        .map(|(lqj, pj)| beta * (lqj.exp() - pj))
        .collect();
    Ok((ce + beta * kl, gu, gv))
}

/// Scalar objective of [`trades_train`] for one sample with `x'` held fixed;
/// used by gradient checks.
pub fn trades_objective(
    classifier: &Classifier,
    x: &[f64],
    x_adv: &[f64],
    y: usize,
    beta: f64,
) -> Result<f64, TrainError> {
    let u = classifier.forward(x)?;
    let v = classifier.forward(x_adv)?;
    Ok(trades_logit_grads(&u, &v, y, beta)?.0)
}

/// How the head crosses a stage boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadTransfer {
    /// Copy each parent row into its children (the curriculum proper).
    WarmUp,
    /// Fresh random head per stage (ablation baseline).
    Scratch,
}

/// Per-stage training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub height: usize,
    pub iterations: usize,
    pub final_loss: f64,
}

/// Runs the full curriculum. The classifier must arrive with its head sized
/// for the coarsest trained stratum (the root's children); it leaves with a
/// leaf-stratum head. Each stage gets a fresh optimizer; the sum of stage
/// iterations equals the schedule's total budget exactly.
#[allow(clippy::too_many_arguments)]
pub fn chat_train(
    classifier: &mut Classifier,
    tree: &Hierarchy,
    data: &Dataset,
    labels: &[usize],
    schedule: &StageSchedule,
    trainer: &TrainerKind,
    adam: AdamConfig,
    transfer: HeadTransfer,
    seed: u64,
) -> Result<Vec<StageReport>, TrainError> {
    trainer.validate()?;
    if schedule.num_levels != tree.num_levels() {
        return Err(TrainError::ConfigInvalid(format!(
            "schedule built for {} levels, tree has {}",
            schedule.num_levels,
            tree.num_levels()
        )));
    }
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_labels(labels, tree.num_leaves())?;
    let stages = schedule.stages();
    let first = stages.first().expect("schedule has at least one stage");
    let expected = tree.level_sizes()[first.height];
    if classifier.n_classes() != expected {
        return Err(TrainError::HeadSizeMismatch {
            head: classifier.n_classes(),
            expected,
        });
    }

    let mut reports = Vec::with_capacity(stages.len());
    for (s, stage) in stages.iter().enumerate() {
        let stage_labels = relabel(labels, tree, stage.height)?;
        let stage_seed = derive_seed(seed, &[TAG_STAGE, s as u64]);
        let mut opt = AdamState::new(classifier, adam);
        let final_loss = match trainer {
            TrainerKind::Clean { minibatch } => clean_train(
                classifier,
                data,
                &stage_labels,
                *minibatch,
                stage.iterations(),
                &mut opt,
                stage_seed,
            )?,
            TrainerKind::Fat(cfg) => fat_train(
                classifier,
                data,
                &stage_labels,
                cfg,
                stage.iterations(),
                &mut opt,
                stage_seed,
            )?,
            TrainerKind::Trades(cfg) => trades_train(
                classifier,
                data,
                &stage_labels,
                cfg,
                stage.iterations(),
                &mut opt,
                stage_seed,
            )?,
        };
        reports.push(StageReport {
            stage: s,
            height: stage.height,
            iterations: stage.iterations(),
            final_loss,
        });
        if stage.height > 0 {
            let new_head = match transfer {
                HeadTransfer::WarmUp => warm_up(&classifier.head, stage.height, tree)?,
                HeadTransfer::Scratch => LinearHead::scaled_uniform(
                    tree.level_sizes()[stage.height - 1],
                    classifier.head.feat_dim,
                    derive_seed(seed, &[TAG_HEAD, s as u64]),
                ),
            };
            *classifier = classifier.with_head(new_head)?;
        }
    }
    Ok(reports)
}

/// Head sized for the coarsest trained stratum, ready for [`chat_train`].
pub fn curriculum_start(
    extractor_dims: &[usize],
    tree: &Hierarchy,
    seed: u64,
) -> Classifier {
    let coarse = tree.level_sizes()[tree.num_levels() - 2];
    Classifier::new(crate::net::Mlp::new(extractor_dims, seed), coarse, derive_seed(seed, &[TAG_HEAD]))
}
