//! Training objectives: teacher-forced answer cross-entropy and distillation
//! towards a frozen teacher over sampled sequence positions.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{forward_nodes, ModelConfig, SeqInput, TinyLmm};
use crate::params::{ParamNodes, ParamStore};
use crate::tape::{reverse_grad, Gradients, NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// One supervised item: visual features, prompt tokens and the target answer.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskExample {
    pub visual: Tensor,
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
}

impl TaskExample {
    /// Answer tokens fed under teacher forcing (all but the last).
    pub fn forced_suffix(&self) -> &[u32] {
        &self.answer[..self.answer.len().saturating_sub(1)]
    }

    /// Length of the teacher-forced input sequence.
    pub fn seq_len(&self, visual_tokens: usize) -> usize {
        self.prompt.len() + visual_tokens + self.forced_suffix().len()
    }

    /// `(logit row, target token)` for every answer position. The first answer
    /// token is predicted from the last visual position.
    pub fn answer_targets(&self, visual_tokens: usize) -> Vec<(usize, usize)> {
        let first = self.prompt.len() + visual_tokens - 1;
        self.answer.iter().enumerate().map(|(t, &tok)| (first + t, tok as usize)).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskBatch {
    pub examples: Vec<TaskExample>,
}

impl TaskBatch {
    pub fn new(examples: Vec<TaskExample>) -> Self {
        Self { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub lambda: f64,
    pub tau: f64,
    pub max_positions: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { lambda: 1.0, tau: 2.0, max_positions: 1000 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(LabError::Config(format!("lwf.lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LabError::Config(format!("lwf.tau must be > 0, got {}", self.tau)));
        }
        if self.max_positions == 0 {
            return Err(LabError::Config("lwf.max_positions must be >= 1".into()));
        }
        Ok(())
    }
}

/// `min(len, max_positions)` distinct positions, uniformly without replacement, sorted.
pub fn sample_positions(len: usize, max_positions: usize, rng: &mut impl Rng) -> Vec<usize> {
    let k = len.min(max_positions);
    let mut idx = if k == len { (0..len).collect() } else { sample(rng, len, k).into_vec() };
    idx.sort_unstable();
    idx
}

/// Loss value and gradients for the trainable parameters.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub task: f64,
    pub distill: f64,
    pub grads: Gradients<f32>,
}

/// Teacher outputs and sampled positions for one example.
#[derive(Clone, Debug)]
pub struct DistillTarget<T: Scalar = f32> {
    pub rows: Vec<usize>,
    /// Teacher logits at `rows`, one row each.
    pub logits: Arc<Tensor<T>>,
}

/// Sum of answer-token negative log-likelihoods for one example, or `None`
/// when the answer span is empty.
pub fn example_task_loss<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    nodes: &ParamNodes,
    ex: &TaskExample,
) -> Result<Option<(NodeId, NodeId)>> {
    if ex.answer.is_empty() {
        return Ok(None);
    }
    let visual = ex.visual.cast::<T>();
    let trace = forward_nodes(tape, config, nodes, SeqInput { prefix: &ex.prompt, visual: &visual, suffix: ex.forced_suffix() })?;
    let targets = ex.answer_targets(config.visual_tokens);
    if let Some(&(_, t)) = targets.iter().find(|&&(_, t)| t >= config.vocab) {
        return Err(LabError::Input(format!("answer token {t} out of range for vocabulary of {}", config.vocab)));
    }
    let ce = tape.cross_entropy(trace.logits, targets)?;
    Ok(Some((ce, trace.logits)))
}

/// `τ² · mean_{j ∈ S} KL(teacher_j ‖ student_j)` for one example's logits node.
pub fn example_distill_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: NodeId,
    target: &DistillTarget<T>,
    tau: f64,
) -> Result<NodeId> {
    let kl = tape.kl_div(logits, Arc::clone(&target.logits), target.rows.clone(), tau)?;
    tape.scale(kl, T::from_f64(tau * tau / target.rows.len() as f64))
}

/// Teacher logits at sampled positions, using the student's teacher-forced layout.
pub fn distill_target(teacher: &TinyLmm, ex: &TaskExample, max_positions: usize, rng: &mut impl Rng) -> Result<DistillTarget> {
    let trace = crate::model::forward_sequence(teacher, &ex.prompt, &ex.visual, ex.forced_suffix())?;
    let rows = sample_positions(trace.logits.rows(), max_positions, rng);
    let width = trace.logits.cols();
    let mut data = Vec::with_capacity(rows.len() * width);
    for &r in &rows {
        data.extend_from_slice(trace.logits.row(r));
    }
    Ok(DistillTarget { logits: Arc::new(Tensor::new(vec![rows.len(), width], data)?), rows })
}

fn check_compatible(student: &TinyLmm, teacher: &TinyLmm) -> Result<()> {
    let (s, t) = (student.config(), teacher.config());
    if s.vocab != t.vocab || s.visual_tokens != t.visual_tokens {
        return Err(LabError::Config(format!(
            "teacher (vocab {}, visual tokens {}) incompatible with student (vocab {}, visual tokens {})",
            t.vocab, t.visual_tokens, s.vocab, s.visual_tokens
        )));
    }
    Ok(())
}

/// Distillation setup for [`batch_loss`].
#[derive(Clone, Copy)]
pub struct Distill<'a> {
    pub teacher: &'a TinyLmm,
    pub cfg: DistillConfig,
}

/// `task + λ·distill` over a batch, with gradients for names accepted by `trainable`.
///
/// One tape per example, evaluated in parallel; per-example gradients are
/// reduced in index order so results do not depend on the thread count.
/// Distillation positions are drawn from `rng` up front, in example order.
/// With `distill = None` or `λ = 0`, no teacher pass is made and `rng` is untouched.
pub fn batch_loss<R: Rng>(
    student: &TinyLmm,
    batch: &TaskBatch,
    distill: Option<Distill<'_>>,
    rng: &mut R,
    trainable: &(dyn Fn(&str) -> bool + Sync),
    with_task: bool,
) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(LabError::Input("empty batch".into()));
    }
    let distill = distill.filter(|d| d.cfg.lambda != 0.0);
    let targets: Option<Vec<DistillTarget>> = match distill {
        Some(d) => {
            d.cfg.validate()?;
            check_compatible(student, d.teacher)?;
            Some(batch.examples.iter().map(|ex| distill_target(d.teacher, ex, d.cfg.max_positions, rng)).collect::<Result<_>>()?)
        }
        None => None,
    };

    let active: Vec<usize> = (0..batch.len())
        .filter(|&i| {
            let skip = batch.examples[i].answer.is_empty();
            if skip {
                log::warn!("skipping example {i} with empty answer span");
            }
            !skip
        })
        .collect();
    if active.is_empty() && with_task {
        return Err(LabError::Input("every example in the batch has an empty answer span".into()));
    }
    let n_task = active.len().max(1) as f64;
    let n_all = batch.len() as f64;

    let per_example: Vec<Result<(f64, f64, Gradients<f32>)>> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let ex = &batch.examples[i];
            let mut tape = Tape::<f32>::new();
            let nodes = ParamNodes::bind(&mut tape, student.params(), trainable)?;
            let mut terms: Vec<NodeId> = Vec::new();
            let (mut task_v, mut dist_v) = (0.0, 0.0);
            let logits = if with_task && !ex.answer.is_empty() {
                let (ce, logits) = example_task_loss(&mut tape, student.config(), &nodes, ex)?.expect("non-empty");
                task_v = tape.value(ce).data()[0] as f64;
                terms.push(tape.scale(ce, (1.0 / n_task) as f32)?);
                Some(logits)
            } else {
                None
            };
            if let (Some(d), Some(targets)) = (distill, &targets) {
                let logits = match logits {
                    Some(l) => l,
                    None => {
                        let visual = &ex.visual;
                        forward_nodes(
                            &mut tape,
                            student.config(),
                            &nodes,
                            SeqInput { prefix: &ex.prompt, visual, suffix: ex.forced_suffix() },
                        )?
                        .logits
                    }
                };
                let dl = example_distill_loss(&mut tape, logits, &targets[i], d.cfg.tau)?;
                dist_v = tape.value(dl).data()[0] as f64;
                terms.push(tape.scale(dl, (d.cfg.lambda / n_all) as f32)?);
            }
            let grads = match terms.as_slice() {
                [] => Gradients::default(),
                [one] => reverse_grad(&tape, *one)?,
                [a, b] => {
                    let total = tape.add(*a, *b)?;
                    reverse_grad(&tape, total)?
                }
                _ => unreachable!(),
            };
            Ok((task_v, dist_v, grads))
        })
        .collect();

    let mut task = 0.0;
    let mut dist = 0.0;
    let mut grads: Option<Gradients<f32>> = None;
    for (i, r) in per_example.into_iter().enumerate() {
        let (t, d, g) = r?;
        if active.contains(&i) {
            task += t;
        }
        dist += d;
        match grads.as_mut() {
            Some(acc) => acc.accumulate(&g),
            None => grads = Some(g),
        }
    }
    let task = if with_task { task / n_task } else { 0.0 };
    let dist = if distill.is_some() { dist / n_all } else { 0.0 };
    let lambda = distill.map_or(0.0, |d| d.cfg.lambda);
    let mut grads = grads.unwrap_or_default();
    if grads.is_empty() {
        grads = zero_grads(student.params(), trainable);
    }
    Ok(LossOutput { loss: task + lambda * dist, task, distill: dist, grads })
}

fn zero_grads(params: &ParamStore, trainable: &(dyn Fn(&str) -> bool + Sync)) -> Gradients<f32> {
    let mut g = Gradients::default();
    for (name, t) in params.iter().filter(|(n, _)| trainable(n)) {
        g.insert(name.to_string(), Tensor::zeros(t.shape()));
    }
    g
}

/// Mean over examples of the summed answer-token cross-entropy; gradients for every parameter.
pub fn task_loss(model: &TinyLmm, batch: &TaskBatch) -> Result<LossOutput> {
    let mut rng = crate::rng::substream(0, crate::rng::STREAM_DISTILL);
    batch_loss(model, batch, None, &mut rng, &|_| true, true)
}

/// Distillation term alone (not multiplied by λ); gradients for every student parameter.
pub fn distill_loss<R: Rng>(
    student: &TinyLmm,
    teacher: &TinyLmm,
    batch: &TaskBatch,
    cfg: &DistillConfig,
    rng: &mut R,
) -> Result<LossOutput> {
    let cfg = DistillConfig { lambda: 1.0, ..*cfg };
    batch_loss(student, batch, Some(Distill { teacher, cfg }), rng, &|_| true, false)
}

/// `task + λ·distill`; λ = 0 reduces exactly to [`task_loss`].
pub fn combined_loss<R: Rng>(
    student: &TinyLmm,
    teacher: &TinyLmm,
    batch: &TaskBatch,
    cfg: &DistillConfig,
    rng: &mut R,
) -> Result<LossOutput> {
    batch_loss(student, batch, Some(Distill { teacher, cfg: *cfg }), rng, &|_| true, true)
}

/// Batch task loss on an existing tape (used by gradient checks in any precision).
pub fn task_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    nodes: &ParamNodes,
    batch: &TaskBatch,
) -> Result<NodeId> {
    let mut terms = Vec::new();
    for ex in &batch.examples {
        if let Some((ce, _)) = example_task_loss(tape, config, nodes, ex)? {
            terms.push(ce);
        }
    }
    if terms.is_empty() {
        return Err(LabError::Input("every example in the batch has an empty answer span".into()));
    }
    let n = terms.len() as f64;
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    tape.scale(total, T::from_f64(1.0 / n))
}

/// Batch distillation loss on an existing tape against precomputed teacher targets.
pub fn distill_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    nodes: &ParamNodes,
    batch: &TaskBatch,
    targets: &[DistillTarget<T>],
    tau: f64,
) -> Result<NodeId> {
    if batch.is_empty() || targets.len() != batch.len() {
        return Err(LabError::Contract("one distillation target per example required".into()));
    }
    let mut total: Option<NodeId> = None;
    for (ex, target) in batch.examples.iter().zip(targets) {
        let visual = ex.visual.cast::<T>();
        let trace =
            forward_nodes(tape, config, nodes, SeqInput { prefix: &ex.prompt, visual: &visual, suffix: ex.forced_suffix() })?;
        let d = example_distill_loss(tape, trace.logits, target, tau)?;
        total = Some(match total {
            Some(t) => tape.add(t, d)?,
            None => d,
        });
    }
    tape.scale(total.expect("non-empty"), T::from_f64(1.0 / batch.len() as f64))
}

/// Teacher targets evaluated in precision `T` (for gradient checks).
pub fn distill_targets_in<T: Scalar>(
    teacher: &ParamStore<T>,
    config: &ModelConfig,
    batch: &TaskBatch,
    max_positions: usize,
    rng: &mut impl Rng,
) -> Result<Vec<DistillTarget<T>>> {
    batch
        .examples
        .iter()
        .map(|ex| {
            let mut tape = Tape::<T>::new();
            let nodes = ParamNodes::bind(&mut tape, teacher, |_| false)?;
            let visual = ex.visual.cast::<T>();
            let trace = forward_nodes(
                &mut tape,
                config,
                &nodes,
                SeqInput { prefix: &ex.prompt, visual: &visual, suffix: ex.forced_suffix() },
            )?;
            let z = tape.value(trace.logits);
            let rows = sample_positions(z.rows(), max_positions, rng);
            let mut data = Vec::with_capacity(rows.len() * z.cols());
            for &r in &rows {
                data.extend_from_slice(z.row(r));
            }
            Ok(DistillTarget { logits: Arc::new(Tensor::new(vec![rows.len(), z.cols()], data)?), rows })
        })
        .collect()
}
