//! Stage-wise training without rehearsal, evaluation, and the sequence runner.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{LabError, Result};
use crate::groups::{Adam, AdamConfig, FreezeMask, ParamGroup};
use crate::metrics::{AccuracyMatrix, HELD_OUT};
use crate::mitigation::{
    attach_lora, is_moe_param, merge_lora, moe_wrap_all, wise_ft_interpolate, MitigationConfig, MitigationKind,
};
use crate::model::{greedy_decode, ModelConfig, TinyLmm};
use crate::objectives::{batch_loss, Distill, TaskExample};
use crate::rng::{substream, LabRng, RngState, STREAM_DATA, STREAM_DISTILL, STREAM_INIT};
use crate::tasks::{generate_task, SyntheticTaskSpec, TaskDataset, TaskKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Optimizer steps per stage; `None` means one epoch over the stage data.
    pub steps: Option<usize>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 8, steps: None, adam: AdamConfig::default() }
    }
}

impl TrainConfig {
    pub fn steps_for(&self, n: usize) -> usize {
        self.steps.unwrap_or_else(|| n.div_ceil(self.batch_size.max(1)))
    }
}

/// Record of which task's data each stage read.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DataLedger {
    entries: Vec<(usize, TaskKind)>,
}

impl DataLedger {
    pub fn record(&mut self, stage: usize, kind: TaskKind) {
        if self.entries.last() != Some(&(stage, kind)) {
            self.entries.push((stage, kind));
        }
    }

    pub fn entries(&self) -> &[(usize, TaskKind)] {
        &self.entries
    }

    /// Every access during stage `k` (1-based) touched only `stages[k − 1]`.
    pub fn assert_rehearsal_free(&self, stages: &[SyntheticTaskSpec]) -> Result<()> {
        for &(stage, kind) in &self.entries {
            let expected = stage.checked_sub(1).and_then(|i| stages.get(i)).map(|s| s.kind);
            if expected != Some(kind) {
                return Err(LabError::Internal(format!("stage {stage} read {kind} data")));
            }
        }
        Ok(())
    }
}

/// Outcome of one training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub steps: usize,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

/// Everything a stage's training loop needs besides the model.
pub struct StageTrainer<'a> {
    pub data: &'a TaskDataset,
    pub mask: &'a FreezeMask,
    pub cfg: &'a TrainConfig,
    pub distill: Option<Distill<'a>>,
}

impl StageTrainer<'_> {
    /// Train in place; `on_step(step, model, data_rng)` runs after every optimizer
    /// step (1-based).
    pub fn run(
        &self,
        model: &mut TinyLmm,
        stage: usize,
        data_rng: &mut LabRng,
        distill_rng: &mut LabRng,
        ledger: &mut DataLedger,
        mut on_step: impl FnMut(usize, &TinyLmm, &LabRng) -> Result<()>,
    ) -> Result<StageReport> {
        let train = &self.data.train;
        if train.is_empty() {
            return Err(LabError::Input(format!("task {} has no training data", self.data.spec.kind)));
        }
        let bs = self.cfg.batch_size.max(1);
        let steps = self.cfg.steps_for(train.len());
        let mut adam = Adam::new(self.cfg.adam, steps);
        adam.apply_freeze(self.mask.clone(), model.params())?;
        let mask = self.mask;
        let trainable = |n: &str| mask.contains(n);

        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        let mut losses = Vec::with_capacity(steps);
        for step in 0..steps {
            let mut idx = Vec::with_capacity(bs);
            while idx.len() < bs.min(train.len()) {
                if cursor == order.len() {
                    order = (0..train.len()).collect();
                    order.shuffle(data_rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            ledger.record(stage, self.data.spec.kind);
            let batch = crate::objectives::TaskBatch::new(idx.iter().map(|&i| train[i].clone()).collect());
            let out = batch_loss(model, &batch, self.distill, distill_rng, &trainable, true)?;
            if !out.loss.is_finite() {
                return Err(LabError::Diverged(format!("loss {} at stage {stage} step {}", out.loss, step + 1)));
            }
            losses.push(out.loss);
            adam.step(model.params_mut(), &out.grads)?;
            on_step(step + 1, model, data_rng)?;
        }
        Ok(StageReport { steps, final_loss: losses.last().copied().unwrap_or(f64::NAN), losses })
    }
}

/// Exact-match accuracy (0–100) of greedy decoding over the full answer.
pub fn evaluate(model: &TinyLmm, examples: &[TaskExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(LabError::Input("empty evaluation set".into()));
    }
    let correct: Vec<bool> = examples
        .par_iter()
        .map(|ex| {
            let max_len = ex.answer.len().max(1);
            Ok(greedy_decode(model, &ex.prompt, &ex.visual, max_len)? == ex.answer)
        })
        .collect::<Result<_>>()?;
    Ok(100.0 * correct.iter().filter(|&&c| c).count() as f64 / examples.len() as f64)
}

/// Full description of a sequential run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfig {
    pub stages: Vec<SyntheticTaskSpec>,
    pub held_out: Vec<SyntheticTaskSpec>,
    pub group: ParamGroup,
    #[serde(default)]
    pub mitigation: MitigationConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub seed: u64,
}

impl SequenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(LabError::Config("curriculum has no stages".into()));
        }
        if self.held_out.is_empty() {
            return Err(LabError::Config("held-out suite is empty".into()));
        }
        let kinds: BTreeSet<TaskKind> = self.stages.iter().map(|s| s.kind).collect();
        if kinds.len() != self.stages.len() {
            return Err(LabError::Config("a task may appear only once in a curriculum".into()));
        }
        if self.held_out.iter().any(|h| kinds.contains(&h.kind)) {
            return Err(LabError::Config("held-out tasks may not be trained".into()));
        }
        if self.train.batch_size == 0 {
            return Err(LabError::Config("batch_size must be >= 1".into()));
        }
        self.mitigation.validate()
    }

    pub fn target_names(&self) -> Vec<String> {
        self.stages.iter().map(|s| s.kind.name().to_string()).collect()
    }
}

/// The three shipped stage orders.
pub fn curriculum_order(which: usize) -> Option<[TaskKind; 5]> {
    use TaskKind::*;
    match which {
        0 => Some([Classify, Count, AttributeVqa, CopyOcr, ClockRead]),
        1 => Some([ClockRead, CopyOcr, AttributeVqa, Count, Classify]),
        2 => Some([AttributeVqa, Classify, CopyOcr, ClockRead, Count]),
        _ => None,
    }
}

/// Stage specs for one of the shipped orders.
pub fn default_stages(which: usize, seed: u64, train_n: usize, eval_n: usize) -> Result<Vec<SyntheticTaskSpec>> {
    let order = curriculum_order(which).ok_or_else(|| LabError::Config(format!("no curriculum order {which}")))?;
    Ok(order.iter().map(|&k| SyntheticTaskSpec::new(k, seed, train_n, eval_n)).collect())
}

pub fn default_held_out(seed: u64, eval_n: usize) -> Vec<SyntheticTaskSpec> {
    vec![SyntheticTaskSpec::new(TaskKind::CaptionHeldOut, seed, 0, eval_n)]
}

/// Per-stage output of [`run_sequence`].
#[derive(Clone, Debug)]
pub struct StageOutcome {
    /// Training state after the stage (what the next stage continues from).
    pub checkpoint: Checkpoint,
    /// The model that was evaluated (differs from the checkpoint only for WiSE-FT).
    pub evaluated: TinyLmm,
    pub report: StageReport,
}

#[derive(Clone, Debug)]
pub struct SequenceOutcome {
    pub matrix: AccuracyMatrix,
    pub stages: Vec<StageOutcome>,
    pub ledger: DataLedger,
}

/// Evaluation row: each target task, then the held-out aggregate.
pub fn evaluation_row(model: &TinyLmm, targets: &[TaskDataset], held_out: &[TaskDataset]) -> Result<Vec<f64>> {
    let mut row = targets.iter().map(|d| evaluate(model, &d.eval)).collect::<Result<Vec<_>>>()?;
    let held = held_out.iter().map(|d| evaluate(model, &d.eval)).collect::<Result<Vec<_>>>()?;
    row.push(held.iter().sum::<f64>() / held.len() as f64);
    Ok(row)
}

/// Trainable set for the next stage under `mitigation`; attaches fresh LoRA
/// adapters when that is the method. MoE layers must already be wrapped.
pub fn prepare_stage(
    model: &mut TinyLmm,
    group: &ParamGroup,
    mitigation: &MitigationConfig,
    init_rng: &mut LabRng,
) -> Result<FreezeMask> {
    match mitigation.kind {
        MitigationKind::Lora => {
            let names = mitigation.lora.targets.as_ref().unwrap_or(group).resolve(model.params())?;
            let adapters = attach_lora(model, &names, mitigation.lora.rank, mitigation.lora.alpha as f32, init_rng)?;
            FreezeMask::new(adapters, model.params())
        }
        MitigationKind::Moe => {
            let names: Vec<String> = model.params().names().filter(|n| is_moe_param(n)).map(String::from).collect();
            if names.is_empty() {
                return Err(LabError::Config("mixture-of-experts mitigation on an unwrapped model".into()));
            }
            FreezeMask::new(names, model.params())
        }
        _ => FreezeMask::from_group(group, model.params()),
    }
}

/// Train on each stage in order (no rehearsal), evaluating every target task
/// and the held-out aggregate after each.
pub fn run_sequence(base: &TinyLmm, cfg: &SequenceConfig) -> Result<SequenceOutcome> {
    cfg.validate()?;
    let targets = cfg.stages.iter().map(generate_task).collect::<Result<Vec<_>>>()?;
    let held_out = cfg.held_out.iter().map(generate_task).collect::<Result<Vec<_>>>()?;

    let mut columns = cfg.target_names();
    columns.push(HELD_OUT.to_string());
    let mut matrix = AccuracyMatrix::new(columns);
    matrix.push_row(evaluation_row(base, &targets, &held_out)?)?;

    let mut data_rng = substream(cfg.seed, STREAM_DATA);
    let mut distill_rng = substream(cfg.seed, STREAM_DISTILL);
    let mut init_rng = substream(cfg.seed, STREAM_INIT);
    let mut ledger = DataLedger::default();
    let mut model = base.clone();
    let mut step_total = 0u64;
    let mut outcomes = Vec::with_capacity(cfg.stages.len());
    let kind = cfg.mitigation.kind;

    if kind == MitigationKind::Moe {
        moe_wrap_all(&mut model)?;
    }

    for (i, data) in targets.iter().enumerate() {
        let stage = i + 1;
        let teacher = (kind == MitigationKind::Lwf).then(|| model.clone());
        let mask = prepare_stage(&mut model, &cfg.group, &cfg.mitigation, &mut init_rng)?;
        let trainer = StageTrainer {
            data,
            mask: &mask,
            cfg: &cfg.train,
            distill: teacher.as_ref().map(|t| Distill { teacher: t, cfg: cfg.mitigation.lwf }),
        };
        let report = trainer.run(&mut model, stage, &mut data_rng, &mut distill_rng, &mut ledger, |_, _, _| Ok(()))?;
        if kind == MitigationKind::Lora {
            merge_lora(&mut model)?;
        }
        step_total += report.steps as u64;
        let evaluated = match kind {
            MitigationKind::WiseFt => wise_ft_interpolate(base, &model, cfg.mitigation.wise_ft.beta)?,
            _ => model.clone(),
        };
        matrix.push_row(evaluation_row(&evaluated, &targets, &held_out)?)?;
        log::info!("stage {stage} ({}) done: loss {:.4}", data.spec.kind, report.final_loss);
        outcomes.push(StageOutcome {
            checkpoint: Checkpoint::new(model.clone(), step_total, RngState::capture(&data_rng)),
            evaluated,
            report,
        });
    }
    ledger.assert_rehearsal_free(&cfg.stages)?;
    Ok(SequenceOutcome { matrix, stages: outcomes, ledger })
}

/// Settings for building the base model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub train_n: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 1500, train_n: 12000, batch_size: 8, lr: 5e-3 }
    }
}

/// Fresh model trained (all parameters) on the held-out caption task, which
/// plays the role of the pretrained backbone's general capability.
pub fn pretrain_base(config: ModelConfig, seed: u64, pre: &PretrainConfig) -> Result<TinyLmm> {
    let mut model = TinyLmm::seeded(config, seed)?;
    let data = generate_task(&SyntheticTaskSpec::new(TaskKind::CaptionHeldOut, seed ^ 0x5eed_ba5e, pre.train_n, 0))?;
    let mask = FreezeMask::from_group(&ParamGroup::Full, model.params())?;
    let cfg = TrainConfig {
        batch_size: pre.batch_size,
        steps: Some(pre.steps),
        adam: AdamConfig { lr: pre.lr, ..AdamConfig::default() },
    };
    let trainer = StageTrainer { data: &data, mask: &mask, cfg: &cfg, distill: None };
    let mut data_rng = substream(seed, "pretrain");
    let mut distill_rng = substream(seed, STREAM_DISTILL);
    let mut ledger = DataLedger::default();
    trainer.run(&mut model, 0, &mut data_rng, &mut distill_rng, &mut ledger, |_, _, _| Ok(()))?;
    Ok(model)
}
