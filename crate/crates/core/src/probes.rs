//! Output-distribution probes: the number-token bias and layer-wise
//! residual-to-logit attribution.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::error::{LabError, Result};
use crate::model::{forward_sequence, greedy_decode_steps, TinyLmm, EMBED, HEAD};
use crate::objectives::TaskBatch;
use crate::rng::{substream, STREAM_PROBE};
use crate::tasks::{generate_task, SyntheticTaskSpec, TaskKind};
use crate::tensor::Tensor;
use crate::vocab;

/// Default probe batch size.
pub const PROBE_BATCH: usize = 100;
/// Log-spaced checkpoint grid (optimizer steps).
pub const CHECKPOINT_GRID: [usize; 4] = [1, 10, 100, 1000];

/// Token ids whose probability mass the bias probe tracks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NumericTokenSet {
    ids: BTreeSet<u32>,
}

impl NumericTokenSet {
    pub fn new(ids: impl IntoIterator<Item = u32>, vocab: usize) -> Result<Self> {
        let ids: BTreeSet<u32> = ids.into_iter().collect();
        if ids.is_empty() {
            return Err(LabError::Config("numeric token set is empty".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= vocab) {
            return Err(LabError::Config(format!("numeric token {bad} outside vocabulary of {vocab}")));
        }
        Ok(Self { ids })
    }

    /// The digit words of the synthetic vocabulary.
    pub fn digits() -> Self {
        Self { ids: vocab::digit_tokens().into_iter().collect() }
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.ids.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `max_{v ∈ C} p(v)`.
    pub fn max_prob(&self, probs: &[f32]) -> f64 {
        self.ids.iter().filter_map(|&t| probs.get(t as usize)).fold(0.0f64, |m, &p| m.max(p as f64))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeExample {
    pub visual: Tensor,
    pub prompt: Vec<u32>,
}

/// Fixed prompts reused for every checkpoint and method of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeBatch {
    pub examples: Vec<ProbeExample>,
    /// Greedy generation cap per example.
    pub max_len: usize,
}

impl ProbeBatch {
    /// `n` held-out caption prompts drawn from the experiment's `probe` stream.
    pub fn sample(seed: u64, n: usize) -> Result<Self> {
        let stream_seed = {
            use rand::Rng;
            substream(seed, STREAM_PROBE).random::<u64>()
        };
        let data = generate_task(&SyntheticTaskSpec::new(TaskKind::CaptionHeldOut, stream_seed, 0, n))?;
        Ok(Self {
            examples: data.eval.into_iter().map(|e| ProbeExample { visual: e.visual, prompt: e.prompt }).collect(),
            max_len: TaskKind::CaptionHeldOut.answer_len(),
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Bias value from recorded step distributions: per example the mean over
/// steps of the maximum numeric probability, then the mean over examples.
/// Examples with no steps are left out of the denominator.
pub fn ntb_from_step_probs(per_example: &[Vec<Vec<f32>>], set: &NumericTokenSet) -> Result<f64> {
    let mut total = 0.0;
    let mut counted = 0usize;
    for (i, steps) in per_example.iter().enumerate() {
        if steps.is_empty() {
            log::warn!("probe example {i} produced no tokens; excluded");
            continue;
        }
        total += steps.iter().map(|p| set.max_prob(p)).sum::<f64>() / steps.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(LabError::Input("no probe example produced any token".into()));
    }
    Ok(total / counted as f64)
}

/// Number-token bias of `model` on `batch` under greedy decoding.
pub fn ntb(model: &TinyLmm, batch: &ProbeBatch, set: &NumericTokenSet) -> Result<f64> {
    if batch.is_empty() {
        return Err(LabError::Input("empty probe batch".into()));
    }
    if let Some(bad) = set.ids().find(|&t| t as usize >= model.config().vocab) {
        return Err(LabError::Config(format!("numeric token {bad} outside model vocabulary")));
    }
    let stop = Some(vocab::EOS).filter(|&e| (e as usize) < model.config().vocab);
    let steps: Vec<Vec<Vec<f32>>> = batch
        .examples
        .par_iter()
        .map(|ex| {
            greedy_decode_steps(model, &ex.prompt, &ex.visual, batch.max_len, stop)
                .map(|s| s.into_iter().map(|d| d.probs).collect())
        })
        .collect::<Result<_>>()?;
    ntb_from_step_probs(&steps, set)
}

/// Per-layer logit-space drift between a base and a tuned model.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionReport {
    pub step: u64,
    /// `SA(l)` for each layer.
    pub sa: Vec<f64>,
    /// `MLP(l)` for each layer.
    pub mlp: Vec<f64>,
    /// Per example, `Σ_l (Δz_SA + Δz_MLP)` at the answer positions (`positions × V`).
    pub summed_delta: Vec<Tensor<f64>>,
    /// Per example, `z_tuned − z_base` at the same positions.
    pub direct_delta: Vec<Tensor<f64>>,
}

impl AttributionReport {
    /// `max ‖Σ_l Δz − (z_tuned − z_base)‖∞` over every token.
    pub fn completeness_error(&self) -> f64 {
        self.summed_delta.iter().zip(&self.direct_delta).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max)
    }

    /// `(step, layer, pathway, value)` rows.
    pub fn csv_rows(&self) -> Vec<(u64, usize, &'static str, f64)> {
        let mut rows = Vec::with_capacity(2 * self.sa.len());
        for (l, (&sa, &mlp)) in self.sa.iter().zip(&self.mlp).enumerate() {
            rows.push((self.step, l, "sa", sa));
            rows.push((self.step, l, "mlp", mlp));
        }
        rows
    }
}

/// CSV text for a list of attribution reports.
pub fn attribution_csv(reports: &[AttributionReport]) -> String {
    let mut out = String::from("checkpoint_step,layer,pathway,value\n");
    for r in reports {
        for (step, layer, path, v) in r.csv_rows() {
            out.push_str(&format!("{step},{layer},{path},{v}\n"));
        }
    }
    out
}

/// CSV text for `(checkpoint_step, ntb)` pairs.
pub fn ntb_csv(points: &[(u64, f64)]) -> String {
    let mut out = String::from("checkpoint_step,ntb\n");
    for (step, v) in points {
        out.push_str(&format!("{step},{v}\n"));
    }
    out
}

fn project(delta: &[f64], rows: &[usize], d: usize, head: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut picked = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        picked.extend_from_slice(&delta[r * d..(r + 1) * d]);
    }
    Tensor::new(vec![rows.len(), d], picked)?.matmul(head)
}

/// Teacher-forced attribution over the answer span of every example.
///
/// Requires identical embeddings and head in both models; otherwise the
/// per-layer deltas do not decompose the logit change.
pub fn layer_attribution(base: &TinyLmm, tuned: &TinyLmm, batch: &TaskBatch, step: u64) -> Result<AttributionReport> {
    if base.config() != tuned.config() {
        return Err(LabError::Contract("attribution needs models of the same architecture".into()));
    }
    for name in [EMBED, HEAD] {
        if base.param(name)? != tuned.param(name)? {
            return Err(LabError::Contract(format!("{name} differs between models; decomposition invalid")));
        }
    }
    if batch.is_empty() {
        return Err(LabError::Input("empty attribution batch".into()));
    }
    let cfg = base.config();
    let head = base.param(HEAD)?.cast::<f64>();
    let layers = cfg.layers;

    struct PerExample {
        sa: Vec<f64>,
        mlp: Vec<f64>,
        positions: usize,
        summed: Tensor<f64>,
        direct: Tensor<f64>,
    }

    let per: Vec<PerExample> = batch
        .examples
        .par_iter()
        .map(|ex| {
            let suffix = ex.forced_suffix();
            let tb = forward_sequence(base, &ex.prompt, &ex.visual, suffix)?;
            let tt = forward_sequence(tuned, &ex.prompt, &ex.visual, suffix)?;
            let rows: Vec<usize> = ex.answer_targets(cfg.visual_tokens).into_iter().map(|(r, _)| r).collect();
            let d = cfg.d_model;
            let mut sa = vec![0.0; layers];
            let mut mlp = vec![0.0; layers];
            let mut summed = Tensor::<f64>::zeros(&[rows.len(), cfg.vocab]);
            for l in 0..layers {
                for (acc, (t, b)) in [(&mut sa[l], (&tt.attn[l], &tb.attn[l])), (&mut mlp[l], (&tt.mlp[l], &tb.mlp[l]))] {
                    let delta: Vec<f64> = t.data().iter().zip(b.data()).map(|(x, y)| *x as f64 - *y as f64).collect();
                    let dz = project(&delta, &rows, d, &head)?;
                    *acc = dz.data().iter().map(|v| v * v).sum();
                    summed.add_assign(&dz);
                }
            }
            let mut direct = Vec::with_capacity(rows.len() * cfg.vocab);
            for &r in &rows {
                direct.extend(tt.logits.row(r).iter().zip(tb.logits.row(r)).map(|(x, y)| *x as f64 - *y as f64));
            }
            let direct = Tensor::new(vec![rows.len(), cfg.vocab], direct)?;
            Ok(PerExample { sa, mlp, positions: rows.len(), summed, direct })
        })
        .collect::<Result<_>>()?;

    let positions: usize = per.iter().map(|p| p.positions).sum();
    if positions == 0 {
        return Err(LabError::Input("attribution batch has no answer positions".into()));
    }
    let mut sa = vec![0.0; layers];
    let mut mlp = vec![0.0; layers];
    for p in &per {
        for l in 0..layers {
            sa[l] += p.sa[l];
            mlp[l] += p.mlp[l];
        }
    }
    let finish = |v: Vec<f64>| v.into_iter().map(|s| (s / positions as f64).sqrt()).collect();
    let (summed_delta, direct_delta) = per.into_iter().map(|p| (p.summed, p.direct)).unzip();
    Ok(AttributionReport { step, sa: finish(sa), mlp: finish(mlp), summed_delta, direct_delta })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_two_step() {
        let set = NumericTokenSet::new([2, 3], 4).unwrap();
        let steps = vec![vec![vec![0.1, 0.2, 0.3, 0.4], vec![0.7, 0.1, 0.1, 0.1]]];
        let v = ntb_from_step_probs(&steps, &set).unwrap();
        assert!((v - 0.25).abs() < 1e-7, "{v}");
    }

    #[test]
    fn empty_generation_is_excluded() {
        let set = NumericTokenSet::new([0], 2).unwrap();
        let v = ntb_from_step_probs(&[vec![], vec![vec![0.5, 0.5]]], &set).unwrap();
        assert_eq!(v, 0.5);
        assert!(ntb_from_step_probs(&[vec![]], &set).is_err());
    }

    #[test]
    fn set_validation() {
        assert!(NumericTokenSet::new([], 4).is_err());
        assert!(NumericTokenSet::new([4], 4).is_err());
        assert_eq!(NumericTokenSet::digits().len(), 10);
    }
}
