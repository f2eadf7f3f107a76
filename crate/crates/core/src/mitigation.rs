//! Forgetting mitigation: low-rank adapters with per-stage merge, weight-space
//! interpolation towards the base model, and two-expert MLP expansion.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::groups::ParamGroup;
use crate::model::{block_param, mlp_core, moe_core, parse_block_param, DecoderBlock, Lin, TinyLmm};
use crate::objectives::DistillConfig;
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

pub const LORA_A: &str = "lora_a";
pub const LORA_B: &str = "lora_b";
pub const LORA_ALPHA: &str = "lora_alpha";

/// Block-relative name of the routing matrix.
pub const MOE_GATE: &str = "moe.gate";
/// Block-relative prefix of the trainable expert.
pub const MOE_EXPERT: &str = "moe";

/// Interpolation weights swept for weight-space ensembling.
pub const BETA_SWEEP: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MitigationKind {
    #[default]
    None,
    Lora,
    WiseFt,
    Moe,
    Lwf,
}

impl MitigationKind {
    pub fn name(self) -> &'static str {
        match self {
            MitigationKind::None => "none",
            MitigationKind::Lora => "lora",
            MitigationKind::WiseFt => "wise_ft",
            MitigationKind::Moe => "moe",
            MitigationKind::Lwf => "lwf",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Matrices to adapt; `None` adapts the run's tuning group.
    pub targets: Option<ParamGroup>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 8.0, targets: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WiseFtConfig {
    pub beta: f64,
}

impl Default for WiseFtConfig {
    fn default() -> Self {
        Self { beta: 0.3 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MitigationConfig {
    pub kind: MitigationKind,
    pub lora: LoraConfig,
    pub wise_ft: WiseFtConfig,
    pub lwf: DistillConfig,
}

impl MitigationConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn lwf(cfg: DistillConfig) -> Self {
        Self { kind: MitigationKind::Lwf, lwf: cfg, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            MitigationKind::Lora if self.lora.rank == 0 => Err(LabError::Config("lora.rank must be >= 1".into())),
            MitigationKind::WiseFt => check_beta(self.wise_ft.beta),
            MitigationKind::Lwf => self.lwf.validate(),
            _ => Ok(()),
        }
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&beta) {
        Ok(())
    } else {
        Err(LabError::Config(format!("wise_ft.beta must lie in [0, 1], got {beta}")))
    }
}

/// Low-rank update `(α/r)·B·A` for a `d×k` weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    /// `r × k`.
    pub a: Tensor,
    /// `d × r`.
    pub b: Tensor,
    pub alpha: f32,
}

impl LoraAdapter {
    /// `B = 0`, `A ~ U(−1/√k, 1/√k)`.
    pub fn new(target: impl Into<String>, w0: &Tensor, rank: usize, alpha: f32, rng: &mut impl Rng) -> Result<Self> {
        let target = target.into();
        if w0.rank() != 2 {
            return Err(LabError::Config(format!("LoRA target {target} is not a matrix")));
        }
        let (d, k) = (w0.rows(), w0.cols());
        if rank == 0 || rank > d.min(k) {
            return Err(LabError::Config(format!("LoRA rank {rank} invalid for {d}x{k} weight {target}")));
        }
        let a = Tensor::uniform(&[rank, k], 1.0 / (k as f32).sqrt(), rng);
        Ok(Self { target, a, b: Tensor::zeros(&[d, rank]), alpha })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn scale(&self) -> f32 {
        self.alpha / self.rank() as f32
    }

    pub fn trainable_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// `(α/r)·B·A`.
    pub fn delta(&self) -> Result<Tensor> {
        Ok(self.b.matmul(&self.a)?.scale(self.scale()))
    }

    fn names(target: &str) -> [String; 3] {
        [format!("{target}.{LORA_A}"), format!("{target}.{LORA_B}"), format!("{target}.{LORA_ALPHA}")]
    }
}

/// `x·W₀ + (α/r)(x·B)·A` without materialising the merged weight.
pub fn lora_forward(x: &Tensor, w0: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let dense = x.matmul(w0)?;
    let low = x.matmul(&adapter.b)?.matmul(&adapter.a)?.scale(adapter.scale());
    dense.add(&low)
}

/// `W₀ + (α/r)·B·A`.
pub fn lora_merge(w0: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    w0.add(&adapter.delta()?)
}

/// Attach fresh adapters to every matrix in `targets`; returns the adapter
/// parameter names to train (the alpha scalars are never trainable).
pub fn attach_lora(
    model: &mut TinyLmm,
    targets: &BTreeSet<String>,
    rank: usize,
    alpha: f32,
    rng: &mut impl Rng,
) -> Result<Vec<String>> {
    let mut trainable = Vec::new();
    for target in targets {
        let w0 = model.param(target)?;
        if w0.rank() != 2 {
            continue;
        }
        let [a_name, b_name, alpha_name] = LoraAdapter::names(target);
        if model.params().contains(&a_name) {
            return Err(LabError::Config(format!("{target} already carries a LoRA adapter")));
        }
        let adapter = LoraAdapter::new(target.clone(), w0, rank, alpha, rng)?;
        let params = model.params_mut();
        params.insert(a_name.clone(), adapter.a);
        params.insert(b_name.clone(), adapter.b);
        params.insert(alpha_name, Tensor::new(vec![1], vec![alpha])?);
        trainable.extend([a_name, b_name]);
    }
    if trainable.is_empty() {
        return Err(LabError::Config("no matrix targets for LoRA".into()));
    }
    Ok(trainable)
}

/// Adapters currently attached to `model`.
pub fn lora_adapters(model: &TinyLmm) -> Result<Vec<LoraAdapter>> {
    let suffix = format!(".{LORA_A}");
    let targets: Vec<String> = model.params().names().filter_map(|n| n.strip_suffix(suffix.as_str()).map(String::from)).collect();
    targets
        .into_iter()
        .map(|target| {
            let [a, b, alpha] = LoraAdapter::names(&target);
            Ok(LoraAdapter {
                a: model.param(&a)?.clone(),
                b: model.param(&b)?.clone(),
                alpha: model.param(&alpha)?.data()[0],
                target,
            })
        })
        .collect()
}

/// Fold every attached adapter into its base weight and drop the adapter tensors.
pub fn merge_lora(model: &mut TinyLmm) -> Result<usize> {
    let adapters = lora_adapters(model)?;
    for adapter in &adapters {
        let merged = lora_merge(model.param(&adapter.target)?, adapter)?;
        let params = model.params_mut();
        *params.get_mut(&adapter.target).expect("target exists") = merged;
        for name in LoraAdapter::names(&adapter.target) {
            params.remove(&name);
        }
    }
    Ok(adapters.len())
}

/// `(1−β)·base + β·tuned`, parameter by parameter.
pub fn wise_ft_interpolate(base: &TinyLmm, tuned: &TinyLmm, beta: f64) -> Result<TinyLmm> {
    check_beta(beta)?;
    if base.config() != tuned.config() || !base.params().same_layout(tuned.params()) {
        return Err(LabError::Config("interpolation requires identical architectures and parameter names".into()));
    }
    let mut out = ParamStore::new();
    for ((name, b), (_, t)) in base.params().iter().zip(tuned.params().iter()) {
        let data = b.data().iter().zip(t.data()).map(|(&x, &y)| ((1.0 - beta) * x as f64 + beta * y as f64) as f32).collect();
        out.insert(name, Tensor::new(b.shape().to_vec(), data)?);
    }
    TinyLmm::from_params(*base.config(), out)
}

/// One interpolated model per β.
pub fn wise_ft_sweep(base: &TinyLmm, tuned: &TinyLmm, betas: &[f64]) -> Result<Vec<(f64, TinyLmm)>> {
    betas.iter().map(|&b| Ok((b, wise_ft_interpolate(base, tuned, b)?))).collect()
}

/// A block's MLP wrapped as two soft-routed experts.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer {
    /// Frozen pretrained expert `[gate, up, down]`.
    pub e_pt: [Tensor; 3],
    /// Trainable expert `[gate, up, down]`.
    pub e_new: [Tensor; 3],
    /// `d × 2` routing matrix.
    pub gate: Tensor,
    pub ln: Option<Tensor>,
}

impl MoeLayer {
    /// Fresh wrap: `E_new` copies `E_pt`, routing logits start at zero.
    pub fn wrap(block: &DecoderBlock) -> Self {
        let e_pt = [block.wgate.clone(), block.wup.clone(), block.wdown.clone()];
        Self { e_new: e_pt.clone(), e_pt, gate: Tensor::zeros(&[block.wgate.rows(), 2]), ln: block.ln2.clone() }
    }
}

/// Standalone wrap of a block value.
pub fn moe_wrap(block: &DecoderBlock) -> MoeLayer {
    MoeLayer::wrap(block)
}

fn moe_eval<T: Scalar>(x: &Tensor<T>, layer: &MoeLayer) -> Result<(Tensor<T>, Tensor<T>)> {
    if x.rank() != 2 || x.cols() != layer.gate.rows() {
        return Err(LabError::Contract(format!("MoE input {:?} does not match width {}", x.shape(), layer.gate.rows())));
    }
    let mut tape = Tape::<T>::new();
    let mut input = tape.constant_tensor(x.clone());
    if let Some(g) = &layer.ln {
        let g = tape.constant_tensor(g.cast());
        input = tape.rms_norm(input, g)?;
    }
    let mut lins = |ws: &[Tensor; 3]| ws.clone().map(|w| Lin::Dense(tape.constant_tensor(w.cast())));
    let pt = lins(&layer.e_pt);
    let nw = lins(&layer.e_new);
    let gate = tape.constant_tensor(layer.gate.cast());
    let out = moe_core(&mut tape, input, pt, nw, gate)?;
    let logits = tape.matmul(input, gate)?;
    let route = tape.softmax(logits, T::ONE, None)?;
    Ok((tape.value(out).clone(), tape.value(route).clone()))
}

/// `Σᵢ gᵢ(x)·Eᵢ(LN(x))`.
pub fn moe_forward<T: Scalar>(x: &Tensor<T>, layer: &MoeLayer) -> Result<Tensor<T>> {
    Ok(moe_eval(x, layer)?.0)
}

/// Per-token routing weights `S × 2`.
pub fn moe_routing<T: Scalar>(x: &Tensor<T>, layer: &MoeLayer) -> Result<Tensor<T>> {
    Ok(moe_eval(x, layer)?.1)
}

/// Wrap block `layer` of `model` in place; returns the new trainable names.
pub fn moe_wrap_block(model: &mut TinyLmm, layer: usize) -> Result<Vec<String>> {
    if model.has_moe(layer) {
        return Err(LabError::Config(format!("block {layer} is already wrapped")));
    }
    let wrapped = MoeLayer::wrap(&model.block(layer)?);
    let params = model.params_mut();
    let mut names = Vec::with_capacity(4);
    let gate = block_param(layer, MOE_GATE);
    params.insert(gate.clone(), wrapped.gate);
    names.push(gate);
    for (kind, w) in ["wgate", "wup", "wdown"].into_iter().zip(wrapped.e_new) {
        let name = block_param(layer, &format!("{MOE_EXPERT}.{kind}"));
        params.insert(name.clone(), w);
        names.push(name);
    }
    Ok(names)
}

/// Wrap every block; returns all trainable expert and gate names.
pub fn moe_wrap_all(model: &mut TinyLmm) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for l in 0..model.config().layers {
        names.extend(moe_wrap_block(model, l)?);
    }
    Ok(names)
}

/// The wrapped MLP of block `layer` as a standalone value.
pub fn moe_layer(model: &TinyLmm, layer: usize) -> Result<MoeLayer> {
    if !model.has_moe(layer) {
        return Err(LabError::Config(format!("block {layer} is not wrapped")));
    }
    let get = |k: &str| model.param(&block_param(layer, k)).cloned();
    let expert = |k: &str| get(&format!("{MOE_EXPERT}.{k}"));
    Ok(MoeLayer {
        e_pt: [get("wgate")?, get("wup")?, get("wdown")?],
        e_new: [expert("wgate")?, expert("wup")?, expert("wdown")?],
        gate: get(MOE_GATE)?,
        ln: Some(get("ln2")?),
    })
}

/// True for names created by [`moe_wrap_block`].
pub fn is_moe_param(name: &str) -> bool {
    parse_block_param(name).is_some_and(|(_, k)| k.starts_with("moe."))
}

/// Plain gated MLP on a standalone weight triple (reference for MoE checks).
pub fn expert_forward(x: &Tensor, weights: &[Tensor; 3]) -> Result<Tensor> {
    let mut tape = Tape::<f32>::new();
    let input = tape.constant_tensor(x.clone());
    let lins = weights.clone().map(|w| Lin::Dense(tape.constant_tensor(w)));
    let out = mlp_core(&mut tape, input, lins)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::{substream, STREAM_INIT};

    #[test]
    fn lora_counts_and_rank_limit() {
        let mut rng = substream(0, STREAM_INIT);
        let w = Tensor::zeros(&[64, 64]);
        let a = LoraAdapter::new("w", &w, 4, 8.0, &mut rng).unwrap();
        assert_eq!(a.trainable_count(), 512);
        assert_eq!(w.numel(), 4096);
        assert!(LoraAdapter::new("w", &Tensor::zeros(&[3, 5]), 4, 1.0, &mut rng).is_err());
    }

    #[test]
    fn wise_ft_midpoint() {
        let cfg = ModelConfig { layers: 1, ..ModelConfig::default() };
        let base = TinyLmm::seeded(cfg, 0).unwrap();
        let mut b2 = base.clone();
        let mut t2 = base.clone();
        for name in cfg.canonical_names() {
            let t = b2.params_mut().get_mut(&name).unwrap();
            t.data_mut().fill(2.0);
            let t = t2.params_mut().get_mut(&name).unwrap();
            t.data_mut().fill(4.0);
        }
        let mid = wise_ft_interpolate(&b2, &t2, 0.5).unwrap();
        assert!(mid.params().iter().all(|(_, t)| t.data().iter().all(|&v| v == 3.0)));
        assert!(wise_ft_interpolate(&b2, &t2, 1.5).is_err());
    }

    #[test]
    fn double_wrap_rejected() {
        let mut m = TinyLmm::seeded(ModelConfig { layers: 1, ..ModelConfig::default() }, 0).unwrap();
        moe_wrap_block(&mut m, 0).unwrap();
        assert!(matches!(moe_wrap_block(&mut m, 0), Err(LabError::Config(_))));
    }
}
