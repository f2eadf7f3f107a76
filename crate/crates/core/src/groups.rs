//! Named parameter groups, freeze masks and the Adam optimizer that honours them.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{parse_block_param, EMBED, HEAD, PERCEPTION, PROJECTOR};
use crate::params::ParamStore;
use crate::tape::Gradients;
use crate::tensor::Tensor;

/// A selection of tunable parameters.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Full,
    VisionEncoder,
    Projector,
    VisionAndProjector,
    Llm,
    SaProj,
    SaProjQkv,
    Mlp,
    MlpGateUp,
    /// Union of named groups, resolved and validated lazily; an empty list selects nothing.
    Composite(Vec<String>),
}

impl ParamGroup {
    /// The nine named groups in display order.
    pub const NAMED: [ParamGroup; 9] = [
        ParamGroup::Full,
        ParamGroup::VisionEncoder,
        ParamGroup::Projector,
        ParamGroup::VisionAndProjector,
        ParamGroup::Llm,
        ParamGroup::SaProj,
        ParamGroup::SaProjQkv,
        ParamGroup::Mlp,
        ParamGroup::MlpGateUp,
    ];

    pub fn name(&self) -> String {
        match self {
            ParamGroup::Full => "full".into(),
            ParamGroup::VisionEncoder => "vision".into(),
            ParamGroup::Projector => "projector".into(),
            ParamGroup::VisionAndProjector => "vision+projector".into(),
            ParamGroup::Llm => "llm".into(),
            ParamGroup::SaProj => "sa_proj".into(),
            ParamGroup::SaProjQkv => "sa_proj_qkv".into(),
            ParamGroup::Mlp => "mlp".into(),
            ParamGroup::MlpGateUp => "mlp_gate_up".into(),
            ParamGroup::Composite(parts) => parts.join(","),
        }
    }

    pub fn valid_names() -> Vec<String> {
        Self::NAMED.iter().map(ParamGroup::name).collect()
    }

    fn parse_named(s: &str) -> Option<Self> {
        Self::NAMED.iter().find(|g| g.name() == s).cloned()
    }

    /// Block-internal suffixes for the LLM-internal groups.
    fn block_kinds(&self) -> &'static [&'static str] {
        match self {
            ParamGroup::SaProj => &["wq", "wk", "wv", "wo"],
            ParamGroup::SaProjQkv => &["wq", "wk", "wv"],
            ParamGroup::Mlp => &["wgate", "wup", "wdown"],
            ParamGroup::MlpGateUp => &["wgate", "wup"],
            ParamGroup::Llm => &["wq", "wk", "wv", "wo", "wgate", "wup", "wdown"],
            _ => &[],
        }
    }

    /// Concrete parameter names selected from `params`.
    pub fn resolve(&self, params: &ParamStore) -> Result<BTreeSet<String>> {
        let mut out = BTreeSet::new();
        match self {
            ParamGroup::Full => out.extend(params.names().map(String::from)),
            ParamGroup::VisionEncoder => {
                out.insert(PERCEPTION.to_string());
            }
            ParamGroup::Projector => {
                out.insert(PROJECTOR.to_string());
            }
            ParamGroup::VisionAndProjector => out.extend([PERCEPTION.to_string(), PROJECTOR.to_string()]),
            ParamGroup::Composite(parts) => {
                for part in parts {
                    let g = Self::parse_named(part).ok_or_else(|| {
                        LabError::Config(format!(
                            "unknown group member '{part}'; valid groups: {}",
                            Self::valid_names().join(", ")
                        ))
                    })?;
                    out.extend(g.resolve(params)?);
                }
            }
            _ => {
                let kinds = self.block_kinds();
                out.extend(
                    params.names().filter(|n| parse_block_param(n).is_some_and(|(_, k)| kinds.contains(&k))).map(String::from),
                );
            }
        }
        for name in &out {
            if !params.contains(name) {
                return Err(LabError::Config(format!("group {} selects missing parameter {name}", self.name())));
            }
        }
        Ok(out)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = LabError;

    /// A single group name, or several joined by commas for a composite.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let unknown: Vec<&str> = parts.iter().copied().filter(|p| Self::parse_named(p).is_none()).collect();
        if !unknown.is_empty() {
            return Err(LabError::Config(format!(
                "unknown parameter group '{}'; valid groups: {}",
                unknown.join(","),
                Self::valid_names().join(", ")
            )));
        }
        Ok(match parts.as_slice() {
            [one] => Self::parse_named(one).expect("checked"),
            _ => ParamGroup::Composite(parts.iter().map(|p| p.to_string()).collect()),
        })
    }
}

impl Serialize for ParamGroup {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for ParamGroup {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Names that the optimizer may change. Everything else stays bit-identical.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FreezeMask {
    trainable: BTreeSet<String>,
}

impl FreezeMask {
    /// Validates every name against `params`.
    pub fn new<I, S>(names: I, params: &ParamStore) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let trainable: BTreeSet<String> = names.into_iter().map(Into::into).collect();
        if let Some(bad) = trainable.iter().find(|n| !params.contains(n)) {
            return Err(LabError::Config(format!("freeze mask names unknown parameter {bad}")));
        }
        Ok(Self { trainable })
    }

    pub fn from_group(group: &ParamGroup, params: &ParamStore) -> Result<Self> {
        Self::new(group.resolve(params)?, params)
    }

    pub fn frozen_all() -> Self {
        Self::default()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.trainable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trainable.is_empty()
    }

    /// Number of trainable scalars.
    pub fn scalar_count(&self, params: &ParamStore) -> usize {
        self.names().filter_map(|n| params.get(n)).map(Tensor::numel).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_frac: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup_frac: 0.03 }
    }
}

/// Linear warm-up over the first `warmup_frac` of steps, then cosine decay to zero.
pub fn lr_at(cfg: &AdamConfig, step: usize, total_steps: usize) -> f64 {
    let total = total_steps.max(1);
    let warm = ((cfg.warmup_frac * total as f64).ceil() as usize).min(total);
    if step < warm {
        return cfg.lr * (step + 1) as f64 / warm as f64;
    }
    let span = (total - warm).max(1) as f64;
    let progress = ((step - warm) as f64 / span).min(1.0);
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam over the names of a [`FreezeMask`] only.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    total_steps: usize,
    step: usize,
    mask: FreezeMask,
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, total_steps: usize) -> Self {
        Self { cfg, total_steps, step: 0, mask: FreezeMask::default(), m: IndexMap::new(), v: IndexMap::new() }
    }

    /// Restrict the optimizer to `mask`; moments of dropped names are discarded.
    pub fn apply_freeze(&mut self, mask: FreezeMask, params: &ParamStore) -> Result<()> {
        if let Some(bad) = mask.names().find(|n| !params.contains(n)) {
            return Err(LabError::Config(format!("freeze mask names unknown parameter {bad}")));
        }
        self.m.retain(|k, _| mask.contains(k));
        self.v.retain(|k, _| mask.contains(k));
        self.mask = mask;
        Ok(())
    }

    pub fn mask(&self) -> &FreezeMask {
        &self.mask
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        lr_at(&self.cfg, self.step, self.total_steps)
    }

    /// One update. Frozen tensors are verified untouched afterwards.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients<f32>) -> Result<()> {
        let frozen: Vec<(String, Arc<Tensor>)> = params
            .names()
            .filter(|n| !self.mask.contains(n))
            .map(|n| (n.to_string(), params.shared(n).expect("listed")))
            .collect();

        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);

        for name in self.mask.names() {
            let Some(g) = grads.get(name) else { continue };
            let w =
                params.get_mut(name).ok_or_else(|| LabError::Config(format!("trainable parameter {name} missing from model")))?;
            if g.shape() != w.shape() {
                return Err(LabError::Internal(format!("gradient shape mismatch for {name}")));
            }
            let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(w.shape()));
            let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(w.shape()));
            for (((wi, &gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let gi = gi as f64;
                let m_new = b1 * *mi as f64 + (1.0 - b1) * gi;
                let v_new = b2 * *vi as f64 + (1.0 - b2) * gi * gi;
                *mi = m_new as f32;
                *vi = v_new as f32;
                let update = lr * (m_new / bc1) / ((v_new / bc2).sqrt() + eps);
                *wi = (*wi as f64 - update) as f32;
            }
        }

        for (name, before) in frozen {
            let after = params.shared(&name);
            let intact = after.is_some_and(|a| Arc::ptr_eq(&a, &before) || a.as_ref() == before.as_ref());
            if !intact {
                return Err(LabError::Internal(format!("frozen parameter {name} changed during an optimizer step")));
            }
        }
        Ok(())
    }
}

/// Parameters of the base model that may never be tuned by LLM-internal groups.
pub fn is_llm_excluded(name: &str) -> bool {
    name == EMBED || name == HEAD || parse_block_param(name).is_some_and(|(_, k)| k == "ln1" || k == "ln2")
}
