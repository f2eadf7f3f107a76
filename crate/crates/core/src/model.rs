//! The tiny multimodal decoder.
//!
//! Raw visual features go through a perception encoder and a linear projector,
//! are stacked after the embedded text tokens, and run through a pre-norm
//! decoder-only transformer with gated-SiLU MLPs. Logits are read directly
//! from the last residual state (`z = r^(L) · U`, no final norm), so the
//! residual stream telescopes exactly into per-sublayer contributions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::ops::{self, argmax};
use crate::params::{ParamNodes, ParamStore};
use crate::rng::{substream, STREAM_INIT};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};
use crate::vocab;

pub const PERCEPTION: &str = "perception.w";
pub const PROJECTOR: &str = "projector.w";
pub const EMBED: &str = "embed.w";
pub const HEAD: &str = "head.w";

/// Per-block parameter suffixes in canonical order.
pub const BLOCK_PARAMS: [&str; 9] = ["wq", "wk", "wv", "wo", "wgate", "wup", "wdown", "ln1", "ln2"];

pub fn block_param(layer: usize, kind: &str) -> String {
    format!("block{layer}.{kind}")
}

/// Split `block{l}.{kind}` into `(l, kind)`.
pub fn parse_block_param(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("block")?;
    let (idx, kind) = rest.split_once('.')?;
    Some((idx.parse().ok()?, kind))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub hidden: usize,
    pub vocab: usize,
    pub visual_tokens: usize,
    pub visual_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { layers: 4, d_model: 32, heads: 4, head_dim: 8, hidden: 64, vocab: vocab::SIZE, visual_tokens: 4, visual_dim: 8 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("hidden", self.hidden),
            ("vocab", self.vocab),
            ("visual_tokens", self.visual_tokens),
            ("visual_dim", self.visual_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(LabError::Config(format!("model {name} must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn attn_width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Shape of a canonical parameter.
    pub fn shape_of(&self, name: &str) -> Option<Vec<usize>> {
        let (d, aw, h) = (self.d_model, self.attn_width(), self.hidden);
        match name {
            PERCEPTION => return Some(vec![self.visual_dim, self.visual_dim]),
            PROJECTOR => return Some(vec![self.visual_dim, d]),
            EMBED => return Some(vec![self.vocab, d]),
            HEAD => return Some(vec![d, self.vocab]),
            _ => {}
        }
        let (layer, kind) = parse_block_param(name)?;
        if layer >= self.layers {
            return None;
        }
        Some(match kind {
            "wq" | "wk" | "wv" => vec![d, aw],
            "wo" => vec![aw, d],
            "wgate" | "wup" => vec![d, h],
            "wdown" => vec![h, d],
            "ln1" | "ln2" => vec![d],
            _ => return None,
        })
    }

    /// Canonical parameter names in checkpoint order.
    pub fn canonical_names(&self) -> Vec<String> {
        let mut names = vec![PERCEPTION.to_string(), PROJECTOR.to_string(), EMBED.to_string(), HEAD.to_string()];
        for l in 0..self.layers {
            names.extend(BLOCK_PARAMS.iter().map(|k| block_param(l, k)));
        }
        names
    }
}

/// Full model state: configuration plus named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyLmm {
    config: ModelConfig,
    params: ParamStore,
}

impl TinyLmm {
    /// Fresh model with weights drawn from `rng`.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for name in config.canonical_names() {
            let shape = config.shape_of(&name).expect("canonical");
            let t = match name.as_str() {
                EMBED => Tensor::randn(&shape, 1.0, rng),
                _ if name.ends_with(".ln1") || name.ends_with(".ln2") => Tensor::full(&shape, 1.0),
                _ => Tensor::randn(&shape, 1.0 / (shape[0] as f32).sqrt(), rng),
            };
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    /// Fresh model from the `init` substream of `seed`.
    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut substream(seed, STREAM_INIT))
    }

    /// Assemble a model from stored tensors; canonical names must all be present
    /// with the configured shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        for name in config.canonical_names() {
            let t = params.get(&name).ok_or_else(|| LabError::Config(format!("missing parameter {name}")))?;
            let want = config.shape_of(&name).expect("canonical");
            if t.shape() != want.as_slice() {
                return Err(LabError::Config(format!("parameter {name} has shape {:?}, expected {want:?}", t.shape())));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.require(name)
    }

    pub fn has_moe(&self, layer: usize) -> bool {
        self.params.contains(&block_param(layer, crate::mitigation::MOE_GATE))
    }

    /// Weights of block `l` as a standalone value.
    pub fn block(&self, layer: usize) -> Result<DecoderBlock> {
        let get = |k: &str| self.param(&block_param(layer, k)).cloned();
        Ok(DecoderBlock {
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            wo: get("wo")?,
            wgate: get("wgate")?,
            wup: get("wup")?,
            wdown: get("wdown")?,
            ln1: Some(get("ln1")?),
            ln2: Some(get("ln2")?),
            heads: self.config.heads,
            head_dim: self.config.head_dim,
        })
    }
}

/// One decoder block's weights. `ln1`/`ln2` of `None` bypass the norm.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock<T: Scalar = f32> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub wgate: Tensor<T>,
    pub wup: Tensor<T>,
    pub wdown: Tensor<T>,
    pub ln1: Option<Tensor<T>>,
    pub ln2: Option<Tensor<T>>,
    pub heads: usize,
    pub head_dim: usize,
}

/// Residual-stream record of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T: Scalar = f32> {
    /// `r^(0) ..= r^(L)`, each `S × d`.
    pub residuals: Vec<Tensor<T>>,
    /// Attention outputs `a^(1..L)`.
    pub attn: Vec<Tensor<T>>,
    /// MLP outputs `f^(1..L)`.
    pub mlp: Vec<Tensor<T>>,
    /// `S × V`.
    pub logits: Tensor<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn final_residual(&self) -> &Tensor<T> {
        self.residuals.last().expect("r^(0) always present")
    }

    /// `max |r^(L) − r^(0) − Σa − Σf|`, accumulated in f64.
    pub fn telescoping_error(&self) -> f64 {
        let r0 = &self.residuals[0];
        let rl = self.final_residual();
        let mut worst = 0.0f64;
        for i in 0..r0.numel() {
            let mut sum = r0.data()[i].to_f64();
            for l in 0..self.attn.len() {
                sum += self.attn[l].data()[i].to_f64() + self.mlp[l].data()[i].to_f64();
            }
            worst = worst.max((rl.data()[i].to_f64() - sum).abs());
        }
        worst
    }

    /// Checks `z_i` against each block's update `r^(l) = r^(l−1) + a^(l) + f^(l)`.
    pub fn recurrence_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for l in 0..self.attn.len() {
            let (prev, next) = (&self.residuals[l], &self.residuals[l + 1]);
            for i in 0..prev.numel() {
                let want = prev.data()[i].to_f64() + self.attn[l].data()[i].to_f64() + self.mlp[l].data()[i].to_f64();
                worst = worst.max((next.data()[i].to_f64() - want).abs());
            }
        }
        worst
    }

    /// `max |z − r^(L) U|` with the product recomputed in f64.
    pub fn readout_error(&self, head: &Tensor<T>) -> f64 {
        let want = self.final_residual().cast::<f64>().matmul(&head.cast::<f64>()).expect("head shape");
        self.logits.cast::<f64>().max_abs_diff(&want)
    }
}

/// A linear map on the tape, optionally carrying a low-rank adapter.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Lin {
    Dense(NodeId),
    LowRank { base: NodeId, a: NodeId, b: NodeId, scale: f64 },
}

pub(crate) fn apply_lin<T: Scalar>(tape: &mut Tape<T>, x: NodeId, lin: Lin) -> Result<NodeId> {
    match lin {
        Lin::Dense(w) => tape.matmul(x, w),
        Lin::LowRank { base, a, b, scale } => {
            let dense = tape.matmul(x, base)?;
            let down = tape.matmul(x, b)?;
            let up = tape.matmul(down, a)?;
            let up = tape.scale(up, T::from_f64(scale))?;
            tape.add(dense, up)
        }
    }
}

/// Resolve a weight by name, picking up a LoRA adapter when one is attached.
pub(crate) fn lin_for<T: Scalar>(tape: &Tape<T>, nodes: &ParamNodes, name: &str) -> Result<Lin> {
    use crate::mitigation::{LORA_A, LORA_ALPHA, LORA_B};
    let base = nodes.require(name)?;
    let a = nodes.get(&format!("{name}.{LORA_A}"));
    let b = nodes.get(&format!("{name}.{LORA_B}"));
    let alpha = nodes.get(&format!("{name}.{LORA_ALPHA}"));
    match (a, b, alpha) {
        (Some(a), Some(b), Some(alpha)) => {
            let rank = tape.value(a).rows() as f64;
            let alpha = tape.value(alpha).data()[0].to_f64();
            Ok(Lin::LowRank { base, a, b, scale: alpha / rank })
        }
        (None, None, None) => Ok(Lin::Dense(base)),
        _ => Err(LabError::Contract(format!("incomplete LoRA adapter on {name}"))),
    }
}

pub(crate) fn attention_core<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    [wq, wk, wv, wo]: [Lin; 4],
    heads: usize,
    head_dim: usize,
    causal: bool,
) -> Result<NodeId> {
    let q = apply_lin(tape, x, wq)?;
    let k = apply_lin(tape, x, wk)?;
    let v = apply_lin(tape, x, wv)?;
    if tape.value(q).cols() != heads * head_dim {
        return Err(LabError::Contract(format!(
            "attention width {} != heads {heads} x head_dim {head_dim}",
            tape.value(q).cols()
        )));
    }
    let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
    let mask = causal.then_some(0);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            let s = h * head_dim;
            (tape.slice_cols(q, s, head_dim)?, tape.slice_cols(k, s, head_dim)?, tape.slice_cols(v, s, head_dim)?)
        };
        let scores = tape.matmul_t(qh, kh)?;
        let weights = tape.softmax(scores, scale, mask)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    let mixed = tape.concat_cols(outs)?;
    apply_lin(tape, mixed, wo)
}

pub(crate) fn mlp_core<T: Scalar>(tape: &mut Tape<T>, x: NodeId, [wgate, wup, wdown]: [Lin; 3]) -> Result<NodeId> {
    let g = apply_lin(tape, x, wgate)?;
    let g = tape.silu(g)?;
    let u = apply_lin(tape, x, wup)?;
    let h = tape.mul(g, u)?;
    apply_lin(tape, h, wdown)
}

/// Dense soft routing between the frozen pretrained expert and the tuned copy.
pub(crate) fn moe_core<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    pretrained: [Lin; 3],
    tuned: [Lin; 3],
    gate: NodeId,
) -> Result<NodeId> {
    let pt = mlp_core(tape, x, pretrained)?;
    let nw = mlp_core(tape, x, tuned)?;
    let logits = tape.matmul(x, gate)?;
    let route = tape.softmax(logits, T::ONE, None)?;
    let w_pt = tape.slice_cols(route, 0, 1)?;
    let w_new = tape.slice_cols(route, 1, 1)?;
    let a = tape.mul_col(pt, w_pt)?;
    let b = tape.mul_col(nw, w_new)?;
    tape.add(a, b)
}

/// Node ids of a traced forward pass.
pub(crate) struct TraceNodes {
    pub residuals: Vec<NodeId>,
    pub attn: Vec<NodeId>,
    pub mlp: Vec<NodeId>,
    pub logits: NodeId,
}

impl TraceNodes {
    pub fn extract<T: Scalar>(&self, tape: &Tape<T>) -> ForwardTrace<T> {
        let get = |ids: &[NodeId]| ids.iter().map(|&id| tape.value(id).clone()).collect::<Vec<_>>();
        ForwardTrace {
            residuals: get(&self.residuals),
            attn: get(&self.attn),
            mlp: get(&self.mlp),
            logits: tape.value(self.logits).clone(),
        }
    }
}

/// Token layout of one forward pass: `[prefix text; visual tokens; suffix text]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct SeqInput<'a, T: Scalar> {
    pub prefix: &'a [u32],
    pub visual: &'a Tensor<T>,
    pub suffix: &'a [u32],
}

fn token_ids(tokens: &[u32], vocab: usize) -> Result<Vec<usize>> {
    tokens
        .iter()
        .map(|&t| {
            if (t as usize) < vocab {
                Ok(t as usize)
            } else {
                Err(LabError::Input(format!("token id {t} out of range for vocabulary of {vocab}")))
            }
        })
        .collect()
}

/// Build the full forward pass on `tape` from bound parameters.
pub(crate) fn forward_nodes<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    nodes: &ParamNodes,
    seq: SeqInput<'_, T>,
) -> Result<TraceNodes> {
    let want = [config.visual_tokens, config.visual_dim];
    if seq.visual.shape() != want {
        return Err(LabError::Input(format!("visual features have shape {:?}, expected {want:?}", seq.visual.shape())));
    }
    let embed = nodes.require(EMBED)?;
    let mut parts = Vec::with_capacity(3);
    if !seq.prefix.is_empty() {
        parts.push(tape.gather_rows(embed, token_ids(seq.prefix, config.vocab)?)?);
    }
    let raw = tape.constant_tensor(seq.visual.clone());
    let perceived = tape.matmul(raw, nodes.require(PERCEPTION)?)?;
    let perceived = tape.silu(perceived)?;
    parts.push(tape.matmul(perceived, nodes.require(PROJECTOR)?)?);
    if !seq.suffix.is_empty() {
        parts.push(tape.gather_rows(embed, token_ids(seq.suffix, config.vocab)?)?);
    }
    let mut r = tape.concat_rows(parts)?;

    let mut trace = TraceNodes {
        residuals: vec![r],
        attn: Vec::with_capacity(config.layers),
        mlp: Vec::with_capacity(config.layers),
        logits: r,
    };
    for l in 0..config.layers {
        let p = |k: &str| block_param(l, k);
        let x = tape.rms_norm(r, nodes.require(&p("ln1"))?)?;
        let attn_w = [
            lin_for(tape, nodes, &p("wq"))?,
            lin_for(tape, nodes, &p("wk"))?,
            lin_for(tape, nodes, &p("wv"))?,
            lin_for(tape, nodes, &p("wo"))?,
        ];
        let a = attention_core(tape, x, attn_w, config.heads, config.head_dim, true)?;
        let h = tape.add(r, a)?;
        let x2 = tape.rms_norm(h, nodes.require(&p("ln2"))?)?;
        let mlp_w = [lin_for(tape, nodes, &p("wgate"))?, lin_for(tape, nodes, &p("wup"))?, lin_for(tape, nodes, &p("wdown"))?];
        let f = match nodes.get(&p(crate::mitigation::MOE_GATE)) {
            Some(gate) => {
                use crate::mitigation::MOE_EXPERT;
                let tuned = [
                    lin_for(tape, nodes, &p(&format!("{MOE_EXPERT}.wgate")))?,
                    lin_for(tape, nodes, &p(&format!("{MOE_EXPERT}.wup")))?,
                    lin_for(tape, nodes, &p(&format!("{MOE_EXPERT}.wdown")))?,
                ];
                moe_core(tape, x2, mlp_w, tuned, gate)?
            }
            None => mlp_core(tape, x2, mlp_w)?,
        };
        r = tape.add(h, f)?;
        trace.attn.push(a);
        trace.mlp.push(f);
        trace.residuals.push(r);
    }
    trace.logits = tape.matmul(r, nodes.require(HEAD)?)?;
    Ok(trace)
}

/// Forward pass over `[prefix; visual; suffix]` with every intermediate kept.
pub fn forward_sequence(model: &TinyLmm, prefix: &[u32], visual: &Tensor, suffix: &[u32]) -> Result<ForwardTrace> {
    let mut tape = Tape::new();
    let nodes = ParamNodes::bind(&mut tape, model.params(), |_| false)?;
    let trace = forward_nodes(&mut tape, model.config(), &nodes, SeqInput { prefix, visual, suffix })?;
    Ok(trace.extract(&tape))
}

/// Forward pass over `r^(0) = [x_text; x_vis]`.
pub fn forward_trace(model: &TinyLmm, text_tokens: &[u32], visual: &Tensor) -> Result<ForwardTrace> {
    forward_sequence(model, text_tokens, visual, &[])
}

fn sublayer_lins<T: Scalar>(tape: &mut Tape<T>, ws: &[&Tensor<T>]) -> Vec<Lin> {
    ws.iter().map(|w| Lin::Dense(tape.constant_tensor((*w).clone()))).collect()
}

fn sublayer_input<T: Scalar>(tape: &mut Tape<T>, x: &Tensor<T>, ln: Option<&Tensor<T>>, wrows: usize) -> Result<NodeId> {
    if x.rank() != 2 || x.cols() != wrows {
        return Err(LabError::Contract(format!("sublayer input {:?} does not match width {wrows}", x.shape())));
    }
    let xn = tape.constant_tensor(x.clone());
    match ln {
        Some(g) => {
            let g = tape.constant_tensor(g.clone());
            tape.rms_norm(xn, g)
        }
        None => Ok(xn),
    }
}

/// `MHA(LN(x))` for one block.
pub fn attention_sublayer<T: Scalar>(x: &Tensor<T>, block: &DecoderBlock<T>, causal: bool) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let input = sublayer_input(&mut tape, x, block.ln1.as_ref(), block.wq.rows())?;
    let l = sublayer_lins(&mut tape, &[&block.wq, &block.wk, &block.wv, &block.wo]);
    let out = attention_core(&mut tape, input, [l[0], l[1], l[2], l[3]], block.heads, block.head_dim, causal)?;
    Ok(tape.value(out).clone())
}

/// `W_down(silu(LN(x) W_gate) ⊙ LN(x) W_up)` for one block.
pub fn mlp_sublayer<T: Scalar>(x: &Tensor<T>, block: &DecoderBlock<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let input = sublayer_input(&mut tape, x, block.ln2.as_ref(), block.wgate.rows())?;
    let l = sublayer_lins(&mut tape, &[&block.wgate, &block.wup, &block.wdown]);
    let out = mlp_core(&mut tape, input, [l[0], l[1], l[2]])?;
    Ok(tape.value(out).clone())
}

/// One greedy step: the token committed and the distribution it was read from.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeStep {
    pub token: u32,
    pub probs: Vec<f32>,
}

/// Greedy generation after `[prompt; visual]`, stopping after `stop` or `max_len` tokens.
pub fn greedy_decode_steps(
    model: &TinyLmm,
    prompt: &[u32],
    visual: &Tensor,
    max_len: usize,
    stop: Option<u32>,
) -> Result<Vec<DecodeStep>> {
    let mut generated: Vec<u32> = Vec::with_capacity(max_len);
    let mut steps = Vec::with_capacity(max_len);
    while generated.len() < max_len {
        let trace = forward_sequence(model, prompt, visual, &generated)?;
        let last = trace.logits.row(trace.logits.rows() - 1);
        let token = argmax(last) as u32;
        let mut probs = vec![0.0f32; last.len()];
        ops::softmax_into(last, 1.0, &mut probs);
        steps.push(DecodeStep { token, probs });
        generated.push(token);
        if Some(token) == stop {
            break;
        }
    }
    Ok(steps)
}

/// Greedy generation; ends at the end-of-answer token or `max_len`.
pub fn greedy_decode(model: &TinyLmm, prompt: &[u32], visual: &Tensor, max_len: usize) -> Result<Vec<u32>> {
    if max_len == 0 {
        return Err(LabError::Input("max_len must be >= 1".into()));
    }
    let stop = ((vocab::EOS as usize) < model.config().vocab).then_some(vocab::EOS);
    Ok(greedy_decode_steps(model, prompt, visual, max_len, stop)?.into_iter().map(|s| s.token).collect())
}
