//! Synthetic vision-language tasks.
//!
//! Every image is a `4 × 8` feature grid. Each token carries a fixed ±0.5
//! position code. Token 0 adds a one-hot object class, token 1 a one-hot
//! attribute; tokens 2 and 3 carry task content. The count thermometer fills
//! token 3 first and spills into token 2; clock hands sit in token 2 and the
//! reading pointer in token 3. All entries get small Gaussian noise.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::objectives::TaskExample;
use crate::rng::{substream, LabRng, STREAM_DATA};
use crate::tensor::Tensor;
use crate::vocab;

pub const VISUAL_TOKENS: usize = 4;
pub const VISUAL_DIM: usize = 8;
pub const NOISE_STD: f32 = 0.1;
pub const MAX_COUNT: usize = 9;
/// Prompt glyphs shown to the reading task.
pub const OCR_SLOTS: usize = 3;

/// Fixed per-token position codes added to every image.
const SLOT_CODES: [[f32; VISUAL_DIM]; VISUAL_TOKENS] = [
    [0.5, -0.5, 0.5, -0.5, 0.5, -0.5, 0.5, -0.5],
    [0.5, 0.5, -0.5, -0.5, 0.5, 0.5, -0.5, -0.5],
    [0.5, 0.5, 0.5, 0.5, -0.5, -0.5, -0.5, -0.5],
    [-0.5, 0.5, 0.5, -0.5, -0.5, 0.5, 0.5, -0.5],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Count,
    Classify,
    ClockRead,
    CopyOcr,
    AttributeVqa,
    CaptionHeldOut,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::Count,
        TaskKind::Classify,
        TaskKind::ClockRead,
        TaskKind::CopyOcr,
        TaskKind::AttributeVqa,
        TaskKind::CaptionHeldOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Count => "count",
            TaskKind::Classify => "classify",
            TaskKind::ClockRead => "clock_read",
            TaskKind::CopyOcr => "copy_ocr",
            TaskKind::AttributeVqa => "attribute_vqa",
            TaskKind::CaptionHeldOut => "caption_held_out",
        }
    }

    pub fn prompt_token(self) -> u32 {
        match self {
            TaskKind::Count => vocab::Q_COUNT,
            TaskKind::Classify => vocab::Q_CLASS,
            TaskKind::ClockRead => vocab::Q_CLOCK,
            TaskKind::CopyOcr => vocab::Q_READ,
            TaskKind::AttributeVqa => vocab::Q_ATTR,
            TaskKind::CaptionHeldOut => vocab::Q_CAPTION,
        }
    }

    /// Answer length including the end token.
    pub fn answer_len(self) -> usize {
        match self {
            TaskKind::ClockRead => 3,
            TaskKind::CaptionHeldOut => 4,
            _ => 2,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub seed: u64,
    pub train_n: usize,
    pub eval_n: usize,
}

impl SyntheticTaskSpec {
    pub fn new(kind: TaskKind, seed: u64, train_n: usize, eval_n: usize) -> Self {
        Self { kind, seed, train_n, eval_n }
    }
}

/// Train and eval splits of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub spec: SyntheticTaskSpec,
    pub train: Vec<TaskExample>,
    pub eval: Vec<TaskExample>,
}

/// Latent content of one image.
#[derive(Clone, Copy, Debug)]
struct Scene {
    class: usize,
    attr: usize,
}

fn scene(rng: &mut LabRng) -> Scene {
    Scene { class: rng.random_range(0..vocab::CLASSES), attr: rng.random_range(0..vocab::ATTRS) }
}

fn canvas(s: Scene, rng: &mut LabRng) -> Tensor {
    let noise = Normal::new(0.0f32, NOISE_STD).expect("valid std");
    let mut t = Tensor::zeros(&[VISUAL_TOKENS, VISUAL_DIM]);
    for v in t.data_mut() {
        *v = noise.sample(rng);
    }
    for (r, code) in SLOT_CODES.iter().enumerate() {
        for (v, c) in t.row_mut(r).iter_mut().zip(code) {
            *v += c;
        }
    }
    t.row_mut(0)[s.class] += 1.0;
    t.row_mut(1)[s.attr] += 1.0;
    t
}

fn example(kind: TaskKind, rng: &mut LabRng) -> TaskExample {
    let s = scene(rng);
    let mut visual = canvas(s, rng);
    let mut prompt = vec![kind.prompt_token()];
    let mut answer = match kind {
        TaskKind::Count => {
            let k = rng.random_range(1..=MAX_COUNT);
            for i in 0..k {
                let (r, c) = if i < VISUAL_DIM { (3, i) } else { (2, i - VISUAL_DIM) };
                visual.row_mut(r)[c] += 1.0;
            }
            vec![vocab::digit(k)]
        }
        TaskKind::Classify => vec![vocab::letter(s.class)],
        TaskKind::AttributeVqa => vec![vocab::attribute(s.attr)],
        TaskKind::CaptionHeldOut => vec![vocab::ART, vocab::attribute(s.attr), vocab::class_name(s.class)],
        TaskKind::ClockRead => {
            let h = rng.random_range(1..=vocab::HOURS);
            let q = rng.random_range(0..vocab::MINUTES);
            let ha = std::f32::consts::TAU * (h % 12) as f32 / 12.0;
            let ma = std::f32::consts::TAU * q as f32 / 4.0;
            let row = visual.row_mut(2);
            row[0] += ha.cos();
            row[1] += ha.sin();
            row[2] += ma.cos();
            row[3] += ma.sin();
            vec![vocab::hour(h), vocab::minute(q)]
        }
        TaskKind::CopyOcr => {
            let glyphs: Vec<usize> = (0..OCR_SLOTS).map(|_| rng.random_range(0..vocab::GLYPHS)).collect();
            let pick = rng.random_range(0..OCR_SLOTS);
            prompt.extend(glyphs.iter().map(|&g| vocab::glyph(g)));
            visual.row_mut(3)[pick] += 1.0;
            vec![vocab::glyph(glyphs[pick])]
        }
    };
    answer.push(vocab::EOS);
    TaskExample { visual, prompt, answer }
}

fn split(spec: &SyntheticTaskSpec, name: &str, n: usize) -> Vec<TaskExample> {
    let mut rng = substream(spec.seed, &format!("{STREAM_DATA}/{}/{name}", spec.kind.name()));
    (0..n).map(|_| example(spec.kind, &mut rng)).collect()
}

/// Deterministic dataset for `spec`; train and eval draw from separate streams.
pub fn generate_task(spec: &SyntheticTaskSpec) -> Result<TaskDataset> {
    if spec.train_n == 0 && spec.eval_n == 0 {
        return Err(LabError::Config(format!("task {} needs at least one example", spec.kind)));
    }
    let train = split(spec, "train", spec.train_n);
    let eval = split(spec, "eval", spec.eval_n);
    if spec.kind == TaskKind::CaptionHeldOut {
        let (digits, total) = train
            .iter()
            .chain(&eval)
            .flat_map(|e| &e.answer)
            .fold((0usize, 0usize), |(d, t), &tok| (d + vocab::is_digit(tok) as usize, t + 1));
        if digits * 20 >= total {
            return Err(LabError::Internal("held-out answers carry numeric tokens".into()));
        }
    }
    Ok(TaskDataset { spec: *spec, train, eval })
}

/// Latent count encoded in a counting image (number of lit thermometer cells).
pub fn count_of(example: &TaskExample) -> Option<usize> {
    example.answer.first().filter(|&&t| vocab::is_digit(t)).map(|&t| (t - vocab::digit(0)) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_split() {
        let spec = SyntheticTaskSpec::new(TaskKind::Count, 7, 10, 10);
        let a = generate_task(&spec).unwrap();
        let b = generate_task(&spec).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train[0].visual, a.eval[0].visual);
        assert!(a.train.iter().all(|e| vocab::is_digit(e.answer[0])));
    }

    #[test]
    fn answer_shapes() {
        for kind in TaskKind::ALL {
            let d = generate_task(&SyntheticTaskSpec::new(kind, 1, 20, 5)).unwrap();
            for e in d.train.iter().chain(&d.eval) {
                assert_eq!(e.answer.len(), kind.answer_len(), "{kind}");
                assert_eq!(*e.answer.last().unwrap(), vocab::EOS);
                assert_eq!(e.visual.shape(), [VISUAL_TOKENS, VISUAL_DIM]);
                assert_eq!(e.prompt[0], kind.prompt_token());
            }
        }
    }
}
