//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use dlab_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use dlab_core::curriculum::{pretrain_base, run_sequence, PretrainConfig, SequenceConfig, TrainConfig};
use dlab_core::gradcheck::finite_diff_check;
use dlab_core::groups::{AdamConfig, ParamGroup};
use dlab_core::metrics::{compute_metrics, AccuracyMatrix, HELD_OUT};
use dlab_core::mitigation::{
    attach_lora, merge_lora, moe_forward, moe_layer, moe_routing, moe_wrap, moe_wrap_all, wise_ft_interpolate, MitigationConfig,
    MitigationKind,
};
use dlab_core::model::{block_param, forward_sequence, forward_trace, greedy_decode, mlp_sublayer, HEAD};
use dlab_core::objectives::{
    combined_loss, distill_loss, distill_loss_on_tape, distill_targets_in, sample_positions, task_loss, task_loss_on_tape,
    DistillConfig, TaskBatch, TaskExample,
};
use dlab_core::params::ParamNodes;
use dlab_core::probes::{layer_attribution, ntb, NumericTokenSet, ProbeBatch};
use dlab_core::rng::{substream, LabRng, RngState};
use dlab_core::tasks::{generate_task, SyntheticTaskSpec, TaskKind};
use dlab_core::{ModelConfig, Tensor, TinyLmm};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, budget: Duration, detail: String) -> Outcome {
    check(elapsed < budget, format!("{detail}; {:.1} s of {:.0} s budget", elapsed.as_secs_f64(), budget.as_secs_f64()))
}

fn rng(seed: u64) -> LabRng {
    substream(seed, "acceptance")
}

fn small_config() -> ModelConfig {
    ModelConfig { layers: 2, d_model: 8, heads: 2, head_dim: 4, hidden: 16, vocab: 12, visual_tokens: 2, visual_dim: 4 }
}

fn random_visual(cfg: &ModelConfig, r: &mut LabRng) -> Tensor {
    Tensor::randn(&[cfg.visual_tokens, cfg.visual_dim], 1.0, r)
}

fn random_tokens(cfg: &ModelConfig, n: usize, r: &mut LabRng) -> Vec<u32> {
    (0..n).map(|_| r.random_range(0..cfg.vocab as u32)).collect()
}

fn random_batch(cfg: &ModelConfig, n: usize, r: &mut LabRng) -> TaskBatch {
    TaskBatch::new(
        (0..n)
            .map(|_| {
                let (p, a) = (r.random_range(1..=3), r.random_range(1..=3));
                TaskExample { visual: random_visual(cfg, r), prompt: random_tokens(cfg, p, r), answer: random_tokens(cfg, a, r) }
            })
            .collect(),
    )
}

/// Seeded model with norm gains moved away from 1.
fn random_model(cfg: ModelConfig, seed: u64) -> TinyLmm {
    let mut model = TinyLmm::seeded(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0xabcdef);
    let names: Vec<String> =
        model.params().names().filter(|n| n.ends_with("ln1") || n.ends_with("ln2")).map(String::from).collect();
    for n in names {
        for v in model.params_mut().get_mut(&n).unwrap().data_mut() {
            *v = 1.0 + r.random_range(-0.3..0.3);
        }
    }
    model
}

fn nudge(model: &TinyLmm, names: &[String], seed: u64, std: f32) -> TinyLmm {
    let mut out = model.clone();
    let mut r = rng(seed);
    for name in names {
        let t = out.params_mut().get_mut(name).unwrap();
        *t = t.add(&Tensor::randn(t.shape(), std, &mut r)).unwrap();
    }
    out
}

fn caption_batch(seed: u64, n: usize) -> TaskBatch {
    TaskBatch::new(generate_task(&SyntheticTaskSpec::new(TaskKind::CaptionHeldOut, seed, 0, n)).unwrap().eval)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn telescoping() -> Outcome {
    let start = Instant::now();
    let cfg = small_config();
    let mut r = rng(77);
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let model = random_model(cfg, seed);
        let n = r.random_range(1..5);
        let trace = forward_trace(&model, &random_tokens(&cfg, n, &mut r), &random_visual(&cfg, &mut r)).unwrap();
        worst = worst.max(trace.telescoping_error());
    }
    let detail = format!("max |r_L - r_0 - sum a - sum f| = {worst:.2e} over 100 models (tol 1e-5)");
    if worst > 1e-5 {
        return Err(detail);
    }
    within(start.elapsed(), Duration::from_secs(10), detail)
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let cfg = small_config();
    let student = random_model(cfg, 11);
    let teacher = random_model(cfg, 12).params().cast::<f64>();
    let batch = random_batch(&cfg, 2, &mut rng(5));
    let targets = distill_targets_in(&teacher, &cfg, &batch, 3, &mut rng(7)).unwrap();
    let store = student.params().cast::<f64>();
    let mut worst = 0.0f64;
    let mut coords = 0;
    for group in ParamGroup::NAMED {
        let names = group.resolve(student.params()).unwrap();
        let mut params = store.to_map();
        params.retain(|n, _| names.contains(n));
        let task = finite_diff_check(
            |tape, nodes| {
                let bound = ParamNodes::bind_with(tape, &store, nodes);
                task_loss_on_tape(tape, &cfg, &bound, &batch)
            },
            &params,
            1e-5,
        )
        .unwrap();
        let dist = finite_diff_check(
            |tape, nodes| {
                let bound = ParamNodes::bind_with(tape, &store, nodes);
                distill_loss_on_tape(tape, &cfg, &bound, &batch, &targets, 2.0)
            },
            &params,
            1e-5,
        )
        .unwrap();
        worst = worst.max(task.max_rel_error).max(dist.max_rel_error);
        coords += task.coordinates + dist.coordinates;
    }
    let detail = format!("max relative error {worst:.2e} over {coords} coordinates, 9 groups x 2 losses (tol 1e-3)");
    if worst > 1e-3 {
        return Err(detail);
    }
    within(start.elapsed(), Duration::from_secs(60), detail)
}

fn freeze_hermeticity() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let base = TinyLmm::seeded(ModelConfig::default(), 4).unwrap();
    let base_path = dir.path().join("base.dlab");
    save_checkpoint(&Checkpoint::new(base.clone(), 0, RngState::default()), &base_path).unwrap();
    let base = load_checkpoint(&base_path).unwrap().model;
    let mut problems = Vec::new();
    for group in ParamGroup::NAMED {
        let cfg = SequenceConfig {
            stages: vec![SyntheticTaskSpec::new(TaskKind::Count, 4, 1600, 10)],
            held_out: vec![SyntheticTaskSpec::new(TaskKind::CaptionHeldOut, 4, 0, 10)],
            group: group.clone(),
            mitigation: MitigationConfig::none(),
            train: TrainConfig { steps: Some(200), ..Default::default() },
            seed: 4,
        };
        let out = run_sequence(&base, &cfg).unwrap();
        let path = dir.path().join(format!("{}.dlab", group.name().replace('+', "_")));
        save_checkpoint(&out.stages[0].checkpoint, &path).unwrap();
        let tuned = load_checkpoint(&path).unwrap().model;
        let inside = group.resolve(base.params()).unwrap();
        let mut moved_inside = 0;
        for (name, before) in base.params().iter() {
            let same = tuned.param(name).unwrap().to_le_bytes() == before.to_le_bytes();
            if inside.contains(name) {
                moved_inside += !same as usize;
            } else if !same {
                problems.push(format!("{} moved {name}", group.name()));
            }
        }
        if moved_inside == 0 {
            problems.push(format!("{} trained nothing", group.name()));
        }
    }
    let detail = if problems.is_empty() {
        "9 groups x 200 steps: every out-of-group tensor byte-identical".to_string()
    } else {
        problems.join("; ")
    };
    if !problems.is_empty() {
        return Err(detail);
    }
    within(start.elapsed(), Duration::from_secs(120), detail)
}

fn table_matrix(targets: [[f64; 6]; 5], held: [f64; 6]) -> (AccuracyMatrix, Vec<String>) {
    let names: Vec<String> = ["cub200", "pixmo_count", "path_vqa", "text_vqa", "time_clock"].map(String::from).to_vec();
    let mut columns = names.clone();
    columns.push(HELD_OUT.into());
    let mut m = AccuracyMatrix::new(columns);
    for stage in 0..6 {
        let mut row: Vec<f64> = targets.iter().map(|t| t[stage]).collect();
        row.push(held[stage]);
        m.push_row(row).unwrap();
    }
    (m, names)
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let tables = [
        (
            "sa_proj",
            [
                [53.7, 85.5, 85.1, 84.8, 84.4, 84.0],
                [52.4, 53.9, 67.8, 68.2, 64.8, 66.3],
                [36.3, 35.7, 35.0, 55.9, 52.6, 51.4],
                [76.0, 76.1, 76.4, 75.8, 79.3, 78.9],
                [1.1, 1.0, 1.2, 1.0, 1.2, 52.6],
            ],
            [76.4, 76.7, 76.3, 76.3, 76.9, 76.5],
            [24.3, -2.0, 22.7, 0.1],
        ),
        (
            "full",
            [
                [53.7, 90.7, 89.2, 88.1, 88.0, 86.9],
                [52.4, 54.9, 73.0, 64.6, 63.1, 59.4],
                [36.3, 34.8, 3.7, 63.6, 59.8, 58.6],
                [76.0, 76.6, 59.0, 74.6, 79.6, 68.9],
                [1.1, 1.0, 1.4, 1.2, 1.5, 46.9],
            ],
            [76.4, 76.5, 62.7, 73.9, 74.1, 65.5],
            [26.86, -8.275, 20.24, -10.9],
        ),
        (
            "mlp",
            [
                [53.7, 90.1, 89.5, 89.6, 89.3, 88.9],
                [52.4, 54.1, 71.5, 67.6, 68.0, 62.0],
                [36.3, 35.6, 17.0, 64.1, 60.9, 60.9],
                [76.0, 76.6, 66.2, 75.3, 79.8, 74.0],
                [1.1, 1.0, 1.5, 1.2, 1.6, 74.0],
            ],
            [76.4, 76.7, 72.2, 75.7, 75.7, 72.8],
            [32.0, -4.925, 28.06, -3.6],
        ),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, targets, held, want) in tables {
        let (m, names) = table_matrix(targets, held);
        let s = compute_metrics(&m, &names).unwrap();
        let got = [s.target_learning, s.target_forgetting, s.target_overall, s.held_out_forgetting];
        ok &= got.iter().zip(want).all(|(g, w)| (g - w).abs() <= 0.05);
        parts.push(format!("{name} {:.2}/{:.2}/{:.2}/{:+.2}", got[0], got[1], got[2], got[3]));
    }
    let detail = format!("{} (tol 0.05)", parts.join(", "));
    if !ok {
        return Err(detail);
    }
    within(start.elapsed(), Duration::from_secs(1), detail)
}

fn distillation_identities() -> Outcome {
    let cfg = small_config();
    let model = random_model(cfg, 2);
    let batch = random_batch(&cfg, 6, &mut rng(3));
    let mut self_loss = 0.0f64;
    let mut self_grad = 0.0f64;
    for tau in [0.5, 1.0, 2.0, 4.0] {
        let out = distill_loss(&model, &model, &batch, &DistillConfig { tau, ..Default::default() }, &mut rng(1)).unwrap();
        self_loss = self_loss.max(out.loss.abs());
        self_grad = self_grad.max(out.grads.max_abs() as f64);
    }

    let student = random_model(cfg, 5);
    let teacher = random_model(cfg, 6);
    let task = task_loss(&student, &batch).unwrap();
    let dist =
        distill_loss(&student, &teacher, &batch, &DistillConfig { max_positions: 4, ..Default::default() }, &mut rng(0)).unwrap();
    let mut lin = 0.0f64;
    for lambda in [0.0, 0.25, 1.0, 3.0] {
        let both = combined_loss(
            &student,
            &teacher,
            &batch,
            &DistillConfig { lambda, max_positions: 4, ..Default::default() },
            &mut rng(0),
        )
        .unwrap();
        lin = lin.max((both.loss - (task.loss + lambda * dist.loss)).abs());
        for (name, g) in both.grads.iter() {
            let want = task.grads.get(name).unwrap().add(&dist.grads.get(name).unwrap().scale(lambda as f32)).unwrap();
            lin = lin.max(g.max_abs_diff(&want) as f64);
        }
    }

    let mut r = rng(0);
    let cap_ok = [0usize, 1, 7, 999, 1000, 1001, 5000].iter().all(|&len| {
        let s = sample_positions(len, 1000, &mut r);
        s.len() == len.min(1000) && s.windows(2).all(|w| w[0] < w[1]) && s.iter().all(|&p| p < len)
    });
    check(
        self_loss <= 1e-6 && self_grad <= 1e-6 && lin <= 1e-5 && cap_ok,
        format!(
            "self-KL {self_loss:.1e}, grad {self_grad:.1e} (tol 1e-6); lambda-linearity {lin:.1e} (tol 1e-5); position cap {}",
            if cap_ok { "exact" } else { "wrong" }
        ),
    )
}

fn mitigation_identities() -> Outcome {
    let cfg = ModelConfig::default();
    let base = random_model(cfg, 1);
    let names: Vec<String> = base.params().names().map(String::from).collect();
    let tuned = nudge(&base, &names, 2, 0.05);
    let at0 = wise_ft_interpolate(&base, &tuned, 0.0).unwrap();
    let at1 = wise_ft_interpolate(&base, &tuned, 1.0).unwrap();
    let wise_ok = base.params().iter().all(|(n, t)| {
        at0.param(n).unwrap().to_le_bytes() == t.to_le_bytes()
            && at1.param(n).unwrap().to_le_bytes() == tuned.param(n).unwrap().to_le_bytes()
    });

    let mut with = base.clone();
    let targets = ParamGroup::SaProj.resolve(base.params()).unwrap();
    let trainable = attach_lora(&mut with, &targets, 4, 8.0, &mut rng(0)).unwrap();
    let mut r = rng(9);
    for name in trainable.iter().filter(|n| n.ends_with("lora_b")) {
        let t = with.params_mut().get_mut(name).unwrap();
        *t = Tensor::randn(t.shape(), 0.5, &mut r);
    }
    let mut merged = with.clone();
    merge_lora(&mut merged).unwrap();
    let mut lora_equal = 0;
    for i in 0..20 {
        let mut r = rng(100 + i);
        let prompt = random_tokens(&cfg, 2, &mut r);
        let visual = random_visual(&cfg, &mut r);
        lora_equal +=
            (greedy_decode(&with, &prompt, &visual, 4).unwrap() == greedy_decode(&merged, &prompt, &visual, 4).unwrap()) as usize;
    }

    let mut moe_err = 0.0f64;
    let mut routing_half = true;
    for l in 0..cfg.layers {
        let block = base.block(l).unwrap();
        let layer = moe_wrap(&block);
        let x = Tensor::randn(&[6, cfg.d_model], 1.0, &mut rng(l as u64));
        moe_err = moe_err.max(moe_forward(&x, &layer).unwrap().max_abs_diff(&mlp_sublayer(&x, &block).unwrap()));
        routing_half &= moe_routing(&x, &layer).unwrap().data().iter().all(|&p| p == 0.5);
    }
    let mut wrapped = base.clone();
    moe_wrap_all(&mut wrapped).unwrap();
    for i in 0..10 {
        let mut r = rng(200 + i);
        let prompt = random_tokens(&cfg, 3, &mut r);
        let visual = random_visual(&cfg, &mut r);
        let a = forward_sequence(&base, &prompt, &visual, &[9, 10]).unwrap().logits;
        let b = forward_sequence(&wrapped, &prompt, &visual, &[9, 10]).unwrap().logits;
        moe_err = moe_err.max(a.max_abs_diff(&b));
    }

    let seq = SequenceConfig {
        stages: vec![SyntheticTaskSpec::new(TaskKind::Count, 6, 160, 20)],
        held_out: vec![SyntheticTaskSpec::new(TaskKind::CaptionHeldOut, 6, 0, 20)],
        group: ParamGroup::Mlp,
        mitigation: MitigationConfig { kind: MitigationKind::Moe, ..Default::default() },
        train: TrainConfig { steps: Some(40), ..Default::default() },
        seed: 6,
    };
    let out = run_sequence(&base, &seq).unwrap();
    let after = &out.stages[0].checkpoint.model;
    let mut stable = base.params().iter().all(|(n, t)| after.param(n).unwrap().to_le_bytes() == t.to_le_bytes());
    let mut new_moved = true;
    for l in 0..cfg.layers {
        let layer = moe_layer(after, l).unwrap();
        let fresh = moe_wrap(&base.block(l).unwrap());
        stable &= layer.e_pt.iter().zip(&fresh.e_pt).all(|(a, b)| a.to_le_bytes() == b.to_le_bytes());
        new_moved &= layer.e_new != fresh.e_new;
    }

    check(
        wise_ok && lora_equal == 20 && moe_err <= 1e-6 && routing_half && stable && new_moved,
        format!(
            "WiSE-FT endpoints {}; LoRA decode equal {lora_equal}/20; MoE init error {moe_err:.1e} (tol 1e-6); E_pt {} after 40 steps",
            if wise_ok { "bit-exact" } else { "differ" },
            if stable && new_moved { "byte-stable, E_new trained" } else { "changed or E_new idle" }
        ),
    )
}

fn ntb_probe() -> Outcome {
    let cfg = ModelConfig::default();
    let mut uniform = TinyLmm::seeded(cfg, 0).unwrap();
    *uniform.params_mut().get_mut(HEAD).unwrap() = Tensor::zeros(&[cfg.d_model, cfg.vocab]);
    let u = ntb(&uniform, &ProbeBatch::sample(0, 20).unwrap(), &NumericTokenSet::digits()).unwrap();
    let uniform_err = (u - 1.0 / cfg.vocab as f64).abs();

    let batch = ProbeBatch::sample(3, 8).unwrap();
    let mut r = rng(12);
    let mut violations = 0;
    for seed in 0..50 {
        let model = TinyLmm::seeded(cfg, seed).unwrap();
        let mut ids: Vec<u32> = (0..cfg.vocab as u32).collect();
        ids.shuffle(&mut r);
        let small = r.random_range(1..10);
        let large = r.random_range(small..cfg.vocab);
        let a = ntb(&model, &batch, &NumericTokenSet::new(ids[..small].to_vec(), cfg.vocab).unwrap()).unwrap();
        let b = ntb(&model, &batch, &NumericTokenSet::new(ids[..large].to_vec(), cfg.vocab).unwrap()).unwrap();
        violations += (a > b) as usize;
    }
    check(
        uniform_err <= 1e-7 && violations == 0,
        format!("uniform model |NTB - 1/V| = {uniform_err:.1e} (tol 1e-7); monotonicity violations {violations}/50"),
    )
}

/// Per-seed measurements for the counting-bias and attribution phenomena.
struct SeedRun {
    /// NTB rise for MLP, Gate&Up, SA Proj and MLP with LwF.
    rise: [f64; 4],
    /// Held-out drop for MLP, Gate&Up and SA Proj.
    drop: [f64; 3],
    attr_mlp: f64,
    attr_sa: f64,
    completeness: f64,
}

fn phenomenon_seed(seed: u64) -> SeedRun {
    let cfg = ModelConfig::default();
    let base = pretrain_base(cfg, seed, &PretrainConfig::default()).unwrap();
    let probe = ProbeBatch::sample(seed, 100).unwrap();
    let set = NumericTokenSet::digits();
    let base_ntb = ntb(&base, &probe, &set).unwrap();
    let lwf = MitigationConfig::lwf(DistillConfig { lambda: 1.0, tau: 2.0, max_positions: 1000 });
    let runs = [
        (ParamGroup::Mlp, MitigationConfig::none()),
        (ParamGroup::MlpGateUp, MitigationConfig::none()),
        (ParamGroup::SaProj, MitigationConfig::none()),
        (ParamGroup::Mlp, lwf),
    ];
    let mut rise = [0.0; 4];
    let mut drop = [0.0; 3];
    let mut attr = None;
    for (i, (group, mitigation)) in runs.into_iter().enumerate() {
        let seq = SequenceConfig {
            stages: vec![SyntheticTaskSpec::new(TaskKind::Count, seed, 8000, 500)],
            held_out: vec![SyntheticTaskSpec::new(TaskKind::CaptionHeldOut, seed, 0, 500)],
            group,
            mitigation,
            train: TrainConfig { adam: AdamConfig { lr: 1e-3, ..Default::default() }, ..Default::default() },
            seed,
        };
        let out = run_sequence(&base, &seq).unwrap();
        assert_eq!(out.stages[0].report.steps, 1000);
        let tuned = &out.stages[0].evaluated;
        rise[i] = ntb(tuned, &probe, &set).unwrap() - base_ntb;
        if i < 3 {
            drop[i] = out.matrix.rows[0][1] - out.matrix.rows[1][1];
        }
        if i == 0 {
            attr = Some(layer_attribution(&base, tuned, &caption_batch(seed, 100), 1000).unwrap());
        }
    }
    let attr = attr.expect("mlp run");
    let last = cfg.layers - cfg.layers.div_ceil(2);
    SeedRun {
        rise,
        drop,
        attr_mlp: attr.mlp[last..].iter().sum(),
        attr_sa: attr.sa[last..].iter().sum(),
        completeness: attr.completeness_error(),
    }
}

fn attribution_identities(runs: &[SeedRun]) -> Outcome {
    let cfg = ModelConfig::default();
    let base = random_model(cfg, 1);
    let blocks: Vec<String> = base.params().names().filter(|n| n.starts_with("block")).map(String::from).collect();
    let mut worst = runs.iter().map(|r| r.completeness).fold(0.0, f64::max);
    for seed in 0..5 {
        let tuned = nudge(&base, &blocks, seed, 0.1);
        worst = worst.max(layer_attribution(&base, &tuned, &caption_batch(seed, 25), 10).unwrap().completeness_error());
    }
    let batch = caption_batch(1, 10);
    let mut leak = 0.0f64;
    for l in 0..cfg.layers {
        for kind in ["wup", "wv"] {
            let tuned = nudge(&base, &[block_param(l, kind)], l as u64, 0.1);
            let rep = layer_attribution(&base, &tuned, &batch, 1).unwrap();
            leak = rep.sa[..l].iter().chain(&rep.mlp[..l]).fold(leak, |m, &v| m.max(v));
            if kind == "wup" {
                leak = leak.max(rep.sa[l]);
            }
        }
    }
    check(
        worst <= 1e-4 && leak <= 1e-6,
        format!("completeness {worst:.1e} over {} batches (tol 1e-4); upstream leak {leak:.1e} (tol 1e-6)", 5 + runs.len()),
    )
}

fn counting_bias(runs: &[SeedRun], elapsed: Duration) -> Outcome {
    let rise: Vec<f64> = (0..4).map(|i| median(runs.iter().map(|r| r.rise[i]).collect())).collect();
    let drop: Vec<f64> = (0..3).map(|i| median(runs.iter().map(|r| r.drop[i]).collect())).collect();
    let reduction = 1.0 - rise[3] / rise[0];
    let ordered = rise[0] > rise[1] && rise[1] > rise[2] && drop[0] > drop[1] && drop[1] > drop[2];
    let detail = format!(
        "median NTB rise mlp {:.3} > gate_up {:.3} > sa_proj {:.3}; held-out drop {:.1} > {:.1} > {:.1}; LwF rise {:.4} ({:.0}% reduction, need 50%); {} seeds",
        rise[0],
        rise[1],
        rise[2],
        drop[0],
        drop[1],
        drop[2],
        rise[3],
        100.0 * reduction,
        runs.len()
    );
    if !(ordered && reduction >= 0.5) {
        return Err(detail);
    }
    within(elapsed, Duration::from_secs(15 * 60), detail)
}

fn attribution_phenomenon(runs: &[SeedRun]) -> Outcome {
    let mlp = median(runs.iter().map(|r| r.attr_mlp).collect());
    let sa = median(runs.iter().map(|r| r.attr_sa).collect());
    let per_seed: Vec<String> = runs.iter().map(|r| format!("{:.1}/{:.1}", r.attr_mlp, r.attr_sa)).collect();
    check(mlp > sa, format!("last-half-layer drift median mlp {mlp:.2} vs sa {sa:.2} (per seed mlp/sa {})", per_seed.join(", ")))
}

fn run_cli_sequence(config: &Path, out: &Path) -> i32 {
    dlab_cli::run_command(["dlab", "sequence", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    std::fs::write(&config, r#"{"group": "mlp", "seed": 0}"#).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let codes = (run_cli_sequence(&config, &a), run_cli_sequence(&config, &b));
    if codes != (0, 0) {
        return Err(format!("sequence exit codes {codes:?}"));
    }
    let mut files = vec!["matrix.csv".to_string(), "metrics.json".to_string()];
    files.extend((1..=5).map(|k| format!("ckpt_stage{k}.dlab")));
    let differing: Vec<&String> =
        files.iter().filter(|f| std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok()).collect();
    let missing: Vec<&String> = files.iter().filter(|f| !a.join(f).exists()).collect();
    check(
        differing.is_empty() && missing.is_empty(),
        if differing.is_empty() && missing.is_empty() {
            format!("two 5-stage runs: {} artifacts byte-identical", files.len())
        } else {
            format!("differing {differing:?}, missing {missing:?}")
        },
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {id:>2} {name}: {d} [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL {id:>2} {name}: {d} [{secs:.1} s]");
            }
        }
    };
    report(1, "residual telescoping", &mut telescoping);
    report(2, "gradient oracle", &mut gradient_oracle);
    report(3, "freeze hermeticity", &mut freeze_hermeticity);
    report(4, "metric oracle", &mut metric_oracle);
    report(5, "distillation identities", &mut distillation_identities);
    report(6, "mitigation identities", &mut mitigation_identities);

    let start = Instant::now();
    let runs: Vec<SeedRun> = catch_unwind(|| (0..3).map(phenomenon_seed).collect()).unwrap_or_default();
    let phenomena_time = start.elapsed();
    let need_runs = |runs: &[SeedRun]| if runs.len() == 3 { Ok(()) } else { Err("phenomenon runs failed".to_string()) };

    report(7, "attribution completeness", &mut || attribution_identities(&runs));
    report(8, "number-token bias probe", &mut ntb_probe);
    report(9, "counting-bias phenomenon", &mut || need_runs(&runs).and_then(|_| counting_bias(&runs, phenomena_time)));
    report(10, "attribution phenomenon", &mut || need_runs(&runs).and_then(|_| attribution_phenomenon(&runs)));
    report(11, "determinism", &mut determinism);

    println!("acceptance: {} passed, {failed} failed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
