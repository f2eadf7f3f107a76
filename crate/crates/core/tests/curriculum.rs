use dlab_core::curriculum::{
    default_held_out, default_stages, run_sequence, DataLedger, SequenceConfig, SequenceOutcome, StageTrainer, TrainConfig,
};
use dlab_core::groups::{AdamConfig, FreezeMask, ParamGroup};
use dlab_core::mitigation::{MitigationConfig, MitigationKind, WiseFtConfig};
use dlab_core::objectives::DistillConfig;
use dlab_core::rng::substream;
use dlab_core::tasks::{generate_task, SyntheticTaskSpec, TaskKind};
use dlab_core::{load_checkpoint, save_checkpoint, LabError, ModelConfig, TinyLmm};
use rand::Rng;

fn base() -> TinyLmm {
    TinyLmm::seeded(ModelConfig::default(), 21).unwrap()
}

fn short(group: ParamGroup, mitigation: MitigationConfig) -> SequenceConfig {
    SequenceConfig {
        stages: vec![SyntheticTaskSpec::new(TaskKind::Count, 1, 32, 20), SyntheticTaskSpec::new(TaskKind::Classify, 2, 32, 20)],
        held_out: default_held_out(3, 20),
        group,
        mitigation,
        train: TrainConfig { batch_size: 4, ..Default::default() },
        seed: 5,
    }
}

fn run(cfg: &SequenceConfig) -> SequenceOutcome {
    run_sequence(&base(), cfg).unwrap()
}

#[test]
fn empty_selection_keeps_the_baseline_row() {
    let mut cfg = short(ParamGroup::Composite(vec![]), MitigationConfig::none());
    cfg.stages.truncate(1);
    let out = run(&cfg);
    assert_eq!(out.matrix.rows.len(), 2);
    assert_eq!(out.matrix.rows[0], out.matrix.rows[1]);
    assert_eq!(out.stages[0].checkpoint.model, base());
}

#[test]
fn default_curriculum_shape_and_ledger() {
    let cfg = SequenceConfig {
        stages: default_stages(0, 4, 16, 10).unwrap(),
        held_out: default_held_out(4, 10),
        group: ParamGroup::SaProj,
        mitigation: MitigationConfig::none(),
        train: TrainConfig { batch_size: 8, ..Default::default() },
        seed: 4,
    };
    let out = run(&cfg);
    assert_eq!(out.matrix.rows.len(), 6);
    assert!(out.matrix.rows.iter().all(|r| r.len() == 6));
    assert_eq!(out.matrix.columns.last().unwrap(), "held_out");
    assert!(out.matrix.rows.iter().flatten().all(|v| (0.0..=100.0).contains(v)));
    let expected: Vec<(usize, TaskKind)> = cfg.stages.iter().enumerate().map(|(i, s)| (i + 1, s.kind)).collect();
    assert_eq!(out.ledger.entries(), expected.as_slice());
    assert_eq!(out.stages.iter().map(|s| s.report.steps).collect::<Vec<_>>(), vec![2; 5]);
    assert_eq!(out.stages[4].checkpoint.step, 10);
}

#[test]
fn ledger_flags_rehearsal() {
    let stages = [SyntheticTaskSpec::new(TaskKind::Count, 0, 1, 1), SyntheticTaskSpec::new(TaskKind::Classify, 0, 1, 1)];
    let mut ledger = DataLedger::default();
    ledger.record(1, TaskKind::Count);
    ledger.record(2, TaskKind::Classify);
    assert!(ledger.assert_rehearsal_free(&stages).is_ok());
    ledger.record(2, TaskKind::Count);
    assert!(ledger.assert_rehearsal_free(&stages).is_err());
}

#[test]
fn invalid_sequences_are_rejected() {
    let mut cfg = short(ParamGroup::Mlp, MitigationConfig::none());
    cfg.stages.push(cfg.stages[0]);
    assert!(matches!(run_sequence(&base(), &cfg), Err(LabError::Config(_))));
    let mut cfg = short(ParamGroup::Mlp, MitigationConfig::none());
    cfg.stages.push(SyntheticTaskSpec::new(TaskKind::CaptionHeldOut, 0, 4, 4));
    assert!(matches!(run_sequence(&base(), &cfg), Err(LabError::Config(_))));
    let mut cfg = short(ParamGroup::Mlp, MitigationConfig::none());
    cfg.stages.clear();
    assert!(matches!(run_sequence(&base(), &cfg), Err(LabError::Config(_))));
    let cfg = short(ParamGroup::Mlp, MitigationConfig::lwf(DistillConfig { tau: 0.0, ..Default::default() }));
    assert!(matches!(run_sequence(&base(), &cfg), Err(LabError::Config(_))));
}

#[test]
fn runs_are_reproducible() {
    for kind in [MitigationKind::None, MitigationKind::Lwf, MitigationKind::Lora, MitigationKind::Moe, MitigationKind::WiseFt] {
        let cfg = short(ParamGroup::Mlp, MitigationConfig { kind, ..Default::default() });
        let (a, b) = (run(&cfg), run(&cfg));
        assert_eq!(a.matrix, b.matrix, "{kind:?}");
        for (x, y) in a.stages.iter().zip(&b.stages) {
            assert_eq!(x.checkpoint.to_bytes().unwrap(), y.checkpoint.to_bytes().unwrap(), "{kind:?}");
        }
    }
}

#[test]
fn zero_weight_distillation_matches_plain_tuning() {
    let plain = run(&short(ParamGroup::Mlp, MitigationConfig::none()));
    let lwf = run(&short(ParamGroup::Mlp, MitigationConfig::lwf(DistillConfig { lambda: 0.0, ..Default::default() })));
    assert_eq!(plain.matrix, lwf.matrix);
    assert_eq!(plain.stages[1].checkpoint.model, lwf.stages[1].checkpoint.model);
    let real = run(&short(ParamGroup::Mlp, MitigationConfig::lwf(DistillConfig::default())));
    assert_ne!(plain.stages[1].checkpoint.model, real.stages[1].checkpoint.model);
}

#[test]
fn wise_ft_evaluates_the_interpolation_and_keeps_the_tuned_weights() {
    let plain = run(&short(ParamGroup::Mlp, MitigationConfig::none()));
    let full = MitigationConfig { kind: MitigationKind::WiseFt, wise_ft: WiseFtConfig { beta: 1.0 }, ..Default::default() };
    let at_one = run(&short(ParamGroup::Mlp, full));
    assert_eq!(plain.matrix, at_one.matrix);
    let none = MitigationConfig { kind: MitigationKind::WiseFt, wise_ft: WiseFtConfig { beta: 0.0 }, ..Default::default() };
    let at_zero = run(&short(ParamGroup::Mlp, none));
    assert!(at_zero.matrix.rows.iter().all(|r| *r == at_zero.matrix.rows[0]));
    assert_eq!(at_zero.stages[0].evaluated, base());
    assert_eq!(at_zero.stages[0].checkpoint.model, plain.stages[0].checkpoint.model);
}

#[test]
fn lora_runs_end_with_plain_weights_inside_the_group() {
    let out = run(&short(ParamGroup::SaProjQkv, MitigationConfig { kind: MitigationKind::Lora, ..Default::default() }));
    let tuned = &out.stages[1].checkpoint.model;
    assert_eq!(tuned.params().len(), 40);
    let group = ParamGroup::SaProjQkv.resolve(tuned.params()).unwrap();
    let b = base();
    for (name, t) in b.params().iter() {
        let moved = tuned.param(name).unwrap() != t;
        assert!(!moved || group.contains(name), "{name} moved");
    }
}

#[test]
fn divergence_is_reported() {
    let model = base();
    let data = generate_task(&SyntheticTaskSpec::new(TaskKind::Count, 0, 16, 0)).unwrap();
    let mask = FreezeMask::from_group(&ParamGroup::Full, model.params()).unwrap();
    let cfg =
        TrainConfig { batch_size: 4, steps: Some(20), adam: AdamConfig { lr: 1e30, warmup_frac: 0.0, ..Default::default() } };
    let trainer = StageTrainer { data: &data, mask: &mask, cfg: &cfg, distill: None };
    let mut m = model.clone();
    let err =
        trainer.run(&mut m, 1, &mut substream(0, "data"), &mut substream(0, "distill"), &mut DataLedger::default(), |_, _, _| {
            Ok(())
        });
    assert!(matches!(err, Err(LabError::Diverged(_))), "{err:?}");
}

#[test]
fn checkpoint_files_round_trip_with_the_stream_position() {
    let out = run(&short(ParamGroup::Mlp, MitigationConfig::none()));
    let ckpt = &out.stages[0].checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt_stage1.dlab");
    save_checkpoint(ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(&back, ckpt);
    let mut a = ckpt.rng.restore();
    let mut b = back.rng.restore();
    assert_eq!(a.random::<u64>(), b.random::<u64>());
    std::fs::write(&path, b"DLAB").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(LabError::Format(_))));
    assert!(matches!(load_checkpoint(&dir.path().join("missing.dlab")), Err(LabError::Io(_))));
}
