//! Command-line driver: configuration, run orchestration and artifacts.

pub mod config;
pub mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dlab_core::checkpoint::FORMAT_VERSION;
use dlab_core::curriculum::{evaluation_row, prepare_stage, pretrain_base, run_sequence, DataLedger, StageTrainer, TrainConfig};
use dlab_core::groups::ParamGroup;
use dlab_core::metrics::{compute_metrics, AccuracyMatrix, HELD_OUT};
use dlab_core::mitigation::{merge_lora, moe_wrap_all, wise_ft_interpolate, MitigationKind, BETA_SWEEP};
use dlab_core::objectives::{Distill, TaskBatch};
use dlab_core::probes::{attribution_csv, layer_attribution, ntb, ntb_csv, ProbeBatch};
use dlab_core::rng::{substream, RngState, STREAM_DATA, STREAM_DISTILL, STREAM_INIT};
use dlab_core::tasks::{generate_task, SyntheticTaskSpec, TaskKind};
use dlab_core::{load_checkpoint, save_checkpoint, Checkpoint, TinyLmm};

pub use config::{CurriculumConfig, ExperimentConfig, ProbeConfig, SEED_ENV};
pub use report::emit_report;

pub const MANIFEST: &str = "manifest.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const INTERPOLATE_CSV: &str = "interpolate.csv";
pub const BASE_CKPT: &str = "base.dlab";
pub const MANIFEST_VERSION: u32 = 1;

pub fn stage_checkpoint(k: usize) -> String {
    format!("ckpt_stage{k}.dlab")
}

pub fn step_checkpoint(step: usize) -> String {
    format!("ckpt_step{step}.dlab")
}

fn parse_group(s: &str) -> std::result::Result<ParamGroup, String> {
    s.parse().map_err(|e: dlab_core::LabError| e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "dlab", version, about = "Continual-tuning experiments on a tiny multimodal decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Parameter group to tune: full, vision, projector, vision+projector, llm,
    /// sa_proj, sa_proj_qkv, mlp, mlp_gate_up (comma-join for a union).
    #[arg(long, value_parser = parse_group)]
    group: Option<ParamGroup>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the base model and save it as base.dlab.
    Train(RunArgs),
    /// Run the stage sequence; writes matrix.csv, metrics.json and per-stage checkpoints.
    Sequence(RunArgs),
    /// Tune on the probe task, measuring number-token bias over the checkpoint grid.
    Probe(RunArgs),
    /// Per-layer attribution of tuned checkpoints against the base model.
    Attribute {
        #[command(flatten)]
        run: RunArgs,
        /// Tuned checkpoint(s); defaults to the probe run's grid checkpoints.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Evaluate base/tuned weight interpolations of a finished sequence.
    Interpolate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = BETA_SWEEP)]
        betas: Vec<f64>,
    },
    /// Fold LoRA adapters of a checkpoint into its base weights.
    MergeLora {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Render SVG plots from the CSVs in a run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

/// Parse `argv` (program name first) and run it. Returns the process exit code:
/// 0 on success, 1 when the run fails, 2 on a usage error.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let mut text = e.render().to_string();
            if code != 0 && !text.contains("Usage:") {
                text.push_str(&format!("\n{}\n", usage_for(argv.get(1))));
            }
            if code == 0 {
                print!("{text}");
            } else {
                eprint!("{text}");
            }
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn usage_for(sub: Option<&OsString>) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    let name = sub.and_then(|s| s.to_str()).unwrap_or_default();
    match cmd.find_subcommand_mut(name) {
        Some(s) => s.render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(run) => cmd_train(&load(&run)?),
        Command::Sequence(run) => cmd_sequence(&load(&run)?),
        Command::Probe(run) => cmd_probe(&load(&run)?),
        Command::Attribute { run, checkpoints } => cmd_attribute(&load(&run)?, &checkpoints),
        Command::Interpolate { run, betas } => cmd_interpolate(&load(&run)?, &betas),
        Command::MergeLora { input, output } => cmd_merge_lora(&input, &output),
        Command::Report { dir } => {
            for p in emit_report(&dir)? {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

fn load(run: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&run.config)?;
    if let Some(g) = &run.group {
        cfg.group = Some(g.clone());
    }
    if let Some(o) = &run.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

/// Format versions and the fully resolved config of the runs in a directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub manifest_version: u32,
    pub checkpoint_format: u32,
    pub tool_version: String,
    pub seed: u64,
    /// Commands run in this directory, in order.
    pub commands: Vec<String>,
    pub config: ExperimentConfig,
}

/// Create the output directory and record `command` in its manifest before any
/// work starts. A directory may only hold runs of one resolved config.
pub fn write_manifest(cfg: &ExperimentConfig, command: &str) -> Result<PathBuf> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let resolved = cfg.resolved()?;
    let path = dir.join(MANIFEST);
    let mut commands = Vec::new();
    if path.exists() {
        let text = std::fs::read_to_string(&path)?;
        let old: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if old.config != resolved {
            bail!("{} describes a different experiment; use a fresh output directory", path.display());
        }
        commands = old.commands;
    }
    commands.push(command.to_string());
    let m = Manifest {
        manifest_version: MANIFEST_VERSION,
        checkpoint_format: FORMAT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        commands,
        config: resolved,
    };
    std::fs::write(&path, serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(dir.clone())
}

/// The configured base checkpoint, or a freshly pretrained base model.
pub fn base_model(cfg: &ExperimentConfig) -> Result<TinyLmm> {
    if let Some(p) = &cfg.base_checkpoint {
        let ckpt = load_checkpoint(p).with_context(|| format!("loading base checkpoint {}", p.display()))?;
        ensure!(
            ckpt.model.config() == &cfg.model,
            "base checkpoint {} has architecture {:?}, config says {:?}",
            p.display(),
            ckpt.model.config(),
            cfg.model
        );
        return Ok(ckpt.model);
    }
    log::info!("pretraining base model for {} steps", cfg.pretrain.steps);
    Ok(pretrain_base(cfg.model, cfg.seed, &cfg.pretrain)?)
}

fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    save_checkpoint(ckpt, path).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let dir = write_manifest(cfg, "train")?;
    let model = pretrain_base(cfg.model, cfg.seed, &cfg.pretrain)?;
    let path = dir.join(BASE_CKPT);
    let rng = RngState::capture(&substream(cfg.seed, STREAM_DATA));
    save(&Checkpoint::new(model, cfg.pretrain.steps as u64, rng), &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_sequence(cfg: &ExperimentConfig) -> Result<()> {
    let seq = cfg.sequence()?;
    let dir = write_manifest(cfg, "sequence")?;
    let base = base_model(cfg)?;
    let out = run_sequence(&base, &seq)?;
    let metrics = compute_metrics(&out.matrix, &seq.target_names())?;
    std::fs::write(dir.join(report::MATRIX_CSV), out.matrix.to_csv())?;
    std::fs::write(dir.join(METRICS_JSON), serde_json::to_string_pretty(&metrics)? + "\n")?;
    for (i, stage) in out.stages.iter().enumerate() {
        save(&stage.checkpoint, &dir.join(stage_checkpoint(i + 1)))?;
    }
    println!(
        "learning {:.2}  forgetting {:.2}  overall {:.2}  held-out {:+.2}",
        metrics.target_learning, metrics.target_forgetting, metrics.target_overall, metrics.held_out_forgetting
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_probe(cfg: &ExperimentConfig) -> Result<()> {
    let grid = cfg.grid()?;
    let group = cfg.group()?.clone();
    cfg.mitigation.validate()?;
    let set = cfg.numeric_tokens()?;
    let batch = ProbeBatch::sample(cfg.seed, cfg.probe.batch_size)?;
    let data = generate_task(&SyntheticTaskSpec::new(cfg.probe.task, cfg.seed, cfg.probe.train_n, 0))?;
    let dir = write_manifest(cfg, "probe")?;
    let base = base_model(cfg)?;

    let kind = cfg.mitigation.kind;
    let mut model = base.clone();
    if kind == MitigationKind::Moe {
        moe_wrap_all(&mut model)?;
    }
    let mask = prepare_stage(&mut model, &group, &cfg.mitigation, &mut substream(cfg.seed, STREAM_INIT))?;
    let train = TrainConfig { steps: Some(*grid.last().expect("non-empty")), ..cfg.train };
    let teacher = (kind == MitigationKind::Lwf).then(|| base.clone());
    let trainer = StageTrainer {
        data: &data,
        mask: &mask,
        cfg: &train,
        distill: teacher.as_ref().map(|t| Distill { teacher: t, cfg: cfg.mitigation.lwf }),
    };

    let mut points = vec![(0u64, ntb(&base, &batch, &set)?)];
    let mut on_step = |step: usize, m: &TinyLmm, rng: &_| -> dlab_core::Result<()> {
        if grid.binary_search(&step).is_err() {
            return Ok(());
        }
        let v = match kind {
            MitigationKind::WiseFt => ntb(&wise_ft_interpolate(&base, m, cfg.mitigation.wise_ft.beta)?, &batch, &set)?,
            _ => ntb(m, &batch, &set)?,
        };
        log::info!("step {step}: ntb {v:.4}");
        points.push((step as u64, v));
        save_checkpoint(&Checkpoint::new(m.clone(), step as u64, RngState::capture(rng)), &dir.join(step_checkpoint(step)))
    };
    trainer.run(
        &mut model,
        1,
        &mut substream(cfg.seed, STREAM_DATA),
        &mut substream(cfg.seed, STREAM_DISTILL),
        &mut DataLedger::default(),
        &mut on_step,
    )?;
    std::fs::write(dir.join(report::PROBE_CSV), ntb_csv(&points))?;
    for (s, v) in &points {
        println!("step {s:>6}  ntb {v:.4}");
    }
    Ok(())
}

/// Teacher-forced examples for layer attribution.
pub fn attribution_batch(cfg: &ExperimentConfig) -> Result<TaskBatch> {
    let data = generate_task(&SyntheticTaskSpec::new(TaskKind::CaptionHeldOut, cfg.seed, 0, cfg.probe.attribution_n))?;
    Ok(TaskBatch::new(data.eval))
}

fn cmd_attribute(cfg: &ExperimentConfig, explicit: &[PathBuf]) -> Result<()> {
    let paths: Vec<PathBuf> = if explicit.is_empty() {
        let grid = cfg.grid()?;
        let found: Vec<PathBuf> = grid.iter().map(|&s| cfg.output_dir.join(step_checkpoint(s))).filter(|p| p.exists()).collect();
        if found.is_empty() {
            bail!(
                "no probe checkpoints in {} (expected {}); run `probe` first or pass --checkpoint",
                cfg.output_dir.display(),
                grid.iter().map(|&s| step_checkpoint(s)).collect::<Vec<_>>().join(", ")
            );
        }
        found
    } else {
        explicit.to_vec()
    };
    let batch = attribution_batch(cfg)?;
    let dir = write_manifest(cfg, "attribute")?;
    let base = base_model(cfg)?;
    let mut reports = Vec::with_capacity(paths.len());
    for p in &paths {
        let ckpt = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
        let r =
            layer_attribution(&base, &ckpt.model, &batch, ckpt.step).with_context(|| format!("attributing {}", p.display()))?;
        log::info!("{}: completeness error {:.2e}", p.display(), r.completeness_error());
        reports.push(r);
    }
    reports.sort_by_key(|r| r.step);
    std::fs::write(dir.join(report::ATTRIBUTION_CSV), attribution_csv(&reports))?;
    for r in &reports {
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
        println!("step {:>6}  sa [{}]  mlp [{}]", r.step, fmt(&r.sa), fmt(&r.mlp));
    }
    Ok(())
}

fn cmd_interpolate(cfg: &ExperimentConfig, betas: &[f64]) -> Result<()> {
    ensure!(!betas.is_empty(), "no interpolation weights given");
    if let Some(b) = betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
        bail!("interpolation weight {b} outside [0, 1]");
    }
    let seq = cfg.sequence()?;
    let dir = cfg.output_dir.clone();
    let stages = (1..=seq.stages.len())
        .map(|k| {
            let p = dir.join(stage_checkpoint(k));
            load_checkpoint(&p).with_context(|| format!("loading {} (run `sequence` first)", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(cfg, "interpolate")?;
    let base = base_model(cfg)?;
    let targets = seq.stages.iter().map(generate_task).collect::<dlab_core::Result<Vec<_>>>()?;
    let held = seq.held_out.iter().map(generate_task).collect::<dlab_core::Result<Vec<_>>>()?;
    let mut columns = seq.target_names();
    columns.push(HELD_OUT.to_string());
    let base_row = evaluation_row(&base, &targets, &held)?;

    let mut csv = String::from("beta,target_learning,target_forgetting,target_overall,held_out_forgetting\n");
    for &beta in betas {
        let mut m = AccuracyMatrix::new(columns.clone());
        m.push_row(base_row.clone())?;
        for ckpt in &stages {
            let mixed = wise_ft_interpolate(&base, &ckpt.model, beta)?;
            m.push_row(evaluation_row(&mixed, &targets, &held)?)?;
        }
        let s = compute_metrics(&m, &seq.target_names())?;
        csv.push_str(&format!(
            "{beta},{},{},{},{}\n",
            s.target_learning, s.target_forgetting, s.target_overall, s.held_out_forgetting
        ));
        println!(
            "beta {beta:.2}  learning {:.2}  forgetting {:.2}  overall {:.2}  held-out {:+.2}",
            s.target_learning, s.target_forgetting, s.target_overall, s.held_out_forgetting
        );
    }
    std::fs::write(dir.join(INTERPOLATE_CSV), csv)?;
    Ok(())
}

fn cmd_merge_lora(input: &Path, output: &Path) -> Result<()> {
    let mut ckpt = load_checkpoint(input).with_context(|| format!("loading {}", input.display()))?;
    let merged = merge_lora(&mut ckpt.model)?;
    ensure!(merged > 0, "{} holds no LoRA adapters", input.display());
    save(&ckpt, output)?;
    println!("merged {merged} adapters into {}", output.display());
    Ok(())
}
