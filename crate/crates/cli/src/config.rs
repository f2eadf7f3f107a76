//! Experiment configuration: one JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dlab_core::curriculum::{default_held_out, default_stages, PretrainConfig, SequenceConfig, TrainConfig};
use dlab_core::groups::ParamGroup;
use dlab_core::mitigation::MitigationConfig;
use dlab_core::probes::{NumericTokenSet, CHECKPOINT_GRID, PROBE_BATCH};
use dlab_core::tasks::{SyntheticTaskSpec, TaskKind};
use dlab_core::ModelConfig;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "DLAB_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    /// Which shipped stage order to use when `stages` is absent.
    pub order: usize,
    pub train_n: usize,
    pub eval_n: usize,
    pub stages: Option<Vec<SyntheticTaskSpec>>,
    pub held_out: Option<Vec<SyntheticTaskSpec>>,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self { order: 0, train_n: 800, eval_n: 200, stages: None, held_out: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Token ids tracked by the bias probe; the digit words when absent.
    pub numeric_tokens: Option<Vec<u32>>,
    pub batch_size: usize,
    /// Optimizer steps at which the probe run snapshots the model.
    pub checkpoint_grid: Vec<usize>,
    /// Task the probe run tunes on.
    pub task: TaskKind,
    pub train_n: usize,
    /// Held-out examples used for layer attribution.
    pub attribution_n: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            numeric_tokens: None,
            batch_size: PROBE_BATCH,
            checkpoint_grid: CHECKPOINT_GRID.to_vec(),
            task: TaskKind::Count,
            train_n: 8000,
            attribution_n: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    /// Start from this checkpoint instead of pretraining a base model.
    #[serde(default)]
    pub base_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub group: Option<ParamGroup>,
    #[serde(default)]
    pub curriculum: CurriculumConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub mitigation: MitigationConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            base_checkpoint: None,
            group: None,
            curriculum: CurriculumConfig::default(),
            train: TrainConfig::default(),
            mitigation: MitigationConfig::default(),
            probe: ProbeConfig::default(),
            seed: 0,
            output_dir: default_output_dir(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Parse `path`, then apply the seed environment override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_json(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v.trim().parse().with_context(|| format!("{SEED_ENV}={v} is not an unsigned integer"))?;
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn group(&self) -> Result<&ParamGroup> {
        match &self.group {
            Some(g) => Ok(g),
            None => bail!("no parameter group: set \"group\" in the config or pass --group"),
        }
    }

    pub fn stages(&self) -> Result<Vec<SyntheticTaskSpec>> {
        match &self.curriculum.stages {
            Some(s) => Ok(s.clone()),
            None => Ok(default_stages(self.curriculum.order, self.seed, self.curriculum.train_n, self.curriculum.eval_n)?),
        }
    }

    pub fn held_out(&self) -> Vec<SyntheticTaskSpec> {
        self.curriculum.held_out.clone().unwrap_or_else(|| default_held_out(self.seed, self.curriculum.eval_n))
    }

    /// Spell out every defaulted choice so the manifest alone reproduces the run.
    pub fn resolved(&self) -> Result<Self> {
        let mut out = self.clone();
        out.curriculum.stages = Some(self.stages()?);
        out.curriculum.held_out = Some(self.held_out());
        Ok(out)
    }

    pub fn sequence(&self) -> Result<SequenceConfig> {
        let seq = SequenceConfig {
            stages: self.stages()?,
            held_out: self.held_out(),
            group: self.group()?.clone(),
            mitigation: self.mitigation.clone(),
            train: self.train,
            seed: self.seed,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn numeric_tokens(&self) -> Result<NumericTokenSet> {
        match &self.probe.numeric_tokens {
            Some(ids) => Ok(NumericTokenSet::new(ids.iter().copied(), self.model.vocab)?),
            None => Ok(NumericTokenSet::digits()),
        }
    }

    /// The checkpoint grid, sorted and deduplicated.
    pub fn grid(&self) -> Result<Vec<usize>> {
        let mut grid = self.probe.checkpoint_grid.clone();
        grid.sort_unstable();
        grid.dedup();
        if grid.is_empty() || grid[0] == 0 {
            bail!("probe.checkpoint_grid needs positive step counts");
        }
        Ok(grid)
    }
}
