//! Run configuration: TOML file plus `HIERWM_` environment overrides.
//!
//! An override such as `HIERWM_TRAIN__STEPS=50` sets `train.steps`; the
//! double underscore separates nesting levels. Values are parsed as TOML
//! scalars and fall back to plain strings.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hierwm_core::{DistillConfig, LossWeights, ScheduleParams, TrainConfig, WorldParams};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const ENV_PREFIX: &str = "HIERWM_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub episodes: usize,
    pub length: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { episodes: 10, length: 145 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub frames: usize,
    pub sampler_steps: usize,
    pub workers: usize,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { frames: 145, sampler_steps: hierwm_core::schedule::DEFAULT_SAMPLER_STEPS, workers: 8, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct EvalConfig {
    pub extractor_seed: u64,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldParams,
    pub data: DataConfig,
    /// Shared by coarse and fine training; `losses` replaces `train.weights` on load.
    pub train: TrainConfig,
    pub schedule: ScheduleParams,
    pub losses: LossWeights,
    pub distill: DistillConfig,
    pub rollout: RolloutConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldParams::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            schedule: ScheduleParams::default(),
            losses: LossWeights::default(),
            distill: DistillConfig::default(),
            rollout: RolloutConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// Cross-module consistency checks.
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        self.losses.validate()?;
        self.schedule.build()?;
        if self.distill.m + 2 != self.train.k {
            bail!("distill.m + 2 = {} must equal train.K = {}", self.distill.m + 2, self.train.k);
        }
        if self.distill.k_c != self.train.k {
            bail!("distill.K_c = {} must equal train.K = {}", self.distill.k_c, self.train.k);
        }
        if self.distill.codec_patch != self.train.codec_patch {
            bail!("distill.codec_patch and train.codec_patch differ");
        }
        if self.rollout.workers == 0 || self.rollout.sampler_steps == 0 {
            bail!("rollout.workers and rollout.sampler_steps must be positive");
        }
        Ok(())
    }

    /// Defaults, then `path` if given, then overrides from `env`.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut root = Value::try_from(RunConfig::default()).context("serializing defaults")?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let file: Table = toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            merge(&mut root, Value::Table(file));
        }
        let mut overrides: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        overrides.sort();
        for (key, raw) in overrides {
            let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(str::to_owned).collect();
            set_path(&mut root, &path, parse_scalar(&raw)).with_context(|| format!("applying {key}"))?;
        }
        let mut cfg: RunConfig = root.try_into().context("invalid configuration")?;
        cfg.train.weights = cfg.losses;
        cfg.distill.codec_patch = cfg.train.codec_patch;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_env(path: Option<&Path>) -> Result<Self> {
        Self::load(path, std::env::vars())
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn parse_scalar(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}")).ok().and_then(|mut t| t.remove("v")).unwrap_or_else(|| Value::String(raw.to_owned()))
}

/// Keys match existing entries case-insensitively; new keys are lowercased.
fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let Some((last, parents)) = path.split_last() else { bail!("empty override path") };
    let mut cur = root;
    for seg in parents {
        let table = cur.as_table_mut().with_context(|| format!("{seg} is not inside a table"))?;
        let key = resolve_key(table, seg);
        cur = table.entry(key).or_insert_with(|| Value::Table(Table::new()));
    }
    let table = cur.as_table_mut().context("override target is not a table")?;
    let key = resolve_key(table, last);
    table.insert(key, value);
    Ok(())
}

fn resolve_key(table: &Table, seg: &str) -> String {
    table.keys().find(|k| k.eq_ignore_ascii_case(seg)).cloned().unwrap_or_else(|| seg.to_ascii_lowercase())
}
