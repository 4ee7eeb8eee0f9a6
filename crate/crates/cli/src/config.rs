//! Experiment configuration: a TOML file, overridden by command-line flags.
//!
//! ```toml
//! preset = "qwen72b-like"          # base workload and cluster shape
//! scale = 0.1
//! seed = 0
//! iterations = 1
//! policies = ["group-baseline", "divided-only", "context-aware", "full"]
//! trace = "trace.jsonl"            # optional: replay instead of generating
//! out = "results"
//! service_dgds = "127.0.0.1:7070"  # optional: external draft server
//!
//! [workload]                       # any workload field; replaces the preset value
//! pattern_similarity = 0.7
//! length_model = { group_correlation = 0.8 }
//!
//! [sim]                            # any simulator field
//! instances = 8
//! spec = { batch_token_budget = 256 }
//! kv = { instance_capacity_tokens = 200000 }
//! ```
//!
//! Every seed derives from the top-level `seed`: iteration `i` uses
//! `derive_seed(seed, i)` for both workload generation and the simulator.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rollsim_core::presets::{preset, DEFAULT_SCALE};
use rollsim_core::scheduler::{PolicySpec, SimParams};
use rollsim_core::util::derive_seed;
use rollsim_core::workload::WorkloadConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const DEFAULT_PRESET: &str = "qwen72b-like";
pub const DEFAULT_POLICIES: [&str; 4] = ["group-baseline", "divided-only", "context-aware", "full"];

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<String>,
    pub scale: Option<f64>,
    pub seed: Option<u64>,
    pub iterations: Option<u32>,
    pub policies: Option<Vec<String>>,
    pub trace: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub service_dgds: Option<String>,
    pub workload: Option<toml::Table>,
    pub sim: Option<toml::Table>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Values given on the command line; each one wins over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub scale: Option<f64>,
    pub seed: Option<u64>,
    pub iterations: Option<u32>,
    pub policies: Option<Vec<String>>,
    pub trace: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub service_dgds: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub preset: String,
    pub scale: f64,
    pub seed: u64,
    pub iterations: u32,
    pub policies: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    pub out: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub service_dgds: Option<String>,
    pub workload: WorkloadConfig,
    pub sim: SimParams,
}

impl ExperimentConfig {
    pub fn resolve(file: ConfigFile, flags: Overrides) -> Result<Self> {
        let name = flags.preset.or(file.preset).unwrap_or_else(|| DEFAULT_PRESET.to_string());
        let scale = flags.scale.or(file.scale).unwrap_or(DEFAULT_SCALE);
        let seed = flags.seed.or(file.seed).unwrap_or(0);
        if seed > i64::MAX as u64 {
            bail!("seed {seed} does not fit in a signed 64-bit integer");
        }
        let base = preset(&name, scale, 0)?;
        let workload = overlay(&base.workload, file.workload, "workload")?;
        let sim = overlay(&base.sim, file.sim, "sim")?;
        let policies = flags
            .policies
            .or(file.policies)
            .unwrap_or_else(|| DEFAULT_POLICIES.iter().map(|s| s.to_string()).collect());
        let cfg = ExperimentConfig {
            preset: name,
            scale,
            seed,
            iterations: flags.iterations.or(file.iterations).unwrap_or(1),
            policies,
            trace: flags.trace.or(file.trace),
            out: flags.out.or(file.out).unwrap_or_else(|| PathBuf::from("results")),
            service_dgds: flags.service_dgds.or(file.service_dgds),
            workload,
            sim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty() {
            bail!("at least one policy is required");
        }
        if self.iterations == 0 {
            bail!("iterations must be >= 1");
        }
        self.policy_specs()?;
        self.workload.validate().context("invalid workload settings")?;
        self.sim.validate().context("invalid simulator settings")?;
        Ok(())
    }

    pub fn policy_specs(&self) -> Result<Vec<PolicySpec>> {
        let specs = self.policies.iter().map(|p| PolicySpec::parse(p)).collect::<Result<Vec<_>, _>>()?;
        Ok(specs)
    }

    pub fn iteration_seed(&self, iteration: u32) -> u64 {
        derive_seed(self.seed, iteration as u64)
    }

    pub fn workload_for(&self, iteration: u32) -> WorkloadConfig {
        WorkloadConfig { seed: self.iteration_seed(iteration), ..self.workload.clone() }
    }

    pub fn sim_for(&self, iteration: u32) -> SimParams {
        SimParams { seed: self.iteration_seed(iteration), ..self.sim.clone() }
    }

    /// The effective configuration in file syntax.
    pub fn to_toml(&self) -> Result<String> {
        let mut c = self.clone();
        c.workload.seed = 0;
        c.sim.seed = 0;
        Ok(toml::to_string(&c)?)
    }
}

/// Apply a partial table onto `base`, rejecting keys `base` does not have.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, table: Option<toml::Table>, section: &str) -> Result<T> {
    let Some(table) = table else {
        return serde_clone(base);
    };
    let mut value = toml::Value::try_from(base)?;
    merge(&mut value, table, section)?;
    value.try_into().with_context(|| format!("invalid [{section}] section"))
}

fn serde_clone<T: Serialize + DeserializeOwned>(v: &T) -> Result<T> {
    Ok(toml::Value::try_from(v)?.try_into()?)
}

fn merge(base: &mut toml::Value, over: toml::Table, path: &str) -> Result<()> {
    let toml::Value::Table(base) = base else {
        bail!("[{path}] is not a table");
    };
    for (key, value) in over {
        let here = format!("{path}.{key}");
        match base.get_mut(&key) {
            None => bail!("unknown setting '{here}'"),
            Some(slot @ toml::Value::Table(_)) => match value {
                toml::Value::Table(t) => merge(slot, t, &here)?,
                _ => bail!("'{here}' must be a table"),
            },
            Some(slot) => *slot = value,
        }
    }
    Ok(())
}
