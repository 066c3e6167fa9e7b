//! Pipeline configuration: one TOML file, every field defaulted, dotted-path
//! overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shears::data::TaskSpec;
use shears::model::{LinearKind, ModelConfig};
use shears::nls::TrainConfig;
use shears::search::Objectives;
use shears::PruneMethod;

use crate::error::{CliError, CliResult};

pub const DEFAULT_WORKDIR: &str = "shears-work";
pub const WORKDIR_ENV: &str = "SHEARS_WORKDIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub method: PruneMethod,
    pub sparsity: f64,
    /// Bare kinds (`"q"`) expand over every block; full names (`"b0.q"`) pick one.
    pub targets: Vec<String>,
    pub calib_size: usize,
    pub calib_seed: u64,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self {
            method: PruneMethod::Wanda,
            sparsity: 0.5,
            targets: LinearKind::ALL.iter().map(|k| k.suffix().to_string()).collect(),
            calib_size: 32,
            calib_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSection {
    pub targets: Vec<String>,
    pub rank_choices: Vec<usize>,
    pub alpha: f32,
    pub seed: u64,
}

impl Default for AdapterSection {
    fn default() -> Self {
        Self {
            targets: ["q", "k", "v", "up", "down"].map(String::from).to_vec(),
            rank_choices: vec![32, 24, 16],
            alpha: 64.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Heuristic,
    Hillclimb,
    Evolutionary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub strategy: Strategy,
    /// Evaluator invocations allowed to hill climbing.
    pub budget: usize,
    pub pop_size: usize,
    pub generations: usize,
    /// Absent: crowding distance. Present: reference-point survival, with an
    /// empty list meaning one automatic point.
    pub reference_points: Option<Vec<Objectives>>,
    pub seed: u64,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            strategy: Strategy::Hillclimb,
            budget: 32,
            pop_size: 8,
            generations: 4,
            reference_points: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub batch_size: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            batch_size: 32,
            repetitions: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub workdir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub prune: PruneSection,
    pub adapter: AdapterSection,
    pub train: TrainConfig,
    pub search: SearchSection,
    pub bench: BenchSection,
    pub paths: PathsSection,
}

/// Expands bare kinds over blocks and checks every name exists.
pub fn expand_targets(model: &ModelConfig, field: &str, targets: &[String]) -> CliResult<Vec<String>> {
    let all = model.module_names();
    let mut out: Vec<String> = Vec::new();
    for t in targets {
        let names: Vec<String> = if LinearKind::from_suffix(t).is_some() {
            (0..model.n_blocks).map(|b| format!("b{b}.{t}")).collect()
        } else if all.contains(t) {
            vec![t.clone()]
        } else {
            return Err(CliError::config(format!(
                "{field}: unknown module `{t}` (kinds q,k,v,o,gate,up,down or names like b0.q)"
            )));
        };
        for n in names {
            if !out.contains(&n) {
                out.push(n);
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::config(format!("{field}: no target modules")));
    }
    // block-major like the model's own order
    out.sort_by_key(|n| all.iter().position(|a| a == n));
    Ok(out)
}

impl PipelineConfig {
    /// Parses TOML text, applies `key=value` overrides, then validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> CliResult<Self> {
        let mut value: toml::Value = toml::from_str(text)
            .map_err(|e| CliError::config(format!("config parse error: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: PipelineConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(format!("config error: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    /// Sets every seed in the file to `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.task.seed = seed;
        self.prune.calib_seed = seed;
        self.adapter.seed = seed;
        self.train.seed = seed;
        self.search.seed = seed;
        self.bench.seed = seed;
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.train.validate()?;
        if self.task.vocab_size != self.model.vocab_size
            || self.task.n_classes != self.model.n_classes
            || self.task.seq_len != self.model.seq_len
        {
            return Err(CliError::config(
                "task.vocab_size, task.n_classes and task.seq_len must match the model section",
            ));
        }
        if !(0.0..1.0).contains(&self.prune.sparsity) {
            return Err(CliError::config(format!(
                "prune.sparsity must be in [0, 1), got {}",
                self.prune.sparsity
            )));
        }
        if self.prune.calib_size == 0 {
            return Err(CliError::config("prune.calib_size must be >= 1"));
        }
        self.prune_targets()?;
        self.adapter_targets()?;
        shears::adapters::validate_rank_choices(&self.adapter.rank_choices)
            .map_err(|e| CliError::config(format!("adapter.rank_choices: {e}")))?;
        if !(self.adapter.alpha > 0.0) {
            return Err(CliError::config("adapter.alpha must be > 0"));
        }
        if let shears::nls::TrainMode::FixedLora { rank } = self.train.mode {
            if !self.adapter.rank_choices.contains(&rank) {
                return Err(CliError::config(format!(
                    "train.mode.rank {rank} is not in adapter.rank_choices"
                )));
            }
        }
        if self.search.budget == 0 {
            return Err(CliError::config("search.budget must be >= 1"));
        }
        if self.search.pop_size < 4 || self.search.pop_size % 2 != 0 {
            return Err(CliError::config("search.pop_size must be even and >= 4"));
        }
        if self.search.generations == 0 {
            return Err(CliError::config("search.generations must be >= 1"));
        }
        if self.bench.repetitions < 3 || self.bench.batch_size == 0 {
            return Err(CliError::config(
                "bench.repetitions must be >= 3 and bench.batch_size >= 1",
            ));
        }
        Ok(())
    }

    pub fn prune_targets(&self) -> CliResult<Vec<String>> {
        expand_targets(&self.model, "prune.targets", &self.prune.targets)
    }

    pub fn adapter_targets(&self) -> CliResult<Vec<String>> {
        expand_targets(&self.model, "adapter.targets", &self.adapter.targets)
    }

    /// Workdir from the file, else `SHEARS_WORKDIR`, else the default.
    pub fn workdir(&self) -> PathBuf {
        self.paths
            .workdir
            .clone()
            .or_else(|| std::env::var_os(WORKDIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_WORKDIR))
    }
}

/// Parses the right-hand side as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `a.b.c=value` override. Intermediate tables are created as
/// needed; typos surface as unknown fields during deserialization.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("--set expects key=value, got `{spec}`")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("--set: bad key `{key}`")));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("--set: `{key}` crosses a non-table value")))?;
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| CliError::config(format!("--set: `{key}` crosses a non-table value")))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}
