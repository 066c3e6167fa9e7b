//! Elastic LoRA super-adapters.
//!
//! Every adapted module owns one `(B, A)` pair stored at the maximal rank.
//! A sub-adapter of rank `r` uses the leading `r` columns of `B` and the
//! leading `r` rows of `A`, so smaller ranks share weights with larger ones.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ShearsError};
use crate::linalg::{matmul, DenseMatrix, Rng};
use crate::model::Model;
use crate::pruning::PruneReport;

pub const DEFAULT_RANK_CHOICES: [usize; 3] = [32, 24, 16];
pub const DEFAULT_ALPHA: f32 = 64.0;
pub const A_INIT_STD: f32 = 0.02;

/// How the low-rank product is scaled for an activated rank `r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// `alpha / r_active`
    #[default]
    ActiveRank,
    /// `alpha / r_max`
    MaxRank,
    /// no scaling
    Unscaled,
}

/// An active-rank assignment for every adapted module.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubAdapterConfig(BTreeMap<String, usize>);

impl SubAdapterConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, module: impl Into<String>, rank: usize) {
        self.0.insert(module.into(), rank);
    }

    pub fn get(&self, module: &str) -> Option<usize> {
        self.0.get(module).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Stable textual key, e.g. `b0.k=24,b0.q=32`.
    pub fn fingerprint(&self) -> String {
        self.0
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Inverse of [`fingerprint`](Self::fingerprint).
    pub fn parse(s: &str) -> Result<Self> {
        let mut out = Self::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, rank) = part.split_once('=').ok_or_else(|| {
                ShearsError::InvalidConfig(format!("`{part}` is not `module=rank`"))
            })?;
            let rank = rank.trim().parse().map_err(|_| {
                ShearsError::InvalidConfig(format!("`{rank}` is not a rank"))
            })?;
            out.insert(name.trim(), rank);
        }
        Ok(out)
    }
}

impl FromIterator<(String, usize)> for SubAdapterConfig {
    fn from_iter<T: IntoIterator<Item = (String, usize)>>(iter: T) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// The `(B, A)` pair for one target module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleAdapter {
    pub name: String,
    /// `[r_max × in]`
    pub a: DenseMatrix,
    /// `[out × r_max]`
    pub b: DenseMatrix,
    pub rank_choices: Vec<usize>,
}

impl ModuleAdapter {
    /// Wraps explicit matrices. `rank_choices` must be strictly descending
    /// with its head equal to the stored rank.
    pub fn from_parts(
        name: impl Into<String>,
        b: DenseMatrix,
        a: DenseMatrix,
        rank_choices: Vec<usize>,
    ) -> Result<Self> {
        validate_rank_choices(&rank_choices)?;
        if a.rows() != rank_choices[0] || b.cols() != rank_choices[0] {
            return Err(ShearsError::InvalidArgument(format!(
                "adapter matrices have rank {}/{}, choices start at {}",
                b.cols(),
                a.rows(),
                rank_choices[0]
            )));
        }
        Ok(Self {
            name: name.into(),
            a,
            b,
            rank_choices,
        })
    }

    pub fn max_rank(&self) -> usize {
        self.rank_choices[0]
    }

    pub fn in_features(&self) -> usize {
        self.a.cols()
    }

    pub fn out_features(&self) -> usize {
        self.b.rows()
    }

    pub fn check_rank(&self, rank: usize) -> Result<()> {
        if self.rank_choices.contains(&rank) {
            Ok(())
        } else {
            Err(ShearsError::InvalidRank {
                module: self.name.clone(),
                rank,
                choices: self.rank_choices.clone(),
            })
        }
    }

    /// `B[:, ..r]`
    pub fn b_slice(&self, r: usize) -> DenseMatrix {
        self.b.slice_cols(r)
    }

    /// `A[..r, :]`
    pub fn a_slice(&self, r: usize) -> DenseMatrix {
        self.a.slice_rows(r)
    }
}

/// Per-module elastic LoRA pairs sharing one `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperAdapter {
    pub modules: Vec<ModuleAdapter>,
    pub alpha: f32,
    #[serde(default)]
    pub scaling: Scaling,
    #[serde(default)]
    pub trained: bool,
}

pub fn validate_rank_choices(choices: &[usize]) -> Result<()> {
    if choices.is_empty() {
        return Err(ShearsError::InvalidArgument("rank_choices is empty".into()));
    }
    if choices.contains(&0) {
        return Err(ShearsError::InvalidArgument("ranks must be >= 1".into()));
    }
    if choices.windows(2).any(|w| w[0] <= w[1]) {
        return Err(ShearsError::InvalidArgument(format!(
            "rank_choices {choices:?} must be strictly descending"
        )));
    }
    Ok(())
}

/// Attaches a fresh super-adapter: `A ~ N(0, 0.02²)`, `B = 0`.
pub fn attach(
    model: &Model,
    targets: &[String],
    rank_choices: &[usize],
    alpha: f32,
    rng: &mut Rng,
) -> Result<SuperAdapter> {
    validate_rank_choices(rank_choices)?;
    if targets.is_empty() {
        return Err(ShearsError::InvalidArgument("no adapter targets".into()));
    }
    let r_max = rank_choices[0];
    let mut modules = Vec::with_capacity(targets.len());
    for name in targets {
        let w = model.weight(name)?;
        let (out, inp) = w.shape();
        let a = DenseMatrix::from_fn(r_max, inp, |_, _| rng.normal(A_INIT_STD));
        modules.push(ModuleAdapter {
            name: name.clone(),
            a,
            b: DenseMatrix::zeros(out, r_max),
            rank_choices: rank_choices.to_vec(),
        });
    }
    Ok(SuperAdapter {
        modules,
        alpha,
        scaling: Scaling::default(),
        trained: false,
    })
}

impl SuperAdapter {
    pub fn module(&self, name: &str) -> Result<&ModuleAdapter> {
        self.modules
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| ShearsError::UnknownModule(name.to_string()))
    }

    pub fn module_mut(&mut self, name: &str) -> Result<&mut ModuleAdapter> {
        self.modules
            .iter_mut()
            .find(|m| m.name == name)
            .ok_or_else(|| ShearsError::UnknownModule(name.to_string()))
    }

    pub fn module_names(&self) -> Vec<String> {
        self.modules.iter().map(|m| m.name.clone()).collect()
    }

    /// Multiplier applied to `B·A` when `module` runs at `rank`.
    pub fn scale_for(&self, module: &ModuleAdapter, rank: usize) -> f32 {
        match self.scaling {
            Scaling::ActiveRank => self.alpha / rank as f32,
            Scaling::MaxRank => self.alpha / module.max_rank() as f32,
            Scaling::Unscaled => 1.0,
        }
    }

    /// Checks that `config` names exactly this adapter's modules with valid ranks.
    pub fn validate(&self, config: &SubAdapterConfig) -> Result<()> {
        for (name, rank) in config.iter() {
            self.module(name)?.check_rank(rank)?;
        }
        if config.len() != self.modules.len() {
            let missing: Vec<_> = self
                .modules
                .iter()
                .filter(|m| config.get(&m.name).is_none())
                .map(|m| m.name.as_str())
                .collect();
            return Err(ShearsError::InvalidConfig(format!(
                "no rank given for modules {missing:?}"
            )));
        }
        Ok(())
    }

    /// Dense update `scale · B[:, ..r] · A[..r, :]`, shaped like the base weight.
    pub fn delta(&self, module: &str, rank: usize) -> Result<DenseMatrix> {
        let m = self.module(module)?;
        m.check_rank(rank)?;
        let ba = matmul(&m.b_slice(rank), &m.a_slice(rank))?;
        Ok(ba.scale(self.scale_for(m, rank)))
    }

    pub fn maximal_config(&self) -> SubAdapterConfig {
        self.modules
            .iter()
            .map(|m| (m.name.clone(), m.rank_choices[0]))
            .collect()
    }

    pub fn minimal_config(&self) -> SubAdapterConfig {
        self.modules
            .iter()
            .map(|m| (m.name.clone(), *m.rank_choices.last().unwrap()))
            .collect()
    }

    /// Same rank for every module.
    pub fn uniform_config(&self, rank: usize) -> Result<SubAdapterConfig> {
        self.modules
            .iter()
            .map(|m| m.check_rank(rank).map(|_| (m.name.clone(), rank)))
            .collect()
    }
}

/// Folds `delta` into the base weights. The input model is untouched; the
/// returned copy loses the frozen mark because its weights changed.
pub fn merge(
    model: &Model,
    adapter: &SuperAdapter,
    config: &SubAdapterConfig,
) -> Result<(Model, PruneReport)> {
    adapter.validate(config)?;
    let mut merged = model.clone();
    for (name, rank) in config.iter() {
        let delta = adapter.delta(name, rank)?;
        merged.weight_mut(name)?.add_assign(&delta)?;
    }
    merged.clear_frozen();
    let targets = merged.module_names();
    let report = PruneReport::scan(&merged, &targets, None, model.sparsity_level())?;
    Ok((merged, report))
}
