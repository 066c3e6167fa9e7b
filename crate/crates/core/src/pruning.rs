//! One-shot unstructured pruning of target modules.
//!
//! Scores are compared within each output row of a `[out × in]` weight and
//! the `floor(s · in)` lowest-scoring entries of every row are zeroed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::{SubAdapterConfig, SuperAdapter};
use crate::error::{Result, ShearsError};
use crate::linalg::DenseMatrix;
use crate::model::{Batch, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethod {
    /// `|W| · ‖X‖₂` per input channel.
    #[default]
    Wanda,
    /// `|W|`
    Magnitude,
}

/// `S[i][j] = |W[i][j]| · norms[j]`
pub fn wanda_scores(w: &DenseMatrix, norms: &[f32]) -> Result<DenseMatrix> {
    if norms.len() != w.cols() {
        return Err(ShearsError::ShapeMismatch {
            op: "wanda_scores",
            lhs: w.shape(),
            rhs: (1, norms.len()),
        });
    }
    if norms.iter().any(|n| !(*n >= 0.0)) {
        return Err(ShearsError::InvalidArgument(
            "activation norms must be non-negative".into(),
        ));
    }
    Ok(DenseMatrix::from_fn(w.rows(), w.cols(), |i, j| {
        w.get(i, j).abs() * norms[j]
    }))
}

/// Entries pruned per row: `floor(s · cols)`.
pub fn prune_count(s: f64, cols: usize) -> usize {
    (s * cols as f64).floor() as usize
}

fn check_sparsity(s: f64) -> Result<()> {
    if !(0.0..1.0).contains(&s) {
        return Err(ShearsError::InvalidArgument(format!(
            "sparsity {s} outside [0, 1)"
        )));
    }
    Ok(())
}

/// Zeroes the `floor(s · cols)` lowest-scoring entries of every row.
///
/// Equal scores prune the larger column index first. Survivors keep their
/// exact bits; pruned entries become `+0.0`.
pub fn prune_rows(w: &DenseMatrix, scores: &DenseMatrix, s: f64) -> Result<DenseMatrix> {
    check_sparsity(s)?;
    w.check_same_shape("prune_rows", scores)?;
    let n_prune = prune_count(s, w.cols());
    let mut out = w.clone();
    if n_prune == 0 {
        return Ok(out);
    }
    let mut order: Vec<usize> = (0..w.cols()).collect();
    for i in 0..w.rows() {
        let row_scores = scores.row(i);
        order.sort_unstable_by(|&a, &b| {
            row_scores[a]
                .total_cmp(&row_scores[b])
                .then_with(|| b.cmp(&a))
        });
        let row = out.row_mut(i);
        for &j in &order[..n_prune] {
            row[j] = 0.0;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulePruneStats {
    pub name: String,
    pub shape: (usize, usize),
    pub total: usize,
    pub nonzero: usize,
    pub sparsity: f64,
    pub min_row_zeros: usize,
    pub max_row_zeros: usize,
}

/// Sparsity of the adapted model while adapters stay unmerged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSparsity {
    pub config: SubAdapterConfig,
    pub adapter_params: usize,
    pub adapter_nonzero: usize,
    /// Zeros over target modules plus active adapter slices.
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub method: Option<PruneMethod>,
    pub requested_sparsity: Option<f64>,
    pub modules: Vec<ModulePruneStats>,
    pub target_total: usize,
    pub target_nonzero: usize,
    /// Zero fraction over the target modules.
    pub global_sparsity: f64,
    pub with_adapters: Option<AdapterSparsity>,
}

impl PruneReport {
    /// Builds the report by scanning the current tensors.
    pub fn scan(
        model: &Model,
        targets: &[String],
        method: Option<PruneMethod>,
        requested_sparsity: Option<f64>,
    ) -> Result<Self> {
        let mut modules = Vec::with_capacity(targets.len());
        let (mut total, mut nonzero) = (0usize, 0usize);
        for name in targets {
            let w = model.weight(name)?;
            let zeros_per_row: Vec<usize> = (0..w.rows())
                .map(|i| w.row(i).iter().filter(|v| **v == 0.0).count())
                .collect();
            let nz = w.count_nonzero();
            modules.push(ModulePruneStats {
                name: name.clone(),
                shape: w.shape(),
                total: w.len(),
                nonzero: nz,
                sparsity: (w.len() - nz) as f64 / w.len() as f64,
                min_row_zeros: zeros_per_row.iter().copied().min().unwrap_or(0),
                max_row_zeros: zeros_per_row.iter().copied().max().unwrap_or(0),
            });
            total += w.len();
            nonzero += nz;
        }
        Ok(Self {
            method,
            requested_sparsity,
            modules,
            target_total: total,
            target_nonzero: nonzero,
            global_sparsity: if total == 0 {
                0.0
            } else {
                (total - nonzero) as f64 / total as f64
            },
            with_adapters: None,
        })
    }

    /// Adds the unmerged-adapter view, scanning the active adapter slices.
    pub fn attach_adapter(&mut self, adapter: &SuperAdapter, config: &SubAdapterConfig) -> Result<()> {
        adapter.validate(config)?;
        let (mut params, mut nonzero) = (0usize, 0usize);
        for m in &adapter.modules {
            let r = config.get(&m.name).unwrap();
            let (b, a) = (m.b_slice(r), m.a_slice(r));
            params += b.len() + a.len();
            nonzero += b.count_nonzero() + a.count_nonzero();
        }
        let total = self.target_total + params;
        let nz = self.target_nonzero + nonzero;
        self.with_adapters = Some(AdapterSparsity {
            config: config.clone(),
            adapter_params: params,
            adapter_nonzero: nonzero,
            sparsity: (total - nz) as f64 / total as f64,
        });
        Ok(())
    }

    pub fn module(&self, name: &str) -> Option<&ModulePruneStats> {
        self.modules.iter().find(|m| m.name == name)
    }
}

/// Prunes `targets` using precomputed per-module activation norms.
///
/// `Magnitude` ignores `norms` and scores with `|W|` alone.
pub fn prune_with_norms(
    model: &Model,
    norms: &BTreeMap<String, Vec<f32>>,
    targets: &[String],
    s: f64,
    method: PruneMethod,
) -> Result<(Model, PruneReport)> {
    check_sparsity(s)?;
    if targets.is_empty() {
        return Err(ShearsError::InvalidArgument("no pruning targets".into()));
    }
    let mut pruned = model.clone();
    for name in targets {
        let w = model.weight(name)?;
        let scores = match method {
            PruneMethod::Wanda => {
                let n = norms.get(name).ok_or_else(|| {
                    ShearsError::InvalidArgument(format!("no activation norms for `{name}`"))
                })?;
                wanda_scores(w, n)?
            }
            PruneMethod::Magnitude => wanda_scores(w, &vec![1.0; w.cols()])?,
        };
        *pruned.weight_mut(name)? = prune_rows(w, &scores, s)?;
    }
    pruned.set_sparsity_level(Some(s));
    pruned.freeze();
    let report = PruneReport::scan(&pruned, targets, Some(method), Some(s))?;
    Ok((pruned, report))
}

/// Calibrates (for Wanda), prunes every target and freezes the result.
pub fn sparsify_model(
    model: &Model,
    calib: &[Batch],
    targets: &[String],
    s: f64,
    method: PruneMethod,
) -> Result<(Model, PruneReport)> {
    check_sparsity(s)?;
    if targets.is_empty() {
        return Err(ShearsError::InvalidArgument("no pruning targets".into()));
    }
    for t in targets {
        model.module_index(t)?;
    }
    let norms = match method {
        PruneMethod::Wanda => {
            if calib.is_empty() {
                return Err(ShearsError::EmptyInput("Wanda needs calibration batches"));
            }
            model.capture_activations(calib, targets)?
        }
        PruneMethod::Magnitude => BTreeMap::new(),
    };
    prune_with_norms(model, &norms, targets, s, method)
}

/// Positions zeroed in `pruned` that were non-zero in `original`.
pub fn pruned_support(original: &DenseMatrix, pruned: &DenseMatrix) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..original.rows() {
        for j in 0..original.cols() {
            if pruned.get(i, j) == 0.0 && original.get(i, j) != 0.0 {
                out.push((i, j));
            }
        }
    }
    out
}

/// Brute-force reference: rank every entry of a row by (score, -col) with a
/// full sort and keep the tail.
#[cfg(test)]
pub(crate) fn prune_rows_oracle(w: &DenseMatrix, scores: &DenseMatrix, s: f64) -> DenseMatrix {
    let n_prune = (s * w.cols() as f64).floor() as usize;
    let mut out = w.clone();
    for i in 0..w.rows() {
        let mut entries: Vec<(f32, usize)> = (0..w.cols()).map(|j| (scores.get(i, j), j)).collect();
        use std::cmp::Ordering;
        entries.sort_by(|a, b| match a.0.partial_cmp(&b.0).unwrap() {
            Ordering::Equal => b.1.cmp(&a.1),
            o => o,
        });
        for &(_, j) in entries.iter().take(n_prune) {
            out.set(i, j, 0.0);
        }
    }
    out
}
