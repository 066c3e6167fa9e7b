//! Non-zero parameter accounting and dense-vs-CSR inference timing.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::{merge, SubAdapterConfig, SuperAdapter};
use crate::error::{Result, ShearsError};
use crate::model::{Batch, BaseKernel, Model};

/// Parameter counts, every one taken by scanning tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub base_total: usize,
    pub base_nonzero: usize,
    pub base_sparsity: f64,
    pub target_total: usize,
    pub target_nonzero: usize,
    pub target_sparsity: f64,
    /// Entries of the active adapter slices; zero without an adapter.
    pub adapter_active_params: usize,
    pub adapter_nonzero: usize,
    /// Parameters the deployed model carries: base plus unmerged adapter
    /// slices, or the merged base alone.
    pub global_total: usize,
    pub global_nonzero: usize,
    pub global_sparsity: f64,
    pub merged: bool,
}

fn fraction_zero(total: usize, nonzero: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        (total - nonzero) as f64 / total as f64
    }
}

fn scan(model: &Model) -> (usize, usize, usize, usize) {
    let (mut total, mut nonzero) = (0, 0);
    for (_, t) in model.named_tensors() {
        total += t.len();
        nonzero += t.count_nonzero();
    }
    let (mut tt, mut tn) = (0, 0);
    for w in model.linears() {
        tt += w.len();
        tn += w.count_nonzero();
    }
    (total, nonzero, tt, tn)
}

/// Counts parameters of `model`, optionally with an adapter at `config`.
///
/// With `merged`, the adapter is folded into the base first and the global
/// figures come from the merged weights.
pub fn count_params(
    model: &Model,
    adapter: Option<&SuperAdapter>,
    config: Option<&SubAdapterConfig>,
    merged: bool,
) -> Result<ParamReport> {
    let (adapter, config) = match (adapter, config) {
        (Some(a), Some(c)) => {
            a.validate(c)?;
            (Some(a), Some(c))
        }
        (None, None) if !merged => (None, None),
        (None, None) => {
            return Err(ShearsError::InvalidArgument(
                "merged counts need an adapter and a config".into(),
            ))
        }
        _ => {
            return Err(ShearsError::InvalidArgument(
                "adapter and config must be given together".into(),
            ))
        }
    };
    let (base_total, base_nonzero, target_total, target_nonzero) = scan(model);
    let (mut adapter_params, mut adapter_nonzero) = (0, 0);
    if let (Some(a), Some(c)) = (adapter, config) {
        for m in &a.modules {
            let r = c.get(&m.name).expect("validated");
            let (b, a) = (m.b_slice(r), m.a_slice(r));
            adapter_params += b.len() + a.len();
            adapter_nonzero += b.count_nonzero() + a.count_nonzero();
        }
    }
    let (global_total, global_nonzero) = match (merged, adapter, config) {
        (true, Some(a), Some(c)) => {
            let (m, _) = merge(model, a, c)?;
            let (t, n, _, _) = scan(&m);
            (t, n)
        }
        _ => (base_total + adapter_params, base_nonzero + adapter_nonzero),
    };
    Ok(ParamReport {
        base_total,
        base_nonzero,
        base_sparsity: fraction_zero(base_total, base_nonzero),
        target_total,
        target_nonzero,
        target_sparsity: fraction_zero(target_total, target_nonzero),
        adapter_active_params: adapter_params,
        adapter_nonzero,
        global_total,
        global_nonzero,
        global_sparsity: fraction_zero(global_total, global_nonzero),
        merged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub batch_size: usize,
    pub repetitions: usize,
    pub target_sparsity: f64,
    /// Median seconds per forward.
    pub dense_median_s: f64,
    pub csr_median_s: f64,
    pub dense_samples_s: Vec<f64>,
    pub csr_samples_s: Vec<f64>,
    /// `dense / csr`; above 1 means the sparse path is faster.
    pub speedup: f64,
    pub max_abs_diff: f32,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times the dense and CSR base kernels on the same weights, adapters
/// unmerged. Runs alternate between paths after one warm-up each.
pub fn bench_inference(
    model: &Model,
    adapter: Option<&SuperAdapter>,
    config: Option<&SubAdapterConfig>,
    batch: &Batch,
    repetitions: usize,
) -> Result<BenchReport> {
    if repetitions < 3 {
        return Err(ShearsError::InvalidArgument(format!(
            "repetitions must be >= 3, got {repetitions}"
        )));
    }
    let csr = model.csr_weights();
    let dense_out = model.forward_with_kernel(batch, adapter, config, BaseKernel::Dense)?;
    let csr_out = model.forward_with_kernel(batch, adapter, config, BaseKernel::Csr(&csr))?;
    let max_abs_diff = dense_out
        .as_slice()
        .iter()
        .zip(csr_out.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);

    let mut dense_samples = Vec::with_capacity(repetitions);
    let mut csr_samples = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        std::hint::black_box(model.forward_with_kernel(batch, adapter, config, BaseKernel::Dense)?);
        dense_samples.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        std::hint::black_box(model.forward_with_kernel(
            batch,
            adapter,
            config,
            BaseKernel::Csr(&csr),
        )?);
        csr_samples.push(t.elapsed().as_secs_f64());
    }
    let (_, _, tt, tn) = scan(model);
    let dense_median_s = median(&dense_samples);
    let csr_median_s = median(&csr_samples);
    Ok(BenchReport {
        batch_size: batch.len(),
        repetitions,
        target_sparsity: fraction_zero(tt, tn),
        dense_median_s,
        csr_median_s,
        dense_samples_s: dense_samples,
        csr_samples_s: csr_samples,
        speedup: dense_median_s / csr_median_s,
        max_abs_diff,
    })
}
