//! Toy transformer classifier with named linear target modules.
//!
//! ```text
//! tokens → embed + position
//!        → n_blocks × [ x  = rms(h),  h1 = h + O(softmax(Q Kᵀ/√d) V)   (Q, K, V of x)
//!                       x1 = rms(h1), h  = h1 + Down(silu(Gate x1) ⊙ Up x1) ]
//!        → mean over positions → head → logits
//! ```
//!
//! Linear weights are stored `[out × in]`, so a module computes `x · Wᵀ`
//! and its adapter adds `scale · (x · Aᵣᵀ) · Bᵣᵀ`. Gradients are derived by
//! hand and cover adapter parameters only. `rms` divides each row by its
//! root mean square and has no learned gain.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{SubAdapterConfig, SuperAdapter};
use crate::error::{Result, ShearsError};
use crate::linalg::{
    column_sum_squares, dense_matmul_csr_t, dot_f64, matmul, matmul_a_bt, matmul_at_b, CsrMatrix,
    DenseMatrix, Rng,
};

pub const INIT_STD: f32 = 0.02;

/// The seven linear projections of a block, in module-name order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinearKind {
    Q,
    K,
    V,
    O,
    Up,
    Gate,
    Down,
}

impl LinearKind {
    pub const ALL: [LinearKind; 7] = [
        LinearKind::Q,
        LinearKind::K,
        LinearKind::V,
        LinearKind::O,
        LinearKind::Up,
        LinearKind::Gate,
        LinearKind::Down,
    ];

    pub fn suffix(self) -> &'static str {
        match self {
            LinearKind::Q => "q",
            LinearKind::K => "k",
            LinearKind::V => "v",
            LinearKind::O => "o",
            LinearKind::Up => "up",
            LinearKind::Gate => "gate",
            LinearKind::Down => "down",
        }
    }

    pub fn from_suffix(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.suffix() == s)
    }

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub n_classes: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 17,
            d_model: 32,
            n_blocks: 2,
            d_ff: 128,
            n_classes: 4,
            seq_len: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// vocab 11, d_model 8, one block.
    pub fn tiny(seed: u64) -> Self {
        Self {
            vocab_size: 11,
            d_model: 8,
            n_blocks: 1,
            d_ff: 32,
            n_classes: 3,
            seq_len: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_blocks", self.n_blocks),
            ("d_ff", self.d_ff),
            ("n_classes", self.n_classes),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(ShearsError::InvalidArgument(format!(
                    "model.{name} must be >= 1"
                )));
            }
        }
        Ok(())
    }

    /// Names of every target module, block-major.
    pub fn module_names(&self) -> Vec<String> {
        (0..self.n_blocks)
            .flat_map(|b| LinearKind::ALL.map(|k| format!("b{b}.{}", k.suffix())))
            .collect()
    }

    fn linear_shape(&self, kind: LinearKind) -> (usize, usize) {
        let (d, f) = (self.d_model, self.d_ff);
        match kind {
            LinearKind::Up | LinearKind::Gate => (f, d),
            LinearKind::Down => (d, f),
            _ => (d, d),
        }
    }
}

/// Token ids `[batch × seq_len]` with one label per sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub labels: Vec<u32>,
    pub seq_len: usize,
}

impl Batch {
    pub fn new(tokens: Vec<u32>, labels: Vec<u32>, seq_len: usize) -> Result<Self> {
        if seq_len == 0 || tokens.len() != labels.len() * seq_len {
            return Err(ShearsError::InvalidArgument(format!(
                "batch of {} labels needs {} tokens, got {}",
                labels.len(),
                labels.len() * seq_len,
                tokens.len()
            )));
        }
        Ok(Self {
            tokens,
            labels,
            seq_len,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.is_empty() {
            return Err(ShearsError::EmptyInput("batch has no sequences"));
        }
        if self.seq_len != cfg.seq_len {
            return Err(ShearsError::InvalidArgument(format!(
                "batch seq_len {} != model seq_len {}",
                self.seq_len, cfg.seq_len
            )));
        }
        if let Some(t) = self.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(ShearsError::InvalidArgument(format!(
                "token {t} out of vocabulary ({})",
                cfg.vocab_size
            )));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l as usize >= cfg.n_classes) {
            return Err(ShearsError::InvalidArgument(format!(
                "label {l} out of range ({} classes)",
                cfg.n_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    /// `[vocab × d_model]`
    pub embedding: DenseMatrix,
    /// `[seq_len × d_model]`
    pub positions: DenseMatrix,
    /// Target modules, block-major in [`LinearKind::ALL`] order, each `[out × in]`.
    linears: Vec<DenseMatrix>,
    /// `[d_model × n_classes]`
    pub head: DenseMatrix,
    frozen_hash: Option<String>,
    sparsity: Option<f64>,
}

/// Which kernel computes the base product of every target module.
#[derive(Debug, Clone, Copy)]
pub enum BaseKernel<'a> {
    Dense,
    /// One CSR matrix per target module, indexed like [`Model::module_names`].
    Csr(&'a [CsrMatrix]),
}

struct AdapterSlot {
    a: DenseMatrix,
    b: DenseMatrix,
    scale: f32,
}

struct LinearOut {
    y: DenseMatrix,
    /// `x · Aᵣᵀ`, kept for the backward pass.
    z: Option<DenseMatrix>,
}

struct BlockCache {
    /// Normalized block input.
    x: DenseMatrix,
    x_inv_rms: Vec<f64>,
    q: LinearOut,
    k: LinearOut,
    v: LinearOut,
    probs: Vec<DenseMatrix>,
    ctx: DenseMatrix,
    o: LinearOut,
    /// Normalized `h1`.
    h1: DenseMatrix,
    h1_inv_rms: Vec<f64>,
    gate: LinearOut,
    up: LinearOut,
    act: DenseMatrix,
    down: LinearOut,
}

struct ForwardTrace {
    blocks: Vec<BlockCache>,
    logits: DenseMatrix,
}

/// Gradient of the loss w.r.t. the active slice of one module adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleGradient {
    pub name: String,
    pub rank: usize,
    /// `[out × rank]`
    pub b: DenseMatrix,
    /// `[rank × in]`
    pub a: DenseMatrix,
}

#[derive(Debug, Clone)]
pub struct AdapterGradients {
    pub loss: f32,
    pub logits: DenseMatrix,
    pub modules: Vec<ModuleGradient>,
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

impl Model {
    /// Every weight drawn from `N(0, 0.02²)`.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let mut gauss = |r: usize, c: usize| DenseMatrix::from_fn(r, c, |_, _| rng.normal(INIT_STD));
        let embedding = gauss(cfg.vocab_size, cfg.d_model);
        let positions = gauss(cfg.seq_len, cfg.d_model);
        let mut linears = Vec::with_capacity(cfg.n_blocks * 7);
        for _ in 0..cfg.n_blocks {
            for kind in LinearKind::ALL {
                let (o, i) = cfg.linear_shape(kind);
                linears.push(gauss(o, i));
            }
        }
        let head = gauss(cfg.d_model, cfg.n_classes);
        Self {
            config: cfg.clone(),
            embedding,
            positions,
            linears,
            head,
            frozen_hash: None,
            sparsity: None,
        }
    }

    /// Seeds from `cfg.seed`.
    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::init(cfg, &mut Rng::new(cfg.seed)))
    }

    /// Reassembles a model from stored tensors, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        embedding: DenseMatrix,
        positions: DenseMatrix,
        linears: Vec<DenseMatrix>,
        head: DenseMatrix,
    ) -> Result<Self> {
        config.validate()?;
        let expect = |what: &str, m: &DenseMatrix, shape: (usize, usize)| {
            if m.shape() == shape {
                Ok(())
            } else {
                Err(ShearsError::InvalidArgument(format!(
                    "{what} has shape {:?}, expected {shape:?}",
                    m.shape()
                )))
            }
        };
        expect("embedding", &embedding, (config.vocab_size, config.d_model))?;
        expect("positions", &positions, (config.seq_len, config.d_model))?;
        expect("head", &head, (config.d_model, config.n_classes))?;
        if linears.len() != config.n_blocks * 7 {
            return Err(ShearsError::InvalidArgument(format!(
                "expected {} target modules, got {}",
                config.n_blocks * 7,
                linears.len()
            )));
        }
        for (i, (w, name)) in linears.iter().zip(config.module_names()).enumerate() {
            expect(&name, w, config.linear_shape(LinearKind::ALL[i % 7]))?;
        }
        Ok(Self {
            config,
            embedding,
            positions,
            linears,
            head,
            frozen_hash: None,
            sparsity: None,
        })
    }

    pub fn module_names(&self) -> Vec<String> {
        self.config.module_names()
    }

    pub fn module_index(&self, name: &str) -> Result<usize> {
        let unknown = || ShearsError::UnknownModule(name.to_string());
        let (block, kind) = name.split_once('.').ok_or_else(unknown)?;
        let block: usize = block
            .strip_prefix('b')
            .and_then(|b| b.parse().ok())
            .ok_or_else(unknown)?;
        let kind = LinearKind::from_suffix(kind).ok_or_else(unknown)?;
        if block >= self.config.n_blocks {
            return Err(unknown());
        }
        Ok(block * 7 + kind.slot())
    }

    pub fn weight(&self, name: &str) -> Result<&DenseMatrix> {
        Ok(&self.linears[self.module_index(name)?])
    }

    pub fn weight_mut(&mut self, name: &str) -> Result<&mut DenseMatrix> {
        let i = self.module_index(name)?;
        Ok(&mut self.linears[i])
    }

    pub fn linears(&self) -> &[DenseMatrix] {
        &self.linears
    }

    /// Every tensor with a stable name, target modules included.
    pub fn named_tensors(&self) -> Vec<(String, &DenseMatrix)> {
        let mut out = vec![
            ("embedding".to_string(), &self.embedding),
            ("positions".to_string(), &self.positions),
        ];
        out.extend(self.module_names().into_iter().zip(self.linears.iter()));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn total_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over the little-endian bytes of every target module, in order.
    pub fn target_hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.linears {
            for v in w.as_slice() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 over every tensor of the model.
    pub fn full_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for v in t.as_slice() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Records the target-weight hash; later stages verify against it.
    pub fn freeze(&mut self) {
        self.frozen_hash = Some(self.target_hash());
    }

    pub fn clear_frozen(&mut self) {
        self.frozen_hash = None;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen_hash.is_some()
    }

    pub fn frozen_hash(&self) -> Option<&str> {
        self.frozen_hash.as_deref()
    }

    pub(crate) fn set_frozen_hash(&mut self, hash: Option<String>) {
        self.frozen_hash = hash;
    }

    pub fn verify_frozen(&self) -> Result<()> {
        let recorded = self.frozen_hash.as_ref().ok_or(ShearsError::NotFrozen)?;
        let found = self.target_hash();
        if *recorded != found {
            return Err(ShearsError::FrozenHashMismatch {
                recorded: recorded.clone(),
                found,
            });
        }
        Ok(())
    }

    /// Requested sparsity of the pruning pass that produced this model, if any.
    pub fn sparsity_level(&self) -> Option<f64> {
        self.sparsity
    }

    pub(crate) fn set_sparsity_level(&mut self, s: Option<f64>) {
        self.sparsity = s;
    }

    /// CSR copies of every target module, for [`BaseKernel::Csr`].
    pub fn csr_weights(&self) -> Vec<CsrMatrix> {
        self.linears.iter().map(CsrMatrix::from_dense).collect()
    }

    /// Class logits `[batch × n_classes]`.
    ///
    /// `adapters` without `active` runs the maximal sub-adapter.
    pub fn forward(
        &self,
        batch: &Batch,
        adapters: Option<&SuperAdapter>,
        active: Option<&SubAdapterConfig>,
    ) -> Result<DenseMatrix> {
        self.forward_with_kernel(batch, adapters, active, BaseKernel::Dense)
    }

    pub fn forward_with_kernel(
        &self,
        batch: &Batch,
        adapters: Option<&SuperAdapter>,
        active: Option<&SubAdapterConfig>,
        kernel: BaseKernel<'_>,
    ) -> Result<DenseMatrix> {
        let slots = self.resolve_adapters(adapters, active)?;
        batch.check(&self.config)?;
        if let BaseKernel::Csr(ws) = kernel {
            if ws.len() != self.linears.len() {
                return Err(ShearsError::InvalidArgument(
                    "one CSR matrix per target module required".into(),
                ));
            }
        }
        Ok(self.run(batch, &slots, kernel, &mut |_, _| {}, false)?.logits)
    }

    /// Per-module column norms of each target's input over every token of
    /// every batch.
    pub fn capture_activations(
        &self,
        batches: &[Batch],
        targets: &[String],
    ) -> Result<BTreeMap<String, Vec<f32>>> {
        if batches.is_empty() {
            return Err(ShearsError::EmptyInput("no calibration batches"));
        }
        let mut wanted: BTreeMap<usize, (String, Vec<f64>)> = BTreeMap::new();
        for name in targets {
            let idx = self.module_index(name)?;
            let k = self.linears[idx].cols();
            wanted.insert(idx, (name.clone(), vec![0.0; k]));
        }
        let slots: Vec<Option<AdapterSlot>> = (0..self.linears.len()).map(|_| None).collect();
        for batch in batches {
            batch.check(&self.config)?;
            self.run(
                batch,
                &slots,
                BaseKernel::Dense,
                &mut |idx, x| {
                    if let Some((_, acc)) = wanted.get_mut(&idx) {
                        for (a, s) in acc.iter_mut().zip(column_sum_squares(x)) {
                            *a += s;
                        }
                    }
                },
                false,
            )?;
        }
        Ok(wanted
            .into_values()
            .map(|(name, acc)| (name, acc.into_iter().map(|s| s.sqrt() as f32).collect()))
            .collect())
    }

    /// Loss and exact gradients w.r.t. the active slices of every adapter.
    pub fn adapter_gradients(
        &self,
        adapters: &SuperAdapter,
        active: &SubAdapterConfig,
        batch: &Batch,
    ) -> Result<AdapterGradients> {
        let slots = self.resolve_adapters(Some(adapters), Some(active))?;
        batch.check(&self.config)?;
        let trace = self.run(batch, &slots, BaseKernel::Dense, &mut |_, _| {}, true)?;
        let loss = cross_entropy(&trace.logits, &batch.labels)?;
        let grads = self.backward(batch, &slots, &trace)?;

        let names = self.module_names();
        let mut modules = Vec::new();
        for m in &adapters.modules {
            let idx = self.module_index(&m.name)?;
            let (b, a) = grads[idx].clone().expect("active adapter has a gradient");
            modules.push(ModuleGradient {
                name: names[idx].clone(),
                rank: active.get(&m.name).unwrap(),
                b,
                a,
            });
        }
        Ok(AdapterGradients {
            loss,
            logits: trace.logits,
            modules,
        })
    }

    fn resolve_adapters(
        &self,
        adapters: Option<&SuperAdapter>,
        active: Option<&SubAdapterConfig>,
    ) -> Result<Vec<Option<AdapterSlot>>> {
        let mut slots: Vec<Option<AdapterSlot>> = (0..self.linears.len()).map(|_| None).collect();
        let Some(adapters) = adapters else {
            if active.is_some() {
                return Err(ShearsError::InvalidConfig(
                    "an active config was given without adapters".into(),
                ));
            }
            return Ok(slots);
        };
        let maximal;
        let active = match active {
            Some(c) => c,
            None => {
                maximal = adapters.maximal_config();
                &maximal
            }
        };
        adapters.validate(active)?;
        for m in &adapters.modules {
            let idx = self.module_index(&m.name)?;
            let w = &self.linears[idx];
            if m.out_features() != w.rows() || m.in_features() != w.cols() {
                return Err(ShearsError::ShapeMismatch {
                    op: "adapter",
                    lhs: w.shape(),
                    rhs: (m.out_features(), m.in_features()),
                });
            }
            let rank = active.get(&m.name).unwrap();
            slots[idx] = Some(AdapterSlot {
                a: m.a_slice(rank),
                b: m.b_slice(rank),
                scale: adapters.scale_for(m, rank),
            });
        }
        Ok(slots)
    }

    fn linear(
        &self,
        idx: usize,
        x: &DenseMatrix,
        slot: Option<&AdapterSlot>,
        kernel: BaseKernel<'_>,
        observe: &mut dyn FnMut(usize, &DenseMatrix),
    ) -> Result<LinearOut> {
        observe(idx, x);
        let mut y = match kernel {
            BaseKernel::Dense => matmul_a_bt(x, &self.linears[idx])?,
            BaseKernel::Csr(ws) => dense_matmul_csr_t(x, &ws[idx])?,
        };
        let Some(slot) = slot else {
            return Ok(LinearOut { y, z: None });
        };
        let z = matmul_a_bt(x, &slot.a)?;
        let scale = slot.scale as f64;
        for i in 0..y.rows() {
            let zi = z.row(i);
            for (o, yv) in y.row_mut(i).iter_mut().enumerate() {
                *yv += (scale * dot_f64(zi, slot.b.row(o))) as f32;
            }
        }
        Ok(LinearOut { y, z: Some(z) })
    }

    fn run(
        &self,
        batch: &Batch,
        slots: &[Option<AdapterSlot>],
        kernel: BaseKernel<'_>,
        observe: &mut dyn FnMut(usize, &DenseMatrix),
        keep: bool,
    ) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let (t, d) = (cfg.seq_len, cfg.d_model);
        let n_seq = batch.len();
        let mut h = DenseMatrix::zeros(n_seq * t, d);
        for (row, &tok) in batch.tokens.iter().enumerate() {
            let e = self.embedding.row(tok as usize);
            let p = self.positions.row(row % t);
            for ((o, a), b) in h.row_mut(row).iter_mut().zip(e).zip(p) {
                *o = a + b;
            }
        }

        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut blocks = Vec::new();
        for blk in 0..cfg.n_blocks {
            let base = blk * 7;
            let lin = |kind: LinearKind,
                       x: &DenseMatrix,
                       observe: &mut dyn FnMut(usize, &DenseMatrix)|
             -> Result<LinearOut> {
                let idx = base + kind.slot();
                self.linear(idx, x, slots[idx].as_ref(), kernel, observe)
            };
            let (xn, x_inv_rms) = rms_norm(&h);
            let q = lin(LinearKind::Q, &xn, observe)?;
            let k = lin(LinearKind::K, &xn, observe)?;
            let v = lin(LinearKind::V, &xn, observe)?;

            let mut ctx = DenseMatrix::zeros(n_seq * t, d);
            let mut probs = Vec::with_capacity(if keep { n_seq } else { 0 });
            for s in 0..n_seq {
                let mut p = DenseMatrix::zeros(t, t);
                for i in 0..t {
                    let qi = q.y.row(s * t + i);
                    let scores: Vec<f64> = (0..t)
                        .map(|j| dot_f64(qi, k.y.row(s * t + j)) * inv_sqrt_d)
                        .collect();
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for (j, e) in exps.iter().enumerate() {
                        p.set(i, j, (e / sum) as f32);
                    }
                }
                for i in 0..t {
                    let mut acc = vec![0.0f64; d];
                    for j in 0..t {
                        let pij = p.get(i, j) as f64;
                        for (a, &vv) in acc.iter_mut().zip(v.y.row(s * t + j)) {
                            *a += pij * vv as f64;
                        }
                    }
                    for (c, a) in ctx.row_mut(s * t + i).iter_mut().zip(&acc) {
                        *c = *a as f32;
                    }
                }
                if keep {
                    probs.push(p);
                }
            }

            let o = lin(LinearKind::O, &ctx, observe)?;
            let h1 = h.add(&o.y)?;
            let (h1n, h1_inv_rms) = rms_norm(&h1);
            let gate = lin(LinearKind::Gate, &h1n, observe)?;
            let up = lin(LinearKind::Up, &h1n, observe)?;
            let mut act = gate.y.map(silu);
            for (a, u) in act.as_mut_slice().iter_mut().zip(up.y.as_slice()) {
                *a *= u;
            }
            let down = lin(LinearKind::Down, &act, observe)?;
            let h_next = h1.add(&down.y)?;
            if keep {
                blocks.push(BlockCache {
                    x: xn,
                    x_inv_rms,
                    q,
                    k,
                    v,
                    probs,
                    ctx,
                    o,
                    h1: h1n,
                    h1_inv_rms,
                    gate,
                    up,
                    act,
                    down,
                });
            }
            h = h_next;
        }

        let mut pooled = DenseMatrix::zeros(n_seq, d);
        for s in 0..n_seq {
            let mut acc = vec![0.0f64; d];
            for i in 0..t {
                for (a, &v) in acc.iter_mut().zip(h.row(s * t + i)) {
                    *a += v as f64;
                }
            }
            for (p, a) in pooled.row_mut(s).iter_mut().zip(&acc) {
                *p = (a / t as f64) as f32;
            }
        }
        let logits = matmul(&pooled, &self.head)?;
        Ok(ForwardTrace { blocks, logits })
    }

    /// Backpropagates the mean cross-entropy to every adapter slot.
    fn backward(
        &self,
        batch: &Batch,
        slots: &[Option<AdapterSlot>],
        trace: &ForwardTrace,
    ) -> Result<Vec<Option<(DenseMatrix, DenseMatrix)>>> {
        let cfg = &self.config;
        let (t, d) = (cfg.seq_len, cfg.d_model);
        let n_seq = batch.len();
        let mut grads: Vec<Option<(DenseMatrix, DenseMatrix)>> =
            (0..self.linears.len()).map(|_| None).collect();

        let dlogits = cross_entropy_grad(&trace.logits, &batch.labels);
        // pooled = mean_t h, logits = pooled · head
        let dpooled = matmul_a_bt(&dlogits, &self.head)?;
        let mut dh = DenseMatrix::zeros(n_seq * t, d);
        for row in 0..n_seq * t {
            let src = dpooled.row(row / t);
            for (o, &g) in dh.row_mut(row).iter_mut().zip(src) {
                *o = g / t as f32;
            }
        }

        let inv_sqrt_d = 1.0 / (d as f32).sqrt();
        for blk in (0..cfg.n_blocks).rev() {
            let c = &trace.blocks[blk];
            let base = blk * 7;
            let mut lin_back = |kind: LinearKind, x: &DenseMatrix, out: &LinearOut, dy: &DenseMatrix| {
                let idx = base + kind.slot();
                let (dx, g) = linear_backward(&self.linears[idx], slots[idx].as_ref(), x, out, dy)?;
                grads[idx] = g;
                Ok::<_, ShearsError>(dx)
            };

            // h = h1 + down(act)
            let dact = lin_back(LinearKind::Down, &c.act, &c.down, &dh)?;
            let mut dgate = DenseMatrix::zeros(dact.rows(), dact.cols());
            let mut dup = DenseMatrix::zeros(dact.rows(), dact.cols());
            for i in 0..dact.len() {
                let g = c.gate.y.as_slice()[i];
                let u = c.up.y.as_slice()[i];
                let da = dact.as_slice()[i];
                dup.as_mut_slice()[i] = da * silu(g);
                dgate.as_mut_slice()[i] = da * u * silu_grad(g);
            }
            let mut dh1n = lin_back(LinearKind::Gate, &c.h1, &c.gate, &dgate)?;
            dh1n.add_assign(&lin_back(LinearKind::Up, &c.h1, &c.up, &dup)?)?;
            let mut dh1 = dh;
            dh1.add_assign(&rms_norm_backward(&c.h1, &c.h1_inv_rms, &dh1n))?;

            // h1 = x + o(ctx)
            let dctx = lin_back(LinearKind::O, &c.ctx, &c.o, &dh1)?;
            let mut dq = DenseMatrix::zeros(n_seq * t, d);
            let mut dk = DenseMatrix::zeros(n_seq * t, d);
            let mut dv = DenseMatrix::zeros(n_seq * t, d);
            for s in 0..n_seq {
                let p = &c.probs[s];
                let r = s * t;
                for i in 0..t {
                    let dci = dctx.row(r + i);
                    // dP_ij = dctx_i · v_j
                    let dp: Vec<f32> = (0..t)
                        .map(|j| dot_f64(dci, c.v.y.row(r + j)) as f32)
                        .collect();
                    let row_dot: f32 = (0..t).map(|j| dp[j] * p.get(i, j)).sum();
                    for j in 0..t {
                        let pij = p.get(i, j);
                        // dV_j += P_ij dctx_i
                        for (o, &g) in dv.row_mut(r + j).iter_mut().zip(dci) {
                            *o += pij * g;
                        }
                        let ds = pij * (dp[j] - row_dot) * inv_sqrt_d;
                        for (o, &kv) in dq.row_mut(r + i).iter_mut().zip(c.k.y.row(r + j)) {
                            *o += ds * kv;
                        }
                        for (o, &qv) in dk.row_mut(r + j).iter_mut().zip(c.q.y.row(r + i)) {
                            *o += ds * qv;
                        }
                    }
                }
            }
            let mut dxn = lin_back(LinearKind::Q, &c.x, &c.q, &dq)?;
            dxn.add_assign(&lin_back(LinearKind::K, &c.x, &c.k, &dk)?)?;
            dxn.add_assign(&lin_back(LinearKind::V, &c.x, &c.v, &dv)?)?;
            let mut dx = dh1;
            dx.add_assign(&rms_norm_backward(&c.x, &c.x_inv_rms, &dxn))?;
            dh = dx;
        }
        Ok(grads)
    }
}

const RMS_EPS: f64 = 1e-6;

/// Row-wise `x / sqrt(mean(x²) + eps)` without a learned gain. Returns the
/// normalized rows and each row's inverse RMS.
fn rms_norm(x: &DenseMatrix) -> (DenseMatrix, Vec<f64>) {
    let mut y = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = y.row_mut(i);
        let ms = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / row.len() as f64;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v as f64 * r) as f32;
        }
        inv.push(r);
    }
    (y, inv)
}

/// `dx = r · (dy − y · mean(dy ⊙ y))` per row, with `y` the normalized rows.
fn rms_norm_backward(y: &DenseMatrix, inv: &[f64], dy: &DenseMatrix) -> DenseMatrix {
    let mut dx = DenseMatrix::zeros(y.rows(), y.cols());
    let d = y.cols() as f64;
    for i in 0..y.rows() {
        let (yr, gr) = (y.row(i), dy.row(i));
        let m = dot_f64(yr, gr) / d;
        for ((o, &yv), &gv) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
            *o = (inv[i] * (gv as f64 - yv as f64 * m)) as f32;
        }
    }
    dx
}

type SliceGrad = Option<(DenseMatrix, DenseMatrix)>;

/// Returns `dx` and, for adapted modules, `(dB, dA)` of the active slice.
fn linear_backward(
    w: &DenseMatrix,
    slot: Option<&AdapterSlot>,
    x: &DenseMatrix,
    out: &LinearOut,
    dy: &DenseMatrix,
) -> Result<(DenseMatrix, SliceGrad)> {
    let mut dx = matmul(dy, w)?;
    let Some(slot) = slot else {
        return Ok((dx, None));
    };
    let z = out.z.as_ref().expect("adapter output cached");
    let grad_b = matmul_at_b(dy, z)?.scale(slot.scale);
    let dz = matmul(dy, &slot.b)?.scale(slot.scale);
    let grad_a = matmul_at_b(&dz, x)?;
    dx.add_assign(&matmul(&dz, &slot.a)?)?;
    Ok((dx, Some((grad_b, grad_a))))
}

/// Mean softmax cross-entropy, evaluated in `f64`.
pub fn cross_entropy(logits: &DenseMatrix, labels: &[u32]) -> Result<f32> {
    if logits.rows() != labels.len() {
        return Err(ShearsError::ShapeMismatch {
            op: "cross_entropy",
            lhs: logits.shape(),
            rhs: (labels.len(), 1),
        });
    }
    if labels.is_empty() {
        return Err(ShearsError::EmptyInput("no labels"));
    }
    let mut total = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        if y as usize >= row.len() {
            return Err(ShearsError::InvalidArgument(format!(
                "label {y} out of range for {} classes",
                row.len()
            )));
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        total += lse - row[y as usize] as f64;
    }
    Ok((total / labels.len() as f64) as f32)
}

/// `(softmax − onehot) / batch`
fn cross_entropy_grad(logits: &DenseMatrix, labels: &[u32]) -> DenseMatrix {
    let n = labels.len() as f64;
    let mut g = DenseMatrix::zeros(logits.rows(), logits.cols());
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            let onehot = if j == y as usize { 1.0 } else { 0.0 };
            g.set(i, j, ((e / sum - onehot) / n) as f32);
        }
    }
    g
}

/// Row-wise argmax.
pub fn predictions(logits: &DenseMatrix) -> Vec<u32> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}
