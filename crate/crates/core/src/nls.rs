//! Super-adapter training with Neural Low-rank adapter Search (NLS).
//!
//! Each step activates one sub-adapter (a uniformly sampled rank per module),
//! backpropagates through the frozen base and updates only the active slices
//! of every `(B, A)` pair together with their optimizer moments.

use serde::{Deserialize, Serialize};

use crate::adapters::{SubAdapterConfig, SuperAdapter};
use crate::data::Dataset;
use crate::error::{Result, ShearsError};
use crate::linalg::{DenseMatrix, Rng};
use crate::model::{cross_entropy, predictions, Model, ModuleGradient};
use crate::search::{heuristic_config, SearchSpace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f32,
        #[serde(default = "default_beta2")]
        beta2: f32,
        #[serde(default = "default_eps")]
        eps: f32,
    },
    Sgd,
}

fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.999
}
fn default_eps() -> f32 {
    1e-8
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainMode {
    /// Sample a sub-adapter every step.
    #[default]
    Nls,
    /// Plain LoRA at one fixed rank for every module.
    FixedLora { rank: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 16,
            learning_rate: 3e-4,
            optimizer: Optimizer::default(),
            seed: 0,
            mode: TrainMode::Nls,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(ShearsError::InvalidArgument(
                "train.learning_rate must be > 0".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(ShearsError::InvalidArgument(
                "train.batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub config: SubAdapterConfig,
    pub loss: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_loss: f32,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogLine<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
}

impl TrainLog {
    /// Line-delimited JSON, steps first, each tagged with `"record"`.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(&LogLine::Step(s))?);
            out.push('\n');
        }
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(&LogLine::Epoch(e))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn final_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Uniform independent rank per module.
pub fn sample_config(adapter: &SuperAdapter, rng: &mut Rng) -> SubAdapterConfig {
    adapter
        .modules
        .iter()
        .map(|m| (m.name.clone(), m.rank_choices[rng.below(m.rank_choices.len())]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f32,
    pub accuracy: f64,
}

/// Mean loss and accuracy over a whole split.
pub fn evaluate(
    model: &Model,
    adapter: Option<&SuperAdapter>,
    config: Option<&SubAdapterConfig>,
    data: &Dataset,
    batch_size: usize,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(ShearsError::EmptyInput("evaluation split is empty"));
    }
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    for batch in data.batches(batch_size.max(1)) {
        let logits = model.forward(&batch, adapter, config)?;
        loss_sum += cross_entropy(&logits, &batch.labels)? as f64 * batch.len() as f64;
        correct += predictions(&logits)
            .iter()
            .zip(&batch.labels)
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(EvalResult {
        loss: (loss_sum / data.len() as f64) as f32,
        accuracy: correct as f64 / data.len() as f64,
    })
}

/// Adam moments at full `r_max` shape plus one step counter per rank
/// component, so bias correction follows how often a component was active.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ModuleMoments {
    pub m_a: DenseMatrix,
    pub v_a: DenseMatrix,
    pub m_b: DenseMatrix,
    pub v_b: DenseMatrix,
    pub steps: Vec<u64>,
}

/// Optimizer bound to one super-adapter.
#[derive(Debug, Clone)]
pub struct AdapterOptimizer {
    kind: Optimizer,
    lr: f32,
    moments: Vec<ModuleMoments>,
}

impl AdapterOptimizer {
    pub fn new(adapter: &SuperAdapter, kind: Optimizer, lr: f32) -> Self {
        let moments = adapter
            .modules
            .iter()
            .map(|m| ModuleMoments {
                m_a: DenseMatrix::zeros(m.a.rows(), m.a.cols()),
                v_a: DenseMatrix::zeros(m.a.rows(), m.a.cols()),
                m_b: DenseMatrix::zeros(m.b.rows(), m.b.cols()),
                v_b: DenseMatrix::zeros(m.b.rows(), m.b.cols()),
                steps: vec![0; m.max_rank()],
            })
            .collect();
        Self { kind, lr, moments }
    }

    /// Applies one update to the active slices named by `grads`.
    pub fn step(&mut self, adapter: &mut SuperAdapter, grads: &[ModuleGradient]) -> Result<()> {
        for g in grads {
            let mi = adapter
                .modules
                .iter()
                .position(|m| m.name == g.name)
                .ok_or_else(|| ShearsError::UnknownModule(g.name.clone()))?;
            let module = &mut adapter.modules[mi];
            let st = &mut self.moments[mi];
            let r = g.rank;
            for j in 0..r {
                st.steps[j] += 1;
            }
            // A rows 0..r
            for j in 0..r {
                let t = st.steps[j];
                let k = module.a.cols();
                for c in 0..k {
                    let grad = g.a.get(j, c);
                    let idx = j * k + c;
                    update(
                        self.kind,
                        self.lr,
                        t,
                        &mut module.a.as_mut_slice()[idx],
                        &mut st.m_a.as_mut_slice()[idx],
                        &mut st.v_a.as_mut_slice()[idx],
                        grad,
                    );
                }
            }
            // B columns 0..r
            let rmax = module.b.cols();
            for o in 0..module.b.rows() {
                for j in 0..r {
                    let t = st.steps[j];
                    let grad = g.b.get(o, j);
                    let idx = o * rmax + j;
                    update(
                        self.kind,
                        self.lr,
                        t,
                        &mut module.b.as_mut_slice()[idx],
                        &mut st.m_b.as_mut_slice()[idx],
                        &mut st.v_b.as_mut_slice()[idx],
                        grad,
                    );
                }
            }
        }
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn moments(&self) -> &[ModuleMoments] {
        &self.moments
    }
}

#[inline]
fn update(kind: Optimizer, lr: f32, t: u64, p: &mut f32, m: &mut f32, v: &mut f32, g: f32) {
    match kind {
        Optimizer::Sgd => *p -= lr * g,
        Optimizer::Adam { beta1, beta2, eps } => {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mhat = *m as f64 / (1.0 - (beta1 as f64).powi(t as i32));
            let vhat = *v as f64 / (1.0 - (beta2 as f64).powi(t as i32));
            *p -= (lr as f64 * mhat / (vhat.sqrt() + eps as f64)) as f32;
        }
    }
}

/// Trains `adapter` on top of the frozen `model`.
///
/// Returns the trained adapter and a log with one record per step and one
/// validation record (heuristic sub-adapter) per epoch.
pub fn train(
    model: &Model,
    adapter: &SuperAdapter,
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(SuperAdapter, TrainLog)> {
    cfg.validate()?;
    model.verify_frozen()?;
    if train_data.is_empty() {
        return Err(ShearsError::EmptyInput("training split is empty"));
    }
    let mut adapter = adapter.clone();
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok((adapter, log));
    }

    let fixed = match cfg.mode {
        TrainMode::Nls => None,
        TrainMode::FixedLora { rank } => Some(adapter.uniform_config(rank)?),
    };
    let heuristic = heuristic_config(&SearchSpace::from_adapter(&adapter)?);
    let val_config = fixed.clone().unwrap_or(heuristic);

    let mut shuffle_rng = Rng::with_stream(cfg.seed, 11);
    let mut sample_rng = Rng::with_stream(cfg.seed, 12);
    let mut opt = AdapterOptimizer::new(&adapter, cfg.optimizer, cfg.learning_rate);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_data.select(chunk);
            let active = match &fixed {
                Some(c) => c.clone(),
                None => sample_config(&adapter, &mut sample_rng),
            };
            let grads = model.adapter_gradients(&adapter, &active, &batch)?;
            if !grads.loss.is_finite() {
                return Err(ShearsError::NonFiniteLoss { step });
            }
            opt.step(&mut adapter, &grads.modules)?;
            epoch_loss += grads.loss as f64;
            n_batches += 1;
            log.steps.push(StepRecord {
                step,
                epoch,
                config: active,
                loss: grads.loss,
            });
            step += 1;
        }
        let val = evaluate(model, Some(&adapter), Some(&val_config), val_data, 64)?;
        if !val.loss.is_finite() {
            return Err(ShearsError::NonFiniteLoss { step });
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: (epoch_loss / n_batches as f64) as f32,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
        });
    }
    model.verify_frozen()?;
    adapter.trained = true;
    Ok((adapter, log))
}
