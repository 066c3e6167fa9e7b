//! The staged commands. Each reads and writes only under the workdir.

use serde::{Deserialize, Serialize};
use shears::checkpoint::{load_adapter, load_model, save_adapter, save_model};
use shears::data::{generate, Dataset, Splits};
use shears::metrics::{bench_inference, count_params, BenchReport, ParamReport};
use shears::nls::{evaluate, train, EpochRecord, EvalResult, TrainMode};
use shears::pruning::{PruneReport, PruneMethod};
use shears::search::{
    evolutionary_search, heuristic_config, hill_climb, rank_table, Candidate, EvolutionConfig,
    Objectives, SearchSpace,
};
use shears::{attach, merge, Batch, Model, Rng, SubAdapterConfig, SuperAdapter};

use crate::config::{PipelineConfig, Strategy};
use crate::error::{CliError, CliResult};
use crate::workdir::Workdir;

const EVAL_BATCH: usize = 64;
const CALIB_BATCH: usize = 64;

/// Which sub-adapter (or none) `eval` runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Which {
    Base,
    Heuristic,
    Maximal,
    Minimal,
    Best,
    Config(SubAdapterConfig),
}

impl Which {
    pub fn parse(s: &str) -> CliResult<Self> {
        Ok(match s {
            "base" => Which::Base,
            "heuristic" => Which::Heuristic,
            "maximal" => Which::Maximal,
            "minimal" => Which::Minimal,
            "best" => Which::Best,
            other => Which::Config(SubAdapterConfig::parse(other).map_err(|e| {
                CliError::config(format!(
                    "--which: expected base|heuristic|maximal|minimal|best or a config like `b0.q=24,b0.k=16`: {e}"
                ))
            })?),
        })
    }

    fn label(&self) -> &str {
        match self {
            Which::Base => "base",
            Which::Heuristic => "heuristic",
            Which::Maximal => "maximal",
            Which::Minimal => "minimal",
            Which::Best => "best",
            Which::Config(_) => "config",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub dense: bool,
    pub steps: usize,
    pub epochs: Vec<EpochRecord>,
    pub target_hash_before: String,
    pub target_hash_after: String,
    pub eval_config: SubAdapterConfig,
    pub test: EvalResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchReport {
    pub strategy: Strategy,
    pub heuristic: Candidate,
    pub best: Candidate,
    pub best_test: EvalResult,
    pub evaluations: usize,
    /// Every evaluated config, best first.
    pub table: Vec<Candidate>,
    /// Non-dominated set for the evolutionary strategy.
    pub front: Option<Vec<Candidate>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub which: String,
    pub config: Option<SubAdapterConfig>,
    pub split: String,
    pub result: EvalResult,
    pub adapter_params: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergedModule {
    pub name: String,
    pub sparsity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsReport {
    pub prune: PruneReport,
    pub config: Option<SubAdapterConfig>,
    pub unmerged: ParamReport,
    pub merged: Option<ParamReport>,
    pub merged_modules: Option<Vec<MergedModule>>,
    /// Total parameters over non-zero ones, unmerged.
    pub nonzero_reduction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub mode: TrainMode,
    pub dense: bool,
    pub sparsity: f64,
    pub base: EvalResult,
    pub heuristic: EvalResult,
    pub maximal: EvalResult,
    pub minimal: EvalResult,
    /// Sub-adapter used for the tuned arm: the search result under NLS, the
    /// trained rank under fixed LoRA.
    pub tuned_config: SubAdapterConfig,
    pub tuned: EvalResult,
}

/// Resolved config plus workdir, shared by all commands.
pub struct Ctx {
    pub cfg: PipelineConfig,
    pub wd: Workdir,
}

impl Ctx {
    pub fn new(cfg: PipelineConfig) -> Self {
        let wd = Workdir::new(cfg.workdir());
        Self { cfg, wd }
    }

    fn splits(&self) -> CliResult<Splits> {
        Ok(generate(&self.cfg.task)?)
    }

    fn load_base(&self) -> CliResult<Model> {
        let dir = self.wd.model();
        if !dir.join("meta.json").is_file() {
            return Err(CliError::artifact(format!(
                "no base model at {}; run `shears prune` first (or `shears train --dense`)",
                dir.display()
            )));
        }
        let model = load_model(&dir).map_err(|e| CliError::from(e).context(dir.display()))?;
        if model.config != self.cfg.model {
            return Err(CliError::artifact(format!(
                "model at {} was built from a different [model] section; re-run `shears prune`",
                dir.display()
            )));
        }
        model
            .verify_frozen()
            .map_err(|e| CliError::artifact(e.to_string()).context(dir.display()))?;
        Ok(model)
    }

    fn load_trained_adapter(&self) -> CliResult<SuperAdapter> {
        let dir = self.wd.adapter();
        if !dir.join("meta.json").is_file() {
            return Err(CliError::artifact(format!(
                "no adapter at {}; run `shears train` first",
                dir.display()
            )));
        }
        let adapter = load_adapter(&dir).map_err(|e| CliError::from(e).context(dir.display()))?;
        if !adapter.trained {
            return Err(CliError::artifact(format!(
                "adapter at {} is not trained",
                dir.display()
            )));
        }
        Ok(adapter)
    }

    fn space(adapter: &SuperAdapter) -> CliResult<SearchSpace> {
        Ok(SearchSpace::from_adapter(adapter)?)
    }
}

fn calibration_batches(data: &Dataset, n: usize, seed: u64) -> Vec<Batch> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    Rng::with_stream(seed, 21).shuffle(&mut idx);
    idx.truncate(n.min(data.len()));
    idx.chunks(CALIB_BATCH).map(|c| data.select(c)).collect()
}

fn fresh_model(cfg: &PipelineConfig) -> CliResult<Model> {
    Ok(Model::from_config(&cfg.model)?)
}

fn adapter_params(adapter: &SuperAdapter, config: &SubAdapterConfig) -> usize {
    adapter
        .modules
        .iter()
        .map(|m| {
            let r = config.get(&m.name).unwrap_or(0);
            r * (m.in_features() + m.out_features())
        })
        .sum()
}

pub fn cmd_prune(ctx: &Ctx) -> CliResult<PruneReport> {
    let cfg = &ctx.cfg;
    let splits = ctx.splits()?;
    let model = fresh_model(cfg)?;
    let targets = cfg.prune_targets()?;
    let calib = match cfg.prune.method {
        PruneMethod::Wanda => calibration_batches(&splits.train, cfg.prune.calib_size, cfg.prune.calib_seed),
        PruneMethod::Magnitude => Vec::new(),
    };
    let (pruned, report) =
        shears::sparsify_model(&model, &calib, &targets, cfg.prune.sparsity, cfg.prune.method)?;
    save_model(&pruned, &ctx.wd.model())?;
    ctx.wd.write_json(&ctx.wd.reports().join("prune.json"), &report)?;
    println!(
        "pruned {} modules to {:.4} sparsity ({} of {} target weights non-zero) -> {}",
        report.modules.len(),
        report.global_sparsity,
        report.target_nonzero,
        report.target_total,
        ctx.wd.model().display()
    );
    Ok(report)
}

/// Writes an unpruned, frozen base in place of the prune stage.
fn write_dense_base(ctx: &Ctx) -> CliResult<()> {
    let mut model = fresh_model(&ctx.cfg)?;
    model.freeze();
    save_model(&model, &ctx.wd.model())?;
    let report = PruneReport::scan(&model, &ctx.cfg.prune_targets()?, None, None)?;
    ctx.wd.write_json(&ctx.wd.reports().join("prune.json"), &report)
}

pub fn cmd_train(ctx: &Ctx, dense: bool) -> CliResult<TrainReport> {
    let cfg = &ctx.cfg;
    if dense {
        write_dense_base(ctx)?;
    }
    let model = ctx.load_base()?;
    let splits = ctx.splits()?;
    let targets = cfg.adapter_targets()?;
    let mut rng = Rng::with_stream(cfg.adapter.seed, 7);
    let fresh = attach(&model, &targets, &cfg.adapter.rank_choices, cfg.adapter.alpha, &mut rng)?;
    let before = model.target_hash();
    let (adapter, log) = train(&model, &fresh, &splits.train, &splits.val, &cfg.train)?;
    let after = model.target_hash();
    for stale in ["results.json", "best_config.json"] {
        let p = ctx.wd.search().join(stale);
        if p.is_file() {
            std::fs::remove_file(&p)?;
        }
    }
    save_adapter(&adapter, &ctx.wd.adapter())?;
    ctx.wd
        .write_text(&ctx.wd.logs().join("train.jsonl"), &log.to_jsonl()?)?;
    let eval_config = match cfg.train.mode {
        TrainMode::FixedLora { rank } => adapter.uniform_config(rank)?,
        TrainMode::Nls => heuristic_config(&Ctx::space(&adapter)?),
    };
    let test = evaluate(&model, Some(&adapter), Some(&eval_config), &splits.test, EVAL_BATCH)?;
    let report = TrainReport {
        mode: cfg.train.mode,
        dense,
        steps: log.steps.len(),
        epochs: log.epochs,
        target_hash_before: before,
        target_hash_after: after,
        eval_config,
        test,
    };
    ctx.wd.write_json(&ctx.wd.reports().join("train.json"), &report)?;
    println!(
        "trained {} steps; test accuracy {:.4} at {} -> {}",
        report.steps,
        test.accuracy,
        report.eval_config.fingerprint(),
        ctx.wd.adapter().display()
    );
    Ok(report)
}

pub fn cmd_search(ctx: &Ctx) -> CliResult<SearchReport> {
    let cfg = &ctx.cfg;
    let model = ctx.load_base()?;
    let adapter = ctx.load_trained_adapter()?;
    let splits = ctx.splits()?;
    let space = Ctx::space(&adapter)?;
    let val = &splits.val;
    let evaluator = |c: &SubAdapterConfig| -> shears::Result<Objectives> {
        let r = evaluate(&model, Some(&adapter), Some(c), val, EVAL_BATCH)?;
        if !r.loss.is_finite() {
            return Err(shears::ShearsError::NonFiniteLoss { step: 0 });
        }
        Ok(Objectives {
            metric: r.accuracy,
            params: adapter_params(&adapter, c) as u64,
        })
    };
    let start = heuristic_config(&space);
    let heuristic = Candidate::evaluated(start.clone(), evaluator(&start)?);
    let (best, evaluations, table, front) = match cfg.search.strategy {
        Strategy::Heuristic => (heuristic.clone(), 1, vec![heuristic.clone()], None),
        Strategy::Hillclimb => {
            let r = hill_climb(&evaluator, &start, &space, cfg.search.budget)?;
            (r.best, r.evaluations, rank_table(&r.evaluated), None)
        }
        Strategy::Evolutionary => {
            let ec = EvolutionConfig {
                pop_size: cfg.search.pop_size,
                generations: cfg.search.generations,
                reference_points: cfg.search.reference_points.clone(),
            };
            let mut rng = Rng::with_stream(cfg.search.seed, 31);
            let r = evolutionary_search(&evaluator, &space, &ec, &mut rng)?;
            let table = rank_table(&r.population);
            (r.best, r.evaluations, table, Some(r.front))
        }
    };
    let best_test = evaluate(&model, Some(&adapter), Some(&best.config), &splits.test, EVAL_BATCH)?;
    let report = SearchReport {
        strategy: cfg.search.strategy,
        heuristic,
        best,
        best_test,
        evaluations,
        table,
        front,
    };
    ctx.wd.write_json(&ctx.wd.search().join("results.json"), &report)?;
    ctx.wd
        .write_json(&ctx.wd.search().join("best_config.json"), &report.best.config)?;
    println!(
        "search ({:?}, {} evaluations): best {} val {:.4} test {:.4}",
        report.strategy,
        report.evaluations,
        report.best.config.fingerprint(),
        report.best.metric(),
        best_test.accuracy
    );
    Ok(report)
}

fn best_config(ctx: &Ctx) -> CliResult<SubAdapterConfig> {
    let path = ctx.wd.search().join("best_config.json");
    if !path.is_file() {
        return Err(CliError::artifact(format!(
            "no search result at {}; run `shears search` first",
            path.display()
        )));
    }
    ctx.wd.read_json(&path)
}

pub fn cmd_eval(ctx: &Ctx, which: &Which) -> CliResult<EvalReport> {
    let model = ctx.load_base()?;
    let splits = ctx.splits()?;
    let (adapter, config) = match which {
        Which::Base => (None, None),
        other => {
            let adapter = ctx.load_trained_adapter()?;
            let config = match other {
                Which::Heuristic => heuristic_config(&Ctx::space(&adapter)?),
                Which::Maximal => adapter.maximal_config(),
                Which::Minimal => adapter.minimal_config(),
                Which::Best => best_config(ctx)?,
                Which::Config(c) => c.clone(),
                Which::Base => unreachable!(),
            };
            adapter.validate(&config)?;
            (Some(adapter), Some(config))
        }
    };
    let result = evaluate(&model, adapter.as_ref(), config.as_ref(), &splits.test, EVAL_BATCH)?;
    let report = EvalReport {
        which: which.label().to_string(),
        adapter_params: match (&adapter, &config) {
            (Some(a), Some(c)) => adapter_params(a, c),
            _ => 0,
        },
        config,
        split: "test".into(),
        result,
    };
    ctx.wd.write_json(
        &ctx.wd.reports().join(format!("eval_{}.json", report.which)),
        &report,
    )?;
    println!(
        "eval {}: test accuracy {:.4} loss {:.4}",
        report.which, result.accuracy, result.loss
    );
    Ok(report)
}

/// The adapter with the searched config, else the trained one, else the
/// heuristic. `None` without an adapter.
fn reporting_adapter(ctx: &Ctx) -> CliResult<Option<(SuperAdapter, SubAdapterConfig)>> {
    if !ctx.wd.adapter().join("meta.json").is_file() {
        return Ok(None);
    }
    let adapter = ctx.load_trained_adapter()?;
    let train_report = ctx.wd.reports().join("train.json");
    let config = if ctx.wd.search().join("best_config.json").is_file() {
        best_config(ctx)?
    } else if train_report.is_file() {
        ctx.wd.read_json::<TrainReport>(&train_report)?.eval_config
    } else {
        heuristic_config(&Ctx::space(&adapter)?)
    };
    adapter.validate(&config)?;
    Ok(Some((adapter, config)))
}

pub fn cmd_bench(ctx: &Ctx) -> CliResult<BenchReport> {
    let cfg = &ctx.cfg;
    let model = ctx.load_base()?;
    let found = reporting_adapter(ctx)?;
    let (adapter, config) = match &found {
        Some((a, c)) => (Some(a), Some(c)),
        None => (None, None),
    };
    let mut rng = Rng::with_stream(cfg.bench.seed, 41);
    let n = cfg.bench.batch_size;
    let tokens = (0..n * cfg.model.seq_len)
        .map(|_| rng.below(cfg.model.vocab_size) as u32)
        .collect();
    let batch = Batch::new(tokens, vec![0; n], cfg.model.seq_len)?;
    let report = bench_inference(&model, adapter, config, &batch, cfg.bench.repetitions)?;
    ctx.wd.write_json(&ctx.wd.reports().join("bench.json"), &report)?;
    println!(
        "bench at {:.3} sparsity: dense {:.3e}s csr {:.3e}s speedup {:.2}x max diff {:.1e}",
        report.target_sparsity,
        report.dense_median_s,
        report.csr_median_s,
        report.speedup,
        report.max_abs_diff
    );
    Ok(report)
}

pub fn cmd_report(ctx: &Ctx) -> CliResult<ParamsReport> {
    let model = ctx.load_base()?;
    let targets = ctx.cfg.prune_targets()?;
    let found = reporting_adapter(ctx)?;
    let mut prune = PruneReport::scan(
        &model,
        &targets,
        model.sparsity_level().map(|_| ctx.cfg.prune.method),
        model.sparsity_level(),
    )?;
    let (unmerged, merged, merged_modules, config) = match &found {
        Some((a, c)) => {
            prune.attach_adapter(a, c)?;
            let unmerged = count_params(&model, Some(a), Some(c), false)?;
            let merged = count_params(&model, Some(a), Some(c), true)?;
            let (m, _) = merge(&model, a, c)?;
            let modules = a
                .module_names()
                .into_iter()
                .map(|name| {
                    let w = m.weight(&name)?;
                    Ok(MergedModule {
                        sparsity: (w.len() - w.count_nonzero()) as f64 / w.len() as f64,
                        name,
                    })
                })
                .collect::<shears::Result<Vec<_>>>()?;
            (unmerged, Some(merged), Some(modules), Some(c.clone()))
        }
        None => (count_params(&model, None, None, false)?, None, None, None),
    };
    let report = ParamsReport {
        nonzero_reduction: unmerged.base_total as f64 / unmerged.base_nonzero as f64,
        prune,
        config,
        unmerged,
        merged,
        merged_modules,
    };
    ctx.wd.write_json(&ctx.wd.reports().join("params.json"), &report)?;
    println!(
        "base {} params, {} non-zero ({:.3}x fewer); global sparsity {:.4} unmerged{}",
        report.unmerged.base_total,
        report.unmerged.base_nonzero,
        report.nonzero_reduction,
        report.unmerged.global_sparsity,
        match &report.merged {
            Some(m) => format!(", {:.4} merged", m.global_sparsity),
            None => String::new(),
        }
    );
    Ok(report)
}

pub fn cmd_pipeline(ctx: &Ctx, dense: bool) -> CliResult<PipelineReport> {
    if !dense {
        cmd_prune(ctx)?;
    }
    let train = cmd_train(ctx, dense)?;
    let tuned_config = match ctx.cfg.train.mode {
        TrainMode::Nls => cmd_search(ctx)?.best.config,
        TrainMode::FixedLora { .. } => train.eval_config.clone(),
    };
    let base = cmd_eval(ctx, &Which::Base)?.result;
    let heuristic = cmd_eval(ctx, &Which::Heuristic)?.result;
    let maximal = cmd_eval(ctx, &Which::Maximal)?.result;
    let minimal = cmd_eval(ctx, &Which::Minimal)?.result;
    let tuned = cmd_eval(ctx, &Which::Config(tuned_config.clone()))?.result;
    cmd_report(ctx)?;
    let report = PipelineReport {
        mode: ctx.cfg.train.mode,
        dense,
        sparsity: if dense { 0.0 } else { ctx.cfg.prune.sparsity },
        base,
        heuristic,
        maximal,
        minimal,
        tuned_config,
        tuned,
    };
    ctx.wd.write_json(&ctx.wd.reports().join("pipeline.json"), &report)?;
    println!(
        "pipeline: w/o tune {:.4}, tuned {:.4} ({})",
        base.accuracy,
        tuned.accuracy,
        report.tuned_config.fingerprint()
    );
    Ok(report)
}
