//! Sub-adapter search: the center-of-space heuristic, steepest-ascent hill
//! climbing over one-step rank moves, and NSGA-II with an optional
//! reference-point survival (R-NSGA-II style).
//!
//! Objectives are a validation metric to maximize and an adapter parameter
//! count to minimize.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::adapters::{SubAdapterConfig, SuperAdapter};
use crate::error::{Result, ShearsError};
use crate::linalg::Rng;

/// Ordered modules, each with its descending rank list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    modules: Vec<(String, Vec<usize>)>,
}

impl SearchSpace {
    pub fn new(modules: Vec<(String, Vec<usize>)>) -> Result<Self> {
        if modules.is_empty() {
            return Err(ShearsError::InvalidArgument("empty search space".into()));
        }
        for (name, choices) in &modules {
            crate::adapters::validate_rank_choices(choices).map_err(|e| {
                ShearsError::InvalidArgument(format!("module `{name}`: {e}"))
            })?;
        }
        Ok(Self { modules })
    }

    pub fn from_adapter(adapter: &SuperAdapter) -> Result<Self> {
        Self::new(
            adapter
                .modules
                .iter()
                .map(|m| (m.name.clone(), m.rank_choices.clone()))
                .collect(),
        )
    }

    /// `modules` names each sharing `choices`.
    pub fn uniform(modules: &[&str], choices: &[usize]) -> Result<Self> {
        Self::new(
            modules
                .iter()
                .map(|m| (m.to_string(), choices.to_vec()))
                .collect(),
        )
    }

    pub fn modules(&self) -> &[(String, Vec<usize>)] {
        &self.modules
    }

    /// Product of per-module choice counts (saturating).
    pub fn size(&self) -> u128 {
        self.modules
            .iter()
            .fold(1u128, |acc, (_, c)| acc.saturating_mul(c.len() as u128))
    }

    pub fn contains(&self, config: &SubAdapterConfig) -> bool {
        config.len() == self.modules.len()
            && self
                .modules
                .iter()
                .all(|(name, choices)| config.get(name).is_some_and(|r| choices.contains(&r)))
    }

    fn check(&self, config: &SubAdapterConfig) -> Result<()> {
        if self.contains(config) {
            Ok(())
        } else {
            Err(ShearsError::InvalidConfig(format!(
                "`{}` is not in the search space",
                config.fingerprint()
            )))
        }
    }

    fn from_indices(&self, idx: &[usize]) -> SubAdapterConfig {
        self.modules
            .iter()
            .zip(idx)
            .map(|((n, c), &i)| (n.clone(), c[i]))
            .collect()
    }

    fn indices(&self, config: &SubAdapterConfig) -> Vec<usize> {
        self.modules
            .iter()
            .map(|(n, c)| {
                let r = config.get(n).expect("config checked against space");
                c.iter().position(|&x| x == r).expect("rank checked against space")
            })
            .collect()
    }

    pub fn random(&self, rng: &mut Rng) -> SubAdapterConfig {
        let idx: Vec<usize> = self.modules.iter().map(|(_, c)| rng.below(c.len())).collect();
        self.from_indices(&idx)
    }

    pub fn maximal(&self) -> SubAdapterConfig {
        self.from_indices(&vec![0; self.modules.len()])
    }

    pub fn minimal(&self) -> SubAdapterConfig {
        let idx: Vec<usize> = self.modules.iter().map(|(_, c)| c.len() - 1).collect();
        self.from_indices(&idx)
    }

    /// Every configuration, in mixed-radix order. Only for small spaces.
    pub fn enumerate(&self) -> Vec<SubAdapterConfig> {
        let mut out = Vec::new();
        let mut idx = vec![0usize; self.modules.len()];
        loop {
            out.push(self.from_indices(&idx));
            let mut pos = self.modules.len();
            loop {
                if pos == 0 {
                    return out;
                }
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < self.modules[pos].1.len() {
                    break;
                }
                idx[pos] = 0;
            }
        }
    }
}

/// Index `floor(n/2)` of each module's descending choice list.
pub fn heuristic_config(space: &SearchSpace) -> SubAdapterConfig {
    space
        .modules
        .iter()
        .map(|(n, c)| (n.clone(), c[c.len() / 2]))
        .collect()
}

/// Configurations one list position away in exactly one module. Modules in
/// space order; the smaller rank comes before the larger one.
pub fn neighbors(config: &SubAdapterConfig, space: &SearchSpace) -> Result<Vec<SubAdapterConfig>> {
    space.check(config)?;
    let idx = space.indices(config);
    let mut out = Vec::new();
    for (m, (_, choices)) in space.modules.iter().enumerate() {
        let i = idx[m];
        let moves = [
            (i + 1 < choices.len()).then(|| i + 1),
            i.checked_sub(1),
        ];
        for j in moves.into_iter().flatten() {
            let mut next = idx.clone();
            next[m] = j;
            out.push(space.from_indices(&next));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objectives {
    /// maximized
    pub metric: f64,
    /// minimized
    pub params: u64,
}

impl Objectives {
    pub fn dominates(&self, other: &Objectives) -> bool {
        self.metric >= other.metric
            && self.params <= other.params
            && (self.metric > other.metric || self.params < other.params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub config: SubAdapterConfig,
    pub objectives: Option<Objectives>,
}

impl Candidate {
    pub fn new(config: SubAdapterConfig) -> Self {
        Self {
            config,
            objectives: None,
        }
    }

    pub fn evaluated(config: SubAdapterConfig, objectives: Objectives) -> Self {
        Self {
            config,
            objectives: Some(objectives),
        }
    }

    pub fn is_evaluated(&self) -> bool {
        self.objectives.is_some()
    }

    pub fn metric(&self) -> f64 {
        self.objectives.map_or(f64::NEG_INFINITY, |o| o.metric)
    }

    fn objectives_or_err(&self) -> Result<Objectives> {
        self.objectives
            .ok_or_else(|| ShearsError::Unevaluated(self.config.fingerprint()))
    }
}

pub trait Evaluator {
    fn evaluate(&self, config: &SubAdapterConfig) -> Result<Objectives>;
}

impl<F> Evaluator for F
where
    F: Fn(&SubAdapterConfig) -> Result<Objectives>,
{
    fn evaluate(&self, config: &SubAdapterConfig) -> Result<Objectives> {
        self(config)
    }
}

/// Memoizes objectives by config fingerprint.
#[derive(Debug, Default, Clone)]
pub struct EvalCache {
    entries: HashMap<String, Objectives>,
    invocations: usize,
}

impl EvalCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lookup(&self, config: &SubAdapterConfig) -> Option<Objectives> {
        self.entries.get(&config.fingerprint()).copied()
    }

    /// Evaluator calls so far (cache misses).
    pub fn invocations(&self) -> usize {
        self.invocations
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get_or_eval(
        &mut self,
        evaluator: &dyn Evaluator,
        config: &SubAdapterConfig,
    ) -> Result<Objectives> {
        let key = config.fingerprint();
        if let Some(o) = self.entries.get(&key) {
            return Ok(*o);
        }
        self.invocations += 1;
        let o = evaluator.evaluate(config).map_err(|e| match e {
            e @ ShearsError::EvaluationFailed { .. } => e,
            other => ShearsError::EvaluationFailed {
                config: key.clone(),
                reason: other.to_string(),
            },
        })?;
        self.entries.insert(key, o);
        Ok(o)
    }

    /// Every cached result as a candidate, ordered by fingerprint.
    pub fn candidates(&self) -> Vec<Candidate> {
        let sorted: BTreeMap<_, _> = self.entries.iter().collect();
        sorted
            .into_iter()
            .map(|(k, o)| {
                Candidate::evaluated(SubAdapterConfig::parse(k).expect("own fingerprint"), *o)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HillClimbResult {
    pub best: Candidate,
    pub start: Candidate,
    /// Every evaluation in the order it happened.
    pub evaluated: Vec<Candidate>,
    /// Accepted positions, starting with `start`.
    pub path: Vec<SubAdapterConfig>,
    pub evaluations: usize,
}

/// Steepest-ascent hill climbing on the metric with strict improvement.
///
/// `budget` caps evaluator invocations; the climb stops at a local optimum or
/// when the budget runs out, returning the best configuration seen.
pub fn hill_climb(
    evaluator: &dyn Evaluator,
    start: &SubAdapterConfig,
    space: &SearchSpace,
    budget: usize,
) -> Result<HillClimbResult> {
    if budget == 0 {
        return Err(ShearsError::InvalidArgument("hill-climb budget must be >= 1".into()));
    }
    space.check(start)?;
    let mut cache = EvalCache::new();
    let mut evaluated = Vec::new();
    let start_obj = cache.get_or_eval(evaluator, start)?;
    evaluated.push(Candidate::evaluated(start.clone(), start_obj));
    let start_c = Candidate::evaluated(start.clone(), start_obj);
    let mut current = start_c.clone();
    let mut path = vec![start.clone()];

    'climb: loop {
        let mut best_move: Option<Candidate> = None;
        for n in neighbors(&current.config, space)? {
            let obj = match cache.lookup(&n) {
                Some(o) => o,
                None => {
                    if cache.invocations() >= budget {
                        if let Some(m) = best_move.take() {
                            path.push(m.config.clone());
                            current = m;
                        }
                        break 'climb;
                    }
                    let o = cache.get_or_eval(evaluator, &n)?;
                    evaluated.push(Candidate::evaluated(n.clone(), o));
                    o
                }
            };
            let incumbent = best_move.as_ref().map_or(current.metric(), Candidate::metric);
            if obj.metric > incumbent {
                best_move = Some(Candidate::evaluated(n, obj));
            }
        }
        match best_move {
            Some(m) => {
                path.push(m.config.clone());
                current = m;
            }
            None => break,
        }
    }

    Ok(HillClimbResult {
        best: current,
        start: start_c,
        evaluated,
        path,
        evaluations: cache.invocations(),
    })
}

/// Pareto fronts as index lists into `candidates`; front 0 is non-dominated.
pub fn nondominated_sort(candidates: &[Candidate]) -> Result<Vec<Vec<usize>>> {
    let objs: Vec<Objectives> = candidates
        .iter()
        .map(Candidate::objectives_or_err)
        .collect::<Result<_>>()?;
    Ok(sort_objectives(&objs))
}

fn sort_objectives(objs: &[Objectives]) -> Vec<Vec<usize>> {
    let n = objs.len();
    let mut dominated_by = vec![0usize; n];
    let mut dominates: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if objs[i].dominates(&objs[j]) {
                dominates[i].push(j);
                dominated_by[j] += 1;
            } else if objs[j].dominates(&objs[i]) {
                dominates[j].push(i);
                dominated_by[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dominated_by[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominates[i] {
                dominated_by[j] -= 1;
                if dominated_by[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Crowding distance of each member of one front. Members sharing an
/// objective vector count once: the first gets the distance, the rest 0.
pub fn crowding_distance(objs: &[Objectives]) -> Vec<f64> {
    let n = objs.len();
    let mut dist = vec![0.0f64; n];
    let mut uniq: Vec<usize> = Vec::new();
    for i in 0..n {
        if !uniq.iter().any(|&u| objs[u] == objs[i]) {
            uniq.push(i);
        }
    }
    if uniq.len() <= 2 {
        for &u in &uniq {
            dist[u] = f64::INFINITY;
        }
        return dist;
    }
    let keys: [fn(&Objectives) -> f64; 2] = [|o| o.metric, |o| o.params as f64];
    for key in keys {
        let mut order = uniq.clone();
        order.sort_by(|&a, &b| key(&objs[a]).total_cmp(&key(&objs[b])).then(a.cmp(&b)));
        let lo = key(&objs[order[0]]);
        let hi = key(&objs[*order.last().unwrap()]);
        dist[order[0]] = f64::INFINITY;
        dist[*order.last().unwrap()] = f64::INFINITY;
        if hi > lo {
            for w in order.windows(3) {
                dist[w[1]] += (key(&objs[w[2]]) - key(&objs[w[0]])) / (hi - lo);
            }
        }
    }
    dist
}

/// Negated distance to the nearest reference point, each objective
/// normalized by its range over `objs` and `references` together. Larger is
/// better.
pub fn reference_score(objs: &[Objectives], references: &[Objectives]) -> Vec<f64> {
    let range = |f: fn(&Objectives) -> f64| {
        let all = || objs.iter().chain(references).map(f);
        let lo = all().fold(f64::INFINITY, f64::min);
        let hi = all().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            hi - lo
        } else {
            1.0
        }
    };
    let metric_range = range(|o| o.metric);
    let params_range = range(|o| o.params as f64);
    objs.iter()
        .map(|o| {
            let d = references
                .iter()
                .map(|r| {
                    let dm = (o.metric - r.metric) / metric_range;
                    let dp = (o.params as f64 - r.params as f64) / params_range;
                    (dm * dm + dp * dp).sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            -d
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    pub pop_size: usize,
    pub generations: usize,
    /// `None` ranks survivors by crowding distance. `Some(points)` uses the
    /// reference-point score instead; an empty list means a single point at
    /// (best metric seen, fewest params seen), refreshed every generation.
    pub reference_points: Option<Vec<Objectives>>,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            pop_size: 8,
            generations: 4,
            reference_points: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionResult {
    /// Non-dominated members of the final population.
    pub front: Vec<Candidate>,
    /// Highest metric over every evaluated config (fewer params, then
    /// fingerprint, break ties).
    pub best: Candidate,
    pub population: Vec<Candidate>,
    /// Population fingerprints after initialization and after every generation.
    pub history: Vec<Vec<String>>,
    pub evaluations: usize,
}

struct Ranked {
    rank: usize,
    diversity: f64,
}

fn rank_population(pop: &[Candidate], refs: Option<&[Objectives]>) -> Vec<Ranked> {
    let objs: Vec<Objectives> = pop.iter().map(|c| c.objectives.unwrap()).collect();
    let fronts = sort_objectives(&objs);
    let mut out: Vec<Ranked> = pop
        .iter()
        .map(|_| Ranked {
            rank: 0,
            diversity: 0.0,
        })
        .collect();
    let ref_scores = refs.map(|r| reference_score(&objs, r));
    for (fi, front) in fronts.iter().enumerate() {
        let fobjs: Vec<Objectives> = front.iter().map(|&i| objs[i]).collect();
        let div = match &ref_scores {
            Some(s) => front.iter().map(|&i| s[i]).collect(),
            None => crowding_distance(&fobjs),
        };
        for (k, &i) in front.iter().enumerate() {
            out[i] = Ranked {
                rank: fi,
                diversity: div[k],
            };
        }
    }
    out
}

fn better(a: &Ranked, b: &Ranked) -> bool {
    a.rank < b.rank || (a.rank == b.rank && a.diversity > b.diversity)
}

fn best_of(cands: &[Candidate]) -> Candidate {
    cands
        .iter()
        .min_by(|a, b| {
            let (oa, ob) = (a.objectives.unwrap(), b.objectives.unwrap());
            ob.metric
                .total_cmp(&oa.metric)
                .then(oa.params.cmp(&ob.params))
                .then_with(|| a.config.fingerprint().cmp(&b.config.fingerprint()))
        })
        .cloned()
        .expect("non-empty")
}

fn mutate(space: &SearchSpace, idx: &mut [usize], rng: &mut Rng) {
    let p = 1.0 / space.modules.len() as f64;
    for (m, (_, choices)) in space.modules.iter().enumerate() {
        if !rng.bernoulli(p) || choices.len() < 2 {
            continue;
        }
        let i = idx[m];
        idx[m] = if i == 0 {
            1
        } else if i + 1 == choices.len() || rng.bernoulli(0.5) {
            i - 1
        } else {
            i + 1
        };
    }
}

/// NSGA-II over the sub-adapter space.
///
/// Generation 0 holds the heuristic and maximal configs plus random distinct
/// draws. Parents come from binary tournaments on (front, diversity),
/// children from uniform per-module crossover and adjacent-rank mutation with
/// probability `1/modules`. Survivors are picked by front, then diversity,
/// from the de-duplicated union of parents and children.
pub fn evolutionary_search(
    evaluator: &dyn Evaluator,
    space: &SearchSpace,
    cfg: &EvolutionConfig,
    rng: &mut Rng,
) -> Result<EvolutionResult> {
    if cfg.pop_size < 4 || cfg.pop_size % 2 != 0 {
        return Err(ShearsError::InvalidArgument(format!(
            "pop_size {} must be even and >= 4",
            cfg.pop_size
        )));
    }
    if cfg.generations == 0 {
        return Err(ShearsError::InvalidArgument("generations must be >= 1".into()));
    }
    let mut cache = EvalCache::new();
    let eval = |c: SubAdapterConfig, cache: &mut EvalCache| -> Result<Candidate> {
        let o = cache.get_or_eval(evaluator, &c)?;
        Ok(Candidate::evaluated(c, o))
    };

    let mut pop: Vec<Candidate> = Vec::with_capacity(cfg.pop_size);
    let mut seen = std::collections::HashSet::new();
    let max_distinct = space.size().min(cfg.pop_size as u128) as usize;
    for c in [heuristic_config(space), space.maximal()] {
        if seen.insert(c.fingerprint()) {
            pop.push(eval(c, &mut cache)?);
        }
    }
    let mut attempts = 0;
    while pop.len() < cfg.pop_size {
        let c = space.random(rng);
        attempts += 1;
        if seen.insert(c.fingerprint()) || (pop.len() >= max_distinct && attempts > 64 * cfg.pop_size) {
            pop.push(eval(c, &mut cache)?);
        }
    }
    pop.sort_by_key(|c| c.config.fingerprint());

    let references = |cache: &EvalCache| -> Option<Vec<Objectives>> {
        match &cfg.reference_points {
            None => None,
            Some(points) if !points.is_empty() => Some(points.clone()),
            Some(_) => {
                let all = cache.candidates();
                let metric = all.iter().map(Candidate::metric).fold(f64::NEG_INFINITY, f64::max);
                let params = all.iter().map(|c| c.objectives.unwrap().params).min().unwrap();
                Some(vec![Objectives { metric, params }])
            }
        }
    };

    let mut history = vec![pop.iter().map(|c| c.config.fingerprint()).collect()];
    for _ in 0..cfg.generations {
        let refs = references(&cache);
        let ranked = rank_population(&pop, refs.as_deref());
        let tournament = |rng: &mut Rng| {
            let a = rng.below(pop.len());
            let b = rng.below(pop.len());
            if better(&ranked[b], &ranked[a]) {
                b
            } else {
                a
            }
        };

        let mut offspring = Vec::with_capacity(cfg.pop_size);
        while offspring.len() < cfg.pop_size {
            let p1 = space.indices(&pop[tournament(rng)].config);
            let p2 = space.indices(&pop[tournament(rng)].config);
            let mut c1 = p1.clone();
            let mut c2 = p2.clone();
            for m in 0..c1.len() {
                if rng.bernoulli(0.5) {
                    c1[m] = p2[m];
                    c2[m] = p1[m];
                }
            }
            mutate(space, &mut c1, rng);
            mutate(space, &mut c2, rng);
            offspring.push(space.from_indices(&c1));
            offspring.push(space.from_indices(&c2));
        }

        let mut merged: BTreeMap<String, Candidate> = BTreeMap::new();
        for c in pop.drain(..) {
            merged.entry(c.config.fingerprint()).or_insert(c);
        }
        for c in offspring {
            let key = c.fingerprint();
            if !merged.contains_key(&key) {
                let cand = eval(c, &mut cache)?;
                merged.insert(key, cand);
            }
        }
        let merged: Vec<Candidate> = merged.into_values().collect();
        let refs = references(&cache);
        let ranked = rank_population(&merged, refs.as_deref());
        let mut order: Vec<usize> = (0..merged.len()).collect();
        order.sort_by(|&a, &b| {
            ranked[a]
                .rank
                .cmp(&ranked[b].rank)
                .then(ranked[b].diversity.total_cmp(&ranked[a].diversity))
                .then(a.cmp(&b))
        });
        order.truncate(cfg.pop_size);
        order.sort_unstable();
        pop = order.into_iter().map(|i| merged[i].clone()).collect();
        history.push(pop.iter().map(|c| c.config.fingerprint()).collect());
    }

    let fronts = nondominated_sort(&pop)?;
    let front = fronts[0].iter().map(|&i| pop[i].clone()).collect();
    let best = best_of(&cache.candidates());
    Ok(EvolutionResult {
        front,
        best,
        population: pop,
        history,
        evaluations: cache.invocations(),
    })
}

/// Orders candidates for reporting: metric descending, then params ascending.
pub fn rank_table(cands: &[Candidate]) -> Vec<Candidate> {
    let mut out: Vec<Candidate> = cands.iter().filter(|c| c.is_evaluated()).cloned().collect();
    out.sort_by(|a, b| {
        let (oa, ob) = (a.objectives.unwrap(), b.objectives.unwrap());
        match ob.metric.total_cmp(&oa.metric) {
            Ordering::Equal => oa
                .params
                .cmp(&ob.params)
                .then_with(|| a.config.fingerprint().cmp(&b.config.fingerprint())),
            o => o,
        }
    });
    out
}
