use std::collections::BTreeSet;

use shears::linalg::Rng;
use shears::search::{
    evolutionary_search, heuristic_config, hill_climb, nondominated_sort, Candidate,
    EvolutionConfig, Objectives, SearchSpace,
};
use shears::{Result, SubAdapterConfig};

fn dominates(a: (f64, u64), b: (f64, u64)) -> bool {
    a.0 >= b.0 && a.1 <= b.1 && (a.0 > b.0 || a.1 < b.1)
}

/// Repeatedly peels off the members no remaining member dominates.
fn brute_force_fronts(points: &[(f64, u64)]) -> Vec<BTreeSet<usize>> {
    let mut left: BTreeSet<usize> = (0..points.len()).collect();
    let mut fronts = Vec::new();
    while !left.is_empty() {
        let front: BTreeSet<usize> = left
            .iter()
            .copied()
            .filter(|&i| !left.iter().any(|&j| dominates(points[j], points[i])))
            .collect();
        left.retain(|i| !front.contains(i));
        fronts.push(front);
    }
    fronts
}

#[test]
fn sort_matches_brute_force_on_1000_sets() {
    let mut rng = Rng::new(2024);
    for _ in 0..1000 {
        let n = 1 + rng.below(40);
        // small grids force ties and duplicates
        let grid = 2 + rng.below(10);
        let points: Vec<(f64, u64)> = (0..n)
            .map(|_| (rng.below(grid) as f64 / 4.0, rng.below(grid) as u64))
            .collect();
        let cands: Vec<Candidate> = points
            .iter()
            .enumerate()
            .map(|(i, &(metric, params))| {
                let mut c = SubAdapterConfig::new();
                c.insert(format!("m{i}"), 1);
                Candidate::evaluated(c, Objectives { metric, params })
            })
            .collect();
        let got: Vec<BTreeSet<usize>> = nondominated_sort(&cands)
            .unwrap()
            .into_iter()
            .map(|f| f.into_iter().collect())
            .collect();
        assert_eq!(got, brute_force_fronts(&points), "points {points:?}");
    }
}

fn space3() -> SearchSpace {
    SearchSpace::uniform(&["m0", "m1", "m2"], &[32, 24, 16]).unwrap()
}

fn true_pareto(space: &SearchSpace, f: &dyn Fn(&SubAdapterConfig) -> Objectives) -> BTreeSet<(u64, u64)> {
    let objs: Vec<Objectives> = space.enumerate().iter().map(f).collect();
    let pts: Vec<(f64, u64)> = objs.iter().map(|o| (o.metric, o.params)).collect();
    brute_force_fronts(&pts)[0]
        .iter()
        .map(|&i| (pts[i].0.to_bits(), pts[i].1))
        .collect()
}

fn landscapes() -> Vec<(&'static str, Box<dyn Fn(&SubAdapterConfig) -> Objectives>)> {
    vec![
        (
            "sum of ranks",
            Box::new(|c: &SubAdapterConfig| {
                let s: usize = c.iter().map(|(_, r)| r).sum();
                Objectives {
                    metric: s as f64,
                    params: s as u64,
                }
            }),
        ),
        (
            "weighted trade-off",
            Box::new(|c: &SubAdapterConfig| {
                let w = |m: &str| match m {
                    "m0" => 3.0,
                    "m1" => 1.0,
                    _ => 0.25,
                };
                let size = |m: &str| match m {
                    "m0" => 5u64,
                    "m1" => 2,
                    _ => 3,
                };
                let metric: f64 = c.iter().map(|(m, r)| w(m) * (r as f64).sqrt()).sum();
                let params: u64 = c.iter().map(|(m, r)| size(m) * r as u64).sum();
                Objectives { metric, params }
            }),
        ),
    ]
}

const GENS: usize = 16;

#[test]
fn evolution_recovers_exact_pareto_set_for_10_seeds() {
    let space = space3();
    for (name, f) in landscapes() {
        let want = true_pareto(&space, f.as_ref());
        let eval = |c: &SubAdapterConfig| -> Result<Objectives> { Ok(f(c)) };
        for seed in 0..10 {
            let cfg = EvolutionConfig {
                pop_size: 12,
                generations: GENS,
                reference_points: None,
            };
            let r = evolutionary_search(&eval, &space, &cfg, &mut Rng::new(seed)).unwrap();
            let got: BTreeSet<(u64, u64)> = r
                .front
                .iter()
                .map(|c| {
                    let o = c.objectives.unwrap();
                    (o.metric.to_bits(), o.params)
                })
                .collect();
            assert_eq!(got, want, "{name}, seed {seed}");
            for c in &r.population {
                assert!(space.contains(&c.config));
            }
        }
    }
}

#[test]
fn reference_point_skews_survivors_to_high_metric() {
    let space = SearchSpace::uniform(&["a", "b", "c", "d", "e"], &[32, 24, 16]).unwrap();
    // saturating accuracy: most of the gain comes from the first ranks
    let eval = |c: &SubAdapterConfig| -> Result<Objectives> {
        let metric = c.iter().map(|(_, r)| 1.0 - (-(r as f64) / 10.0).exp()).sum::<f64>() / 5.0;
        let params = c.iter().map(|(_, r)| r as u64 * 100).sum();
        Ok(Objectives { metric, params })
    };
    let top = eval(&space.maximal()).unwrap().metric;
    let mut wins = 0;
    for seed in 0..10 {
        let mean = |refs: Option<Vec<Objectives>>| {
            let cfg = EvolutionConfig {
                pop_size: 8,
                generations: 6,
                reference_points: refs,
            };
            let r = evolutionary_search(&eval, &space, &cfg, &mut Rng::new(seed)).unwrap();
            r.population.iter().map(|c| c.metric()).sum::<f64>() / r.population.len() as f64
        };
        let plain = mean(None);
        let skewed = mean(Some(vec![Objectives {
            metric: top,
            params: 0,
        }]));
        if skewed > plain {
            wins += 1;
        }
    }
    assert!(wins >= 8, "reference point raised the mean metric in only {wins}/10 runs");
}

#[test]
fn searches_never_fall_below_the_heuristic() {
    let space = SearchSpace::uniform(&["a", "b", "c", "d"], &[32, 24, 16]).unwrap();
    let mut rng = Rng::new(77);
    for _ in 0..20 {
        // random landscape: independent value per config
        let table: Vec<f64> = (0..81).map(|_| rng.uniform()).collect();
        let configs = space.enumerate();
        let eval = |c: &SubAdapterConfig| -> Result<Objectives> {
            let i = configs.iter().position(|x| x == c).unwrap();
            Ok(Objectives {
                metric: table[i],
                params: c.iter().map(|(_, r)| r as u64).sum(),
            })
        };
        let h = heuristic_config(&space);
        let hm = eval(&h).unwrap().metric;
        let hc = hill_climb(&eval, &h, &space, 30).unwrap();
        assert!(hc.best.metric() >= hm);
        let ev = evolutionary_search(&eval, &space, &EvolutionConfig::default(), &mut rng).unwrap();
        assert!(ev.best.metric() >= hm);
        assert!(ev.best.metric() >= eval(&space.maximal()).unwrap().metric);
    }
}
