use shears::adapters::{attach, ModuleAdapter};
use shears::linalg::Rng;
use shears::model::{Batch, Model, ModelConfig};
use shears::pruning::{sparsify_model, PruneMethod};
use shears::{merge, DenseMatrix, SubAdapterConfig, SuperAdapter};

fn random_batch(cfg: &ModelConfig, n: usize, rng: &mut Rng) -> Batch {
    let tokens = (0..n * cfg.seq_len)
        .map(|_| rng.below(cfg.vocab_size) as u32)
        .collect();
    let labels = (0..n).map(|_| rng.below(cfg.n_classes) as u32).collect();
    Batch::new(tokens, labels, cfg.seq_len).unwrap()
}

/// Gives every adapter entry a generic non-zero value, as after training.
fn randomize(adapter: &mut SuperAdapter, std: f32, rng: &mut Rng) {
    for m in &mut adapter.modules {
        for v in m.a.as_mut_slice().iter_mut().chain(m.b.as_mut_slice()) {
            *v = rng.normal(std);
        }
    }
}

fn desk_model(seed: u64) -> Model {
    Model::from_config(&ModelConfig {
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn max_abs_diff(a: &DenseMatrix, b: &DenseMatrix) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

/// `alpha / r · B[:, ..r] · A[..r, :]` by explicit triple loop in f64.
fn delta_oracle(m: &ModuleAdapter, alpha: f32, r: usize) -> Vec<f64> {
    let (out, inp) = (m.b.rows(), m.a.cols());
    let mut d = vec![0.0f64; out * inp];
    for i in 0..out {
        for j in 0..inp {
            let mut s = 0.0f64;
            for k in 0..r {
                s += m.b.get(i, k) as f64 * m.a.get(k, j) as f64;
            }
            d[i * inp + j] = s * alpha as f64 / r as f64;
        }
    }
    d
}

#[test]
fn fresh_adapter_is_bit_neutral_on_100_batches() {
    let model = desk_model(1);
    let cfg = model.config.clone();
    let adapter = attach(&model, &model.module_names(), &[32, 24, 16], 64.0, &mut Rng::new(2)).unwrap();
    let maximal = adapter.maximal_config();
    let mut rng = Rng::new(3);
    for _ in 0..100 {
        let n = 1 + rng.below(8);
        let batch = random_batch(&cfg, n, &mut rng);
        let plain = model.forward(&batch, None, None).unwrap();
        let adapted = model.forward(&batch, Some(&adapter), Some(&maximal)).unwrap();
        let same = plain
            .as_slice()
            .iter()
            .zip(adapted.as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "fresh adapter changed the forward output");
    }
}

#[test]
fn sliced_super_adapter_equals_standalone_adapter() {
    let model = desk_model(4);
    let cfg = model.config.clone();
    let targets = model.module_names();
    let mut sup = attach(&model, &targets, &[32, 24, 16], 64.0, &mut Rng::new(5)).unwrap();
    randomize(&mut sup, 0.05, &mut Rng::new(6));
    let batch = random_batch(&cfg, 6, &mut Rng::new(7));
    for r in [32, 24, 16] {
        let standalone = SuperAdapter {
            modules: sup
                .modules
                .iter()
                .map(|m| {
                    ModuleAdapter::from_parts(m.name.clone(), m.b_slice(r), m.a_slice(r), vec![r])
                        .unwrap()
                })
                .collect(),
            alpha: sup.alpha,
            scaling: sup.scaling,
            trained: true,
        };
        let active = sup.uniform_config(r).unwrap();
        let via_super = model.forward(&batch, Some(&sup), Some(&active)).unwrap();
        let via_alone = model
            .forward(&batch, Some(&standalone), Some(&standalone.maximal_config()))
            .unwrap();
        let diff = max_abs_diff(&via_super, &via_alone);
        assert!(diff <= 1e-6, "rank {r}: forward differs by {diff}");
        for m in &sup.modules {
            let got = sup.delta(&m.name, r).unwrap();
            let alone = standalone.delta(&m.name, r).unwrap();
            assert!(max_abs_diff(&got, &alone) <= 1e-6);
            let want = delta_oracle(m, sup.alpha, r);
            for (g, w) in got.as_slice().iter().zip(&want) {
                assert!((*g as f64 - w).abs() <= 1e-6, "{} rank {r}", m.name);
            }
        }
    }
}

#[test]
fn smaller_slices_are_prefixes_of_larger_ones() {
    let model = desk_model(8);
    let mut sup = attach(&model, &model.module_names(), &[32, 24, 16], 64.0, &mut Rng::new(1)).unwrap();
    randomize(&mut sup, 0.1, &mut Rng::new(2));
    for m in &sup.modules {
        let (a32, a16) = (m.a_slice(32), m.a_slice(16));
        let (b32, b16) = (m.b_slice(32), m.b_slice(16));
        for k in 0..16 {
            assert_eq!(a16.row(k), a32.row(k));
            for i in 0..m.b.rows() {
                assert_eq!(b16.get(i, k), b32.get(i, k));
            }
        }
    }
}

#[test]
fn merge_matches_unmerged_and_destroys_sparsity() {
    let model = desk_model(9);
    let cfg = model.config.clone();
    let mut rng = Rng::new(10);
    let calib = vec![random_batch(&cfg, 32, &mut rng)];
    let targets = model.module_names();
    let (pruned, report) = sparsify_model(&model, &calib, &targets, 0.5, PruneMethod::Wanda).unwrap();
    assert_eq!(report.global_sparsity, 0.5);
    let mut adapter = attach(&pruned, &targets, &[32, 24, 16], 64.0, &mut rng).unwrap();
    randomize(&mut adapter, 0.05, &mut rng);
    let configs: Vec<SubAdapterConfig> = vec![
        adapter.maximal_config(),
        adapter.minimal_config(),
        adapter.uniform_config(24).unwrap(),
    ];
    for c in &configs {
        let (merged, mreport) = merge(&pruned, &adapter, c).unwrap();
        for m in &mreport.modules {
            assert!(m.sparsity < 0.01, "{} keeps sparsity {}", m.name, m.sparsity);
        }
        for _ in 0..5 {
            let batch = random_batch(&cfg, 4, &mut rng);
            let unmerged = pruned.forward(&batch, Some(&adapter), Some(c)).unwrap();
            let folded = merged.forward(&batch, None, None).unwrap();
            let diff = max_abs_diff(&unmerged, &folded);
            assert!(diff <= 1e-4, "merged forward differs by {diff}");
        }
    }
    pruned.verify_frozen().unwrap();
}
