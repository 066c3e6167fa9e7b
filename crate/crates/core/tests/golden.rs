//! Pins the tiny model's logits so numeric changes are deliberate.
//! Regenerate with `SHEARS_BLESS=1 cargo test -p shears-core --test golden`.

use std::path::PathBuf;

use shears::adapters::attach;
use shears::linalg::Rng;
use shears::model::{Batch, Model, ModelConfig};

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/tiny_logits.json")
}

fn compute() -> Vec<Vec<f32>> {
    let cfg = ModelConfig::tiny(42);
    let model = Model::from_config(&cfg).unwrap();
    let mut rng = Rng::new(43);
    let mut adapter = attach(&model, &model.module_names(), &[4, 2], 8.0, &mut rng).unwrap();
    for m in &mut adapter.modules {
        for v in m.b.as_mut_slice() {
            *v = rng.normal(0.1);
        }
    }
    let tokens = (0..4 * cfg.seq_len).map(|i| (i * 7 % cfg.vocab_size) as u32).collect();
    let batch = Batch::new(tokens, vec![0; 4], cfg.seq_len).unwrap();
    let plain = model.forward(&batch, None, None).unwrap();
    let adapted = model
        .forward(&batch, Some(&adapter), Some(&adapter.minimal_config()))
        .unwrap();
    vec![plain.as_slice().to_vec(), adapted.as_slice().to_vec()]
}

#[test]
fn tiny_logits_match_golden_file() {
    let got = compute();
    let path = golden_path();
    if std::env::var_os("SHEARS_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(&got).unwrap() + "\n").unwrap();
        return;
    }
    let text = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}; run with SHEARS_BLESS=1 once", path.display()));
    let want: Vec<Vec<f32>> = serde_json::from_str(&text).unwrap();
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        assert_eq!(g.len(), w.len());
        for (a, b) in g.iter().zip(w) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }
}
