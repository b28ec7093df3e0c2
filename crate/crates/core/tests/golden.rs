mod common;

use std::path::PathBuf;

use polarbev::harness::train;
use polarbev::mbie::{mbie_forward, MbieConfig, MbieParams, MbiePyramid};
use polarbev::numcore::{seeded_rng, ParamStore, Tensor};
use polarbev::polargrid::CartesianGridSpec;
use polarbev::sampler::BevFeatureMap;
use rand::Rng;
use serde_json::Value;
use sha2::{Digest, Sha256};

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden.json")
}

/// Reads a golden value; with `POLARBEV_BLESS=1` the fixture is rewritten instead.
fn golden(key: &str, actual: Value) -> Value {
    let path = fixture_path();
    let mut doc: Value = std::fs::read_to_string(&path)
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok())
        .unwrap_or_else(|| Value::Object(Default::default()));
    if std::env::var("POLARBEV_BLESS").as_deref() == Ok("1") {
        doc[key] = actual.clone();
        std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap() + "\n").unwrap();
        return actual;
    }
    doc.get(key).cloned().unwrap_or_else(|| panic!("missing golden value {key}"))
}

fn mbie_output_digest() -> String {
    let c = 8;
    let mut rng = seeded_rng(11, 0);
    let maps = [8usize, 16]
        .iter()
        .map(|&n| {
            let t = Tensor::from_fn(&[n, n, c], |_| rng.gen_range(-1.0..1.0));
            BevFeatureMap::new(t, CartesianGridSpec::square(n, 4.0).unwrap()).unwrap()
        })
        .collect();
    let pyr = MbiePyramid::new(maps).unwrap();
    let mut ps = ParamStore::new();
    let cfg = MbieConfig { channels: c, heads: 2, points: 2, scales: 2, layers: 1 };
    let params = MbieParams::new(&mut ps, cfg, &mut seeded_rng(11, 1)).unwrap();
    let mut prng = seeded_rng(11, 2);
    for t in ps.tensors_mut() {
        for v in t.data_mut() {
            *v = prng.gen_range(-0.5..0.5);
        }
    }
    let out = mbie_forward(&pyr, 1, &params, &ps).unwrap();
    let mut h = Sha256::new();
    for v in out.flat() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[test]
fn mbie_output_matches_golden_digest() {
    let digest = mbie_output_digest();
    assert_eq!(mbie_output_digest(), digest);
    let expected = golden("mbie_output_sha256", Value::from(digest.clone()));
    assert_eq!(Value::from(digest), expected);
}

#[test]
fn tiny_training_final_loss_matches_golden() {
    let out = train(&common::tiny_config()).unwrap();
    let last = out.loss_curve.last().unwrap().loss;
    let expected = golden("tiny_final_loss", Value::from(last)).as_f64().unwrap();
    assert!((last - expected).abs() <= 1e-9, "{last} vs {expected}");
}
