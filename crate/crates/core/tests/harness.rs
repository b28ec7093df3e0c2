mod common;

use common::tiny_config;
use polarbev::harness::{
    ablate, bench, eval_multires, train, train_and_eval, Checkpoint, ExperimentConfig, Model,
};

#[test]
fn zero_epoch_checkpoint_holds_initial_parameters() {
    let cfg = ExperimentConfig { epochs: 0, ..tiny_config() };
    let (ck, _) = train_and_eval(&cfg, &[16]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("init.ckpt");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap().model().unwrap();
    let fresh = Model::new(&cfg).unwrap();
    for (a, b) in loaded.ps.tensors().iter().zip(fresh.ps.tensors()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let (ck, _) = train_and_eval(&tiny_config(), &[16]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    ck.save(&a).unwrap();
    Checkpoint::load(&a).unwrap().save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn tampered_checkpoint_config_is_rejected() {
    let (ck, _) = train_and_eval(&ExperimentConfig { epochs: 0, ..tiny_config() }, &[16]).unwrap();
    let text = ck.to_json().replacen("\"seed\":3", "\"seed\":4", 1);
    assert_eq!(Checkpoint::from_json(&text).unwrap_err().kind(), "config");
}

#[test]
fn training_reduces_loss() {
    let cfg = ExperimentConfig { epochs: 6, ..tiny_config() };
    let out = train(&cfg).unwrap();
    let first = out.loss_curve.first().unwrap().loss;
    let last = out.loss_curve.last().unwrap().loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn native_evaluation_matches_end_of_training_metrics() {
    let cfg = tiny_config();
    let (ck, report) = train_and_eval(&cfg, &cfg.eval_resolutions).unwrap();
    let again = eval_multires(&ck, &[cfg.train_resolution], false).unwrap();
    assert_eq!(again.metrics[0], ck.native_metrics);
    let native = report.metrics.iter().find(|m| m.resolution == cfg.train_resolution).unwrap();
    assert_eq!(native, &ck.native_metrics);
}

#[test]
fn reports_embed_config_and_seed() {
    let cfg = tiny_config();
    let (_, report) = train_and_eval(&cfg, &[8, 24]).unwrap();
    assert_eq!(report.config, cfg);
    assert_eq!(report.seed, cfg.seed);
    assert_eq!(report.config_hash, cfg.hash());
    assert_eq!(report.metrics.iter().map(|m| m.resolution).collect::<Vec<_>>(), vec![8, 24]);
}

#[test]
fn resolutions_below_eight_are_rejected() {
    let (ck, _) = train_and_eval(&ExperimentConfig { epochs: 0, ..tiny_config() }, &[16]).unwrap();
    assert_eq!(eval_multires(&ck, &[16, 4], false).unwrap_err().kind(), "config");
    assert_eq!(bench(&ck, &[7]).unwrap_err().kind(), "config");
}

#[test]
fn baseline_mode_trains_the_cartesian_variant() {
    let (ck, polar) = train_and_eval(&tiny_config(), &[16]).unwrap();
    let base = eval_multires(&ck, &[8, 16, 24], true).unwrap();
    assert!(!base.config.use_cpbt);
    assert_eq!(base.data_hash, polar.data_hash);
    assert_eq!(base.metrics.len(), 3);
}

#[test]
fn ablation_rows_share_data() {
    let cfg = ExperimentConfig { epochs: 1, ..tiny_config() };
    let report = ablate(&cfg, &[]).unwrap();
    let names: Vec<_> = report.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["base", "+cpbt", "+cpbt+mbie"]);
    assert!(report.rows.iter().all(|r| r.data_hash == report.rows[0].data_hash));
    assert_eq!(report.warning().is_some(), !report.direction_holds);
}

#[test]
fn bench_single_resolution_gives_one_row() {
    let (ck, _) = train_and_eval(&ExperimentConfig { epochs: 0, ..tiny_config() }, &[16]).unwrap();
    let b = bench(&ck, &[16]).unwrap();
    assert_eq!(b.rows.len(), 1);
    assert_eq!(b.rows[0].frames, 3);
    assert!(b.rows[0].median_ms > 0.0 && b.rows[0].p90_ms >= b.rows[0].median_ms);
}

#[test]
fn divergent_training_aborts_with_numeric_error() {
    let cfg = ExperimentConfig { learning_rate: f64::MAX, epochs: 3, ..tiny_config() };
    let err = train(&cfg).err().expect("training must diverge");
    assert_eq!(err.kind(), "numeric");
    assert!(err.to_string().contains("epoch"));
}

#[test]
fn evaluation_is_repeatable() {
    let (ck, _) = train_and_eval(&tiny_config(), &[16]).unwrap();
    let a = eval_multires(&ck, &[16], false).unwrap().to_json();
    let b = eval_multires(&ck, &[16], false).unwrap().to_json();
    assert_eq!(a, b);
}
