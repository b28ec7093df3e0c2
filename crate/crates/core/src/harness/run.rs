use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::det_head::decode;
use crate::error::{Error, Result};
use crate::metrics::{to_csv, MetricsReport};
use crate::numcore::ParamStore;
use crate::synthscene::{gen_scene, render_views};

use super::config::ExperimentConfig;
use super::model::{patchify_views, Model};
use super::train::{evaluate_model, train, Dataset, EpochLoss, TrainOutcome};

pub fn version() -> String {
    format!("polarbev-v{}", env!("CARGO_PKG_VERSION"))
}

/// Trained parameters with the configuration that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub data_hash: String,
    pub loss_curve: Vec<EpochLoss>,
    pub native_metrics: MetricsReport,
    pub skipped_scenes: Vec<u64>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_outcome(outcome: &TrainOutcome) -> Self {
        let cfg = &outcome.model.cfg;
        Self {
            version: version(),
            config: cfg.clone(),
            config_hash: cfg.hash(),
            data_hash: outcome.data_hash.clone(),
            loss_curve: outcome.loss_curve.clone(),
            native_metrics: outcome.native_metrics.clone(),
            skipped_scenes: outcome.skipped.clone(),
            params: outcome.model.ps.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        ck.config.validate()?;
        if ck.config.hash() != ck.config_hash {
            return Err(Error::Config("checkpoint config hash does not match its config".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config)?;
        model.ps.load_values(&self.params)?;
        Ok(model)
    }
}

/// Metrics of one trained variant at every requested resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub variant: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub data_hash: String,
    pub skipped_scenes: Vec<u64>,
    pub loss_curve: Vec<EpochLoss>,
    pub metrics: Vec<MetricsReport>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn csv(&self) -> String {
        to_csv(&self.metrics)
    }

    /// Relative mAP drop at `res` versus the training resolution.
    pub fn relative_drop(&self, res: usize) -> Option<f64> {
        let native = self.metrics.iter().find(|m| m.resolution == self.config.train_resolution)?.mAP;
        let at = self.metrics.iter().find(|m| m.resolution == res)?.mAP;
        (native > 0.0).then(|| (native - at) / native)
    }
}

fn eval_set(cfg: &ExperimentConfig, model: &Model) -> Result<Dataset> {
    Dataset::build(cfg, model, super::train::eval_start(cfg), cfg.eval_scenes)
}

fn check_resolutions(resolutions: &[usize]) -> Result<()> {
    if resolutions.is_empty() {
        return Err(Error::Config("no resolutions requested".into()));
    }
    resolutions.iter().try_for_each(|&r| ExperimentConfig::check_resolution(r))
}

fn report_for(model: &Model, ck: &Checkpoint, set: &Dataset, resolutions: &[usize]) -> Result<RunReport> {
    let metrics = resolutions.iter().map(|&r| evaluate_model(model, set, r)).collect::<Result<Vec<_>>>()?;
    Ok(RunReport {
        version: version(),
        variant: ck.config.variant().to_string(),
        seed: ck.config.seed,
        config: ck.config.clone(),
        config_hash: ck.config_hash.clone(),
        data_hash: ck.data_hash.clone(),
        skipped_scenes: ck.skipped_scenes.clone(),
        loss_curve: ck.loss_curve.clone(),
        metrics,
    })
}

/// Trains `cfg` and evaluates the result at `resolutions`.
pub fn train_and_eval(cfg: &ExperimentConfig, resolutions: &[usize]) -> Result<(Checkpoint, RunReport)> {
    check_resolutions(resolutions)?;
    let outcome = train(cfg)?;
    let ck = Checkpoint::from_outcome(&outcome);
    let report = report_for(&outcome.model, &ck, &outcome.eval_set, resolutions)?;
    Ok((ck, report))
}

/// The Cartesian-interpolation counterpart of a configuration: identical
/// data, encoder, interaction encoder and head, with the polar stage
/// replaced by the fixed-grid lifting.
pub fn baseline_config(cfg: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig { use_cpbt: false, train_resolution: cfg.baseline_grid, ..cfg.clone() }
}

/// Evaluates a checkpoint at each resolution; in baseline mode the
/// Cartesian-interpolation variant of its configuration is trained on the
/// same data and evaluated instead.
pub fn eval_multires(ck: &Checkpoint, resolutions: &[usize], baseline: bool) -> Result<RunReport> {
    check_resolutions(resolutions)?;
    if baseline {
        return Ok(train_and_eval(&baseline_config(&ck.config), resolutions)?.1);
    }
    let model = ck.model()?;
    let set = eval_set(&ck.config, &model)?;
    report_for(&model, ck, &set, resolutions)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct AblationRow {
    pub variant: String,
    pub use_cpbt: bool,
    pub use_mbie: bool,
    pub data_hash: String,
    pub mAP: f64,
    pub NDS3: f64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub version: String,
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
    /// Whether mAP is non-decreasing down the rows.
    pub direction_holds: bool,
}

impl AblationReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("variant,use_cpbt,use_mbie,mAP,NDS3\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.variant, r.use_cpbt, r.use_mbie, r.mAP, r.NDS3));
        }
        s
    }

    /// Warning payload when the expected ordering is violated.
    pub fn warning(&self) -> Option<serde_json::Value> {
        (!self.direction_holds).then(|| {
            serde_json::json!({
                "warning": "ablation mAP ordering base <= +cpbt <= +cpbt+mbie does not hold",
                "mAP": self.rows.iter().map(|r| (r.variant.clone(), r.mAP)).collect::<Vec<_>>(),
            })
        })
    }
}

pub const ABLATION_ROWS: [(bool, bool); 3] = [(false, false), (true, false), (true, true)];

/// Trains the three module configurations on identical data and reports
/// each at its training resolution. `trained` may supply an already
/// trained row (matched by its flags) to avoid retraining it.
pub fn ablate(cfg: &ExperimentConfig, trained: &[(ExperimentConfig, RunReport)]) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(3);
    for (cpbt, mbie) in ABLATION_ROWS {
        let mut c = ExperimentConfig { use_cpbt: cpbt, use_mbie: mbie, ..cfg.clone() };
        if !cpbt {
            c.train_resolution = c.baseline_grid;
        }
        let report = match trained.iter().find(|(tc, _)| *tc == c) {
            Some((_, r)) => r.clone(),
            None => train_and_eval(&c, &[c.train_resolution])?.1,
        };
        let metrics = report
            .metrics
            .iter()
            .find(|m| m.resolution == c.train_resolution)
            .cloned()
            .ok_or_else(|| Error::Contract("ablation row lacks native-resolution metrics".into()))?;
        rows.push(AblationRow {
            variant: c.variant().to_string(),
            use_cpbt: cpbt,
            use_mbie: mbie,
            data_hash: report.data_hash.clone(),
            mAP: metrics.mAP,
            NDS3: metrics.NDS3,
            metrics,
        });
    }
    let direction_holds = rows.windows(2).all(|w| w[0].mAP <= w[1].mAP);
    Ok(AblationReport { version: version(), config_hash: cfg.hash(), rows, direction_holds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub resolution: usize,
    pub warmup: usize,
    pub frames: usize,
    pub median_ms: f64,
    pub p90_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub version: String,
    pub config_hash: String,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("resolution,frames,median_ms,p90_ms\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.resolution, r.frames, r.median_ms, r.p90_ms));
        }
        s
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank]
}

/// Wall-clock latency of full single-frame inference (images to decoded
/// boxes) at each resolution.
pub fn bench(ck: &Checkpoint, resolutions: &[usize]) -> Result<BenchReport> {
    check_resolutions(resolutions)?;
    let cfg = &ck.config;
    let model = ck.model()?;
    let scene = gen_scene(&cfg.scene_spec(), super::train::eval_start(cfg))?;
    let patches = patchify_views(&model.net.encoder, &render_views(&scene, &cfg.rig()));
    let mut rows = Vec::with_capacity(resolutions.len());
    for &res in resolutions {
        let plan = model.plan(res)?;
        let run = || -> Result<usize> {
            let cache = model.forward(&patches, &plan);
            let out = model.head_output(&cache, &plan)?;
            Ok(decode(&out, &plan.target, cfg.score_thresh, cfg.max_dets)?.len())
        };
        for _ in 0..cfg.bench_warmup {
            run()?;
        }
        let mut times = Vec::with_capacity(cfg.bench_frames);
        for _ in 0..cfg.bench_frames {
            let t = Instant::now();
            std::hint::black_box(run()?);
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            resolution: res,
            warmup: cfg.bench_warmup,
            frames: cfg.bench_frames,
            median_ms: percentile(&times, 0.5),
            p90_ms: percentile(&times, 0.9),
        });
    }
    Ok(BenchReport { version: version(), config_hash: ck.config_hash.clone(), rows })
}
