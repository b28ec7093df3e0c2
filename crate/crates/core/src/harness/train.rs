use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::det_head::{decode, detection_loss, SceneGt};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Frame, MetricsReport};
use crate::numcore::{seeded_rng, ParamStore};
use crate::synthscene::{gen_scene, render_views};

use super::config::ExperimentConfig;
use super::model::{patchify_views, Model, Plan};

/// Rendered, patchified scenes ready for the network.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub indices: Vec<u64>,
    pub scenes: Vec<SceneGt>,
    pub patches: Vec<Vec<f64>>,
    /// Scene indices whose generation failed.
    pub skipped: Vec<u64>,
}

impl Dataset {
    pub fn build(cfg: &ExperimentConfig, model: &Model, start: u64, count: usize) -> Result<Self> {
        let spec = cfg.scene_spec();
        let rig = cfg.rig();
        let mut ds = Dataset { indices: Vec::new(), scenes: Vec::new(), patches: Vec::new(), skipped: Vec::new() };
        for index in start..start + count as u64 {
            match gen_scene(&spec, index) {
                Ok(scene) => {
                    ds.patches.push(patchify_views(&model.net.encoder, &render_views(&scene, &rig)));
                    ds.scenes.push(scene);
                    ds.indices.push(index);
                }
                Err(Error::Generation(_)) => ds.skipped.push(index),
                Err(e) => return Err(e),
            }
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

/// Hex SHA-256 over the ground truth of the given datasets.
pub fn data_hash(sets: &[&Dataset]) -> String {
    let mut h = Sha256::new();
    for ds in sets {
        h.update(serde_json::to_vec(&(&ds.indices, &ds.scenes)).expect("scenes serialize"));
    }
    hex::encode(h.finalize())
}

/// Adaptive-moment optimizer over every tensor of a parameter store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(ps: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || ps.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self { lr, beta1, beta2, eps, step: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update using the stored gradients multiplied by `scale`.
    pub fn step(&mut self, ps: &mut ParamStore, scale: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, t) in ps.tensors_mut().iter_mut().enumerate() {
            let (data, grad) = t.data_mut_and_grad();
            let Some(grad) = grad else { continue };
            for i in 0..data.len() {
                let g = grad[i] * scale;
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                data[i] -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Forward, loss and backward of one scene; returns `(total, focal, l1)`.
pub fn scene_step(model: &mut Model, plan: &Plan, patches: &[f64], scene: &SceneGt) -> (f64, f64, f64) {
    let cache = model.forward(patches, plan);
    let (focal, l1, dl, dr) =
        detection_loss(&cache.logits, &cache.reg, scene, &plan.target, model.cfg.classes(), model.cfg.reg_weight);
    model.backward(patches, plan, &cache, &dl, &dr);
    (focal + model.cfg.reg_weight * l1, focal, l1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
    pub focal: f64,
    pub l1: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub loss_curve: Vec<EpochLoss>,
    pub native_metrics: MetricsReport,
    pub data_hash: String,
    pub skipped: Vec<u64>,
    pub eval_set: Dataset,
}

/// Scene indices of the evaluation split follow the training split.
pub fn eval_start(cfg: &ExperimentConfig) -> u64 {
    cfg.train_scenes as u64
}

pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let mut model = Model::new(cfg)?;
    let plan = model.plan(cfg.train_resolution)?;
    let train_set = Dataset::build(cfg, &model, 0, cfg.train_scenes)?;
    let eval_set = Dataset::build(cfg, &model, eval_start(cfg), cfg.eval_scenes)?;
    let mut adam = Adam::new(&model.ps, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seeded_rng(cfg.seed, 1 + epoch as u64));
        let (mut sum, mut sum_f, mut sum_l) = (0.0, 0.0, 0.0);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            model.ps.zero_grads();
            for &i in batch {
                let (loss, f, l) = scene_step(&mut model, &plan, &train_set.patches[i], &train_set.scenes[i]);
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss {loss} at epoch {epoch}, step {step}, scene {}",
                        train_set.indices[i]
                    )));
                }
                sum += loss;
                sum_f += f;
                sum_l += l;
            }
            adam.step(&mut model.ps, 1.0 / batch.len() as f64);
        }
        let n = train_set.len().max(1) as f64;
        loss_curve.push(EpochLoss { epoch, loss: sum / n, focal: sum_f / n, l1: sum_l / n });
    }
    model.ps.zero_grads();
    let native_metrics = evaluate_model(&model, &eval_set, cfg.train_resolution)?;
    let data_hash = data_hash(&[&train_set, &eval_set]);
    let mut skipped = train_set.skipped.clone();
    skipped.extend(&eval_set.skipped);
    Ok(TrainOutcome { model, loss_curve, native_metrics, data_hash, skipped, eval_set })
}

/// Decodes and scores every scene of `set` at BEV resolution `res`.
pub fn evaluate_model(model: &Model, set: &Dataset, res: usize) -> Result<MetricsReport> {
    let plan = model.plan(res)?;
    let mut frames = Vec::with_capacity(set.len());
    for (patches, scene) in set.patches.iter().zip(&set.scenes) {
        let cache = model.forward(patches, &plan);
        let out = model.head_output(&cache, &plan)?;
        let detections = decode(&out, &plan.target, model.cfg.score_thresh, model.cfg.max_dets)?;
        frames.push(Frame { detections, gts: scene.boxes.clone() });
    }
    evaluate(&frames, model.cfg.classes(), res, model.cfg.half_extent)
}
