//! Center-heatmap detection head: targets, losses, decoding and the
//! per-cell network that is valid at any BEV resolution.

use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::params::add_into;
use crate::numcore::{sigmoid, Mlp, MlpCache, ParamStore, Tensor};
use crate::polargrid::CartesianGridSpec;

pub const REG_CHANNELS: usize = 6;
pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;
pub const PRED_CLAMP: f64 = 1e-6;
pub const GAUSSIAN_OVERLAP: f64 = 0.7;
pub const HEATMAP_BIAS_INIT: f64 = -2.19;
pub const DEFAULT_SCORE_THRESH: f64 = 0.3;
pub const DEFAULT_MAX_DETS: usize = 64;

/// Ground-truth BEV box; `l` runs along the heading, `w` across it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
    pub class: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneGt {
    pub boxes: Vec<GtBox>,
}

impl SceneGt {
    pub fn validate(&self, half_extent: f64, classes: usize) -> Result<()> {
        for b in &self.boxes {
            if !(b.w > 0.0 && b.l > 0.0) || !(b.yaw > -PI && b.yaw <= PI) || b.class >= classes {
                return Err(Error::Contract(format!("invalid box {b:?}")));
            }
            if b.x.abs() >= half_extent || b.y.abs() >= half_extent {
                return Err(Error::Contract(format!("box center ({}, {}) outside the extent", b.x, b.y)));
            }
        }
        Ok(())
    }
}

/// Sigmoid heatmap `[H, W, K]` and regression `[H, W, 6]` laid out as
/// `(dx, dy, ln w, ln l, sin yaw, cos yaw)` with sub-cell offsets in cells.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub heatmap: Tensor,
    pub regression: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
    pub class: usize,
    pub score: f64,
}

/// CenterNet Gaussian radius for a `height × width` footprint in cells.
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let (h, w, o) = (height, width, min_overlap);
    let b1 = h + w;
    let c1 = w * h * (1.0 - o) / (1.0 + o);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - o) * w * h;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;
    let a3 = 4.0 * o;
    let b3 = -2.0 * o * (h + w);
    let c3 = (o - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Integer splat radius in cells (at least one).
pub fn box_radius(b: &GtBox, grid: &CartesianGridSpec) -> usize {
    let r = gaussian_radius(b.l / grid.cell_x(), b.w / grid.cell_y(), GAUSSIAN_OVERLAP);
    (r.max(0.0) as usize).max(1)
}

pub fn heatmap_targets(gt: &SceneGt, grid: &CartesianGridSpec, classes: usize) -> Tensor {
    let (h, w, k) = (grid.rows, grid.cols, classes);
    let mut t = vec![0.0f64; h * w * k];
    for b in &gt.boxes {
        let Some((row, col)) = grid.cell_of(b.x, b.y) else { continue };
        let r = box_radius(b, grid) as i64;
        let sigma = (2 * r + 1) as f64 / 6.0;
        for dr in -r..=r {
            for dc in -r..=r {
                let (rr, cc) = (row as i64 + dr, col as i64 + dc);
                if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                    continue;
                }
                let v = (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp();
                let cell = &mut t[(rr as usize * w + cc as usize) * k + b.class];
                *cell = cell.max(v);
            }
        }
    }
    Tensor::new(vec![h, w, k], t).expect("finite targets")
}

/// Regression target of one peak cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakTarget {
    pub cell: usize,
    pub reg: [f64; REG_CHANNELS],
}

/// Regression targets at each box's peak cell; a cell claimed by several
/// boxes keeps the first.
pub fn regression_targets(gt: &SceneGt, grid: &CartesianGridSpec) -> Vec<PeakTarget> {
    let mut out: Vec<PeakTarget> = Vec::with_capacity(gt.boxes.len());
    for b in &gt.boxes {
        let Some((row, col)) = grid.cell_of(b.x, b.y) else { continue };
        let cell = row * grid.cols + col;
        if out.iter().any(|p| p.cell == cell) {
            continue;
        }
        let (ox, oy) = grid.cell_origin(row, col);
        let reg = [
            (b.x - ox) / grid.cell_x(),
            (b.y - oy) / grid.cell_y(),
            b.w.ln(),
            b.l.ln(),
            b.yaw.sin(),
            b.yaw.cos(),
        ];
        out.push(PeakTarget { cell, reg });
    }
    out
}

/// Exact head output for a scene: target heatmap plus exact regression at peaks.
pub fn encode(gt: &SceneGt, grid: &CartesianGridSpec, classes: usize) -> HeadOutput {
    let heatmap = heatmap_targets(gt, grid, classes);
    let mut reg = vec![0.0; grid.cells() * REG_CHANNELS];
    for p in regression_targets(gt, grid) {
        reg[p.cell * REG_CHANNELS..(p.cell + 1) * REG_CHANNELS].copy_from_slice(&p.reg);
    }
    HeadOutput { heatmap, regression: Tensor::new(vec![grid.rows, grid.cols, REG_CHANNELS], reg).expect("finite") }
}

fn focal_terms(p: f64, t: f64) -> (f64, f64) {
    let p = p.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
    if t == 1.0 {
        let loss = -(1.0 - p).powi(FOCAL_ALPHA) * p.ln();
        let d = FOCAL_ALPHA as f64 * (1.0 - p).powi(FOCAL_ALPHA - 1) * p.ln() - (1.0 - p).powi(FOCAL_ALPHA) / p;
        (loss, d)
    } else {
        let m = (1.0 - t).powi(FOCAL_BETA);
        let loss = -m * p.powi(FOCAL_ALPHA) * (1.0 - p).ln();
        let d = -m * (FOCAL_ALPHA as f64 * p.powi(FOCAL_ALPHA - 1) * (1.0 - p).ln() - p.powi(FOCAL_ALPHA) / (1.0 - p));
        (loss, d)
    }
}

fn positives(target: &[f64]) -> f64 {
    target.iter().filter(|&&t| t == 1.0).count().max(1) as f64
}

/// Penalty-reduced focal loss on probabilities.
pub fn focal_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension("prediction and target heatmaps differ in shape".into()));
    }
    let n = positives(target.data());
    Ok(pred.data().iter().zip(target.data()).map(|(&p, &t)| focal_terms(p, t).0).sum::<f64>() / n)
}

/// Focal loss of `sigmoid(logits)` and its gradient with respect to the logits.
pub fn focal_loss_logits(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = positives(target);
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(target)
        .map(|(&z, &t)| {
            let p = sigmoid(z);
            let (l, d) = focal_terms(p, t);
            loss += l;
            if (PRED_CLAMP..=1.0 - PRED_CLAMP).contains(&p) {
                d * p * (1.0 - p) / n
            } else {
                0.0
            }
        })
        .collect();
    (loss / n, grad)
}

/// Mean absolute regression error over the six channels at peak cells,
/// with its gradient; zero for scenes without peaks.
pub fn regression_loss_grad(pred: &[f64], peaks: &[PeakTarget]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; pred.len()];
    if peaks.is_empty() {
        return (0.0, grad);
    }
    let norm = (peaks.len() * REG_CHANNELS) as f64;
    let mut loss = 0.0;
    for p in peaks {
        for ch in 0..REG_CHANNELS {
            let i = p.cell * REG_CHANNELS + ch;
            let e = pred[i] - p.reg[ch];
            loss += e.abs();
            grad[i] = if e > 0.0 {
                1.0 / norm
            } else if e < 0.0 {
                -1.0 / norm
            } else {
                0.0
            };
        }
    }
    (loss / norm, grad)
}

pub fn regression_loss(pred_reg: &Tensor, gt: &SceneGt, grid: &CartesianGridSpec) -> Result<f64> {
    if pred_reg.shape() != [grid.rows, grid.cols, REG_CHANNELS] {
        return Err(Error::Dimension("regression map does not match the grid".into()));
    }
    Ok(regression_loss_grad(pred_reg.data(), &regression_targets(gt, grid)).0)
}

/// Peak extraction by 3×3 local-maximum suppression per class, then the
/// top `max_dets` peaks scoring above `score_thresh`. Equal neighbors are
/// resolved in favor of the lower flat index.
pub fn decode(out: &HeadOutput, grid: &CartesianGridSpec, score_thresh: f64, max_dets: usize) -> Result<Vec<Detection>> {
    let s = out.heatmap.shape();
    if s.len() != 3 || s[0] != grid.rows || s[1] != grid.cols || out.regression.shape() != [grid.rows, grid.cols, REG_CHANNELS] {
        return Err(Error::Dimension("head output does not match the grid".into()));
    }
    let (h, w, k) = (s[0], s[1], s[2]);
    let heat = out.heatmap.data();
    let reg = out.regression.data();
    let mut peaks: Vec<(f64, usize, usize)> = Vec::new();
    for class in 0..k {
        for row in 0..h {
            for col in 0..w {
                let flat = row * w + col;
                let v = heat[flat * k + class];
                if v <= score_thresh {
                    continue;
                }
                let mut keep = true;
                'nb: for rr in row.saturating_sub(1)..(row + 2).min(h) {
                    for cc in col.saturating_sub(1)..(col + 2).min(w) {
                        let nf = rr * w + cc;
                        let nv = heat[nf * k + class];
                        if nf != flat && (nv > v || (nv == v && nf < flat)) {
                            keep = false;
                            break 'nb;
                        }
                    }
                }
                if keep {
                    peaks.push((v, flat, class));
                }
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    peaks.truncate(max_dets);
    Ok(peaks
        .into_iter()
        .map(|(score, flat, class)| {
            let r = &reg[flat * REG_CHANNELS..(flat + 1) * REG_CHANNELS];
            let (ox, oy) = grid.cell_origin(flat / w, flat % w);
            Detection {
                x: ox + r[0] * grid.cell_x(),
                y: oy + r[1] * grid.cell_y(),
                w: r[2].exp(),
                l: r[3].exp(),
                yaw: r[4].atan2(r[5]),
                class,
                score,
            }
        })
        .collect())
}

/// Two 1×1 branches over per-cell features. The raw offset outputs are
/// metric displacements from the cell center, so the same weights place
/// boxes consistently at every resolution.
#[derive(Debug, Clone)]
pub struct DetHead {
    pub heat: Mlp,
    pub reg: Mlp,
    pub classes: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Default)]
pub struct HeadCache {
    heat: MlpCache,
    reg: MlpCache,
}

impl DetHead {
    pub fn new(ps: &mut ParamStore, channels: usize, hidden: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let heat = Mlp::new(ps, "head.heatmap", channels, hidden, classes, false, rng);
        ps.get_mut(heat.fc2.b.expect("bias")).data_mut().fill(HEATMAP_BIAS_INIT);
        let reg = Mlp::new(ps, "head.regression", channels, hidden, REG_CHANNELS, false, rng);
        Self { heat, reg, classes, channels }
    }

    /// Heatmap logits and regression in cell units.
    pub fn forward_raw(&self, ps: &ParamStore, feats: &[f64], grid: &CartesianGridSpec) -> (Vec<f64>, Vec<f64>, HeadCache) {
        let (logits, heat) = self.heat.forward(ps, feats);
        let (mut reg_out, reg) = self.reg.forward(ps, feats);
        let (cx, cy) = (grid.cell_x(), grid.cell_y());
        for row in reg_out.chunks_exact_mut(REG_CHANNELS) {
            row[0] = 0.5 + row[0] / cx;
            row[1] = 0.5 + row[1] / cy;
        }
        (logits, reg_out, HeadCache { heat, reg })
    }

    /// Accumulates parameter gradients and returns the feature gradient.
    pub fn backward_raw(
        &self,
        ps: &mut ParamStore,
        feats: &[f64],
        cache: &HeadCache,
        grid: &CartesianGridSpec,
        dlogits: &[f64],
        dreg: &[f64],
    ) -> Vec<f64> {
        let mut draw = dreg.to_vec();
        for row in draw.chunks_exact_mut(REG_CHANNELS) {
            row[0] /= grid.cell_x();
            row[1] /= grid.cell_y();
        }
        let mut df = self.heat.backward(ps, feats, &cache.heat, dlogits);
        add_into(&mut df, &self.reg.backward(ps, feats, &cache.reg, &draw));
        df
    }

    pub fn output(&self, ps: &ParamStore, feats: &[f64], grid: &CartesianGridSpec) -> Result<HeadOutput> {
        let (logits, reg, _) = self.forward_raw(ps, feats, grid);
        let heat: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        Ok(HeadOutput {
            heatmap: Tensor::new(vec![grid.rows, grid.cols, self.classes], heat)?,
            regression: Tensor::new(vec![grid.rows, grid.cols, REG_CHANNELS], reg)?,
        })
    }
}

/// Detection loss `focal + λ·L1` and its gradient with respect to the
/// head's logits and cell-unit regression.
pub fn detection_loss(
    logits: &[f64],
    reg: &[f64],
    gt: &SceneGt,
    grid: &CartesianGridSpec,
    classes: usize,
    reg_weight: f64,
) -> (f64, f64, Vec<f64>, Vec<f64>) {
    let target = heatmap_targets(gt, grid, classes);
    let (focal, dlogits) = focal_loss_logits(logits, target.data());
    let (l1, mut dreg) = regression_loss_grad(reg, &regression_targets(gt, grid));
    dreg.iter_mut().for_each(|g| *g *= reg_weight);
    (focal, l1, dlogits, dreg)
}
