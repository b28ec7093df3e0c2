//! Center-distance matched AP, true-positive errors and the NDS composite.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::det_head::{Detection, GtBox};
use crate::error::{Error, Result};

/// Reference distance thresholds (meters) at a 51.2 m half extent.
pub const REFERENCE_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
pub const REFERENCE_EXTENT: f64 = 51.2;
pub const REFERENCE_TP_THRESHOLD: f64 = 2.0;
pub const AP_POINTS: usize = 101;

/// Distance thresholds scaled to a desk extent.
pub fn scaled_thresholds(half_extent: f64) -> Vec<f64> {
    REFERENCE_THRESHOLDS.iter().map(|t| t * half_extent / REFERENCE_EXTENT).collect()
}

pub fn scaled_tp_threshold(half_extent: f64) -> f64 {
    REFERENCE_TP_THRESHOLD * half_extent / REFERENCE_EXTENT
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    /// `(detection index, gt index)` pairs.
    pub matches: Vec<(usize, usize)>,
    pub false_positives: Vec<usize>,
    pub false_negatives: Vec<usize>,
}

fn center_distance(d: &Detection, g: &GtBox) -> f64 {
    (d.x - g.x).hypot(d.y - g.y)
}

/// Greedy one-to-one matching: each detection (in the given,
/// score-descending order) takes the nearest unmatched same-class GT
/// strictly closer than `d_thresh`.
pub fn match_detections(dets: &[Detection], gts: &[GtBox], d_thresh: f64) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut out = MatchResult::default();
    for (di, d) in dets.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || g.class != d.class {
                continue;
            }
            let dist = center_distance(d, g);
            if dist < d_thresh && best.map_or(true, |(b, _)| dist < b) {
                best = Some((dist, gi));
            }
        }
        match best {
            Some((_, gi)) => {
                taken[gi] = true;
                out.matches.push((di, gi));
            }
            None => out.false_positives.push(di),
        }
    }
    out.false_negatives = (0..gts.len()).filter(|&g| !taken[g]).collect();
    out
}

/// One evaluated frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub detections: Vec<Detection>,
    pub gts: Vec<GtBox>,
}

/// Detections of one class across frames in global score order; ties are
/// broken by frame and then by box content, never by list position.
fn ranked(frames: &[Frame], class: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(f, fr)| fr.detections.iter().enumerate().filter(|(_, d)| d.class == class).map(move |(i, _)| (f, i)))
        .collect();
    order.sort_by(|a, b| {
        let (da, db) = (&frames[a.0].detections[a.1], &frames[b.0].detections[b.1]);
        db.score
            .total_cmp(&da.score)
            .then(a.0.cmp(&b.0))
            .then(da.x.total_cmp(&db.x))
            .then(da.y.total_cmp(&db.y))
            .then(da.w.total_cmp(&db.w))
            .then(da.l.total_cmp(&db.l))
            .then(da.yaw.total_cmp(&db.yaw))
    });
    order
}

/// TP flags of the ranked detections of `class` at one threshold, plus the
/// matched `(detection, gt)` pairs.
fn match_class(frames: &[Frame], class: usize, d_thresh: f64) -> (Vec<bool>, Vec<(Detection, GtBox)>) {
    let mut taken: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.gts.len()]).collect();
    let mut flags = Vec::new();
    let mut pairs = Vec::new();
    for (f, i) in ranked(frames, class) {
        let d = &frames[f].detections[i];
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in frames[f].gts.iter().enumerate() {
            if taken[f][gi] || g.class != class {
                continue;
            }
            let dist = center_distance(d, g);
            if dist < d_thresh && best.map_or(true, |(b, _)| dist < b) {
                best = Some((dist, gi));
            }
        }
        if let Some((_, gi)) = best {
            taken[f][gi] = true;
            pairs.push((*d, frames[f].gts[gi]));
        }
        flags.push(best.is_some());
    }
    (flags, pairs)
}

/// 101-point interpolated AP from score-ranked TP flags.
pub fn interpolated_ap(tp_flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(tp_flags.len());
    for (k, &is_tp) in tp_flags.iter().enumerate() {
        tp += is_tp as usize;
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut best_from = vec![0.0f64; curve.len() + 1];
    for k in (0..curve.len()).rev() {
        best_from[k] = best_from[k + 1].max(curve[k].1);
    }
    let mut sum = 0.0;
    for i in 0..AP_POINTS {
        let r = i as f64 / (AP_POINTS - 1) as f64;
        if let Some(k) = curve.iter().position(|&(rec, _)| rec >= r - 1e-12) {
            sum += best_from[k];
        }
    }
    sum / AP_POINTS as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    pub num_gt: usize,
    /// Per-threshold AP; empty when the class has no ground truth.
    pub ap_per_threshold: Vec<f64>,
    /// Mean over thresholds; `None` (excluded from mAP) without ground truth.
    pub ap: Option<f64>,
}

fn count_gt(frames: &[Frame], class: usize) -> usize {
    frames.iter().map(|f| f.gts.iter().filter(|g| g.class == class).count()).sum()
}

/// Per-class AP (mean over thresholds) and mAP over classes with ground truth.
pub fn average_precision(frames: &[Frame], classes: usize, thresholds: &[f64]) -> Result<(Vec<ClassAp>, f64)> {
    if thresholds.is_empty() {
        return Err(Error::Config("at least one matching threshold is required".into()));
    }
    let mut per_class = Vec::with_capacity(classes);
    for class in 0..classes {
        let num_gt = count_gt(frames, class);
        if num_gt == 0 {
            per_class.push(ClassAp { class, num_gt, ap_per_threshold: Vec::new(), ap: None });
            continue;
        }
        let aps: Vec<f64> = thresholds.iter().map(|&t| interpolated_ap(&match_class(frames, class, t).0, num_gt)).collect();
        let ap = aps.iter().sum::<f64>() / aps.len() as f64;
        per_class.push(ClassAp { class, num_gt, ap_per_threshold: aps, ap: Some(ap) });
    }
    let valid: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let map = if valid.is_empty() { 0.0 } else { valid.iter().sum::<f64>() / valid.len() as f64 };
    Ok((per_class, map))
}

/// `1 − IoU` of two boxes sharing center and heading.
pub fn scale_error(d: &Detection, g: &GtBox) -> f64 {
    let inter = d.w.min(g.w) * d.l.min(g.l);
    1.0 - inter / (d.w * d.l + g.w * g.l - inter)
}

/// Smallest absolute heading difference, in `[0, π]`.
pub fn orientation_error(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Mean (ATE, ASE, AOE) over matched pairs; all 1.0 without matches.
pub fn tp_errors(pairs: &[(Detection, GtBox)]) -> (f64, f64, f64) {
    if pairs.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    let n = pairs.len() as f64;
    let ate = pairs.iter().map(|(d, g)| center_distance(d, g)).sum::<f64>() / n;
    let ase = pairs.iter().map(|(d, g)| scale_error(d, g)).sum::<f64>() / n;
    let aoe = pairs.iter().map(|(d, g)| orientation_error(d.yaw, g.yaw)).sum::<f64>() / n;
    (ate, ase, aoe)
}

/// Composite score `(5·mAP + Σ(1 − min(1, e))) / (5 + n)` over `n` TP errors;
/// with five errors this is the standard nuScenes detection score.
pub fn nds(map: f64, tp_errors: &[f64]) -> f64 {
    let tp: f64 = tp_errors.iter().map(|&e| 1.0 - e.min(1.0)).sum();
    (5.0 * map + tp) / (5.0 + tp_errors.len() as f64)
}

pub const AP_NOTE: &str = "AP: 101-point interpolated precision over recall, no recall or precision floor; \
NDS3 uses mATE, mASE, mAOE only; NDS5 needs externally supplied velocity and attribute errors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct MetricsReport {
    pub resolution: usize,
    pub mAP: f64,
    pub mATE: f64,
    pub mASE: f64,
    pub mAOE: f64,
    pub NDS3: f64,
    pub NDS5: Option<f64>,
    pub per_class: Vec<ClassAp>,
    pub thresholds: Vec<f64>,
    pub tp_threshold: f64,
    pub note: String,
}

/// Full evaluation of a set of frames at one BEV resolution.
pub fn evaluate(frames: &[Frame], classes: usize, resolution: usize, half_extent: f64) -> Result<MetricsReport> {
    let thresholds = scaled_thresholds(half_extent);
    let tp_threshold = scaled_tp_threshold(half_extent);
    let (per_class, map) = average_precision(frames, classes, &thresholds)?;
    let mut errs = Vec::new();
    for c in per_class.iter().filter(|c| c.ap.is_some()) {
        errs.push(tp_errors(&match_class(frames, c.class, tp_threshold).1));
    }
    let mean = |f: fn(&(f64, f64, f64)) -> f64| if errs.is_empty() { 1.0 } else { errs.iter().map(f).sum::<f64>() / errs.len() as f64 };
    let (ate, ase, aoe) = (mean(|e| e.0), mean(|e| e.1), mean(|e| e.2));
    Ok(MetricsReport {
        resolution,
        mAP: map,
        mATE: ate,
        mASE: ase,
        mAOE: aoe,
        NDS3: nds(map, &[ate, ase, aoe]),
        NDS5: None,
        per_class,
        thresholds,
        tp_threshold,
        note: AP_NOTE.to_string(),
    })
}

pub const CSV_HEADER: &str = "resolution,mAP,mATE,mASE,mAOE,NDS3,NDS5";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        let nds5 = self.NDS5.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{},{},{},{}", self.resolution, self.mAP, self.mATE, self.mASE, self.mAOE, self.NDS3, nds5)
    }
}

pub fn to_csv(reports: &[MetricsReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
