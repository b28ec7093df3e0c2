use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camgeom::CameraRig;
use crate::error::{Error, Result};
use crate::polargrid::{CartesianGridSpec, PolarGridSpec};
use crate::synthscene::{SceneSpec, SizePrior};

/// Flat experiment configuration; every key is optional in the file and
/// falls back to the desk default, unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub cameras: usize,
    pub hfov_deg: f64,
    pub camera_height: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub patch: usize,
    pub half_extent: f64,
    pub azimuth_bins: usize,
    pub radial_bins: usize,
    /// Outer polar radius; `null` selects the smallest radius covering the
    /// square extent.
    pub sigma_max: Option<f64>,
    pub channels: usize,
    pub depth_bins: usize,
    pub cpbt_heads: usize,
    pub cpbt_layers: usize,
    pub mbie_scales: Vec<usize>,
    pub mbie_heads: usize,
    pub mbie_points: usize,
    pub mbie_layers: usize,
    pub head_hidden: usize,
    pub train_resolution: usize,
    pub eval_resolutions: Vec<usize>,
    /// Resolution of the fixed Cartesian map used when the polar stage is off.
    pub baseline_grid: usize,
    pub use_cpbt: bool,
    pub use_mbie: bool,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_range: f64,
    /// Per class `[w_min, w_max, l_min, l_max]` in meters.
    pub class_sizes: Vec<[f64; 4]>,
    pub reg_weight: f64,
    pub score_thresh: f64,
    pub max_dets: usize,
    pub bench_frames: usize,
    pub bench_warmup: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cameras: 4,
            hfov_deg: 100.0,
            camera_height: 1.0,
            image_width: 128,
            image_height: 48,
            patch: 4,
            half_extent: 8.0,
            azimuth_bins: 64,
            radial_bins: 24,
            sigma_max: None,
            channels: 32,
            depth_bins: 8,
            cpbt_heads: 2,
            cpbt_layers: 1,
            mbie_scales: vec![16, 32, 64],
            mbie_heads: 2,
            mbie_points: 2,
            mbie_layers: 1,
            head_hidden: 32,
            train_resolution: 32,
            eval_resolutions: vec![16, 24, 32, 48, 64],
            baseline_grid: 32,
            use_cpbt: true,
            use_mbie: true,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 20,
            batch_size: 4,
            train_scenes: 256,
            eval_scenes: 64,
            min_objects: 2,
            max_objects: 6,
            min_range: 1.5,
            class_sizes: vec![[0.8, 1.2, 1.6, 2.4], [0.5, 0.8, 0.5, 0.8]],
            reg_weight: 0.25,
            score_thresh: 0.3,
            max_dets: 64,
            bench_frames: 50,
            bench_warmup: 5,
        }
    }
}

pub const MIN_RESOLUTION: usize = 8;
const MAX_SCENE_ATTEMPTS: usize = 2000;

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn classes(&self) -> usize {
        self.class_sizes.len()
    }

    pub fn feature_rows(&self) -> usize {
        self.image_height / self.patch
    }

    pub fn feature_cols(&self) -> usize {
        self.image_width / self.patch
    }

    pub fn check_resolution(res: usize) -> Result<()> {
        if res < MIN_RESOLUTION {
            return Err(Error::Config(format!("BEV resolution {res} is below the minimum {MIN_RESOLUTION}")));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.patch == 0 || self.image_width % self.patch != 0 || self.image_height % self.patch != 0 {
            return bad("image size must be a multiple of the patch size");
        }
        if self.cameras == 0 || !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return bad("need at least one camera with a field of view in (0, 180) degrees");
        }
        if self.channels == 0 || self.head_hidden == 0 {
            return bad("channel counts must be positive");
        }
        if self.classes() == 0 {
            return bad("need at least one object class");
        }
        if self.mbie_scales.len() < 2 || self.mbie_scales.windows(2).any(|w| w[1] <= w[0]) {
            return bad("pyramid scales must be at least two strictly increasing sizes");
        }
        for &r in self.mbie_scales.iter().chain(&self.eval_resolutions).chain([&self.train_resolution, &self.baseline_grid]) {
            Self::check_resolution(r)?;
        }
        if self.train_resolution < self.mbie_scales[0] || self.train_resolution > *self.mbie_scales.last().unwrap() {
            return bad("training resolution must lie within the pyramid's range");
        }
        if !self.use_cpbt && self.train_resolution != self.baseline_grid {
            return bad("the Cartesian baseline trains its head at the baseline grid resolution");
        }
        if self.eval_resolutions.is_empty() {
            return bad("at least one evaluation resolution is required");
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return bad("batch size and learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("moment decays must lie in [0, 1) and epsilon must be positive");
        }
        if self.bench_frames == 0 {
            return bad("bench needs at least one timed frame");
        }
        self.polar_spec()?;
        self.scene_spec().validate()?;
        self.rig().validate()
    }

    pub fn polar_spec(&self) -> Result<PolarGridSpec> {
        let sigma_max = self.sigma_max.unwrap_or_else(|| PolarGridSpec::covering_radius(self.half_extent));
        PolarGridSpec::new(self.azimuth_bins, self.radial_bins, 0.0, sigma_max)
    }

    pub fn grid(&self, res: usize) -> Result<CartesianGridSpec> {
        Self::check_resolution(res)?;
        CartesianGridSpec::square(res, self.half_extent)
    }

    pub fn rig(&self) -> CameraRig {
        CameraRig::ring(
            self.cameras,
            self.hfov_deg.to_radians(),
            [0.0, 0.0, self.camera_height],
            self.image_width,
            self.image_height,
        )
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            seed: self.seed,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            half_extent: self.half_extent,
            sizes: self.class_sizes.iter().map(|s| SizePrior { w: (s[0], s[1]), l: (s[2], s[3]) }).collect(),
            min_range: self.min_range,
            max_attempts: MAX_SCENE_ATTEMPTS,
        }
    }

    /// Short label of the active stages.
    pub fn variant(&self) -> &'static str {
        match (self.use_cpbt, self.use_mbie) {
            (false, false) => "base",
            (true, false) => "+cpbt",
            (false, true) => "cartesian-baseline+mbie",
            (true, true) => "+cpbt+mbie",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_json(r#"{"seed": 1, "epoch": 3}"#).unwrap_err();
        assert_eq!(err.kind(), "config");
    }

    #[test]
    fn partial_files_use_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"seed": 5, "epochs": 0}"#).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.channels, ExperimentConfig::default().channels);
    }

    #[test]
    fn tiny_resolutions_are_rejected() {
        let cfg = ExperimentConfig { eval_resolutions: vec![4], ..Default::default() };
        assert_eq!(cfg.validate().unwrap_err().kind(), "config");
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { seed: 1, ..Default::default() };
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
