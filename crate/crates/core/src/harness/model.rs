use crate::camgeom::{assign_columns_to_rays, azimuth_bin, RayAssignment};
use crate::det_head::{DetHead, HeadCache, HeadOutput};
use crate::error::Result;
use crate::mbie::{MbieCache, MbieConfig, MbieParams};
use crate::numcore::kernels::{self, LayerNormCache};
use crate::numcore::params::add_into;
use crate::numcore::{seeded_rng, sigmoid, Init, LayerNorm, Mlp, MlpCache, ParamId, ParamStore, Tensor};
use crate::polargrid::{build_sampling_grid, CartesianGridSpec};
use crate::sampler::{grid_taps, resize_taps, sample_with_taps, sample_with_taps_backward, Taps};
use crate::synthscene::Image;
use crate::view_transformer::{CpbtCache, CpbtConfig, CpbtParams, PatchEmbed};

use super::config::ExperimentConfig;

/// Fixed-grid Cartesian lifting used when the polar stage is disabled:
/// each cell mixes the feature rows of the image columns on its azimuth
/// with learned per-cell row weights, adds a learned cell embedding and
/// refines the result with a normalized MLP block.
#[derive(Debug, Clone)]
pub struct CartBaseline {
    pub grid: CartesianGridSpec,
    pub row_logits: ParamId,
    pub embed: ParamId,
    pub ln: LayerNorm,
    pub mlp: Mlp,
    /// Flat pixel indices `(cam, row 0, col)` of every column a cell reads.
    cell_columns: Vec<Vec<usize>>,
    rows: usize,
    cols: usize,
    channels: usize,
}

#[derive(Debug, Clone, Default)]
pub struct BaselineCache {
    weights: Vec<f64>,
    ln: LayerNormCache,
    normed: Vec<f64>,
    mlp: MlpCache,
}

impl CartBaseline {
    fn new(ps: &mut ParamStore, cfg: &ExperimentConfig, assignment: &RayAssignment, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Self> {
        let grid = cfg.grid(cfg.baseline_grid)?;
        let (rows, cols, c) = (cfg.feature_rows(), cfg.feature_cols(), cfg.channels);
        let row_logits = ps.add("baseline.row_logits", &[grid.cells(), rows], Init::Zeros, rng);
        let embed = ps.add("baseline.cell_embed", &[grid.cells(), c], Init::Uniform(0.1), rng);
        let ln = LayerNorm::new(ps, "baseline.ln", c, rng);
        let mlp = Mlp::new(ps, "baseline.mlp", c, c, c, false, rng);
        let mut cell_columns = Vec::with_capacity(grid.cells());
        for r in 0..grid.rows {
            for q in 0..grid.cols {
                let (x, y) = grid.cell_center(r, q);
                let bin = azimuth_bin(y.atan2(x), cfg.azimuth_bins);
                cell_columns.push(assignment.bins[bin].iter().map(|&(cam, col)| cam * rows * cols + col).collect());
            }
        }
        Ok(Self { grid, row_logits, embed, ln, mlp, cell_columns, rows, cols, channels: c })
    }

    fn forward(&self, ps: &ParamStore, feats: &[f64]) -> (Vec<f64>, BaselineCache) {
        let (c, h) = (self.channels, self.rows);
        let mut weights = ps.data(self.row_logits).to_vec();
        kernels::softmax_rows(&mut weights, h);
        let mut x = ps.data(self.embed).to_vec();
        for (cell, cols) in self.cell_columns.iter().enumerate() {
            if cols.is_empty() {
                continue;
            }
            let inv = 1.0 / cols.len() as f64;
            let out = &mut x[cell * c..(cell + 1) * c];
            for &base in cols {
                for row in 0..h {
                    let w = weights[cell * h + row] * inv;
                    let p = base + row * self.cols;
                    for (o, f) in out.iter_mut().zip(&feats[p * c..(p + 1) * c]) {
                        *o += w * f;
                    }
                }
            }
        }
        let (normed, ln) = self.ln.forward(ps, &x);
        let (m, mlp) = self.mlp.forward(ps, &normed);
        let mut y = normed.clone();
        add_into(&mut y, &m);
        (y, BaselineCache { weights, ln, normed, mlp })
    }

    fn backward(&self, ps: &mut ParamStore, feats: &[f64], cache: &BaselineCache, dy: &[f64], dfeats: &mut [f64]) {
        let (c, h) = (self.channels, self.rows);
        let mut dn = self.mlp.backward(ps, &cache.normed, &cache.mlp, dy);
        add_into(&mut dn, dy);
        let dx = self.ln.backward(ps, &cache.ln, &dn);
        add_into(ps.grad_mut(self.embed), &dx);
        let mut dw = vec![0.0; cache.weights.len()];
        for (cell, cols) in self.cell_columns.iter().enumerate() {
            if cols.is_empty() {
                continue;
            }
            let inv = 1.0 / cols.len() as f64;
            let g = &dx[cell * c..(cell + 1) * c];
            for &base in cols {
                for row in 0..h {
                    let p = base + row * self.cols;
                    let f = &feats[p * c..(p + 1) * c];
                    dw[cell * h + row] += inv * f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    let w = cache.weights[cell * h + row] * inv;
                    for (d, gv) in dfeats[p * c..(p + 1) * c].iter_mut().zip(g) {
                        *d += w * gv;
                    }
                }
            }
        }
        let dl = kernels::softmax_rows_backward(&cache.weights, &dw, h);
        add_into(ps.grad_mut(self.row_logits), &dl);
    }
}

/// Module handles of the assembled network; parameters live in the
/// model's [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Network {
    pub encoder: PatchEmbed,
    pub cpbt: Option<CpbtParams>,
    pub baseline: Option<CartBaseline>,
    pub mbie: Option<MbieParams>,
    pub head: DetHead,
    pub assignment: RayAssignment,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ExperimentConfig,
    pub ps: ParamStore,
    pub net: Network,
}

/// Precomputed sampling taps for one output resolution.
#[derive(Debug, Clone)]
pub struct Plan {
    pub target: CartesianGridSpec,
    pyramid_dims: Vec<(usize, usize)>,
    /// Polar map to each pyramid scale.
    polar_to_scales: Vec<Vec<Taps>>,
    /// Polar map straight to the target.
    polar_to_target: Vec<Taps>,
    /// Baseline grid to each pyramid scale.
    base_to_scales: Vec<Vec<Taps>>,
    /// Baseline-resolution map to the target, when they differ.
    base_to_target: Option<Vec<Taps>>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone, Default)]
pub struct FrameCache {
    feats: Vec<f64>,
    cpbt: Option<CpbtCache>,
    baseline: Option<BaselineCache>,
    mbie: Option<MbieCache>,
    bev: Vec<f64>,
    head: HeadCache,
    pub logits: Vec<f64>,
    pub reg: Vec<f64>,
}

/// Rearranges rendered views into the encoder's patch rows.
pub fn patchify_views(encoder: &PatchEmbed, views: &[Image]) -> Vec<f64> {
    views.iter().flat_map(|v| encoder.patchify(&v.data, v.height, v.width)).collect()
}

impl Model {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(cfg.seed, 0);
        let mut ps = ParamStore::new();
        let c = cfg.channels;
        let encoder = PatchEmbed::new(&mut ps, cfg.patch, c, &mut rng);
        let feat_rig = cfg.rig().strided(cfg.patch);
        let assignment = assign_columns_to_rays(&feat_rig, cfg.azimuth_bins)?;
        let polar = cfg.polar_spec()?;
        let (cpbt, baseline) = if cfg.use_cpbt {
            let ccfg = CpbtConfig {
                channels: c,
                depth_bins: cfg.depth_bins,
                heads: cfg.cpbt_heads,
                layers: cfg.cpbt_layers,
                feature_rows: cfg.feature_rows(),
                feature_cols: cfg.feature_cols(),
                cameras: cfg.cameras,
            };
            (Some(CpbtParams::new(&mut ps, ccfg, polar, &mut rng)?), None)
        } else {
            (None, Some(CartBaseline::new(&mut ps, cfg, &assignment, &mut rng)?))
        };
        let mbie = if cfg.use_mbie {
            let mcfg = MbieConfig {
                channels: c,
                heads: cfg.mbie_heads,
                points: cfg.mbie_points,
                scales: cfg.mbie_scales.len(),
                layers: cfg.mbie_layers,
            };
            Some(MbieParams::new(&mut ps, mcfg, &mut rng)?)
        } else {
            None
        };
        let head = DetHead::new(&mut ps, c, cfg.head_hidden, cfg.classes(), &mut rng);
        Ok(Self { cfg: cfg.clone(), ps, net: Network { encoder, cpbt, baseline, mbie, head, assignment } })
    }

    pub fn plan(&self, res: usize) -> Result<Plan> {
        let cfg = &self.cfg;
        let target = cfg.grid(res)?;
        let polar = cfg.polar_spec()?;
        let pyramid_dims: Vec<(usize, usize)> = cfg.mbie_scales.iter().map(|&s| (s, s)).collect();
        let (mut polar_to_scales, mut polar_to_target, mut base_to_scales, mut base_to_target) = (Vec::new(), Vec::new(), Vec::new(), None);
        if cfg.use_cpbt {
            if cfg.use_mbie {
                for &s in &cfg.mbie_scales {
                    polar_to_scales.push(grid_taps(&build_sampling_grid(&cfg.grid(s)?, &polar)?)?);
                }
            } else {
                polar_to_target = grid_taps(&build_sampling_grid(&target, &polar)?)?;
            }
        } else {
            let b = cfg.baseline_grid;
            if cfg.use_mbie {
                base_to_scales = cfg.mbie_scales.iter().map(|&s| Ok(resize_taps(b, b, &cfg.grid(s)?))).collect::<Result<_>>()?;
            }
            if res != b {
                base_to_target = Some(resize_taps(b, b, &target));
            }
        }
        Ok(Plan { target, pyramid_dims, polar_to_scales, polar_to_target, base_to_scales, base_to_target })
    }

    /// Full forward pass from patch rows to head logits and regression.
    pub fn forward(&self, patches: &[f64], plan: &Plan) -> FrameCache {
        let (ps, net, c) = (&self.ps, &self.net, self.cfg.channels);
        let feats = net.encoder.forward(ps, patches);
        let mut cache = FrameCache::default();
        let bev = if let Some(cpbt) = &net.cpbt {
            let (polar, cc) = cpbt.forward_raw(ps, &feats, &net.assignment);
            cache.cpbt = Some(cc);
            match &net.mbie {
                Some(mbie) => {
                    let pyr: Vec<f64> = plan.polar_to_scales.iter().flat_map(|t| sample_with_taps(&polar, c, t)).collect();
                    let (out, mc) = mbie.forward_raw(ps, &pyr, &plan.pyramid_dims, &plan.target);
                    cache.mbie = Some(mc);
                    out
                }
                None => sample_with_taps(&polar, c, &plan.polar_to_target),
            }
        } else {
            let base = net.baseline.as_ref().expect("baseline present without the polar stage");
            let (cart, bc) = base.forward(ps, &feats);
            cache.baseline = Some(bc);
            let fused = match &net.mbie {
                Some(mbie) => {
                    let pyr: Vec<f64> = plan.base_to_scales.iter().flat_map(|t| sample_with_taps(&cart, c, t)).collect();
                    let (out, mc) = mbie.forward_raw(ps, &pyr, &plan.pyramid_dims, &base.grid);
                    cache.mbie = Some(mc);
                    out
                }
                None => cart,
            };
            match &plan.base_to_target {
                Some(t) => sample_with_taps(&fused, c, t),
                None => fused,
            }
        };
        let (logits, reg, hc) = net.head.forward_raw(ps, &bev, &plan.target);
        cache.feats = feats;
        cache.bev = bev;
        cache.head = hc;
        cache.logits = logits;
        cache.reg = reg;
        cache
    }

    /// Backpropagates head-output gradients into the parameter gradients.
    pub fn backward(&mut self, patches: &[f64], plan: &Plan, cache: &FrameCache, dlogits: &[f64], dreg: &[f64]) {
        let (ps, net, c) = (&mut self.ps, &self.net, self.cfg.channels);
        let dbev = net.head.backward_raw(ps, &cache.bev, &cache.head, &plan.target, dlogits, dreg);
        let mut dfeats = vec![0.0; cache.feats.len()];
        if let Some(cpbt) = &net.cpbt {
            let cc = cache.cpbt.as_ref().expect("cpbt cache");
            let mut dpolar = vec![0.0; cpbt.spec.azimuth_bins * cpbt.spec.radial_bins * c];
            match &net.mbie {
                Some(mbie) => {
                    let dpyr = mbie.backward_raw(ps, cache.mbie.as_ref().expect("mbie cache"), &plan.pyramid_dims, &plan.target, &dbev);
                    let mut at = 0;
                    for (t, &(h, w)) in plan.polar_to_scales.iter().zip(&plan.pyramid_dims) {
                        sample_with_taps_backward(&mut dpolar, c, t, &dpyr[at..at + h * w * c]);
                        at += h * w * c;
                    }
                }
                None => sample_with_taps_backward(&mut dpolar, c, &plan.polar_to_target, &dbev),
            }
            dfeats = cpbt.backward_raw(ps, cc, &net.assignment, &dpolar);
        } else {
            let base = net.baseline.as_ref().expect("baseline");
            let dfused = match &plan.base_to_target {
                Some(t) => {
                    let mut d = vec![0.0; base.grid.cells() * c];
                    sample_with_taps_backward(&mut d, c, t, &dbev);
                    d
                }
                None => dbev,
            };
            let dcart = match &net.mbie {
                Some(mbie) => {
                    let dpyr = mbie.backward_raw(ps, cache.mbie.as_ref().expect("mbie cache"), &plan.pyramid_dims, &base.grid, &dfused);
                    let mut d = vec![0.0; base.grid.cells() * c];
                    let mut at = 0;
                    for (t, &(h, w)) in plan.base_to_scales.iter().zip(&plan.pyramid_dims) {
                        sample_with_taps_backward(&mut d, c, t, &dpyr[at..at + h * w * c]);
                        at += h * w * c;
                    }
                    d
                }
                None => dfused,
            };
            base.backward(ps, &cache.feats, cache.baseline.as_ref().expect("baseline cache"), &dcart, &mut dfeats);
        }
        net.encoder.backward(ps, patches, &dfeats);
    }

    pub fn head_output(&self, cache: &FrameCache, plan: &Plan) -> Result<HeadOutput> {
        let t = &plan.target;
        Ok(HeadOutput {
            heatmap: Tensor::new(vec![t.rows, t.cols, self.cfg.classes()], cache.logits.iter().map(|&z| sigmoid(z)).collect())?,
            regression: Tensor::new(vec![t.rows, t.cols, crate::det_head::REG_CHANNELS], cache.reg.clone())?,
        })
    }
}
