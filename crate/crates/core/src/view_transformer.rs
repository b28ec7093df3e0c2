//! Column-wise perspective-to-polar view transformer.
//!
//! Every azimuth bin of the polar grid is a 1-D sequence problem: the
//! radial queries of that ray cross-attend to the pixels of the image
//! columns assigned to it (across every covering camera) and nothing else.

use rand_chacha::ChaCha8Rng;

use crate::camgeom::RayAssignment;
use crate::error::{Error, Result};
use crate::numcore::kernels::{self, LayerNormCache};
use crate::numcore::params::add_into;
use crate::numcore::{sigmoid, sinusoidal_embed, Init, LayerNorm, Linear, Mlp, MlpCache, ParamId, ParamStore, Tensor};
use crate::polargrid::PolarGridSpec;
use crate::sampler::PolarFeatureMap;

/// Non-overlapping square patch embedding (the image backbone stand-in).
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new(ps: &mut ParamStore, patch: usize, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let proj = Linear::new(ps, "encoder.patch", patch * patch * 3, channels, true, Init::Xavier, rng);
        Self { proj, patch }
    }

    /// Rearranges an `[h, w, 3]` image into `[h/p · w/p, p·p·3]` patch rows.
    pub fn patchify(&self, image: &[f64], height: usize, width: usize) -> Vec<f64> {
        let p = self.patch;
        let (hf, wf) = (height / p, width / p);
        let mut out = Vec::with_capacity(hf * wf * p * p * 3);
        for pr in 0..hf {
            for pc in 0..wf {
                for dy in 0..p {
                    let row = pr * p + dy;
                    let start = (row * width + pc * p) * 3;
                    out.extend_from_slice(&image[start..start + p * 3]);
                }
            }
        }
        out
    }

    pub fn forward(&self, ps: &ParamStore, patches: &[f64]) -> Vec<f64> {
        self.proj.forward(ps, patches)
    }

    pub fn backward(&self, ps: &mut ParamStore, patches: &[f64], dy: &[f64]) {
        self.proj.backward_params(ps, patches, dy);
    }
}

/// Per-camera image features `[H_f, W_f, C]`.
#[derive(Debug, Clone)]
pub struct ImageFeatureMap {
    pub maps: Vec<Tensor>,
    /// Pixel stride of one feature column.
    pub stride: usize,
}

impl ImageFeatureMap {
    pub fn new(maps: Vec<Tensor>, stride: usize) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::Config("no camera features".into()))?;
        if first.shape().len() != 3 || maps.iter().any(|m| m.shape() != first.shape()) {
            return Err(Error::Dimension("camera feature maps must share one [H, W, C] shape".into()));
        }
        Ok(Self { maps, stride })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.maps[0].shape();
        (s[0], s[1], s[2])
    }

    /// Concatenated `[cams · H_f · W_f, C]` buffer.
    pub fn flat(&self) -> Vec<f64> {
        self.maps.iter().flat_map(|m| m.data().iter().copied()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpbtConfig {
    pub channels: usize,
    pub depth_bins: usize,
    pub heads: usize,
    pub layers: usize,
    pub feature_rows: usize,
    pub feature_cols: usize,
    pub cameras: usize,
}

#[derive(Debug, Clone)]
pub struct CpbtLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub ln: LayerNorm,
    pub mlp: Mlp,
}

/// Learned radial embeddings plus fixed sinusoidal azimuth codes; the
/// query of slot `(a, r)` is `radial[r] + azimuth[a]`.
#[derive(Debug, Clone)]
pub struct PolarQuerySet {
    pub radial: ParamId,
    pub azimuth: Vec<f64>,
}

impl PolarQuerySet {
    pub fn query(&self, ps: &ParamStore, a: usize, channels: usize) -> Vec<f64> {
        let radial = ps.data(self.radial);
        let az = &self.azimuth[a * channels..(a + 1) * channels];
        radial.chunks_exact(channels).flat_map(|r| r.iter().zip(az).map(|(x, y)| x + y)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct CpbtParams {
    pub cfg: CpbtConfig,
    pub spec: PolarGridSpec,
    pub depth_head: Linear,
    pub depth_mlp: Mlp,
    pub queries: PolarQuerySet,
    pub no_obs: ParamId,
    pub layers: Vec<CpbtLayer>,
    /// Fixed vertical-position code per feature row, `[H_f, C]`.
    pub row_code: Vec<f64>,
}

impl CpbtParams {
    pub fn new(ps: &mut ParamStore, cfg: CpbtConfig, spec: PolarGridSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.channels;
        if cfg.depth_bins < 2 {
            return Err(Error::Config("need at least two depth bins".into()));
        }
        if cfg.heads == 0 || c % cfg.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide {c} channels", cfg.heads)));
        }
        if cfg.layers == 0 {
            return Err(Error::Config("view transformer needs at least one layer".into()));
        }
        let depth_head = Linear::new(ps, "cpbt.depth_head", c, cfg.depth_bins, true, Init::Xavier, rng);
        let depth_mlp = Mlp::new(ps, "cpbt.depth_embed", cfg.depth_bins, c, c, false, rng);
        let radial = ps.add("cpbt.radial_query", &[spec.radial_bins, c], Init::Uniform(1.0), rng);
        let mut azimuth = Vec::with_capacity(spec.azimuth_bins * c);
        for a in 0..spec.azimuth_bins {
            let pos = (a as f64 + 0.5) / spec.azimuth_bins as f64;
            azimuth.extend_from_slice(sinusoidal_embed(pos, c)?.data());
        }
        let no_obs = ps.add("cpbt.no_observation", &[c], Init::Zeros, rng);
        let layers = (0..cfg.layers)
            .map(|l| {
                let n = format!("cpbt.layer{l}");
                CpbtLayer {
                    q: Linear::new(ps, &format!("{n}.q"), c, c, true, Init::Xavier, rng),
                    k: Linear::new(ps, &format!("{n}.k"), c, c, false, Init::Xavier, rng),
                    v: Linear::new(ps, &format!("{n}.v"), c, c, true, Init::Xavier, rng),
                    o: Linear::new(ps, &format!("{n}.o"), c, c, true, Init::Xavier, rng),
                    gate_w: ps.add(format!("{n}.gate_w"), &[1], Init::Const(1.0), rng),
                    gate_b: ps.add(format!("{n}.gate_b"), &[1], Init::Zeros, rng),
                    ln: LayerNorm::new(ps, &format!("{n}.ln"), c, rng),
                    mlp: Mlp::new(ps, &format!("{n}.mlp"), c, c, c, false, rng),
                }
            })
            .collect();
        let mut row_code = Vec::with_capacity(cfg.feature_rows * c);
        for r in 0..cfg.feature_rows {
            row_code.extend_from_slice(sinusoidal_embed((r as f64 + 0.5) / cfg.feature_rows as f64, c)?.data());
        }
        Ok(Self { cfg, spec, depth_head, depth_mlp, queries: PolarQuerySet { radial, azimuth }, no_obs, layers, row_code })
    }

    fn pixels(&self) -> usize {
        self.cfg.cameras * self.cfg.feature_rows * self.cfg.feature_cols
    }

    fn pixel_index(&self, cam: usize, row: usize, col: usize) -> usize {
        (cam * self.cfg.feature_rows + row) * self.cfg.feature_cols + col
    }

    /// Flat pixel indices read by one azimuth bin, column-major within a column.
    pub fn bin_keys(&self, assignment: &RayAssignment, bin: usize) -> Vec<usize> {
        let mut keys = Vec::with_capacity(assignment.bins[bin].len() * self.cfg.feature_rows);
        for &(cam, col) in &assignment.bins[bin] {
            for row in 0..self.cfg.feature_rows {
                keys.push(self.pixel_index(cam, row, col));
            }
        }
        keys
    }
}

/// Overlap gate `σ(w·ln c + b)`.
pub fn coverage_gate(w: f64, b: f64, coverage: usize) -> f64 {
    sigmoid(w * (coverage as f64).ln() + b)
}

/// Softmax over `D` depth-bin logits of one pixel feature.
pub fn depth_distribution(pixel_feature: &Tensor, params: &CpbtParams, ps: &ParamStore) -> Result<Tensor> {
    if pixel_feature.numel() != params.cfg.channels {
        return Err(Error::Dimension("pixel feature width differs from the channel count".into()));
    }
    let mut logits = params.depth_head.forward(ps, pixel_feature.data());
    kernels::softmax_rows(&mut logits, params.cfg.depth_bins);
    Tensor::new(vec![params.cfg.depth_bins], logits)
}

/// Embeds a depth distribution into a `C`-wide positional code.
pub fn depth_pos_embed(dist: &Tensor, params: &CpbtParams, ps: &ParamStore) -> Result<Tensor> {
    if dist.numel() != params.cfg.depth_bins {
        return Err(Error::Dimension("depth distribution width differs from the bin count".into()));
    }
    Tensor::new(vec![params.cfg.channels], params.depth_mlp.forward(ps, dist.data()).0)
}

/// One ray's cross-attention layer state.
#[derive(Debug, Clone, Default)]
pub struct RayLayerCache {
    q_in: Vec<f64>,
    q: Vec<f64>,
    /// `[heads, R, N]` attention weights.
    attn: Vec<f64>,
    attn_out: Vec<f64>,
    o: Vec<f64>,
    gate: f64,
    ln: LayerNormCache,
    x2: Vec<f64>,
    mlp: MlpCache,
}

/// Keys and values of every pixel for one layer.
#[derive(Debug, Clone, Default)]
struct PixelKv {
    k: Vec<f64>,
    v: Vec<f64>,
}

impl CpbtLayer {
    /// Cross-attention of `R` queries over `N` gathered keys; returns the
    /// updated queries and the state needed by [`Self::backward_ray`].
    fn forward_ray(
        &self,
        ps: &ParamStore,
        c: usize,
        heads: usize,
        q_in: &[f64],
        kv: &PixelKv,
        keys: &[usize],
        coverage: usize,
    ) -> (Vec<f64>, RayLayerCache) {
        let r = q_in.len() / c;
        let n = keys.len();
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(ps, q_in);
        let mut attn = vec![0.0; heads * r * n];
        for h in 0..heads {
            for qi in 0..r {
                let qv = &q[qi * c + h * dh..qi * c + (h + 1) * dh];
                let row = &mut attn[(h * r + qi) * n..(h * r + qi + 1) * n];
                for (j, &p) in keys.iter().enumerate() {
                    let kv_ = &kv.k[p * c + h * dh..p * c + (h + 1) * dh];
                    row[j] = qv.iter().zip(kv_).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                kernels::softmax_rows(row, n);
            }
        }
        let mut attn_out = vec![0.0; r * c];
        for h in 0..heads {
            for qi in 0..r {
                let row = &attn[(h * r + qi) * n..(h * r + qi + 1) * n];
                let out = &mut attn_out[qi * c + h * dh..qi * c + (h + 1) * dh];
                for (j, &p) in keys.iter().enumerate() {
                    let w = row[j];
                    let vv = &kv.v[p * c + h * dh..p * c + (h + 1) * dh];
                    for (o, x) in out.iter_mut().zip(vv) {
                        *o += w * x;
                    }
                }
            }
        }
        let o = self.o.forward(ps, &attn_out);
        let gate = coverage_gate(ps.data(self.gate_w)[0], ps.data(self.gate_b)[0], coverage);
        let x1: Vec<f64> = q_in.iter().zip(&o).map(|(a, b)| a + gate * b).collect();
        let (x2, ln) = self.ln.forward(ps, &x1);
        let (m, mlp) = self.mlp.forward(ps, &x2);
        let x3: Vec<f64> = x2.iter().zip(&m).map(|(a, b)| a + b).collect();
        let cache = RayLayerCache { q_in: q_in.to_vec(), q, attn, attn_out, o, gate, ln, x2, mlp };
        (x3, cache)
    }

    /// Backward of one ray; accumulates key/value gradients into `dkv` and
    /// returns the query-input gradient.
    #[allow(clippy::too_many_arguments)]
    fn backward_ray(
        &self,
        ps: &mut ParamStore,
        c: usize,
        heads: usize,
        cache: &RayLayerCache,
        kv: &PixelKv,
        dkv: &mut PixelKv,
        keys: &[usize],
        coverage: usize,
        dx3: &[f64],
    ) -> Vec<f64> {
        let r = cache.q_in.len() / c;
        let n = keys.len();
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut dx2 = self.mlp.backward(ps, &cache.x2, &cache.mlp, dx3);
        add_into(&mut dx2, dx3);
        let dx1 = self.ln.backward(ps, &cache.ln, &dx2);
        let mut dq_in = dx1.clone();
        let g = cache.gate;
        let dgate: f64 = dx1.iter().zip(&cache.o).map(|(a, b)| a * b).sum();
        let dpre = dgate * g * (1.0 - g);
        ps.grad_mut(self.gate_w)[0] += dpre * (coverage as f64).ln();
        ps.grad_mut(self.gate_b)[0] += dpre;
        let d_o: Vec<f64> = dx1.iter().map(|v| v * g).collect();
        let dattn_out = self.o.backward(ps, &cache.attn_out, &d_o);

        let mut dq = vec![0.0; r * c];
        let mut drow = vec![0.0; n];
        for h in 0..heads {
            for qi in 0..r {
                let a_row = &cache.attn[(h * r + qi) * n..(h * r + qi + 1) * n];
                let dout = &dattn_out[qi * c + h * dh..qi * c + (h + 1) * dh];
                for (j, &p) in keys.iter().enumerate() {
                    let vv = &kv.v[p * c + h * dh..p * c + (h + 1) * dh];
                    drow[j] = dout.iter().zip(vv).map(|(a, b)| a * b).sum();
                    let dv = &mut dkv.v[p * c + h * dh..p * c + (h + 1) * dh];
                    for (d, &go) in dv.iter_mut().zip(dout) {
                        *d += a_row[j] * go;
                    }
                }
                let dlogit = kernels::softmax_rows_backward(a_row, &drow, n);
                let qv = &cache.q[qi * c + h * dh..qi * c + (h + 1) * dh];
                let dqv = &mut dq[qi * c + h * dh..qi * c + (h + 1) * dh];
                for (j, &p) in keys.iter().enumerate() {
                    let gl = dlogit[j] * scale;
                    if gl == 0.0 {
                        continue;
                    }
                    let kv_ = &kv.k[p * c + h * dh..p * c + (h + 1) * dh];
                    for (d, &kx) in dqv.iter_mut().zip(kv_) {
                        *d += gl * kx;
                    }
                    let dk = &mut dkv.k[p * c + h * dh..p * c + (h + 1) * dh];
                    for (d, &qx) in dk.iter_mut().zip(qv) {
                        *d += gl * qx;
                    }
                }
            }
        }
        let dqi = self.q.backward(ps, &cache.q_in, &dq);
        add_into(&mut dq_in, &dqi);
        dq_in
    }
}

/// Standalone cross-attention of one ray (first layer's parameters):
/// `ray_queries` `[R, C]` against already-enriched `key_pixels` `[N, C]`.
pub fn ray_cross_attention(
    ray_queries: &Tensor,
    key_pixels: &Tensor,
    coverage: usize,
    params: &CpbtParams,
    ps: &ParamStore,
) -> Result<Tensor> {
    let c = params.cfg.channels;
    if ray_queries.last_dim() != c || key_pixels.last_dim() != c {
        return Err(Error::Dimension("queries and keys must have the model channel count".into()));
    }
    if key_pixels.numel() == 0 || coverage == 0 {
        return Err(Error::Contract("a ray needs at least one key and coverage >= 1".into()));
    }
    let layer = &params.layers[0];
    let kv = PixelKv { k: layer.k.forward(ps, key_pixels.data()), v: layer.v.forward(ps, key_pixels.data()) };
    let keys: Vec<usize> = (0..key_pixels.numel() / c).collect();
    let (out, _) = layer.forward_ray(ps, c, params.cfg.heads, ray_queries.data(), &kv, &keys, coverage);
    Tensor::new(ray_queries.shape().to_vec(), out)
}

/// Forward state of the whole view transformer for one frame.
#[derive(Debug, Clone, Default)]
pub struct CpbtCache {
    feats: Vec<f64>,
    dist: Vec<f64>,
    depth_mlp: MlpCache,
    keys_in: Vec<f64>,
    kv: Vec<PixelKv>,
    /// `rays[bin][layer]`; empty for bins without columns.
    rays: Vec<Vec<RayLayerCache>>,
}

impl CpbtParams {
    /// Enriched key features: pixel feature + depth embedding + row code.
    fn key_features(&self, ps: &ParamStore, feats: &[f64]) -> (Vec<f64>, MlpCache, Vec<f64>) {
        let c = self.cfg.channels;
        let mut dist = self.depth_head.forward(ps, feats);
        kernels::softmax_rows(&mut dist, self.cfg.depth_bins);
        let (demb, mcache) = self.depth_mlp.forward(ps, &dist);
        let rows = self.cfg.feature_rows;
        let cols = self.cfg.feature_cols;
        let mut keys_in = vec![0.0; feats.len()];
        for (p, out) in keys_in.chunks_exact_mut(c).enumerate() {
            let row = (p / cols) % rows;
            let code = &self.row_code[row * c..(row + 1) * c];
            for j in 0..c {
                out[j] = feats[p * c + j] + demb[p * c + j] + code[j];
            }
        }
        (dist, mcache, keys_in)
    }

    /// Runs the transformer on a `[pixels, C]` feature buffer and returns
    /// the `[A, R, C]` polar map buffer. Values are not validated, so
    /// locality can be probed with poisoned inputs.
    pub fn forward_raw(&self, ps: &ParamStore, feats: &[f64], assignment: &RayAssignment) -> (Vec<f64>, CpbtCache) {
        let c = self.cfg.channels;
        let rr = self.spec.radial_bins;
        let (dist, depth_mlp, keys_in) = self.key_features(ps, feats);
        let kv: Vec<PixelKv> = self
            .layers
            .iter()
            .map(|l| PixelKv { k: l.k.forward(ps, &keys_in), v: l.v.forward(ps, &keys_in) })
            .collect();
        let mut out = vec![0.0; self.spec.azimuth_bins * rr * c];
        let mut rays = Vec::with_capacity(self.spec.azimuth_bins);
        let no_obs = ps.data(self.no_obs);
        for a in 0..self.spec.azimuth_bins {
            let dst = &mut out[a * rr * c..(a + 1) * rr * c];
            if assignment.bins[a].is_empty() {
                for row in dst.chunks_exact_mut(c) {
                    row.copy_from_slice(no_obs);
                }
                rays.push(Vec::new());
                continue;
            }
            let keys = self.bin_keys(assignment, a);
            let mut x = self.queries.query(ps, a, c);
            let mut caches = Vec::with_capacity(self.layers.len());
            for (layer, kvl) in self.layers.iter().zip(&kv) {
                let (y, cache) = layer.forward_ray(ps, c, self.cfg.heads, &x, kvl, &keys, assignment.coverage[a]);
                caches.push(cache);
                x = y;
            }
            dst.copy_from_slice(&x);
            rays.push(caches);
        }
        (out, CpbtCache { feats: feats.to_vec(), dist, depth_mlp, keys_in, kv, rays })
    }

    /// Accumulates parameter gradients and returns the gradient with
    /// respect to the input pixel features.
    pub fn backward_raw(&self, ps: &mut ParamStore, cache: &CpbtCache, assignment: &RayAssignment, dout: &[f64]) -> Vec<f64> {
        let c = self.cfg.channels;
        let rr = self.spec.radial_bins;
        let np = self.pixels();
        let mut dkv: Vec<PixelKv> =
            self.layers.iter().map(|_| PixelKv { k: vec![0.0; np * c], v: vec![0.0; np * c] }).collect();
        let mut dradial = vec![0.0; rr * c];
        let mut dno_obs = vec![0.0; c];
        for a in 0..self.spec.azimuth_bins {
            let g = &dout[a * rr * c..(a + 1) * rr * c];
            if assignment.bins[a].is_empty() {
                for row in g.chunks_exact(c) {
                    add_into(&mut dno_obs, row);
                }
                continue;
            }
            let keys = self.bin_keys(assignment, a);
            let mut dx = g.to_vec();
            for (li, layer) in self.layers.iter().enumerate().rev() {
                dx = layer.backward_ray(
                    ps,
                    c,
                    self.cfg.heads,
                    &cache.rays[a][li],
                    &cache.kv[li],
                    &mut dkv[li],
                    &keys,
                    assignment.coverage[a],
                    &dx,
                );
            }
            add_into(&mut dradial, &dx);
        }
        add_into(ps.grad_mut(self.queries.radial), &dradial);
        add_into(ps.grad_mut(self.no_obs), &dno_obs);

        let mut dkeys = vec![0.0; np * c];
        for (layer, d) in self.layers.iter().zip(&dkv) {
            add_into(&mut dkeys, &layer.k.backward(ps, &cache.keys_in, &d.k));
            add_into(&mut dkeys, &layer.v.backward(ps, &cache.keys_in, &d.v));
        }
        let ddist = self.depth_mlp.backward(ps, &cache.dist, &cache.depth_mlp, &dkeys);
        let dlogits = kernels::softmax_rows_backward(&cache.dist, &ddist, self.cfg.depth_bins);
        let mut dfeats = self.depth_head.backward(ps, &cache.feats, &dlogits);
        add_into(&mut dfeats, &dkeys);
        dfeats
    }
}

/// Lifts per-camera image features onto the polar grid.
pub fn cpbt_forward(
    features: &ImageFeatureMap,
    assignment: &RayAssignment,
    spec: &PolarGridSpec,
    params: &CpbtParams,
    ps: &ParamStore,
) -> Result<PolarFeatureMap> {
    let (h, w, c) = features.dims();
    let cfg = &params.cfg;
    if *spec != params.spec || assignment.num_bins() != spec.azimuth_bins {
        return Err(Error::Config("ray assignment, polar spec and parameters disagree".into()));
    }
    if (h, w, c) != (cfg.feature_rows, cfg.feature_cols, cfg.channels) || features.maps.len() != cfg.cameras {
        return Err(Error::Config(format!("image features {h}x{w}x{c} do not match the transformer configuration")));
    }
    let (out, _) = params.forward_raw(ps, &features.flat(), assignment);
    PolarFeatureMap::new(Tensor::new(vec![spec.azimuth_bins, spec.radial_bins, c], out)?, *spec)
}
