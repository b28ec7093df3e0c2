//! Multi-scale BEV interaction: deformable attention across a pyramid of
//! Cartesian BEV maps, then fusion of the pyramid to a target grid.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::kernels::{self, LayerNormCache};
use crate::numcore::params::add_into;
use crate::numcore::{Init, LayerNorm, Linear, Mlp, MlpCache, ParamStore, Tensor};
use crate::polargrid::CartesianGridSpec;
use crate::sampler::{taps_2d, AxisMode, BevFeatureMap, Taps};

/// BEV maps of one physical extent at strictly increasing resolutions.
#[derive(Debug, Clone)]
pub struct MbiePyramid {
    pub maps: Vec<BevFeatureMap>,
}

impl MbiePyramid {
    pub fn new(maps: Vec<BevFeatureMap>) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::Config("empty BEV pyramid".into()))?;
        let (extent, c) = (first.spec.half_extent, first.channels());
        for pair in maps.windows(2) {
            let (a, b) = (&pair[0].spec, &pair[1].spec);
            if b.rows <= a.rows || b.cols <= a.cols {
                return Err(Error::Config("pyramid resolutions must strictly increase".into()));
            }
        }
        if maps.iter().any(|m| m.spec.half_extent != extent || m.channels() != c) {
            return Err(Error::Config("pyramid maps must share extent and channel count".into()));
        }
        Ok(Self { maps })
    }

    pub fn scales(&self) -> usize {
        self.maps.len()
    }

    pub fn channels(&self) -> usize {
        self.maps[0].channels()
    }

    pub fn half_extent(&self) -> f64 {
        self.maps[0].spec.half_extent
    }

    pub fn dims(&self) -> Vec<(usize, usize)> {
        self.maps.iter().map(|m| (m.spec.rows, m.spec.cols)).collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.maps.iter().flat_map(|m| m.data.data().iter().copied()).collect()
    }

    /// Same layout as `self`, new contents.
    pub fn with_flat(&self, data: &[f64]) -> Result<Self> {
        let c = self.channels();
        let mut at = 0;
        let mut maps = Vec::with_capacity(self.maps.len());
        for m in &self.maps {
            let n = m.spec.cells() * c;
            maps.push(BevFeatureMap::new(Tensor::new(m.data.shape().to_vec(), data[at..at + n].to_vec())?, m.spec)?);
            at += n;
        }
        Ok(Self { maps })
    }
}

/// Splits a flat pyramid buffer into per-scale slices.
pub fn split_scales<'a>(flat: &'a [f64], dims: &[(usize, usize)], c: usize) -> Vec<&'a [f64]> {
    let mut out = Vec::with_capacity(dims.len());
    let mut at = 0;
    for &(h, w) in dims {
        out.push(&flat[at..at + h * w * c]);
        at += h * w * c;
    }
    out
}

/// Normalized centers of every cell of every scale, in flat order.
pub fn cell_refs(dims: &[(usize, usize)]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for &(h, w) in dims {
        for r in 0..h {
            for c in 0..w {
                out.push(((r as f64 + 0.5) / h as f64, (c as f64 + 0.5) / w as f64));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformAttnConfig {
    pub channels: usize,
    pub heads: usize,
    pub points: usize,
    pub scales: usize,
}

impl DeformAttnConfig {
    fn samples(&self) -> usize {
        self.heads * self.scales * self.points
    }

    fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

#[derive(Debug, Clone)]
pub struct DeformAttnParams {
    pub cfg: DeformAttnConfig,
    pub query: Linear,
    pub offset: Linear,
    pub weight: Linear,
    pub value: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone, Default)]
struct AttnCache {
    qp: Vec<f64>,
    off: Vec<f64>,
    attn: Vec<f64>,
    head_out: Vec<f64>,
    values: Vec<Vec<f64>>,
}

/// Continuous sample index on one axis plus whether the offset was clamped.
fn axis_coord(reference: f64, n: usize, offset: f64) -> (f64, bool) {
    let lim = n as f64;
    (reference * lim - 0.5 + offset.clamp(-lim, lim), offset.abs() > lim)
}

impl DeformAttnParams {
    /// Offset and weight heads and the output projection start at zero.
    pub fn new(ps: &mut ParamStore, name: &str, cfg: DeformAttnConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.channels;
        if cfg.heads == 0 || c % cfg.heads != 0 || cfg.points == 0 || cfg.scales == 0 {
            return Err(Error::Config(format!("invalid deformable attention shape {cfg:?}")));
        }
        let n = cfg.samples();
        Ok(Self {
            cfg,
            query: Linear::new(ps, &format!("{name}.query"), c, c, true, Init::Xavier, rng),
            offset: Linear::new(ps, &format!("{name}.offset"), c, 2 * n, true, Init::Zeros, rng),
            weight: Linear::new(ps, &format!("{name}.weight"), c, n, true, Init::Zeros, rng),
            value: Linear::new(ps, &format!("{name}.value"), c, c, true, Init::Xavier, rng),
            out: Linear::new(ps, &format!("{name}.out"), c, c, true, Init::Zeros, rng),
        })
    }

    fn sample_taps(&self, reference: (f64, f64), dims: (usize, usize), o0: f64, o1: f64) -> (Taps, bool, bool) {
        let (c0, k0) = axis_coord(reference.0, dims.0, o0);
        let (c1, k1) = axis_coord(reference.1, dims.1, o1);
        (taps_2d(c0, c1, dims.0, dims.1, AxisMode::Zeros, AxisMode::Zeros), k0, k1)
    }

    fn forward_raw(
        &self,
        ps: &ParamStore,
        bq: &[f64],
        refs: &[(f64, f64)],
        maps: &[&[f64]],
        dims: &[(usize, usize)],
    ) -> (Vec<f64>, AttnCache) {
        let cfg = self.cfg;
        let (c, dh, ns, sr) = (cfg.channels, cfg.head_dim(), cfg.samples(), cfg.scales * cfg.points);
        let qp = self.query.forward(ps, bq);
        let off = self.offset.forward(ps, &qp);
        let mut attn = self.weight.forward(ps, &qp);
        kernels::softmax_rows(&mut attn, sr);
        let values: Vec<Vec<f64>> = maps.iter().map(|m| self.value.forward(ps, m)).collect();
        let mut head_out = vec![0.0; refs.len() * c];
        for (q, &rf) in refs.iter().enumerate() {
            for h in 0..cfg.heads {
                let out = &mut head_out[q * c + h * dh..q * c + (h + 1) * dh];
                for s in 0..cfg.scales {
                    for r in 0..cfg.points {
                        let k = (h * cfg.scales + s) * cfg.points + r;
                        let a = attn[q * ns + k];
                        let (taps, _, _) = self.sample_taps(rf, dims[s], off[(q * ns + k) * 2], off[(q * ns + k) * 2 + 1]);
                        for (idx, w) in taps.iter() {
                            let src = &values[s][idx * c + h * dh..idx * c + (h + 1) * dh];
                            for (o, v) in out.iter_mut().zip(src) {
                                *o += a * w * v;
                            }
                        }
                    }
                }
            }
        }
        let y = self.out.forward(ps, &head_out);
        (y, AttnCache { qp, off, attn, head_out, values })
    }

    /// Returns the query gradient and one value-map gradient per scale.
    fn backward_raw(
        &self,
        ps: &mut ParamStore,
        cache: &AttnCache,
        bq: &[f64],
        refs: &[(f64, f64)],
        maps: &[&[f64]],
        dims: &[(usize, usize)],
        dy: &[f64],
    ) -> (Vec<f64>, Vec<Vec<f64>>) {
        let cfg = self.cfg;
        let (c, dh, ns, sr) = (cfg.channels, cfg.head_dim(), cfg.samples(), cfg.scales * cfg.points);
        let dhead = self.out.backward(ps, &cache.head_out, dy);
        let mut dvalues: Vec<Vec<f64>> = cache.values.iter().map(|v| vec![0.0; v.len()]).collect();
        let mut doff = vec![0.0; cache.off.len()];
        let mut dattn = vec![0.0; cache.attn.len()];
        for (q, &rf) in refs.iter().enumerate() {
            for h in 0..cfg.heads {
                let g = &dhead[q * c + h * dh..q * c + (h + 1) * dh];
                for s in 0..cfg.scales {
                    for r in 0..cfg.points {
                        let k = q * ns + (h * cfg.scales + s) * cfg.points + r;
                        let a = cache.attn[k];
                        let (taps, k0, k1) = self.sample_taps(rf, dims[s], cache.off[2 * k], cache.off[2 * k + 1]);
                        let (mut g0, mut g1, mut da) = (0.0, 0.0, 0.0);
                        for t in 0..taps.n {
                            let base = taps.idx[t] * c + h * dh;
                            let dot: f64 = cache.values[s][base..base + dh].iter().zip(g).map(|(x, y)| x * y).sum();
                            da += taps.w[t] * dot;
                            g0 += taps.d0[t] * dot;
                            g1 += taps.d1[t] * dot;
                            for (dv, gy) in dvalues[s][base..base + dh].iter_mut().zip(g) {
                                *dv += a * taps.w[t] * gy;
                            }
                        }
                        dattn[k] = da;
                        doff[2 * k] = if k0 { 0.0 } else { a * g0 };
                        doff[2 * k + 1] = if k1 { 0.0 } else { a * g1 };
                    }
                }
            }
        }
        let dlogits = kernels::softmax_rows_backward(&cache.attn, &dattn, sr);
        let mut dqp = self.offset.backward(ps, &cache.qp, &doff);
        add_into(&mut dqp, &self.weight.backward(ps, &cache.qp, &dlogits));
        let dbq = self.query.backward(ps, bq, &dqp);
        let dmaps = maps.iter().zip(&dvalues).map(|(m, dv)| self.value.backward(ps, m, dv)).collect();
        (dbq, dmaps)
    }
}

fn check_pyramid(pyramid: &MbiePyramid, cfg: &DeformAttnConfig) -> Result<()> {
    if pyramid.scales() != cfg.scales || pyramid.channels() != cfg.channels {
        return Err(Error::Config(format!(
            "pyramid has {} scales of {} channels, attention expects {} of {}",
            pyramid.scales(),
            pyramid.channels(),
            cfg.scales,
            cfg.channels
        )));
    }
    Ok(())
}

/// Multi-scale deformable attention of `b_q` `[N, C]` at normalized
/// reference points `refs` `[N, 2]` (row, column) over `pyramid`.
pub fn ms_deform_attn(
    b_q: &Tensor,
    refs: &Tensor,
    pyramid: &MbiePyramid,
    params: &DeformAttnParams,
    ps: &ParamStore,
) -> Result<Tensor> {
    check_pyramid(pyramid, &params.cfg)?;
    let n = b_q.numel() / b_q.last_dim();
    if b_q.last_dim() != params.cfg.channels || refs.shape() != [n, 2] {
        return Err(Error::Dimension("queries must be [N, C] with [N, 2] reference points".into()));
    }
    if refs.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Contract("reference points must lie in [0, 1]^2".into()));
    }
    let rf: Vec<(f64, f64)> = refs.data().chunks_exact(2).map(|p| (p[0], p[1])).collect();
    let maps: Vec<&[f64]> = pyramid.maps.iter().map(|m| m.data.data()).collect();
    let (y, _) = params.forward_raw(ps, b_q.data(), &rf, &maps, &pyramid.dims());
    Tensor::new(vec![n, params.cfg.channels], y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MbieConfig {
    pub channels: usize,
    pub heads: usize,
    pub points: usize,
    pub scales: usize,
    pub layers: usize,
}

/// Pre-norm block: `x + Attn(LN x)` then `+ MLP(LN ·)`.
#[derive(Debug, Clone)]
pub struct MbieLayer {
    pub attn: DeformAttnParams,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone, Default)]
struct LayerCache {
    x: Vec<f64>,
    ln1: LayerNormCache,
    nq: Vec<f64>,
    attn: AttnCache,
    ln2: LayerNormCache,
    n2: Vec<f64>,
    mlp: MlpCache,
}

impl MbieLayer {
    fn forward_raw(&self, ps: &ParamStore, x: &[f64], dims: &[(usize, usize)], refs: &[(f64, f64)]) -> (Vec<f64>, LayerCache) {
        let c = self.attn.cfg.channels;
        let (nq, ln1) = self.ln1.forward(ps, x);
        let maps = split_scales(x, dims, c);
        let (a, attn) = self.attn.forward_raw(ps, &nq, refs, &maps, dims);
        let mut x1 = x.to_vec();
        add_into(&mut x1, &a);
        let (n2, ln2) = self.ln2.forward(ps, &x1);
        let (m, mlp) = self.mlp.forward(ps, &n2);
        add_into(&mut x1, &m);
        (x1, LayerCache { x: x.to_vec(), ln1, nq, attn, ln2, n2, mlp })
    }

    fn backward_raw(&self, ps: &mut ParamStore, cache: &LayerCache, dims: &[(usize, usize)], refs: &[(f64, f64)], dy: &[f64]) -> Vec<f64> {
        let c = self.attn.cfg.channels;
        let dn2 = self.mlp.backward(ps, &cache.n2, &cache.mlp, dy);
        let mut dx1 = self.ln2.backward(ps, &cache.ln2, &dn2);
        add_into(&mut dx1, dy);
        let maps = split_scales(&cache.x, dims, c);
        let (dnq, dmaps) = self.attn.backward_raw(ps, &cache.attn, &cache.nq, refs, &maps, dims, &dx1);
        let mut dx = self.ln1.backward(ps, &cache.ln1, &dnq);
        add_into(&mut dx, &dx1);
        add_into(&mut dx, &dmaps.concat());
        dx
    }
}

/// Offset-predicting bilinear resampling of every scale to the target
/// grid followed by a per-cell linear fusion across scales.
#[derive(Debug, Clone)]
pub struct FuseParams {
    pub offset: Linear,
    pub fusion: Linear,
    pub scales: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Default)]
struct FuseCache {
    coarse_taps: Vec<Taps>,
    coarse: Vec<f64>,
    off: Vec<f64>,
    concat: Vec<f64>,
}

impl FuseParams {
    /// Offsets start at zero and the fusion starts as the scale average.
    pub fn new(ps: &mut ParamStore, name: &str, scales: usize, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let offset = Linear::new(ps, &format!("{name}.offset"), channels, 2 * scales, true, Init::Zeros, rng);
        let fusion = Linear::new(ps, &format!("{name}.fusion"), scales * channels, channels, true, Init::Zeros, rng);
        let w = ps.get_mut(fusion.w).data_mut();
        for s in 0..scales {
            for ch in 0..channels {
                w[(s * channels + ch) * channels + ch] = 1.0 / scales as f64;
            }
        }
        Self { offset, fusion, scales, channels }
    }

    fn sample_taps(&self, dims: (usize, usize), target: &CartesianGridSpec, row: usize, col: usize, o0: f64, o1: f64) -> Taps {
        let (c0, _) = axis_coord((row as f64 + 0.5) / target.rows as f64, dims.0, o0);
        let (c1, _) = axis_coord((col as f64 + 0.5) / target.cols as f64, dims.1, o1);
        taps_2d(c0, c1, dims.0, dims.1, AxisMode::Border, AxisMode::Border)
    }

    fn forward_raw(&self, ps: &ParamStore, maps: &[&[f64]], dims: &[(usize, usize)], target: &CartesianGridSpec) -> (Vec<f64>, FuseCache) {
        let (c, s_n) = (self.channels, self.scales);
        let coarse_taps = crate::sampler::resize_taps(dims[0].0, dims[0].1, target);
        let coarse = crate::sampler::sample_with_taps(maps[0], c, &coarse_taps);
        let off = self.offset.forward(ps, &coarse);
        let mut concat = vec![0.0; target.cells() * s_n * c];
        for row in 0..target.rows {
            for col in 0..target.cols {
                let t = row * target.cols + col;
                for s in 0..s_n {
                    let taps = self.sample_taps(dims[s], target, row, col, off[t * 2 * s_n + 2 * s], off[t * 2 * s_n + 2 * s + 1]);
                    crate::sampler::gather(maps[s], c, &taps, &mut concat[(t * s_n + s) * c..(t * s_n + s + 1) * c]);
                }
            }
        }
        let out = self.fusion.forward(ps, &concat);
        (out, FuseCache { coarse_taps, coarse, off, concat })
    }

    fn backward_raw(
        &self,
        ps: &mut ParamStore,
        cache: &FuseCache,
        maps: &[&[f64]],
        dims: &[(usize, usize)],
        target: &CartesianGridSpec,
        dy: &[f64],
    ) -> Vec<Vec<f64>> {
        let (c, s_n) = (self.channels, self.scales);
        let dconcat = self.fusion.backward(ps, &cache.concat, dy);
        let mut dmaps: Vec<Vec<f64>> = maps.iter().map(|m| vec![0.0; m.len()]).collect();
        let mut doff = vec![0.0; cache.off.len()];
        for row in 0..target.rows {
            for col in 0..target.cols {
                let t = row * target.cols + col;
                for s in 0..s_n {
                    let k = t * 2 * s_n + 2 * s;
                    let (o0, o1) = (cache.off[k], cache.off[k + 1]);
                    let taps = self.sample_taps(dims[s], target, row, col, o0, o1);
                    let g = &dconcat[(t * s_n + s) * c..(t * s_n + s + 1) * c];
                    crate::sampler::scatter(&mut dmaps[s], c, &taps, g);
                    let (g0, g1) = crate::sampler::coord_grad(maps[s], c, &taps, g);
                    doff[k] = if o0.abs() > dims[s].0 as f64 { 0.0 } else { g0 };
                    doff[k + 1] = if o1.abs() > dims[s].1 as f64 { 0.0 } else { g1 };
                }
            }
        }
        let dcoarse = self.offset.backward(ps, &cache.coarse, &doff);
        crate::sampler::sample_with_taps_backward(&mut dmaps[0], c, &cache.coarse_taps, &dcoarse);
        dmaps
    }
}

#[derive(Debug, Clone)]
pub struct MbieParams {
    pub cfg: MbieConfig,
    pub layers: Vec<MbieLayer>,
    pub fuse: FuseParams,
}

/// Forward state of the full encoder (interaction layers plus fusion).
#[derive(Debug, Clone, Default)]
pub struct MbieCache {
    layers: Vec<LayerCache>,
    fused_input: Vec<f64>,
    fuse: FuseCache,
}

impl MbieParams {
    pub fn new(ps: &mut ParamStore, cfg: MbieConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.scales < 2 || cfg.layers == 0 {
            return Err(Error::Config("the interaction encoder needs >= 2 scales and >= 1 layer".into()));
        }
        let acfg = DeformAttnConfig { channels: cfg.channels, heads: cfg.heads, points: cfg.points, scales: cfg.scales };
        let c = cfg.channels;
        let layers = (0..cfg.layers)
            .map(|l| {
                let n = format!("mbie.layer{l}");
                Ok(MbieLayer {
                    attn: DeformAttnParams::new(ps, &format!("{n}.attn"), acfg, rng)?,
                    ln1: LayerNorm::new(ps, &format!("{n}.ln1"), c, rng),
                    ln2: LayerNorm::new(ps, &format!("{n}.ln2"), c, rng),
                    mlp: Mlp::new(ps, &format!("{n}.mlp"), c, c, c, true, rng),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fuse = FuseParams::new(ps, "mbie.fuse", cfg.scales, c, rng);
        Ok(Self { cfg, layers, fuse })
    }

    /// Interaction layers then fusion on a flat pyramid buffer.
    pub fn forward_raw(
        &self,
        ps: &ParamStore,
        pyramid: &[f64],
        dims: &[(usize, usize)],
        target: &CartesianGridSpec,
    ) -> (Vec<f64>, MbieCache) {
        let refs = cell_refs(dims);
        let mut x = pyramid.to_vec();
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.forward_raw(ps, &x, dims, &refs);
            layers.push(cache);
            x = y;
        }
        let maps = split_scales(&x, dims, self.cfg.channels);
        let (out, fuse) = self.fuse.forward_raw(ps, &maps, dims, target);
        (out, MbieCache { layers, fused_input: x, fuse })
    }

    /// Returns the gradient with respect to the flat input pyramid.
    pub fn backward_raw(
        &self,
        ps: &mut ParamStore,
        cache: &MbieCache,
        dims: &[(usize, usize)],
        target: &CartesianGridSpec,
        dy: &[f64],
    ) -> Vec<f64> {
        let refs = cell_refs(dims);
        let maps = split_scales(&cache.fused_input, dims, self.cfg.channels);
        let mut dx = self.fuse.backward_raw(ps, &cache.fuse, &maps, dims, target, dy).concat();
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            dx = layer.backward_raw(ps, lc, dims, &refs, &dx);
        }
        dx
    }
}

/// Applies the first `layers` interaction layers; every cell of every
/// scale queries all scales at its own center.
pub fn mbie_forward(pyramid: &MbiePyramid, layers: usize, params: &MbieParams, ps: &ParamStore) -> Result<MbiePyramid> {
    if layers == 0 || layers > params.layers.len() {
        return Err(Error::Config(format!("cannot run {layers} of {} interaction layers", params.layers.len())));
    }
    check_pyramid(pyramid, &params.layers[0].attn.cfg)?;
    let dims = pyramid.dims();
    let refs = cell_refs(&dims);
    let mut x = pyramid.flat();
    for layer in &params.layers[..layers] {
        x = layer.forward_raw(ps, &x, &dims, &refs).0;
    }
    pyramid.with_flat(&x)
}

/// Resamples every scale to `target` and fuses them per cell.
pub fn fuse_to_target(pyramid: &MbiePyramid, target: &CartesianGridSpec, params: &FuseParams, ps: &ParamStore) -> Result<BevFeatureMap> {
    target.validate()?;
    if target.half_extent != pyramid.half_extent() {
        return Err(Error::Config(format!(
            "target extent {} differs from pyramid extent {}",
            target.half_extent,
            pyramid.half_extent()
        )));
    }
    if pyramid.scales() != params.scales || pyramid.channels() != params.channels {
        return Err(Error::Config("fusion parameters do not match the pyramid".into()));
    }
    let maps: Vec<&[f64]> = pyramid.maps.iter().map(|m| m.data.data()).collect();
    let (out, _) = params.forward_raw(ps, &maps, &pyramid.dims(), target);
    BevFeatureMap::new(Tensor::new(vec![target.rows, target.cols, params.channels], out)?, *target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, seeded_rng};
    use rand::Rng;

    fn pyramid(sizes: &[usize], c: usize, seed: u64) -> MbiePyramid {
        let mut rng = seeded_rng(seed, 0);
        let maps = sizes
            .iter()
            .map(|&n| {
                let t = Tensor::from_fn(&[n, n, c], |_| rng.gen_range(-1.0..1.0));
                BevFeatureMap::new(t, CartesianGridSpec::square(n, 4.0).unwrap()).unwrap()
            })
            .collect();
        MbiePyramid::new(maps).unwrap()
    }

    fn randomize(ps: &mut ParamStore, seed: u64, scale: f64) {
        let mut rng = seeded_rng(seed, 7);
        for t in ps.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        }
    }

    fn set_identity(ps: &mut ParamStore, lin: &Linear) {
        let w = ps.get_mut(lin.w).data_mut();
        w.fill(0.0);
        for i in 0..lin.in_dim {
            w[i * lin.out_dim + i] = 1.0;
        }
        if let Some(b) = lin.b {
            ps.get_mut(b).data_mut().fill(0.0);
        }
    }

    #[test]
    fn pyramid_rejects_non_increasing_scales() {
        let a = pyramid(&[8], 2, 1).maps.remove(0);
        assert!(MbiePyramid::new(vec![a.clone(), a]).is_err());
    }

    #[test]
    fn uniform_zero_offset_is_mean_at_reference() {
        let pyr = pyramid(&[4, 8], 2, 3);
        let mut ps = ParamStore::new();
        let mut rng = seeded_rng(0, 0);
        let cfg = DeformAttnConfig { channels: 2, heads: 1, points: 2, scales: 2 };
        let p = DeformAttnParams::new(&mut ps, "a", cfg, &mut rng).unwrap();
        set_identity(&mut ps, &p.value);
        set_identity(&mut ps, &p.out);
        let refs = Tensor::new(vec![1, 2], vec![0.375, 0.625]).unwrap();
        let y = ms_deform_attn(&Tensor::zeros(&[1, 2]), &refs, &pyr, &p, &ps).unwrap();
        for ch in 0..2 {
            let mut e = 0.0;
            for m in &pyr.maps {
                let (h, w) = (m.spec.rows as f64, m.spec.cols as f64);
                let (r, c) = (0.375 * h - 0.5, 0.625 * w - 0.5);
                let (r0, c0) = (r.floor(), c.floor());
                let (fr, fc) = (r - r0, c - c0);
                let at = |i: f64, j: f64| m.data.data()[((i as usize) * m.spec.cols + j as usize) * 2 + ch];
                e += 0.5
                    * ((1.0 - fr) * (1.0 - fc) * at(r0, c0)
                        + (1.0 - fr) * fc * at(r0, c0 + 1.0)
                        + fr * (1.0 - fc) * at(r0 + 1.0, c0)
                        + fr * fc * at(r0 + 1.0, c0 + 1.0));
            }
            assert!((y.data()[ch] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_out_of_range_reference() {
        let pyr = pyramid(&[4, 8], 2, 3);
        let mut ps = ParamStore::new();
        let cfg = DeformAttnConfig { channels: 2, heads: 1, points: 1, scales: 2 };
        let p = DeformAttnParams::new(&mut ps, "a", cfg, &mut seeded_rng(0, 0)).unwrap();
        let refs = Tensor::new(vec![1, 2], vec![1.2, 0.5]).unwrap();
        let err = ms_deform_attn(&Tensor::zeros(&[1, 2]), &refs, &pyr, &p, &ps).unwrap_err();
        assert_eq!(err.kind(), "contract");
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let pyr = pyramid(&[4, 8], 4, 5);
        let mut ps = ParamStore::new();
        let cfg = DeformAttnConfig { channels: 4, heads: 2, points: 2, scales: 2 };
        let p = DeformAttnParams::new(&mut ps, "a", cfg, &mut seeded_rng(0, 0)).unwrap();
        randomize(&mut ps, 3, 1.0);
        let dims = pyr.dims();
        let refs = cell_refs(&dims);
        let flat = pyr.flat();
        let maps = split_scales(&flat, &dims, 4);
        let (_, cache) = p.forward_raw(&ps, &flat, &refs, &maps, &dims);
        for row in cache.attn.chunks(4) {
            assert!(row.iter().all(|&a| a >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_init_layer_is_identity() {
        let pyr = pyramid(&[4, 8], 4, 5);
        let mut ps = ParamStore::new();
        let cfg = MbieConfig { channels: 4, heads: 2, points: 2, scales: 2, layers: 2 };
        let p = MbieParams::new(&mut ps, cfg, &mut seeded_rng(0, 0)).unwrap();
        let out = mbie_forward(&pyr, 2, &p, &ps).unwrap();
        assert_eq!(out.flat(), pyr.flat());
    }

    #[test]
    fn single_scale_fusion_is_plain_resize() {
        let pyr = pyramid(&[4], 3, 8);
        let mut ps = ParamStore::new();
        let f = FuseParams::new(&mut ps, "f", 1, 3, &mut seeded_rng(0, 0));
        let target = CartesianGridSpec::square(7, 4.0).unwrap();
        let out = fuse_to_target(&pyr, &target, &f, &ps).unwrap();
        let taps = crate::sampler::resize_taps(4, 4, &target);
        let e = crate::sampler::sample_with_taps(pyr.maps[0].data.data(), 3, &taps);
        for (a, b) in out.data.data().iter().zip(&e) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_pyramid_fuses_to_constant() {
        let maps = [4usize, 8, 16]
            .iter()
            .map(|&n| BevFeatureMap::new(Tensor::from_fn(&[n, n, 2], |_| 0.75), CartesianGridSpec::square(n, 4.0).unwrap()).unwrap())
            .collect();
        let pyr = MbiePyramid::new(maps).unwrap();
        let mut ps = ParamStore::new();
        let f = FuseParams::new(&mut ps, "f", 3, 2, &mut seeded_rng(0, 0));
        for n in [5, 8, 13, 40] {
            let out = fuse_to_target(&pyr, &CartesianGridSpec::square(n, 4.0).unwrap(), &f, &ps).unwrap();
            assert!(out.data.data().iter().all(|v| (v - 0.75).abs() < 1e-12));
        }
    }

    #[test]
    fn native_target_passes_scale_through() {
        let pyr = pyramid(&[4, 8], 2, 9);
        let mut ps = ParamStore::new();
        let f = FuseParams::new(&mut ps, "f", 2, 2, &mut seeded_rng(0, 0));
        let w = ps.get_mut(f.fusion.w).data_mut();
        w.fill(0.0);
        w[(2) * 2] = 1.0;
        w[(3) * 2 + 1] = 1.0;
        let out = fuse_to_target(&pyr, &CartesianGridSpec::square(8, 4.0).unwrap(), &f, &ps).unwrap();
        assert_eq!(out.data.data(), pyr.maps[1].data.data());
    }

    #[test]
    fn fusion_rejects_extent_mismatch() {
        let pyr = pyramid(&[4, 8], 2, 9);
        let mut ps = ParamStore::new();
        let f = FuseParams::new(&mut ps, "f", 2, 2, &mut seeded_rng(0, 0));
        let err = fuse_to_target(&pyr, &CartesianGridSpec::square(8, 5.0).unwrap(), &f, &ps).unwrap_err();
        assert_eq!(err.kind(), "config");
    }

    #[test]
    fn encoder_gradient() {
        let pyr = pyramid(&[3, 5], 4, 2);
        let dims = pyr.dims();
        let target = CartesianGridSpec::square(4, 4.0).unwrap();
        let mut ps = ParamStore::new();
        let cfg = MbieConfig { channels: 4, heads: 2, points: 2, scales: 2, layers: 1 };
        let p = MbieParams::new(&mut ps, cfg, &mut seeded_rng(0, 0)).unwrap();
        randomize(&mut ps, 4, 0.4);
        let x_id = ps.push("input", Tensor::new(vec![pyr.flat().len()], pyr.flat()).unwrap());
        let mut rng = seeded_rng(1, 1);
        let weights: Vec<f64> = (0..target.cells() * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = grad_check(
            &mut ps,
            |ps, backward| {
                let x = ps.data(x_id).to_vec();
                let (y, cache) = p.forward_raw(ps, &x, &dims, &target);
                if backward {
                    let dx = p.backward_raw(ps, &cache, &dims, &target, &weights);
                    add_into(ps.grad_mut(x_id), &dx);
                }
                Ok(y.iter().zip(&weights).map(|(a, b)| a * b).sum())
            },
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }
}
