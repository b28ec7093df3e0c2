//! Bilinear sampling kernels.
//!
//! All samplers use the half-pixel convention: a normalized coordinate `u`
//! over `n` bins maps to the continuous index `u·n − 0.5`, so bin centers
//! sit at integer indices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::polargrid::{CartesianGridSpec, PolarGridSpec, SamplingGrid};

/// How an axis treats indices outside `[0, n-1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AxisMode {
    /// Out-of-range neighbors contribute zero.
    Zeros,
    /// The continuous index is clamped into `[0, n-1]`.
    Border,
    /// Indices wrap modulo `n`.
    Wrap,
}

/// Up to four neighbor taps of a 2-D bilinear sample, with the derivative
/// of each weight with respect to the two continuous coordinates.
#[derive(Debug, Clone, Copy, Default)]
pub struct Taps {
    pub idx: [usize; 4],
    pub w: [f64; 4],
    pub d0: [f64; 4],
    pub d1: [f64; 4],
    pub n: usize,
}

impl Taps {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.n).map(move |k| (self.idx[k], self.w[k]))
    }

    pub fn weight_sum(&self) -> f64 {
        self.w[..self.n].iter().sum()
    }
}

fn axis_taps(coord: f64, n: usize, mode: AxisMode) -> ([(usize, f64, f64); 2], usize) {
    let mut out = [(0usize, 0.0f64, 0.0f64); 2];
    let mut k = 0;
    match mode {
        AxisMode::Border => {
            let hi = (n - 1) as f64;
            if n == 1 {
                return ([(0, 1.0, 0.0), (0, 0.0, 0.0)], 1);
            }
            let clamped = coord < 0.0 || coord > hi;
            let c = coord.clamp(0.0, hi);
            let i0 = (c.floor() as usize).min(n - 2);
            let f = c - i0 as f64;
            let d = if clamped { 0.0 } else { 1.0 };
            out[0] = (i0, 1.0 - f, -d);
            out[1] = (i0 + 1, f, d);
            k = 2;
        }
        AxisMode::Zeros => {
            let fl = coord.floor();
            let f = coord - fl;
            for (off, w, d) in [(0.0, 1.0 - f, -1.0), (1.0, f, 1.0)] {
                let i = fl + off;
                if i >= 0.0 && i < n as f64 {
                    out[k] = (i as usize, w, d);
                    k += 1;
                }
            }
        }
        AxisMode::Wrap => {
            let fl = coord.floor();
            let f = coord - fl;
            let i0 = (fl as i64).rem_euclid(n as i64) as usize;
            out[0] = (i0, 1.0 - f, -1.0);
            out[1] = ((i0 + 1) % n, f, 1.0);
            k = 2;
        }
    }
    (out, k)
}

/// Bilinear taps at continuous index `(c0, c1)` of an `[n0, n1]` grid;
/// flat indices are `i0 * n1 + i1`.
pub fn taps_2d(c0: f64, c1: f64, n0: usize, n1: usize, m0: AxisMode, m1: AxisMode) -> Taps {
    let (a, na) = axis_taps(c0, n0, m0);
    let (b, nb) = axis_taps(c1, n1, m1);
    let mut t = Taps::default();
    for &(ia, wa, da) in &a[..na] {
        for &(ib, wb, db) in &b[..nb] {
            t.idx[t.n] = ia * n1 + ib;
            t.w[t.n] = wa * wb;
            t.d0[t.n] = da * wb;
            t.d1[t.n] = wa * db;
            t.n += 1;
        }
    }
    t
}

/// Taps of a normalized polar query `(φ̂, σ̂)` on an `[A, R]` polar grid.
///
/// Queries with `σ̂` outside `[0, 1]` have no taps (zero padding); inside,
/// the radial index is clamped so the weights form a partition of unity.
pub fn polar_taps(phi_hat: f64, sigma_hat: f64, azimuth_bins: usize, radial_bins: usize, wrap_phi: bool) -> Result<Taps> {
    if !phi_hat.is_finite() || !sigma_hat.is_finite() {
        return Err(Error::Numeric(format!("non-finite sampling coordinate ({phi_hat}, {sigma_hat})")));
    }
    if !(0.0..=1.0).contains(&sigma_hat) {
        return Ok(Taps::default());
    }
    let (phi, mode) = if wrap_phi { (phi_hat.rem_euclid(1.0), AxisMode::Wrap) } else { (phi_hat, AxisMode::Zeros) };
    let a = phi * azimuth_bins as f64 - 0.5;
    let r = sigma_hat * radial_bins as f64 - 0.5;
    Ok(taps_2d(a, r, azimuth_bins, radial_bins, mode, AxisMode::Border))
}

/// Gathers `Σ w·map[idx]` rows of width `c` into `out`.
#[inline]
pub fn gather(map: &[f64], c: usize, taps: &Taps, out: &mut [f64]) {
    for (idx, w) in taps.iter() {
        if w == 0.0 {
            continue;
        }
        let src = &map[idx * c..(idx + 1) * c];
        for (o, s) in out.iter_mut().zip(src) {
            *o += w * s;
        }
    }
}

/// Scatters `w·dout` back onto the tapped rows.
#[inline]
pub fn scatter(dmap: &mut [f64], c: usize, taps: &Taps, dout: &[f64]) {
    for (idx, w) in taps.iter() {
        if w == 0.0 {
            continue;
        }
        let dst = &mut dmap[idx * c..(idx + 1) * c];
        for (d, g) in dst.iter_mut().zip(dout) {
            *d += w * g;
        }
    }
}

/// Gradient of a sample with respect to its two continuous coordinates,
/// given the upstream gradient `dout`.
#[inline]
pub fn coord_grad(map: &[f64], c: usize, taps: &Taps, dout: &[f64]) -> (f64, f64) {
    let mut g0 = 0.0;
    let mut g1 = 0.0;
    for k in 0..taps.n {
        let src = &map[taps.idx[k] * c..(taps.idx[k] + 1) * c];
        let dot: f64 = src.iter().zip(dout).map(|(a, b)| a * b).sum();
        g0 += taps.d0[k] * dot;
        g1 += taps.d1[k] * dot;
    }
    (g0, g1)
}

fn polar_dims(map: &Tensor) -> Result<(usize, usize, usize)> {
    match *map.shape() {
        [a, r, c] => Ok((a, r, c)),
        _ => Err(Error::Dimension(format!("polar map must be [A, R, C], got {:?}", map.shape()))),
    }
}

/// Samples a polar map `[A, R, C]` at normalized `(φ̂, σ̂)` queries.
pub fn bilinear_sample(map: &Tensor, coords: &[(f64, f64)], wrap_phi: bool) -> Result<Tensor> {
    let (a, r, c) = polar_dims(map)?;
    if coords.is_empty() {
        return Err(Error::Dimension("no sampling coordinates".into()));
    }
    let mut out = vec![0.0; coords.len() * c];
    for (q, &(ph, sh)) in coords.iter().enumerate() {
        let taps = polar_taps(ph, sh, a, r, wrap_phi)?;
        gather(map.data(), c, &taps, &mut out[q * c..(q + 1) * c]);
    }
    Tensor::new(vec![coords.len(), c], out)
}

/// Backward of [`bilinear_sample`]: scatters `dout` into `map`'s gradient.
pub fn bilinear_sample_backward(map: &mut Tensor, coords: &[(f64, f64)], wrap_phi: bool, dout: &Tensor) -> Result<()> {
    let (a, r, c) = polar_dims(map)?;
    if dout.shape() != [coords.len(), c] {
        return Err(Error::Dimension("sample backward: upstream gradient has the wrong shape".into()));
    }
    let grad = map.grad_mut();
    for (q, &(ph, sh)) in coords.iter().enumerate() {
        let taps = polar_taps(ph, sh, a, r, wrap_phi)?;
        scatter(grad, c, &taps, &dout.data()[q * c..(q + 1) * c]);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolarFeatureMap {
    /// `[A, R, C]`.
    pub data: Tensor,
    pub spec: PolarGridSpec,
}

impl PolarFeatureMap {
    pub fn new(data: Tensor, spec: PolarGridSpec) -> Result<Self> {
        let (a, r, _) = polar_dims(&data)?;
        if a != spec.azimuth_bins || r != spec.radial_bins {
            return Err(Error::Config(format!(
                "polar map extents {a}x{r} do not match spec {}x{}",
                spec.azimuth_bins, spec.radial_bins
            )));
        }
        Ok(Self { data, spec })
    }

    pub fn channels(&self) -> usize {
        self.data.last_dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureMap {
    /// `[H, W, C]`.
    pub data: Tensor,
    pub spec: CartesianGridSpec,
}

impl BevFeatureMap {
    pub fn new(data: Tensor, spec: CartesianGridSpec) -> Result<Self> {
        match *data.shape() {
            [h, w, _] if h == spec.rows && w == spec.cols => Ok(Self { data, spec }),
            _ => Err(Error::Config(format!(
                "BEV map shape {:?} does not match grid {}x{}",
                data.shape(),
                spec.rows,
                spec.cols
            ))),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.last_dim()
    }
}

/// Polar taps for every cell of a sampling grid (wrap-around azimuth).
pub fn grid_taps(grid: &SamplingGrid) -> Result<Vec<Taps>> {
    let (a, r) = (grid.polar.azimuth_bins, grid.polar.radial_bins);
    grid.coords
        .iter()
        .zip(&grid.out_of_range)
        .map(|(&(ph, sh), &oor)| if oor { Ok(Taps::default()) } else { polar_taps(ph, sh, a, r, true) })
        .collect()
}

/// Resamples a polar map onto a Cartesian grid; out-of-range cells are zero.
pub fn polar_to_cartesian(pmap: &PolarFeatureMap, grid: &SamplingGrid) -> Result<BevFeatureMap> {
    if grid.polar != pmap.spec {
        return Err(Error::Config("sampling grid was built for a different polar grid".into()));
    }
    let c = pmap.channels();
    let taps = grid_taps(grid)?;
    let out = sample_with_taps(pmap.data.data(), c, &taps);
    BevFeatureMap::new(Tensor::new(vec![grid.rows, grid.cols, c], out)?, grid.cart)
}

/// Gathers one sample per tap set from a row-major map with `c` channels.
pub fn sample_with_taps(map: &[f64], c: usize, taps: &[Taps]) -> Vec<f64> {
    let mut out = vec![0.0; taps.len() * c];
    for (t, o) in taps.iter().zip(out.chunks_exact_mut(c)) {
        gather(map, c, t, o);
    }
    out
}

/// Backward of [`sample_with_taps`] into `dmap`.
pub fn sample_with_taps_backward(dmap: &mut [f64], c: usize, taps: &[Taps], dout: &[f64]) {
    for (t, g) in taps.iter().zip(dout.chunks_exact(c)) {
        scatter(dmap, c, t, g);
    }
}

/// Taps that resize an `[h, w]` map onto `target` with border clamping;
/// both grids share one physical extent.
pub fn resize_taps(h: usize, w: usize, target: &CartesianGridSpec) -> Vec<Taps> {
    let mut out = Vec::with_capacity(target.cells());
    for row in 0..target.rows {
        let r = (row as f64 + 0.5) / target.rows as f64 * h as f64 - 0.5;
        for col in 0..target.cols {
            let c = (col as f64 + 0.5) / target.cols as f64 * w as f64 - 0.5;
            out.push(taps_2d(r, c, h, w, AxisMode::Border, AxisMode::Border));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::seeded_rng;
    use crate::polargrid::build_sampling_grid;
    use rand::Rng;

    fn ramp_map(a: usize, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(&[a, r, c], |i| (i as f64 * 0.37).sin() + 0.1 * i as f64)
    }

    #[test]
    fn bin_center_is_exact() {
        let m = ramp_map(8, 4, 3);
        let q = [((2.0 + 0.5) / 8.0, (1.0 + 0.5) / 4.0)];
        let s = bilinear_sample(&m, &q, true).unwrap();
        assert_eq!(s.data(), &m.data()[(2 * 4 + 1) * 3..(2 * 4 + 2) * 3]);
    }

    #[test]
    fn radial_midpoint_is_mean() {
        let m = ramp_map(8, 4, 2);
        let s = bilinear_sample(&m, &[(2.5 / 8.0, 2.0 / 4.0)], true).unwrap();
        for ch in 0..2 {
            let e = 0.5 * (m.data()[(2 * 4 + 1) * 2 + ch] + m.data()[(2 * 4 + 2) * 2 + ch]);
            assert!((s.data()[ch] - e).abs() < 1e-15);
        }
    }

    #[test]
    fn seam_is_periodic() {
        let m = ramp_map(8, 4, 2);
        let eps = 1e-7;
        let a = bilinear_sample(&m, &[(1.0 - eps, 0.3)], true).unwrap();
        let b = bilinear_sample(&m, &[(-eps, 0.3)], true).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_radius_is_zero() {
        let m = ramp_map(8, 4, 2);
        let s = bilinear_sample(&m, &[(0.3, 1.01), (0.3, -0.01)], true).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_coordinate_is_an_error() {
        let m = ramp_map(8, 4, 2);
        assert!(matches!(bilinear_sample(&m, &[(f64::NAN, 0.3)], true), Err(Error::Numeric(_))));
    }

    #[test]
    fn partition_of_unity() {
        let mut rng = seeded_rng(3, 0);
        for _ in 0..500 {
            let ph = rng.gen_range(-2.0..2.0);
            let sh = rng.gen_range(-0.2..1.2);
            let t = polar_taps(ph, sh, 16, 6, true).unwrap();
            let s = t.weight_sum();
            if (0.0..=1.0).contains(&sh) {
                assert!((s - 1.0).abs() < 1e-15);
            } else {
                assert_eq!(s, 0.0);
            }
        }
    }

    #[test]
    fn backward_scatters_weights() {
        let mut m = ramp_map(8, 4, 1);
        let q = [(0.01, 0.5), (0.5, 1.5)];
        bilinear_sample_backward(&mut m, &q, true, &Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap()).unwrap();
        let g: f64 = m.grad().unwrap().iter().sum();
        assert!((g - 1.0).abs() < 1e-15);
        // the seam query touches the last azimuth bin
        assert!(m.grad().unwrap()[7 * 4 + 1] > 0.0);
    }

    #[test]
    fn constant_map_samples_constant() {
        let polar = PolarGridSpec::new(16, 6, 0.0, 11.4).unwrap();
        let pm = PolarFeatureMap::new(Tensor::from_fn(&[16, 6, 2], |_| 2.5), polar).unwrap();
        let cart = CartesianGridSpec::square(12, 8.0).unwrap();
        let g = build_sampling_grid(&cart, &polar).unwrap();
        let bev = polar_to_cartesian(&pm, &g).unwrap();
        for (i, oor) in g.out_of_range.iter().enumerate() {
            let v = &bev.data.data()[i * 2..i * 2 + 2];
            if *oor {
                assert_eq!(v, &[0.0, 0.0]);
            } else {
                assert!(v.iter().all(|x| (x - 2.5).abs() < 1e-14));
            }
        }
    }

    #[test]
    fn spec_mismatch_is_rejected() {
        let polar = PolarGridSpec::new(16, 6, 0.0, 11.4).unwrap();
        let other = PolarGridSpec::new(16, 6, 0.0, 12.0).unwrap();
        let pm = PolarFeatureMap::new(Tensor::zeros(&[16, 6, 1]), polar).unwrap();
        let g = build_sampling_grid(&CartesianGridSpec::square(4, 8.0).unwrap(), &other).unwrap();
        assert!(matches!(polar_to_cartesian(&pm, &g), Err(Error::Config(_))));
    }

    #[test]
    fn resize_to_same_grid_is_identity() {
        let g = CartesianGridSpec::square(5, 1.0).unwrap();
        let map: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let out = sample_with_taps(&map, 1, &resize_taps(5, 5, &g));
        assert_eq!(out, map);
    }
}
