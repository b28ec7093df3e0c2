//! Polar and Cartesian BEV grids and the meshgrid that links them.
//!
//! Cartesian BEV axes: `w` runs along ego y (left) and indexes columns,
//! `h` runs along ego x (forward) and indexes rows. Azimuth is
//! `atan2(w, h)`, so `φ = 0` points forward and grows counter-clockwise,
//! matching [`crate::camgeom::column_azimuth`].

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::camgeom::wrap_angle;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarGridSpec {
    pub azimuth_bins: usize,
    pub radial_bins: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl PolarGridSpec {
    pub fn new(azimuth_bins: usize, radial_bins: usize, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        let s = Self { azimuth_bins, radial_bins, sigma_min, sigma_max };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.azimuth_bins < 4 || self.radial_bins < 2 {
            return Err(Error::Config(format!(
                "polar grid needs >= 4 azimuth and >= 2 radial bins, got {}x{}",
                self.azimuth_bins, self.radial_bins
            )));
        }
        if !(self.sigma_min >= 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::Config(format!("invalid radial range [{}, {}]", self.sigma_min, self.sigma_max)));
        }
        Ok(())
    }

    /// Radius covering the corners of a `[-L, L]²` square, rounded up to a
    /// tenth of a meter.
    pub fn covering_radius(half_extent: f64) -> f64 {
        (std::f64::consts::SQRT_2 * half_extent * 10.0).ceil() / 10.0
    }

    pub fn radial_bin_width(&self) -> f64 {
        (self.sigma_max - self.sigma_min) / self.radial_bins as f64
    }

    /// Azimuth of a bin center.
    pub fn azimuth_center(&self, a: usize) -> f64 {
        (a as f64 + 0.5) * TAU / self.azimuth_bins as f64
    }

    /// Radius of a bin center.
    pub fn radial_center(&self, r: usize) -> f64 {
        self.sigma_min + (r as f64 + 0.5) * self.radial_bin_width()
    }
}

/// Square-extent regular grid; rows follow ego x, columns ego y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartesianGridSpec {
    pub rows: usize,
    pub cols: usize,
    pub half_extent: f64,
}

impl CartesianGridSpec {
    pub fn new(rows: usize, cols: usize, half_extent: f64) -> Result<Self> {
        let s = Self { rows, cols, half_extent };
        s.validate()?;
        Ok(s)
    }

    pub fn square(n: usize, half_extent: f64) -> Result<Self> {
        Self::new(n, n, half_extent)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows < 2 || self.cols < 2 {
            return Err(Error::Config(format!("BEV grid must be at least 2x2, got {}x{}", self.rows, self.cols)));
        }
        if !(self.half_extent > 0.0 && self.half_extent.is_finite()) {
            return Err(Error::Config(format!("BEV extent must be positive, got {}", self.half_extent)));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Cell size along ego x (rows).
    pub fn cell_x(&self) -> f64 {
        2.0 * self.half_extent / self.rows as f64
    }

    /// Cell size along ego y (columns).
    pub fn cell_y(&self) -> f64 {
        2.0 * self.half_extent / self.cols as f64
    }

    /// Ego `(x, y)` of the center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let l = self.half_extent;
        ((row as f64 + 0.5) * self.cell_x() - l, (col as f64 + 0.5) * self.cell_y() - l)
    }

    /// Ego `(x, y)` of the low corner of cell `(row, col)`.
    pub fn cell_origin(&self, row: usize, col: usize) -> (f64, f64) {
        let l = self.half_extent;
        (row as f64 * self.cell_x() - l, col as f64 * self.cell_y() - l)
    }

    /// Cell containing an ego point, if inside the extent.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let l = self.half_extent;
        let r = ((x + l) / self.cell_x()).floor();
        let c = ((y + l) / self.cell_y()).floor();
        if r < 0.0 || c < 0.0 || r >= self.rows as f64 || c >= self.cols as f64 {
            None
        } else {
            Some((r as usize, c as usize))
        }
    }
}

/// Polar coordinates of every Cartesian cell center, normalized to the
/// polar grid's ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    pub cart: CartesianGridSpec,
    pub polar: PolarGridSpec,
    pub rows: usize,
    pub cols: usize,
    /// Row-major `[rows, cols]` of `(φ̂, σ̂)`.
    pub coords: Vec<(f64, f64)>,
    /// Cells whose radius falls outside `[sigma_min, sigma_max]`.
    pub out_of_range: Vec<bool>,
}

impl SamplingGrid {
    pub fn at(&self, row: usize, col: usize) -> (f64, f64) {
        self.coords[row * self.cols + col]
    }
}

/// `(φ, σ)` of a BEV point `(w, h)`: `φ = atan2(w, h)` in `[0, 2π)`,
/// `σ = hypot(w, h)`. The origin maps to `φ = 0`.
pub fn cart_to_polar(w: f64, h: f64) -> (f64, f64) {
    let sigma = w.hypot(h);
    let phi = if sigma == 0.0 { 0.0 } else { wrap_angle(w.atan2(h)) };
    (phi, sigma)
}

/// Min-max normalization of `(φ, σ)`; values outside the grid's range are
/// returned unclamped.
pub fn normalize_polar(phi: f64, sigma: f64, spec: &PolarGridSpec) -> Result<(f64, f64)> {
    let span = spec.sigma_max - spec.sigma_min;
    if !(span > 0.0) {
        return Err(Error::Config("degenerate radial range".into()));
    }
    Ok((phi / TAU, (sigma - spec.sigma_min) / span))
}

pub fn build_sampling_grid(cart: &CartesianGridSpec, polar: &PolarGridSpec) -> Result<SamplingGrid> {
    cart.validate()?;
    polar.validate()?;
    let mut coords = Vec::with_capacity(cart.cells());
    let mut out_of_range = Vec::with_capacity(cart.cells());
    for row in 0..cart.rows {
        for col in 0..cart.cols {
            let (x, y) = cart.cell_center(row, col);
            let (phi, sigma) = cart_to_polar(y, x);
            let (ph, sh) = normalize_polar(phi, sigma, polar)?;
            coords.push((ph, sh));
            out_of_range.push(!(0.0..=1.0).contains(&sh));
        }
    }
    Ok(SamplingGrid { cart: *cart, polar: *polar, rows: cart.rows, cols: cart.cols, coords, out_of_range })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn polar_to_cart(phi: f64, sigma: f64) -> (f64, f64) {
        (sigma * phi.sin(), sigma * phi.cos())
    }

    #[test]
    fn conversion_examples() {
        assert_eq!(cart_to_polar(0.0, 1.0), (0.0, 1.0));
        let (p, s) = cart_to_polar(1.0, 0.0);
        assert!((p - FRAC_PI_2).abs() < 1e-15 && s == 1.0);
        let (p, s) = cart_to_polar(3.0, 4.0);
        // atan(3/4) to 16 digits
        assert!((p - 0.643_501_108_793_284_4).abs() < 1e-15);
        assert_eq!(s, 5.0);
        assert_eq!(cart_to_polar(0.0, 0.0), (0.0, 0.0));
        let (p, _) = cart_to_polar(-1.0, 0.0);
        assert!((p - 1.5 * PI).abs() < 1e-15);
    }

    #[test]
    fn normalization_examples() {
        let spec = PolarGridSpec::new(8, 4, 0.0, 72.0).unwrap();
        assert_eq!(normalize_polar(0.0, 36.0, &spec).unwrap().1, 0.5);
        assert_eq!(normalize_polar(PI, 0.0, &spec).unwrap().0, 0.5);
        assert_eq!(normalize_polar(0.0, 72.0, &spec).unwrap().1, 1.0);
        let bad = PolarGridSpec { sigma_max: 0.0, ..spec };
        assert!(matches!(normalize_polar(0.0, 1.0, &bad), Err(Error::Config(_))));
        assert!(PolarGridSpec::new(8, 4, 5.0, 5.0).is_err());
    }

    #[test]
    fn two_by_two_grid() {
        let cart = CartesianGridSpec::square(2, 1.0).unwrap();
        let polar = PolarGridSpec::new(8, 4, 0.0, std::f64::consts::SQRT_2).unwrap();
        let g = build_sampling_grid(&cart, &polar).unwrap();
        // cell (row 1, col 1) is (x, y) = (0.5, 0.5)
        let (ph, sh) = g.at(1, 1);
        assert!((sh - 0.5).abs() < 1e-15);
        assert!((ph - 0.125).abs() < 1e-15);
        // corners share a radius
        for (r, c) in [(0, 0), (0, 1), (1, 0)] {
            assert!((g.at(r, c).1 - sh).abs() < 1e-15);
        }
    }

    #[test]
    fn point_symmetry() {
        let cart = CartesianGridSpec::square(6, 4.0).unwrap();
        let polar = PolarGridSpec::new(16, 8, 0.0, 6.0).unwrap();
        let g = build_sampling_grid(&cart, &polar).unwrap();
        for r in 0..6 {
            for c in 0..6 {
                let (p1, s1) = g.at(r, c);
                let (p2, s2) = g.at(5 - r, 5 - c);
                assert!((s1 - s2).abs() < 1e-14);
                let d = (p1 - p2).rem_euclid(1.0);
                assert!((d - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn corners_beyond_range_are_flagged() {
        let cart = CartesianGridSpec::square(4, 1.0).unwrap();
        let polar = PolarGridSpec::new(8, 4, 0.0, 1.0).unwrap();
        let g = build_sampling_grid(&cart, &polar).unwrap();
        assert!(g.out_of_range[0]);
        assert!(!g.out_of_range[5]);
    }

    #[test]
    fn refinement_nests_cell_centers() {
        let coarse = CartesianGridSpec::square(2, 1.0).unwrap();
        let fine = CartesianGridSpec::square(4, 1.0).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let (x, y) = coarse.cell_center(r, c);
                let kids: Vec<_> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(a, b)| fine.cell_center(2 * r + a, 2 * c + b))
                    .collect();
                let mx = kids.iter().map(|k| k.0).sum::<f64>() / 4.0;
                let my = kids.iter().map(|k| k.1).sum::<f64>() / 4.0;
                assert!((mx - x).abs() < 1e-15 && (my - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn round_trip_inside_range() {
        for i in 0..64 {
            for j in 0..64 {
                let w = -8.0 + 16.0 * i as f64 / 63.0;
                let h = -8.0 + 16.0 * j as f64 / 63.0;
                let (p, s) = cart_to_polar(w, h);
                let (w2, h2) = polar_to_cart(p, s);
                assert!((w - w2).abs() < 1e-9 && (h - h2).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn default_radius_rounds_up() {
        assert_eq!(PolarGridSpec::covering_radius(8.0), 11.4);
        assert_eq!(PolarGridSpec::covering_radius(51.2), 72.5);
    }

    #[test]
    fn cell_lookup() {
        let g = CartesianGridSpec::square(32, 8.0).unwrap();
        assert_eq!(g.cell_of(0.1, -0.1), Some((16, 15)));
        assert_eq!(g.cell_of(8.0, 0.0), None);
        let (ox, oy) = g.cell_origin(16, 15);
        assert_eq!((ox, oy), (0.0, -0.5));
    }
}
