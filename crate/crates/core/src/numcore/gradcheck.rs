//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Flat index (over the concatenated parameters) of the worst relative error.
    pub worst_index: usize,
    pub probes: usize,
}

/// Compares analytic gradients against `(f(θ+εe) − f(θ−εe)) / 2ε` for every
/// parameter coordinate.
///
/// `f(params, true)` must evaluate the scalar and accumulate its analytic
/// gradient into the parameter gradient slots; `f(params, false)` only
/// evaluates.
pub fn grad_check<F>(params: &mut ParamStore, f: F, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore, bool) -> Result<f64>,
{
    let n = params.numel();
    run(params, f, eps, (0..n).collect())
}

/// Like [`grad_check`] but probes at most `max_probes` coordinates chosen
/// by a seeded draw.
pub fn grad_check_sampled<F>(params: &mut ParamStore, f: F, eps: f64, max_probes: usize, seed: u64) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore, bool) -> Result<f64>,
{
    let n = params.numel();
    let probes = if n <= max_probes {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = sample(&mut rng, n, max_probes).into_vec();
        v.sort_unstable();
        v
    };
    run(params, f, eps, probes)
}

fn run<F>(params: &mut ParamStore, mut f: F, eps: f64, probes: Vec<usize>) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore, bool) -> Result<f64>,
{
    if params.numel() == 0 {
        return Err(Error::Config("gradient check needs at least one parameter".into()));
    }
    params.zero_grads();
    let base = f(params, true)?;
    if !base.is_finite() {
        return Err(Error::Numeric("objective is not finite at the probe point".into()));
    }
    let analytic: Vec<f64> = params
        .tensors_mut()
        .iter_mut()
        .flat_map(|t| t.grad_mut().to_vec())
        .collect();
    let offsets: Vec<usize> = params
        .tensors()
        .iter()
        .scan(0, |acc, t| {
            let start = *acc;
            *acc += t.numel();
            Some(start)
        })
        .collect();

    let mut report = GradCheckReport { max_abs_err: 0.0, max_rel_err: 0.0, worst_index: probes[0], probes: probes.len() };
    for &flat in &probes {
        let ti = offsets.partition_point(|&o| o <= flat) - 1;
        let local = flat - offsets[ti];
        let orig = params.tensors()[ti].data()[local];
        params.tensors_mut()[ti].data_mut()[local] = orig + eps;
        let fp = f(params, false);
        params.tensors_mut()[ti].data_mut()[local] = orig - eps;
        let fm = f(params, false);
        params.tensors_mut()[ti].data_mut()[local] = orig;
        let (fp, fm) = (fp?, fm?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!("non-finite objective while probing coordinate {flat}")));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[flat];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = flat;
        }
    }
    Ok(report)
}

/// Checks directional derivatives along `directions` dense random unit
/// vectors: the analytic `g·v` against `(f(θ+εv) − f(θ−εv)) / 2ε`.
/// `worst_index` is the worst direction.
pub fn grad_check_directional<F>(params: &mut ParamStore, mut f: F, eps: f64, directions: usize, seed: u64) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore, bool) -> Result<f64>,
{
    let n = params.numel();
    if n == 0 || directions == 0 {
        return Err(Error::Config("directional check needs parameters and at least one direction".into()));
    }
    params.zero_grads();
    f(params, true)?;
    let analytic: Vec<f64> = params.tensors_mut().iter_mut().flat_map(|t| t.grad_mut().to_vec()).collect();
    let origin: Vec<Vec<f64>> = params.tensors().iter().map(|t| t.data().to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { max_abs_err: 0.0, max_rel_err: 0.0, worst_index: 0, probes: directions };
    for d in 0..directions {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        let mut eval = |step: f64| {
            let mut k = 0;
            for (t, o) in params.tensors_mut().iter_mut().zip(&origin) {
                for (x, x0) in t.data_mut().iter_mut().zip(o) {
                    *x = x0 + step * v[k];
                    k += 1;
                }
            }
            f(params, false)
        };
        let (fp, fm) = (eval(eps), eval(-eps));
        for (t, o) in params.tensors_mut().iter_mut().zip(&origin) {
            t.data_mut().copy_from_slice(o);
        }
        let (fp, fm) = (fp?, fm?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!("non-finite objective along direction {d}")));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a: f64 = analytic.iter().zip(&v).map(|(g, x)| g * x).sum();
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = d;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{seeded_rng, Init};

    fn quadratic(ps: &mut ParamStore, backward: bool, bias: f64) -> Result<f64> {
        let x = ps.tensors()[0].data().to_vec();
        if backward {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v + bias).collect();
            ps.tensors_mut()[0].grad_mut().copy_from_slice(&g);
        }
        Ok(x.iter().map(|v| v * v).sum())
    }

    #[test]
    fn directional_check_accepts_correct_and_rejects_wrong_gradients() {
        let mut ps = ParamStore::new();
        ps.add("x", &[10], Init::Uniform(1.0), &mut seeded_rng(0, 0));
        let good = grad_check_directional(&mut ps, |p, b| quadratic(p, b, 0.0), 1e-6, 8, 1).unwrap();
        assert!(good.max_rel_err < 1e-8, "{good:?}");
        let bad = grad_check_directional(&mut ps, |p, b| quadratic(p, b, 0.3), 1e-6, 8, 1).unwrap();
        assert!(bad.max_rel_err > 1e-2, "{bad:?}");
        let coord = grad_check(&mut ps, |p, b| quadratic(p, b, 0.3), 1e-6).unwrap();
        assert!(coord.max_rel_err > 1e-2);
    }
}
