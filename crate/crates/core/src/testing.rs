//! Adapters from engine types to the plain-number oracles.

use crate::denoiser::GmmPrior;
use crate::linalg::{Matrix, Vector};
use crate::oracles::{self, Comp1, Comp2, Measurement};

pub fn comps_1d(prior: &GmmPrior) -> Vec<Comp1> {
    prior.components().iter().map(|c| (c.weight, c.mean[0], c.cov[(0, 0)])).collect()
}

pub fn comps_2d(prior: &GmmPrior) -> Vec<Comp2> {
    prior
        .components()
        .iter()
        .map(|c| (c.weight, [c.mean[0], c.mean[1]], [[c.cov[(0, 0)], c.cov[(0, 1)]], [c.cov[(1, 0)], c.cov[(1, 1)]]]))
        .collect()
}

pub fn quadrature_mean_1d(prior: &GmmPrior, ab: f64, x_t: f64, lo: f64, hi: f64, step: f64) -> f64 {
    oracles::quad_mean_1d(&comps_1d(prior), ab, x_t, lo, hi, step)
}

pub fn quadrature_mean_2d(prior: &GmmPrior, ab: f64, x_t: &Vector, meas: Option<(&Matrix, &Vector, f64)>) -> Vector {
    let rows: Vec<[f64; 2]> = meas.map(|(h, _, _)| h.row_iter().map(|r| [r[0], r[1]]).collect()).unwrap_or_default();
    let ys: Vec<f64> = meas.map(|(_, y, _)| y.iter().copied().collect()).unwrap_or_default();
    let m = meas.map(|(_, _, sigma)| Measurement { rows: &rows, y: &ys, sigma });
    let r = oracles::quad_mean_2d(&comps_2d(prior), ab, [x_t[0], x_t[1]], m.as_ref());
    Vector::from_vec(r.to_vec())
}
