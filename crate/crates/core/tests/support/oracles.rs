//! Brute-force reference computations used by the test suites.
//!
//! Nothing in here touches the engine: inputs are plain numbers so the
//! oracles stay independent of the code paths they check.
#![allow(dead_code)]

use std::f64::consts::PI;

/// 1D mixture component: (weight, mean, variance).
pub type Comp1 = (f64, f64, f64);
/// 2D mixture component: (weight, mean, covariance).
pub type Comp2 = (f64, [f64; 2], [[f64; 2]; 2]);

fn normal_pdf(x: f64, m: f64, v: f64) -> f64 {
    (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt()
}

/// `E[x0 | x_t]` by trapezoid quadrature of `x p(x) N(x_t; sqrt(ab) x, 1 - ab)`.
pub fn quad_mean_1d(comps: &[Comp1], ab: f64, x_t: f64, lo: f64, hi: f64, step: f64) -> f64 {
    let n = ((hi - lo) / step).round() as usize;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..=n {
        let x = lo + i as f64 * step;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        let prior: f64 = comps.iter().map(|&(p, m, v)| p * normal_pdf(x, m, v)).sum();
        let f = w * prior * normal_pdf(x_t, ab.sqrt() * x, 1.0 - ab);
        num += x * f;
        den += f;
    }
    num / den
}

fn log_normal2(d: [f64; 2], c: [[f64; 2]; 2]) -> f64 {
    let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
    let q = (c[1][1] * d[0] * d[0] - 2.0 * c[0][1] * d[0] * d[1] + c[0][0] * d[1] * d[1]) / det;
    -0.5 * q - 0.5 * det.ln() - (2.0 * PI).ln()
}

/// Linear measurement `y = H x0 + sigma z` with `H` given as rows.
pub struct Measurement<'a> {
    pub rows: &'a [[f64; 2]],
    pub y: &'a [f64],
    pub sigma: f64,
}

fn log_integrand_2d(comps: &[Comp2], ab: f64, x_t: [f64; 2], meas: Option<&Measurement>, x: [f64; 2]) -> f64 {
    let prior: f64 = comps.iter().map(|&(w, m, c)| w * log_normal2([x[0] - m[0], x[1] - m[1]], c).exp()).sum();
    let mut log = prior.ln();
    let s = ab.sqrt();
    for i in 0..2 {
        log += -(x_t[i] - s * x[i]).powi(2) / (2.0 * (1.0 - ab));
    }
    if let Some(m) = meas {
        for (row, y) in m.rows.iter().zip(m.y) {
            let pred = row[0] * x[0] + row[1] * x[1];
            log += -(y - pred).powi(2) / (2.0 * m.sigma * m.sigma);
        }
    }
    log
}

/// `E[x0 | x_t (, y)]` by 2D trapezoid quadrature. A coarse scan over
/// `[-15, 15]^2` locates the mass, then a fine grid integrates the box that
/// holds everything within `exp(-60)` of the peak.
pub fn quad_mean_2d(comps: &[Comp2], ab: f64, x_t: [f64; 2], meas: Option<&Measurement>) -> [f64; 2] {
    let coarse = 0.05;
    let n = (30.0 / coarse) as usize;
    let mut pts = Vec::with_capacity((n + 1) * (n + 1));
    let mut best = f64::NEG_INFINITY;
    for i in 0..=n {
        for j in 0..=n {
            let x = [-15.0 + i as f64 * coarse, -15.0 + j as f64 * coarse];
            let l = log_integrand_2d(comps, ab, x_t, meas, x);
            best = best.max(l);
            pts.push((x, l));
        }
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for (x, l) in &pts {
        if *l > best - 60.0 {
            for d in 0..2 {
                lo[d] = lo[d].min(x[d] - 2.0 * coarse);
                hi[d] = hi[d].max(x[d] + 2.0 * coarse);
            }
        }
    }
    let m = 800usize;
    let h = [(hi[0] - lo[0]) / m as f64, (hi[1] - lo[1]) / m as f64];
    let (mut num, mut den) = ([0.0; 2], 0.0);
    for i in 0..=m {
        let wi = if i == 0 || i == m { 0.5 } else { 1.0 };
        for j in 0..=m {
            let wj = if j == 0 || j == m { 0.5 } else { 1.0 };
            let x = [lo[0] + i as f64 * h[0], lo[1] + j as f64 * h[1]];
            let f = wi * wj * (log_integrand_2d(comps, ab, x_t, meas, x) - best).exp();
            num[0] += x[0] * f;
            num[1] += x[1] * f;
            den += f;
        }
    }
    [num[0] / den, num[1] / den]
}

/// `tr((A^1/2 B A^1/2)^1/2)` for 2x2 SPD matrices, via the closed-form 2x2
/// square root `sqrt(M) = (M + sqrt(det M) I) / sqrt(tr M + 2 sqrt(det M))`.
pub fn frechet_2d(mu_a: [f64; 2], a: [[f64; 2]; 2], mu_b: [f64; 2], b: [[f64; 2]; 2]) -> f64 {
    fn sqrt2(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
        let det = (m[0][0] * m[1][1] - m[0][1] * m[1][0]).max(0.0);
        let sd = det.sqrt();
        let t = (m[0][0] + m[1][1] + 2.0 * sd).sqrt();
        [[(m[0][0] + sd) / t, m[0][1] / t], [m[1][0] / t, (m[1][1] + sd) / t]]
    }
    fn mul(x: [[f64; 2]; 2], y: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
        let mut r = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                r[i][j] = x[i][0] * y[0][j] + x[i][1] * y[1][j];
            }
        }
        r
    }
    let ra = sqrt2(a);
    let inner = sqrt2(mul(mul(ra, b), ra));
    let d2 = (mu_a[0] - mu_b[0]).powi(2) + (mu_a[1] - mu_b[1]).powi(2);
    d2 + a[0][0] + a[1][1] + b[0][0] + b[1][1] - 2.0 * (inner[0][0] + inner[1][1])
}

/// Probability-flow ODE solution for 1D Gaussian data `N(mu, s2)` under the
/// VP process: the standardized state `(x - sqrt(ab) mu) / sqrt(ab s2 + 1 - ab)`
/// is conserved, so the flow maps quantiles to quantiles.
pub fn gaussian_flow_1d(mu: f64, s2: f64, ab_from: f64, ab_to: f64, x: f64) -> f64 {
    let std_from = (ab_from * s2 + 1.0 - ab_from).sqrt();
    let std_to = (ab_to * s2 + 1.0 - ab_to).sqrt();
    ab_to.sqrt() * mu + std_to / std_from * (x - ab_from.sqrt() * mu)
}

/// Sample mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}
