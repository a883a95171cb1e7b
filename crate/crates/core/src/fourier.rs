//! Momentum-space integrals behind the small-lambda scaling bounds.
//!
//! The degree-3 part of the hierarchy admits explicit integral bounds once
//! the operators are diagonalized by plane waves. This module evaluates
//! those integrals directly: the lower-bound integrals whose lambda-scaling
//! is lambda^{-1/4} in one dimension and |log lambda|^{1/2} in two, the
//! bubble kernel that controls the inner integration of the upper-bound
//! form, and the quadratic forms comparing both sides of that bound for a
//! supplied pair function. A small least-squares fitter extracts power or
//! log-power exponents from a series of (lambda, value) pairs.
//!
//! All integrands here vary on the momentum scale sqrt(lambda) near zero,
//! so quadratures use dyadic panels refined toward the origin with that
//! floor. Every integral is evaluated at two Gauss orders and the relative
//! mesh change must stay below 1e-4, otherwise the call fails rather than
//! returning a value with unknown error.

use num_complex::Complex64;
use rayon::prelude::*;
use thiserror::Error;

use crate::quad::{dyadic_edges, gauss_legendre};

/// Relative mesh-halving agreement demanded of every integral.
pub const MESH_CHECK_REL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum FourierError {
    #[error("invalid parameter: {0}")]
    BadParameter(String),
    #[error("quadrature mesh check failed: orders disagree by {rel:.3e} (limit {MESH_CHECK_REL:.0e})")]
    QuadratureTolerance { rel: f64 },
    #[error("grid too coarse for lambda: need at least {needed} points per axis, got {got}")]
    GridTooCoarse { needed: usize, got: usize },
}

/// Lattice dispersion: sum of 2 - 2 cos over the components, evaluated as
/// 4 sin^2(x/2) so small momenta keep full relative accuracy (the naive
/// difference loses all digits below |x| ~ 1e-8, which the small-lambda
/// integrals actually probe).
pub fn dispersion_omega(p: &[f64]) -> f64 {
    p.iter().map(|&x| omega1(x)).sum()
}

fn omega1(x: f64) -> f64 {
    let s = (0.5 * x).sin();
    4.0 * s * s
}

/// Deterministic pairwise tree summation; order does not depend on thread
/// scheduling because inputs arrive as a fixed slice.
fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2 => v[0] + v[1],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

/// Integration region for the explicit integrals: the full Brillouin zone,
/// or the diagnostic small-box device with quadratic dispersion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZoneRegion {
    #[default]
    FullZone,
    /// Box [-1/8, 1/8] with omega replaced by its quadratic approximation.
    Restricted,
}

// ---------------------------------------------------------------------------
// bubble kernel
// ---------------------------------------------------------------------------

/// Inner integration of the upper-bound kernel over the box [-1/8, 1/8]^d:
/// B(u, lambda) = int dv / (lambda + |u+v|^2 + |u-v|^2 + |u|^2). The
/// denominator is a + 2|v|^2 with a = lambda + 3|u|^2, so d=1 is closed form
/// and d=2 reduces to a one-dimensional quadrature of the closed form.
pub fn bubble_kernel(u: &[f64], lambda: f64) -> Result<f64, FourierError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(FourierError::BadParameter(format!(
            "lambda must be positive and finite, got {lambda}"
        )));
    }
    let a = lambda + 3.0 * u.iter().map(|x| x * x).sum::<f64>();
    match u.len() {
        1 => Ok(bubble_closed_1d(a)),
        2 => {
            let coarse = bubble_quad_2d(a, 12);
            let fine = bubble_quad_2d(a, 18);
            let rel = (fine - coarse).abs() / fine.abs().max(f64::MIN_POSITIVE);
            if rel > MESH_CHECK_REL {
                return Err(FourierError::QuadratureTolerance { rel });
            }
            Ok(fine)
        }
        d => Err(FourierError::BadParameter(format!(
            "bubble kernel covers d = 1 and 2, got {d}"
        ))),
    }
}

/// int_{-1/8}^{1/8} dv / (a + 2 v^2) in closed form.
fn bubble_closed_1d(a: f64) -> f64 {
    (2.0 / (2.0 * a).sqrt()) * ((0.125) * (2.0 / a).sqrt()).atan()
}

fn bubble_quad_2d(a: f64, per_panel: usize) -> f64 {
    // even in v1: 2 int_0^{1/8} dv1 of the 1d closed form at a + 2 v1^2,
    // refined toward zero on the scale sqrt(a)
    let upper = 0.125;
    let floor = (a.sqrt() / 8.0).min(upper / 2.0);
    let edges = dyadic_edges(upper, floor);
    let (gx, gw) = gauss_legendre(per_panel);
    let mut acc = Vec::new();
    for win in edges.windows(2) {
        let (lo, hi) = (win[0], win[1]);
        for (x, w) in gx.iter().zip(&gw) {
            let v1 = 0.5 * (hi - lo) * x + 0.5 * (lo + hi);
            acc.push(0.5 * (hi - lo) * w * bubble_closed_1d(a + 2.0 * v1 * v1));
        }
    }
    2.0 * pairwise_sum(&acc)
}

// ---------------------------------------------------------------------------
// degree-3 lower integrals
// ---------------------------------------------------------------------------

/// Lower-bound integral over the default full zone; see
/// [`degree3_lower_integral_in`].
pub fn degree3_lower_integral(lambda: f64, d: usize) -> Result<f64, FourierError> {
    degree3_lower_integral_in(lambda, d, ZoneRegion::FullZone)
}

/// The explicit degree-3 lower-bound integral:
/// d=1: int dxi / (lambda + omega(xi) (lambda + omega(xi))^{-1/2}) over the
/// zone; d=2: int dxi deta / (s + omega(xi) |log s|), s = lambda + omega(xi)
/// + omega(eta). The restricted region swaps the zone for the box
/// [-1/8, 1/8]^d and omega for its quadratic approximation.
pub fn degree3_lower_integral_in(
    lambda: f64,
    d: usize,
    region: ZoneRegion,
) -> Result<f64, FourierError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(FourierError::BadParameter(format!(
            "lambda must be positive and finite, got {lambda}"
        )));
    }
    match d {
        1 => {
            let coarse = lower_quad_1d(lambda, region, 12);
            let fine = lower_quad_1d(lambda, region, 18);
            let rel = (fine - coarse).abs() / fine.abs().max(f64::MIN_POSITIVE);
            if rel > MESH_CHECK_REL {
                return Err(FourierError::QuadratureTolerance { rel });
            }
            Ok(fine)
        }
        2 => {
            let coarse = lower_quad_2d(lambda, region, 12);
            let fine = lower_quad_2d(lambda, region, 18);
            let rel = (fine - coarse).abs() / fine.abs().max(f64::MIN_POSITIVE);
            if rel > MESH_CHECK_REL {
                return Err(FourierError::QuadratureTolerance { rel });
            }
            Ok(fine)
        }
        _ => Err(FourierError::BadParameter(format!(
            "lower integral covers d = 1 and 2, got {d}"
        ))),
    }
}

fn region_params(region: ZoneRegion, d: usize) -> (f64, bool) {
    match region {
        ZoneRegion::FullZone => {
            let hi = if d == 1 { std::f64::consts::PI } else { std::f64::consts::PI };
            (hi, false)
        }
        ZoneRegion::Restricted => (0.125, true),
    }
}

fn lower_dispersion(x: f64, quadratic: bool) -> f64 {
    if quadratic {
        x * x
    } else {
        omega1(x)
    }
}

/// Panel edges for the half-zone [0, hi]: breakpoints at lambda^{3/4} and
/// lambda^{1/2} isolate the region where the integrand crosses over, with
/// dyadic refinement between scales.
fn lower_edges_1d(lambda: f64, hi: f64) -> Vec<f64> {
    let mut brk: Vec<f64> = [lambda.powf(0.75), lambda.sqrt(), 0.1, hi]
        .iter()
        .copied()
        .filter(|&b| b > 0.0 && b < hi)
        .collect();
    brk.push(hi);
    brk.sort_by(|a, b| a.partial_cmp(b).unwrap());
    brk.dedup();
    let mut edges = vec![0.0];
    let mut lo = 0.0f64;
    for &b in &brk {
        // dyadic subdivision of [lo, b] from above, at most 40 levels
        let mut sub = vec![b];
        let mut e = b;
        let floor = (lo.max(b / 1e12)).max(1e-300);
        let mut count = 0;
        while e / 2.0 > floor && count < 40 {
            e /= 2.0;
            sub.push(e);
            count += 1;
        }
        sub.reverse();
        for s in sub {
            if s > lo {
                edges.push(s);
            }
        }
        lo = b;
    }
    edges
}

fn lower_quad_1d(lambda: f64, region: ZoneRegion, per_panel: usize) -> f64 {
    let (hi, quadratic) = region_params(region, 1);
    let edges = lower_edges_1d(lambda, hi);
    let (gx, gw) = gauss_legendre(per_panel);
    let mut acc = Vec::new();
    for win in edges.windows(2) {
        let (lo, up) = (win[0], win[1]);
        for (x, w) in gx.iter().zip(&gw) {
            let xi = 0.5 * (up - lo) * x + 0.5 * (lo + up);
            let om = lower_dispersion(xi, quadratic);
            acc.push(0.5 * (up - lo) * w / (lambda + om / (lambda + om).sqrt()));
        }
    }
    // even integrand: double the half-zone
    2.0 * pairwise_sum(&acc)
}

fn lower_quad_2d(lambda: f64, region: ZoneRegion, per_panel: usize) -> f64 {
    let (hi, quadratic) = region_params(region, 2);
    let floor = (lambda.sqrt() / 8.0).min(hi / 2.0);
    let edges = dyadic_edges(hi, floor);
    let (gx, gw) = gauss_legendre(per_panel);
    let mut xs = Vec::new();
    let mut ws = Vec::new();
    for win in edges.windows(2) {
        let (lo, up) = (win[0], win[1]);
        for (x, w) in gx.iter().zip(&gw) {
            xs.push(0.5 * (up - lo) * x + 0.5 * (lo + up));
            ws.push(0.5 * (up - lo) * w);
        }
    }
    // even in both variables: quadruple the positive quadrant; rows are
    // summed independently so the reduction order is fixed
    let rows: Vec<f64> = (0..xs.len())
        .into_par_iter()
        .map(|i| {
            let xi = xs[i];
            let oxi = lower_dispersion(xi, quadratic);
            let row: Vec<f64> = (0..xs.len())
                .map(|j| {
                    let s = lambda + oxi + lower_dispersion(xs[j], quadratic);
                    ws[i] * ws[j] / (s + oxi * s.ln().abs())
                })
                .collect();
            pairwise_sum(&row)
        })
        .collect();
    4.0 * pairwise_sum(&rows)
}

// ---------------------------------------------------------------------------
// degree-3 upper form
// ---------------------------------------------------------------------------

/// Both sides of the degree-3 upper bound for a supplied pair function.
#[derive(Debug, Clone)]
pub struct UpperFormReport {
    /// Gradient-weighted bubble form: int omega_g(u) B(u, lambda) |Fhat|^2.
    pub lhs: f64,
    /// The closed comparison weight: (lambda + omega)^{-1/2} in d=1,
    /// |log(lambda + omega)| in d=2.
    pub rhs: f64,
    /// lhs / rhs; zero when both sides vanish.
    pub ratio: f64,
}

/// Evaluate the two quadratic forms of the degree-3 upper bound for samples
/// of the pair transform on a uniform grid over [-pi, pi)^d (row-major for
/// d=2, n x n with n = sqrt(len)). The grid must resolve the sqrt(lambda)
/// scale: spacing at most sqrt(lambda)/4 per axis.
pub fn degree3_upper_form(
    fhat: &[Complex64],
    lambda: f64,
    d: usize,
) -> Result<UpperFormReport, FourierError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(FourierError::BadParameter(format!(
            "lambda must be positive and finite, got {lambda}"
        )));
    }
    let needed = (8.0 * std::f64::consts::PI / lambda.sqrt()).ceil() as usize;
    match d {
        1 => {
            let n = fhat.len();
            if n < needed {
                return Err(FourierError::GridTooCoarse { needed, got: n });
            }
            let du = 2.0 * std::f64::consts::PI / n as f64;
            let mut lhs_terms = Vec::with_capacity(n);
            let mut rhs_terms = Vec::with_capacity(n);
            for (k, f) in fhat.iter().enumerate() {
                let u = -std::f64::consts::PI + du * k as f64;
                let fsq = f.norm_sqr();
                let og = omega1(u);
                let a = lambda + 3.0 * u * u;
                lhs_terms.push(og * bubble_closed_1d(a) * fsq * du);
                rhs_terms.push(og / (lambda + og).sqrt() * fsq * du);
            }
            let lhs = pairwise_sum(&lhs_terms);
            let rhs = pairwise_sum(&rhs_terms);
            let ratio = if rhs == 0.0 {
                if lhs == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                lhs / rhs
            };
            Ok(UpperFormReport { lhs, rhs, ratio })
        }
        2 => {
            let n = (fhat.len() as f64).sqrt().round() as usize;
            if n * n != fhat.len() {
                return Err(FourierError::BadParameter(format!(
                    "d = 2 grid must be square, got {} samples",
                    fhat.len()
                )));
            }
            if n < needed {
                return Err(FourierError::GridTooCoarse { needed, got: n });
            }
            let du = 2.0 * std::f64::consts::PI / n as f64;
            let cell = du * du;
            let pairs: Vec<(f64, f64)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let u1 = -std::f64::consts::PI + du * i as f64;
                    let og = omega1(u1);
                    if og == 0.0 {
                        return (0.0, 0.0);
                    }
                    let mut lhs_row = Vec::with_capacity(n);
                    let mut rhs_row = Vec::with_capacity(n);
                    for j in 0..n {
                        let u2 = -std::f64::consts::PI + du * j as f64;
                        let fsq = fhat[i * n + j].norm_sqr();
                        let a = lambda + 3.0 * (u1 * u1 + u2 * u2);
                        lhs_row.push(og * bubble_quad_2d(a, 12) * fsq * cell);
                        let om = omega1(u1) + omega1(u2);
                        rhs_row.push(og * (lambda + om).ln().abs() * fsq * cell);
                    }
                    (pairwise_sum(&lhs_row), pairwise_sum(&rhs_row))
                })
                .collect();
            let lhs_rows: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let rhs_rows: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let lhs = pairwise_sum(&lhs_rows);
            let rhs = pairwise_sum(&rhs_rows);
            let ratio = if rhs == 0.0 {
                if lhs == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                lhs / rhs
            };
            Ok(UpperFormReport { lhs, rhs, ratio })
        }
        _ => Err(FourierError::BadParameter(format!(
            "upper form covers d = 1 and 2, got {d}"
        ))),
    }
}

// ---------------------------------------------------------------------------
// scaling fits
// ---------------------------------------------------------------------------

/// Fit model for a lambda series: value ~ lambda^a or value ~ |log lambda|^b.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitModel {
    Power,
    LogPower,
}

/// A series of (lambda, value) pairs with lambda strictly decreasing.
#[derive(Debug, Clone)]
pub struct ScalingSeries {
    lambdas: Vec<f64>,
    values: Vec<f64>,
}

impl ScalingSeries {
    pub fn new(lambdas: Vec<f64>, values: Vec<f64>) -> Result<Self, FourierError> {
        if lambdas.len() != values.len() {
            return Err(FourierError::BadParameter(format!(
                "series length mismatch: {} lambdas, {} values",
                lambdas.len(),
                values.len()
            )));
        }
        for w in lambdas.windows(2) {
            if !(w[1] < w[0]) {
                return Err(FourierError::BadParameter(
                    "lambdas must be strictly decreasing".into(),
                ));
            }
        }
        if lambdas.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(FourierError::BadParameter(
                "lambdas must be positive and finite".into(),
            ));
        }
        if values.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(FourierError::BadParameter(
                "values must be positive and finite for a log fit".into(),
            ));
        }
        Ok(ScalingSeries { lambdas, values })
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }
}

/// Least-squares exponent fit with a confidence band.
#[derive(Debug, Clone)]
pub struct ScalingFit {
    pub model: FitModel,
    pub exponent: f64,
    pub intercept: f64,
    /// Standard error of the exponent from the residual variance.
    pub std_error: f64,
    /// Euclidean norm of the log-space residuals.
    pub residual_norm: f64,
}

/// Straight-line least squares in transformed coordinates: log value against
/// log lambda (power model) or log |log lambda| (log-power model).
pub fn fit_scaling(series: &ScalingSeries, model: FitModel) -> Result<ScalingFit, FourierError> {
    let n = series.len();
    if n < 5 {
        return Err(FourierError::BadParameter(format!(
            "need at least 5 points for a fit, got {n}"
        )));
    }
    let xs: Vec<f64> = series
        .lambdas
        .iter()
        .map(|&l| match model {
            FitModel::Power => l.ln(),
            FitModel::LogPower => l.ln().abs().ln(),
        })
        .collect();
    let ys: Vec<f64> = series.values.iter().map(|&v| v.ln()).collect();
    let xbar = xs.iter().sum::<f64>() / n as f64;
    let ybar = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
    if sxx == 0.0 {
        return Err(FourierError::BadParameter(
            "zero variance in the fit abscissa".into(),
        ));
    }
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - xbar) * (y - ybar))
        .sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let rss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let std_error = if n > 2 {
        (rss / (n as f64 - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(ScalingFit {
        model,
        exponent: slope,
        intercept,
        std_error,
        residual_norm: rss.sqrt(),
    })
}
