//! Exact finite-torus reference computations.
//!
//! On tori with at most 16 sites the full generator fits in memory as a
//! sparse matrix over the 2^N configuration space. This module builds it and
//! derives everything the rest of the crate is tested against: stationarity
//! defects, exact two-point functions and diffusivities, the occupation
//! monomial (Walsh) conjugation of the generator, truncated-sector resolvent
//! pairings, and the Laplace-transform consistency check tying the
//! time-dependent diffusivity to the resolvent.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::lattice::{JumpLaw, LatticeError, TorusGeometry};
use crate::quad::GaussRule;

/// Hard cap on sites for the sparse generator (2^N states).
pub const MAX_ORACLE_SITES: usize = 16;
/// Hard cap for dense basis-conjugation work (2^N x 2^N matrices).
pub const MAX_DENSE_SITES: usize = 10;
/// Poisson tail kept by the uniformized semigroup.
pub const POISSON_TAIL: f64 = 1e-13;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("{0} sites exceed the supported maximum {1}")]
    TooManySites(usize, usize),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("unsupported model for this computation: {0}")]
    UnsupportedModel(String),
    #[error("bad parameter: {0}")]
    BadParameter(String),
}

/// Explicit Markov generator on the full configuration space of a small torus.
///
/// Row c lists the off-diagonal transitions c -> c' (particle jumps) with
/// their rates; the diagonal entry is minus the stored exit rate. The
/// generator acts on functions as `(Lf)(c) = sum rate (f(c') - f(c))`.
#[derive(Debug, Clone)]
pub struct DenseGenerator {
    geom: TorusGeometry,
    law: JumpLaw,
    row_ptr: Vec<u32>,
    cols: Vec<u32>,
    rates: Vec<f64>,
    exit: Vec<f64>,
}

/// Builds the generator for `law` on `geom`. Fails if the torus is too small
/// for the law's range or has more than 16 sites.
pub fn build_generator_matrix(
    geom: TorusGeometry,
    law: &JumpLaw,
) -> Result<DenseGenerator, OracleError> {
    if geom.dimension() != law.dimension() {
        return Err(OracleError::UnsupportedModel(format!(
            "law dimension {} does not match torus dimension {}",
            law.dimension(),
            geom.dimension()
        )));
    }
    geom.supports_law(law)?;
    let n = geom.sites();
    if n > MAX_ORACLE_SITES {
        return Err(OracleError::TooManySites(n, MAX_ORACLE_SITES));
    }
    let states = 1usize << n;
    // jump targets per (displacement, source site)
    let moves: Vec<([i64; 2], f64, Vec<usize>)> = law
        .rates()
        .iter()
        .map(|&(z, r)| (z, r, (0..n).map(|x| geom.shift(x, z)).collect()))
        .collect();

    let mut row_ptr = Vec::with_capacity(states + 1);
    let mut cols = Vec::new();
    let mut rates = Vec::new();
    let mut exit = vec![0.0; states];
    row_ptr.push(0u32);
    for c in 0..states {
        let mut out = 0.0;
        for (_, r, targets) in &moves {
            for x in 0..n {
                if c >> x & 1 == 1 {
                    let y = targets[x];
                    if c >> y & 1 == 0 {
                        let c2 = c ^ (1 << x) ^ (1 << y);
                        cols.push(c2 as u32);
                        rates.push(*r);
                        out += *r;
                    }
                }
            }
        }
        exit[c] = out;
        row_ptr.push(cols.len() as u32);
    }
    Ok(DenseGenerator { geom, law: law.clone(), row_ptr, cols, rates, exit })
}

impl DenseGenerator {
    pub fn geometry(&self) -> &TorusGeometry {
        &self.geom
    }

    pub fn law(&self) -> &JumpLaw {
        &self.law
    }

    pub fn sites(&self) -> usize {
        self.geom.sites()
    }

    pub fn states(&self) -> usize {
        1usize << self.geom.sites()
    }

    /// Off-diagonal transitions out of configuration `c`.
    pub fn transitions(&self, c: usize) -> (&[u32], &[f64]) {
        let lo = self.row_ptr[c] as usize;
        let hi = self.row_ptr[c + 1] as usize;
        (&self.cols[lo..hi], &self.rates[lo..hi])
    }

    pub fn exit_rate(&self, c: usize) -> f64 {
        self.exit[c]
    }

    pub fn max_exit_rate(&self) -> f64 {
        self.exit.iter().cloned().fold(0.0, f64::max)
    }

    /// `Lf` acting on functions.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        assert_eq!(f.len(), self.states());
        let mut out = vec![0.0; f.len()];
        for c in 0..f.len() {
            let (cols, rates) = self.transitions(c);
            let mut acc = -self.exit[c] * f[c];
            for (c2, r) in cols.iter().zip(rates) {
                acc += r * f[*c2 as usize];
            }
            out[c] = acc;
        }
        out
    }

    /// `mu L` acting on (signed) measures, i.e. the transpose action.
    pub fn apply_transpose(&self, mu: &[f64]) -> Vec<f64> {
        assert_eq!(mu.len(), self.states());
        let mut out = vec![0.0; mu.len()];
        for c in 0..mu.len() {
            let (cols, rates) = self.transitions(c);
            for (c2, r) in cols.iter().zip(rates) {
                out[*c2 as usize] += r * mu[c];
            }
            out[c] -= self.exit[c] * mu[c];
        }
        out
    }

    /// e^{tL} f (or e^{tL*} mu with `adjoint`), by uniformization. The Poisson
    /// series is truncated once its missing mass drops below `POISSON_TAIL`.
    pub fn semigroup_apply(
        &self,
        f: &[f64],
        t: f64,
        adjoint: bool,
    ) -> Result<Vec<f64>, OracleError> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(OracleError::BadParameter(format!("time {t} must be finite and >= 0")));
        }
        let q = self.max_exit_rate();
        let qt = q * t;
        if qt == 0.0 {
            return Ok(f.to_vec());
        }
        if qt > 700.0 {
            return Err(OracleError::BadParameter(format!(
                "uniformization horizon q*t = {qt} too large"
            )));
        }
        let mut term = (-qt).exp();
        let mut cum = term;
        let mut p = f.to_vec();
        let mut result: Vec<f64> = p.iter().map(|v| v * term).collect();
        let mut k = 0usize;
        while !(k as f64 >= qt && 1.0 - cum <= POISSON_TAIL) {
            k += 1;
            if k > 200_000 {
                return Err(OracleError::BadParameter(
                    "uniformization series failed to converge".into(),
                ));
            }
            // p <- P p with P = I + L/q
            let lp = if adjoint { self.apply_transpose(&p) } else { self.apply(&p) };
            for (pi, li) in p.iter_mut().zip(&lp) {
                *pi += li / q;
            }
            term *= qt / k as f64;
            cum += term;
            for (ri, pi) in result.iter_mut().zip(&p) {
                *ri += term * pi;
            }
        }
        Ok(result)
    }
}

/// Product-measure weights nu_rho over all configurations.
fn bernoulli_weights(states: usize, sites: usize, rho: f64) -> Vec<f64> {
    let mut pow_occ = vec![1.0; sites + 1];
    let mut pow_vac = vec![1.0; sites + 1];
    for k in 1..=sites {
        pow_occ[k] = pow_occ[k - 1] * rho;
        pow_vac[k] = pow_vac[k - 1] * (1.0 - rho);
    }
    (0..states)
        .map(|c| {
            let k = (c as u64).count_ones() as usize;
            pow_occ[k] * pow_vac[sites - k]
        })
        .collect()
}

/// Maximum absolute row sum of nu_rho L. Zero (to rounding) iff the Bernoulli
/// product measure at density `rho` is stationary.
pub fn check_stationarity(gen: &DenseGenerator, rho: f64) -> Result<f64, OracleError> {
    if !(0.0..=1.0).contains(&rho) || !rho.is_finite() {
        return Err(OracleError::BadParameter(format!("density {rho} outside [0, 1]")));
    }
    let nu = bernoulli_weights(gen.states(), gen.sites(), rho);
    let r = gen.apply_transpose(&nu);
    Ok(r.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// In-place Walsh-Hadamard transform: `v[m] <- sum_c (-1)^{popcount(m & c)} v[c]`.
pub fn fwht(v: &mut [f64]) {
    let n = v.len();
    assert!(n.is_power_of_two(), "length must be a power of two");
    let mut h = 1;
    while h < n {
        for chunk in v.chunks_mut(2 * h) {
            for i in 0..h {
                let (a, b) = (chunk[i], chunk[i + h]);
                chunk[i] = a + b;
                chunk[i + h] = a - b;
            }
        }
        h *= 2;
    }
}

/// Value of the normalized occupation monomial `xi_mask` at configuration `c`,
/// at density 1/2: product over x in mask of (2 eta_x - 1).
#[inline]
fn xi_value(mask: usize, c: usize) -> f64 {
    let k = mask.count_ones();
    let agree = (mask & c).count_ones();
    // (-1)^(k - agree)
    if (k - agree) & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Expansion coefficients of a function over the monomial basis at rho = 1/2.
pub fn xi_coefficients(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let sites = n.trailing_zeros() as usize;
    let mut w = f.to_vec();
    fwht(&mut w);
    let scale = 1.0 / n as f64;
    for (m, wm) in w.iter_mut().enumerate() {
        let sign = if (m as u64).count_ones() & 1 == 0 { 1.0 } else { -1.0 };
        *wm *= sign * scale;
    }
    debug_assert!(sites <= 64);
    w
}

/// Pointwise values of `sum_mask coeffs[mask] xi_mask`.
pub fn xi_synthesis(coeffs: &[f64]) -> Vec<f64> {
    let mut w = coeffs.to_vec();
    for (m, wm) in w.iter_mut().enumerate() {
        if (m as u64).count_ones() & 1 == 1 {
            *wm = -*wm;
        }
    }
    fwht(&mut w);
    w
}

/// The generator conjugated into the monomial basis at density 1/2:
/// `out[m2][m1]` is the coefficient of `xi_{m2}` in `L xi_{m1}`.
pub fn xi_conjugated_generator(gen: &DenseGenerator) -> Result<DMatrix<f64>, OracleError> {
    let sites = gen.sites();
    if sites > MAX_DENSE_SITES {
        return Err(OracleError::TooManySites(sites, MAX_DENSE_SITES));
    }
    let states = gen.states();
    let mut out = DMatrix::zeros(states, states);
    for m1 in 0..states {
        let v: Vec<f64> = (0..states).map(|c| xi_value(m1, c)).collect();
        let lv = gen.apply(&v);
        let coeffs = xi_coefficients(&lv);
        for m2 in 0..states {
            out[(m2, m1)] = coeffs[m2];
        }
    }
    Ok(out)
}

/// Degree-graded split of the conjugated generator.
///
/// `sym` keeps entries with |m2| = |m1|, `raise` those with |m2| = |m1| + 1,
/// `lower` those with |m2| = |m1| - 1; `degree_mixing` is the largest entry
/// outside those three bands (zero to rounding for the exclusion models).
pub struct XiBlocks {
    pub dim: usize,
    pub sym: DMatrix<f64>,
    pub raise: DMatrix<f64>,
    pub lower: DMatrix<f64>,
    pub degree_mixing: f64,
}

pub fn xi_graded_blocks(gen: &DenseGenerator) -> Result<XiBlocks, OracleError> {
    let lhat = xi_conjugated_generator(gen)?;
    let states = gen.states();
    let mut sym = DMatrix::zeros(states, states);
    let mut raise = DMatrix::zeros(states, states);
    let mut lower = DMatrix::zeros(states, states);
    let mut mixing = 0.0f64;
    for m1 in 0..states {
        let d1 = (m1 as u64).count_ones() as i64;
        for m2 in 0..states {
            let e = lhat[(m2, m1)];
            if e == 0.0 {
                continue;
            }
            let d2 = (m2 as u64).count_ones() as i64;
            match d2 - d1 {
                0 => sym[(m2, m1)] = e,
                1 => raise[(m2, m1)] = e,
                -1 => lower[(m2, m1)] = e,
                _ => mixing = mixing.max(e.abs()),
            }
        }
    }
    Ok(XiBlocks { dim: states, sym, raise, lower, degree_mixing: mixing })
}

/// Translate a site mask by the torus shift `z`.
pub fn shift_mask(geom: &TorusGeometry, mask: usize, z: [i64; 2]) -> usize {
    let mut out = 0usize;
    let mut m = mask;
    while m != 0 {
        let x = m.trailing_zeros() as usize;
        out |= 1 << geom.shift(x, z);
        m &= m - 1;
    }
    out
}

/// Translation-summed pairing of the renormalized current with
/// `(lambda - L)^{-1} w`, computed in the monomial basis at density 1/2.
///
/// With `degree_cutoff = Some(n)` the solve is projected onto monomials of
/// degree <= n (the truncated-sector value); `None` solves in the full basis,
/// which is the exact pairing.
pub fn exact_resolvent_pairing(
    gen: &DenseGenerator,
    lambda: f64,
    degree_cutoff: Option<usize>,
) -> Result<f64, OracleError> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(OracleError::BadParameter(format!("lambda {lambda} must be positive")));
    }
    let sites = gen.sites();
    if sites > MAX_DENSE_SITES {
        return Err(OracleError::TooManySites(sites, MAX_DENSE_SITES));
    }
    let states = gen.states();
    let keep: Vec<usize> = match degree_cutoff {
        None => (0..states).collect(),
        Some(n) => (0..states).filter(|m| (*m as u64).count_ones() as usize <= n).collect(),
    };
    let mut index = vec![usize::MAX; states];
    for (i, &m) in keep.iter().enumerate() {
        index[m] = i;
    }
    let dim = keep.len();
    let mut mat = DMatrix::zeros(dim, dim);
    for (j, &m1) in keep.iter().enumerate() {
        let v: Vec<f64> = (0..states).map(|c| xi_value(m1, c)).collect();
        let lv = gen.apply(&v);
        let coeffs = xi_coefficients(&lv);
        for (i, &m2) in keep.iter().enumerate() {
            let lij = coeffs[m2];
            mat[(i, j)] = if i == j { lambda - lij } else { -lij };
        }
    }
    // w = (eta_0 - 1/2)(eta_{e1} - 1/2) = (1/4) xi_{0, e1}
    let geom = gen.geometry();
    let bond_mask = 1usize | (1usize << geom.shift(0, [1, 0]));
    let iw = index[bond_mask];
    if iw == usize::MAX {
        return Err(OracleError::BadParameter("degree cutoff excludes the current".into()));
    }
    let mut rhs = DMatrix::zeros(dim, 1);
    rhs[(iw, 0)] = 0.25;
    let lu = mat.lu();
    let sol = lu
        .solve(&rhs)
        .ok_or_else(|| OracleError::BadParameter("resolvent system is singular".into()))?;
    // pairing sums the solution over all torus translates of the current bond
    let mut value = 0.0;
    for x in 0..sites {
        let mask = (1usize << x) | (1usize << geom.shift(x, [1, 0]));
        let idx = index[mask];
        if idx != usize::MAX {
            value += 0.25 * sol[(idx, 0)];
        }
    }
    Ok(value)
}

/// Stationary time autocorrelation of the renormalized current at density
/// 1/2, `C(u) = <<e^{uL} w, w>>`, evaluated through its uniformized series.
///
/// Built once for a time horizon; evaluations are O(series length).
pub struct CurrentCorrelation {
    q: f64,
    horizon: f64,
    gammas: Vec<f64>,
}

pub fn current_correlation(
    gen: &DenseGenerator,
    horizon: f64,
) -> Result<CurrentCorrelation, OracleError> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(OracleError::BadParameter(format!("horizon {horizon} must be positive")));
    }
    let states = gen.states();
    let sites = gen.sites();
    let geom = *gen.geometry();
    let q = gen.max_exit_rate();
    let qu = q * horizon;
    if qu > 600.0 {
        return Err(OracleError::BadParameter(format!(
            "correlation horizon q*u = {qu} too large for the Poisson series"
        )));
    }
    let centered = |c: usize, x: usize| ((c >> x & 1) as f64) - 0.5;
    let w: Vec<f64> = (0..states)
        .map(|c| centered(c, 0) * centered(c, geom.shift(0, [1, 0])))
        .collect();
    let wsum: Vec<f64> = (0..states)
        .map(|c| {
            (0..sites).map(|x| centered(c, x) * centered(c, geom.shift(x, [1, 0]))).sum::<f64>()
        })
        .collect();
    let klim = (qu + 15.0 * qu.sqrt() + 40.0).ceil() as usize;
    let inv_states = 1.0 / states as f64;
    let mut gammas = Vec::with_capacity(klim + 1);
    let mut p = w.clone();
    gammas.push(p.iter().zip(&wsum).map(|(a, b)| a * b).sum::<f64>() * inv_states);
    for _ in 0..klim {
        let lp = gen.apply(&p);
        for (pi, li) in p.iter_mut().zip(&lp) {
            *pi += li / q;
        }
        gammas.push(p.iter().zip(&wsum).map(|(a, b)| a * b).sum::<f64>() * inv_states);
    }
    Ok(CurrentCorrelation { q, horizon, gammas })
}

impl CurrentCorrelation {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// C(u) for 0 <= u <= horizon.
    pub fn eval(&self, u: f64) -> f64 {
        assert!(u >= 0.0 && u <= self.horizon * (1.0 + 1e-9), "u outside the built horizon");
        let qu = self.q * u;
        let mut term = (-qu).exp();
        let mut acc = 0.0;
        for (k, g) in self.gammas.iter().enumerate() {
            if k > 0 {
                term *= qu / k as f64;
            }
            acc += term * g;
        }
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffusivityMethod {
    /// Second moment of the exact two-point function.
    Moment,
    /// Time integral of the current autocorrelation (density 1/2 only).
    TimeCorrelation,
}

#[derive(Debug, Clone)]
pub struct ExactDiffusivity {
    pub t: f64,
    pub method: DiffusivityMethod,
    pub velocity: [f64; 2],
    pub dmat: [[f64; 2]; 2],
}

impl ExactDiffusivity {
    pub fn d11(&self) -> f64 {
        self.dmat[0][0]
    }
}

/// Exact equilibrium two-point function S(x, t) = E[(eta_x(t) - rho)(eta_0(0) - rho)],
/// indexed by site x.
pub struct ExactStructure {
    pub t: f64,
    pub rho: f64,
    pub s: Vec<f64>,
}

pub fn exact_structure_function(
    gen: &DenseGenerator,
    rho: f64,
    t: f64,
) -> Result<ExactStructure, OracleError> {
    if !(0.0..=1.0).contains(&rho) || !rho.is_finite() {
        return Err(OracleError::BadParameter(format!("density {rho} outside [0, 1]")));
    }
    let states = gen.states();
    let sites = gen.sites();
    let nu = bernoulli_weights(states, sites, rho);
    // evolve the signed measure nu * (eta_0 - rho) instead of N observables
    let mu0: Vec<f64> =
        (0..states).map(|c| nu[c] * (((c & 1) as f64) - rho)).collect();
    let mu_t = gen.semigroup_apply(&mu0, t, true)?;
    let mut s = vec![0.0; sites];
    for (c, m) in mu_t.iter().enumerate() {
        if *m == 0.0 {
            continue;
        }
        for (x, sx) in s.iter_mut().enumerate() {
            *sx += m * (((c >> x & 1) as f64) - rho);
        }
    }
    Ok(ExactStructure { t, rho, s })
}

/// Exact time-dependent diffusivity at lag `t`.
///
/// `Moment` forms the centered second moment of S(x, t); `TimeCorrelation`
/// uses `D(t) = 1/2 + (1/(chi t)) int_0^t (t - u) C(u) du` and requires
/// density 1/2 (it is the form whose Laplace transform matches the resolvent).
pub fn exact_diffusivity(
    gen: &DenseGenerator,
    rho: f64,
    t: f64,
    method: DiffusivityMethod,
) -> Result<ExactDiffusivity, OracleError> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(OracleError::BadParameter(format!("lag {t} must be positive")));
    }
    let chi = rho * (1.0 - rho);
    if chi == 0.0 {
        return Err(OracleError::BadParameter("degenerate density".into()));
    }
    match method {
        DiffusivityMethod::Moment => {
            let st = exact_structure_function(gen, rho, t)?;
            let geom = gen.geometry();
            let mut m1 = [0.0f64; 2];
            let mut m2 = [[0.0f64; 2]; 2];
            for (x, sx) in st.s.iter().enumerate() {
                let d = geom.displacement(0, x);
                for i in 0..2 {
                    m1[i] += d[i] as f64 * sx;
                    for j in 0..2 {
                        m2[i][j] += (d[i] * d[j]) as f64 * sx;
                    }
                }
            }
            let velocity = [m1[0] / (chi * t), m1[1] / (chi * t)];
            let mut dmat = [[0.0f64; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    dmat[i][j] =
                        (m2[i][j] - chi * velocity[i] * velocity[j] * t * t) / (2.0 * chi * t);
                }
            }
            Ok(ExactDiffusivity { t, method, velocity, dmat })
        }
        DiffusivityMethod::TimeCorrelation => {
            if (rho - 0.5).abs() > 1e-12 {
                return Err(OracleError::UnsupportedModel(
                    "time-correlation diffusivity is defined at density 1/2".into(),
                ));
            }
            let corr = current_correlation(gen, t)?;
            let d11 = 0.5 + weighted_tail_integral(&corr, t) / (chi * t);
            let mut dmat = [[0.0f64; 2]; 2];
            dmat[0][0] = d11;
            Ok(ExactDiffusivity { t, method, velocity: [0.0, 0.0], dmat })
        }
    }
}

/// int_0^t (t - u) C(u) du by panel quadrature.
fn weighted_tail_integral(corr: &CurrentCorrelation, t: f64) -> f64 {
    let rule = GaussRule::new(16);
    let panels = ((t / 0.25).ceil() as usize).max(8);
    let h = t / panels as f64;
    let mut acc = 0.0;
    for k in 0..panels {
        let a = k as f64 * h;
        acc += rule.panel(a, a + h, |u| (t - u) * corr.eval(u));
    }
    acc
}

#[derive(Debug, Clone)]
pub struct LaplaceCheck {
    pub lambda: f64,
    /// Time-domain side: int_0^infty e^{-lambda t} t D(t) dt by quadrature.
    pub lhs: f64,
    /// Resolvent side: 1/(2 lambda^2) + <<w, (lambda - L)^{-1} w>> / (chi lambda^2).
    pub rhs: f64,
    pub relgap: f64,
    /// Certified bound on the truncated time-domain tail.
    pub tail_bound: f64,
}

/// Checks the two independent routes to the same Laplace-transformed
/// diffusivity at density 1/2 on a small 1d torus.
pub fn laplace_identity_check(
    gen: &DenseGenerator,
    lambda: f64,
) -> Result<LaplaceCheck, OracleError> {
    if gen.geometry().dimension() != 1 {
        return Err(OracleError::UnsupportedModel(
            "the transform identity check runs on 1d tori".into(),
        ));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(OracleError::BadParameter(format!("lambda {lambda} must be positive")));
    }
    let chi = 0.25;
    let q = gen.max_exit_rate();
    let mut horizon = 40.0 / lambda;
    if q * horizon > 600.0 {
        horizon = 600.0 / q;
    }
    let corr = current_correlation(gen, horizon)?;
    let c0 = corr.eval(0.0);

    // cumulative J0 = int_0^t C and J1 = int_0^t u C(u) du at panel edges
    let rule = GaussRule::new(16);
    let panels = ((horizon / 0.25).ceil() as usize).max(16);
    let h = horizon / panels as f64;
    let mut j0_edges = Vec::with_capacity(panels + 1);
    let mut j1_edges = Vec::with_capacity(panels + 1);
    j0_edges.push(0.0);
    j1_edges.push(0.0);
    for k in 0..panels {
        let a = k as f64 * h;
        let b = a + h;
        j0_edges.push(j0_edges[k] + rule.panel(a, b, |u| corr.eval(u)));
        j1_edges.push(j1_edges[k] + rule.panel(a, b, |u| u * corr.eval(u)));
    }
    // outer Laplace quadrature of e^{-lambda t} [t/2 + (t J0(t) - J1(t))/chi]
    let mut lhs = 0.0;
    for k in 0..panels {
        let a = k as f64 * h;
        let b = a + h;
        lhs += rule.panel(a, b, |t| {
            let j0 = j0_edges[k] + rule.panel(a, t, |u| corr.eval(u));
            let j1 = j1_edges[k] + rule.panel(a, t, |u| u * corr.eval(u));
            (-lambda * t).exp() * (0.5 * t + (t * j0 - j1) / chi)
        });
    }
    // tail bound from |C| <= C(0): t D(t) <= t/2 + C0 t^2 / (2 chi)
    let e = (-lambda * horizon).exp();
    let tail_bound = e * (horizon / (2.0 * lambda) + 0.5 / (lambda * lambda))
        + e * (c0 / (2.0 * chi))
            * (horizon * horizon / lambda + 2.0 * horizon / (lambda * lambda)
                + 2.0 / (lambda * lambda * lambda));

    let pairing = exact_resolvent_pairing(gen, lambda, None)?;
    let rhs = 0.5 / (lambda * lambda) + pairing / (chi * lambda * lambda);
    let relgap = (lhs - rhs).abs() / lhs.abs().max(rhs.abs());
    Ok(LaplaceCheck { lambda, lhs, rhs, relgap, tail_bound })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::TorusGeometry;

    #[test]
    fn two_site_generator_is_a_swap() {
        // d1 torus of 2 sites with symmetric law: configs 01 and 10 swap at
        // total rate 1 (both displacements reach the same bond)
        let geom = TorusGeometry::line(2).unwrap();
        let law = JumpLaw::ssep_1d();
        let gen = build_generator_matrix(geom, &law).unwrap();
        assert_eq!(gen.states(), 4);
        assert_eq!(gen.exit_rate(0b00), 0.0);
        assert_eq!(gen.exit_rate(0b11), 0.0);
        assert_eq!(gen.exit_rate(0b01), 1.0);
        let (cols, rates) = gen.transitions(0b01);
        assert_eq!(cols.iter().map(|c| *c as usize).sum::<usize>(), 0b10 + 0b10);
        assert_eq!(rates.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn generator_rows_sum_to_zero() {
        let geom = TorusGeometry::line(6).unwrap();
        let gen = build_generator_matrix(geom, &JumpLaw::tasep_1d()).unwrap();
        let ones = vec![1.0; gen.states()];
        for v in gen.apply(&ones) {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn fwht_is_self_inverse_up_to_scale() {
        let v: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let mut w = v.clone();
        fwht(&mut w);
        fwht(&mut w);
        for (a, b) in v.iter().zip(&w) {
            assert!((a * 16.0 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn xi_expansion_roundtrips() {
        let v: Vec<f64> = (0..32).map(|i| (0.3 * i as f64).cos()).collect();
        let coeffs = xi_coefficients(&v);
        let back = xi_synthesis(&coeffs);
        for (a, b) in v.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        // xi basis is orthonormal under the uniform measure
        let dot: f64 = (0..32).map(|c| xi_value(0b101, c) * xi_value(0b011, c)).sum();
        assert_eq!(dot, 0.0);
        let norm: f64 = (0..32).map(|c| xi_value(0b101, c) * xi_value(0b101, c)).sum();
        assert_eq!(norm, 32.0);
    }

    #[test]
    fn stationarity_holds_for_bernoulli() {
        let geom = TorusGeometry::line(6).unwrap();
        let gen = build_generator_matrix(geom, &JumpLaw::tasep_1d()).unwrap();
        for rho in [0.25, 0.5, 0.75] {
            assert!(check_stationarity(&gen, rho).unwrap() < 1e-14);
        }
    }

    #[test]
    fn shift_mask_translates_bonds() {
        let geom = TorusGeometry::line(6).unwrap();
        assert_eq!(shift_mask(&geom, 0b000011, [2, 0]), 0b001100);
        assert_eq!(shift_mask(&geom, 0b100001, [1, 0]), 0b000011);
    }
}
