//! Operator calculus on occupation monomials.
//!
//! A local mean-zero function of the exclusion field expands over normalized
//! occupation monomials indexed by finite site sets. The drift part of the
//! generator acts on those coefficients as a degree-graded operator: a
//! symmetric degree-preserving piece S, a raising piece that adds one site,
//! and its (negative) adjoint. This module implements the coefficient
//! calculus: decomposition, the shift-summed pairing, the hard-core stencils,
//! the free (random-walk) counterparts, and the extension/restriction pair
//! that compares the two dynamics.
//!
//! All stencils are written in column convention: `stencil_*(b)` returns the
//! expansion of the operator applied to the delta function at `b`. The free
//! aggregate operators are not symmetric as plain coefficient matrices
//! (multiset multiplicities weight the transpose), so the convention matters
//! and is fixed here once.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::lattice::TorusGeometry;

/// Lattice point; in d = 1 the second coordinate is 0.
pub type Pt = [i64; 2];

pub const E1: Pt = [1, 0];

/// Minimum l1 distance a doubled site must keep from every other occupied
/// point for the extension map to average over its neighbors.
pub const ISOLATION_RADIUS: i64 = 5;

#[derive(Debug, Error, PartialEq)]
pub enum DualError {
    #[error("support entry {0:?} is invalid: {1}")]
    BadSupport(Pt, String),
    #[error("hard-core support has a repeated point {0:?}")]
    RepeatedPoint(Pt),
    #[error("operands have different dynamics, domains, or dimensions")]
    MixedSpaces,
    #[error("operation needs {0} dynamics")]
    WrongDynamics(&'static str),
    #[error("operation supported only on the infinite lattice")]
    NeedsLine,
    #[error("window of {0} sites exceeds the decomposition cap {1}")]
    WindowTooLarge(usize, usize),
    #[error("truth table has {0} entries, expected {1}")]
    BadTable(usize, usize),
    #[error("bad parameter: {0}")]
    BadParameter(String),
}

/// Where supports live: the infinite lattice or a finite torus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Line,
    Torus(TorusGeometry),
}

impl Domain {
    /// p + z, wrapped on a torus.
    pub fn step(&self, p: Pt, z: Pt) -> Pt {
        match self {
            Domain::Line => [p[0] + z[0], p[1] + z[1]],
            Domain::Torus(g) => {
                let s = g.sides();
                [(p[0] + z[0]).rem_euclid(s[0] as i64), (p[1] + z[1]).rem_euclid(s[1] as i64)]
            }
        }
    }

    fn contains(&self, p: Pt, d: u8) -> bool {
        if d == 1 && p[1] != 0 {
            return false;
        }
        match self {
            Domain::Line => true,
            Domain::Torus(g) => {
                let s = g.sides();
                (0..s[0] as i64).contains(&p[0]) && (0..s[1] as i64).contains(&p[1])
            }
        }
    }
}

/// Which particle system the coefficients describe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DynamicsKind {
    /// Exclusion: supports are sets of distinct sites.
    HardCore,
    /// Independent walks: supports are multisets.
    Free,
}

impl std::fmt::Display for DynamicsKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DynamicsKind::HardCore => write!(f, "hardcore"),
            DynamicsKind::Free => write!(f, "free"),
        }
    }
}

/// Finitely supported coefficient vector over degree-n supports.
#[derive(Debug, Clone, PartialEq)]
pub struct MonomialFunction {
    degree: usize,
    d: u8,
    domain: Domain,
    dynamics: DynamicsKind,
    coeffs: BTreeMap<Vec<Pt>, f64>,
}

impl MonomialFunction {
    pub fn zero(degree: usize, d: u8, domain: Domain, dynamics: DynamicsKind) -> Self {
        MonomialFunction { degree, d, domain, dynamics, coeffs: BTreeMap::new() }
    }

    /// Validates and builds from (support, coefficient) pairs. Supports are
    /// sorted; equal supports accumulate.
    pub fn new(
        degree: usize,
        d: u8,
        domain: Domain,
        dynamics: DynamicsKind,
        entries: &[(Vec<Pt>, f64)],
    ) -> Result<Self, DualError> {
        let mut f = MonomialFunction::zero(degree, d, domain, dynamics);
        for (key, c) in entries {
            if !c.is_finite() {
                return Err(DualError::BadParameter(format!("coefficient {c} not finite")));
            }
            let key = normalize_support(key, degree, d, &domain, dynamics)?;
            if *c != 0.0 {
                *f.coeffs.entry(key).or_insert(0.0) += c;
            }
        }
        f.coeffs.retain(|_, v| *v != 0.0);
        Ok(f)
    }

    pub fn delta(
        key: &[Pt],
        d: u8,
        domain: Domain,
        dynamics: DynamicsKind,
    ) -> Result<Self, DualError> {
        MonomialFunction::new(key.len(), d, domain, dynamics, &[(key.to_vec(), 1.0)])
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dimension(&self) -> u8 {
        self.d
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn dynamics(&self) -> DynamicsKind {
        self.dynamics
    }

    pub fn coeff(&self, key: &[Pt]) -> f64 {
        self.coeffs.get(key).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<Pt>, &f64)> {
        self.coeffs.iter()
    }

    pub fn support_size(&self) -> usize {
        self.coeffs.len()
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.coeffs.values().map(|c| c * c).sum()
    }

    pub fn max_abs_diff(&self, other: &MonomialFunction) -> f64 {
        let mut m = 0.0f64;
        for (k, v) in &self.coeffs {
            m = m.max((v - other.coeff(k)).abs());
        }
        for (k, v) in &other.coeffs {
            m = m.max((v - self.coeff(k)).abs());
        }
        m
    }

    fn same_space(&self, other: &MonomialFunction) -> bool {
        self.d == other.d && self.domain == other.domain && self.dynamics == other.dynamics
    }
}

fn normalize_support(
    key: &[Pt],
    degree: usize,
    d: u8,
    domain: &Domain,
    dynamics: DynamicsKind,
) -> Result<Vec<Pt>, DualError> {
    if key.len() != degree {
        return Err(DualError::BadParameter(format!(
            "support of size {} in a degree-{} function",
            key.len(),
            degree
        )));
    }
    let mut key = key.to_vec();
    for p in key.iter_mut() {
        if let Domain::Torus(g) = domain {
            let s = g.sides();
            *p = [p[0].rem_euclid(s[0] as i64), p[1].rem_euclid(s[1] as i64)];
        }
        if !domain.contains(*p, d) {
            return Err(DualError::BadSupport(*p, "outside the domain".into()));
        }
    }
    key.sort_unstable();
    if dynamics == DynamicsKind::HardCore {
        for w in key.windows(2) {
            if w[0] == w[1] {
                return Err(DualError::RepeatedPoint(w[0]));
            }
        }
    }
    Ok(key)
}

/// Number of ordered tuples realizing a sorted multiset: n! / prod(mult!).
pub fn multiset_weight(key: &[Pt]) -> f64 {
    let mut fact = vec![1.0f64; key.len() + 1];
    for k in 1..=key.len() {
        fact[k] = fact[k - 1] * k as f64;
    }
    let mut w = fact[key.len()];
    let mut run = 1usize;
    for i in 1..key.len() {
        if key[i] == key[i - 1] {
            run += 1;
        } else {
            w /= fact[run];
            run = 1;
        }
    }
    w /= fact[run];
    w
}

// ---------------------------------------------------------------------------
// column stencils
// ---------------------------------------------------------------------------

/// Column of the symmetrized exclusion generator at the set `b`: for every
/// point and direction whose target is vacant, exchange at rate 1/2.
pub fn stencil_s_hardcore(b: &[Pt], d: u8, domain: &Domain) -> Vec<(Vec<Pt>, f64)> {
    let mut out: BTreeMap<Vec<Pt>, f64> = BTreeMap::new();
    let dirs = directions(d);
    for (i, &u) in b.iter().enumerate() {
        for &z in &dirs {
            let v = domain.step(u, z);
            if b.contains(&v) {
                continue;
            }
            let mut moved = b.to_vec();
            moved[i] = v;
            moved.sort_unstable();
            *out.entry(moved).or_insert(0.0) += 0.5;
            *out.entry(b.to_vec()).or_insert(0.0) -= 0.5;
        }
    }
    out.into_iter().filter(|(_, c)| *c != 0.0).collect()
}

/// Column of the degree-raising drift part at the set `b`: attach a vacant
/// site v, with weight -1/2 if its right neighbor is occupied and +1/2 if its
/// left neighbor is.
pub fn stencil_aplus_hardcore(b: &[Pt], _d: u8, domain: &Domain) -> Vec<(Vec<Pt>, f64)> {
    let mut out = Vec::new();
    let mut cands: Vec<Pt> = Vec::new();
    for &u in b {
        for z in [[1i64, 0], [-1i64, 0]] {
            let v = domain.step(u, z);
            if !b.contains(&v) && !cands.contains(&v) {
                cands.push(v);
            }
        }
    }
    for v in cands {
        let mut c = 0.0;
        if b.contains(&domain.step(v, E1)) {
            c -= 0.5;
        }
        if b.contains(&domain.step(v, [-1, 0])) {
            c += 0.5;
        }
        if c != 0.0 {
            let mut key = b.to_vec();
            key.push(v);
            key.sort_unstable();
            out.push((key, c));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Column of the plain transpose of the raising stencil, at the (n+1)-point
/// set `bp`: detach each point, with the matching weight.
pub fn stencil_aplus_transpose_hardcore(bp: &[Pt], _d: u8, domain: &Domain) -> Vec<(Vec<Pt>, f64)> {
    let mut out: BTreeMap<Vec<Pt>, f64> = BTreeMap::new();
    for (i, &v) in bp.iter().enumerate() {
        let mut rest: Vec<Pt> = bp.to_vec();
        rest.remove(i);
        let mut c = 0.0;
        if rest.contains(&domain.step(v, E1)) {
            c -= 0.5;
        }
        if rest.contains(&domain.step(v, [-1, 0])) {
            c += 0.5;
        }
        if c != 0.0 {
            *out.entry(rest).or_insert(0.0) += c;
        }
    }
    out.into_iter().filter(|(_, c)| *c != 0.0).collect()
}

/// Column of the n-particle free Laplacian at the multiset `b`: coefficient
/// at a neighboring multiset m counts the single-step moves of m that land on
/// b; the diagonal is -2dn.
pub fn stencil_delta_free(b: &[Pt], d: u8, domain: &Domain) -> Vec<(Vec<Pt>, f64)> {
    let n = b.len();
    let dirs = directions(d);
    let mut cands: Vec<Vec<Pt>> = Vec::new();
    for i in 0..n {
        for &z in &dirs {
            let mut m = b.to_vec();
            m[i] = domain.step(m[i], z);
            m.sort_unstable();
            if !cands.contains(&m) {
                cands.push(m);
            }
        }
    }
    let mut out = Vec::new();
    for m in cands {
        let mut count = 0.0;
        for k in 0..n {
            for &z in &dirs {
                let mut moved = m.clone();
                moved[k] = domain.step(moved[k], z);
                moved.sort_unstable();
                if moved == b {
                    count += 1.0;
                }
            }
        }
        if count != 0.0 {
            out.push((m, count));
        }
    }
    if n > 0 {
        out.push((b.to_vec(), -((2 * d as usize * n) as f64)));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Column of the free-dynamics raising operator at the multiset `b`.
///
/// The coefficient at an (n+1)-multiset m scans ordered slot pairs (i, j)
/// with m_j = m_i + e1: +1/2 when dropping slot j returns b, -1/2 when
/// dropping slot j and advancing one copy of m_i returns b.
pub fn stencil_aplus_free(b: &[Pt], _d: u8, domain: &Domain) -> Vec<(Vec<Pt>, f64)> {
    let n = b.len();
    let mut cands: Vec<Vec<Pt>> = Vec::new();
    for &u in b {
        for z in [[-1i64, 0], [0, 0], [1, 0]] {
            let v = domain.step(u, z);
            let mut m = b.to_vec();
            m.push(v);
            m.sort_unstable();
            if !cands.contains(&m) {
                cands.push(m);
            }
        }
    }
    let mut out = Vec::new();
    for m in cands {
        let mut c = 0.0;
        for j in 0..=n {
            for i in 0..=n {
                if i == j || m[j] != domain.step(m[i], E1) {
                    continue;
                }
                let mut rest = m.clone();
                rest.remove(j);
                if rest == *b {
                    c += 0.5;
                }
                // advance one copy of the value m[i] in rest
                let pos = rest.iter().position(|p| *p == m[i]).expect("slot i survives");
                let mut bumped = rest.clone();
                bumped[pos] = domain.step(bumped[pos], E1);
                bumped.sort_unstable();
                if bumped == *b {
                    c -= 0.5;
                }
            }
        }
        if c != 0.0 {
            out.push((m, c));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Column of the plain transpose of the free raising stencil at the
/// (n+1)-multiset `bp`.
pub fn stencil_aplus_transpose_free(bp: &[Pt], _d: u8, domain: &Domain) -> Vec<(Vec<Pt>, f64)> {
    let n1 = bp.len();
    let mut out: BTreeMap<Vec<Pt>, f64> = BTreeMap::new();
    for j in 0..n1 {
        for i in 0..n1 {
            if i == j || bp[j] != domain.step(bp[i], E1) {
                continue;
            }
            let mut rest = bp.to_vec();
            rest.remove(j);
            *out.entry(rest.clone()).or_insert(0.0) += 0.5;
            let pos = rest.iter().position(|p| *p == bp[i]).expect("slot i survives");
            let mut bumped = rest;
            bumped[pos] = domain.step(bumped[pos], E1);
            bumped.sort_unstable();
            *out.entry(bumped).or_insert(0.0) -= 0.5;
        }
    }
    out.into_iter().filter(|(_, c)| *c != 0.0).collect()
}

fn directions(d: u8) -> Vec<Pt> {
    match d {
        1 => vec![[1, 0], [-1, 0]],
        _ => vec![[1, 0], [-1, 0], [0, 1], [0, -1]],
    }
}

// ---------------------------------------------------------------------------
// operator application
// ---------------------------------------------------------------------------

fn apply_stencil(
    f: &MonomialFunction,
    out_degree: usize,
    stencil: impl Fn(&[Pt], u8, &Domain) -> Vec<(Vec<Pt>, f64)>,
) -> MonomialFunction {
    let mut out = MonomialFunction::zero(out_degree, f.d, f.domain, f.dynamics);
    for (key, &c) in f.iter() {
        for (k2, s) in stencil(key, f.d, &f.domain) {
            *out.coeffs.entry(k2).or_insert(0.0) += c * s;
        }
    }
    out.coeffs.retain(|_, v| *v != 0.0);
    out
}

/// Symmetric part of the generator on hard-core coefficients.
pub fn apply_s_hardcore(f: &MonomialFunction) -> Result<MonomialFunction, DualError> {
    if f.dynamics != DynamicsKind::HardCore {
        return Err(DualError::WrongDynamics("hard-core"));
    }
    Ok(apply_stencil(f, f.degree, stencil_s_hardcore))
}

/// Degree-raising drift part on hard-core coefficients.
pub fn apply_aplus_hardcore(f: &MonomialFunction) -> Result<MonomialFunction, DualError> {
    if f.dynamics != DynamicsKind::HardCore {
        return Err(DualError::WrongDynamics("hard-core"));
    }
    Ok(apply_stencil(f, f.degree + 1, stencil_aplus_hardcore))
}

/// Adjoint of the raising part with respect to the shift-summed pairing.
///
/// On hard-core supports the monomial basis is orthonormal, so the adjoint is
/// the plain transposed stencil; on free supports the transpose picks up the
/// multiset multiplicity weights.
pub fn apply_aplus_adjoint(g: &MonomialFunction) -> Result<MonomialFunction, DualError> {
    if g.degree == 0 {
        return Ok(MonomialFunction::zero(0, g.d, g.domain, g.dynamics));
    }
    match g.dynamics {
        DynamicsKind::HardCore => {
            Ok(apply_stencil(g, g.degree - 1, stencil_aplus_transpose_hardcore))
        }
        DynamicsKind::Free => {
            let mut out = MonomialFunction::zero(g.degree - 1, g.d, g.domain, g.dynamics);
            for (key, &c) in g.iter() {
                let wk = multiset_weight(key);
                for (k2, s) in stencil_aplus_transpose_free(key, g.d, &g.domain) {
                    let wb = multiset_weight(&k2);
                    *out.coeffs.entry(k2).or_insert(0.0) += c * s * wk / wb;
                }
            }
            out.coeffs.retain(|_, v| *v != 0.0);
            Ok(out)
        }
    }
}

/// n-particle Laplacian on free coefficients.
pub fn apply_delta_free(f: &MonomialFunction) -> Result<MonomialFunction, DualError> {
    if f.dynamics != DynamicsKind::Free {
        return Err(DualError::WrongDynamics("free"));
    }
    Ok(apply_stencil(f, f.degree, stencil_delta_free))
}

/// Raising operator on free coefficients.
pub fn apply_aplus_free(f: &MonomialFunction) -> Result<MonomialFunction, DualError> {
    if f.dynamics != DynamicsKind::Free {
        return Err(DualError::WrongDynamics("free"));
    }
    Ok(apply_stencil(f, f.degree + 1, stencil_aplus_free))
}

// ---------------------------------------------------------------------------
// pairings
// ---------------------------------------------------------------------------

/// Shift-summed pairing `<<f, g>> = sum_z sum_supports f(support + z) g(support)`.
///
/// Cross-degree pairings vanish. On free supports each class carries its
/// multiset multiplicity weight.
pub fn semi_inner_product(f: &MonomialFunction, g: &MonomialFunction) -> Result<f64, DualError> {
    if !f.same_space(g) {
        return Err(DualError::MixedSpaces);
    }
    if f.degree != g.degree {
        return Ok(0.0);
    }
    match f.domain {
        Domain::Line => {
            // group by anchored shape; translation collapses each class
            let mut fbar: BTreeMap<Vec<Pt>, f64> = BTreeMap::new();
            for (k, c) in f.iter() {
                *fbar.entry(anchored(k)).or_insert(0.0) += c;
            }
            let mut acc = 0.0;
            let mut gbar: BTreeMap<Vec<Pt>, f64> = BTreeMap::new();
            for (k, c) in g.iter() {
                *gbar.entry(anchored(k)).or_insert(0.0) += c;
            }
            for (shape, gs) in gbar {
                if let Some(fs) = fbar.get(&shape) {
                    let w = match f.dynamics {
                        DynamicsKind::HardCore => 1.0,
                        DynamicsKind::Free => multiset_weight(&shape),
                    };
                    acc += w * fs * gs;
                }
            }
            Ok(acc)
        }
        Domain::Torus(geom) => {
            let mut acc = 0.0;
            for (k, gc) in g.iter() {
                let w = match f.dynamics {
                    DynamicsKind::HardCore => 1.0,
                    DynamicsKind::Free => multiset_weight(k),
                };
                for x in 0..geom.sites() {
                    let z = geom.coords(x);
                    let z = [z[0] as i64, z[1] as i64];
                    let mut shifted: Vec<Pt> =
                        k.iter().map(|p| f.domain.step(*p, z)).collect();
                    shifted.sort_unstable();
                    acc += w * f.coeff(&shifted) * gc;
                }
            }
            Ok(acc)
        }
    }
}

/// Plain coefficient pairing without the translation sum; free supports carry
/// their multiplicity weight. Used for fixed-function Dirichlet comparisons.
pub fn plain_inner_product(f: &MonomialFunction, g: &MonomialFunction) -> Result<f64, DualError> {
    if !f.same_space(g) {
        return Err(DualError::MixedSpaces);
    }
    if f.degree != g.degree {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (k, c) in g.iter() {
        let w = match f.dynamics {
            DynamicsKind::HardCore => 1.0,
            DynamicsKind::Free => multiset_weight(k),
        };
        acc += w * f.coeff(k) * c;
    }
    Ok(acc)
}

fn anchored(key: &[Pt]) -> Vec<Pt> {
    if key.is_empty() {
        return Vec::new();
    }
    let a = key[0];
    key.iter().map(|p| [p[0] - a[0], p[1] - a[1]]).collect()
}

// ---------------------------------------------------------------------------
// local-function decomposition
// ---------------------------------------------------------------------------

const MAX_WINDOW: usize = 12;

/// A function split into its monomial degrees.
#[derive(Debug, Clone)]
pub struct GradedFunction {
    pub d: u8,
    pub rho: f64,
    parts: BTreeMap<usize, MonomialFunction>,
}

impl GradedFunction {
    pub fn part(&self, degree: usize) -> Option<&MonomialFunction> {
        self.parts.get(&degree)
    }

    pub fn degrees(&self) -> impl Iterator<Item = usize> + '_ {
        self.parts.keys().copied()
    }

    pub fn max_degree(&self) -> usize {
        self.parts.keys().copied().max().unwrap_or(0)
    }

    /// Value at the configuration whose occupied window points are `occupied`.
    pub fn evaluate(&self, occupied: &[Pt]) -> f64 {
        let chi = self.rho * (1.0 - self.rho);
        let sq = chi.sqrt();
        let up = (1.0 - self.rho) / sq;
        let down = -self.rho / sq;
        let mut acc = 0.0;
        for f in self.parts.values() {
            for (key, c) in f.iter() {
                let mut prod = *c;
                for p in key {
                    prod *= if occupied.contains(p) { up } else { down };
                }
                acc += prod;
            }
        }
        acc
    }
}

/// Expands a local function, given by its truth table over a window of sites,
/// into normalized occupation monomials at density `rho`.
///
/// `table[i]` is the value at the configuration whose occupied sites are the
/// bits of i (bit k = `window[k]`).
pub fn decompose_local_function(
    window: &[Pt],
    table: &[f64],
    rho: f64,
    d: u8,
) -> Result<GradedFunction, DualError> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(DualError::BadParameter(format!("density {rho} outside (0, 1)")));
    }
    let w = window.len();
    if w > MAX_WINDOW {
        return Err(DualError::WindowTooLarge(w, MAX_WINDOW));
    }
    for (i, p) in window.iter().enumerate() {
        if !Domain::Line.contains(*p, d) {
            return Err(DualError::BadSupport(*p, "outside the domain".into()));
        }
        if window[..i].contains(p) {
            return Err(DualError::RepeatedPoint(*p));
        }
    }
    let size = 1usize << w;
    if table.len() != size {
        return Err(DualError::BadTable(table.len(), size));
    }
    let chi = rho * (1.0 - rho);
    let sq = chi.sqrt();
    let up = (1.0 - rho) / sq; // xi value at an occupied site
    let down = -rho / sq;
    // nu weights per configuration
    let mut parts: BTreeMap<usize, MonomialFunction> = BTreeMap::new();
    for mask in 0..size {
        // coefficient <f xi_mask>_nu
        let mut coeff = 0.0;
        for c in 0..size {
            let mut weight = table[c];
            if weight == 0.0 {
                continue;
            }
            for k in 0..w {
                let occ = c >> k & 1 == 1;
                weight *= if occ { rho } else { 1.0 - rho };
                if mask >> k & 1 == 1 {
                    weight *= if occ { up } else { down };
                }
            }
            coeff += weight;
        }
        if coeff.abs() < 1e-300 {
            continue;
        }
        let degree = mask.count_ones() as usize;
        let key: Vec<Pt> =
            (0..w).filter(|k| mask >> k & 1 == 1).map(|k| window[k]).collect();
        let part = parts.entry(degree).or_insert_with(|| {
            MonomialFunction::zero(degree, d, Domain::Line, DynamicsKind::HardCore)
        });
        let key = {
            let mut key = key;
            key.sort_unstable();
            key
        };
        *part.coeffs.entry(key).or_insert(0.0) += coeff;
    }
    for p in parts.values_mut() {
        p.coeffs.retain(|_, v| v.abs() > 0.0);
    }
    parts.retain(|_, p| !p.coeffs.is_empty());
    Ok(GradedFunction { d, rho, parts })
}

/// The renormalized current as a monomial function: coefficient chi at the
/// bond {0, e1} in unnormalized terms, i.e. 1/4 at density 1/2.
pub fn w1_monomial(d: u8, domain: Domain) -> MonomialFunction {
    let key = match domain {
        Domain::Line => vec![[0, 0], E1],
        Domain::Torus(g) => {
            let t = g.shift(0, [1, 0]);
            let c = g.coords(t);
            vec![[0, 0], [c[0] as i64, c[1] as i64]]
        }
    };
    MonomialFunction::new(2, d, domain, DynamicsKind::HardCore, &[(key, 0.25)]).unwrap()
}

// ---------------------------------------------------------------------------
// extension and restriction between hard-core and free supports
// ---------------------------------------------------------------------------

/// Extends a hard-core coefficient function to multisets.
///
/// Distinct supports copy over unchanged. A multiset with k doubled sites,
/// each at l1 distance at least [`ISOLATION_RADIUS`] from every other
/// occupied point, takes the average of f over the (2d)^k ways of moving one
/// copy of each double to a unit neighbor. All other multisets get 0.
pub fn extend_t(f: &MonomialFunction) -> Result<MonomialFunction, DualError> {
    if f.dynamics != DynamicsKind::HardCore {
        return Err(DualError::WrongDynamics("hard-core"));
    }
    if f.domain != Domain::Line {
        return Err(DualError::NeedsLine);
    }
    let two_d = (2 * f.d as usize) as f64;
    let mut out = MonomialFunction::zero(f.degree, f.d, f.domain, DynamicsKind::Free);
    for (key, &c) in f.iter() {
        for m in oriented_matchings(key) {
            let k = m.pairs.len();
            // collapse each pair (x, y) onto a double at x
            let mut support: Vec<Pt> = m.singles.clone();
            for &(x, _) in &m.pairs {
                support.push(x);
                support.push(x);
            }
            support.sort_unstable();
            if k > 0 && !doubles_isolated(&m) {
                continue;
            }
            let weight = c / two_d.powi(k as i32);
            *out.coeffs.entry(support).or_insert(0.0) += weight;
        }
    }
    out.coeffs.retain(|_, v| *v != 0.0);
    Ok(out)
}

struct OrientedMatching {
    singles: Vec<Pt>,
    /// (doubled site, averaged-out neighbor)
    pairs: Vec<(Pt, Pt)>,
}

fn doubles_isolated(m: &OrientedMatching) -> bool {
    for (i, &(x, _)) in m.pairs.iter().enumerate() {
        for p in &m.singles {
            if l1(x, *p) < ISOLATION_RADIUS {
                return false;
            }
        }
        for (j, &(x2, _)) in m.pairs.iter().enumerate() {
            if i != j && l1(x, x2) < ISOLATION_RADIUS {
                return false;
            }
        }
    }
    true
}

fn l1(a: Pt, b: Pt) -> i64 {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs()
}

/// All ways to pick disjoint adjacent pairs from `key` (rest stay single),
/// each pair tagged with which endpoint becomes the double.
fn oriented_matchings(key: &[Pt]) -> Vec<OrientedMatching> {
    if key.is_empty() {
        return vec![OrientedMatching { singles: Vec::new(), pairs: Vec::new() }];
    }
    let p = key[0];
    let rest: Vec<Pt> = key[1..].to_vec();
    let mut results = Vec::new();
    // p stays single
    for mut m in oriented_matchings(&rest) {
        m.singles.push(p);
        results.push(m);
    }
    // p pairs with an adjacent q
    for (qi, &q) in rest.iter().enumerate() {
        if l1(p, q) != 1 {
            continue;
        }
        let mut rest2 = rest.clone();
        rest2.remove(qi);
        for orient in 0..2 {
            let pair = if orient == 0 { (p, q) } else { (q, p) };
            for mut m in oriented_matchings(&rest2) {
                m.pairs.push(pair);
                results.push(m);
            }
        }
    }
    results
}

/// Restriction back to hard-core supports: keeps the all-distinct part.
pub fn restrict_r(big_f: &MonomialFunction) -> Result<MonomialFunction, DualError> {
    if big_f.dynamics != DynamicsKind::Free {
        return Err(DualError::WrongDynamics("free"));
    }
    let mut out = MonomialFunction::zero(big_f.degree, big_f.d, big_f.domain, DynamicsKind::HardCore);
    for (key, &c) in big_f.iter() {
        let distinct = key.windows(2).all(|w| w[0] != w[1]);
        if distinct {
            out.coeffs.insert(key.clone(), c);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_fn(degree: usize, entries: &[(Vec<Pt>, f64)]) -> MonomialFunction {
        MonomialFunction::new(degree, 1, Domain::Line, DynamicsKind::HardCore, entries).unwrap()
    }

    #[test]
    fn support_validation() {
        assert_eq!(
            MonomialFunction::new(
                2,
                1,
                Domain::Line,
                DynamicsKind::HardCore,
                &[(vec![[0, 0], [0, 0]], 1.0)]
            ),
            Err(DualError::RepeatedPoint([0, 0]))
        );
        assert!(MonomialFunction::new(
            2,
            1,
            Domain::Line,
            DynamicsKind::Free,
            &[(vec![[0, 0], [0, 0]], 1.0)]
        )
        .is_ok());
        assert!(MonomialFunction::new(
            1,
            1,
            Domain::Line,
            DynamicsKind::HardCore,
            &[(vec![[0, 1]], 1.0)]
        )
        .is_err());
    }

    #[test]
    fn s_on_degree_one_is_half_laplacian() {
        let f = line_fn(1, &[(vec![[0, 0]], 1.0)]);
        let sf = apply_s_hardcore(&f).unwrap();
        assert_eq!(sf.coeff(&[[1, 0]]), 0.5);
        assert_eq!(sf.coeff(&[[-1, 0]]), 0.5);
        assert_eq!(sf.coeff(&[[0, 0]]), -1.0);
    }

    #[test]
    fn aplus_on_single_site() {
        let f = line_fn(1, &[(vec![[0, 0]], 1.0)]);
        let af = apply_aplus_hardcore(&f).unwrap();
        assert_eq!(af.coeff(&[[0, 0], [1, 0]]), 0.5);
        assert_eq!(af.coeff(&[[-1, 0], [0, 0]]), -0.5);
        assert_eq!(af.support_size(), 2);
    }

    #[test]
    fn shift_sum_pairing_collapses_translates() {
        let f = line_fn(2, &[(vec![[0, 0], [1, 0]], 1.0), (vec![[5, 0], [6, 0]], 2.0)]);
        let g = line_fn(2, &[(vec![[3, 0], [4, 0]], 1.0)]);
        // both f supports are translates of g's bond
        assert_eq!(semi_inner_product(&f, &g).unwrap(), 3.0);
        let w = w1_monomial(1, Domain::Line);
        assert_eq!(semi_inner_product(&w, &w).unwrap(), 0.0625);
    }

    #[test]
    fn free_laplacian_on_double() {
        let b = MonomialFunction::new(
            2,
            1,
            Domain::Line,
            DynamicsKind::Free,
            &[(vec![[0, 0], [0, 0]], 1.0)],
        )
        .unwrap();
        let df = apply_delta_free(&b).unwrap();
        // moves into (0,0): from (0,1) one step of either copy... the column
        // convention counts moves of the neighbor multiset landing on b
        assert_eq!(df.coeff(&[[0, 0], [0, 0]]), -4.0);
        assert_eq!(df.coeff(&[[-1, 0], [0, 0]]), 1.0);
        assert_eq!(df.coeff(&[[0, 0], [1, 0]]), 1.0);
    }

    #[test]
    fn extension_copies_distinct_supports_and_averages_doubles() {
        // far-apart pair so the doubled supports qualify as isolated
        let f = line_fn(2, &[(vec![[0, 0], [9, 0]], 4.0)]);
        let big = extend_t(&f).unwrap();
        assert_eq!(big.coeff(&[[0, 0], [9, 0]]), 4.0);
        // no adjacent pair in f, so no doubles appear
        assert_eq!(big.support_size(), 1);

        let g = line_fn(2, &[(vec![[0, 0], [1, 0]], 4.0)]);
        let bigg = extend_t(&g).unwrap();
        assert_eq!(bigg.coeff(&[[0, 0], [1, 0]]), 4.0);
        // doubles at 0 and at 1, each averaging over 2 neighbors in d = 1
        assert_eq!(bigg.coeff(&[[0, 0], [0, 0]]), 2.0);
        assert_eq!(bigg.coeff(&[[1, 0], [1, 0]]), 2.0);
        let back = restrict_r(&bigg).unwrap();
        assert_eq!(back.max_abs_diff(&g), 0.0);
    }
}
