//! Lattice state layer: jump laws, torus geometry, bit-packed configurations,
//! exchange moves, and the microscopic current observables.
//!
//! Conventions used throughout the crate:
//! * dimension d is 1 or 2; displacements are `[i64; 2]` with the second
//!   component forced to 0 when d = 1;
//! * torus sites are linearized as `x = i + n1 * j` with `i` the e1
//!   coordinate;
//! * a configuration stores one bit per site, packed into u64 words.

use rand::Rng;
use thiserror::Error;

use crate::rng::RngStream;

#[derive(Debug, Error, PartialEq)]
pub enum LatticeError {
    #[error("dimension must be 1 or 2, got {0}")]
    BadDimension(u8),
    #[error("jump law has no displacement with positive rate")]
    EmptyLaw,
    #[error("rate for displacement {0:?} is negative: {1}")]
    NegativeRate([i64; 2], f64),
    #[error("displacement {0:?} is invalid for dimension {1}")]
    BadDisplacement([i64; 2], u8),
    #[error("zero displacement cannot carry rate")]
    ZeroDisplacement,
    #[error("law was required to be asymmetric but has zero mean displacement")]
    SymmetricLaw,
    #[error("torus side {0} is too small (need at least {1})")]
    SideTooSmall(usize, usize),
    #[error("site index {0} out of range for {1} sites")]
    SiteOutOfRange(usize, usize),
    #[error("exchange endpoints coincide at site {0}")]
    DegenerateBond(usize),
    #[error("density {0} outside [0, 1]")]
    BadDensity(f64),
    #[error("axis {0} is invalid for dimension {1}")]
    BadAxis(u8, u8),
}

/// Finite-range translation-invariant jump law `p(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpLaw {
    d: u8,
    rates: Vec<([i64; 2], f64)>,
}

impl JumpLaw {
    /// Validates and builds a jump law. Displacements must be distinct,
    /// nonzero, rates nonnegative with at least one positive entry. With
    /// `require_asymmetric` the mean displacement must be nonzero.
    pub fn new(
        d: u8,
        entries: &[([i64; 2], f64)],
        require_asymmetric: bool,
    ) -> Result<Self, LatticeError> {
        if d != 1 && d != 2 {
            return Err(LatticeError::BadDimension(d));
        }
        let mut rates: Vec<([i64; 2], f64)> = Vec::new();
        for &(z, r) in entries {
            if r < 0.0 || !r.is_finite() {
                return Err(LatticeError::NegativeRate(z, r));
            }
            if r == 0.0 {
                continue;
            }
            if z == [0, 0] {
                return Err(LatticeError::ZeroDisplacement);
            }
            if d == 1 && z[1] != 0 {
                return Err(LatticeError::BadDisplacement(z, d));
            }
            match rates.iter_mut().find(|(zz, _)| *zz == z) {
                Some((_, rr)) => *rr += r,
                None => rates.push((z, r)),
            }
        }
        if rates.is_empty() {
            return Err(LatticeError::EmptyLaw);
        }
        rates.sort_by_key(|(z, _)| *z);
        let law = JumpLaw { d, rates };
        if require_asymmetric && law.mean_displacement() == [0.0, 0.0] {
            return Err(LatticeError::SymmetricLaw);
        }
        Ok(law)
    }

    /// Totally asymmetric nearest-neighbor law on Z: jump +1 at rate 1.
    pub fn tasep_1d() -> Self {
        JumpLaw::new(1, &[([1, 0], 1.0)], true).unwrap()
    }

    /// Symmetric nearest-neighbor law on Z: jumps +-1 at rate 1/2 each.
    pub fn ssep_1d() -> Self {
        JumpLaw::new(1, &[([1, 0], 0.5), ([-1, 0], 0.5)], false).unwrap()
    }

    /// Planar law: +e1 at rate 1, +-e2 at rate 1/2 each.
    pub fn special_2d() -> Self {
        JumpLaw::new(2, &[([1, 0], 1.0), ([0, 1], 0.5), ([0, -1], 0.5)], true).unwrap()
    }

    /// The standard asymmetric model in dimension `d`.
    pub fn standard(d: u8) -> Result<Self, LatticeError> {
        match d {
            1 => Ok(JumpLaw::tasep_1d()),
            2 => Ok(JumpLaw::special_2d()),
            other => Err(LatticeError::BadDimension(other)),
        }
    }

    pub fn dimension(&self) -> u8 {
        self.d
    }

    /// Displacements with strictly positive rate, sorted.
    pub fn rates(&self) -> &[([i64; 2], f64)] {
        &self.rates
    }

    pub fn total_rate(&self) -> f64 {
        self.rates.iter().map(|(_, r)| r).sum()
    }

    /// First moment `sum_z z p(z)`.
    pub fn mean_displacement(&self) -> [f64; 2] {
        let mut m = [0.0, 0.0];
        for &(z, r) in &self.rates {
            m[0] += z[0] as f64 * r;
            m[1] += z[1] as f64 * r;
        }
        m
    }

    /// Smallest L such that every displacement lies in [-L, L]^d.
    pub fn range(&self) -> i64 {
        self.rates
            .iter()
            .map(|(z, _)| z[0].abs().max(z[1].abs()))
            .max()
            .unwrap_or(0)
    }

    pub fn is_symmetric(&self) -> bool {
        self.rates.iter().all(|&(z, r)| {
            let back = [-z[0], -z[1]];
            let rb = self
                .rates
                .iter()
                .find(|(zz, _)| *zz == back)
                .map(|(_, r)| *r)
                .unwrap_or(0.0);
            (r - rb).abs() <= 1e-15 * (1.0 + r.abs())
        })
    }
}

/// Discrete torus (Z/n1) x (Z/n2); in d = 1 the second side is 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TorusGeometry {
    d: u8,
    sides: [usize; 2],
}

impl TorusGeometry {
    pub fn new(d: u8, sides: [usize; 2]) -> Result<Self, LatticeError> {
        match d {
            1 => {
                if sides[0] < 2 {
                    return Err(LatticeError::SideTooSmall(sides[0], 2));
                }
                if sides[1] != 1 {
                    return Err(LatticeError::BadDisplacement([0, sides[1] as i64], 1));
                }
            }
            2 => {
                for &s in &sides {
                    if s < 2 {
                        return Err(LatticeError::SideTooSmall(s, 2));
                    }
                }
            }
            other => return Err(LatticeError::BadDimension(other)),
        }
        Ok(TorusGeometry { d, sides })
    }

    pub fn line(n: usize) -> Result<Self, LatticeError> {
        TorusGeometry::new(1, [n, 1])
    }

    pub fn dimension(&self) -> u8 {
        self.d
    }

    pub fn sides(&self) -> [usize; 2] {
        self.sides
    }

    pub fn sites(&self) -> usize {
        self.sides[0] * self.sides[1]
    }

    /// Both sides must exceed twice the law's range plus one, so a jump never
    /// wraps onto its own source and every bond has two distinct endpoints.
    pub fn supports_law(&self, law: &JumpLaw) -> Result<(), LatticeError> {
        let need = (2 * law.range() + 2) as usize;
        let active = if self.d == 1 { 1 } else { 2 };
        for k in 0..active {
            if self.sides[k] < need {
                return Err(LatticeError::SideTooSmall(self.sides[k], need));
            }
        }
        Ok(())
    }

    pub fn coords(&self, site: usize) -> [usize; 2] {
        [site % self.sides[0], site / self.sides[0]]
    }

    pub fn site(&self, coords: [usize; 2]) -> usize {
        coords[0] % self.sides[0] + self.sides[0] * (coords[1] % self.sides[1])
    }

    /// Site reached from `site` by displacement `z`, with periodic wrap.
    pub fn shift(&self, site: usize, z: [i64; 2]) -> usize {
        let c = self.coords(site);
        let n1 = self.sides[0] as i64;
        let n2 = self.sides[1] as i64;
        let i = (c[0] as i64 + z[0]).rem_euclid(n1) as usize;
        let j = (c[1] as i64 + z[1]).rem_euclid(n2) as usize;
        i + self.sides[0] * j
    }

    /// Signed representative of `b - a` with components in [-n/2, n/2).
    pub fn displacement(&self, a: usize, b: usize) -> [i64; 2] {
        let ca = self.coords(a);
        let cb = self.coords(b);
        let mut out = [0i64; 2];
        for k in 0..2 {
            let n = self.sides[k] as i64;
            let mut dlt = (cb[k] as i64 - ca[k] as i64).rem_euclid(n);
            if dlt >= (n + 1) / 2 && n > 1 {
                dlt -= n;
            }
            out[k] = dlt;
        }
        out
    }
}

/// Bit-packed occupation field on a torus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Configuration {
    geom: TorusGeometry,
    words: Vec<u64>,
    occupied: usize,
}

impl Configuration {
    pub fn empty(geom: TorusGeometry) -> Self {
        let nw = (geom.sites() + 63) / 64;
        Configuration { geom, words: vec![0; nw], occupied: 0 }
    }

    /// Builds a configuration from an explicit occupancy list.
    pub fn from_bits(geom: TorusGeometry, bits: &[bool]) -> Result<Self, LatticeError> {
        if bits.len() != geom.sites() {
            return Err(LatticeError::SiteOutOfRange(bits.len(), geom.sites()));
        }
        let mut c = Configuration::empty(geom);
        for (x, &b) in bits.iter().enumerate() {
            if b {
                c.set(x, true);
            }
        }
        Ok(c)
    }

    pub fn geometry(&self) -> &TorusGeometry {
        &self.geom
    }

    #[inline]
    pub fn get(&self, site: usize) -> bool {
        (self.words[site >> 6] >> (site & 63)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, site: usize, value: bool) {
        let w = site >> 6;
        let mask = 1u64 << (site & 63);
        let old = self.words[w] & mask != 0;
        if old != value {
            self.words[w] ^= mask;
            if value {
                self.occupied += 1;
            } else {
                self.occupied -= 1;
            }
        }
    }

    pub fn particles(&self) -> usize {
        self.occupied
    }

    pub fn sites(&self) -> usize {
        self.geom.sites()
    }

    /// Occupancy as +-deviation from density, for correlation estimators.
    #[inline]
    pub fn centered(&self, site: usize, rho: f64) -> f64 {
        (self.get(site) as u8 as f64) - rho
    }
}

/// Swaps the occupancies of the two (distinct) endpoints.
///
/// Applying the same bond twice restores the configuration; the particle
/// count is conserved.
pub fn apply_exchange(config: &mut Configuration, a: usize, b: usize) -> Result<(), LatticeError> {
    let n = config.sites();
    if a >= n || b >= n {
        return Err(LatticeError::SiteOutOfRange(a.max(b), n));
    }
    if a == b {
        return Err(LatticeError::DegenerateBond(a));
    }
    let (va, vb) = (config.get(a), config.get(b));
    if va != vb {
        config.set(a, vb);
        config.set(b, va);
    }
    Ok(())
}

/// Draws an independent Bernoulli(rho) occupancy at every site.
pub fn sample_bernoulli(
    geom: TorusGeometry,
    rho: f64,
    stream: RngStream,
) -> Result<Configuration, LatticeError> {
    if !(0.0..=1.0).contains(&rho) || !rho.is_finite() {
        return Err(LatticeError::BadDensity(rho));
    }
    let mut rng = stream.rng();
    let mut c = Configuration::empty(geom);
    for x in 0..geom.sites() {
        if rng.gen::<f64>() < rho {
            c.set(x, true);
        }
    }
    Ok(c)
}

/// Microscopic current across the directed bond `(x, x + e_axis)` for the
/// standard asymmetric models: axis 1 carries the totally asymmetric part
/// `eta_x (1 - eta_{x+e1})`, axis 2 the symmetric gradient
/// `(eta_{x+e2} - eta_x) / 2`.
pub fn instantaneous_current(
    config: &Configuration,
    site: usize,
    axis: u8,
) -> Result<f64, LatticeError> {
    let geom = *config.geometry();
    if site >= geom.sites() {
        return Err(LatticeError::SiteOutOfRange(site, geom.sites()));
    }
    match (geom.dimension(), axis) {
        (_, 1) => {
            let y = geom.shift(site, [1, 0]);
            Ok((config.get(site) as u8 as f64) * (1.0 - config.get(y) as u8 as f64))
        }
        (2, 2) => {
            let y = geom.shift(site, [0, 1]);
            Ok(0.5 * ((config.get(y) as u8 as f64) - (config.get(site) as u8 as f64)))
        }
        (d, a) => Err(LatticeError::BadAxis(a, d)),
    }
}

/// Renormalized current along e1: the degree-2 part of the axis-1 current
/// after subtracting its mean and gradient components,
/// `(eta_x - rho)(eta_{x+e1} - rho)`.
pub fn renormalized_current(
    config: &Configuration,
    site: usize,
    rho: f64,
) -> Result<f64, LatticeError> {
    let geom = *config.geometry();
    if site >= geom.sites() {
        return Err(LatticeError::SiteOutOfRange(site, geom.sites()));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(LatticeError::BadDensity(rho));
    }
    let y = geom.shift(site, [1, 0]);
    Ok(config.centered(site, rho) * config.centered(y, rho))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn law_validation() {
        assert_eq!(
            JumpLaw::new(1, &[([1, 0], -0.5)], false),
            Err(LatticeError::NegativeRate([1, 0], -0.5))
        );
        assert_eq!(JumpLaw::new(1, &[([0, 0], 1.0)], false), Err(LatticeError::ZeroDisplacement));
        assert_eq!(JumpLaw::new(1, &[([1, 0], 0.0)], false), Err(LatticeError::EmptyLaw));
        assert_eq!(JumpLaw::new(1, &[([0, 1], 1.0)], false), Err(LatticeError::BadDisplacement([0, 1], 1)));
        assert_eq!(
            JumpLaw::new(1, &[([1, 0], 0.5), ([-1, 0], 0.5)], true),
            Err(LatticeError::SymmetricLaw)
        );
        let law = JumpLaw::special_2d();
        assert_eq!(law.mean_displacement(), [1.0, 0.0]);
        assert_eq!(law.total_rate(), 2.0);
        assert_eq!(law.range(), 1);
        assert!(!law.is_symmetric());
        assert!(JumpLaw::ssep_1d().is_symmetric());
    }

    #[test]
    fn torus_shift_wraps() {
        let g = TorusGeometry::new(2, [6, 4]).unwrap();
        assert_eq!(g.sites(), 24);
        let x = g.site([5, 3]);
        assert_eq!(g.shift(x, [1, 0]), g.site([0, 3]));
        assert_eq!(g.shift(x, [0, 1]), g.site([5, 0]));
        assert_eq!(g.shift(x, [-7, -5]), g.site([4, 2]));
        assert_eq!(g.displacement(g.site([0, 0]), g.site([5, 3])), [-1, -1]);
        assert!(TorusGeometry::line(1).is_err());
    }

    #[test]
    fn exchange_is_involutive_and_conservative() {
        let g = TorusGeometry::line(10).unwrap();
        let mut c = sample_bernoulli(g, 0.5, RngStream::new(1, 0)).unwrap();
        let before = c.clone();
        let n0 = c.particles();
        apply_exchange(&mut c, 3, 4).unwrap();
        assert_eq!(c.particles(), n0);
        apply_exchange(&mut c, 3, 4).unwrap();
        assert_eq!(c, before);
        assert!(apply_exchange(&mut c, 2, 2).is_err());
        assert!(apply_exchange(&mut c, 0, 10).is_err());
    }

    #[test]
    fn bernoulli_density_matches() {
        let g = TorusGeometry::line(100_000).unwrap();
        let c = sample_bernoulli(g, 0.25, RngStream::new(42, 3)).unwrap();
        let hat = c.particles() as f64 / c.sites() as f64;
        // 3 sigma band around rho = 1/4 with n = 1e5 draws
        assert!((hat - 0.25).abs() < 3.0 * (0.25f64 * 0.75 / 1e5).sqrt());
    }

    #[test]
    fn currents_on_small_line() {
        let g = TorusGeometry::line(4).unwrap();
        let c = Configuration::from_bits(g, &[true, false, true, true]).unwrap();
        assert_eq!(instantaneous_current(&c, 0, 1).unwrap(), 1.0);
        assert_eq!(instantaneous_current(&c, 2, 1).unwrap(), 0.0);
        // wrap: site 3 -> site 0 is blocked
        assert_eq!(instantaneous_current(&c, 3, 1).unwrap(), 0.0);
        assert_eq!(renormalized_current(&c, 0, 0.5).unwrap(), -0.25);
        assert_eq!(renormalized_current(&c, 2, 0.5).unwrap(), 0.25);
        assert!(instantaneous_current(&c, 0, 2).is_err());
    }
}
