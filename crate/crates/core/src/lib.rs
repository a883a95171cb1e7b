//! Exclusion-process toolkit.
//!
//! The crate is organized around one physical model, the asymmetric simple
//! exclusion process on a torus, and four ways of interrogating it:
//!
//! * [`kmc`]: event-driven equilibrium simulation with correlation estimators,
//! * [`oracle`]: exact generator matrices on small tori (ground truth),
//! * [`dual`]: the occupation-monomial operator calculus the analysis runs on,
//! * [`resolvent`]: truncated resolvent hierarchies on quotient windows,
//! * [`fourier`]: explicit momentum-space integrals and scaling fits.
//!
//! `lattice` holds the shared state layer, `quad` and `io` are small
//! numerics/output utilities.

pub mod dual;
pub mod fourier;
pub mod io;
pub mod kmc;
pub mod lattice;
pub mod oracle;
pub mod quad;
pub mod resolvent;
pub mod rng;
