//! Numerical laboratory for weak KAM theory and the singular structure of
//! potential-energy functionals on probability-measure space.
//!
//! The crate is organized bottom-up:
//!
//! * [`geom`] — flat domains (torus / box) and the shared vector algebra;
//! * [`dynamics`] — mechanical Tonelli models `H(x,p) = ½|p|² + V(x)` and their
//!   symplectic flows;
//! * [`action`] — the fundamental solution `A_t(x,y)` (minimal action between
//!   endpoints), its minimizing curves, dual arcs, derivatives, and a memoized
//!   grid cache;
//! * [`hopf_lax`] — scalar Lax-Oleinik evolutions `T_t^±`, weak KAM solutions,
//!   the critical value, superdifferentials, cut times, and intrinsic singular
//!   characteristics;
//! * [`measure`] — discrete probability measures, exact optimal transport,
//!   gluing, generalized geodesics, and potential-energy functionals;
//! * [`cost`] — the dynamical cost `C^t(μ,ν)` with displacement interpolation,
//!   superdifferentials, and regularity probes;
//! * [`wasserstein_hj`] — measure-space Lax-Oleinik operators `P_t^±`, the
//!   measure cut time, argmax-measure curves, and viscosity checks;
//! * [`flow`] — the minimizing-movement singular flow and its continuity
//!   equation residuals.
//!
//! Everything runs at desk scale: one- or two-dimensional tori (or boxes),
//! grids up to 512 nodes per axis, measures up to 256 atoms. All operations
//! are deterministic: parallel loops write to indexed slots and all floating
//! reductions run in a fixed serial order, so results are identical across
//! thread counts.

pub mod error;
pub mod geom;

pub mod action;
pub mod dynamics;
pub mod field;
pub mod hopf_lax;
pub mod measure;
pub mod cost;
pub mod wasserstein_hj;
pub mod flow;

pub use error::{Error, Result};
