//! Crate-wide error type. Every fallible operation returns [`Result`]; the
//! variants mirror the failure modes named in the module contracts (domain
//! violations, non-convergence carrying the best iterate, resolution and
//! ambiguity failures, marginal mismatches, cut-time formula disagreement).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates a precondition (t ≤ 0, s outside
    /// [0, t], empty grids, …).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A queried point lies outside the model's domain (box bounds).
    #[error("point outside domain: {0}")]
    Domain(String),

    /// Numerical integration produced a non-finite state.
    #[error("non-finite state at integration step {step}")]
    NonFinite { step: usize },

    /// An iterative solver stopped before meeting its tolerance. The best
    /// iterate's value and gradient norm are carried for diagnosis.
    #[error(
        "no convergence after {iterations} iterations (best value {best_value:.6e}, \
         gradient norm {grad_norm:.3e}): {context}"
    )]
    Convergence {
        iterations: usize,
        best_value: f64,
        grad_norm: f64,
        context: String,
    },

    /// The action minimizer exhausted its iteration budget; the best iterate
    /// found (curve, momenta, value, residual) rides along for diagnosis.
    #[error(
        "action minimizer did not converge after {} iterations \
         (value {:.6e}, gradient norm {:.3e})",
        result.iterations,
        result.value,
        result.grad_norm
    )]
    ActionNoConvergence { result: Box<crate::action::ActionResult> },

    /// A search radius fell below the grid spacing, leaving no candidates.
    #[error("resolution too coarse: {0}")]
    Resolution(String),

    /// Input data fails a structural invariant (weights, marginals, masks).
    #[error("validation failed: {0}")]
    Validation(String),

    /// An argmax is attained at two well-separated sites with nearly equal
    /// values; the probe time exceeds the uniqueness horizon.
    #[error(
        "ambiguous argmax ({context}): sites {site_a:?} and {site_b:?} differ by \
         {value_gap:.3e} in value but {separation:.3e} in position; shrink t"
    )]
    Ambiguous {
        context: String,
        site_a: [f64; 2],
        site_b: [f64; 2],
        value_gap: f64,
        separation: f64,
    },

    /// The three measure-cut-time formulas disagreed beyond tolerance. All
    /// three values are carried for postmortem.
    #[error(
        "cut-time formulas disagree: commutator {commutator:.6}, defect-mass \
         {defect_mass:.6}, infimum {infimum:.6} (tolerance {tolerance:.3e})"
    )]
    CutTimeMismatch {
        commutator: f64,
        defect_mass: f64,
        infimum: f64,
        tolerance: f64,
    },

    /// Too few valid samples to estimate a quantity.
    #[error("sampling failed: {0}")]
    Sampling(String),
}

pub type Result<T> = std::result::Result<T, Error>;
