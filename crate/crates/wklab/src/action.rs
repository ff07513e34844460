//! The fundamental solution `A_t(x, y)`: least action over curves joining `x`
//! to `y` in time `t`, together with the minimizing curve, its momentum arc,
//! exact discrete derivatives, convexity probes, and a memoized all-pairs
//! table for grid transforms.
//!
//! A curve is discretized as `K` equal time steps `Δs = t/K` with nodes
//! `η_0 = x, …, η_K = y` lifted to the universal cover. The discrete action is
//! the trapezoid-in-potential sum
//!
//! ```text
//! S(η) = Σ_k Δs · [ ½|v_k|² − (V(η_k) + V(η_{k+1}))/2 ],   v_k = (η_{k+1} − η_k)/Δs,
//! ```
//!
//! whose interior stationarity condition is exactly the leapfrog update of
//! [`crate::dynamics::TonelliModel::hamiltonian_flow`], and whose envelope
//! derivatives in the endpoints are exactly the half-step-corrected endpoint
//! momenta. Minimization runs Newton iterations with per-axis tridiagonal
//! solves (the potential is separable per axis, so the Hessian is block
//! tridiagonal with one block per axis), Levenberg regularization when a
//! block is not positive definite, and Armijo backtracking.
//!
//! On a torus the infimum ranges over winding classes `|w_i| ≤ W`; classes
//! whose straight-line action lower bound `|d_w|²/(2t) − t·max V` already
//! exceeds the current best are pruned. Exact value ties are broken toward
//! the smallest `|w|`, then by lexicographic comparison of curve nodes, so
//! reruns and thread counts cannot change the winner.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rayon::prelude::*;

use crate::dynamics::TonelliModel;
use crate::error::{Error, Result};
use crate::geom::{self, Vec2};

/// Knobs for the action minimizer. The defaults satisfy every tolerance used
/// in this crate's tests; raise `winding_bound` only for potentials with
/// strong drift.
#[derive(Clone, Copy, Debug)]
pub struct ActionParams {
    /// Largest per-axis winding number searched on a torus.
    pub winding_bound: i32,
    /// Target time step for automatically chosen resolutions.
    pub step_target: f64,
    /// Fewest curve intervals for automatically chosen resolutions.
    pub min_intervals: usize,
    /// Most curve intervals for automatically chosen resolutions.
    pub max_intervals: usize,
    /// Newton stops when the gradient sup norm falls below this.
    pub grad_tol: f64,
    /// Iteration cap per winding class.
    pub max_iterations: usize,
}

impl Default for ActionParams {
    fn default() -> Self {
        ActionParams {
            winding_bound: 2,
            step_target: 0.005,
            min_intervals: 16,
            max_intervals: 256,
            grad_tol: 1e-10,
            max_iterations: 200,
        }
    }
}

impl ActionParams {
    /// Curve node count (endpoints included) for duration `t`: one node per
    /// `step_target` of time, clamped to `[min_intervals, max_intervals]`
    /// intervals.
    pub fn auto_resolution(&self, t: f64) -> usize {
        let k = (t / self.step_target).round() as usize;
        k.clamp(self.min_intervals, self.max_intervals) + 1
    }
}

/// Minimizer output: the least action value plus the curve and momentum data
/// that every downstream consumer (derivatives, characteristics, transport
/// cost superdifferentials) reads off.
#[derive(Clone, Debug)]
pub struct ActionResult {
    /// Least action over the searched winding classes.
    pub value: f64,
    /// Curve duration.
    pub t: f64,
    /// Curve nodes in the universal cover; `curve[0]` is the reduced start
    /// point and the last node is the lifted arrival point.
    pub curve: Vec<Vec2>,
    /// Momentum at each node: half-step-corrected differences at the ends,
    /// centered differences inside. `dual_arc[0]` and `dual_arc[K]` are the
    /// exact envelope derivatives `−D_x A` and `D_y A`.
    pub dual_arc: Vec<Vec2>,
    /// Winning winding class (zero on a box).
    pub winding: [i32; 2],
    /// Newton iterations spent on the winning class.
    pub iterations: usize,
    /// Final gradient sup norm on the winning class.
    pub grad_norm: f64,
}

impl ActionResult {
    pub fn intervals(&self) -> usize {
        self.curve.len() - 1
    }

    pub fn start(&self) -> Vec2 {
        self.curve[0]
    }

    /// Arrival point in the universal cover (reduce before domain queries).
    pub fn end(&self) -> Vec2 {
        *self.curve.last().unwrap()
    }

    pub fn start_momentum(&self) -> Vec2 {
        self.dual_arc[0]
    }

    pub fn end_momentum(&self) -> Vec2 {
        *self.dual_arc.last().unwrap()
    }

    /// Piecewise-linear sample of the curve at time `s ∈ [0, t]`, in cover
    /// coordinates.
    pub fn sample(&self, s: f64) -> Vec2 {
        let k = self.intervals() as f64;
        let u = (s / self.t * k).clamp(0.0, k);
        let i = (u.floor() as usize).min(self.intervals() - 1);
        let f = u - i as f64;
        geom::add(geom::scale(self.curve[i], 1.0 - f), geom::scale(self.curve[i + 1], f))
    }

    /// Piecewise-linear sample of the momentum arc at time `s ∈ [0, t]`.
    pub fn dual_sample(&self, s: f64) -> Vec2 {
        let k = self.intervals() as f64;
        let u = (s / self.t * k).clamp(0.0, k);
        let i = (u.floor() as usize).min(self.intervals() - 1);
        let f = u - i as f64;
        geom::add(geom::scale(self.dual_arc[i], 1.0 - f), geom::scale(self.dual_arc[i + 1], f))
    }

    /// Largest node speed along the curve.
    pub fn max_speed(&self) -> f64 {
        let ds = self.t / self.intervals() as f64;
        self.curve
            .windows(2)
            .map(|w| geom::norm(geom::scale(geom::sub(w[1], w[0]), 1.0 / ds)))
            .fold(0.0, f64::max)
    }
}

/// The three partial derivatives of `(x, y, t) ↦ A_t(x, y)` along a minimizer.
#[derive(Clone, Copy, Debug)]
pub struct ActionDerivatives {
    /// `D_x A = −p(0)`.
    pub d_start: Vec2,
    /// `D_y A = p(t)`.
    pub d_end: Vec2,
    /// `D_t A = −H(η(t), p(t))` — minus the conserved energy.
    pub d_time: f64,
}

/// Derivatives read off a minimizer: exact discrete identities, no finite
/// differencing.
pub fn action_derivatives(model: &TonelliModel, result: &ActionResult) -> ActionDerivatives {
    let p_end = result.end_momentum();
    ActionDerivatives {
        d_start: geom::scale(result.start_momentum(), -1.0),
        d_end: p_end,
        d_time: -model.hamiltonian_unchecked(result.end(), p_end),
    }
}

/// Least action over curves from `x` to `y` in time `t`, searched over all
/// winding classes, at an automatically chosen resolution.
pub fn fundamental_solution(
    model: &TonelliModel,
    x: Vec2,
    y: Vec2,
    t: f64,
    params: &ActionParams,
) -> Result<ActionResult> {
    fundamental_solution_at(model, x, y, t, params.auto_resolution(t), params)
}

/// Least action at an explicit resolution (`nodes ≥ 2` curve nodes including
/// both endpoints).
pub fn fundamental_solution_at(
    model: &TonelliModel,
    x: Vec2,
    y: Vec2,
    t: f64,
    nodes: usize,
    params: &ActionParams,
) -> Result<ActionResult> {
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::Argument(format!("action needs a positive finite duration, got {t}")));
    }
    if nodes < 2 {
        return Err(Error::Argument(format!("action needs at least 2 curve nodes, got {nodes}")));
    }
    let domain = model.domain();
    domain.check_contains(x)?;
    domain.check_contains(y)?;
    let x = domain.reduce(x);
    let y = domain.reduce(y);

    let classes = winding_classes(model, x, y, t, params);
    let v_max = model.v_max();
    let mut best: Option<(ActionResult, [i32; 2])> = None;

    for (w, target) in classes {
        // Straight-line kinetic energy is a lower bound on the class action
        // up to the potential ceiling; skip classes that cannot win. Classes
        // that could merely tie are still solved so tie-breaking stays exact.
        let d = geom::sub(target, x);
        let bound = geom::dot(d, d) / (2.0 * t) - v_max * t;
        if let Some((ref b, _)) = best {
            if bound > b.value + 1e-12 {
                continue;
            }
        }
        let candidate = minimize_in_class(model, x, target, t, nodes, params)?;
        best = Some(match best {
            None => (candidate, w),
            Some((incumbent, wi)) => {
                if prefer_candidate(&candidate, w, &incumbent, wi) {
                    (candidate, w)
                } else {
                    (incumbent, wi)
                }
            }
        });
    }

    let (mut result, w) = best.expect("winding enumeration is never empty");
    result.winding = w;
    Ok(result)
}

/// Deterministic tie-break: better value wins; exact ties go to the smaller
/// winding magnitude, then to lexicographically smaller curve nodes.
fn prefer_candidate(
    cand: &ActionResult,
    wc: [i32; 2],
    incumbent: &ActionResult,
    wi: [i32; 2],
) -> bool {
    if cand.value < incumbent.value {
        return true;
    }
    if cand.value > incumbent.value {
        return false;
    }
    let (mc, mi) = (wc[0] * wc[0] + wc[1] * wc[1], wi[0] * wi[0] + wi[1] * wi[1]);
    if mc != mi {
        return mc < mi;
    }
    for (a, b) in cand.curve.iter().zip(&incumbent.curve) {
        match geom::lex_cmp(*a, *b) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    false
}

/// Enumerates lifted arrival points, nearest classes first (deterministic
/// order: ascending displacement norm, then lexicographic winding).
fn winding_classes(
    model: &TonelliModel,
    x: Vec2,
    y: Vec2,
    _t: f64,
    params: &ActionParams,
) -> Vec<([i32; 2], Vec2)> {
    let domain = model.domain();
    if !domain.is_torus() {
        return vec![([0, 0], y)];
    }
    let base = geom::add(x, domain.displacement(x, y));
    let w_range = -params.winding_bound..=params.winding_bound;
    let mut out = Vec::new();
    match domain.dim() {
        1 => {
            for w0 in w_range {
                out.push(([w0, 0], geom::add(base, [w0 as f64, 0.0])));
            }
        }
        _ => {
            for w1 in w_range.clone() {
                for w0 in w_range.clone() {
                    out.push(([w0, w1], geom::add(base, [w0 as f64, w1 as f64])));
                }
            }
        }
    }
    out.sort_by(|(wa, ta), (wb, tb)| {
        let da = geom::sub(*ta, x);
        let db = geom::sub(*tb, x);
        geom::dot(da, da)
            .total_cmp(&geom::dot(db, db))
            .then_with(|| wa.cmp(wb))
    });
    out
}

/// Discrete action of a node path in the universal cover.
fn discrete_action(model: &TonelliModel, eta: &[Vec2], ds: f64) -> f64 {
    let mut kinetic = 0.0;
    let mut potential = 0.0;
    for w in eta.windows(2) {
        let v = geom::scale(geom::sub(w[1], w[0]), 1.0 / ds);
        kinetic += 0.5 * geom::dot(v, v);
        potential += 0.5 * (model.potential_unchecked(w[0]) + model.potential_unchecked(w[1]));
    }
    ds * (kinetic - potential)
}

/// Gradient of the discrete action in the interior nodes (2 active axes max).
fn action_gradient(model: &TonelliModel, eta: &[Vec2], ds: f64, grad: &mut [Vec2]) {
    for (slot, j) in (1..eta.len() - 1).enumerate() {
        let curvature = geom::sub(
            geom::scale(eta[j], 2.0),
            geom::add(eta[j - 1], eta[j + 1]),
        );
        let dv = model.grad_potential(eta[j]);
        grad[slot] = geom::sub(geom::scale(curvature, 1.0 / ds), geom::scale(dv, ds));
    }
}

fn grad_sup_norm(grad: &[Vec2], dim: usize) -> f64 {
    grad.iter()
        .map(|g| if dim == 1 { g[0].abs() } else { g[0].abs().max(g[1].abs()) })
        .fold(0.0, f64::max)
}

/// Newton minimization inside one winding class, from the straight-line
/// initial path. Returns the stationary path found; non-convergence after the
/// iteration cap is an error carrying the best iterate.
fn minimize_in_class(
    model: &TonelliModel,
    x: Vec2,
    target: Vec2,
    t: f64,
    nodes: usize,
    params: &ActionParams,
) -> Result<ActionResult> {
    let k = nodes - 1;
    let ds = t / k as f64;
    let dim = model.domain().dim();

    let mut eta: Vec<Vec2> = (0..=k)
        .map(|i| {
            let f = i as f64 / k as f64;
            geom::add(geom::scale(x, 1.0 - f), geom::scale(target, f))
        })
        .collect();

    let interior = k.saturating_sub(1);
    let mut grad = vec![[0.0; 2]; interior];
    let mut value = discrete_action(model, &eta, ds);
    let mut iterations = 0;
    let mut grad_norm = 0.0;

    if interior > 0 {
        let mut step = vec![[0.0; 2]; interior];
        let mut trial = eta.clone();
        let mut diag = vec![0.0; interior];
        let mut rhs = vec![0.0; interior];
        loop {
            action_gradient(model, &eta, ds, &mut grad);
            grad_norm = grad_sup_norm(&grad, dim);
            if grad_norm <= params.grad_tol {
                break;
            }
            if iterations >= params.max_iterations {
                let result =
                    assemble_result(model, eta, ds, t, value, iterations, grad_norm);
                return Err(Error::ActionNoConvergence { result: Box::new(result) });
            }
            iterations += 1;

            // Newton direction with Levenberg fallback: solve per-axis
            // tridiagonal systems, inflating the diagonal until each block is
            // positive definite and the direction is descent.
            let mut levenberg = 0.0;
            let descent = loop {
                let mut ok = true;
                for axis in 0..dim {
                    for (slot, j) in (1..eta.len() - 1).enumerate() {
                        diag[slot] = 2.0 / ds
                            - ds * model.potential_axis_curvature(eta[j])[axis]
                            + levenberg;
                        rhs[slot] = -grad[slot][axis];
                    }
                    match solve_tridiagonal(&diag, -1.0 / ds, &mut rhs) {
                        Some(sol) => {
                            for (slot, s) in sol.iter().enumerate() {
                                step[slot][axis] = *s;
                            }
                        }
                        None => {
                            ok = false;
                            break;
                        }
                    }
                }
                let slope: f64 = if ok {
                    grad.iter().zip(&step).map(|(g, d)| geom::dot(*g, *d)).sum()
                } else {
                    1.0
                };
                if ok && slope < 0.0 {
                    break slope;
                }
                levenberg = if levenberg == 0.0 { 1e-6 * 2.0 / ds } else { levenberg * 4.0 };
                if levenberg > 1e12 {
                    let result =
                        assemble_result(model, eta, ds, t, value, iterations, grad_norm);
                    return Err(Error::ActionNoConvergence { result: Box::new(result) });
                }
            };

            // Once the predicted decrease sinks below the objective's f64
            // resolution, the Armijo test can no longer distinguish progress
            // from rounding noise; we are deep in the quadratic basin, so
            // take the full Newton step untested and let the gradient check
            // finish the job.
            if -descent <= 1e-13 * (1.0 + value.abs()) {
                for j in 1..k {
                    eta[j] = geom::add(eta[j], step[j - 1]);
                }
                value = discrete_action(model, &eta, ds);
                continue;
            }

            // Armijo backtracking on the discrete action.
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                for (j, node) in trial.iter_mut().enumerate() {
                    *node = if j == 0 || j == k {
                        eta[j]
                    } else {
                        geom::add(eta[j], geom::scale(step[j - 1], alpha))
                    };
                }
                let trial_value = discrete_action(model, &trial, ds);
                if trial_value.is_finite() && trial_value <= value + 1e-4 * alpha * descent {
                    std::mem::swap(&mut eta, &mut trial);
                    value = trial_value;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                // No decrease at any step length: we are at the numerical
                // floor. Accept the iterate if the gradient is already small.
                action_gradient(model, &eta, ds, &mut grad);
                grad_norm = grad_sup_norm(&grad, dim);
                if grad_norm <= params.grad_tol.max(1e-8) {
                    break;
                }
                let result =
                    assemble_result(model, eta, ds, t, value, iterations, grad_norm);
                return Err(Error::ActionNoConvergence { result: Box::new(result) });
            }
        }
    }

    Ok(assemble_result(model, eta, ds, t, value, iterations, grad_norm))
}

/// Builds the result record, deriving the momentum arc from the final path:
/// half-step-corrected one-sided differences at the ends (the exact envelope
/// derivatives of the trapezoid action), centered differences inside.
fn assemble_result(
    model: &TonelliModel,
    eta: Vec<Vec2>,
    ds: f64,
    t: f64,
    value: f64,
    iterations: usize,
    grad_norm: f64,
) -> ActionResult {
    let k = eta.len() - 1;
    let mut dual = vec![[0.0; 2]; k + 1];
    let v0 = geom::scale(geom::sub(eta[1], eta[0]), 1.0 / ds);
    dual[0] = geom::add(v0, geom::scale(model.grad_potential(eta[0]), 0.5 * ds));
    let v_last = geom::scale(geom::sub(eta[k], eta[k - 1]), 1.0 / ds);
    dual[k] = geom::sub(v_last, geom::scale(model.grad_potential(eta[k]), 0.5 * ds));
    for j in 1..k {
        dual[j] = geom::scale(geom::sub(eta[j + 1], eta[j - 1]), 1.0 / (2.0 * ds));
    }
    ActionResult { value, t, curve: eta, dual_arc: dual, winding: [0, 0], iterations, grad_norm }
}

/// Thomas elimination for a symmetric tridiagonal system with constant
/// off-diagonal; `rhs` is consumed. Returns `None` when a pivot is not safely
/// positive (system not positive definite).
fn solve_tridiagonal(diag: &[f64], off: f64, rhs: &mut [f64]) -> Option<Vec<f64>> {
    let n = diag.len();
    let mut c_prime = vec![0.0; n];
    let mut pivot = diag[0];
    if pivot <= 1e-14 {
        return None;
    }
    c_prime[0] = off / pivot;
    rhs[0] /= pivot;
    for i in 1..n {
        pivot = diag[i] - off * c_prime[i - 1];
        if pivot <= 1e-14 {
            return None;
        }
        c_prime[i] = off / pivot;
        rhs[i] = (rhs[i] - off * rhs[i - 1]) / pivot;
    }
    let mut sol = vec![0.0; n];
    sol[n - 1] = rhs[n - 1];
    for i in (0..n - 1).rev() {
        sol[i] = rhs[i] - c_prime[i] * sol[i + 1];
    }
    Some(sol)
}

/// Convexity constants of `y ↦ A_t(x, y)` estimated from midpoint triples.
#[derive(Clone, Copy, Debug)]
pub struct ConvexityReport {
    /// Largest `C` with `½A(y₁) + ½A(y₂) − A(m) ≥ (C/8)|y₁−y₂|²` over the
    /// sampled triples — for the free particle this equals `1/t`.
    pub semiconvex_const: f64,
    /// Smallest `C` bounding the same defect from above.
    pub semiconcave_const: f64,
    /// Largest deviation of the midpoint defect from its free-particle value
    /// `|y₁−y₂|²/(8t)` — exactly zero when the potential vanishes.
    pub max_quadratic_defect: f64,
    /// Triples that produced usable values.
    pub triples_used: usize,
}

/// Samples midpoint triples `y₁, y₂, (y₁+y₂)/2` in the ball of the given
/// radius around `y_center` and brackets the midpoint convexity defect of
/// `A_t(x, ·)`. Deterministic in `seed`. Fails if fewer than 10 triples
/// produce finite values.
pub fn convexity_probe(
    model: &TonelliModel,
    x: Vec2,
    y_center: Vec2,
    t: f64,
    radius: f64,
    samples: usize,
    seed: u64,
    params: &ActionParams,
) -> Result<ConvexityReport> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dim = model.domain().dim();
    let nodes = params.auto_resolution(t);

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut max_defect: f64 = 0.0;
    let mut used = 0;
    for _ in 0..samples {
        let mut draw = |_: usize| {
            let mut p = [0.0; 2];
            for c in p.iter_mut().take(dim) {
                *c = rng.gen_range(-radius..=radius);
            }
            p
        };
        let y1 = geom::add(y_center, draw(0));
        let y2 = geom::add(y_center, draw(1));
        let spread = geom::sub(y2, y1);
        let gap = geom::dot(spread, spread);
        if gap < 1e-8 {
            continue;
        }
        let mid = geom::scale(geom::add(y1, y2), 0.5);
        let reduce = |p: Vec2| model.domain().reduce(p);
        let a1 = fundamental_solution_at(model, x, reduce(y1), t, nodes, params);
        let a2 = fundamental_solution_at(model, x, reduce(y2), t, nodes, params);
        let am = fundamental_solution_at(model, x, reduce(mid), t, nodes, params);
        let (a1, a2, am) = match (a1, a2, am) {
            (Ok(a), Ok(b), Ok(c)) => (a, b, c),
            _ => continue,
        };
        // Guard against triple members resolving into different winding
        // classes, which would break the midpoint comparison.
        if a1.winding != a2.winding || a1.winding != am.winding {
            continue;
        }
        let defect = 0.5 * a1.value + 0.5 * a2.value - am.value;
        let ratio = defect / (gap / 8.0);
        lo = lo.min(ratio);
        hi = hi.max(ratio);
        max_defect = max_defect.max((defect - gap / (8.0 * t)).abs());
        used += 1;
    }
    if used < 10 {
        return Err(Error::Sampling(format!(
            "convexity probe produced only {used} usable triples (need 10)"
        )));
    }
    Ok(ConvexityReport {
        semiconvex_const: lo,
        semiconcave_const: hi,
        max_quadratic_defect: max_defect,
        triples_used: used,
    })
}

/// One all-pairs action table entry.
#[derive(Clone, Copy, Debug)]
pub struct PairAction {
    /// `A_t(site_i, site_j)`.
    pub value: f64,
    /// Initial momentum of the minimizer (so `D_x A = −p_start`).
    pub p_start: Vec2,
    /// Final momentum of the minimizer (so `D_y A = p_end`).
    pub p_end: Vec2,
}

/// Dense all-pairs action table for one duration.
pub struct ActionTable {
    pub t: f64,
    n: usize,
    data: Vec<PairAction>,
}

impl ActionTable {
    /// Entry for the ordered pair (start site `i`, end site `j`).
    pub fn pair(&self, i: usize, j: usize) -> PairAction {
        self.data[i * self.n + j]
    }

    pub fn site_count(&self) -> usize {
        self.n
    }
}

/// Memoized per-duration action tables over a fixed site list (grid nodes or
/// atom positions). Tables fill eagerly and in parallel on first request;
/// the parallel fill writes disjoint rows by index, so values are bitwise
/// reproducible at any thread count. Concurrent first requests for the same
/// duration build identical tables and the first insert wins.
pub struct ActionCache {
    model: TonelliModel,
    sites: Arc<Vec<Vec2>>,
    params: ActionParams,
    tables: RwLock<HashMap<u64, Arc<ActionTable>>>,
}

impl ActionCache {
    pub fn new(model: TonelliModel, sites: Arc<Vec<Vec2>>, params: ActionParams) -> Self {
        ActionCache { model, sites, params, tables: RwLock::new(HashMap::new()) }
    }

    pub fn model(&self) -> &TonelliModel {
        &self.model
    }

    pub fn sites(&self) -> &[Vec2] {
        &self.sites
    }

    pub fn params(&self) -> &ActionParams {
        &self.params
    }

    /// The all-pairs table for duration `t` (keyed by exact bit pattern),
    /// building it on first use.
    pub fn table(&self, t: f64) -> Result<Arc<ActionTable>> {
        let key = t.to_bits();
        if let Some(hit) = self.tables.read().expect("action cache poisoned").get(&key) {
            return Ok(hit.clone());
        }
        let built = Arc::new(self.build_table(t)?);
        let mut guard = self.tables.write().expect("action cache poisoned");
        Ok(guard.entry(key).or_insert(built).clone())
    }

    fn build_table(&self, t: f64) -> Result<ActionTable> {
        let n = self.sites.len();
        let nodes = self.params.auto_resolution(t);
        let mut data = vec![
            PairAction { value: 0.0, p_start: [0.0; 2], p_end: [0.0; 2] };
            n * n
        ];
        let failure: RwLock<Option<Error>> = RwLock::new(None);
        data.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            let x = self.sites[i];
            for (j, slot) in row.iter_mut().enumerate() {
                match fundamental_solution_at(&self.model, x, self.sites[j], t, nodes, &self.params)
                {
                    Ok(r) => {
                        *slot = PairAction {
                            value: r.value,
                            p_start: r.start_momentum(),
                            p_end: r.end_momentum(),
                        };
                    }
                    Err(e) => {
                        let mut guard = failure.write().expect("action cache poisoned");
                        guard.get_or_insert(e);
                    }
                }
            }
        });
        if let Some(e) = failure.into_inner().expect("action cache poisoned") {
            return Err(e);
        }
        Ok(ActionTable { t, n, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Potential;
    use crate::geom::Domain;

    fn free_model() -> TonelliModel {
        TonelliModel::new(Domain::torus(1), Potential::Zero).unwrap()
    }

    fn pendulum() -> TonelliModel {
        TonelliModel::new(Domain::torus(1), Potential::Cosine { amplitude: 0.5 }).unwrap()
    }

    #[test]
    fn free_particle_matches_closed_form() {
        let m = free_model();
        let p = ActionParams::default();
        let r = fundamental_solution(&m, [0.0; 2], [0.25, 0.0], 0.5, &p).unwrap();
        // d²/(2t) = 0.0625/1.0
        assert!((r.value - 0.0625).abs() < 1e-6, "value {}", r.value);
        let d = action_derivatives(&m, &r);
        assert!((d.d_end[0] - 0.5).abs() < 1e-6);
        assert!((d.d_start[0] + 0.5).abs() < 1e-6);
        assert!((d.d_time + 0.125).abs() < 1e-6);
    }

    #[test]
    fn free_particle_distance_respects_wrap() {
        let m = free_model();
        let p = ActionParams::default();
        // 0.1 → 0.9 is distance 0.2 through the seam, not 0.8.
        let r = fundamental_solution(&m, [0.1, 0.0], [0.9, 0.0], 1.0, &p).unwrap();
        assert!((r.value - 0.02).abs() < 1e-9, "value {}", r.value);
        assert_eq!(r.winding, [0, 0]);
        assert!(r.end()[0] < 0.0, "arrival lifts below the seam: {}", r.end()[0]);
    }

    #[test]
    fn antipodal_tie_picks_positive_direction() {
        let m = free_model();
        let p = ActionParams::default();
        let r = fundamental_solution(&m, [0.0; 2], [0.5, 0.0], 1.0, &p).unwrap();
        assert!((r.value - 0.125).abs() < 1e-9);
        // The +0.5 displacement and the −0.5 winding mate tie in value; the
        // smaller winding class (zero, carrying the +0.5 lift) must win.
        assert_eq!(r.winding, [0, 0]);
        assert!((r.end()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn stationarity_reaches_machine_floor() {
        let m = pendulum();
        let p = ActionParams::default();
        let r = fundamental_solution(&m, [0.1, 0.0], [0.6, 0.0], 1.0, &p).unwrap();
        assert!(r.grad_norm <= 1e-10, "gradient stalled at {}", r.grad_norm);
        assert!(r.iterations < 50, "Newton took {} iterations", r.iterations);
    }

    #[test]
    fn curve_endpoints_and_node_count_match_request() {
        let m = pendulum();
        let p = ActionParams::default();
        let r = fundamental_solution_at(&m, [0.2, 0.0], [0.7, 0.0], 0.8, 65, &p).unwrap();
        assert_eq!(r.curve.len(), 65);
        assert_eq!(r.dual_arc.len(), 65);
        assert_eq!(r.start(), [0.2, 0.0]);
        assert!((m.domain().reduce(r.end())[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn momentum_arc_conserves_energy() {
        let m = pendulum();
        let p = ActionParams::default();
        let r = fundamental_solution(&m, [0.05, 0.0], [0.4, 0.0], 1.5, &p).unwrap();
        let energies: Vec<f64> = r
            .curve
            .iter()
            .zip(&r.dual_arc)
            .map(|(x, pp)| m.hamiltonian_unchecked(*x, *pp))
            .collect();
        let (lo, hi) = energies
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), e| (l.min(*e), h.max(*e)));
        // Half-step momenta keep the discrete energy steady to O(Δs²).
        assert!(hi - lo < 5e-4, "energy drift {} along minimizer", hi - lo);
    }

    #[test]
    fn time_derivative_matches_finite_differences() {
        let m = pendulum();
        let p = ActionParams::default();
        let (x, y) = ([0.15, 0.0], [0.65, 0.0]);
        let t = 0.7;
        let r = fundamental_solution_at(&m, x, y, t, 91, &p).unwrap();
        let d = action_derivatives(&m, &r);
        let h = 1e-4;
        let plus = fundamental_solution_at(&m, x, y, t + h, 91, &p).unwrap();
        let minus = fundamental_solution_at(&m, x, y, t - h, 91, &p).unwrap();
        let fd = (plus.value - minus.value) / (2.0 * h);
        assert!((d.d_time - fd).abs() < 1e-3, "analytic {} vs FD {}", d.d_time, fd);
    }

    #[test]
    fn endpoint_derivatives_match_finite_differences() {
        let m = pendulum();
        let p = ActionParams::default();
        let (x, y) = ([0.15, 0.0], [0.55, 0.0]);
        let t = 0.6;
        let r = fundamental_solution_at(&m, x, y, t, 101, &p).unwrap();
        let d = action_derivatives(&m, &r);
        let h = 1e-5;
        let fd_y = (fundamental_solution_at(&m, x, [y[0] + h, 0.0], t, 101, &p).unwrap().value
            - fundamental_solution_at(&m, x, [y[0] - h, 0.0], t, 101, &p).unwrap().value)
            / (2.0 * h);
        let fd_x = (fundamental_solution_at(&m, [x[0] + h, 0.0], y, t, 101, &p).unwrap().value
            - fundamental_solution_at(&m, [x[0] - h, 0.0], y, t, 101, &p).unwrap().value)
            / (2.0 * h);
        assert!((d.d_end[0] - fd_y).abs() < 1e-7, "D_y {} vs FD {}", d.d_end[0], fd_y);
        assert!((d.d_start[0] - fd_x).abs() < 1e-7, "D_x {} vs FD {}", d.d_start[0], fd_x);
    }

    #[test]
    fn two_dimensional_action_separates_per_axis() {
        let m = TonelliModel::new(Domain::torus(2), Potential::Cosine { amplitude: 0.3 }).unwrap();
        let p = ActionParams::default();
        let r = fundamental_solution(&m, [0.1, 0.2], [0.3, 0.45], 0.8, &p).unwrap();
        // The cosine potential separates, so the 2-D action is the sum of the
        // per-axis 1-D actions.
        let m1 = TonelliModel::new(Domain::torus(1), Potential::Cosine { amplitude: 0.3 }).unwrap();
        let a0 = fundamental_solution(&m1, [0.1, 0.0], [0.3, 0.0], 0.8, &p).unwrap();
        let a1 = fundamental_solution(&m1, [0.2, 0.0], [0.45, 0.0], 0.8, &p).unwrap();
        // The separable split shifts the potential baseline: 2-D cosine sums
        // both axes, so subtract nothing — values add directly.
        assert!(
            (r.value - (a0.value + a1.value)).abs() < 1e-8,
            "2-D {} vs split {}",
            r.value,
            a0.value + a1.value
        );
    }

    #[test]
    fn free_convexity_probe_is_exactly_quadratic() {
        let m = free_model();
        let p = ActionParams::default();
        let rep =
            convexity_probe(&m, [0.0; 2], [0.1, 0.0], 0.4, 0.05, 40, 7, &p).unwrap();
        assert!(rep.max_quadratic_defect < 1e-9, "defect {}", rep.max_quadratic_defect);
        assert!((rep.semiconvex_const * 0.4 - 1.0).abs() < 1e-6);
        assert!((rep.semiconcave_const * 0.4 - 1.0).abs() < 1e-6);
        assert!(rep.triples_used >= 10);
    }

    #[test]
    fn pendulum_convexity_probe_stays_positive_for_small_time() {
        let m = pendulum();
        let p = ActionParams::default();
        let rep = convexity_probe(&m, [0.3, 0.0], [0.35, 0.0], 0.2, 0.05, 40, 11, &p).unwrap();
        assert!(rep.semiconvex_const > 0.0, "small-time action must stay semiconvex");
        assert!(rep.semiconcave_const >= rep.semiconvex_const);
    }

    #[test]
    fn cache_serves_identical_tables_for_identical_times() {
        let m = pendulum();
        let sites: Arc<Vec<Vec2>> = Arc::new(
            (0..24).map(|i| [i as f64 / 24.0, 0.0]).collect(),
        );
        let cache = ActionCache::new(m, sites, ActionParams::default());
        let t1 = cache.table(0.3).unwrap();
        let t2 = cache.table(0.3).unwrap();
        assert!(Arc::ptr_eq(&t1, &t2), "repeat request must hit the memo");
        let direct = cache.table(0.6).unwrap();
        assert_eq!(direct.site_count(), 24);
        // Spot check one entry against a direct solve.
        let r = fundamental_solution_at(
            cache.model(),
            cache.sites()[3],
            cache.sites()[17],
            0.6,
            ActionParams::default().auto_resolution(0.6),
            cache.params(),
        )
        .unwrap();
        let e = direct.pair(3, 17);
        assert_eq!(e.value, r.value, "cache entry must equal a direct solve bit for bit");
    }

    #[test]
    fn rejects_bad_durations_and_resolutions() {
        let m = free_model();
        let p = ActionParams::default();
        assert!(fundamental_solution(&m, [0.0; 2], [0.2, 0.0], 0.0, &p).is_err());
        assert!(fundamental_solution(&m, [0.0; 2], [0.2, 0.0], -1.0, &p).is_err());
        assert!(fundamental_solution_at(&m, [0.0; 2], [0.2, 0.0], 1.0, 1, &p).is_err());
    }
}

