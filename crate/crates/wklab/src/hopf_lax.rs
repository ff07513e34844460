//! Scalar Lax–Oleinik semigroups and their singularity apparatus: the
//! backward/forward evolutions `T_t^∓φ`, the critical value and weak KAM
//! fixed points, superdifferential estimates with minimal-energy selection
//! `p♯`, cut times from the defect function `B_u`, and intrinsic singular
//! characteristics.
//!
//! All transforms act on [`ScalarField`]s: node-wise inf/sup over candidate
//! nodes within the search radius `λ_φ·t` (`λ_φ` built from the growth
//! envelope and the field's grid Lipschitz constant), with pair actions
//! served by an [`ActionCache`] whose sites are the grid nodes. Node loops
//! parallelize over output nodes; each node's reduction scans candidates in
//! a fixed order, so results are identical at any thread count.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::{fundamental_solution_at, ActionCache, ActionParams};
use crate::dynamics::{GrowthEnvelope, PhasePoint, TonelliModel};
use crate::error::{Error, Result};
use crate::field::{Grid, ScalarField};
use crate::geom::{self, Vec2};

/// Node positions of a grid, in flat index order, ready for an action cache.
pub fn grid_sites(grid: &Grid) -> Arc<Vec<Vec2>> {
    Arc::new((0..grid.node_count()).map(|i| grid.node_pos(i)).collect())
}

/// An action cache whose sites are the grid's nodes.
pub fn grid_cache(model: TonelliModel, grid: &Grid, params: ActionParams) -> ActionCache {
    ActionCache::new(model, grid_sites(grid), params)
}

/// Minimizer localization constant `λ_φ = c₀ + θ₁(0) + θ₀*(κ₁+1) + c₁`:
/// candidates for the inf/sup at time `t` lie within distance `λ_φ·t` of the
/// evaluation point (the torus contributes no additive slack).
pub fn search_rate(model: &TonelliModel, kappa1: f64) -> f64 {
    let g = model.growth();
    g.lower_offset + GrowthEnvelope::theta(0.0) + GrowthEnvelope::theta_star(kappa1 + 1.0)
        + g.upper_offset
}

/// Shared scaffolding for the node-wise transforms: search radius in cells.
fn radius_cells(grid: &Grid, radius: f64) -> Result<usize> {
    let h = grid.spacing();
    if radius < h {
        return Err(Error::Resolution(format!(
            "search radius {radius:.3e} is below the grid spacing {h:.3e}; \
             raise t or refine the grid"
        )));
    }
    Ok((radius / h).floor() as usize)
}

fn check_cache_grid(cache: &ActionCache, grid: &Grid) {
    assert_eq!(
        cache.sites().len(),
        grid.node_count(),
        "action cache sites do not match the field's grid"
    );
}

/// Backward Lax–Oleinik evolution `(T_t^−φ)(x) = min_y φ(y) + A_t(y, x)`.
pub fn t_minus(cache: &ActionCache, phi: &ScalarField, t: f64) -> Result<ScalarField> {
    transform(cache, phi, t, false)
}

/// Forward Lax–Oleinik evolution `(T_t^+φ)(x) = max_y φ(y) − A_t(x, y)`.
pub fn t_plus(cache: &ActionCache, phi: &ScalarField, t: f64) -> Result<ScalarField> {
    transform(cache, phi, t, true)
}

fn transform(cache: &ActionCache, phi: &ScalarField, t: f64, forward: bool) -> Result<ScalarField> {
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::Argument(format!("evolution needs t > 0, got {t}")));
    }
    let grid = phi.grid().clone();
    check_cache_grid(cache, &grid);
    let radius = search_rate(cache.model(), phi.lipschitz_constant()) * t;
    let r = radius_cells(&grid, radius)? as isize;
    let table = cache.table(t)?;
    let n = grid.nodes_per_axis() as isize;
    let r = r.min(n / 2);
    let dim = grid.domain().dim();
    let values = phi.values();

    let out: Vec<f64> = (0..grid.node_count())
        .into_par_iter()
        .map(|i| {
            let (ix, iy) = grid.axes_of(i);
            let mut best = f64::INFINITY;
            let mut scan = |j: usize| {
                // T^−: curves run candidate → node; T^+: node → candidate.
                let (from, to) = if forward { (i, j) } else { (j, i) };
                let a = table.pair(from, to).value;
                let v = if forward { -(values[j] - a) } else { values[j] + a };
                if v < best {
                    best = v;
                }
            };
            if dim == 1 {
                for dx in -r..=r {
                    scan(grid.index_of(ix as isize + dx, 0));
                }
            } else {
                for dy in -r..=r {
                    for dx in -r..=r {
                        scan(grid.index_of(ix as isize + dx, iy as isize + dy));
                    }
                }
            }
            if forward {
                -best
            } else {
                best
            }
        })
        .collect();
    ScalarField::new(grid, out)
}

/// Pointwise forward evolution at an arbitrary point (direct action solves
/// against grid candidates; used by cut times and characteristics).
fn t_plus_at(
    cache: &ActionCache,
    phi: &ScalarField,
    x: Vec2,
    t: f64,
    kappa1: f64,
) -> Result<f64> {
    let grid = phi.grid();
    check_cache_grid(cache, grid);
    let model = cache.model();
    let radius = search_rate(model, kappa1) * t;
    let r = radius_cells(grid, radius)? as isize;
    let n = grid.nodes_per_axis() as isize;
    let r = r.min(n / 2);
    let center = grid.nearest_node(x);
    let (cx, cy) = grid.axes_of(center);
    let nodes = cache.params().auto_resolution(t);
    let dim = grid.domain().dim();
    let mut best = f64::NEG_INFINITY;
    let mut scan = |j: usize| -> Result<()> {
        let y = grid.node_pos(j);
        let a = fundamental_solution_at(model, x, y, t, nodes, cache.params())?;
        best = best.max(phi.values()[j] - a.value);
        Ok(())
    };
    if dim == 1 {
        for dx in -r..=r {
            scan(grid.index_of(cx as isize + dx, 0))?;
        }
    } else {
        for dy in -r..=r {
            for dx in -r..=r {
                scan(grid.index_of(cx as isize + dx, cy as isize + dy))?;
            }
        }
    }
    Ok(best)
}

/// Internal grid size for the critical-value estimate (kept modest in two
/// dimensions, where the all-pairs table is quadratic in node count).
fn critical_grid_nodes(dim: usize) -> usize {
    if dim == 1 {
        128
    } else {
        32
    }
}

/// Mañé critical value: the long-time linear decrease rate of `T_T^− 0`,
/// Richardson-extrapolated over horizons `T ∈ {8, 16, 32}`.
pub fn critical_value(model: &TonelliModel) -> Result<f64> {
    if !model.domain().is_torus() {
        return Err(Error::Argument(
            "the critical value is defined on the compact torus only".into(),
        ));
    }
    let grid = Grid::new(model.domain().clone(), critical_grid_nodes(model.domain().dim()))?;
    let cache = grid_cache(model.clone(), &grid, ActionParams::default());
    let delta = 0.1;
    let mut phi = ScalarField::constant(grid, 0.0);
    let mut at_horizon = Vec::new();
    let sweeps = (32.0 / delta) as usize;
    for k in 1..=sweeps {
        phi = t_minus(&cache, &phi, delta)?;
        let horizon = k as f64 * delta;
        for target in [8.0, 16.0, 32.0] {
            if (horizon - target).abs() < delta / 2.0 {
                at_horizon.push(-phi.values()[0] / horizon);
            }
        }
    }
    let (a8, a16, a32) = (at_horizon[0], at_horizon[1], at_horizon[2]);
    // One Richardson level kills the O(1/T) constant-offset term; the two
    // levels must agree, otherwise the transient has not died out.
    let coarse = 2.0 * a16 - a8;
    let fine = 2.0 * a32 - a16;
    if (fine - coarse).abs() > 2e-2 {
        return Err(Error::Convergence {
            iterations: sweeps,
            best_value: fine,
            grad_norm: (fine - coarse).abs(),
            context: format!(
                "critical-value extrapolation unstable: rates ({a8:.6}, {a16:.6}, {a32:.6})"
            ),
        });
    }
    Ok(fine)
}

/// A weak KAM fixed point `u = T_δ^− u + c₀·δ`, pinned to `u = 0` at the
/// first grid node.
#[derive(Clone, Debug)]
pub struct WeakKamSolution {
    pub u: ScalarField,
    /// Critical value used in the fixed-point iteration.
    pub c0: f64,
    /// Fixed-point defect `‖T_δ^− u + c₀δ − u‖_∞` at the iteration step δ.
    pub residual: f64,
    /// The same defect measured at steps δ, 2δ, 4δ.
    pub residual_multi: [f64; 3],
    /// Iteration step.
    pub delta: f64,
    /// False when the iteration cap was hit before reaching the tolerance;
    /// the best iterate is still returned.
    pub converged: bool,
}

/// Iterates `φ ← T_δ^− φ + c₀·δ` (pinned) from `φ ≡ 0` until the fixed-point
/// residual drops below `tol`, then re-measures the residual at 2δ and 4δ.
pub fn weak_kam_solve(cache: &ActionCache, grid: &Grid, delta: f64, tol: f64) -> Result<WeakKamSolution> {
    if !(delta > 0.0 && delta <= 0.5) {
        return Err(Error::Argument(format!("weak KAM step must lie in (0, 0.5], got {delta}")));
    }
    let c0 = critical_value(cache.model())?;
    let mut u = ScalarField::constant(grid.clone(), 0.0);
    let mut converged = false;
    let max_sweeps = 5000;
    for _ in 0..max_sweeps {
        let mut next = t_minus(cache, &u, delta)?;
        let pin = next.values()[0] + c0 * delta;
        for v in next.values_mut().iter_mut() {
            *v += c0 * delta - pin;
        }
        // Pinning shifts by a constant only, so the sup distance between
        // consecutive pinned iterates still tracks the fixed-point defect;
        // the true (unpinned) defect is re-measured below once settled.
        let step = next.sup_distance(&u);
        u = next;
        if step <= tol {
            converged = true;
            break;
        }
    }
    let mut residual_multi = [0.0; 3];
    for (slot, factor) in [1.0, 2.0, 4.0].into_iter().enumerate() {
        let evolved = t_minus(cache, &u, delta * factor)?;
        let defect = evolved
            .values()
            .iter()
            .zip(u.values())
            .map(|(e, v)| (e + c0 * delta * factor - v).abs())
            .fold(0.0, f64::max);
        residual_multi[slot] = defect;
    }
    Ok(WeakKamSolution {
        u,
        c0,
        residual: residual_multi[0],
        residual_multi,
        delta,
        converged,
    })
}

/// Estimate of the superdifferential `D⁺φ(x)`: the reachable covectors (an
/// approximation of `D*φ(x)`) and their convex hull.
#[derive(Clone, Debug)]
pub struct SuperdifferentialEstimate {
    /// Covectors realized by grid one-sided limits or backward
    /// characteristics, deduplicated.
    pub reachable: Vec<Vec2>,
    /// Extreme points of the convex hull of `reachable` (two points on a
    /// circle domain, a convex polygon on the torus surface).
    pub hull: Vec<Vec2>,
    /// Largest distance between hull points; zero at a smooth point.
    pub diameter: f64,
}

impl SuperdifferentialEstimate {
    fn from_reachable(mut reachable: Vec<Vec2>, dim: usize) -> Self {
        reachable.sort_by(|a, b| geom::lex_cmp(*a, *b));
        reachable.dedup_by(|a, b| geom::norm(geom::sub(*a, *b)) < 1e-3);
        let hull = if dim == 1 {
            let lo = reachable.first().copied().unwrap_or([0.0; 2]);
            let hi = reachable.last().copied().unwrap_or([0.0; 2]);
            if geom::norm(geom::sub(hi, lo)) < 1e-12 {
                vec![lo]
            } else {
                vec![lo, hi]
            }
        } else {
            convex_hull(&reachable)
        };
        let mut diameter: f64 = 0.0;
        for a in &hull {
            for b in &hull {
                diameter = diameter.max(geom::norm(geom::sub(*a, *b)));
            }
        }
        SuperdifferentialEstimate { reachable, hull, diameter }
    }

    /// Interval endpoints (1-D hulls).
    pub fn interval(&self) -> (f64, f64) {
        let lo = self.hull.first().map_or(0.0, |p| p[0]);
        let hi = self.hull.last().map_or(0.0, |p| p[0]);
        (lo, hi)
    }
}

/// Monotone-chain convex hull (collinear points dropped).
fn convex_hull(points: &[Vec2]) -> Vec<Vec2> {
    if points.len() <= 2 {
        return points.to_vec();
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| geom::lex_cmp(*a, *b));
    pts.dedup_by(|a, b| geom::norm(geom::sub(*a, *b)) < 1e-12);
    if pts.len() <= 2 {
        return pts;
    }
    let cross = |o: Vec2, a: Vec2, b: Vec2| -> f64 {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut hull: Vec<Vec2> = Vec::with_capacity(2 * pts.len());
    for &p in pts.iter().chain(pts.iter().rev().skip(1)) {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Collects `D⁺φ(x)` at the grid node nearest `x`: one-sided grid limits
/// joined with the backward-characteristic (flow-lift) covectors of the
/// `C^{1,1}` regularization `T_{t_probe}^+ φ`.
pub fn superdifferential(
    cache: &ActionCache,
    phi: &ScalarField,
    x: Vec2,
    t_probe: f64,
) -> Result<SuperdifferentialEstimate> {
    let grid = phi.grid();
    let idx = grid.nearest_node(x);
    let field = superdifferential_field(cache, phi, t_probe)?;
    Ok(field.into_iter().nth(idx).expect("node index in range"))
}

/// Superdifferential estimates at every grid node in one pass: one forward
/// regularization, one flow sweep, shared by the cut-data masks.
pub fn superdifferential_field(
    cache: &ActionCache,
    phi: &ScalarField,
    t_probe: f64,
) -> Result<Vec<SuperdifferentialEstimate>> {
    let grid = phi.grid().clone();
    let dim = grid.domain().dim();
    let model = cache.model();
    let psi = t_plus(cache, phi, t_probe)?;
    let steps = ((t_probe / 2e-4).ceil() as usize).max(64);

    // Flow every node of graph(DT⁺φ) forward and bin the arrival momenta by
    // nearest node: those are covectors reached by backward characteristics.
    let arrivals: Vec<(usize, Vec2)> = (0..grid.node_count())
        .into_par_iter()
        .map(|j| {
            let y = grid.node_pos(j);
            let p = psi.node_gradient(j);
            let end = model
                .flow_endpoint(PhasePoint { x: y, p }, t_probe, steps)
                .expect("potentials are smooth; the probe flow cannot blow up");
            (grid.nearest_node(end.x), end.p)
        })
        .collect();
    let mut by_node: Vec<Vec<Vec2>> = vec![Vec::new(); grid.node_count()];
    for (node, p) in arrivals {
        by_node[node].push(p);
    }

    let estimates = (0..grid.node_count())
        .map(|idx| {
            let mut reachable = Vec::new();
            // One-sided grid limits along each axis; a smooth node yields two
            // nearly equal copies that deduplicate to a singleton.
            match dim {
                1 => {
                    let (l, r) = phi.one_sided_slopes(idx, 0);
                    reachable.push([l, 0.0]);
                    reachable.push([r, 0.0]);
                }
                _ => {
                    let (lx, rx) = phi.one_sided_slopes(idx, 0);
                    let (ly, ry) = phi.one_sided_slopes(idx, 1);
                    for sx in [lx, rx] {
                        for sy in [ly, ry] {
                            reachable.push([sx, sy]);
                        }
                    }
                }
            }
            // Nearest-node binning keeps each lift within half a cell of the
            // node it lands on, which is the admission criterion.
            reachable.extend(by_node[idx].iter().copied());
            SuperdifferentialEstimate::from_reachable(reachable, dim)
        })
        .collect::<Vec<_>>();
    Ok(estimates)
}

/// Minimal-energy selection `p♯ = argmin { H(x, p) : p ∈ hull }`. For the
/// mechanical Hamiltonian this is the Euclidean projection of the origin
/// onto the hull (unique by strict convexity).
pub fn p_sharp(_model: &TonelliModel, estimate: &SuperdifferentialEstimate, _x: Vec2) -> Vec2 {
    match estimate.hull.len() {
        0 => [0.0, 0.0],
        1 => estimate.hull[0],
        2 => project_segment([0.0, 0.0], estimate.hull[0], estimate.hull[1]),
        _ => {
            // Convex polygon: origin inside → origin; else nearest edge point.
            if origin_in_hull(&estimate.hull) {
                [0.0, 0.0]
            } else {
                let mut best = estimate.hull[0];
                let mut best_d = f64::INFINITY;
                let k = estimate.hull.len();
                for i in 0..k {
                    let q = project_segment([0.0, 0.0], estimate.hull[i], estimate.hull[(i + 1) % k]);
                    let d = geom::norm(q);
                    if d < best_d {
                        best_d = d;
                        best = q;
                    }
                }
                best
            }
        }
    }
}

fn project_segment(p: Vec2, a: Vec2, b: Vec2) -> Vec2 {
    let ab = geom::sub(b, a);
    let denom = geom::dot(ab, ab);
    if denom < 1e-30 {
        return a;
    }
    let s = (geom::dot(geom::sub(p, a), ab) / denom).clamp(0.0, 1.0);
    geom::add(a, geom::scale(ab, s))
}

fn origin_in_hull(hull: &[Vec2]) -> bool {
    let k = hull.len();
    let mut sign = 0.0;
    for i in 0..k {
        let a = hull[i];
        let b = hull[(i + 1) % k];
        let cross = (b[0] - a[0]) * (-a[1]) - (b[1] - a[1]) * (-a[0]);
        if cross.abs() < 1e-15 {
            continue;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

/// Default geometric probe schedule `{0.01·2^k} ∪ {t_max}` up to `t_max`.
pub fn default_probe_times(t_max: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut t = 0.01;
    while t < t_max {
        out.push(t);
        t *= 2.0;
    }
    out.push(t_max);
    out
}

/// Defect `B_u(t, x) = u(x) − T_t^+u(x) + c₀·t` at one point and probe time.
pub fn defect_at(cache: &ActionCache, u: &WeakKamSolution, x: Vec2, t: f64) -> Result<f64> {
    let kappa1 = u.u.lipschitz_constant();
    let sup = t_plus_at(cache, &u.u, x, t, kappa1)?;
    Ok(u.u.eval(x) - sup + u.c0 * t)
}

/// Cut time at a point: the largest probe with `B_u ≤ tol_b` (zero when the
/// first probe already exceeds it, `+∞` when the last probe is still flat —
/// finite probing cannot distinguish Aubry points from large cut times).
pub fn cut_time(
    cache: &ActionCache,
    u: &WeakKamSolution,
    x: Vec2,
    t_grid: &[f64],
    tol_b: f64,
) -> Result<f64> {
    if t_grid.is_empty() || t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Argument("probe times must be finite, increasing, nonempty".into()));
    }
    let kappa1 = u.u.lipschitz_constant();
    let u_at = u.u.eval(x);
    let mut tau = 0.0;
    for (k, &t) in t_grid.iter().enumerate() {
        let b = u_at - t_plus_at(cache, &u.u, x, t, kappa1)? + u.c0 * t;
        if b <= tol_b {
            tau = t;
            if k == t_grid.len() - 1 {
                return Ok(f64::INFINITY);
            }
        }
    }
    Ok(tau)
}

/// Sampled defect data over the whole grid: `B` per probe time, the cut-time
/// field, the Aubry flag, and the singular mask.
#[derive(Clone, Debug)]
pub struct CutData {
    pub t_grid: Vec<f64>,
    /// One defect field per probe time, same grid as `tau`.
    pub b: Vec<ScalarField>,
    /// Largest flat probe per node (capped at the final probe time where the
    /// Aubry flag is set).
    pub tau: ScalarField,
    /// Nodes whose defect stayed flat through the final probe.
    pub aubry_mask: Vec<bool>,
    /// Nodes whose superdifferential diameter exceeds the threshold.
    pub sing_mask: Vec<bool>,
    /// Diameter threshold used for `sing_mask`.
    pub threshold: f64,
    /// Flatness tolerance used for `tau`.
    pub tol_b: f64,
}

/// Summary statistics exported next to the CSV fields.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CutSummary {
    pub c0: f64,
    pub residual: f64,
    pub sing_nodes: usize,
    pub aubry_nodes: usize,
    pub tau_min: f64,
    pub tau_max: f64,
    pub tau_mean_finite: f64,
}

/// Singularity threshold: ten times the one-sided-slope jump a smooth
/// reference field (`cos 2πx` per axis) exhibits on this grid. Kinks clear
/// it by an order of magnitude; discretization jitter stays below it.
pub fn singular_threshold(grid: &Grid) -> f64 {
    let smooth = ScalarField::from_fn(grid.clone(), |p| {
        let mut v = (2.0 * std::f64::consts::PI * p[0]).cos();
        if grid.domain().dim() == 2 {
            v += (2.0 * std::f64::consts::PI * p[1]).cos();
        }
        v
    })
    .expect("cosine reference is finite");
    let mut floor: f64 = 0.0;
    for idx in 0..grid.node_count() {
        for axis in 0..grid.domain().dim() {
            let (l, r) = smooth.one_sided_slopes(idx, axis);
            floor = floor.max((r - l).abs());
        }
    }
    10.0 * floor
}

/// Computes defect fields, cut times, and masks over the whole grid.
pub fn cut_data(
    cache: &ActionCache,
    u: &WeakKamSolution,
    t_grid: &[f64],
    tol_b: f64,
) -> Result<CutData> {
    if t_grid.is_empty() || t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Argument("probe times must be finite, increasing, nonempty".into()));
    }
    let grid = u.u.grid().clone();
    let mut b_fields = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let psi = t_plus(cache, &u.u, t)?;
        let values: Vec<f64> = u
            .u
            .values()
            .iter()
            .zip(psi.values())
            .map(|(uv, pv)| uv - pv + u.c0 * t)
            .collect();
        b_fields.push(ScalarField::new(grid.clone(), values)?);
    }

    let n = grid.node_count();
    let mut tau_values = vec![0.0; n];
    let mut aubry = vec![false; n];
    for i in 0..n {
        let mut tau = 0.0;
        let mut flat_at_end = false;
        for (k, bf) in b_fields.iter().enumerate() {
            if bf.values()[i] <= tol_b {
                tau = t_grid[k];
                flat_at_end = k == t_grid.len() - 1;
            }
        }
        tau_values[i] = tau;
        aubry[i] = flat_at_end;
    }

    let threshold = singular_threshold(&grid);
    let probe = t_grid[0];
    let estimates = superdifferential_field(cache, &u.u, probe)?;
    let sing: Vec<bool> = estimates.iter().map(|e| e.diameter > threshold).collect();

    Ok(CutData {
        t_grid: t_grid.to_vec(),
        b: b_fields,
        tau: ScalarField::new(grid, tau_values)?,
        aubry_mask: aubry,
        sing_mask: sing,
        threshold,
        tol_b,
    })
}

impl CutData {
    pub fn summary(&self, u: &WeakKamSolution) -> CutSummary {
        let finite: Vec<f64> = self
            .tau
            .values()
            .iter()
            .zip(&self.aubry_mask)
            .filter(|(_, a)| !**a)
            .map(|(t, _)| *t)
            .collect();
        let tau_min = self.tau.values().iter().copied().fold(f64::INFINITY, f64::min);
        let tau_max = self.tau.values().iter().copied().fold(0.0, f64::max);
        let tau_mean_finite = if finite.is_empty() {
            0.0
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        CutSummary {
            c0: u.c0,
            residual: u.residual,
            sing_nodes: self.sing_mask.iter().filter(|m| **m).count(),
            aubry_nodes: self.aubry_mask.iter().filter(|m| **m).count(),
            tau_min,
            tau_max,
            tau_mean_finite,
        }
    }
}

/// An intrinsic singular characteristic step: the argmax point together with
/// its cross-check against the Hamiltonian push of `(x, DT_t^+φ(x))`.
#[derive(Clone, Copy, Debug)]
pub struct IntrinsicCharacteristic {
    /// `argmax_y { φ(y) − A_t(x, y) }`, parabola-refined, reduced.
    pub y: Vec2,
    /// `π ∘ Φ_H^t(x, DT_t^+φ(x))` — the flow route to the same point.
    pub flow_point: Vec2,
    /// Distance between the two routes (grid-scale when both are sound).
    pub consistency_gap: f64,
}

/// Locates the intrinsic characteristic `y_x(t)` by grid argmax with local
/// parabolic refinement, and cross-checks it against the flow formula.
/// A near-tie between two separated cells means the uniqueness horizon was
/// passed: the caller must shrink `t`.
pub fn intrinsic_characteristic(
    cache: &ActionCache,
    phi: &ScalarField,
    x: Vec2,
    t: f64,
) -> Result<IntrinsicCharacteristic> {
    const TIE_TOL: f64 = 1e-6;
    let grid = phi.grid();
    let model = cache.model();
    let domain = model.domain().clone();
    let kappa1 = phi.lipschitz_constant();
    let radius = search_rate(model, kappa1) * t;
    let r = (radius_cells(grid, radius)? as isize).min(grid.nodes_per_axis() as isize / 2);
    let center = grid.nearest_node(x);
    let (cx, cy) = grid.axes_of(center);
    let nodes = cache.params().auto_resolution(t);
    let dim = domain.dim();

    // Score all candidates, keeping the values for refinement and tie audit.
    let mut scored: Vec<(usize, f64)> = Vec::new();
    let value_at = |j: usize| -> Result<f64> {
        let yj = grid.node_pos(j);
        let a = fundamental_solution_at(model, x, yj, t, nodes, cache.params())?;
        Ok(phi.values()[j] - a.value)
    };
    if dim == 1 {
        for dx in -r..=r {
            let j = grid.index_of(cx as isize + dx, 0);
            scored.push((j, value_at(j)?));
        }
    } else {
        for dy in -r..=r {
            for dx in -r..=r {
                let j = grid.index_of(cx as isize + dx, cy as isize + dy);
                scored.push((j, value_at(j)?));
            }
        }
    }
    let (best_j, best_v) =
        scored.iter().fold((usize::MAX, f64::NEG_INFINITY), |(bj, bv), (j, v)| {
            if *v > bv {
                (*j, *v)
            } else {
                (bj, bv)
            }
        });
    let best_pos = grid.node_pos(best_j);
    let h = grid.spacing();
    for (j, v) in &scored {
        if *j == best_j {
            continue;
        }
        let gap = best_v - v;
        let separation = domain.dist(best_pos, grid.node_pos(*j));
        if gap < TIE_TOL && separation > 2.0 * h {
            return Err(Error::Ambiguous {
                context: "intrinsic characteristic".into(),
                site_a: best_pos,
                site_b: grid.node_pos(*j),
                value_gap: gap,
                separation,
            });
        }
    }

    // Parabolic refinement per axis from the immediate neighbors.
    let lookup = |j: usize| scored.iter().find(|(jj, _)| *jj == j).map(|(_, v)| *v);
    let (bx, by) = grid.axes_of(best_j);
    let mut y = best_pos;
    let refine_axis = |axis: usize, yi: &mut f64| {
        let (jm, jp) = match axis {
            0 => (
                grid.index_of(bx as isize - 1, by as isize),
                grid.index_of(bx as isize + 1, by as isize),
            ),
            _ => (
                grid.index_of(bx as isize, by as isize - 1),
                grid.index_of(bx as isize, by as isize + 1),
            ),
        };
        if let (Some(vm), Some(vp)) = (lookup(jm), lookup(jp)) {
            let denom = vm - 2.0 * best_v + vp;
            if denom < -1e-14 {
                let shift = 0.5 * (vm - vp) / denom;
                if shift.abs() <= 1.0 {
                    *yi += shift * h;
                }
            }
        }
    };
    refine_axis(0, &mut y[0]);
    if dim == 2 {
        refine_axis(1, &mut y[1]);
    }
    let y = domain.reduce(y);

    // Flow route: forward-push x with the gradient of the regularization.
    let grad = forward_momentum(cache, phi, x, t)?;
    let end = model.flow_endpoint(PhasePoint { x, p: grad }, t, flow_steps(t))?;
    let flow_point = domain.reduce(end.x);
    let consistency_gap = domain.dist(y, flow_point);
    Ok(IntrinsicCharacteristic { y, flow_point, consistency_gap })
}

/// Integration step count for pushing a covector with the Hamiltonian flow:
/// fine enough that the symplectic integrator's energy drift stays far below
/// grid resolution at every horizon the semigroup operators accept.
pub(crate) fn flow_steps(t: f64) -> usize {
    ((t / 2e-4).ceil() as usize).max(64)
}

/// The forward momentum `DT_t^+φ(x)`: gradient of the sup-regularization by
/// centered differences at the grid scale. `T_t^+φ` is C¹ wherever the
/// uniqueness horizon holds, so the centered quotient is the right default;
/// if the probes straddle a surviving convex crease (second difference above
/// the kink threshold along some axis) the centered value would average two
/// unrelated branches, so that axis falls back to the one-sided slope of
/// smaller Hamiltonian — the minimal-energy selection, matching `p_sharp`.
pub fn forward_momentum(cache: &ActionCache, phi: &ScalarField, x: Vec2, t: f64) -> Result<Vec2> {
    let grid = phi.grid();
    let model = cache.model();
    let domain = model.domain().clone();
    let kappa1 = phi.lipschitz_constant();
    let h = grid.spacing();
    let dim = domain.dim();
    let psi_at = |q: Vec2| t_plus_at(cache, phi, domain.reduce(q), t, kappa1);
    let threshold = singular_threshold(grid);
    let mut grad = [0.0; 2];
    let mut center: Option<f64> = None;
    for axis in 0..dim {
        let mut qp = x;
        let mut qm = x;
        qp[axis] += h;
        qm[axis] -= h;
        let (vp, vm) = (psi_at(qp)?, psi_at(qm)?);
        grad[axis] = (vp - vm) / (2.0 * h);
        let v0 = match center {
            Some(v) => v,
            None => {
                let v = psi_at(x)?;
                center = Some(v);
                v
            }
        };
        let (left, right) = ((v0 - vm) / h, (vp - v0) / h);
        if right - left > threshold {
            let keep_left = model.hamiltonian(x, {
                let mut p = grad;
                p[axis] = left;
                p
            })? <= model.hamiltonian(x, {
                let mut p = grad;
                p[axis] = right;
                p
            })?;
            grad[axis] = if keep_left { left } else { right };
        }
    }
    Ok(grad)
}
