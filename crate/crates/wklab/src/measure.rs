//! Finitely supported probability measures and exact optimal transport:
//! Wasserstein distances and plans from a transportation simplex with dual
//! certificates, pushforward, plan gluing, geodesic interpolation, and the
//! potential-energy functional with its local superdifferential check.
//!
//! The solver is exact in the LP sense: it terminates at a basis whose
//! reduced costs are nonnegative up to f64 roundoff and returns the dual
//! potentials as a certificate. Degeneracy is broken by an infinitesimal
//! supply perturbation; the returned flows are re-solved on the final basis
//! tree against the unperturbed marginals, so marginal sums are exact.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Grid, ScalarField};
use crate::geom::{self, Domain, Vec2};

/// Largest support size accepted by the transport solver.
pub const MAX_SUPPORT: usize = 256;

/// Default merge radius for canonicalization.
pub const DEFAULT_MERGE_EPS: f64 = 1e-9;

/// One weighted atom.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub x: Vec2,
    pub w: f64,
}

/// A probability measure with finite support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    domain: Domain,
    atoms: Vec<Atom>,
}

impl DiscreteMeasure {
    pub fn new(domain: Domain, atoms: Vec<(Vec2, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::Validation("a measure needs at least one atom".into()));
        }
        let mut total = 0.0;
        let mut checked = Vec::with_capacity(atoms.len());
        for (x, w) in atoms {
            if !geom::is_finite(x) || !w.is_finite() {
                return Err(Error::Validation(format!("non-finite atom ({x:?}, {w})")));
            }
            if w < 0.0 {
                return Err(Error::Validation(format!("negative weight {w}")));
            }
            domain.check_contains(x)?;
            total += w;
            checked.push(Atom { x, w });
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!(
                "weights sum to {total}, off unity by {:.3e}",
                (total - 1.0).abs()
            )));
        }
        Ok(DiscreteMeasure { domain, atoms: checked })
    }

    /// A single unit atom.
    pub fn dirac(domain: Domain, x: Vec2) -> Result<Self> {
        DiscreteMeasure::new(domain, vec![(x, 1.0)])
    }

    /// Equal weights on the given positions.
    pub fn uniform(domain: Domain, positions: &[Vec2]) -> Result<Self> {
        let w = 1.0 / positions.len() as f64;
        DiscreteMeasure::new(domain, positions.iter().map(|x| (*x, w)).collect())
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Sorted-support form: zero-weight atoms dropped, atoms within
    /// `merge_eps` of their sorted predecessor merged at the mass-weighted
    /// mean. Greedy in lexicographic order.
    pub fn canonical(mut self, merge_eps: f64) -> Self {
        self.atoms.retain(|a| a.w > 0.0);
        self.atoms.sort_by(|a, b| geom::lex_cmp(a.x, b.x));
        let mut merged: Vec<Atom> = Vec::with_capacity(self.atoms.len());
        for atom in self.atoms.drain(..) {
            if let Some(last) = merged.last_mut() {
                if self.domain.dist(last.x, atom.x) < merge_eps {
                    // Mass-weighted mean written as base + fraction·step so
                    // exact duplicates keep their position bitwise.
                    let w = last.w + atom.w;
                    let step =
                        geom::scale(self.domain.displacement(last.x, atom.x), atom.w / w);
                    last.x = self.domain.reduce(geom::add(last.x, step));
                    last.w = w;
                    continue;
                }
            }
            merged.push(atom);
        }
        self.atoms = merged;
        self
    }

    /// Mass sitting on nodes the mask flags (nearest-node attribution).
    pub fn mass_on_mask(&self, grid: &Grid, mask: &[bool]) -> f64 {
        self.atoms
            .iter()
            .filter(|a| mask[grid.nearest_node(a.x)])
            .map(|a| a.w)
            .sum()
    }

    /// Whether the measure charges the flagged node set.
    pub fn is_singular(&self, grid: &Grid, mask: &[bool]) -> bool {
        self.mass_on_mask(grid, mask) > 0.0
    }

    /// CSV with header `x0,x1,w`, one atom per row.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("x0,x1,w\n");
        for a in &self.atoms {
            out.push_str(&format!("{},{},{}\n", a.x[0], a.x[1], a.w));
        }
        out
    }

    pub fn from_csv_str(domain: Domain, csv: &str) -> Result<Self> {
        let mut atoms = Vec::new();
        for (ln, line) in csv.lines().enumerate() {
            if ln == 0 || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Validation(format!("csv row {ln} has {} fields", parts.len())));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Validation(format!("csv row {ln}: bad number {s:?}")))
            };
            atoms.push(([parse(parts[0])?, parse(parts[1])?], parse(parts[2])?));
        }
        DiscreteMeasure::new(domain, atoms)
    }
}

/// One entry of a transport plan: mass moved from source atom `i` to target
/// atom `j`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub i: usize,
    pub j: usize,
    pub mass: f64,
}

/// A coupling of two discrete measures.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransportPlan {
    source: DiscreteMeasure,
    target: DiscreteMeasure,
    entries: Vec<PlanEntry>,
}

impl TransportPlan {
    /// Validates marginals: row sums match source weights and column sums
    /// match target weights within 1e−10, all masses nonnegative.
    pub fn new(
        source: DiscreteMeasure,
        target: DiscreteMeasure,
        entries: Vec<PlanEntry>,
    ) -> Result<Self> {
        let mut row = vec![0.0; source.len()];
        let mut col = vec![0.0; target.len()];
        for e in &entries {
            if e.i >= source.len() || e.j >= target.len() {
                return Err(Error::Validation(format!("plan entry ({}, {}) out of range", e.i, e.j)));
            }
            if !(e.mass >= 0.0) {
                return Err(Error::Validation(format!("plan mass {} at ({}, {})", e.mass, e.i, e.j)));
            }
            row[e.i] += e.mass;
            col[e.j] += e.mass;
        }
        for (i, r) in row.iter().enumerate() {
            if (r - source.atoms()[i].w).abs() > 1e-10 {
                return Err(Error::Validation(format!(
                    "row {i} carries {r}, source weight {}",
                    source.atoms()[i].w
                )));
            }
        }
        for (j, c) in col.iter().enumerate() {
            if (c - target.atoms()[j].w).abs() > 1e-10 {
                return Err(Error::Validation(format!(
                    "column {j} carries {c}, target weight {}",
                    target.atoms()[j].w
                )));
            }
        }
        Ok(TransportPlan { source, target, entries })
    }

    /// The identity coupling of a measure with itself.
    pub fn identity(mu: &DiscreteMeasure) -> Self {
        let entries = mu
            .atoms()
            .iter()
            .enumerate()
            .map(|(i, a)| PlanEntry { i, j: i, mass: a.w })
            .collect();
        TransportPlan { source: mu.clone(), target: mu.clone(), entries }
    }

    pub fn source(&self) -> &DiscreteMeasure {
        &self.source
    }

    pub fn target(&self) -> &DiscreteMeasure {
        &self.target
    }

    pub fn entries(&self) -> &[PlanEntry] {
        &self.entries
    }

    /// Total cost against an arbitrary per-pair cost function.
    pub fn cost_with(&self, cost: impl Fn(usize, usize) -> f64) -> f64 {
        self.entries.iter().map(|e| e.mass * cost(e.i, e.j)).sum()
    }
}

/// Dual optimality certificate from the simplex: potentials `(u, v)` with
/// `c_ij − u_i − v_j ≥ min_reduced_cost` everywhere, and every carried entry
/// has zero reduced cost up to roundoff (complementary slackness).
#[derive(Clone, Debug)]
pub struct DualCertificate {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Most negative reduced cost at termination (≥ −1e−9·scale).
    pub min_reduced_cost: f64,
    /// Σ mass·|reduced cost| over carried entries.
    pub slackness_residual: f64,
}

/// Exact optimum of the transportation LP for an arbitrary dense cost
/// matrix (row-major, `source.len() × target.len()`).
pub fn optimal_plan_with_costs(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    costs: &[f64],
) -> Result<(TransportPlan, DualCertificate)> {
    let n = mu.len();
    let m = nu.len();
    if n > MAX_SUPPORT || m > MAX_SUPPORT {
        return Err(Error::Argument(format!(
            "supports {n}×{m} exceed the {MAX_SUPPORT}-atom transport limit"
        )));
    }
    if costs.len() != n * m {
        return Err(Error::Argument(format!(
            "cost matrix has {} entries for a {n}×{m} instance",
            costs.len()
        )));
    }
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::Validation("non-finite transport cost".into()));
    }
    let supplies: Vec<f64> = mu.atoms().iter().map(|a| a.w).collect();
    let demands: Vec<f64> = nu.atoms().iter().map(|a| a.w).collect();
    let sum_s: f64 = supplies.iter().sum();
    let sum_d: f64 = demands.iter().sum();
    if (sum_s - sum_d).abs() > 1e-12 {
        return Err(Error::Validation(format!(
            "marginal masses differ: {sum_s} vs {sum_d}"
        )));
    }
    let (flows, cert) = transportation_simplex(&supplies, &demands, costs, m)?;
    let entries = flows
        .into_iter()
        .filter(|(_, _, mass)| *mass > 0.0)
        .map(|(i, j, mass)| PlanEntry { i, j, mass })
        .collect();
    let plan = TransportPlan::new(mu.clone(), nu.clone(), entries)?;
    Ok((plan, cert))
}

/// W_p distance and an optimal plan, cost `d(x,y)^p` in the domain metric.
pub fn optimal_plan(p: u32, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<(TransportPlan, DualCertificate)> {
    if p != 1 && p != 2 {
        return Err(Error::Argument(format!("W_p supports p ∈ {{1, 2}}, got {p}")));
    }
    if mu.domain() != nu.domain() {
        return Err(Error::Validation("measures live on different domains".into()));
    }
    let costs = metric_costs(p, mu, nu);
    optimal_plan_with_costs(mu, nu, &costs)
}

/// The Wasserstein distance `W_p` (p ∈ {1, 2}).
pub fn wasserstein(p: u32, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
    let costs = match p {
        1 | 2 => metric_costs(p, mu, nu),
        _ => return Err(Error::Argument(format!("W_p supports p ∈ {{1, 2}}, got {p}"))),
    };
    if mu.domain() != nu.domain() {
        return Err(Error::Validation("measures live on different domains".into()));
    }
    let (plan, _) = optimal_plan_with_costs(mu, nu, &costs)?;
    let total = plan.cost_with(|i, j| costs[i * nu.len() + j]);
    Ok(if p == 1 { total } else { total.max(0.0).sqrt() })
}

fn metric_costs(p: u32, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Vec<f64> {
    let m = nu.len();
    let mut costs = vec![0.0; mu.len() * m];
    for (i, a) in mu.atoms().iter().enumerate() {
        for (j, b) in nu.atoms().iter().enumerate() {
            let d = mu.domain().dist(a.x, b.x);
            costs[i * m + j] = if p == 1 { d } else { d * d };
        }
    }
    costs
}

/// Minimum of a secondary linear cost over the optimal face of a primary
/// transportation LP: stage one solves the primary, stage two re-optimizes
/// the secondary over plans supported on primary-tight arcs.
pub fn optimal_face_min(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    primary: &[f64],
    secondary: &[f64],
) -> Result<(f64, TransportPlan)> {
    let (_, cert) = optimal_plan_with_costs(mu, nu, primary)?;
    let m = nu.len();
    let scale = primary.iter().fold(1.0f64, |s, c| s.max(c.abs()));
    let sec_scale = secondary.iter().fold(1.0f64, |s, c| s.max(c.abs()));
    let forbidden = 1e6 * sec_scale;
    let mut stage2 = vec![0.0; primary.len()];
    for i in 0..mu.len() {
        for j in 0..m {
            let reduced = primary[i * m + j] - cert.u[i] - cert.v[j];
            stage2[i * m + j] = if reduced <= 1e-9 * scale {
                secondary[i * m + j]
            } else {
                // Off-face arc: penalized out; the stage-one optimum itself
                // is feasible on the face, so no mass lands here.
                forbidden
            };
        }
    }
    let (plan, _) = optimal_plan_with_costs(mu, nu, &stage2)?;
    for e in plan.entries() {
        if stage2[e.i * m + e.j] == forbidden && e.mass > 1e-12 {
            return Err(Error::Validation(
                "optimal-face restriction leaked mass onto a non-tight arc".into(),
            ));
        }
    }
    let value = plan.cost_with(|i, j| secondary[i * m + j]);
    Ok((value, plan))
}

/// Dense transportation simplex. Returns basic flows (including degenerate
/// zeros) and the dual certificate.
fn transportation_simplex(
    supplies: &[f64],
    demands: &[f64],
    costs: &[f64],
    m: usize,
) -> Result<(Vec<(usize, usize, f64)>, DualCertificate)> {
    let n = supplies.len();
    let nodes = n + m;
    let scale = costs.iter().fold(1.0f64, |s, c| s.max(c.abs()));

    // Infinitesimal supply perturbation breaks degenerate ties; the flow is
    // re-solved on the final tree with exact marginals afterwards.
    let eps = 1e-16;
    let a: Vec<f64> = supplies.iter().enumerate().map(|(i, s)| s + eps * (i + 1) as f64).collect();
    let mut b = demands.to_vec();
    let extra: f64 = (1..=n).map(|k| eps * k as f64).sum();
    b[m - 1] += extra;

    // Northwest-corner initial basis: exactly n+m−1 arcs.
    let mut basis: Vec<(usize, usize)> = Vec::with_capacity(nodes - 1);
    let mut flow: Vec<f64> = Vec::with_capacity(nodes - 1);
    {
        let (mut i, mut j) = (0, 0);
        let mut rem_a = a[0];
        let mut rem_b = b[0];
        loop {
            let q = rem_a.min(rem_b);
            basis.push((i, j));
            flow.push(q);
            rem_a -= q;
            rem_b -= q;
            if i == n - 1 && j == m - 1 {
                break;
            }
            // Advance along the smaller residual; on exact ties prefer the
            // row so the arc count stays at n+m−1.
            if rem_a <= rem_b && i < n - 1 {
                i += 1;
                rem_a = a[i];
            } else {
                j += 1;
                rem_b = b[j];
            }
        }
    }

    let mut u = vec![0.0; n];
    let mut v = vec![0.0; m];
    let max_pivots = 40 * nodes + 4000;
    let mut pivots = 0;
    loop {
        // Potentials from the basis tree.
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nodes];
        for (arc, &(i, j)) in basis.iter().enumerate() {
            adj[i].push((n + j, arc));
            adj[n + j].push((i, arc));
        }
        let mut seen = vec![false; nodes];
        let mut stack = vec![0usize];
        seen[0] = true;
        u[0] = 0.0;
        while let Some(node) = stack.pop() {
            for &(other, arc) in &adj[node] {
                if seen[other] {
                    continue;
                }
                seen[other] = true;
                let (i, j) = basis[arc];
                if other >= n {
                    v[j] = costs[i * m + j] - u[i];
                } else {
                    u[i] = costs[i * m + j] - v[j];
                }
                stack.push(other);
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Validation("transport basis lost connectivity".into()));
        }

        // Most negative reduced cost enters; lexicographic tie-break.
        let mut best = -1e-12 * scale;
        let mut enter: Option<(usize, usize)> = None;
        for i in 0..n {
            for j in 0..m {
                let r = costs[i * m + j] - u[i] - v[j];
                if r < best {
                    best = r;
                    enter = Some((i, j));
                }
            }
        }
        let Some((ei, ej)) = enter else {
            break;
        };
        pivots += 1;
        if pivots > max_pivots {
            return Err(Error::Convergence {
                iterations: pivots,
                best_value: basis.iter().zip(&flow).map(|(&(i, j), f)| f * costs[i * m + j]).sum(),
                grad_norm: -best,
                context: "transportation simplex exceeded its pivot budget".into(),
            });
        }

        // Tree path from row ei to column ej; parent pointers via DFS.
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; nodes]; // (node, arc)
        let mut seen = vec![false; nodes];
        let mut stack = vec![ei];
        seen[ei] = true;
        while let Some(node) = stack.pop() {
            if node == n + ej {
                break;
            }
            for &(other, arc) in &adj[node] {
                if !seen[other] {
                    seen[other] = true;
                    parent[other] = Some((node, arc));
                    stack.push(other);
                }
            }
        }
        let mut path_arcs = Vec::new();
        let mut node = n + ej;
        while node != ei {
            let (prev, arc) = parent[node].expect("path exists in a spanning tree");
            path_arcs.push(arc);
            node = prev;
        }
        path_arcs.reverse(); // now ordered from ei towards ej

        // Signs alternate −, +, −, … along the path from the entering row.
        let mut theta = f64::INFINITY;
        let mut leaving: Option<usize> = None;
        for (k, &arc) in path_arcs.iter().enumerate() {
            if k % 2 == 0 && flow[arc] < theta {
                theta = flow[arc];
                leaving = Some(arc);
            }
        }
        let leave = leaving.expect("cycle has at least one decreasing arc");
        for (k, &arc) in path_arcs.iter().enumerate() {
            if k % 2 == 0 {
                flow[arc] -= theta;
            } else {
                flow[arc] += theta;
            }
        }
        basis[leave] = (ei, ej);
        flow[leave] = theta;
    }

    // Re-solve the tree flows against the unperturbed marginals by leaf
    // stripping: marginal sums come out exact.
    let mut residual: Vec<f64> = supplies.iter().chain(demands.iter()).copied().collect();
    let mut degree = vec![0usize; nodes];
    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    for (arc, &(i, j)) in basis.iter().enumerate() {
        degree[i] += 1;
        degree[n + j] += 1;
        incident[i].push(arc);
        incident[n + j].push(arc);
    }
    let mut removed = vec![false; basis.len()];
    let mut exact = vec![0.0; basis.len()];
    let mut queue: Vec<usize> = (0..nodes).filter(|&k| degree[k] == 1).collect();
    while let Some(node) = queue.pop() {
        let Some(&arc) = incident[node].iter().find(|&&arc| !removed[arc]) else {
            continue;
        };
        removed[arc] = true;
        let (i, j) = basis[arc];
        let q = residual[node];
        exact[arc] = q;
        residual[i] -= q;
        residual[n + j] -= q;
        for &end in &[i, n + j] {
            degree[end] -= 1;
            if degree[end] == 1 {
                queue.push(end);
            }
        }
    }
    // Flows are the perturbed ones up to O(eps); genuine negativity would
    // mean a broken basis.
    for q in &mut exact {
        if *q < 0.0 {
            if *q < -1e-9 {
                return Err(Error::Validation(format!(
                    "transport repair produced negative mass {q}"
                )));
            }
            *q = 0.0;
        }
    }

    let mut slackness = 0.0;
    for (arc, &(i, j)) in basis.iter().enumerate() {
        slackness += exact[arc] * (costs[i * m + j] - u[i] - v[j]).abs();
    }
    let mut min_reduced = 0.0f64;
    for i in 0..n {
        for j in 0..m {
            min_reduced = min_reduced.min(costs[i * m + j] - u[i] - v[j]);
        }
    }
    let flows = basis
        .iter()
        .zip(&exact)
        .map(|(&(i, j), &q)| (i, j, q))
        .collect();
    Ok((
        flows,
        DualCertificate { u, v, min_reduced_cost: min_reduced, slackness_residual: slackness },
    ))
}

/// Image measure under a point map; torus images are reduced, box images
/// must stay inside. The output is canonicalized, so atoms pushed to one
/// point merge.
pub fn pushforward(
    mu: &DiscreteMeasure,
    map: impl Fn(Vec2) -> Vec2,
) -> Result<DiscreteMeasure> {
    let domain = mu.domain().clone();
    let mut atoms = Vec::with_capacity(mu.len());
    for a in mu.atoms() {
        let y = map(a.x);
        if !geom::is_finite(y) {
            return Err(Error::Domain(format!("map sent {:?} to non-finite {:?}", a.x, y)));
        }
        let y = if domain.is_torus() { domain.reduce(y) } else { y };
        domain.check_contains(y)?;
        atoms.push((y, a.w));
    }
    Ok(DiscreteMeasure::new(domain, atoms)?.canonical(DEFAULT_MERGE_EPS))
}

/// A measure on triples of atom indices, produced by gluing two plans along
/// their shared source.
#[derive(Clone, Debug)]
pub struct ThreeMarginal {
    first: DiscreteMeasure,
    second: DiscreteMeasure,
    third: DiscreteMeasure,
    entries: Vec<(usize, usize, usize, f64)>,
}

/// Glues `γ ∈ Γ(μ,ν)` and `γ' ∈ Γ(μ,ρ)` by conditional independence over
/// the shared first marginal.
pub fn glue(gamma: &TransportPlan, gamma_p: &TransportPlan) -> Result<ThreeMarginal> {
    let mu = gamma.source();
    if mu.len() != gamma_p.source().len()
        || mu
            .atoms()
            .iter()
            .zip(gamma_p.source().atoms())
            .any(|(a, b)| mu.domain().dist(a.x, b.x) > 1e-12 || (a.w - b.w).abs() > 1e-12)
    {
        return Err(Error::Validation("plans do not share their source atom-for-atom".into()));
    }
    let mut rows: Vec<Vec<&PlanEntry>> = vec![Vec::new(); mu.len()];
    let mut rows_p: Vec<Vec<&PlanEntry>> = vec![Vec::new(); mu.len()];
    for e in gamma.entries() {
        rows[e.i].push(e);
    }
    for e in gamma_p.entries() {
        rows_p[e.i].push(e);
    }
    let mut entries = Vec::new();
    for (i, a) in mu.atoms().iter().enumerate() {
        let row_mass: f64 = rows[i].iter().map(|e| e.mass).sum::<f64>()
            + rows_p[i].iter().map(|e| e.mass).sum::<f64>();
        if a.w == 0.0 {
            if row_mass > 0.0 {
                return Err(Error::Validation(format!(
                    "source atom {i} has zero weight but carries plan mass {row_mass}"
                )));
            }
            continue;
        }
        for e in &rows[i] {
            for ep in &rows_p[i] {
                let mass = e.mass * ep.mass / a.w;
                if mass > 0.0 {
                    entries.push((i, e.j, ep.j, mass));
                }
            }
        }
    }
    Ok(ThreeMarginal {
        first: mu.clone(),
        second: gamma.target().clone(),
        third: gamma_p.target().clone(),
        entries,
    })
}

impl ThreeMarginal {
    pub fn entries(&self) -> &[(usize, usize, usize, f64)] {
        &self.entries
    }

    pub fn marginal(&self, slot: usize) -> &DiscreteMeasure {
        match slot {
            0 => &self.first,
            1 => &self.second,
            2 => &self.third,
            _ => panic!("three-marginal slots are 0, 1, 2"),
        }
    }

    /// Projection onto a pair of slots as a transport plan.
    pub fn project(&self, from: usize, to: usize) -> Result<TransportPlan> {
        if from == to || from > 2 || to > 2 {
            return Err(Error::Argument(format!("bad projection slots ({from}, {to})")));
        }
        let pick = |entry: &(usize, usize, usize, f64), slot: usize| match slot {
            0 => entry.0,
            1 => entry.1,
            _ => entry.2,
        };
        let mut masses: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for e in &self.entries {
            *masses.entry((pick(e, from), pick(e, to))).or_insert(0.0) += e.3;
        }
        let entries = masses
            .into_iter()
            .map(|((i, j), mass)| PlanEntry { i, j, mass })
            .collect();
        TransportPlan::new(self.marginal(from).clone(), self.marginal(to).clone(), entries)
    }

    /// Geodesic interpolation between two slots, mass carried along each
    /// entry's minimal geodesic; the base slot rides along untouched.
    pub fn interpolate(&self, from: usize, to: usize, lambda: f64) -> Result<Interpolation> {
        if from == to || from > 2 || to > 2 {
            return Err(Error::Argument(format!("bad interpolation slots ({from}, {to})")));
        }
        let pick = |entry: &(usize, usize, usize, f64), slot: usize| match slot {
            0 => entry.0,
            1 => entry.1,
            _ => entry.2,
        };
        let a = self.marginal(from);
        let b = self.marginal(to);
        interpolate_pairs(
            a.domain().clone(),
            self.entries.iter().map(|e| {
                (a.atoms()[pick(e, from)].x, b.atoms()[pick(e, to)].x, e.3)
            }),
            lambda,
        )
    }
}

/// Interpolated measure plus the entries whose geodesic was ambiguous
/// (antipodal on some axis; the positive direction was taken).
#[derive(Clone, Debug)]
pub struct Interpolation {
    pub measure: DiscreteMeasure,
    pub antipodal_entries: Vec<usize>,
}

/// `μ^λ` along a transport plan: each entry's mass placed at the λ-point of
/// the minimal geodesic from its source to its target atom.
pub fn geodesic_interpolate(plan: &TransportPlan, lambda: f64) -> Result<Interpolation> {
    let src = plan.source();
    let dst = plan.target();
    interpolate_pairs(
        src.domain().clone(),
        plan.entries().iter().map(|e| (src.atoms()[e.i].x, dst.atoms()[e.j].x, e.mass)),
        lambda,
    )
}

fn interpolate_pairs(
    domain: Domain,
    pairs: impl Iterator<Item = (Vec2, Vec2, f64)>,
    lambda: f64,
) -> Result<Interpolation> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Argument(format!("interpolation parameter {lambda} outside [0, 1]")));
    }
    let mut atoms = Vec::new();
    let mut antipodal = Vec::new();
    for (idx, (x, y, mass)) in pairs.enumerate() {
        let (geo, tie) = domain.geodesic_point(x, y, lambda);
        // Exact endpoint recovery at λ ∈ {0, 1}.
        let point = if lambda == 0.0 {
            x
        } else if lambda == 1.0 {
            y
        } else {
            geo
        };
        if tie {
            antipodal.push(idx);
        }
        atoms.push((point, mass));
    }
    let measure = DiscreteMeasure::new(domain, atoms)?.canonical(DEFAULT_MERGE_EPS);
    Ok(Interpolation { measure, antipodal_entries: antipodal })
}

/// The potential energy `∫ φ dμ = Σ w_i φ(x_i)` (piecewise-linear field
/// evaluation).
pub fn potential_energy(phi: &ScalarField, mu: &DiscreteMeasure) -> f64 {
    mu.atoms().iter().map(|a| a.w * phi.eval(a.x)).sum()
}

/// One perturbation trial of the superdifferential check.
#[derive(Clone, Copy, Debug)]
pub struct SuperdifferentialTrial {
    pub w2: f64,
    /// Energy increment `φ(ν) − φ(μ)`.
    pub lhs: f64,
    /// Linear term `inf_{Γ₂} Σ⟨α, y−x⟩` plus the quadratic allowance.
    pub rhs: f64,
    pub pass: bool,
}

/// Report of `local_superdifferential_check`.
#[derive(Clone, Debug)]
pub struct SuperdifferentialCheck {
    /// Measured semiconcavity constant of the field (largest positive
    /// second-difference curvature over the grid).
    pub c_r: f64,
    pub trials: Vec<SuperdifferentialTrial>,
}

impl SuperdifferentialCheck {
    pub fn failures(&self) -> usize {
        self.trials.iter().filter(|t| !t.pass).count()
    }

    pub fn all_pass(&self) -> bool {
        self.failures() == 0
    }
}

/// Largest positive curvature of the field over grid nodes (eigenvalue of
/// the finite-difference Hessian in two dimensions).
pub fn semiconcavity_constant(phi: &ScalarField) -> f64 {
    let grid = phi.grid();
    let h = grid.spacing();
    let dim = grid.domain().dim();
    let v = phi.values();
    let mut c: f64 = 0.0;
    for idx in 0..grid.node_count() {
        let (i, j) = grid.axes_of(idx);
        let at = |di: isize, dj: isize| v[grid.index_of(i as isize + di, j as isize + dj)];
        let fxx = (at(1, 0) - 2.0 * at(0, 0) + at(-1, 0)) / (h * h);
        if dim == 1 {
            c = c.max(fxx);
        } else {
            let fyy = (at(0, 1) - 2.0 * at(0, 0) + at(0, -1)) / (h * h);
            let fxy = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / (4.0 * h * h);
            let lam = 0.5 * (fxx + fyy + ((fxx - fyy).powi(2) + 4.0 * fxy * fxy).sqrt());
            c = c.max(lam);
        }
    }
    c
}

/// Samples perturbed measures and checks the superdifferential inequality
/// `φ(ν) − φ(μ) ≤ inf_{γ ∈ Γ₂(μ,ν)} Σ⟨α, y−x⟩ + C_R·W₂²(μ,ν)` with the
/// measured semiconcavity constant. The inf runs over the W₂-optimal face
/// (plans optimal for the squared-distance cost). Perturbation radii sample
/// the shell `[radius/2, radius]` so displacements stay above grid scale,
/// where the piecewise-linear field genuinely obeys its measured constant.
pub fn local_superdifferential_check(
    phi: &ScalarField,
    mu: &DiscreteMeasure,
    alpha: &[Vec2],
    trials: usize,
    radius: f64,
    seed: u64,
) -> Result<SuperdifferentialCheck> {
    if alpha.len() != mu.len() {
        return Err(Error::Argument(format!(
            "{} covectors for {} atoms",
            alpha.len(),
            mu.len()
        )));
    }
    if radius <= 0.0 {
        return Err(Error::Argument(format!("perturbation radius {radius} must be positive")));
    }
    let domain = mu.domain().clone();
    let dim = domain.dim();
    let c_r = semiconcavity_constant(phi);
    let base_energy = potential_energy(phi, mu);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut positions = Vec::with_capacity(mu.len());
        for a in mu.atoms() {
            let mut y = a.x;
            for axis in 0..dim {
                let mag = rng.gen_range(radius / 2.0..=radius);
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                y[axis] += sign * mag;
            }
            let y = if domain.is_torus() { domain.reduce(y) } else { y };
            domain.check_contains(y)?;
            positions.push((y, a.w));
        }
        let nu = DiscreteMeasure::new(domain.clone(), positions)?;
        let w2 = wasserstein(2, mu, &nu)?;
        let sq_costs = metric_costs(2, mu, &nu);
        let m = nu.len();
        let mut linear = vec![0.0; mu.len() * m];
        for (i, a) in mu.atoms().iter().enumerate() {
            for (j, b) in nu.atoms().iter().enumerate() {
                let d = domain.displacement(a.x, b.x);
                linear[i * m + j] = geom::dot(alpha[i], d);
            }
        }
        let (inf_linear, _) = optimal_face_min(mu, &nu, &sq_costs, &linear)?;
        let lhs = potential_energy(phi, &nu) - base_energy;
        let rhs = inf_linear + c_r * w2 * w2;
        out.push(SuperdifferentialTrial { w2, lhs, rhs, pass: lhs <= rhs + 1e-9 });
    }
    Ok(SuperdifferentialCheck { c_r, trials: out })
}
