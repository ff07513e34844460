//! The dynamical cost functional `C^t(μ,ν)`: exact transport against the
//! least-action pair cost, displacement interpolation along the minimizing
//! curves, fiber-averaged superdifferentials with finite-difference
//! verification, the Hamilton–Jacobi inequality at the target, and
//! regularity probes (superlinearity, Lipschitz bounds, semiconcavity along
//! generalized geodesics).

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::action::{fundamental_solution, ActionParams, ActionResult};
use crate::dynamics::{GrowthEnvelope, TonelliModel};
use crate::error::{Error, Result};
use crate::geom::{self, Vec2};
use crate::measure::{
    glue, optimal_plan, optimal_plan_with_costs, wasserstein, DiscreteMeasure, DualCertificate,
    TransportPlan, DEFAULT_MERGE_EPS,
};

/// Optimal dynamical transport between two measures at a fixed duration.
#[derive(Clone, Debug)]
pub struct CostResult {
    t: f64,
    value: f64,
    plan: TransportPlan,
    /// Minimizing curve for each plan entry, aligned with `plan.entries()`.
    per_pair: Vec<ActionResult>,
    certificate: DualCertificate,
}

impl CostResult {
    pub fn t(&self) -> f64 {
        self.t
    }

    /// The cost value `Σ mass·A_t(x_i, y_j)` at the optimal plan.
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn plan(&self) -> &TransportPlan {
        &self.plan
    }

    /// Minimizer behind plan entry `k`.
    pub fn pair_curve(&self, k: usize) -> &ActionResult {
        &self.per_pair[k]
    }

    pub fn per_pair(&self) -> &[ActionResult] {
        &self.per_pair
    }

    pub fn certificate(&self) -> &DualCertificate {
        &self.certificate
    }

    /// Pairs carrying mass, as a set.
    fn support(&self) -> BTreeSet<(usize, usize)> {
        self.plan
            .entries()
            .iter()
            .filter(|e| e.mass > 1e-12)
            .map(|e| (e.i, e.j))
            .collect()
    }
}

/// Least action between two atoms, with convergence failures renamed after
/// the pair that needed them.
fn pair_action(
    model: &TonelliModel,
    params: &ActionParams,
    x: Vec2,
    y: Vec2,
    t: f64,
    i: usize,
    j: usize,
) -> Result<ActionResult> {
    fundamental_solution(model, x, y, t, params).map_err(|e| match e {
        Error::ActionNoConvergence { result } => Error::Convergence {
            iterations: result.iterations,
            best_value: result.value,
            grad_norm: result.grad_norm,
            context: format!("least action between source atom {i} and target atom {j}"),
        },
        other => other,
    })
}

/// `C^t(μ,ν)`: exact LP over the `A_t` cost matrix, with the minimizing
/// curve retained for every carried pair.
pub fn dynamical_cost(
    model: &TonelliModel,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    t: f64,
    params: &ActionParams,
) -> Result<CostResult> {
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::Argument(format!("cost needs a positive duration, got {t}")));
    }
    if mu.domain() != nu.domain() {
        return Err(Error::Validation("measures live on different domains".into()));
    }
    let m = nu.len();
    let values: Vec<f64> = (0..mu.len() * m)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / m, idx % m);
            pair_action(model, params, mu.atoms()[i].x, nu.atoms()[j].x, t, i, j)
                .map(|r| r.value)
        })
        .collect::<Result<_>>()?;
    let (plan, certificate) = optimal_plan_with_costs(mu, nu, &values)?;
    let per_pair: Vec<ActionResult> = plan
        .entries()
        .par_iter()
        .map(|e| pair_action(model, params, mu.atoms()[e.i].x, nu.atoms()[e.j].x, t, e.i, e.j))
        .collect::<Result<_>>()?;
    let value = plan.cost_with(|i, j| values[i * m + j]);
    Ok(CostResult { t, value, plan, per_pair, certificate })
}

/// The measure at time `s` along the optimal dynamical coupling: each
/// entry's mass rides its minimizing curve.
pub fn displacement_interpolation(result: &CostResult, s: f64) -> Result<DiscreteMeasure> {
    if !(0.0..=result.t).contains(&s) {
        return Err(Error::Argument(format!(
            "interpolation time {s} outside [0, {}]",
            result.t
        )));
    }
    let src = result.plan.source();
    let dst = result.plan.target();
    let domain = src.domain().clone();
    let mut atoms = Vec::with_capacity(result.per_pair.len());
    for (e, curve) in result.plan.entries().iter().zip(&result.per_pair) {
        // Endpoints are copied from the marginals so they come back exactly.
        let pos = if s == 0.0 {
            src.atoms()[e.i].x
        } else if s == result.t {
            dst.atoms()[e.j].x
        } else {
            domain.reduce(curve.sample(s))
        };
        atoms.push((pos, e.mass));
    }
    Ok(DiscreteMeasure::new(domain, atoms)?.canonical(DEFAULT_MERGE_EPS))
}

/// Fiber-averaged momenta of an optimal dynamical coupling.
#[derive(Clone, Debug, Serialize)]
pub struct CostSuperdifferentials {
    /// Average arrival momentum per target atom: `Σ_i (m_ij/ν_j)·p_ij(t)`.
    pub p_nu: Vec<Vec2>,
    /// Average departure momentum per source atom: `Σ_j (m_ij/μ_i)·p_ij(0)`;
    /// `−p_mu` is the superdifferential element in the source slot.
    pub p_mu: Vec<Vec2>,
    /// Time derivative `−Σ mass·H(y_j, p_ij(t))`.
    pub dt: f64,
}

/// Reads the superdifferential data off the retained minimizers.
pub fn cost_superdifferentials(model: &TonelliModel, result: &CostResult) -> CostSuperdifferentials {
    let src = result.plan.source();
    let dst = result.plan.target();
    let mut p_nu = vec![[0.0; 2]; dst.len()];
    let mut p_mu = vec![[0.0; 2]; src.len()];
    let mut dt = 0.0;
    for (e, curve) in result.plan.entries().iter().zip(&result.per_pair) {
        let arrive = curve.end_momentum();
        let depart = curve.start_momentum();
        p_nu[e.j] = geom::add(p_nu[e.j], geom::scale(arrive, e.mass));
        p_mu[e.i] = geom::add(p_mu[e.i], geom::scale(depart, e.mass));
        dt -= e.mass * model.hamiltonian_unchecked(dst.atoms()[e.j].x, arrive);
    }
    for (j, p) in p_nu.iter_mut().enumerate() {
        let w = dst.atoms()[j].w;
        if w > 0.0 {
            *p = geom::scale(*p, 1.0 / w);
        }
    }
    for (i, p) in p_mu.iter_mut().enumerate() {
        let w = src.atoms()[i].w;
        if w > 0.0 {
            *p = geom::scale(*p, 1.0 / w);
        }
    }
    CostSuperdifferentials { p_nu, p_mu, dt }
}

/// One finite-difference probe of the superdifferential data.
#[derive(Clone, Debug, Serialize)]
pub struct FdProbe {
    pub label: String,
    pub analytic: f64,
    pub finite_difference: f64,
    pub error: f64,
    /// False when the plan support changed under the probe displacement
    /// (a kink of the value function); such probes carry no information.
    pub stable: bool,
}

/// Central finite differences of `C^t` against the analytic
/// superdifferentials: one probe per atom coordinate plus one in `t`.
/// Probes whose displacement changes the plan support are flagged
/// unstable and must be read as skipped.
pub fn verify_superdifferentials(
    model: &TonelliModel,
    result: &CostResult,
    sd: &CostSuperdifferentials,
    params: &ActionParams,
    h: f64,
) -> Result<Vec<FdProbe>> {
    let src = result.plan.source();
    let dst = result.plan.target();
    let domain = src.domain().clone();
    let dim = domain.dim();
    let support = result.support();
    let mut probes = Vec::new();

    let shifted = |base: &DiscreteMeasure, idx: usize, axis: usize, delta: f64| -> Result<DiscreteMeasure> {
        let atoms = base
            .atoms()
            .iter()
            .enumerate()
            .map(|(k, a)| {
                let mut x = a.x;
                if k == idx {
                    x[axis] += delta;
                    if domain.is_torus() {
                        x = domain.reduce(x);
                    }
                }
                (x, a.w)
            })
            .collect();
        DiscreteMeasure::new(domain.clone(), atoms)
    };

    for (i, atom) in src.atoms().iter().enumerate() {
        if atom.w == 0.0 {
            continue;
        }
        for axis in 0..dim {
            let plus = dynamical_cost(model, &shifted(src, i, axis, h)?, dst, result.t, params)?;
            let minus = dynamical_cost(model, &shifted(src, i, axis, -h)?, dst, result.t, params)?;
            let stable = plus.support() == support && minus.support() == support;
            let fd = (plus.value - minus.value) / (2.0 * h);
            let analytic = -atom.w * sd.p_mu[i][axis];
            probes.push(FdProbe {
                label: format!("source atom {i}, axis {axis}"),
                analytic,
                finite_difference: fd,
                error: (fd - analytic).abs(),
                stable,
            });
        }
    }
    for (j, atom) in dst.atoms().iter().enumerate() {
        if atom.w == 0.0 {
            continue;
        }
        for axis in 0..dim {
            let plus = dynamical_cost(model, src, &shifted(dst, j, axis, h)?, result.t, params)?;
            let minus = dynamical_cost(model, src, &shifted(dst, j, axis, -h)?, result.t, params)?;
            let stable = plus.support() == support && minus.support() == support;
            let fd = (plus.value - minus.value) / (2.0 * h);
            let analytic = atom.w * sd.p_nu[j][axis];
            probes.push(FdProbe {
                label: format!("target atom {j}, axis {axis}"),
                analytic,
                finite_difference: fd,
                error: (fd - analytic).abs(),
                stable,
            });
        }
    }
    let plus = dynamical_cost(model, src, dst, result.t + h, params)?;
    let minus = dynamical_cost(model, src, dst, result.t - h, params)?;
    let stable = plus.support() == support && minus.support() == support;
    let fd = (plus.value - minus.value) / (2.0 * h);
    probes.push(FdProbe {
        label: "duration".into(),
        analytic: sd.dt,
        finite_difference: fd,
        error: (fd - sd.dt).abs(),
        stable,
    });
    Ok(probes)
}

/// The Hamilton–Jacobi defect at the target,
/// `D_t + Σ_j ν_j·H(y_j, p_ν(y_j))`. Jensen makes it nonpositive; it
/// vanishes when every target fiber has a single incoming momentum and is
/// strictly negative when fibers merge distinct momenta.
pub fn hj_slack(model: &TonelliModel, result: &CostResult, sd: &CostSuperdifferentials) -> f64 {
    let dst = result.plan.target();
    let fiber: f64 = dst
        .atoms()
        .iter()
        .zip(&sd.p_nu)
        .map(|(a, p)| a.w * model.hamiltonian_unchecked(a.x, *p))
        .sum();
    sd.dt + fiber
}

/// A sampled instance pinned as the worst case for some probe.
#[derive(Clone, Debug, Serialize)]
pub struct Witness {
    pub mu: DiscreteMeasure,
    pub nu: DiscreteMeasure,
    pub t: f64,
    pub quantity: f64,
}

/// Superlinearity `C^t ≥ k·W₁ − (c₀ + θ*(k))·t` at one slope.
#[derive(Clone, Debug, Serialize)]
pub struct SuperlinearityProbe {
    pub k: f64,
    pub samples: usize,
    pub violations: usize,
    /// Smallest margin `C − (k·W₁ − (c₀+θ*(k))t)` seen.
    pub min_margin: f64,
    pub witness: Option<Witness>,
}

/// Largest difference quotients of `(t, ν) ↦ C^t(μ,ν)`.
#[derive(Clone, Debug, Serialize)]
pub struct LipschitzProbe {
    pub samples: usize,
    pub in_t: f64,
    pub in_w1: f64,
    pub witness_t: Option<Witness>,
    pub witness_w1: Option<Witness>,
}

/// Midpoint semiconcavity along generalized geodesics at one duration:
/// `defect ≤ constant·λ(1−λ)·G²` with `G²` the squared length of the glued
/// interpolation.
#[derive(Clone, Debug, Serialize)]
pub struct SemiconcavityProbe {
    pub t: f64,
    pub samples: usize,
    /// Largest `defect / (λ(1−λ)G²)` seen at λ = ½.
    pub max_constant: f64,
    pub witness: Option<Witness>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RegularityReport {
    pub superlinearity: Vec<SuperlinearityProbe>,
    pub lipschitz: LipschitzProbe,
    pub semiconcavity: Vec<SemiconcavityProbe>,
    /// `max_t (max_constant · t)` — the empirical `C_K` of the `C_K/t` law.
    pub c_k_estimate: f64,
    /// True when the sample budget ran out before all probes finished.
    pub partial: bool,
    /// Action solves that failed to converge during sampling (skipped).
    pub solver_failures: usize,
}

/// Configuration of `regularity_probe`.
#[derive(Clone, Debug)]
pub struct RegularityProbeConfig {
    /// Support box: atoms are drawn uniformly from it.
    pub k_box: [Vec2; 2],
    pub t_values: Vec<f64>,
    /// Superlinearity slopes to test.
    pub slopes: Vec<f64>,
    /// Samples per sub-probe.
    pub samples: usize,
    /// Atoms of the base measure in the semiconcavity probe (a Dirac base
    /// makes the free case exactly quadratic).
    pub base_atoms: usize,
    /// Total `dynamical_cost` evaluations allowed across all sub-probes.
    pub sample_budget: usize,
    pub seed: u64,
}

impl Default for RegularityProbeConfig {
    fn default() -> Self {
        RegularityProbeConfig {
            k_box: [[0.1, 0.0], [0.4, 0.0]],
            t_values: vec![0.25, 0.5, 1.0],
            slopes: vec![1.0, 2.0, 4.0],
            samples: 24,
            base_atoms: 2,
            sample_budget: 600,
            seed: 0,
        }
    }
}

struct Budget {
    left: usize,
    exhausted: bool,
}

impl Budget {
    fn take(&mut self) -> bool {
        if self.left == 0 {
            self.exhausted = true;
            false
        } else {
            self.left -= 1;
            true
        }
    }
}

fn random_measure(
    rng: &mut ChaCha8Rng,
    domain: &crate::geom::Domain,
    k_box: &[Vec2; 2],
    max_atoms: usize,
) -> DiscreteMeasure {
    let count = rng.gen_range(1..=max_atoms);
    let dim = domain.dim();
    let mut atoms = Vec::with_capacity(count);
    let mut weights = Vec::with_capacity(count);
    for _ in 0..count {
        let mut x = [0.0; 2];
        for axis in 0..dim {
            x[axis] = rng.gen_range(k_box[0][axis]..=k_box[1][axis]);
        }
        atoms.push(x);
        weights.push(rng.gen_range(0.2..1.0));
    }
    let total: f64 = weights.iter().sum();
    DiscreteMeasure::new(
        domain.clone(),
        atoms.iter().zip(&weights).map(|(&x, &w)| (x, w / total)).collect(),
    )
    .expect("sampled atoms form a probability measure")
}

/// Samples random instances inside `k_box` and reports superlinearity,
/// Lipschitz quotients, and the semiconcavity constant of `ν ↦ C^t(μ,ν)`
/// along generalized geodesics with base μ.
pub fn regularity_probe(
    model: &TonelliModel,
    params: &ActionParams,
    cfg: &RegularityProbeConfig,
) -> Result<RegularityReport> {
    if cfg.t_values.is_empty() || cfg.t_values.iter().any(|t| *t <= 0.0) {
        return Err(Error::Argument("regularity probe needs positive durations".into()));
    }
    let domain = model.domain().clone();
    let c0 = model.v_max();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut budget = Budget { left: cfg.sample_budget, exhausted: false };
    let mut failures = 0usize;

    let cost_of = |mu: &DiscreteMeasure,
                       nu: &DiscreteMeasure,
                       t: f64,
                       budget: &mut Budget,
                       failures: &mut usize|
     -> Option<f64> {
        if !budget.take() {
            return None;
        }
        match dynamical_cost(model, mu, nu, t, params) {
            Ok(r) => Some(r.value),
            Err(_) => {
                *failures += 1;
                None
            }
        }
    };

    let mut superlinearity = Vec::new();
    for &k in &cfg.slopes {
        let offset = c0 + GrowthEnvelope::theta_star(k);
        let mut probe = SuperlinearityProbe {
            k,
            samples: 0,
            violations: 0,
            min_margin: f64::INFINITY,
            witness: None,
        };
        for s in 0..cfg.samples {
            let t = cfg.t_values[s % cfg.t_values.len()];
            let mu = random_measure(&mut rng, &domain, &cfg.k_box, 3);
            let nu = random_measure(&mut rng, &domain, &cfg.k_box, 3);
            let Some(c) = cost_of(&mu, &nu, t, &mut budget, &mut failures) else {
                if budget.exhausted {
                    break;
                }
                continue;
            };
            let w1 = wasserstein(1, &mu, &nu)?;
            let margin = c - (k * w1 - offset * t);
            probe.samples += 1;
            if margin < -1e-6 {
                probe.violations += 1;
            }
            if margin < probe.min_margin {
                probe.min_margin = margin;
                probe.witness = Some(Witness { mu, nu, t, quantity: margin });
            }
        }
        superlinearity.push(probe);
    }

    let mut lipschitz = LipschitzProbe {
        samples: 0,
        in_t: 0.0,
        in_w1: 0.0,
        witness_t: None,
        witness_w1: None,
    };
    for s in 0..cfg.samples {
        let t = cfg.t_values[s % cfg.t_values.len()];
        let mu = random_measure(&mut rng, &domain, &cfg.k_box, 3);
        let nu = random_measure(&mut rng, &domain, &cfg.k_box, 3);
        let dt = 0.05 * t;
        let shift = 0.02 * (2.0 * rng.gen::<f64>() - 1.0);
        let nu_shift = match crate::measure::pushforward(&nu, |x| {
            let mut y = x;
            y[0] += shift;
            y
        }) {
            Ok(m) => m,
            Err(_) => continue,
        };
        let base = cost_of(&mu, &nu, t, &mut budget, &mut failures);
        let bumped = cost_of(&mu, &nu, t + dt, &mut budget, &mut failures);
        let moved = cost_of(&mu, &nu_shift, t, &mut budget, &mut failures);
        if budget.exhausted {
            break;
        }
        let (Some(base), Some(bumped), Some(moved)) = (base, bumped, moved) else {
            continue;
        };
        lipschitz.samples += 1;
        let q_t = (bumped - base).abs() / dt;
        if q_t > lipschitz.in_t {
            lipschitz.in_t = q_t;
            lipschitz.witness_t = Some(Witness { mu: mu.clone(), nu: nu.clone(), t, quantity: q_t });
        }
        let w1 = wasserstein(1, &nu, &nu_shift)?;
        if w1 > 1e-9 {
            let q_w = (moved - base).abs() / w1;
            if q_w > lipschitz.in_w1 {
                lipschitz.in_w1 = q_w;
                lipschitz.witness_w1 = Some(Witness { mu, nu, t, quantity: q_w });
            }
        }
    }

    let mut semiconcavity = Vec::new();
    let mut c_k_estimate: f64 = 0.0;
    for &t in &cfg.t_values {
        let mut probe =
            SemiconcavityProbe { t, samples: 0, max_constant: f64::NEG_INFINITY, witness: None };
        for _ in 0..cfg.samples {
            let mu = random_measure(&mut rng, &domain, &cfg.k_box, cfg.base_atoms);
            let nu1 = random_measure(&mut rng, &domain, &cfg.k_box, 2);
            let nu2 = random_measure(&mut rng, &domain, &cfg.k_box, 2);
            let (g1, _) = optimal_plan(2, &mu, &nu1)?;
            let (g2, _) = optimal_plan(2, &mu, &nu2)?;
            let glued = glue(&g1, &g2)?;
            let mid = glued.interpolate(1, 2, 0.5)?.measure;
            // Squared length of the generalized geodesic.
            let g_sq: f64 = glued
                .entries()
                .iter()
                .map(|&(_, j, k, mass)| {
                    let d = domain.dist(nu1.atoms()[j].x, nu2.atoms()[k].x);
                    mass * d * d
                })
                .sum();
            if g_sq < 1e-10 {
                continue;
            }
            let c1 = cost_of(&mu, &nu1, t, &mut budget, &mut failures);
            let c2 = cost_of(&mu, &nu2, t, &mut budget, &mut failures);
            let cm = cost_of(&mu, &mid, t, &mut budget, &mut failures);
            if budget.exhausted {
                break;
            }
            let (Some(c1), Some(c2), Some(cm)) = (c1, c2, cm) else {
                continue;
            };
            let defect = 0.5 * c1 + 0.5 * c2 - cm;
            let constant = defect / (0.25 * g_sq);
            probe.samples += 1;
            if constant > probe.max_constant {
                probe.max_constant = constant;
                probe.witness = Some(Witness { mu, nu: mid, t, quantity: constant });
            }
        }
        if probe.samples > 0 {
            c_k_estimate = c_k_estimate.max(probe.max_constant * t);
        }
        semiconcavity.push(probe);
    }

    Ok(RegularityReport {
        superlinearity,
        lipschitz,
        semiconcavity,
        c_k_estimate,
        partial: budget.exhausted,
        solver_failures: failures,
    })
}

/// JSON export of a cost solve: value, plan entries, time derivative, and
/// the Hamilton–Jacobi slack.
pub fn cost_report_json(
    result: &CostResult,
    sd: &CostSuperdifferentials,
    slack: f64,
) -> String {
    #[derive(Serialize)]
    struct Report<'a> {
        value: f64,
        t: f64,
        entries: &'a [crate::measure::PlanEntry],
        dt: f64,
        hj_slack: f64,
        min_reduced_cost: f64,
    }
    serde_json::to_string_pretty(&Report {
        value: result.value,
        t: result.t,
        entries: result.plan.entries(),
        dt: sd.dt,
        hj_slack: slack,
        min_reduced_cost: result.certificate.min_reduced_cost,
    })
    .expect("cost report serializes")
}

/// CSV polylines of the carried minimizers: `entry,s,x0,x1` per curve node.
pub fn per_pair_csv(result: &CostResult) -> String {
    let mut out = String::from("entry,s,x0,x1\n");
    for (k, curve) in result.per_pair.iter().enumerate() {
        let steps = curve.intervals();
        for node in 0..=steps {
            let s = result.t * node as f64 / steps as f64;
            let x = curve.sample(s);
            out.push_str(&format!("{k},{s},{},{}\n", x[0], x[1]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Potential;
    use crate::geom::Domain;

    fn free_model() -> TonelliModel {
        TonelliModel::new(Domain::torus(1), Potential::Zero).unwrap()
    }

    #[test]
    fn dirac_pair_cost_is_the_fundamental_solution() {
        let model = free_model();
        let mu = DiscreteMeasure::dirac(Domain::torus(1), [0.0, 0.0]).unwrap();
        let nu = DiscreteMeasure::dirac(Domain::torus(1), [0.25, 0.0]).unwrap();
        let r = dynamical_cost(&model, &mu, &nu, 0.5, &ActionParams::default()).unwrap();
        assert!((r.value() - 0.0625).abs() < 1e-9, "C = {}, want d²/2t = 0.0625", r.value());
        assert!(r.certificate().min_reduced_cost >= -1e-9);
    }

    #[test]
    fn stay_put_coupling_costs_nothing() {
        let model = free_model();
        let mu = DiscreteMeasure::new(
            Domain::torus(1),
            vec![([0.1, 0.0], 0.5), ([0.6, 0.0], 0.5)],
        )
        .unwrap();
        let r = dynamical_cost(&model, &mu, &mu, 0.5, &ActionParams::default()).unwrap();
        assert!(r.value().abs() < 1e-12, "C(μ,μ) = {}", r.value());
        for e in r.plan().entries() {
            assert_eq!(e.i, e.j, "optimal free self-coupling must stay put");
        }
    }

    #[test]
    fn interpolation_endpoints_and_free_midpoint() {
        let model = free_model();
        let mu = DiscreteMeasure::dirac(Domain::torus(1), [0.0, 0.0]).unwrap();
        let nu = DiscreteMeasure::dirac(Domain::torus(1), [0.25, 0.0]).unwrap();
        let r = dynamical_cost(&model, &mu, &nu, 0.5, &ActionParams::default()).unwrap();
        let start = displacement_interpolation(&r, 0.0).unwrap();
        assert_eq!(start.atoms()[0].x, [0.0, 0.0]);
        let mid = displacement_interpolation(&r, 0.25).unwrap();
        assert!(
            (mid.atoms()[0].x[0] - 0.125).abs() < 1e-9,
            "straight characteristic: {:?}",
            mid.atoms()[0].x
        );
        let end = displacement_interpolation(&r, 0.5).unwrap();
        assert_eq!(end.atoms()[0].x, [0.25, 0.0]);
        assert!(displacement_interpolation(&r, 0.6).is_err());
    }

    #[test]
    fn dirac_superdifferentials_match_the_free_particle() {
        let model = free_model();
        let mu = DiscreteMeasure::dirac(Domain::torus(1), [0.0, 0.0]).unwrap();
        let nu = DiscreteMeasure::dirac(Domain::torus(1), [0.25, 0.0]).unwrap();
        let r = dynamical_cost(&model, &mu, &nu, 0.5, &ActionParams::default()).unwrap();
        let sd = cost_superdifferentials(&model, &r);
        assert!((sd.p_nu[0][0] - 0.5).abs() < 1e-9, "arrival momentum {:?}", sd.p_nu[0]);
        assert!((sd.p_mu[0][0] - 0.5).abs() < 1e-9, "departure momentum {:?}", sd.p_mu[0]);
        assert!((sd.dt - (-0.125)).abs() < 1e-9, "Dt = {}", sd.dt);
        let slack = hj_slack(&model, &r, &sd);
        assert!(slack.abs() < 1e-9, "Dirac slack {slack}");
    }

    #[test]
    fn self_coupling_superdifferentials_vanish() {
        let model = free_model();
        let mu = DiscreteMeasure::new(
            Domain::torus(1),
            vec![([0.2, 0.0], 0.6), ([0.7, 0.0], 0.4)],
        )
        .unwrap();
        let r = dynamical_cost(&model, &mu, &mu, 0.4, &ActionParams::default()).unwrap();
        let sd = cost_superdifferentials(&model, &r);
        for p in sd.p_nu.iter().chain(&sd.p_mu) {
            assert!(geom::norm(*p) < 1e-9, "stay-put momentum {p:?}");
        }
        assert!(sd.dt.abs() < 1e-9);
        assert!(hj_slack(&model, &r, &sd).abs() < 1e-9);
    }

    #[test]
    fn single_fiber_targets_have_zero_slack() {
        let model = free_model();
        let mu = DiscreteMeasure::dirac(Domain::torus(1), [0.0, 0.0]).unwrap();
        let nu = DiscreteMeasure::new(
            Domain::torus(1),
            vec![([0.3, 0.0], 0.5), ([0.7, 0.0], 0.5)],
        )
        .unwrap();
        let r = dynamical_cost(&model, &mu, &nu, 0.5, &ActionParams::default()).unwrap();
        let sd = cost_superdifferentials(&model, &r);
        let slack = hj_slack(&model, &r, &sd);
        assert!(slack.abs() < 1e-9, "one incoming pair per fiber, slack {slack}");
    }

    #[test]
    fn merging_fibers_pay_the_jensen_gap() {
        // Two momenta ±0.5 merge at one target atom: the averaged momentum
        // is 0, so the slack is minus the momentum variance over two,
        // −½·(E p² − (E p)²) = −0.125.
        let model = free_model();
        let mu = DiscreteMeasure::new(
            Domain::torus(1),
            vec![([0.0, 0.0], 0.5), ([0.5, 0.0], 0.5)],
        )
        .unwrap();
        let nu = DiscreteMeasure::dirac(Domain::torus(1), [0.25, 0.0]).unwrap();
        let r = dynamical_cost(&model, &mu, &nu, 0.5, &ActionParams::default()).unwrap();
        let sd = cost_superdifferentials(&model, &r);
        assert!(geom::norm(sd.p_nu[0]) < 1e-9, "momenta cancel: {:?}", sd.p_nu[0]);
        let slack = hj_slack(&model, &r, &sd);
        assert!((slack - (-0.125)).abs() < 1e-6, "Jensen gap slack {slack}");
        assert!(slack < -1e-6);
    }

    #[test]
    fn failed_action_solves_name_their_pair() {
        let model = TonelliModel::new(
            Domain::torus(1),
            Potential::Cosine { amplitude: 1.0 },
        )
        .unwrap();
        let mu = DiscreteMeasure::dirac(Domain::torus(1), [0.1, 0.0]).unwrap();
        let nu = DiscreteMeasure::dirac(Domain::torus(1), [0.6, 0.0]).unwrap();
        let starved = ActionParams { max_iterations: 0, ..ActionParams::default() };
        match dynamical_cost(&model, &mu, &nu, 0.5, &starved) {
            Err(Error::Convergence { context, .. }) => {
                assert!(
                    context.contains("source atom 0") && context.contains("target atom 0"),
                    "context should name the pair: {context}"
                );
            }
            other => panic!("expected a convergence error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_durations_are_rejected() {
        let model = free_model();
        let mu = DiscreteMeasure::dirac(Domain::torus(1), [0.0, 0.0]).unwrap();
        assert!(dynamical_cost(&model, &mu, &mu, 0.0, &ActionParams::default()).is_err());
        assert!(dynamical_cost(&model, &mu, &mu, -1.0, &ActionParams::default()).is_err());
    }

    #[test]
    fn report_json_holds_the_headline_numbers() {
        let model = free_model();
        let mu = DiscreteMeasure::dirac(Domain::torus(1), [0.0, 0.0]).unwrap();
        let nu = DiscreteMeasure::dirac(Domain::torus(1), [0.25, 0.0]).unwrap();
        let r = dynamical_cost(&model, &mu, &nu, 0.5, &ActionParams::default()).unwrap();
        let sd = cost_superdifferentials(&model, &r);
        let json = cost_report_json(&r, &sd, hj_slack(&model, &r, &sd));
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!((parsed["value"].as_f64().unwrap() - 0.0625).abs() < 1e-9);
        assert_eq!(parsed["entries"].as_array().unwrap().len(), 1);
        let csv = per_pair_csv(&r);
        assert!(csv.lines().count() > 2, "polyline export should carry the curve");
    }
}
