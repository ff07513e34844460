//! Cross-module property battery.
//!
//! `check-invariants` runs every module's contract at the scenario's own
//! scale — the same model, grid, and action parameters the experiments use
//! — on seeded random instances, and reports one row per property with the
//! worst witness seen.  The `invariants` experiment kind embeds the same
//! rows as metrics in `report.json`.
//!
//! The battery has a fault-injection hook: `corrupt-node = k` overwrites
//! node `k` of the solved field with NaN inside the battery's own sanity
//! scan (the library's constructors reject non-finite values, so the
//! corruption lives in a scratch copy).  The scan must then fail naming
//! that node, which exercises the failure path end to end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wklab::action::{action_derivatives, fundamental_solution};
use wklab::cost::{cost_superdifferentials, dynamical_cost, hj_slack};
use wklab::dynamics::{Potential, TonelliModel};
use wklab::error::Error;
use wklab::geom::{self, Domain, Vec2};
use wklab::hopf_lax::{t_minus, t_plus};
use wklab::measure::{
    glue, geodesic_interpolate, optimal_plan, potential_energy, wasserstein, DiscreteMeasure,
};
use wklab::wasserstein_hj::{measure_cut_time, p_minus};

use crate::config::InvariantsOpts;
use crate::experiments::Context;
use crate::report::{Check, Metric};

/// Fixed battery seed: `check-invariants` is reproducible on its own, with
/// `--seed-override` reserved for the scenario's measure generators.
const BATTERY_SEED: u64 = 0x77AB1E5;

/// One probed property.
pub struct InvariantRow {
    pub name: &'static str,
    pub operation: &'static str,
    pub check: Check,
    pub worst: f64,
    pub target: f64,
    pub tolerance: f64,
    pub witness: String,
    pub pass: bool,
}

impl InvariantRow {
    fn upper(
        name: &'static str,
        operation: &'static str,
        worst: f64,
        target: f64,
        tolerance: f64,
        witness: String,
    ) -> Self {
        let pass = worst <= target + tolerance;
        InvariantRow { name, operation, check: Check::Upper, worst, target, tolerance, witness, pass }
    }

    fn lower(
        name: &'static str,
        operation: &'static str,
        worst: f64,
        target: f64,
        tolerance: f64,
        witness: String,
    ) -> Self {
        let pass = worst >= target - tolerance;
        InvariantRow { name, operation, check: Check::Lower, worst, target, tolerance, witness, pass }
    }

    pub fn into_metric(self) -> Metric {
        Metric {
            name: self.name.into(),
            operation: self.operation.into(),
            check: self.check,
            value: self.worst,
            target: self.target,
            tolerance: self.tolerance,
            pass: self.pass,
        }
    }
}

/// Prints the battery as an aligned table.
pub fn print_table(rows: &[InvariantRow]) {
    println!("{:<28} {:<6} {:>12}  witness", "invariant", "status", "worst");
    for row in rows {
        println!(
            "{:<28} {:<6} {:>12.3e}  {}",
            row.name,
            if row.pass { "PASS" } else { "FAIL" },
            row.worst,
            row.witness
        );
    }
    let failing = rows.iter().filter(|r| !r.pass).count();
    if failing == 0 {
        println!("all {} invariants hold", rows.len());
    } else {
        println!("{failing} of {} invariants FAILED", rows.len());
    }
}

fn rand_point(rng: &mut ChaCha8Rng, dim: usize) -> Vec2 {
    [rng.gen::<f64>(), if dim == 2 { rng.gen::<f64>() } else { 0.0 }]
}

fn rand_measure(rng: &mut ChaCha8Rng, domain: &Domain, max_atoms: usize) -> DiscreteMeasure {
    let count = rng.gen_range(1..=max_atoms);
    let mut atoms = Vec::with_capacity(count);
    for _ in 0..count {
        atoms.push((rand_point(rng, domain.dim()), rng.gen_range(0.2..1.0)));
    }
    let total: f64 = atoms.iter().map(|(_, w)| w).sum();
    for a in &mut atoms {
        a.1 /= total;
    }
    DiscreteMeasure::new(domain.clone(), atoms).expect("random atoms are valid")
}

fn fmt_point(p: Vec2, dim: usize) -> String {
    if dim == 2 {
        format!("({:.3},{:.3})", p[0], p[1])
    } else {
        format!("{:.3}", p[0])
    }
}

/// Runs the full battery.  Library errors inside a probe abort the battery:
/// they mean a module broke its own contract on a valid instance.
pub fn battery(ctx: &mut Context<'_>, opts: &InvariantsOpts) -> Result<Vec<InvariantRow>, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(BATTERY_SEED);
    let mut rows = Vec::new();
    let n = opts.samples;

    rows.push(action_gradients(ctx, &mut rng, n.min(50))?);
    rows.push(free_kernel(ctx, &mut rng, n.min(50))?);
    rows.push(transport_triangle(ctx, &mut rng, n)?);
    rows.push(dirac_distances(ctx, &mut rng, n)?);
    rows.push(geodesic_speed(ctx, &mut rng, n.min(20))?);
    rows.push(glue_projections(ctx, &mut rng, n.min(20))?);
    rows.push(semigroup_order(ctx, &mut rng, n.min(4))?);
    rows.push(measure_fixed_point(ctx, &mut rng, n.min(20))?);
    rows.push(cut_agreement(ctx, &mut rng, n.min(8))?);
    rows.push(cut_dirac_witness(ctx, &mut rng, n.min(8))?);
    rows.push(hj_slack_sign(ctx, &mut rng, n.min(8))?);
    rows.push(flow_mass_transport(ctx)?);
    rows.push(field_sanity(ctx, opts)?);

    Ok(rows)
}

/// `D_xA = −p(0)`, `D_yA = p(t)`, `D_tA = −H(y, p(t))` against central
/// finite differences.  Sampled away from the winding tie band `|y−x| ≈ ½`,
/// where the kernel is genuinely non-differentiable and no identity is
/// claimed.
fn action_gradients(
    ctx: &mut Context<'_>,
    rng: &mut ChaCha8Rng,
    samples: usize,
) -> Result<InvariantRow, Error> {
    let model = &ctx.scenario.model;
    let params = &ctx.scenario.params;
    let dim = model.domain().dim();
    let h = 1e-5;
    let mut worst = 0.0_f64;
    let mut witness = String::from("no samples");
    for _ in 0..samples {
        let x = rand_point(rng, dim);
        let mut y = x;
        for a in 0..dim {
            y[a] = (x[a] + rng.gen_range(-0.4..0.4)).rem_euclid(1.0);
        }
        let t = rng.gen_range(0.15..1.0);
        let r = fundamental_solution(model, x, y, t, params)?;
        let d = action_derivatives(model, &r);
        let mut errs: Vec<f64> = Vec::with_capacity(2 * dim + 1);
        for a in 0..dim {
            let (mut xp, mut xm) = (x, x);
            xp[a] += h;
            xm[a] -= h;
            let fd = (fundamental_solution(model, xp, y, t, params)?.value
                - fundamental_solution(model, xm, y, t, params)?.value)
                / (2.0 * h);
            errs.push((fd - d.d_start[a]).abs() / fd.abs().max(1.0));
            let (mut yp, mut ym) = (y, y);
            yp[a] += h;
            ym[a] -= h;
            let fd = (fundamental_solution(model, x, yp, t, params)?.value
                - fundamental_solution(model, x, ym, t, params)?.value)
                / (2.0 * h);
            errs.push((fd - d.d_end[a]).abs() / fd.abs().max(1.0));
        }
        let fd = (fundamental_solution(model, x, y, t + h, params)?.value
            - fundamental_solution(model, x, y, t - h, params)?.value)
            / (2.0 * h);
        errs.push((fd - d.d_time).abs() / fd.abs().max(1.0));
        let err = errs.iter().copied().fold(0.0, f64::max);
        if err > worst {
            worst = err;
            witness = format!(
                "x={} y={} t={t:.3}",
                fmt_point(x, dim),
                fmt_point(y, dim)
            );
        }
    }
    Ok(InvariantRow::upper(
        "action-gradient-identities",
        "action::action_derivatives",
        worst,
        0.0,
        1e-3,
        witness,
    ))
}

/// Free-particle kernel against the closed form `d(x,y)²/2t`.
fn free_kernel(
    ctx: &mut Context<'_>,
    rng: &mut ChaCha8Rng,
    samples: usize,
) -> Result<InvariantRow, Error> {
    let domain = ctx.scenario.model.domain().clone();
    let free = TonelliModel::new(domain.clone(), Potential::Zero)?;
    let params = &ctx.scenario.params;
    let dim = domain.dim();
    let mut worst = 0.0_f64;
    let mut witness = String::from("no samples");
    for _ in 0..samples {
        let x = rand_point(rng, dim);
        let y = rand_point(rng, dim);
        let t = rng.gen_range(0.1..1.0);
        let a = fundamental_solution(&free, x, y, t, params)?.value;
        let d = geom::norm(domain.displacement(x, y));
        let err = (a - d * d / (2.0 * t)).abs();
        if err > worst {
            worst = err;
            witness = format!("x={} y={} t={t:.3}", fmt_point(x, dim), fmt_point(y, dim));
        }
    }
    Ok(InvariantRow::upper(
        "free-kernel-closed-form",
        "action::fundamental_solution",
        worst,
        0.0,
        1e-6,
        witness,
    ))
}

/// `W₁(μ,ν) ≤ W₁(μ,ρ) + W₁(ρ,ν)` on random triples; worst = smallest slack.
fn transport_triangle(
    ctx: &mut Context<'_>,
    rng: &mut ChaCha8Rng,
    samples: usize,
) -> Result<InvariantRow, Error> {
    let domain = ctx.scenario.model.domain();
    let mut worst = f64::INFINITY;
    let mut witness = String::from("no samples");
    for k in 0..samples {
        let mu = rand_measure(rng, domain, 6);
        let nu = rand_measure(rng, domain, 6);
        let rho = rand_measure(rng, domain, 6);
        let slack =
            wasserstein(1, &mu, &rho)? + wasserstein(1, &rho, &nu)? - wasserstein(1, &mu, &nu)?;
        if slack < worst {
            worst = slack;
            witness = format!("triple {k}: slack {slack:.3e}");
        }
    }
    Ok(InvariantRow::lower(
        "transport-triangle",
        "measure::wasserstein",
        worst,
        0.0,
        1e-9,
        witness,
    ))
}

/// `W_p(δ_x, δ_y) = d(x,y)` for p ∈ {1, 2}.
fn dirac_distances(
    ctx: &mut Context<'_>,
    rng: &mut ChaCha8Rng,
    samples: usize,
) -> Result<InvariantRow, Error> {
    let domain = ctx.scenario.model.domain().clone();
    let dim = domain.dim();
    let mut worst = 0.0_f64;
    let mut witness = String::from("no samples");
    for _ in 0..samples {
        let x = rand_point(rng, dim);
        let y = rand_point(rng, dim);
        let dx = DiscreteMeasure::dirac(domain.clone(), x)?;
        let dy = DiscreteMeasure::dirac(domain.clone(), y)?;
        let d = geom::norm(domain.displacement(x, y));
        for p in [1, 2] {
            let err = (wasserstein(p, &dx, &dy)? - d).abs();
            if err > worst {
                worst = err;
                witness = format!("x={} y={} p={p}", fmt_point(x, dim), fmt_point(y, dim));
            }
        }
    }
    Ok(InvariantRow::upper(
        "dirac-distances",
        "measure::wasserstein",
        worst,
        0.0,
        1e-12,
        witness,
    ))
}

/// Displacement interpolation moves at constant speed:
/// `W₂(μ, μ_λ) = λ·W₂(μ,ν)`.
fn geodesic_speed(
    ctx: &mut Context<'_>,
    rng: &mut ChaCha8Rng,
    samples: usize,
) -> Result<InvariantRow, Error> {
    let domain = ctx.scenario.model.domain();
    let mut worst = 0.0_f64;
    let mut witness = String::from("no samples");
    for k in 0..samples {
        let mu = rand_measure(rng, domain, 5);
        let nu = rand_measure(rng, domain, 5);
        let (plan, _) = optimal_plan(2, &mu, &nu)?;
        let w = wasserstein(2, &mu, &nu)?;
        for lambda in [0.25, 0.5, 0.75] {
            let mid = geodesic_interpolate(&plan, lambda)?;
            let err = (wasserstein(2, &mu, &mid.measure)? - lambda * w).abs();
            if err > worst {
                worst = err;
                witness = format!("pair {k} lambda {lambda}: err {err:.3e}");
            }
        }
    }
    Ok(InvariantRow::upper(
        "geodesic-constant-speed",
        "measure::geodesic_interpolate",
        worst,
        0.0,
        1e-8,
        witness,
    ))
}

/// Gluing two plans along their shared source preserves all three measures
/// and projects back to couplings of the originals.
fn glue_projections(
    ctx: &mut Context<'_>,
    rng: &mut ChaCha8Rng,
    samples: usize,
) -> Result<InvariantRow, Error> {
    let domain = ctx.scenario.model.domain();
    let mut worst = 0.0_f64;
    let mut witness = String::from("no samples");
    for k in 0..samples {
        let mu = rand_measure(rng, domain, 5);
        let nu = rand_measure(rng, domain, 5);
        let rho = rand_measure(rng, domain, 5);
        let (gamma, _) = optimal_plan(1, &mu, &nu)?;
        let (gamma_p, _) = optimal_plan(1, &mu, &rho)?;
        let three = glue(&gamma, &gamma_p)?;
        let mut err = 0.0_f64;
        for (slot, original) in [(0, &mu), (1, &nu), (2, &rho)] {
            let m = three.marginal(slot);
            for (a, b) in m.atoms().iter().zip(original.atoms()) {
                err = err.max((a.w - b.w).abs()).max(geom::norm(geom::sub(a.x, b.x)));
            }
        }
        // Projecting onto the outer pair must reproduce a coupling of the
        // original marginals with the original masses.
        let projected = three.project(0, 2)?;
        let total: f64 = projected.entries().iter().map(|e| e.mass).sum();
        err = err.max((total - 1.0).abs());
        if err > worst {
            worst = err;
            witness = format!("triple {k}: defect {err:.3e}");
        }
    }
    Ok(InvariantRow::upper(
        "glue-projections",
        "measure::glue",
        worst,
        0.0,
        1e-12,
        witness,
    ))
}

/// Lattice order of the composite semigroups: `T_t^-T_t^+φ ≥ φ` and
/// `T_t^+T_t^-φ ≤ φ` at every node.
fn semigroup_order(
    ctx: &mut Context<'_>,
    rng: &mut ChaCha8Rng,
    samples: usize,
) -> Result<InvariantRow, Error> {
    let grid = ctx.scenario.grid.clone();
    let dim = grid.domain().dim();
    let mut worst = 0.0_f64;
    let mut witness = String::from("no samples");
    for k in 0..samples {
        let (a, b, c) = (
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.15..0.15),
        );
        let phi = wklab::field::ScalarField::from_fn(grid.clone(), |p| {
            let tau = std::f64::consts::TAU;
            let mut v = a * (tau * p[0]).sin() + b * (tau * p[0]).cos() + c * (2.0 * tau * p[0]).sin();
            if dim == 2 {
                v += b * (tau * p[1]).sin() - a * (tau * p[1]).cos();
            }
            v
        })?;
        let t = if k % 2 == 0 { 0.1 } else { 0.3 };
        let up = t_minus(&ctx.cache, &t_plus(&ctx.cache, &phi, t)?, t)?;
        let down = t_plus(&ctx.cache, &t_minus(&ctx.cache, &phi, t)?, t)?;
        for (idx, &v) in phi.values().iter().enumerate() {
            let viol = (v - up.values()[idx]).max(down.values()[idx] - v);
            if viol > worst {
                worst = viol;
                witness = format!("field {k} t {t} node {idx}");
            }
        }
    }
    Ok(InvariantRow::upper(
        "semigroup-composite-order",
        "hopf_lax::t_minus/t_plus",
        worst,
        0.0,
        1e-12,
        witness,
    ))
}

/// The weak KAM solution is a fixed point at measure level:
/// `P_t^-u(μ) + c₀t = u(μ)`.
fn measure_fixed_point(
    ctx: &mut Context<'_>,
    rng: &mut ChaCha8Rng,
    samples: usize,
) -> Result<InvariantRow, Error> {
    ctx.weak_kam()?;
    let domain = ctx.scenario.model.domain().clone();
    let mut worst = 0.0_f64;
    let mut witness = String::from("no samples");
    for k in 0..samples {
        let mu = rand_measure(rng, &domain, 6);
        let t = if k % 2 == 0 { 0.1 } else { 0.5 };
        let u = ctx.solved_u();
        let defect = (p_minus(&ctx.cache, &u.u, &mu, t)? + u.c0 * t - potential_energy(&u.u, &mu))
            .abs();
        if defect > worst {
            worst = defect;
            witness = format!("measure {k} ({} atoms) t {t}", mu.len());
        }
    }
    Ok(InvariantRow::upper(
        "weak-kam-measure-fixed-point",
        "wasserstein_hj::p_minus",
        worst,
        0.0,
        5e-3,
        witness,
    ))
}

/// The three cut-time formulas agree on random measures; worst is the
/// spread over the per-instance agreement tolerance.
fn cut_agreement(
    ctx: &mut Context<'_>,
    rng: &mut ChaCha8Rng,
    samples: usize,
) -> Result<InvariantRow, Error> {
    let (_, _) = ctx.cut_probed()?;
    let domain = ctx.scenario.model.domain().clone();
    let mut worst = 0.0_f64;
    let mut witness = String::from("no samples");
    for k in 0..samples {
        let mu = rand_measure(rng, &domain, 4);
        let (u, cut) = (ctx.solved_u(), ctx.solved_cut());
        let report = measure_cut_time(&ctx.cache, u, &mu, &cut.t_grid, cut.tol_b)?;
        let finite: Vec<f64> =
            report.by_formula.iter().copied().filter(|v| v.is_finite()).collect();
        let spread = if finite.len() < 2 {
            0.0
        } else {
            finite.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - finite.iter().copied().fold(f64::INFINITY, f64::min)
        };
        let ratio = spread / report.agreement_tol;
        if ratio > worst {
            worst = ratio;
            witness = format!("measure {k}: spread {spread:.3e} of tol {:.3e}", report.agreement_tol);
        }
    }
    Ok(InvariantRow::upper(
        "cut-formula-agreement",
        "wasserstein_hj::measure_cut_time",
        worst,
        1.0,
        0.0,
        witness,
    ))
}

/// On a Dirac the measure cut time IS the pointwise cut time of its atom.
fn cut_dirac_witness(
    ctx: &mut Context<'_>,
    rng: &mut ChaCha8Rng,
    samples: usize,
) -> Result<InvariantRow, Error> {
    let (_, _) = ctx.cut_probed()?;
    let domain = ctx.scenario.model.domain().clone();
    let n = ctx.scenario.grid.node_count();
    let mut worst = 0.0_f64;
    let mut witness = String::from("no samples");
    for _ in 0..samples {
        let node = rng.gen_range(0..n);
        let x = ctx.scenario.grid.node_pos(node);
        let dirac = DiscreteMeasure::dirac(domain.clone(), x)?;
        let (u, cut) = (ctx.solved_u(), ctx.solved_cut());
        let report = measure_cut_time(&ctx.cache, u, &dirac, &cut.t_grid, cut.tol_b)?;
        let (t_u, w0) = (report.t_u, report.witnesses[0]);
        let err = if t_u == w0 { 0.0 } else { (t_u - w0).abs() };
        if err > worst {
            worst = err;
            witness = format!("node {node}: T_u {t_u} vs tau {w0}");
        }
    }
    Ok(InvariantRow::upper(
        "cut-dirac-witness",
        "wasserstein_hj::measure_cut_time",
        worst,
        0.0,
        0.0,
        witness,
    ))
}

/// The Hamilton–Jacobi defect of a dynamical cost is never positive.
fn hj_slack_sign(
    ctx: &mut Context<'_>,
    rng: &mut ChaCha8Rng,
    samples: usize,
) -> Result<InvariantRow, Error> {
    let model = &ctx.scenario.model;
    let params = &ctx.scenario.params;
    let domain = model.domain();
    let mut worst = f64::NEG_INFINITY;
    let mut witness = String::from("no samples");
    for k in 0..samples {
        let mu = rand_measure(rng, domain, 4);
        let nu = rand_measure(rng, domain, 4);
        let t = rng.gen_range(0.2..0.6);
        let result = dynamical_cost(model, &mu, &nu, t, params)?;
        let sd = cost_superdifferentials(model, &result);
        let slack = hj_slack(model, &result, &sd);
        if slack > worst {
            worst = slack;
            witness = format!("pair {k} t {t:.3}: slack {slack:.3e}");
        }
    }
    Ok(InvariantRow::upper(
        "hj-slack-sign",
        "cost::hj_slack",
        worst,
        0.0,
        1e-9,
        witness,
    ))
}

/// A short singular flow conserves mass at every sample.  (The step-exact
/// drift identity is asserted inside the library on every step.)
fn flow_mass_transport(ctx: &mut Context<'_>) -> Result<InvariantRow, Error> {
    ctx.weak_kam()?;
    let grid = ctx.scenario.grid.clone();
    let node = grid.nearest_node([0.3, if grid.domain().dim() == 2 { 0.3 } else { 0.0 }]);
    let mu0 = DiscreteMeasure::dirac(grid.domain().clone(), grid.node_pos(node))?;
    let u = ctx.solved_u();
    let result = wklab::flow::minimizing_movement(&ctx.cache, &u.u, &mu0, 0.1, 0.05)?;
    let mut worst = 0.0_f64;
    let mut witness = String::from("mass exact");
    for (j, _) in result.curve.times().iter().enumerate() {
        let m = result.curve.measure_at(j)?;
        let defect = (m.atoms().iter().map(|a| a.w).sum::<f64>() - 1.0).abs();
        if defect > worst {
            worst = defect;
            witness = format!("sample {j}: mass defect {defect:.3e}");
        }
    }
    Ok(InvariantRow::upper(
        "flow-mass-transport",
        "flow::minimizing_movement",
        worst,
        0.0,
        1e-12,
        witness,
    ))
}

/// Scans the solved field for non-finite values on a scratch copy; the
/// `corrupt-node` hook injects NaN there to prove the scan bites.
fn field_sanity(ctx: &mut Context<'_>, opts: &InvariantsOpts) -> Result<InvariantRow, Error> {
    let u = ctx.weak_kam()?;
    let mut values = u.u.values().to_vec();
    if let Some(k) = opts.corrupt_node {
        values[k] = f64::NAN;
    }
    let bad: Vec<usize> =
        values.iter().enumerate().filter(|(_, v)| !v.is_finite()).map(|(i, _)| i).collect();
    let witness = match bad.first() {
        Some(&k) => format!("node {k} = {}", values[k]),
        None => format!("all {} nodes finite", values.len()),
    };
    Ok(InvariantRow::upper(
        "field-sanity",
        "hopf_lax::weak_kam_solve",
        bad.len() as f64,
        0.0,
        0.0,
        witness,
    ))
}
