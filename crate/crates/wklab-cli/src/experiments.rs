//! Experiment runners.
//!
//! Each scenario experiment maps to one runner that drives the library,
//! asserts the module-level guarantees as [`Metric`]s, and writes its
//! artifacts.  Runners share a [`Context`] that caches the expensive state
//! — the action kernel, the weak KAM solution, the cut-locus data — so a
//! scenario pays for each solve once no matter how many experiments lean on
//! it.  A library error aborts only the experiment that hit it; the
//! structured error string lands in the report and the run continues.

use std::path::Path;

use wklab::cost::{
    cost_report_json, cost_superdifferentials, displacement_interpolation, dynamical_cost,
    hj_slack, per_pair_csv,
};
use wklab::error::Error;
use wklab::field::ScalarField;
use wklab::flow::{
    continuity_residual, energy_ledger, invariance_check, minimizing_movement,
    refined_minimizing_movement, refinement_rate, trajectories_csv, SingularFlowResult,
    TestFunction,
};
use wklab::geom::norm;
use wklab::action::ActionCache;
use wklab::hopf_lax::{cut_data, grid_cache, weak_kam_solve, CutData, WeakKamSolution};
use wklab::measure::potential_energy;
use wklab::wasserstein_hj::{
    argmax_measure, classify_measure, default_tol_b, measure_cut_time, p_minus, p_plus,
};

use crate::config::{
    CostOpts, CutReportOpts, Experiment, FlowOpts, InvariantsOpts, PropagateOpts, Scenario,
    WeakKamOpts,
};
use crate::invariants;
use crate::plots;
use crate::report::{ExperimentReport, Metric};

/// Fixed-point iteration defaults used when an experiment needs the weak
/// KAM solution but the scenario never ran an explicit `weak-kam` step.
const DEFAULT_DELTA: f64 = 0.1;
const DEFAULT_TOL: f64 = 1e-6;

/// Default cut-probe grid for the same situation.
const DEFAULT_PROBES: CutReportOpts = CutReportOpts {
    measure: None,
    probe_start: 0.025,
    probe_step: 0.025,
    probe_count: 6,
};

/// Shared state across a scenario's experiments.
pub struct Context<'a> {
    pub scenario: &'a Scenario,
    pub cache: ActionCache,
    weak_kam: Option<WeakKamSolution>,
    cut: Option<CutData>,
}

impl<'a> Context<'a> {
    pub fn new(scenario: &'a Scenario) -> Self {
        let cache = grid_cache(scenario.model.clone(), &scenario.grid, scenario.params.clone());
        Context { scenario, cache, weak_kam: None, cut: None }
    }

    /// Solves the stationary equation with explicit parameters, replacing
    /// any cached solution (and invalidating cut data derived from it).
    fn solve_weak_kam(&mut self, delta: f64, tol: f64) -> Result<&WeakKamSolution, Error> {
        let u = weak_kam_solve(&self.cache, &self.scenario.grid, delta, tol)?;
        self.weak_kam = Some(u);
        self.cut = None;
        Ok(self.weak_kam.as_ref().unwrap())
    }

    fn ensure_weak_kam(&mut self) -> Result<&WeakKamSolution, Error> {
        if self.weak_kam.is_none() {
            self.solve_weak_kam(DEFAULT_DELTA, DEFAULT_TOL)?;
        }
        Ok(self.weak_kam.as_ref().unwrap())
    }

    /// Rebuilds cut data on an explicit probe grid.
    fn probe_cut(&mut self, t_grid: &[f64]) -> Result<&CutData, Error> {
        self.ensure_weak_kam()?;
        let u = self.weak_kam.as_ref().unwrap();
        let tol_b = default_tol_b(u, t_grid[0]);
        let cut = cut_data(&self.cache, u, t_grid, tol_b)?;
        self.cut = Some(cut);
        Ok(self.cut.as_ref().unwrap())
    }

    fn ensure_cut(&mut self) -> Result<(), Error> {
        if self.cut.is_none() {
            self.probe_cut(&DEFAULT_PROBES.t_grid())?;
        }
        Ok(())
    }

    pub fn weak_kam(&mut self) -> Result<&WeakKamSolution, Error> {
        self.ensure_weak_kam()
    }

    /// The weak KAM solution together with cut data on the active probe
    /// grid, building both on demand.
    pub fn cut_probed(&mut self) -> Result<(&WeakKamSolution, &CutData), Error> {
        self.ensure_cut()?;
        Ok((self.weak_kam.as_ref().unwrap(), self.cut.as_ref().unwrap()))
    }

    /// Immutable view of the already-built solution; call [`Self::weak_kam`]
    /// or [`Self::cut_probed`] first.
    pub fn solved_u(&self) -> &WeakKamSolution {
        self.weak_kam.as_ref().expect("weak KAM solution built")
    }

    /// Immutable view of the already-built cut data; call
    /// [`Self::cut_probed`] first.
    pub fn solved_cut(&self) -> &CutData {
        self.cut.as_ref().expect("cut data built")
    }
}

/// What a runner produces before being wrapped into an [`ExperimentReport`].
struct Outcome {
    label: String,
    metrics: Vec<Metric>,
}

enum RunError {
    Module(Error),
    Io(std::io::Error),
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        RunError::Module(e)
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e)
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Module(e) => write!(f, "{e}"),
            RunError::Io(e) => write!(f, "artifact write failed: {e}"),
        }
    }
}

type RResult<T> = std::result::Result<T, RunError>;

/// Sink for artifact files; honors the scenario's format switches.
struct Artifacts<'a> {
    out_dir: &'a Path,
    csv: bool,
    svg: bool,
    written: Vec<String>,
}

impl<'a> Artifacts<'a> {
    fn new(scenario: &Scenario, out_dir: &'a Path) -> Self {
        Artifacts { out_dir, csv: scenario.write_csv, svg: scenario.write_svg, written: Vec::new() }
    }

    fn csv(&mut self, name: &str, content: &str) -> std::io::Result<()> {
        if self.csv {
            std::fs::write(self.out_dir.join(name), content)?;
            self.written.push(name.to_owned());
        }
        Ok(())
    }

    fn svg(&mut self, name: &str, content: &str) -> std::io::Result<()> {
        if self.svg {
            std::fs::write(self.out_dir.join(name), content)?;
            self.written.push(name.to_owned());
        }
        Ok(())
    }

    fn json(&mut self, name: &str, content: &str) -> std::io::Result<()> {
        std::fs::write(self.out_dir.join(name), content)?;
        self.written.push(name.to_owned());
        Ok(())
    }
}

/// CSV dump of a scalar field, one node per row.
fn field_csv(field: &ScalarField) -> String {
    let grid = field.grid();
    let two_d = grid.domain().dim() == 2;
    let mut out = String::from(if two_d { "x0,x1,value\n" } else { "x,value\n" });
    for (idx, &v) in field.values().iter().enumerate() {
        let p = grid.node_pos(idx);
        if two_d {
            out.push_str(&format!("{},{},{v}\n", p[0], p[1]));
        } else {
            out.push_str(&format!("{},{v}\n", p[0]));
        }
    }
    out
}

/// Runs one experiment, converting any library or I/O error into a failed
/// report entry with the structured error preserved.
pub fn run_experiment(
    ctx: &mut Context<'_>,
    idx: usize,
    experiment: &Experiment,
    out_dir: &Path,
) -> ExperimentReport {
    let kind = experiment.kind();
    let mut artifacts = Artifacts::new(ctx.scenario, out_dir);
    let outcome = match experiment {
        Experiment::WeakKam(o) => run_weak_kam(ctx, o, idx, &mut artifacts),
        Experiment::CutReport(o) => run_cut_report(ctx, o, idx, &mut artifacts),
        Experiment::Cost(o) => run_cost(ctx, o, idx, &mut artifacts),
        Experiment::Propagate(o) => run_propagate(ctx, o, idx, &mut artifacts),
        Experiment::Flow(o) => run_flow(ctx, o, idx, &mut artifacts),
        Experiment::Invariants(o) => run_invariants(ctx, o),
    };
    match outcome {
        Ok(Outcome { label, metrics }) => {
            ExperimentReport::completed(kind, label, metrics, artifacts.written)
        }
        Err(e) => ExperimentReport::failed(kind, format!("experiment {idx}"), e.to_string()),
    }
}

fn run_weak_kam(
    ctx: &mut Context<'_>,
    opts: &WeakKamOpts,
    idx: usize,
    artifacts: &mut Artifacts<'_>,
) -> RResult<Outcome> {
    let v_max = ctx.scenario.model.v_max();
    // The free model's critical value is exactly zero and the solver hits it
    // to rounding; a genuine potential carries quadrature error.
    let c0_tol = if v_max == 0.0 { 1e-6 } else { 1e-3 };
    let u = ctx.solve_weak_kam(opts.delta, opts.tol)?;
    let op = "hopf_lax::weak_kam_solve";
    let metrics = vec![
        Metric::close("c0", op, u.c0, v_max, c0_tol),
        Metric::at_most("fixed-point-residual-1x", op, u.residual_multi[0], 0.0, 1e-3),
        Metric::at_most("fixed-point-residual-2x", op, u.residual_multi[1], 0.0, 1e-3),
        Metric::at_most("fixed-point-residual-4x", op, u.residual_multi[2], 0.0, 1e-3),
        Metric::at_most("iteration-cap-hit", op, if u.converged { 0.0 } else { 1.0 }, 0.0, 0.0),
    ];
    let label = format!(
        "delta {} -> c0 {:.6}, residual {:.3e}",
        opts.delta, u.c0, u.residual
    );
    artifacts.csv(&format!("weak_kam_{idx}_u.csv"), &field_csv(&u.u))?;
    artifacts.svg(
        &format!("weak_kam_{idx}_u.svg"),
        &plots::field_svg(&u.u, "weak KAM solution u"),
    )?;
    Ok(Outcome { label, metrics })
}

fn run_cut_report(
    ctx: &mut Context<'_>,
    opts: &CutReportOpts,
    idx: usize,
    artifacts: &mut Artifacts<'_>,
) -> RResult<Outcome> {
    let t_grid = opts.t_grid();
    ctx.probe_cut(&t_grid)?;
    let u = ctx.weak_kam.as_ref().unwrap();
    let cut = ctx.cut.as_ref().unwrap();
    let summary = cut.summary(u);
    let grid = &ctx.scenario.grid;
    let op = "hopf_lax::cut_data";

    // Singular nodes break their calibration immediately: on the probed
    // grid every flagged node must carry cut time zero.
    let worst_sing_tau = cut
        .sing_mask
        .iter()
        .zip(cut.tau.values())
        .filter(|(s, _)| **s)
        .map(|(_, &tau)| tau)
        .fold(0.0_f64, f64::max);
    let mut metrics = vec![
        Metric::at_most("singular-nodes", op, summary.sing_nodes as f64, grid.node_count() as f64, 0.0),
        Metric::at_most("singular-nodes-are-cut", op, worst_sing_tau, 0.0, 0.0),
        Metric::at_least("tau-min", op, summary.tau_min, 0.0, 0.0),
    ];

    let mut label = format!(
        "probes [{}, {}] -> {} singular, {} Aubry nodes",
        t_grid[0],
        t_grid[t_grid.len() - 1],
        summary.sing_nodes,
        summary.aubry_nodes
    );

    if let Some(name) = &opts.measure {
        let mu = ctx.scenario.measure(name);
        let report = measure_cut_time(&ctx.cache, u, mu, &cut.t_grid, cut.tol_b)?;
        let finite: Vec<f64> = report.by_formula.iter().copied().filter(|v| v.is_finite()).collect();
        let spread = match finite.as_slice() {
            [] | [_] => 0.0,
            vs => {
                let lo = vs.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                hi - lo
            }
        };
        let mct = "wasserstein_hj::measure_cut_time";
        metrics.push(Metric::at_most("formula-spread", mct, spread, 0.0, report.agreement_tol));
        if mu.len() == 1 {
            metrics.push(Metric::close(
                "dirac-witness-match",
                mct,
                report.t_u,
                report.witnesses[0],
                0.0,
            ));
        }
        let classification = classify_measure(&ctx.cache, u, cut, mu)?;
        metrics.push(Metric::at_most(
            "singular-implies-cut",
            "wasserstein_hj::classify_measure",
            if classification.singular && !classification.cut { 1.0 } else { 0.0 },
            0.0,
            0.0,
        ));
        label = format!(
            "{label}; \"{name}\" is {} (T_u = {})",
            classification.label(),
            report.t_u
        );
    }

    let mut csv = String::from(if grid.domain().dim() == 2 {
        "x0,x1,tau,aubry,singular\n"
    } else {
        "x,tau,aubry,singular\n"
    });
    for idx_node in 0..grid.node_count() {
        let p = grid.node_pos(idx_node);
        let tau = cut.tau.values()[idx_node];
        let row = if grid.domain().dim() == 2 {
            format!(
                "{},{},{tau},{},{}\n",
                p[0], p[1], cut.aubry_mask[idx_node] as u8, cut.sing_mask[idx_node] as u8
            )
        } else {
            format!(
                "{},{tau},{},{}\n",
                p[0], cut.aubry_mask[idx_node] as u8, cut.sing_mask[idx_node] as u8
            )
        };
        csv.push_str(&row);
    }
    artifacts.csv(&format!("cut_{idx}_tau.csv"), &csv)?;
    artifacts.svg(&format!("cut_{idx}_tau.svg"), &plots::field_svg(&cut.tau, "cut time tau_u"))?;
    Ok(Outcome { label, metrics })
}

fn run_cost(
    ctx: &mut Context<'_>,
    opts: &CostOpts,
    idx: usize,
    artifacts: &mut Artifacts<'_>,
) -> RResult<Outcome> {
    let scenario = ctx.scenario;
    let mu = scenario.measure(&opts.source);
    let nu = scenario.measure(&opts.target);
    let result = dynamical_cost(&scenario.model, mu, nu, opts.t, &scenario.params)?;
    let sd = cost_superdifferentials(&scenario.model, &result);
    let slack = hj_slack(&scenario.model, &result, &sd);

    // The Lagrangian is bounded below by −sup V, so any coupling pays at
    // least −sup V per unit time.
    let floor = -scenario.model.v_max() * opts.t;
    let marginal_defect = {
        let plan = result.plan();
        let mut row = vec![0.0; plan.source().len()];
        let mut col = vec![0.0; plan.target().len()];
        for e in plan.entries() {
            row[e.i] += e.mass;
            col[e.j] += e.mass;
        }
        let r = row
            .iter()
            .zip(plan.source().atoms())
            .map(|(s, a)| (s - a.w).abs())
            .fold(0.0_f64, f64::max);
        let c = col
            .iter()
            .zip(plan.target().atoms())
            .map(|(s, a)| (s - a.w).abs())
            .fold(0.0_f64, f64::max);
        r.max(c)
    };
    let midpoint = displacement_interpolation(&result, 0.5)?;
    let mid_mass: f64 = midpoint.atoms().iter().map(|a| a.w).sum();

    let op = "cost::dynamical_cost";
    let metrics = vec![
        Metric::at_least("transport-cost-floor", op, result.value(), floor, 1e-9),
        Metric::at_most("marginal-defect", "measure::TransportPlan::new", marginal_defect, 0.0, 1e-10),
        Metric::at_least(
            "dual-certificate",
            "measure::optimal_plan",
            result.certificate().min_reduced_cost,
            0.0,
            1e-9,
        ),
        Metric::at_most("hj-slack", "cost::hj_slack", slack, 0.0, 1e-9),
        Metric::close("midpoint-mass", "cost::displacement_interpolation", mid_mass, 1.0, 1e-12),
    ];
    let label = format!(
        "\"{}\" -> \"{}\" at t {} costs {:.6}",
        opts.source, opts.target, opts.t, result.value()
    );

    let mut plan_csv = String::from("i,j,mass\n");
    for e in result.plan().entries() {
        plan_csv.push_str(&format!("{},{},{}\n", e.i, e.j, e.mass));
    }
    artifacts.csv(&format!("cost_{idx}_plan.csv"), &plan_csv)?;
    artifacts.csv(&format!("cost_{idx}_pairs.csv"), &per_pair_csv(&result))?;
    artifacts.json(&format!("cost_{idx}.json"), &cost_report_json(&result, &sd, slack))?;
    Ok(Outcome { label, metrics })
}

fn run_propagate(
    ctx: &mut Context<'_>,
    opts: &PropagateOpts,
    idx: usize,
    artifacts: &mut Artifacts<'_>,
) -> RResult<Outcome> {
    ctx.ensure_cut()?;
    let u = ctx.weak_kam.as_ref().unwrap();
    let cut = ctx.cut.as_ref().unwrap();
    let mu = ctx.scenario.measure(&opts.measure);
    let u_mu = potential_energy(&u.u, mu);
    let start = measure_cut_time(&ctx.cache, u, mu, &cut.t_grid, cut.tol_b)?;
    let is_cut = start.t_u == 0.0;

    let mut metrics = Vec::new();
    for &t in &opts.times {
        let minus = p_minus(&ctx.cache, &u.u, mu, t)?;
        let plus = p_plus(&ctx.cache, &u.u, mu, t)?;
        // u is a fixed point: P_t^- u + c0 t returns the potential energy.
        metrics.push(Metric::at_most(
            &format!("fixed-point-defect@{t}"),
            "wasserstein_hj::p_minus",
            (minus + u.c0 * t - u_mu).abs(),
            0.0,
            5e-3,
        ));
        // Inf- before sup-convolution: P^- never exceeds P^+ on any measure.
        metrics.push(Metric::at_most(
            &format!("operator-order@{t}"),
            "wasserstein_hj::p_plus",
            minus - plus,
            0.0,
            1e-9,
        ));
        let drift = argmax_measure(&ctx.cache, &u.u, mu, t)?;
        let classification = classify_measure(&ctx.cache, u, cut, &drift)?;
        if is_cut {
            // Cut measures drift into the singular set and stay there.
            metrics.push(Metric::at_most(
                &format!("drift-stays-singular@{t}"),
                "wasserstein_hj::classify_measure",
                if classification.singular { 0.0 } else { 1.0 },
                0.0,
                0.0,
            ));
        }
        artifacts.csv(&format!("propagate_{idx}_drift_t{t}.csv"), &drift.to_csv_string())?;
    }
    let label = format!(
        "\"{}\" ({}, T_u = {}) over {} horizons",
        opts.measure,
        if is_cut { "cut" } else { "uncut" },
        start.t_u,
        opts.times.len()
    );
    Ok(Outcome { label, metrics })
}

fn run_flow(
    ctx: &mut Context<'_>,
    opts: &FlowOpts,
    idx: usize,
    artifacts: &mut Artifacts<'_>,
) -> RResult<Outcome> {
    ctx.ensure_cut()?;
    let u = ctx.weak_kam.as_ref().unwrap();
    let cut = ctx.cut.as_ref().unwrap();
    let mu0 = ctx.scenario.measure(&opts.measure);

    let result: SingularFlowResult = if opts.levels == 0 {
        minimizing_movement(&ctx.cache, &u.u, mu0, opts.t_final, opts.dt)?
    } else {
        refined_minimizing_movement(&ctx.cache, &u.u, mu0, opts.t_final, opts.dt, opts.levels)?
    };

    let functions: &[TestFunction] = if ctx.scenario.grid.domain().dim() == 2 {
        &[
            TestFunction::One,
            TestFunction::SinX,
            TestFunction::CosX,
            TestFunction::SinY,
            TestFunction::CosY,
        ]
    } else {
        &wklab::flow::DEFAULT_TEST_FUNCTIONS
    };
    let continuity = continuity_residual(&ctx.cache, &result, functions)?;
    let invariance = invariance_check(&ctx.cache, u, cut, &result)?;
    let ledger = energy_ledger(&ctx.cache, &result)?;

    // Flow velocities are superdifferential slopes of the driving field, so
    // the field's own Lipschitz bound caps the particle speed.
    let kappa1 = (0..ctx.scenario.grid.node_count())
        .map(|i| norm(u.u.node_gradient(i)))
        .fold(0.0_f64, f64::max);
    let speed_bound = kappa1 + 0.5;

    let mut metrics = vec![
        Metric::at_most(
            "continuity-residual",
            "flow::continuity_residual",
            continuity.max_residual,
            0.0,
            continuity.tolerance,
        ),
        Metric::at_most(
            "flagged-samples",
            "flow::continuity_residual",
            continuity.flagged_samples as f64,
            0.0,
            0.0,
        ),
        Metric::at_most(
            "invariance-skipped",
            "flow::invariance_check",
            if invariance.checked { 0.0 } else { 1.0 },
            0.0,
            0.0,
        ),
        Metric::at_most(
            "invariance-violations",
            "flow::invariance_check",
            invariance.violations.len() as f64,
            0.0,
            0.0,
        ),
        Metric::at_most("energy-defect", "flow::energy_ledger", ledger.defect.abs(), 0.0, 5e-3),
        Metric::at_most(
            "max-particle-speed",
            "flow::MeasureCurve::max_speed",
            result.curve.max_speed(),
            speed_bound,
            0.0,
        ),
    ];
    if opts.levels > 0 {
        let rate = refinement_rate(&result)?;
        metrics.push(Metric::at_most(
            "refinement-rate",
            "flow::refinement_rate",
            rate.fitted_c,
            2.0 * speed_bound,
            0.0,
        ));
    }

    let label = format!(
        "\"{}\" over [0, {}] at dt {} ({} particles, max speed {:.3})",
        opts.measure,
        opts.t_final,
        result.curve.dt(),
        result.curve.particles().len(),
        result.curve.max_speed()
    );

    artifacts.csv(&format!("flow_{idx}_trajectories.csv"), &trajectories_csv(&result.curve))?;
    let mut ledger_csv = String::from("t,hamiltonian_integral,transport_cost\n");
    for step in &ledger.per_step {
        ledger_csv.push_str(&format!(
            "{},{},{}\n",
            step.t, step.hamiltonian_integral, step.transport_cost
        ));
    }
    artifacts.csv(&format!("flow_{idx}_ledger.csv"), &ledger_csv)?;
    artifacts.svg(
        &format!("flow_{idx}_trajectories.svg"),
        &plots::trajectories_svg(&result.curve, "singular flow trajectories"),
    )?;
    Ok(Outcome { label, metrics })
}

fn run_invariants(ctx: &mut Context<'_>, opts: &InvariantsOpts) -> RResult<Outcome> {
    let rows = invariants::battery(ctx, opts)?;
    let failures = rows.iter().filter(|r| !r.pass).count();
    let label = format!("{} properties, {} samples each, {failures} failing", rows.len(), opts.samples);
    let metrics = rows.into_iter().map(|r| r.into_metric()).collect();
    Ok(Outcome { label, metrics })
}
