//! Declarative scenario configs.
//!
//! A scenario is a single TOML file naming a model, a grid, a set of
//! measures, and an ordered experiment list.  Everything is schema-checked
//! before any computation starts: unknown keys are rejected, every
//! generator must carry an explicit seed, and every cross-reference (an
//! experiment naming a measure) must resolve.  Config-stage failures map to
//! exit code 2; they never produce a report.
//!
//! The exact grammar is documented in [`SCHEMA`], printed verbatim by the
//! `print-schema` subcommand.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use wklab::action::ActionParams;
use wklab::dynamics::{Potential, TonelliModel};
use wklab::field::Grid;
use wklab::geom::{Domain, Vec2};
use wklab::measure::DiscreteMeasure;

/// A config-stage failure: the scenario never started computing.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

type CResult<T> = std::result::Result<T, ConfigError>;

fn fail<T>(msg: impl Into<String>) -> CResult<T> {
    Err(ConfigError(msg.into()))
}

// ---------------------------------------------------------------------------
// Raw schema: what the TOML file literally contains.
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct RawConfig {
    model: RawModel,
    grid: RawGrid,
    #[serde(default)]
    params: RawParams,
    #[serde(default)]
    measures: Vec<RawMeasure>,
    #[serde(default)]
    experiments: Vec<toml::Value>,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct RawModel {
    domain: String,
    potential: String,
    amplitude: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct RawGrid {
    n: usize,
    winding: Option<i32>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct RawParams {
    step_target: Option<f64>,
    min_intervals: Option<usize>,
    max_intervals: Option<usize>,
    grad_tol: Option<f64>,
    max_iterations: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct RawMeasure {
    name: String,
    atoms: Option<Vec<Vec<f64>>>,
    generator: Option<String>,
    count: Option<usize>,
    seed: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct RawOutput {
    directory: Option<String>,
    formats: Option<Vec<String>>,
}

// ---------------------------------------------------------------------------
// Experiments: one options struct per kind, dispatched on the `kind` key so
// that unknown option keys are still rejected per kind.
// ---------------------------------------------------------------------------

fn default_delta() -> f64 {
    0.1
}

fn default_solve_tol() -> f64 {
    1e-6
}

fn default_probe_start() -> f64 {
    0.025
}

fn default_probe_step() -> f64 {
    0.025
}

fn default_probe_count() -> usize {
    6
}

fn default_samples() -> usize {
    12
}

/// Options for `kind = "weak-kam"`: solve the stationary equation.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct WeakKamOpts {
    /// Fixed-point iteration step.
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Residual tolerance the iteration stops at.
    #[serde(default = "default_solve_tol")]
    pub tol: f64,
}

/// Options for `kind = "cut-report"`: map the cut locus, optionally probing
/// one named measure's cut time.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct CutReportOpts {
    /// Measure whose cut time is probed alongside the field-level report.
    pub measure: Option<String>,
    #[serde(default = "default_probe_start")]
    pub probe_start: f64,
    #[serde(default = "default_probe_step")]
    pub probe_step: f64,
    #[serde(default = "default_probe_count")]
    pub probe_count: usize,
}

impl CutReportOpts {
    pub fn t_grid(&self) -> Vec<f64> {
        (0..self.probe_count)
            .map(|k| self.probe_start + k as f64 * self.probe_step)
            .collect()
    }
}

/// Options for `kind = "cost"`: one dynamical transport problem.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct CostOpts {
    pub source: String,
    pub target: String,
    pub t: f64,
}

/// Options for `kind = "propagate"`: push a measure with the random
/// Lax-Oleinik operators at several horizons.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct PropagateOpts {
    pub measure: String,
    pub times: Vec<f64>,
}

/// Options for `kind = "flow"`: run the minimizing-movement singular flow
/// driven by the weak KAM solution.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FlowOpts {
    pub measure: String,
    pub t_final: f64,
    pub dt: f64,
    /// Extra halvings of `dt`; 0 runs a single resolution.
    #[serde(default)]
    pub levels: usize,
}

/// Options for `kind = "invariants"`: the cross-module property battery.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct InvariantsOpts {
    /// Random instances per probed property.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Fault-injection hook: overwrite this node of the solved field with
    /// NaN inside the battery's sanity scan, which must then fail naming it.
    pub corrupt_node: Option<usize>,
}

impl Default for InvariantsOpts {
    fn default() -> Self {
        InvariantsOpts { samples: default_samples(), corrupt_node: None }
    }
}

/// One entry of the scenario's experiment list.
#[derive(Clone, Debug)]
pub enum Experiment {
    WeakKam(WeakKamOpts),
    CutReport(CutReportOpts),
    Cost(CostOpts),
    Propagate(PropagateOpts),
    Flow(FlowOpts),
    Invariants(InvariantsOpts),
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::WeakKam(_) => "weak-kam",
            Experiment::CutReport(_) => "cut-report",
            Experiment::Cost(_) => "cost",
            Experiment::Propagate(_) => "propagate",
            Experiment::Flow(_) => "flow",
            Experiment::Invariants(_) => "invariants",
        }
    }
}

const EXPERIMENT_KINDS: &str = "weak-kam | cut-report | cost | propagate | flow | invariants";

fn parse_experiment(idx: usize, value: &toml::Value) -> CResult<Experiment> {
    let table = match value.as_table() {
        Some(t) => t,
        None => return fail(format!("experiments[{idx}]: expected a table")),
    };
    let kind = match table.get("kind").and_then(|v| v.as_str()) {
        Some(k) => k.to_owned(),
        None => {
            return fail(format!(
                "experiments[{idx}]: missing field `kind` (one of {EXPERIMENT_KINDS})"
            ))
        }
    };
    let mut rest = table.clone();
    rest.remove("kind");
    let rest = toml::Value::Table(rest);
    let ctx = |e: toml::de::Error| {
        ConfigError(format!("experiments[{idx}] (kind \"{kind}\"): {}", e.message()))
    };
    match kind.as_str() {
        "weak-kam" => Ok(Experiment::WeakKam(rest.try_into().map_err(ctx)?)),
        "cut-report" => Ok(Experiment::CutReport(rest.try_into().map_err(ctx)?)),
        "cost" => Ok(Experiment::Cost(rest.try_into().map_err(ctx)?)),
        "propagate" => Ok(Experiment::Propagate(rest.try_into().map_err(ctx)?)),
        "flow" => Ok(Experiment::Flow(rest.try_into().map_err(ctx)?)),
        "invariants" => Ok(Experiment::Invariants(rest.try_into().map_err(ctx)?)),
        other => fail(format!(
            "experiments[{idx}]: unknown kind \"{other}\" (expected {EXPERIMENT_KINDS})"
        )),
    }
}

// ---------------------------------------------------------------------------
// Resolved scenario: validated objects, ready to run.
// ---------------------------------------------------------------------------

/// Echo of the resolved configuration, embedded verbatim in every report so
/// a report is interpretable without the config that produced it.
#[derive(Clone, Debug, Serialize)]
pub struct ModelEcho {
    pub domain: String,
    pub potential: String,
    pub amplitude: Option<f64>,
    pub grid_nodes: usize,
    pub winding_bound: i32,
    pub v_max: f64,
    pub measures: Vec<MeasureEcho>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MeasureEcho {
    pub name: String,
    pub atoms: usize,
    pub source: String,
}

/// A fully validated scenario.
pub struct Scenario {
    pub model: TonelliModel,
    pub grid: Grid,
    pub params: ActionParams,
    pub measures: Vec<(String, DiscreteMeasure)>,
    pub experiments: Vec<Experiment>,
    pub out_dir: PathBuf,
    pub write_csv: bool,
    pub write_svg: bool,
    pub echo: ModelEcho,
}

impl Scenario {
    pub fn measure(&self, name: &str) -> &DiscreteMeasure {
        &self.measures.iter().find(|(n, _)| n == name).expect("validated reference").1
    }

    /// Options of the first `invariants` experiment, or defaults; the
    /// `check-invariants` subcommand runs the battery with these.
    pub fn invariants_opts(&self) -> InvariantsOpts {
        self.experiments
            .iter()
            .find_map(|e| match e {
                Experiment::Invariants(o) => Some(o.clone()),
                _ => None,
            })
            .unwrap_or_default()
    }
}

fn positive(field: &str, v: f64) -> CResult<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        fail(format!("{field}: must be finite and positive, got {v}"))
    }
}

fn resolve_measure(
    idx: usize,
    raw: &RawMeasure,
    domain: &Domain,
    seed_override: Option<u64>,
) -> CResult<DiscreteMeasure> {
    let path = format!("measures[{idx}] (\"{}\")", raw.name);
    let dim = domain.dim();
    let atoms: Vec<(Vec2, f64)> = match (&raw.atoms, &raw.generator) {
        (Some(_), Some(_)) => {
            return fail(format!("{path}: give either `atoms` or `generator`, not both"))
        }
        (None, None) => {
            return fail(format!("{path}: needs `atoms` or a `generator`"))
        }
        (Some(rows), None) => {
            if raw.count.is_some() || raw.seed.is_some() {
                return fail(format!("{path}: `count`/`seed` apply to generators only"));
            }
            let mut atoms = Vec::with_capacity(rows.len());
            for (r, row) in rows.iter().enumerate() {
                if row.len() != dim + 1 {
                    return fail(format!(
                        "{path}.atoms[{r}]: expected {} numbers ({} coordinates + weight), got {}",
                        dim + 1,
                        dim,
                        row.len()
                    ));
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return fail(format!("{path}.atoms[{r}]: entries must be finite"));
                }
                let w = row[dim];
                if w <= 0.0 {
                    return fail(format!("{path}.atoms[{r}]: weight must be positive, got {w}"));
                }
                let x = if dim == 1 { [row[0], 0.0] } else { [row[0], row[1]] };
                atoms.push((x, w));
            }
            let total: f64 = atoms.iter().map(|(_, w)| w).sum();
            for a in &mut atoms {
                a.1 /= total;
            }
            atoms
        }
        (None, Some(gen)) => {
            let count = match raw.count {
                Some(c) if c >= 1 => c,
                Some(c) => return fail(format!("{path}.count: must be at least 1, got {c}")),
                None => return fail(format!("{path}: missing field `count`")),
            };
            let seed = match (raw.seed, seed_override) {
                (Some(s), None) => s,
                (Some(_), Some(s)) => s,
                (None, _) => {
                    return fail(format!(
                        "{path}: missing field `seed` — generators need an explicit seed \
                         so that reruns reproduce the report"
                    ))
                }
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut atoms = Vec::with_capacity(count);
            for _ in 0..count {
                let x = [rng.gen::<f64>(), if dim == 2 { rng.gen::<f64>() } else { 0.0 }];
                let w = match gen.as_str() {
                    "uniform-cloud" => 1.0,
                    "diracs" => rng.gen_range(0.2..1.0),
                    other => {
                        return fail(format!(
                            "{path}.generator: unknown generator \"{other}\" \
                             (expected uniform-cloud | diracs)"
                        ))
                    }
                };
                atoms.push((x, w));
            }
            let total: f64 = atoms.iter().map(|(_, w)| w).sum();
            for a in &mut atoms {
                a.1 /= total;
            }
            atoms
        }
    };
    DiscreteMeasure::new(domain.clone(), atoms)
        .map_err(|e| ConfigError(format!("{path}: {e}")))
}

/// Parses and validates a scenario file.  Every failure here is a schema
/// failure: nothing has been computed yet and exit code 2 applies.
pub fn load(
    path: &Path,
    out_dir_flag: Option<&Path>,
    seed_override: Option<u64>,
) -> CResult<Scenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    let raw: RawConfig = toml::from_str(&text)
        .map_err(|e| ConfigError(format!("{}: {}", path.display(), e.message())))?;

    let domain = match raw.model.domain.as_str() {
        "torus1" => Domain::torus(1),
        "torus2" => Domain::torus(2),
        other => {
            return fail(format!(
                "model.domain: unknown domain \"{other}\" (expected torus1 | torus2)"
            ))
        }
    };
    let potential = match raw.model.potential.as_str() {
        "zero" => {
            if raw.model.amplitude.is_some() {
                return fail("model.amplitude: only the cosine potential takes an amplitude");
            }
            Potential::Zero
        }
        "cosine" => {
            let amplitude = raw.model.amplitude.unwrap_or(1.0);
            if !(amplitude.is_finite() && amplitude > 0.0) {
                return fail(format!(
                    "model.amplitude: must be finite and positive, got {amplitude}"
                ));
            }
            Potential::Cosine { amplitude }
        }
        other => {
            return fail(format!(
                "model.potential: unknown potential \"{other}\" (expected zero | cosine)"
            ))
        }
    };
    let model = TonelliModel::new(domain.clone(), potential.clone())
        .map_err(|e| ConfigError(format!("model: {e}")))?;
    let grid = Grid::new(domain.clone(), raw.grid.n)
        .map_err(|e| ConfigError(format!("grid.n: {e}")))?;

    let mut params = ActionParams::default();
    if let Some(w) = raw.grid.winding {
        if !(1..=8).contains(&w) {
            return fail(format!("grid.winding: must lie in 1..=8, got {w}"));
        }
        params.winding_bound = w;
    }
    if let Some(v) = raw.params.step_target {
        params.step_target = positive("params.step-target", v)?;
    }
    if let Some(v) = raw.params.min_intervals {
        params.min_intervals = v;
    }
    if let Some(v) = raw.params.max_intervals {
        params.max_intervals = v;
    }
    if let Some(v) = raw.params.grad_tol {
        params.grad_tol = positive("params.grad-tol", v)?;
    }
    if let Some(v) = raw.params.max_iterations {
        params.max_iterations = v;
    }

    let mut measures = Vec::with_capacity(raw.measures.len());
    for (i, rm) in raw.measures.iter().enumerate() {
        if rm.name.is_empty() {
            return fail(format!("measures[{i}].name: must not be empty"));
        }
        if measures.iter().any(|(n, _)| n == &rm.name) {
            return fail(format!("measures[{i}].name: duplicate name \"{}\"", rm.name));
        }
        let m = resolve_measure(i, rm, &domain, seed_override)?;
        measures.push((rm.name.clone(), m));
    }

    let mut experiments = Vec::with_capacity(raw.experiments.len());
    for (i, value) in raw.experiments.iter().enumerate() {
        experiments.push(parse_experiment(i, value)?);
    }

    // Cross-references and numeric sanity, before anything runs.
    let have = |name: &str| measures.iter().any(|(n, _)| n == name);
    for (i, e) in experiments.iter().enumerate() {
        let path = format!("experiments[{i}] (kind \"{}\")", e.kind());
        let need = |field: &str, name: &str| -> CResult<()> {
            if have(name) {
                Ok(())
            } else {
                fail(format!("{path}.{field}: no measure named \"{name}\""))
            }
        };
        match e {
            Experiment::WeakKam(o) => {
                positive(&format!("{path}.delta"), o.delta)?;
                positive(&format!("{path}.tol"), o.tol)?;
            }
            Experiment::CutReport(o) => {
                positive(&format!("{path}.probe-start"), o.probe_start)?;
                positive(&format!("{path}.probe-step"), o.probe_step)?;
                if o.probe_count == 0 {
                    return fail(format!("{path}.probe-count: must be at least 1"));
                }
                if let Some(name) = &o.measure {
                    need("measure", name)?;
                }
            }
            Experiment::Cost(o) => {
                need("source", &o.source)?;
                need("target", &o.target)?;
                positive(&format!("{path}.t"), o.t)?;
            }
            Experiment::Propagate(o) => {
                need("measure", &o.measure)?;
                if o.times.is_empty() {
                    return fail(format!("{path}.times: must not be empty"));
                }
                for &t in &o.times {
                    positive(&format!("{path}.times"), t)?;
                }
            }
            Experiment::Flow(o) => {
                need("measure", &o.measure)?;
                let dt = positive(&format!("{path}.dt"), o.dt)?;
                let t_final = positive(&format!("{path}.t-final"), o.t_final)?;
                if dt > t_final {
                    return fail(format!("{path}.dt: step {dt} exceeds horizon {t_final}"));
                }
                if o.levels > 6 {
                    return fail(format!("{path}.levels: at most 6 halvings, got {}", o.levels));
                }
            }
            Experiment::Invariants(o) => {
                if o.samples == 0 {
                    return fail(format!("{path}.samples: must be at least 1"));
                }
                if let Some(k) = o.corrupt_node {
                    if k >= grid.node_count() {
                        return fail(format!(
                            "{path}.corrupt-node: node {k} outside the {}-node grid",
                            grid.node_count()
                        ));
                    }
                }
            }
        }
    }

    let out_dir = match out_dir_flag {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from(raw.output.directory.clone().unwrap_or_else(|| "out".into())),
    };
    let mut write_csv = false;
    let mut write_svg = false;
    match &raw.output.formats {
        None => {
            write_csv = true;
            write_svg = true;
        }
        Some(formats) => {
            for f in formats {
                match f.as_str() {
                    "csv" => write_csv = true,
                    "svg" => write_svg = true,
                    "json" => {}
                    other => {
                        return fail(format!(
                            "output.formats: unknown format \"{other}\" (expected csv | svg | json)"
                        ))
                    }
                }
            }
        }
    }

    let echo = ModelEcho {
        domain: raw.model.domain.clone(),
        potential: raw.model.potential.clone(),
        amplitude: match potential {
            Potential::Cosine { amplitude } => Some(amplitude),
            _ => None,
        },
        grid_nodes: grid.node_count(),
        winding_bound: params.winding_bound,
        v_max: model.v_max(),
        measures: measures
            .iter()
            .zip(&raw.measures)
            .map(|((name, m), rm)| MeasureEcho {
                name: name.clone(),
                atoms: m.len(),
                source: match &rm.generator {
                    Some(g) => format!("{g} (seed {})", seed_override.or(rm.seed).unwrap_or(0)),
                    None => "explicit atoms".into(),
                },
            })
            .collect(),
    };

    Ok(Scenario {
        model,
        grid,
        params,
        measures,
        experiments,
        out_dir,
        write_csv,
        write_svg,
        echo,
    })
}

/// The config grammar, printed by `print-schema`.
pub const SCHEMA: &str = r#"Scenario config grammar (TOML).  Unknown keys are rejected everywhere.

[model]                          # required
domain = "torus1"                # torus1 | torus2
potential = "cosine"             # zero | cosine
amplitude = 1.0                  # cosine only; finite, positive; default 1.0

[grid]                           # required
n = 256                          # nodes per axis, >= 16
winding = 2                      # optional winding bound for action searches, 1..=8

[params]                         # optional action-search overrides
step-target = 0.01               # target curve-node spacing
min-intervals = 16
max-intervals = 128
grad-tol = 1e-10
max-iterations = 200

[[measures]]                     # zero or more named probability measures
name = "kink"                    # unique, non-empty
atoms = [[0.5, 1.0]]             # rows [x, w] on torus1, [x, y, w] on torus2;
                                 # positive weights, normalized automatically
[[measures]]
name = "cloud"
generator = "uniform-cloud"      # uniform-cloud (equal weights) | diracs (random weights)
count = 8                        # atoms to draw, >= 1
seed = 41                        # REQUIRED with a generator; --seed-override replaces it

[[experiments]]                  # executed in order; sequential
kind = "weak-kam"                # solve u = T_delta u + c0*delta
delta = 0.1                      # iteration step (default 0.1)
tol = 1e-6                       # stopping residual (default 1e-6)

[[experiments]]
kind = "cut-report"              # cut-time field, singular set, Aubry flags
measure = "kink"                 # optional: also probe this measure's cut time
probe-start = 0.025              # probe grid start/step/count (defaults 0.025/0.025/6)
probe-step = 0.025
probe-count = 6

[[experiments]]
kind = "cost"                    # dynamical optimal transport between two measures
source = "cloud"
target = "kink"
t = 0.5                          # transport horizon

[[experiments]]
kind = "propagate"               # random Lax-Oleinik push of a measure
measure = "cloud"
times = [0.1, 0.5, 1.0]

[[experiments]]
kind = "flow"                    # minimizing-movement singular flow under the weak KAM field
measure = "kink"
t-final = 0.3
dt = 0.05
levels = 0                       # optional dt halvings; coarser curves kept for rate fitting

[[experiments]]
kind = "invariants"              # cross-module property battery
samples = 12                     # random instances per probe (default 12)
corrupt-node = 7                 # optional fault injection: the battery's field scan
                                 # sees NaN at this node and must fail naming it

[output]                         # optional
directory = "out"                # overridden by --out-dir
formats = ["csv", "svg"]         # report.json is always written; default enables both

Report format: report.json holds the model echo and one record per experiment
{kind, label, metrics, artifacts, error, pass}.  Every metric names its
producing operation and reads as one check:
  abs-diff : |value - target| <= tolerance
  upper    : value <= target + tolerance
  lower    : value >= target - tolerance
Non-finite metric values serialize as null.  Reports carry no timestamps, so
a rerun with the same config and seed is byte-identical at any thread count.

Exit codes: 0 all embedded assertions pass; 2 config rejected before any
computation; 1 an experiment failed or a module reported an error (the
structured error string is in the report).
"#;
