//! Scenario authoring, validation, and execution.
//!
//! A scenario file is one JSON document naming the feeder, the fleet (a file
//! or a seeded generator), the baseline load (a file or a seeded valley-shape
//! generator), the horizon, the solver parameters, and the attack sections.
//! Relative paths resolve against the scenario file's directory. All random
//! draws go through a named, version-pinned generator (`chacha20`, the
//! ChaCha20 stream seeded via splitmix from the configured integer, mapped to
//! doubles by taking the top 53 bits) so a fleet is reproducible from its
//! seed alone.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{AgentAttack, AttackError, AttackSpec, AttackVariant};
use crate::engine::{EngineError, Problem, Solver, SolverConfig, SolverOutcome};
use crate::feeder::{
    self, AdjacencyMatrices, BaselineLoad, FeederError, FeederModel, SensitivityMatrix,
};
use crate::fleet::{EvSpec, Fleet, FleetError};
use crate::metrics::{self, MetricsError, RunReport};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("configuration invalid ({} diagnostics)", .0.diagnostics.len())]
    Validation(ValidationReport),
    #[error(transparent)]
    Feeder(#[from] FeederError),
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("bad configuration: {0}")]
    BadConfig(String),
}

/// The pinned random generator names accepted in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RngKind {
    #[serde(rename = "chacha20")]
    ChaCha20,
}

impl Default for RngKind {
    fn default() -> Self {
        RngKind::ChaCha20
    }
}

/// Uniform doubles from the pinned generator: top 53 bits of each u64.
struct Draw(ChaCha20Rng);

impl Draw {
    fn new(seed: u64) -> Self {
        Self(ChaCha20Rng::seed_from_u64(seed))
    }

    fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    fn range(&mut self, bounds: [f64; 2]) -> f64 {
        bounds[0] + (bounds[1] - bounds[0]) * self.unit()
    }
}

/// EVs per node for the fleet generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeCount {
    pub node: usize,
    pub count: usize,
}

/// Seeded fleet generator: per-node counts plus parameter ranges.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FleetGenSpec {
    pub seed: u64,
    #[serde(default)]
    pub rng: RngKind,
    pub per_node: Vec<NodeCount>,
    pub p_max_kw: f64,
    pub capacity_range_kwh: [f64; 2],
    pub soc_ini_range: [f64; 2],
    pub soc_des_range: [f64; 2],
    pub eta: f64,
}

/// Where the fleet comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FleetSource {
    File(String),
    Generate(FleetGenSpec),
}

/// Seeded valley-shape baseline generator: an evening peak decays into an
/// overnight valley and rises again toward the morning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineGenSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub rng: RngKind,
    /// Aggregate load at the first step, kW.
    pub peak_kw: f64,
    /// Aggregate load at the valley bottom, kW.
    pub valley_kw: f64,
    /// Aggregate load at the last step, kW.
    pub end_kw: f64,
    /// Valley bottom position as a fraction of the horizon.
    #[serde(default = "default_valley_position")]
    pub valley_position: f64,
    /// Reactive power follows real power at this power factor.
    #[serde(default = "default_power_factor")]
    pub power_factor: f64,
    /// Multiplicative seeded noise amplitude; 0 keeps the curve exact.
    #[serde(default)]
    pub noise_std: f64,
    /// Global multiplier applied to the whole curve.
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Per-bus share of the aggregate; equal shares when absent.
    #[serde(default)]
    pub bus_weights: Option<Vec<f64>>,
}

fn default_valley_position() -> f64 {
    0.6
}

fn default_power_factor() -> f64 {
    0.95
}

fn default_scale() -> f64 {
    1.0
}

/// Where the baseline comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineSource {
    File(String),
    Generate(BaselineGenSpec),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Horizon {
    pub t_steps: usize,
    pub dt_hours: f64,
}

fn default_workers() -> usize {
    1
}

/// The single input of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    /// Feeder file path, relative to this scenario file.
    pub feeder: String,
    pub fleet: FleetSource,
    pub baseline: BaselineSource,
    pub horizon: Horizon,
    pub solver: SolverConfig,
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub trace: bool,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

impl ScenarioConfig {
    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }

    pub fn load(path: &Path) -> Result<(Self, PathBuf), ScenarioError> {
        let json = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config = Self::from_json(&json).map_err(|e| ScenarioError::Parse {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok((config, base))
    }

    /// The copy embedded in reports: execution knobs (workers, trace, output)
    /// do not change results and are normalized out so reruns byte-match.
    pub fn echo(&self) -> ScenarioConfig {
        let mut echo = self.clone();
        echo.workers = 1;
        echo.trace = false;
        echo.output = None;
        echo
    }
}

/// One structured validation finding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostic {
    pub code: String,
    pub message: String,
}

/// All violations found in a configuration; empty means runnable.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub diagnostics: Vec<Diagnostic>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.diagnostics.is_empty()
    }

    fn push(&mut self, code: &str, message: String) {
        self.diagnostics.push(Diagnostic {
            code: code.to_string(),
            message,
        });
    }
}

/// Everything a run needs, loaded and cross-checked.
#[derive(Debug, Clone)]
pub struct ResolvedScenario {
    pub config: ScenarioConfig,
    pub feeder: FeederModel,
    pub adjacency: AdjacencyMatrices,
    pub sensitivity: SensitivityMatrix,
    pub fleet: Fleet,
    pub baseline: BaselineLoad,
    /// Baseline squared voltages, n×T.
    pub y_d: Array2<f64>,
    /// Per-EV required rate-sums.
    pub targets: Vec<f64>,
}

impl ResolvedScenario {
    pub fn problem(&self) -> Result<Problem, EngineError> {
        Problem::new(
            self.baseline.aggregate(),
            self.y_d.clone(),
            self.sensitivity.d.clone(),
            self.fleet.p_max(),
            self.targets.clone(),
            self.feeder.v0,
        )
    }

    pub fn hooks(&self) -> Result<Vec<AgentAttack>, AttackError> {
        let mut hooks = Vec::new();
        for spec in &self.config.attacks {
            hooks.extend(AgentAttack::from_spec(spec, self.fleet.t_steps)?);
        }
        Ok(hooks)
    }

    pub fn has_active_attacks(&self) -> bool {
        self.config
            .attacks
            .iter()
            .any(|s| s.variant != AttackVariant::None && !s.agent_ids().is_empty())
    }
}

/// Deterministic fleet from a generator spec. Nodes are visited in ascending
/// order; each EV consumes exactly three draws (capacity, initial SOC,
/// desired SOC) from the seeded stream.
pub fn generate_fleet(
    spec: &FleetGenSpec,
    dt_hours: f64,
    t_steps: usize,
) -> Result<Fleet, ScenarioError> {
    let mut per_node = spec.per_node.clone();
    per_node.sort_by_key(|nc| nc.node);
    let mut draw = Draw::new(spec.seed);
    let mut evs = Vec::new();
    for nc in &per_node {
        for _ in 0..nc.count {
            let capacity_kwh = draw.range(spec.capacity_range_kwh);
            let soc_ini = draw.range(spec.soc_ini_range);
            let soc_des = draw.range(spec.soc_des_range);
            evs.push(EvSpec {
                id: evs.len(),
                node: nc.node,
                p_max_kw: spec.p_max_kw,
                capacity_kwh,
                soc_ini,
                soc_des,
                eta: spec.eta,
            });
        }
    }
    Ok(Fleet::new(evs, dt_hours, t_steps)?)
}

/// The valley-shaped aggregate curve: cosine decay from `peak` to `valley`
/// at `valley_position`, cosine rise to `end` afterwards.
fn valley_curve(spec: &BaselineGenSpec, t_steps: usize) -> Vec<f64> {
    let pos = spec.valley_position.clamp(0.05, 0.95);
    (0..t_steps)
        .map(|t| {
            let x = if t_steps > 1 {
                t as f64 / (t_steps - 1) as f64
            } else {
                0.0
            };
            let value = if x <= pos {
                spec.valley_kw
                    + (spec.peak_kw - spec.valley_kw)
                        * 0.5
                        * (1.0 + (std::f64::consts::PI * x / pos).cos())
            } else {
                spec.valley_kw
                    + (spec.end_kw - spec.valley_kw)
                        * 0.5
                        * (1.0 - (std::f64::consts::PI * (x - pos) / (1.0 - pos)).cos())
            };
            spec.scale * value
        })
        .collect()
}

/// Deterministic per-bus baseline from a generator spec.
pub fn generate_baseline(
    spec: &BaselineGenSpec,
    n: usize,
    t_steps: usize,
) -> Result<BaselineLoad, ScenarioError> {
    let weights = match &spec.bus_weights {
        Some(w) => {
            if w.len() != n {
                return Err(ScenarioError::BadConfig(format!(
                    "bus_weights has {} entries for {n} buses",
                    w.len()
                )));
            }
            let total: f64 = w.iter().sum();
            if total <= 0.0 || w.iter().any(|v| *v < 0.0) {
                return Err(ScenarioError::BadConfig(
                    "bus_weights must be nonnegative with positive sum".into(),
                ));
            }
            w.iter().map(|v| v / total).collect::<Vec<f64>>()
        }
        None => vec![1.0 / n as f64; n],
    };
    let aggregate = valley_curve(spec, t_steps);
    let tan_phi = spec.power_factor.clamp(0.05, 1.0).acos().tan();

    let mut draw = Draw::new(spec.seed);
    let mut p = Array2::zeros((n, t_steps));
    let mut q = Array2::zeros((n, t_steps));
    for bus in 0..n {
        for t in 0..t_steps {
            let mut value = aggregate[t] * weights[bus];
            if spec.noise_std > 0.0 {
                value *= 1.0 + spec.noise_std * (2.0 * draw.unit() - 1.0);
            }
            p[[bus, t]] = value;
            q[[bus, t]] = value * tan_phi;
        }
    }
    Ok(BaselineLoad::new(p, q)?)
}

/// Writes a baseline as CSV: header `bus,t0,t1,...`; the bus column carries
/// the bus index suffixed with the power kind, e.g. `3p` / `3q`.
pub fn write_baseline_csv(baseline: &BaselineLoad, path: &Path) -> Result<(), ScenarioError> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |source: std::io::Error| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    };
    let t_steps = baseline.t_steps();
    let header: Vec<String> = (0..t_steps).map(|t| format!("t{t}")).collect();
    writeln!(w, "bus,{}", header.join(",")).map_err(io_err)?;
    for (kind, matrix) in [("p", &baseline.p), ("q", &baseline.q)] {
        for (bus, row) in matrix.rows().into_iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}{kind},{}", bus + 1, cells.join(",")).map_err(io_err)?;
        }
    }
    Ok(())
}

/// Reads a baseline CSV (see `write_baseline_csv` for the layout). Rows may
/// be omitted; missing buses or kinds default to zero.
pub fn read_baseline_csv(
    path: &Path,
    n: usize,
    t_steps: usize,
) -> Result<BaselineLoad, ScenarioError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ScenarioError::Parse {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    let parse_err = |reason: String| ScenarioError::Parse {
        path: path.display().to_string(),
        reason,
    };
    let header_cols = reader
        .headers()
        .map_err(|e| parse_err(e.to_string()))?
        .len();
    if header_cols != t_steps + 1 {
        return Err(parse_err(format!(
            "{} time columns, horizon expects {t_steps}",
            header_cols.saturating_sub(1)
        )));
    }
    let mut p = Array2::zeros((n, t_steps));
    let mut q = Array2::zeros((n, t_steps));
    for record in reader.records() {
        let record = record.map_err(|e| parse_err(e.to_string()))?;
        let label = record.get(0).unwrap_or_default();
        let (bus_str, kind) = label.split_at(label.len().saturating_sub(1));
        let bus: usize = bus_str
            .parse()
            .map_err(|_| parse_err(format!("bad bus label `{label}`")))?;
        if bus == 0 || bus > n {
            return Err(parse_err(format!(
                "bus {bus} outside 1..={n} in label `{label}`"
            )));
        }
        let target = match kind {
            "p" => &mut p,
            "q" => &mut q,
            _ => return Err(parse_err(format!("bad power kind in label `{label}`"))),
        };
        for t in 0..t_steps {
            let cell = record
                .get(t + 1)
                .ok_or_else(|| parse_err(format!("row `{label}` is short at t{t}")))?;
            target[[bus - 1, t]] = cell
                .parse()
                .map_err(|_| parse_err(format!("bad number `{cell}` in row `{label}`")))?;
        }
    }
    Ok(BaselineLoad::new(p, q)?)
}

fn load_fleet(
    source: &FleetSource,
    base: &Path,
    horizon: &Horizon,
) -> Result<Fleet, ScenarioError> {
    match source {
        FleetSource::File(rel) => {
            let path = base.join(rel);
            let json = std::fs::read_to_string(&path).map_err(|source| ScenarioError::Io {
                path: path.display().to_string(),
                source,
            })?;
            let evs: Vec<EvSpec> = serde_json::from_str(&json).map_err(|e| ScenarioError::Parse {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
            Ok(Fleet::new(evs, horizon.dt_hours, horizon.t_steps)?)
        }
        FleetSource::Generate(spec) => generate_fleet(spec, horizon.dt_hours, horizon.t_steps),
    }
}

fn load_baseline(
    source: &BaselineSource,
    base: &Path,
    n: usize,
    t_steps: usize,
) -> Result<BaselineLoad, ScenarioError> {
    match source {
        BaselineSource::File(rel) => read_baseline_csv(&base.join(rel), n, t_steps),
        BaselineSource::Generate(spec) => generate_baseline(spec, n, t_steps),
    }
}

/// Loads every referenced artifact and cross-checks the configuration.
pub fn resolve(config: &ScenarioConfig, base: &Path) -> Result<ResolvedScenario, ScenarioError> {
    if config.horizon.t_steps == 0 {
        return Err(ScenarioError::BadConfig("horizon t_steps must be ≥ 1".into()));
    }
    if !(config.horizon.dt_hours > 0.0) {
        return Err(ScenarioError::BadConfig("horizon dt_hours must be positive".into()));
    }
    if config.workers == 0 {
        return Err(ScenarioError::BadConfig("workers must be ≥ 1".into()));
    }
    config.solver.validate()?;

    let feeder_path = base.join(&config.feeder);
    let feeder_json =
        std::fs::read_to_string(&feeder_path).map_err(|source| ScenarioError::Io {
            path: feeder_path.display().to_string(),
            source,
        })?;
    let feeder = FeederModel::from_json(&feeder_json).map_err(|e| ScenarioError::Parse {
        path: feeder_path.display().to_string(),
        reason: e.to_string(),
    })?;
    let adjacency = feeder::build_adjacency(&feeder)?;
    let n = feeder.bus_count();

    let fleet = load_fleet(&config.fleet, base, &config.horizon)?;
    let sensitivity = feeder::build_sensitivity(&adjacency, &fleet, feeder.s_base)?;
    let targets = fleet.targets()?;

    let baseline = load_baseline(&config.baseline, base, n, config.horizon.t_steps)?;
    let y_d =
        feeder::baseline_voltage_series(&adjacency, &baseline, feeder.v0, feeder.s_base)?;

    let s = fleet.len();
    let mut attacked = vec![false; s];
    for spec in &config.attacks {
        spec.validate(config.horizon.t_steps, config.solver.eps)?;
        for agent in spec.agent_ids() {
            if agent >= s {
                return Err(ScenarioError::BadConfig(format!(
                    "attacker id {agent} outside fleet of {s}"
                )));
            }
            if spec.variant != AttackVariant::None {
                if attacked[agent] {
                    return Err(ScenarioError::BadConfig(format!(
                        "agent {agent} appears in more than one attack section"
                    )));
                }
                attacked[agent] = true;
            }
        }
    }

    Ok(ResolvedScenario {
        config: config.clone(),
        feeder,
        adjacency,
        sensitivity,
        fleet,
        baseline,
        y_d,
        targets,
    })
}

/// Checks a configuration end to end, listing every violation found.
pub fn validate(config: &ScenarioConfig, base: &Path) -> ValidationReport {
    let mut report = ValidationReport::default();

    if config.horizon.t_steps == 0 {
        report.push("horizon/steps", "t_steps must be ≥ 1".into());
    }
    if !(config.horizon.dt_hours > 0.0) {
        report.push("horizon/dt", "dt_hours must be positive".into());
    }
    if config.workers == 0 {
        report.push("workers/count", "workers must be ≥ 1".into());
    }
    if let Err(e) = config.solver.validate() {
        report.push("solver/params", e.to_string());
    }

    let feeder = (|| -> Result<FeederModel, ScenarioError> {
        let path = base.join(&config.feeder);
        let json = std::fs::read_to_string(&path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        FeederModel::from_json(&json).map_err(|e| ScenarioError::Parse {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    })();
    let feeder = match feeder {
        Ok(f) => match feeder::build_adjacency(&f) {
            Ok(_) => Some(f),
            Err(e) => {
                report.push("feeder/topology", e.to_string());
                None
            }
        },
        Err(e) => {
            report.push("feeder/load", e.to_string());
            None
        }
    };

    let fleet = match load_fleet(&config.fleet, base, &config.horizon) {
        Ok(fleet) => Some(fleet),
        Err(e) => {
            report.push("fleet/load", e.to_string());
            None
        }
    };

    if let (Some(f), Some(fl)) = (&feeder, &fleet) {
        let n = f.bus_count();
        for ev in &fl.evs {
            if ev.node == 0 || ev.node > n {
                report.push(
                    "fleet/node",
                    format!("EV {} sits at bus {}, feeder has 1..={n}", ev.id, ev.node),
                );
            }
        }
        if let Err(e) = load_baseline(&config.baseline, base, n, config.horizon.t_steps) {
            report.push("baseline/load", e.to_string());
        }
    }

    let s = fleet.as_ref().map_or(usize::MAX, Fleet::len);
    let mut attacked = vec![false; if s == usize::MAX { 0 } else { s }];
    for (idx, spec) in config.attacks.iter().enumerate() {
        if let Err(e) = spec.validate(config.horizon.t_steps, config.solver.eps) {
            report.push(&format!("attack/{idx}"), e.to_string());
        }
        if s != usize::MAX {
            for agent in spec.agent_ids() {
                if agent >= s {
                    report.push(
                        &format!("attack/{idx}/agent"),
                        format!("attacker id {agent} outside fleet of {s}"),
                    );
                } else if spec.variant != AttackVariant::None {
                    if attacked[agent] {
                        report.push(
                            &format!("attack/{idx}/agent"),
                            format!("agent {agent} appears in more than one attack section"),
                        );
                    }
                    attacked[agent] = true;
                }
            }
        }
    }

    report
}

/// Runs a resolved scenario and assembles its report.
pub fn run(resolved: &ResolvedScenario) -> Result<(RunReport, SolverOutcome), ScenarioError> {
    let problem = resolved.problem()?;
    let hooks = resolved.hooks()?;
    let mut solver = Solver::new(problem, resolved.config.solver.clone(), hooks, resolved.config.workers)?;
    let outcome = solver.run()?;
    let mut report = metrics::build_report(resolved, &outcome)?;
    report.config = resolved.config.echo();
    Ok((report, outcome))
}

fn ensure_dir(dir: &Path) -> Result<(), ScenarioError> {
    std::fs::create_dir_all(dir).map_err(|source| ScenarioError::Io {
        path: dir.display().to_string(),
        source,
    })
}

fn write_report_artifacts(
    dir: &Path,
    report: &RunReport,
    outcome: &SolverOutcome,
    trace: bool,
) -> Result<(), ScenarioError> {
    ensure_dir(dir)?;
    let json = report.to_json();
    let path = dir.join("report.json");
    std::fs::write(&path, json).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    metrics::write_load_csv(&dir.join("load.csv"), report)?;
    metrics::write_voltage_csv(&dir.join("voltage.csv"), report)?;
    metrics::write_profiles_csv(&dir.join("profiles.csv"), report)?;
    metrics::write_residuals_csv(&dir.join("residuals.csv"), report)?;
    if trace {
        metrics::write_trace_csv(&dir.join("trace.csv"), outcome)?;
    }
    Ok(())
}

/// Command-line overrides applied on top of the scenario file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub trace: bool,
}

fn apply_overrides(config: &mut ScenarioConfig, overrides: &Overrides) {
    if let Some(workers) = overrides.workers {
        config.workers = workers;
    }
    if overrides.trace {
        config.trace = true;
    }
}

fn output_dir(config: &ScenarioConfig, base: &Path, overrides: &Overrides) -> PathBuf {
    if let Some(out) = &overrides.out {
        return out.clone();
    }
    match &config.output {
        Some(dir) => base.join(dir),
        None => PathBuf::from("out"),
    }
}

/// `run` subcommand: validate, execute, write report + CSV traces.
pub fn run_command(config_path: &Path, overrides: &Overrides) -> Result<RunReport, ScenarioError> {
    let (mut config, base) = ScenarioConfig::load(config_path)?;
    apply_overrides(&mut config, overrides);
    let validation = validate(&config, &base);
    if !validation.is_valid() {
        return Err(ScenarioError::Validation(validation));
    }
    let resolved = resolve(&config, &base)?;
    let (report, outcome) = run(&resolved)?;
    let dir = output_dir(&config, &base, overrides);
    write_report_artifacts(&dir, &report, &outcome, config.trace)?;
    Ok(report)
}

/// One attacked variant next to its comparison against the attack-free twin.
#[derive(Debug)]
pub struct VariantResult {
    pub label: String,
    pub report: RunReport,
    pub comparison: metrics::ComparisonReport,
}

/// `compare` subcommand: runs the attack-free twin (attack sections
/// stripped), then each attack section alone on identical seeds, and emits a
/// comparison per variant.
pub fn compare_command(
    config_path: &Path,
    overrides: &Overrides,
) -> Result<(RunReport, Vec<VariantResult>), ScenarioError> {
    let (mut config, base) = ScenarioConfig::load(config_path)?;
    apply_overrides(&mut config, overrides);
    let validation = validate(&config, &base);
    if !validation.is_valid() {
        return Err(ScenarioError::Validation(validation));
    }
    let dir = output_dir(&config, &base, overrides);

    let mut free_config = config.clone();
    free_config.attacks = Vec::new();
    let resolved_free = resolve(&free_config, &base)?;
    let (free_report, free_outcome) = run(&resolved_free)?;
    write_report_artifacts(&dir.join("attack-free"), &free_report, &free_outcome, config.trace)?;

    let mut variants = Vec::new();
    for (idx, spec) in config.attacks.iter().enumerate() {
        let label = format!(
            "variant-{idx}-{}",
            serde_json::to_value(spec.variant)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_else(|| "attack".into())
        );
        let mut attacked_config = config.clone();
        attacked_config.attacks = vec![spec.clone()];
        let resolved = resolve(&attacked_config, &base)?;
        let (report, outcome) = run(&resolved)?;
        let variant_dir = dir.join(&label);
        write_report_artifacts(&variant_dir, &report, &outcome, config.trace)?;
        let comparison = metrics::compare(&report, &free_report)?;
        let comparison_json = serde_json::to_string_pretty(&comparison)
            .expect("comparison serializes")
            + "\n";
        let path = variant_dir.join("comparison.json");
        std::fs::write(&path, comparison_json).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        variants.push(VariantResult {
            label,
            report,
            comparison,
        });
    }
    Ok((free_report, variants))
}

/// `gen-baseline` subcommand: writes the scenario's synthetic baseline as CSV.
pub fn gen_baseline_command(
    config_path: &Path,
    overrides: &Overrides,
) -> Result<PathBuf, ScenarioError> {
    let (config, base) = ScenarioConfig::load(config_path)?;
    let spec = match &config.baseline {
        BaselineSource::Generate(spec) => spec,
        BaselineSource::File(_) => {
            return Err(ScenarioError::BadConfig(
                "scenario baseline is a file, nothing to generate".into(),
            ))
        }
    };
    let feeder_path = base.join(&config.feeder);
    let feeder_json =
        std::fs::read_to_string(&feeder_path).map_err(|source| ScenarioError::Io {
            path: feeder_path.display().to_string(),
            source,
        })?;
    let feeder = FeederModel::from_json(&feeder_json).map_err(|e| ScenarioError::Parse {
        path: feeder_path.display().to_string(),
        reason: e.to_string(),
    })?;
    let baseline = generate_baseline(spec, feeder.bus_count(), config.horizon.t_steps)?;
    let dir = output_dir(&config, &base, overrides);
    ensure_dir(&dir)?;
    let path = dir.join("baseline.csv");
    write_baseline_csv(&baseline, &path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen_spec(seed: u64) -> FleetGenSpec {
        FleetGenSpec {
            seed,
            rng: RngKind::ChaCha20,
            per_node: vec![
                NodeCount { node: 2, count: 2 },
                NodeCount { node: 1, count: 1 },
            ],
            p_max_kw: 6.6,
            capacity_range_kwh: [18.0, 20.0],
            soc_ini_range: [0.3, 0.5],
            soc_des_range: [0.7, 0.9],
            eta: 0.9,
        }
    }

    #[test]
    fn fleet_generation_is_reproducible() {
        let a = generate_fleet(&gen_spec(7), 0.25, 52).unwrap();
        let b = generate_fleet(&gen_spec(7), 0.25, 52).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.evs.iter().zip(b.evs.iter()) {
            assert_eq!(x.capacity_kwh, y.capacity_kwh);
            assert_eq!(x.soc_ini, y.soc_ini);
            assert_eq!(x.soc_des, y.soc_des);
        }
        let c = generate_fleet(&gen_spec(8), 0.25, 52).unwrap();
        assert!(a
            .evs
            .iter()
            .zip(c.evs.iter())
            .any(|(x, y)| x.capacity_kwh != y.capacity_kwh));
    }

    #[test]
    fn fleet_generation_draws_within_ranges_sorted_by_node() {
        let fleet = generate_fleet(&gen_spec(42), 0.25, 52).unwrap();
        assert_eq!(fleet.evs[0].node, 1);
        assert_eq!(fleet.evs[1].node, 2);
        assert_eq!(fleet.evs[2].node, 2);
        for ev in &fleet.evs {
            assert!((18.0..=20.0).contains(&ev.capacity_kwh));
            assert!((0.3..=0.5).contains(&ev.soc_ini));
            assert!((0.7..=0.9).contains(&ev.soc_des));
        }
    }

    fn baseline_spec() -> BaselineGenSpec {
        BaselineGenSpec {
            seed: 1,
            rng: RngKind::ChaCha20,
            peak_kw: 1000.0,
            valley_kw: 550.0,
            end_kw: 700.0,
            valley_position: 0.6,
            power_factor: 0.95,
            noise_std: 0.0,
            scale: 1.0,
            bus_weights: None,
        }
    }

    #[test]
    fn baseline_zero_scale_is_zero() {
        let mut spec = baseline_spec();
        spec.scale = 0.0;
        let b = generate_baseline(&spec, 3, 10).unwrap();
        assert!(b.p.iter().all(|&v| v == 0.0));
        assert!(b.q.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn baseline_has_interior_valley_and_positive_values() {
        let b = generate_baseline(&baseline_spec(), 2, 52).unwrap();
        let agg = b.aggregate();
        assert!(agg.iter().all(|&v| v > 0.0));
        let (argmin, _) = agg
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &v)| {
                if v < acc.1 { (i, v) } else { acc }
            });
        assert!(argmin > 0 && argmin < 51, "valley at {argmin}");
        assert!(agg[0] > agg[argmin]);
        assert!(agg[51] > agg[argmin]);
    }

    #[test]
    fn baseline_csv_round_trip() {
        let dir = std::env::temp_dir().join(format!("vfill-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("baseline.csv");
        let mut spec = baseline_spec();
        spec.noise_std = 0.02;
        let b = generate_baseline(&spec, 3, 8).unwrap();
        write_baseline_csv(&b, &path).unwrap();
        let parsed = read_baseline_csv(&path, 3, 8).unwrap();
        for (a, b) in parsed.p.iter().zip(b.p.iter()) {
            assert_eq!(a, b);
        }
        for (a, b) in parsed.q.iter().zip(b.q.iter()) {
            assert_eq!(a, b);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn echo_normalizes_execution_knobs() {
        let json = r#"{
            "feeder": "feeder.json",
            "fleet": {"generate": {"seed": 1, "per_node": [{"node": 1, "count": 1}],
                      "p_max_kw": 6.6, "capacity_range_kwh": [18, 20],
                      "soc_ini_range": [0.3, 0.5], "soc_des_range": [0.7, 0.9], "eta": 0.9}},
            "baseline": {"generate": {"peak_kw": 100, "valley_kw": 50, "end_kw": 70}},
            "horizon": {"t_steps": 4, "dt_hours": 0.25},
            "solver": {"alpha": 1e-4, "beta": 1.8, "tau_c": 0.974, "tau_lambda": 0.974,
                       "k_max": 25, "eps": 1e-4, "v_min": 0.954},
            "workers": 8,
            "trace": true,
            "output": "somewhere"
        }"#;
        let config = ScenarioConfig::from_json(json).unwrap();
        let echo = config.echo();
        assert_eq!(echo.workers, 1);
        assert!(!echo.trace);
        assert!(echo.output.is_none());
        let a = serde_json::to_string(&config.echo()).unwrap();
        let b = serde_json::to_string(&echo).unwrap();
        assert_eq!(a, b);
    }
}
