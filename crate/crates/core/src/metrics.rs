//! Post-run analytics and report assembly.
//!
//! A `RunReport` is the single JSON artifact of a run: converged profiles,
//! load and voltage traces, the objective, the attack audit, and an echo of
//! the configuration that produced it. Every derived trace can be recomputed
//! from the profiles and the scenario. Comparisons between an attacked and an
//! attack-free run add load/voltage deviations, the stealthiness indicator,
//! and the objective-sandwich audit.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::attacks::{self, Theorem2Audit, WiretapAccess};
use crate::engine::{self, EngineError, SolverOutcome, StopReason};
use crate::fleet::required_energy;
use crate::scenario::{ResolvedScenario, ScenarioConfig};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("flatness window is empty")]
    EmptyWindow,
    #[error("runs are not from the same scenario: {0}")]
    ScenarioMismatch(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Attack(#[from] attacks::AttackError),
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Per-EV audit row embedded in the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvRecord {
    pub id: usize,
    pub node: usize,
    pub p_max_kw: f64,
    /// Required rate-sum K.
    pub target_rate_sum: f64,
    pub required_kwh: f64,
    pub delivered_kwh: f64,
}

/// Stealth trigger bookkeeping for one attacker.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriggerRecord {
    pub agent: usize,
    pub iteration: usize,
}

/// Single-run attack bookkeeping: triggers, wiretap accesses, and the
/// interest values such a run can audit on its own. The two-run objective
/// sandwich lives in `ComparisonReport`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackAudit {
    pub active: bool,
    pub trigger_iterations: Vec<TriggerRecord>,
    pub wiretap_accesses: Vec<WiretapAccess>,
    /// Σ ω₁·𝒢(ĉ_i) at the converged profiles.
    pub interest_value: f64,
    /// Σ ω₁·max 𝒢 over each attacker's feasible set (closed-form vertices).
    pub interest_vertex_bound: f64,
}

/// The JSON artifact of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub converged: bool,
    pub stop_reason: StopReason,
    pub iterations: usize,
    pub objective: f64,
    pub min_voltage_pu: f64,
    /// Total load P_b + Σ P̃·c per step, kW.
    pub total_load: Vec<f64>,
    /// Aggregated baseline P_b per step, kW.
    pub baseline_load: Vec<f64>,
    /// Nodal voltage magnitudes in p.u. (square roots of the squared-voltage
    /// model output), one row per bus.
    pub voltages: Vec<Vec<f64>>,
    /// Charging rates, one row per EV.
    pub profiles: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub fleet: Vec<EvRecord>,
    pub attack_audit: AttackAudit,
    /// The configuration that produced this run, seed included.
    pub config: ScenarioConfig,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("report serializes");
        out.push('\n');
        out
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }

    pub fn profile_matrix(&self) -> Array2<f64> {
        let s = self.profiles.len();
        let t = self.profiles.first().map_or(0, Vec::len);
        let mut m = Array2::zeros((s, t));
        for (i, row) in self.profiles.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                m[[i, t]] = *v;
            }
        }
        m
    }
}

/// Total load P_b(t) + Σ_i P̃_i·c_i(t), kW.
pub fn total_load(
    profiles: &Array2<f64>,
    p_base: &Array1<f64>,
    p_max: &[f64],
) -> Result<Array1<f64>, MetricsError> {
    Ok(engine::aggregate_load(profiles, p_base, p_max)?)
}

/// Spread statistics of a load trace over a window.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Flatness {
    pub max_minus_min_kw: f64,
    /// Population standard deviation divided by the mean.
    pub rel_std: f64,
}

pub fn flatness(load: &[f64], window: std::ops::Range<usize>) -> Result<Flatness, MetricsError> {
    if window.is_empty() || window.end > load.len() {
        return Err(MetricsError::EmptyWindow);
    }
    let slice = &load[window];
    let count = slice.len() as f64;
    let mean = slice.iter().sum::<f64>() / count;
    let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
    let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = slice.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(Flatness {
        max_minus_min_kw: max - min,
        rel_std: if mean != 0.0 { var.sqrt() / mean } else { f64::INFINITY },
    })
}

/// Flat-window rule: from the first step where the aggregate EV load exceeds
/// 1% of the fleet's total rated power, to the horizon end.
pub fn flat_window(ev_load: &Array1<f64>, p_max: &[f64]) -> std::ops::Range<usize> {
    let threshold = 0.01 * p_max.iter().sum::<f64>();
    let start = ev_load
        .iter()
        .position(|&v| v > threshold)
        .unwrap_or(ev_load.len());
    start..ev_load.len()
}

/// Stealthiness indicator ζ: Frobenius distance between the converged
/// profiles of two runs.
pub fn stealthiness(a: &RunReport, b: &RunReport) -> Result<f64, MetricsError> {
    if a.profiles.len() != b.profiles.len()
        || a.profiles.first().map_or(0, Vec::len) != b.profiles.first().map_or(0, Vec::len)
    {
        return Err(MetricsError::DimensionMismatch(format!(
            "profiles {}x{} vs {}x{}",
            a.profiles.len(),
            a.profiles.first().map_or(0, Vec::len),
            b.profiles.len(),
            b.profiles.first().map_or(0, Vec::len)
        )));
    }
    let mut sum = 0.0;
    for (ra, rb) in a.profiles.iter().zip(b.profiles.iter()) {
        for (va, vb) in ra.iter().zip(rb.iter()) {
            sum += (va - vb) * (va - vb);
        }
    }
    Ok(sum.sqrt())
}

/// Attacked-vs-attack-free deltas; percentages are relative to the
/// attack-free run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub zeta: f64,
    pub objective_attack_free: f64,
    pub objective_attacked: f64,
    pub objective_delta: f64,
    pub objective_delta_pct: f64,
    /// Per-step attacked − attack-free total load, kW.
    pub load_deviation_kw: Vec<f64>,
    pub max_load_deviation_kw: f64,
    pub max_load_deviation_pct: f64,
    /// Per-bus maximum absolute voltage deviation, p.u.
    pub per_bus_max_voltage_deviation_pu: Vec<f64>,
    pub max_voltage_deviation_pu: f64,
    pub theorem2: Option<Theorem2Audit>,
}

/// Compares paired runs. The objective sandwich is audited whenever the
/// attacked run carries attack sections; a violated bound is an error, never
/// a silently passing report.
pub fn compare(
    attacked: &RunReport,
    attack_free: &RunReport,
) -> Result<ComparisonReport, MetricsError> {
    if attacked.baseline_load != attack_free.baseline_load {
        return Err(MetricsError::ScenarioMismatch(
            "baseline load traces differ".into(),
        ));
    }
    if attacked.profiles.len() != attack_free.profiles.len()
        || attacked.voltages.len() != attack_free.voltages.len()
    {
        return Err(MetricsError::ScenarioMismatch(format!(
            "{} agents / {} buses vs {} agents / {} buses",
            attacked.profiles.len(),
            attacked.voltages.len(),
            attack_free.profiles.len(),
            attack_free.voltages.len()
        )));
    }

    let zeta = stealthiness(attacked, attack_free)?;
    let objective_delta = attacked.objective - attack_free.objective;
    let objective_delta_pct = if attack_free.objective != 0.0 {
        100.0 * objective_delta / attack_free.objective
    } else {
        f64::INFINITY
    };

    let mut load_deviation_kw = Vec::with_capacity(attacked.total_load.len());
    let mut max_load_deviation_kw = 0.0f64;
    let mut max_load_deviation_pct = 0.0f64;
    for (a, f) in attacked.total_load.iter().zip(attack_free.total_load.iter()) {
        let dev = a - f;
        load_deviation_kw.push(dev);
        if dev.abs() > max_load_deviation_kw {
            max_load_deviation_kw = dev.abs();
            max_load_deviation_pct = if *f != 0.0 {
                100.0 * dev.abs() / f.abs()
            } else {
                f64::INFINITY
            };
        }
    }

    let mut per_bus_max_voltage_deviation_pu = Vec::with_capacity(attacked.voltages.len());
    for (row_a, row_f) in attacked.voltages.iter().zip(attack_free.voltages.iter()) {
        let max_dev = row_a
            .iter()
            .zip(row_f.iter())
            .map(|(a, f)| (a - f).abs())
            .fold(0.0, f64::max);
        per_bus_max_voltage_deviation_pu.push(max_dev);
    }
    let max_voltage_deviation_pu = per_bus_max_voltage_deviation_pu
        .iter()
        .cloned()
        .fold(0.0, f64::max);

    let theorem2 = if attacked.attack_audit.active {
        Some(attacks::theorem2_bound(
            attacked,
            attack_free,
            &attacked.config.attacks,
        )?)
    } else {
        None
    };

    Ok(ComparisonReport {
        zeta,
        objective_attack_free: attack_free.objective,
        objective_attacked: attacked.objective,
        objective_delta,
        objective_delta_pct,
        load_deviation_kw,
        max_load_deviation_kw,
        max_load_deviation_pct,
        per_bus_max_voltage_deviation_pu,
        max_voltage_deviation_pu,
        theorem2,
    })
}

/// Assembles the report of a finished run.
pub fn build_report(
    resolved: &ResolvedScenario,
    outcome: &SolverOutcome,
) -> Result<RunReport, MetricsError> {
    let p_max = resolved.fleet.p_max();
    let p_base = resolved.baseline.aggregate();
    let total = total_load(&outcome.profiles, &p_base, &p_max)?;

    let y = &resolved.y_d + &resolved.sensitivity.d.dot(&outcome.profiles);
    let voltages: Vec<Vec<f64>> = y
        .rows()
        .into_iter()
        .map(|row| row.iter().map(|v| v.max(0.0).sqrt()).collect())
        .collect();
    let min_voltage_pu = voltages
        .iter()
        .flatten()
        .cloned()
        .fold(f64::INFINITY, f64::min);

    let dt = resolved.fleet.dt_hours;
    let fleet: Vec<EvRecord> = resolved
        .fleet
        .evs
        .iter()
        .enumerate()
        .map(|(i, ev)| {
            let delivered =
                ev.eta * dt * ev.p_max_kw * outcome.profiles.row(i).iter().sum::<f64>();
            EvRecord {
                id: ev.id,
                node: ev.node,
                p_max_kw: ev.p_max_kw,
                target_rate_sum: resolved.targets[i],
                required_kwh: required_energy(ev),
                delivered_kwh: delivered,
            }
        })
        .collect();

    let t_steps = resolved.fleet.t_steps;
    let mut interest_value = 0.0;
    let mut interest_vertex_bound = 0.0;
    for spec in &resolved.config.attacks {
        for agent in spec.agent_ids() {
            let c_i = outcome.profiles.row(agent);
            interest_value += attacks::interest_value(spec, &c_i, t_steps)?;
            interest_vertex_bound +=
                attacks::interest_vertex_max(spec, resolved.targets[agent], t_steps)?;
        }
    }
    let attack_audit = AttackAudit {
        active: resolved.has_active_attacks(),
        trigger_iterations: outcome
            .trigger_iterations
            .iter()
            .map(|&(agent, iteration)| TriggerRecord { agent, iteration })
            .collect(),
        wiretap_accesses: outcome.wiretap_log.clone(),
        interest_value,
        interest_vertex_bound,
    };

    Ok(RunReport {
        converged: outcome.converged,
        stop_reason: outcome.stop_reason,
        iterations: outcome.iterations,
        objective: *outcome.objective_trace.last().unwrap_or(&engine::objective(
            &outcome.profiles,
            &p_base,
            &p_max,
        )?),
        min_voltage_pu,
        total_load: total.to_vec(),
        baseline_load: p_base.to_vec(),
        voltages,
        profiles: outcome
            .profiles
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect(),
        residuals: outcome.residuals.clone(),
        objective_trace: outcome.objective_trace.clone(),
        fleet,
        attack_audit,
        config: resolved.config.clone(),
    })
}

fn open(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, MetricsError> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|source| MetricsError::Io {
            path: path.display().to_string(),
            source,
        })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// `load.csv`: t,baseline,total
pub fn write_load_csv(path: &Path, report: &RunReport) -> Result<(), MetricsError> {
    let mut w = open(path)?;
    writeln!(w, "t,baseline,total").map_err(io_err(path))?;
    for (t, (b, total)) in report
        .baseline_load
        .iter()
        .zip(report.total_load.iter())
        .enumerate()
    {
        writeln!(w, "{t},{b},{total}").map_err(io_err(path))?;
    }
    Ok(())
}

/// `voltage.csv`: bus,t,magnitude (bus is 1-based)
pub fn write_voltage_csv(path: &Path, report: &RunReport) -> Result<(), MetricsError> {
    let mut w = open(path)?;
    writeln!(w, "bus,t,magnitude").map_err(io_err(path))?;
    for (bus, row) in report.voltages.iter().enumerate() {
        for (t, v) in row.iter().enumerate() {
            writeln!(w, "{},{t},{v}", bus + 1).map_err(io_err(path))?;
        }
    }
    Ok(())
}

/// `profiles.csv`: ev,t,rate
pub fn write_profiles_csv(path: &Path, report: &RunReport) -> Result<(), MetricsError> {
    let mut w = open(path)?;
    writeln!(w, "ev,t,rate").map_err(io_err(path))?;
    for (ev, row) in report.profiles.iter().enumerate() {
        for (t, v) in row.iter().enumerate() {
            writeln!(w, "{ev},{t},{v}").map_err(io_err(path))?;
        }
    }
    Ok(())
}

/// `residuals.csv`: k,residual,objective
pub fn write_residuals_csv(path: &Path, report: &RunReport) -> Result<(), MetricsError> {
    let mut w = open(path)?;
    writeln!(w, "k,residual,objective").map_err(io_err(path))?;
    for (k, (r, o)) in report
        .residuals
        .iter()
        .zip(report.objective_trace.iter())
        .enumerate()
    {
        writeln!(w, "{k},{r},{o}").map_err(io_err(path))?;
    }
    Ok(())
}

/// `trace.csv`: k,residual,objective,min_voltage — the engine's per-iteration
/// trace, written when tracing is enabled.
pub fn write_trace_csv(path: &Path, outcome: &SolverOutcome) -> Result<(), MetricsError> {
    let mut w = open(path)?;
    writeln!(w, "k,residual,objective,min_voltage").map_err(io_err(path))?;
    for (k, ((r, o), v)) in outcome
        .residuals
        .iter()
        .zip(outcome.objective_trace.iter())
        .zip(outcome.min_voltage_trace.iter())
        .enumerate()
    {
        writeln!(w, "{k},{r},{o},{v}").map_err(io_err(path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn total_load_zero_profiles_is_baseline() {
        let profiles = Array2::zeros((2, 3));
        let p_base = array![5.0, 6.0, 7.0];
        let load = total_load(&profiles, &p_base, &[6.6, 3.3]).unwrap();
        assert_eq!(load, p_base);
    }

    #[test]
    fn total_load_full_power() {
        let profiles = Array2::ones((1, 2));
        let load = total_load(&profiles, &array![5.0, 6.0], &[6.6]).unwrap();
        assert_eq!(load, array![11.6, 12.6]);
    }

    #[test]
    fn total_load_matches_naive_loop() {
        let profiles = array![[0.2, 0.9, 0.4], [0.7, 0.1, 0.5]];
        let p_base = array![3.0, 1.0, 4.0];
        let p_max = [6.6, 3.3];
        let fast = total_load(&profiles, &p_base, &p_max).unwrap();
        for t in 0..3 {
            let mut want = p_base[t];
            for i in 0..2 {
                want += p_max[i] * profiles[[i, t]];
            }
            assert!((fast[t] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn flatness_constant_load() {
        let f = flatness(&[5.0, 5.0, 5.0], 0..3).unwrap();
        assert_eq!(f.max_minus_min_kw, 0.0);
        assert_eq!(f.rel_std, 0.0);
    }

    #[test]
    fn flatness_simple_spread() {
        let f = flatness(&[1.0, 2.0, 3.0], 0..3).unwrap();
        assert!((f.max_minus_min_kw - 2.0).abs() < 1e-12);
    }

    #[test]
    fn flatness_rejects_empty_window() {
        assert!(matches!(
            flatness(&[1.0, 2.0], 2..2),
            Err(MetricsError::EmptyWindow)
        ));
    }

    #[test]
    fn flat_window_detection() {
        // Threshold is 1% of 10 kW = 0.1 kW.
        let ev_load = array![0.0, 0.05, 0.3, 0.6];
        let window = flat_window(&ev_load, &[4.0, 6.0]);
        assert_eq!(window, 2..4);
        let idle = Array1::zeros(4);
        assert!(flat_window(&idle, &[4.0, 6.0]).is_empty());
    }
}
