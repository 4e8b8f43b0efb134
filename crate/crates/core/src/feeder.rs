//! Radial distribution network model.
//!
//! Builds the shared-path adjacency matrices of the linearized branch-flow
//! (LinDistFlow) voltage model, the sensitivity operator mapping normalized
//! EV charging rates to squared-voltage changes, and evaluates squared nodal
//! voltage magnitudes. Impedances are per-unit, powers are kW converted
//! through `s_base`, squared voltages are tracked in p.u.².

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::fleet::Fleet;

#[derive(Debug, thiserror::Error)]
pub enum FeederError {
    #[error("feeder is not a radial tree rooted at the head: {0}")]
    NonRadialTopology(String),
    #[error("bus {0} is not connected to the feeder head")]
    DisconnectedBus(usize),
    #[error("EV {ev} is attached to bus {node}, but the feeder has buses 1..={n}")]
    BadNodeIndex { ev: usize, node: usize, n: usize },
    #[error("time index {t} out of range for horizon {t_steps}")]
    IndexOutOfRange { t: usize, t_steps: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid feeder parameter: {0}")]
    InvalidParameter(String),
}

/// One distribution line between two buses, impedance in per-unit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
}

fn default_v0() -> f64 {
    1.0
}

/// Radial network: bus 0 is the feeder head, buses 1..=n carry load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeederModel {
    /// Feeder-head voltage magnitude in p.u.
    #[serde(default = "default_v0")]
    pub v0: f64,
    /// Power base in kW used to convert loads to per-unit.
    pub s_base: f64,
    pub lines: Vec<Line>,
}

impl FeederModel {
    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }

    /// Bus count, feeder head excluded.
    pub fn bus_count(&self) -> usize {
        self.lines
            .iter()
            .map(|l| l.from.max(l.to))
            .max()
            .unwrap_or(0)
    }

    /// Checks radiality and parameter signs, returning the per-bus parent
    /// array (parent[ν-1] is the bus upstream of ν).
    pub fn validate(&self) -> Result<Vec<usize>, FeederError> {
        if self.v0 <= 0.0 {
            return Err(FeederError::InvalidParameter(format!(
                "v0 must be positive, got {}",
                self.v0
            )));
        }
        if self.s_base <= 0.0 {
            return Err(FeederError::InvalidParameter(format!(
                "s_base must be positive, got {}",
                self.s_base
            )));
        }
        for l in &self.lines {
            if l.r < 0.0 || l.x < 0.0 {
                return Err(FeederError::InvalidParameter(format!(
                    "line {}-{} has negative impedance",
                    l.from, l.to
                )));
            }
            if l.from == l.to {
                return Err(FeederError::NonRadialTopology(format!(
                    "self-loop at bus {}",
                    l.from
                )));
            }
        }
        let n = self.bus_count();
        if self.lines.len() != n {
            return Err(FeederError::NonRadialTopology(format!(
                "{} lines for {} buses (a tree needs exactly {})",
                self.lines.len(),
                n,
                n
            )));
        }

        // BFS from the head; every line must attach a new bus.
        let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n + 1];
        for (idx, l) in self.lines.iter().enumerate() {
            adjacency[l.from].push((l.to, idx));
            adjacency[l.to].push((l.from, idx));
        }
        let mut parent = vec![usize::MAX; n];
        let mut visited = vec![false; n + 1];
        let mut line_used = vec![false; self.lines.len()];
        visited[0] = true;
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(bus) = queue.pop_front() {
            for &(next, idx) in &adjacency[bus] {
                if line_used[idx] {
                    continue;
                }
                line_used[idx] = true;
                if visited[next] {
                    return Err(FeederError::NonRadialTopology(format!(
                        "cycle through bus {next}"
                    )));
                }
                visited[next] = true;
                parent[next - 1] = bus;
                queue.push_back(next);
            }
        }
        if let Some(bus) = (1..=n).find(|&b| !visited[b]) {
            return Err(FeederError::DisconnectedBus(bus));
        }
        Ok(parent)
    }
}

/// Shared-path resistance/reactance matrices of the radial feeder.
#[derive(Debug, Clone)]
pub struct AdjacencyMatrices {
    /// R[ν][κ] = total resistance of the lines shared by the head-to-ν and
    /// head-to-κ paths, per-unit. Symmetric, entrywise nonnegative.
    pub r: Array2<f64>,
    /// Same for reactance.
    pub x: Array2<f64>,
}

impl AdjacencyMatrices {
    pub fn bus_count(&self) -> usize {
        self.r.nrows()
    }
}

/// Maps normalized charging rates to squared-voltage change: D = -2·R·G·P̃
/// with P̃ in per-unit. Entrywise nonpositive on a resistive feeder.
#[derive(Debug, Clone)]
pub struct SensitivityMatrix {
    pub d: Array2<f64>,
}

/// Per-bus baseline load over the horizon, kW / kvar.
#[derive(Debug, Clone)]
pub struct BaselineLoad {
    /// Real power, one row per bus, one column per time step.
    pub p: Array2<f64>,
    /// Reactive power, same layout.
    pub q: Array2<f64>,
}

impl BaselineLoad {
    pub fn new(p: Array2<f64>, q: Array2<f64>) -> Result<Self, FeederError> {
        if p.dim() != q.dim() {
            return Err(FeederError::DimensionMismatch(format!(
                "p is {:?} but q is {:?}",
                p.dim(),
                q.dim()
            )));
        }
        if p.iter().chain(q.iter()).any(|v| !v.is_finite()) {
            return Err(FeederError::InvalidParameter(
                "baseline load contains non-finite entries".into(),
            ));
        }
        Ok(Self { p, q })
    }

    pub fn zero(n: usize, t_steps: usize) -> Self {
        Self {
            p: Array2::zeros((n, t_steps)),
            q: Array2::zeros((n, t_steps)),
        }
    }

    pub fn t_steps(&self) -> usize {
        self.p.ncols()
    }

    /// Aggregate real baseline P_b(t), the column sums of `p`.
    pub fn aggregate(&self) -> Array1<f64> {
        self.p.sum_axis(ndarray::Axis(0))
    }
}

/// Builds the shared-path adjacency matrices R and X.
pub fn build_adjacency(feeder: &FeederModel) -> Result<AdjacencyMatrices, FeederError> {
    let parent = feeder.validate()?;
    let n = feeder.bus_count();

    // Per-line impedance looked up by the downstream bus of the line.
    let mut line_r = vec![0.0; n + 1];
    let mut line_x = vec![0.0; n + 1];
    for l in &feeder.lines {
        let down = if parent[l.to - 1] == l.from { l.to } else { l.from };
        line_r[down] = l.r;
        line_x[down] = l.x;
    }

    // Head-to-bus path as an ancestor set; n is small so dense sets are fine.
    let mut on_path = vec![vec![false; n + 1]; n];
    let mut depth_order: Vec<usize> = (1..=n).collect();
    for &bus in &depth_order {
        let mut cur = bus;
        while cur != 0 {
            on_path[bus - 1][cur] = true;
            cur = parent[cur - 1];
        }
    }
    depth_order.sort_unstable();

    let mut r = Array2::zeros((n, n));
    let mut x = Array2::zeros((n, n));
    for nu in 1..=n {
        for ka in nu..=n {
            let mut sr = 0.0;
            let mut sx = 0.0;
            for bus in 1..=n {
                if on_path[nu - 1][bus] && on_path[ka - 1][bus] {
                    sr += line_r[bus];
                    sx += line_x[bus];
                }
            }
            r[[nu - 1, ka - 1]] = sr;
            r[[ka - 1, nu - 1]] = sr;
            x[[nu - 1, ka - 1]] = sx;
            x[[ka - 1, nu - 1]] = sx;
        }
    }
    Ok(AdjacencyMatrices { r, x })
}

/// Builds D = -2·R·G·diag(P̃_i / s_base), with G the node-aggregation matrix.
pub fn build_sensitivity(
    adj: &AdjacencyMatrices,
    fleet: &Fleet,
    s_base: f64,
) -> Result<SensitivityMatrix, FeederError> {
    let n = adj.bus_count();
    let s = fleet.evs.len();
    let mut d = Array2::zeros((n, s));
    for (i, ev) in fleet.evs.iter().enumerate() {
        if ev.node == 0 || ev.node > n {
            return Err(FeederError::BadNodeIndex {
                ev: ev.id,
                node: ev.node,
                n,
            });
        }
        let p_pu = ev.p_max_kw / s_base;
        for nu in 0..n {
            d[[nu, i]] = -2.0 * adj.r[[nu, ev.node - 1]] * p_pu;
        }
    }
    Ok(SensitivityMatrix { d })
}

/// Squared voltages under the baseline load alone:
/// y_d(t) = v0²·1 − 2·R·p_b(t)/s_base − 2·X·q_b(t)/s_base.
pub fn baseline_voltage(
    adj: &AdjacencyMatrices,
    baseline: &BaselineLoad,
    v0: f64,
    s_base: f64,
    t: usize,
) -> Result<Array1<f64>, FeederError> {
    let t_steps = baseline.t_steps();
    if t >= t_steps {
        return Err(FeederError::IndexOutOfRange { t, t_steps });
    }
    let n = adj.bus_count();
    if baseline.p.nrows() != n {
        return Err(FeederError::DimensionMismatch(format!(
            "baseline has {} bus rows, feeder has {n} buses",
            baseline.p.nrows()
        )));
    }
    let p_pu = baseline.p.column(t).mapv(|v| v / s_base);
    let q_pu = baseline.q.column(t).mapv(|v| v / s_base);
    let drop = adj.r.dot(&p_pu) * 2.0 + adj.x.dot(&q_pu) * 2.0;
    Ok(Array1::from_elem(n, v0 * v0) - drop)
}

/// Baseline squared voltages for every time step, one column per step.
pub fn baseline_voltage_series(
    adj: &AdjacencyMatrices,
    baseline: &BaselineLoad,
    v0: f64,
    s_base: f64,
) -> Result<Array2<f64>, FeederError> {
    let n = adj.bus_count();
    let t_steps = baseline.t_steps();
    let mut y_d = Array2::zeros((n, t_steps));
    for t in 0..t_steps {
        y_d.column_mut(t)
            .assign(&baseline_voltage(adj, baseline, v0, s_base, t)?);
    }
    Ok(y_d)
}

/// Squared voltages with EV charging: y(t) = y_d(t) + D·C(t).
pub fn nodal_voltages(
    sensitivity: &SensitivityMatrix,
    y_d: &Array1<f64>,
    rates: &Array1<f64>,
) -> Result<Array1<f64>, FeederError> {
    let (n, s) = sensitivity.d.dim();
    if y_d.len() != n || rates.len() != s {
        return Err(FeederError::DimensionMismatch(format!(
            "D is {n}x{s}, y_d has {} entries, C has {}",
            y_d.len(),
            rates.len()
        )));
    }
    Ok(y_d + &sensitivity.d.dot(rates))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fleet::EvSpec;

    fn single_line_feeder(r: f64, x: f64) -> FeederModel {
        FeederModel {
            v0: 1.0,
            s_base: 1000.0,
            lines: vec![Line { from: 0, to: 1, r, x }],
        }
    }

    fn chain_feeder() -> FeederModel {
        FeederModel {
            v0: 1.0,
            s_base: 1000.0,
            lines: vec![
                Line { from: 0, to: 1, r: 0.1, x: 0.05 },
                Line { from: 1, to: 2, r: 0.2, x: 0.08 },
            ],
        }
    }

    fn ev_at(node: usize, p_max_kw: f64) -> EvSpec {
        EvSpec {
            id: 0,
            node,
            p_max_kw,
            capacity_kwh: 20.0,
            soc_ini: 0.3,
            soc_des: 0.7,
            eta: 0.9,
        }
    }

    // K ≈ 5.39 rate-steps for the EV above; 8 steps keep it feasible.
    const TEST_STEPS: usize = 8;

    #[test]
    fn single_line_adjacency() {
        let adj = build_adjacency(&single_line_feeder(0.1, 0.2)).unwrap();
        assert_eq!(adj.r[[0, 0]], 0.1);
        assert_eq!(adj.x[[0, 0]], 0.2);
    }

    #[test]
    fn chain_adjacency_from_path_sets() {
        let adj = build_adjacency(&chain_feeder()).unwrap();
        // Hand path-set enumeration: paths {0-1} and {0-1, 1-2}.
        assert_eq!(adj.r[[0, 0]], 0.1);
        assert_eq!(adj.r[[0, 1]], 0.1);
        assert_eq!(adj.r[[1, 0]], 0.1);
        assert!((adj.r[[1, 1]] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn cycle_rejected() {
        let feeder = FeederModel {
            v0: 1.0,
            s_base: 1000.0,
            lines: vec![
                Line { from: 0, to: 1, r: 0.1, x: 0.1 },
                Line { from: 1, to: 2, r: 0.1, x: 0.1 },
                Line { from: 2, to: 1, r: 0.1, x: 0.1 },
            ],
        };
        assert!(matches!(
            build_adjacency(&feeder),
            Err(FeederError::NonRadialTopology(_))
        ));
    }

    #[test]
    fn disconnected_bus_rejected() {
        let feeder = FeederModel {
            v0: 1.0,
            s_base: 1000.0,
            lines: vec![
                Line { from: 0, to: 1, r: 0.1, x: 0.1 },
                Line { from: 2, to: 3, r: 0.1, x: 0.1 },
                Line { from: 3, to: 2, r: 0.1, x: 0.1 },
            ],
        };
        assert!(build_adjacency(&feeder).is_err());
    }

    #[test]
    fn sensitivity_single_ev() {
        let adj = build_adjacency(&single_line_feeder(0.1, 0.2)).unwrap();
        let fleet = Fleet::new(vec![ev_at(1, 6.6)], 0.25, TEST_STEPS).unwrap();
        let sens = build_sensitivity(&adj, &fleet, 1000.0).unwrap();
        assert!((sens.d[[0, 0]] - (-0.00132)).abs() < 1e-15);
    }

    #[test]
    fn sensitivity_matches_naive_triple_product() {
        let adj = build_adjacency(&chain_feeder()).unwrap();
        let fleet = Fleet::new(vec![ev_at(2, 6.6)], 0.25, TEST_STEPS).unwrap();
        let sens = build_sensitivity(&adj, &fleet, 1000.0).unwrap();
        // Naive route: materialize G and P̃, multiply -2·R·G·P̃ by hand.
        let g = [[0.0], [1.0]];
        let p_pu = 6.6 / 1000.0;
        for nu in 0..2 {
            let mut want = 0.0;
            for l in 0..2 {
                want += -2.0 * adj.r[[nu, l]] * g[l][0] * p_pu;
            }
            assert!((sens.d[[nu, 0]] - want).abs() < 1e-15);
        }
        // Column of the EV at bus 2 is -2·(0.1, 0.3)·(P̃/s_base).
        let expected = [-2.0 * 0.1 * p_pu, -2.0 * 0.3 * p_pu];
        for nu in 0..2 {
            assert!((sens.d[[nu, 0]] - expected[nu]).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_resistance_gives_zero_sensitivity() {
        let adj = build_adjacency(&single_line_feeder(0.0, 0.2)).unwrap();
        let fleet = Fleet::new(vec![ev_at(1, 6.6)], 0.25, TEST_STEPS).unwrap();
        let sens = build_sensitivity(&adj, &fleet, 1000.0).unwrap();
        assert_eq!(sens.d[[0, 0]], 0.0);
    }

    #[test]
    fn bad_node_index_rejected() {
        let adj = build_adjacency(&single_line_feeder(0.1, 0.2)).unwrap();
        let fleet = Fleet::new(vec![ev_at(2, 6.6)], 0.25, TEST_STEPS).unwrap();
        assert!(matches!(
            build_sensitivity(&adj, &fleet, 1000.0),
            Err(FeederError::BadNodeIndex { .. })
        ));
    }

    #[test]
    fn baseline_voltage_zero_load() {
        let adj = build_adjacency(&chain_feeder()).unwrap();
        let baseline = BaselineLoad::zero(2, 4);
        let y = baseline_voltage(&adj, &baseline, 1.0, 1000.0, 0).unwrap();
        assert_eq!(y, Array1::from_elem(2, 1.0));
    }

    #[test]
    fn baseline_voltage_single_bus() {
        let adj = build_adjacency(&single_line_feeder(0.1, 0.0)).unwrap();
        let mut baseline = BaselineLoad::zero(1, 1);
        baseline.p[[0, 0]] = 100.0;
        let y = baseline_voltage(&adj, &baseline, 1.0, 1000.0, 0).unwrap();
        assert!((y[0] - 0.98).abs() < 1e-15);
    }

    #[test]
    fn baseline_voltage_time_bounds() {
        let adj = build_adjacency(&single_line_feeder(0.1, 0.0)).unwrap();
        let baseline = BaselineLoad::zero(1, 3);
        assert!(matches!(
            baseline_voltage(&adj, &baseline, 1.0, 1000.0, 3),
            Err(FeederError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn nodal_voltages_zero_rates() {
        let adj = build_adjacency(&chain_feeder()).unwrap();
        let fleet = Fleet::new(vec![ev_at(2, 6.6)], 0.25, TEST_STEPS).unwrap();
        let sens = build_sensitivity(&adj, &fleet, 1000.0).unwrap();
        let y_d = Array1::from_elem(2, 0.99);
        let y = nodal_voltages(&sens, &y_d, &Array1::zeros(1)).unwrap();
        assert_eq!(y, y_d);
    }

    #[test]
    fn nodal_voltages_single_ev() {
        let sens = SensitivityMatrix {
            d: Array2::from_elem((1, 1), -0.00132),
        };
        let y = nodal_voltages(&sens, &Array1::from_elem(1, 0.98), &Array1::from_elem(1, 1.0))
            .unwrap();
        assert!((y[0] - 0.97868).abs() < 1e-15);
    }

    #[test]
    fn nodal_voltages_dimension_mismatch() {
        let sens = SensitivityMatrix {
            d: Array2::zeros((2, 3)),
        };
        assert!(matches!(
            nodal_voltages(&sens, &Array1::zeros(2), &Array1::zeros(2)),
            Err(FeederError::DimensionMismatch(_))
        ));
    }
}
