//! EV population model.
//!
//! Per-EV charging parameters, the energy requirement, and the feasible-set
//! projection used by every primal update. The feasible set of one EV is the
//! capped simplex {c ∈ [0,1]^T : Σ c = K} after normalizing the energy
//! equality E_req = η·Δt·P̃·Σ c.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum FleetError {
    #[error("EV {id}: required rate-sum {k:.4} outside [0, {t_steps}] — cannot finish in the horizon")]
    InfeasibleTarget { id: usize, k: f64, t_steps: usize },
    #[error("EV {id}: invalid parameter: {reason}")]
    InvalidParameter { id: usize, reason: String },
}

/// One EV charger: level, battery, SOC window, efficiency.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvSpec {
    pub id: usize,
    /// Bus the charger is attached to, 1-based.
    pub node: usize,
    /// Maximum charging power P̃ in kW.
    pub p_max_kw: f64,
    /// Battery capacity Ê in kWh.
    pub capacity_kwh: f64,
    pub soc_ini: f64,
    pub soc_des: f64,
    /// Charging efficiency η in (0, 1].
    pub eta: f64,
}

impl EvSpec {
    pub fn validate(&self) -> Result<(), FleetError> {
        let fail = |reason: String| FleetError::InvalidParameter {
            id: self.id,
            reason,
        };
        if self.p_max_kw <= 0.0 {
            return Err(fail(format!("p_max_kw must be positive, got {}", self.p_max_kw)));
        }
        if self.capacity_kwh <= 0.0 {
            return Err(fail(format!(
                "capacity_kwh must be positive, got {}",
                self.capacity_kwh
            )));
        }
        if !(0.0..=1.0).contains(&self.soc_ini) || !(0.0..=1.0).contains(&self.soc_des) {
            return Err(fail("SOC values must lie in [0, 1]".into()));
        }
        if self.soc_des < self.soc_ini {
            return Err(fail(format!(
                "soc_des {} below soc_ini {}",
                self.soc_des, self.soc_ini
            )));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(fail(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        Ok(())
    }
}

/// Total battery energy required: E_req = Ê·(SOC_des − SOC_ini), kWh.
pub fn required_energy(ev: &EvSpec) -> f64 {
    ev.capacity_kwh * (ev.soc_des - ev.soc_ini)
}

/// The per-EV feasible set after normalizing the energy equality.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FeasibleSet {
    /// Required rate-sum K = E_req / (η·Δt·P̃), dimensionless.
    pub k_sum: f64,
    pub t_steps: usize,
}

/// The EV population, ordered ascending by node then per-node index.
#[derive(Debug, Clone)]
pub struct Fleet {
    pub evs: Vec<EvSpec>,
    /// Sampling interval Δt in hours.
    pub dt_hours: f64,
    /// Horizon length in steps.
    pub t_steps: usize,
}

impl Fleet {
    /// Validates and re-indexes the EVs: sorts stably by node (preserving
    /// per-node file order) and reassigns ids 0..s-1.
    pub fn new(mut evs: Vec<EvSpec>, dt_hours: f64, t_steps: usize) -> Result<Self, FleetError> {
        evs.sort_by_key(|ev| ev.node);
        for (i, ev) in evs.iter_mut().enumerate() {
            ev.id = i;
        }
        let fleet = Self { evs, dt_hours, t_steps };
        for ev in &fleet.evs {
            ev.validate()?;
            fleet.feasible_set(ev)?;
        }
        Ok(fleet)
    }

    pub fn from_json(json: &str, dt_hours: f64, t_steps: usize) -> Result<Self, String> {
        let evs: Vec<EvSpec> = serde_json::from_str(json).map_err(|e| e.to_string())?;
        Self::new(evs, dt_hours, t_steps).map_err(|e| e.to_string())
    }

    pub fn len(&self) -> usize {
        self.evs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.evs.is_empty()
    }

    pub fn feasible_set(&self, ev: &EvSpec) -> Result<FeasibleSet, FleetError> {
        let k = required_energy(ev) / (ev.eta * self.dt_hours * ev.p_max_kw);
        if !k.is_finite() || k < 0.0 || k > self.t_steps as f64 {
            return Err(FleetError::InfeasibleTarget {
                id: ev.id,
                k,
                t_steps: self.t_steps,
            });
        }
        Ok(FeasibleSet {
            k_sum: k,
            t_steps: self.t_steps,
        })
    }

    /// Required rate-sums for all EVs, fleet order.
    pub fn targets(&self) -> Result<Vec<f64>, FleetError> {
        self.evs.iter().map(|ev| Ok(self.feasible_set(ev)?.k_sum)).collect()
    }

    pub fn p_max(&self) -> Vec<f64> {
        self.evs.iter().map(|ev| ev.p_max_kw).collect()
    }
}

/// Euclidean projection onto {z ∈ [0,1]^T : Σ z = K}.
///
/// Bisects the scalar multiplier μ of z = clip(c + μ, 0, 1) over
/// μ ∈ [-1 - max(c), 1 - min(c)] until |Σ z − K| ≤ 1e-10, at most 200 steps.
pub fn project_feasible(c: &Array1<f64>, k_sum: f64) -> Result<Array1<f64>, FleetError> {
    let t_steps = c.len();
    if !k_sum.is_finite() || k_sum < 0.0 || k_sum > t_steps as f64 {
        return Err(FleetError::InfeasibleTarget {
            id: usize::MAX,
            k: k_sum,
            t_steps,
        });
    }
    let clip_sum = |mu: f64| -> f64 { c.iter().map(|&v| (v + mu).clamp(0.0, 1.0)).sum() };
    let c_max = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let c_min = c.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut lo = -1.0 - c_max;
    let mut hi = 1.0 - c_min;
    let mut mu = 0.5 * (lo + hi);
    for _ in 0..200 {
        mu = 0.5 * (lo + hi);
        let s = clip_sum(mu);
        if (s - k_sum).abs() <= 1e-10 {
            break;
        }
        if s < k_sum {
            lo = mu;
        } else {
            hi = mu;
        }
    }
    Ok(c.mapv(|v| (v + mu).clamp(0.0, 1.0)))
}

/// The composed double projection Π((1/τ)·Π(τ·x)).
pub fn shrink_project(x: &Array1<f64>, tau: f64, k_sum: f64) -> Result<Array1<f64>, FleetError> {
    let inner = project_feasible(&x.mapv(|v| tau * v), k_sum)?;
    project_feasible(&inner.mapv(|v| v / tau), k_sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ev(capacity: f64, soc_ini: f64, soc_des: f64) -> EvSpec {
        EvSpec {
            id: 0,
            node: 1,
            p_max_kw: 6.6,
            capacity_kwh: capacity,
            soc_ini,
            soc_des,
            eta: 0.9,
        }
    }

    #[test]
    fn required_energy_examples() {
        assert!((required_energy(&ev(20.0, 0.5, 0.9)) - 8.0).abs() < 1e-12);
        assert!((required_energy(&ev(18.0, 0.3, 0.7)) - 7.2).abs() < 1e-12);
        assert_eq!(required_energy(&ev(20.0, 0.4, 0.4)), 0.0);
    }

    #[test]
    fn fleet_reindexes_by_node() {
        let mut a = ev(20.0, 0.3, 0.7);
        a.node = 3;
        let mut b = ev(18.0, 0.3, 0.7);
        b.node = 1;
        let fleet = Fleet::new(vec![a, b], 0.25, 52).unwrap();
        assert_eq!(fleet.evs[0].node, 1);
        assert_eq!(fleet.evs[0].id, 0);
        assert_eq!(fleet.evs[1].node, 3);
        assert_eq!(fleet.evs[1].id, 1);
    }

    #[test]
    fn infeasible_target_rejected_at_load() {
        // 0.4·20 kWh in 2 steps of 0.25 h at 6.6 kW: K = 8/(0.9·0.25·6.6) ≈ 5.4 > 2.
        let result = Fleet::new(vec![ev(20.0, 0.3, 0.7)], 0.25, 2);
        assert!(matches!(result, Err(FleetError::InfeasibleTarget { .. })));
    }

    #[test]
    fn projection_feasible_point_unchanged() {
        let c = array![0.2, 0.5, 0.3];
        let z = project_feasible(&c, 1.0).unwrap();
        for (a, b) in z.iter().zip(c.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn projection_full_target_is_all_ones() {
        let c = array![0.1, -2.0, 0.6, 3.0];
        let z = project_feasible(&c, 4.0).unwrap();
        for v in z.iter() {
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn projection_frozen_example() {
        // KKT by hand: μ = 0, the first entry clips at 1, the rest are free.
        let z = project_feasible(&array![1.2, 0.4, 0.1], 1.5).unwrap();
        let want = [1.0, 0.4, 0.1];
        for (a, b) in z.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-9, "{z:?}");
        }
    }

    #[test]
    fn projection_rejects_bad_target() {
        assert!(project_feasible(&array![0.0, 0.0], 2.5).is_err());
        assert!(project_feasible(&array![0.0, 0.0], -0.1).is_err());
    }

    #[test]
    fn shrink_tau_one_is_plain_projection() {
        let x = array![0.9, -0.4, 0.7];
        let a = shrink_project(&x, 1.0, 1.2).unwrap();
        let b = project_feasible(&x, 1.2).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn shrink_frozen_example() {
        // τx = (0.25, 0.25) projects to (0.5, 0.5); ×2 = (1, 1) projects back.
        let z = shrink_project(&array![0.5, 0.5], 0.5, 1.0).unwrap();
        for v in z.iter() {
            assert!((v - 0.5).abs() < 1e-10);
        }
    }

    #[test]
    fn shrink_output_always_feasible() {
        let x = array![2.3, -1.7, 0.4, 0.9];
        let z = shrink_project(&x, 0.6, 1.9).unwrap();
        let sum: f64 = z.sum();
        assert!((sum - 1.9).abs() < 1e-8);
        for v in z.iter() {
            assert!((-1e-12..=1.0 + 1e-12).contains(v));
        }
    }
}
