//! For-purpose attack vectors.
//!
//! Attackers are ordinary agents that add a crafted term to their own primal
//! update direction. The smooth vector steers the agent toward a flat
//! profile, the rush vector front-loads its charging, and the stealthy
//! variants stay silent until the agent believes the algorithm has converged,
//! then anchor the attack to a wiretapped snapshot of all profiles so the
//! final solution stays close to the unattacked one. The deviation-bound
//! auditor checks the objective sandwich every converged attacked run must
//! satisfy.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::metrics::RunReport;

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error("wiretap snapshot unavailable at iteration {iteration}: {reason}")]
    WiretapUnavailable { iteration: usize, reason: String },
    #[error("agent {agent}'s stealth state is not armed")]
    NotArmed { agent: usize },
    #[error("objective sandwich violated: F(C*)={f_star}, F(Ĉ)={f_hat}, bound={bound}")]
    BoundViolated { f_star: f64, f_hat: f64, bound: f64 },
    #[error("invalid attack specification: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Attack vector selector; `none` leaves the agent honest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackVariant {
    None,
    Smooth,
    Rush,
    StealthySmooth,
    StealthyRush,
}

impl AttackVariant {
    pub fn is_stealthy(self) -> bool {
        matches!(self, AttackVariant::StealthySmooth | AttackVariant::StealthyRush)
    }

    pub fn is_rush(self) -> bool {
        matches!(self, AttackVariant::Rush | AttackVariant::StealthyRush)
    }
}

/// Agents an attack applies to: an explicit id list or a contiguous range.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttackerSet {
    Ids(Vec<usize>),
    Range { start: usize, count: usize },
}

impl AttackerSet {
    pub fn agent_ids(&self) -> Vec<usize> {
        match self {
            AttackerSet::Ids(ids) => {
                let mut ids = ids.clone();
                ids.sort_unstable();
                ids.dedup();
                ids
            }
            AttackerSet::Range { start, count } => (*start..*start + *count).collect(),
        }
    }
}

/// One attack section of a scenario: who, which vector, how hard.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSpec {
    pub attackers: AttackerSet,
    pub variant: AttackVariant,
    /// Self-interest power ω₁.
    #[serde(default)]
    pub omega1: f64,
    /// Stealth power ω₂ (stealthy variants only).
    #[serde(default)]
    pub omega2: f64,
    /// Desired completion step for rush vectors: the first t_d steps carry
    /// the small weight m, the rest the large weight M.
    #[serde(default)]
    pub t_d: Option<usize>,
    #[serde(default)]
    pub m: Option<f64>,
    #[serde(default, rename = "M")]
    pub big_m: Option<f64>,
    /// Stealth trigger threshold ε*_att on the attacker's own residual.
    #[serde(default)]
    pub eps_att: Option<f64>,
}

impl AttackSpec {
    /// Structural checks; `solver_eps` is needed because a stealth trigger
    /// tighter than the solver tolerance would never fire before full
    /// convergence stops the run.
    pub fn validate(&self, t_steps: usize, solver_eps: f64) -> Result<(), AttackError> {
        let fail = |m: String| Err(AttackError::InvalidSpec(m));
        if self.variant == AttackVariant::None {
            return Ok(());
        }
        if !(self.omega1 > 0.0) {
            return fail(format!("omega1 must be positive, got {}", self.omega1));
        }
        if self.omega2 < 0.0 {
            return fail(format!("omega2 must be nonnegative, got {}", self.omega2));
        }
        if self.variant.is_rush() {
            let t_d = match self.t_d {
                Some(t_d) => t_d,
                None => return fail("rush variants need t_d".into()),
            };
            if t_d == 0 || t_d >= t_steps {
                return fail(format!("t_d must lie in 1..{t_steps}, got {t_d}"));
            }
            let (m, big_m) = match (self.m, self.big_m) {
                (Some(m), Some(big_m)) => (m, big_m),
                _ => return fail("rush variants need both m and M".into()),
            };
            if !(m > 0.0 && m < big_m) {
                return fail(format!("rush weights need 0 < m < M, got m={m}, M={big_m}"));
            }
        }
        if self.variant.is_stealthy() {
            let eps_att = match self.eps_att {
                Some(e) => e,
                None => return fail("stealthy variants need eps_att".into()),
            };
            if !(eps_att > 0.0) {
                return fail(format!(
                    "eps_att must be positive (a zero threshold never arms), got {eps_att}"
                ));
            }
            if eps_att <= solver_eps {
                return fail(format!(
                    "eps_att ({eps_att}) must exceed the solver tolerance ({solver_eps}), \
                     otherwise the run converges before the trigger fires"
                ));
            }
        }
        Ok(())
    }

    pub fn agent_ids(&self) -> Vec<usize> {
        self.attackers.agent_ids()
    }
}

/// Rush weighting A: diagonal with m on the first t_d steps and M after,
/// kept as the diagonal only.
#[derive(Debug, Clone)]
pub struct RushMatrix {
    diag: Array1<f64>,
}

impl RushMatrix {
    pub fn new(t_steps: usize, t_d: usize, m: f64, big_m: f64) -> Result<Self, AttackError> {
        if t_d == 0 || t_d >= t_steps {
            return Err(AttackError::InvalidSpec(format!(
                "t_d must lie in 1..{t_steps}, got {t_d}"
            )));
        }
        if !(m > 0.0 && m < big_m) {
            return Err(AttackError::InvalidSpec(format!(
                "rush weights need 0 < m < M, got m={m}, M={big_m}"
            )));
        }
        let diag = Array1::from_shape_fn(t_steps, |t| if t < t_d { m } else { big_m });
        Ok(Self { diag })
    }

    pub fn diag(&self) -> &Array1<f64> {
        &self.diag
    }
}

/// Smooth-charging injection: 2·ω₁·c, the gradient of ω₁‖c‖₂².
pub fn smooth_injection(c_i: &ArrayView1<f64>, omega1: f64) -> Array1<f64> {
    c_i.mapv(|v| 2.0 * omega1 * v)
}

/// Rush-charging injection: 2·ω₁·AᵀA·c, the gradient of ω₁‖A·c‖₂².
pub fn rush_injection(
    c_i: &ArrayView1<f64>,
    rush: &RushMatrix,
    omega1: f64,
) -> Result<Array1<f64>, AttackError> {
    if c_i.len() != rush.diag.len() {
        return Err(AttackError::DimensionMismatch(format!(
            "profile has {} steps, rush matrix {}",
            c_i.len(),
            rush.diag.len()
        )));
    }
    Ok(Array1::from_iter(
        c_i.iter()
            .zip(rush.diag.iter())
            .map(|(v, a)| 2.0 * omega1 * (a * a) * v),
    ))
}

/// Stealthy injection once armed: base vector plus the pull-back
/// 2·ω₂·(c_i − snapshot_i) toward the wiretapped near-optimal block.
pub fn stealthy_injection(
    c_i: &ArrayView1<f64>,
    snapshot_i: &ArrayView1<f64>,
    base: &Array1<f64>,
    omega2: f64,
) -> Result<Array1<f64>, AttackError> {
    if c_i.len() != snapshot_i.len() || c_i.len() != base.len() {
        return Err(AttackError::DimensionMismatch(format!(
            "profile {}, snapshot {}, base {}",
            c_i.len(),
            snapshot_i.len(),
            base.len()
        )));
    }
    Ok(Array1::from_iter(
        c_i.iter()
            .zip(snapshot_i.iter())
            .zip(base.iter())
            .map(|((c, s), b)| b + 2.0 * omega2 * (c - s)),
    ))
}

/// Read access to the coordinator's current profile matrix. The engine backs
/// this with an in-process snapshot; every capture is written to an audit log.
pub trait WiretapProvider {
    fn snapshot(&self) -> Result<Array2<f64>, AttackError>;
}

/// Wiretap over the coordinator's frozen iterate.
pub struct SliceWiretap<'a> {
    profiles: &'a Array2<f64>,
}

impl<'a> SliceWiretap<'a> {
    pub fn new(profiles: &'a Array2<f64>) -> Self {
        Self { profiles }
    }
}

impl WiretapProvider for SliceWiretap<'_> {
    fn snapshot(&self) -> Result<Array2<f64>, AttackError> {
        Ok(self.profiles.clone())
    }
}

/// One logged full-snapshot capture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WiretapAccess {
    pub agent: usize,
    pub iteration: usize,
}

/// Stealth trigger state: dormant until the agent's own residual drops below
/// ε*_att, then armed with the captured snapshot; fires at most once per run.
#[derive(Debug, Clone)]
pub enum StealthState {
    Dormant,
    Armed {
        snapshot: Array2<f64>,
        trigger_iteration: usize,
    },
}

impl StealthState {
    /// Dormant→Armed exactly when `own_residual < eps_att`; captures the full
    /// profile snapshot through the wiretap on transition. Returns the access
    /// record when the trigger fired.
    pub fn update(
        &mut self,
        agent: usize,
        own_residual: f64,
        eps_att: f64,
        k: usize,
        wiretap: &dyn WiretapProvider,
    ) -> Result<Option<WiretapAccess>, AttackError> {
        match self {
            StealthState::Armed { .. } => Ok(None),
            StealthState::Dormant => {
                if own_residual < eps_att {
                    let snapshot = wiretap.snapshot()?;
                    *self = StealthState::Armed {
                        snapshot,
                        trigger_iteration: k,
                    };
                    Ok(Some(WiretapAccess { agent, iteration: k }))
                } else {
                    Ok(None)
                }
            }
        }
    }

    pub fn is_armed(&self) -> bool {
        matches!(self, StealthState::Armed { .. })
    }

    /// The attacker's own block of the armed snapshot.
    pub fn armed_block(&self, agent: usize) -> Result<ArrayView1<'_, f64>, AttackError> {
        match self {
            StealthState::Armed { snapshot, .. } => Ok(snapshot.row(agent)),
            StealthState::Dormant => Err(AttackError::NotArmed { agent }),
        }
    }
}

/// One agent's attack hook, owned by the solver and consulted during that
/// agent's primal step.
#[derive(Debug, Clone)]
pub struct AgentAttack {
    agent: usize,
    variant: AttackVariant,
    omega1: f64,
    omega2: f64,
    eps_att: f64,
    rush: Option<RushMatrix>,
    stealth: StealthState,
}

impl AgentAttack {
    pub fn new(agent: usize, spec: &AttackSpec, t_steps: usize) -> Result<Self, AttackError> {
        let rush = if spec.variant.is_rush() {
            let (t_d, m, big_m) = match (spec.t_d, spec.m, spec.big_m) {
                (Some(t_d), Some(m), Some(big_m)) => (t_d, m, big_m),
                _ => {
                    return Err(AttackError::InvalidSpec(
                        "rush variants need t_d, m, and M".into(),
                    ))
                }
            };
            Some(RushMatrix::new(t_steps, t_d, m, big_m)?)
        } else {
            None
        };
        Ok(Self {
            agent,
            variant: spec.variant,
            omega1: spec.omega1,
            omega2: spec.omega2,
            eps_att: spec.eps_att.unwrap_or(0.0),
            rush,
            stealth: StealthState::Dormant,
        })
    }

    /// Builds one hook per attacker id; `none` variants produce no hooks.
    pub fn from_spec(spec: &AttackSpec, t_steps: usize) -> Result<Vec<Self>, AttackError> {
        if spec.variant == AttackVariant::None {
            return Ok(Vec::new());
        }
        spec.agent_ids()
            .into_iter()
            .map(|agent| Self::new(agent, spec, t_steps))
            .collect()
    }

    pub fn agent(&self) -> usize {
        self.agent
    }

    pub fn variant(&self) -> AttackVariant {
        self.variant
    }

    pub fn trigger_iteration(&self) -> Option<usize> {
        match &self.stealth {
            StealthState::Armed { trigger_iteration, .. } => Some(*trigger_iteration),
            StealthState::Dormant => None,
        }
    }

    fn base_vector(&self, c_i: &ArrayView1<f64>) -> Array1<f64> {
        match self.variant {
            AttackVariant::None => Array1::zeros(c_i.len()),
            AttackVariant::Smooth | AttackVariant::StealthySmooth => {
                smooth_injection(c_i, self.omega1)
            }
            AttackVariant::Rush | AttackVariant::StealthyRush => {
                let rush = self.rush.as_ref().expect("rush matrix built at construction");
                rush_injection(c_i, rush, self.omega1).expect("horizon fixed at construction")
            }
        }
    }

    /// Additive term for this agent's current primal update.
    pub fn injection(&self, c_i: &ArrayView1<f64>) -> Array1<f64> {
        if !self.variant.is_stealthy() {
            return self.base_vector(c_i);
        }
        match &self.stealth {
            // Warm-up: run the algorithm normally, inject nothing.
            StealthState::Dormant => Array1::zeros(c_i.len()),
            StealthState::Armed { snapshot, .. } => {
                let base = self.base_vector(c_i);
                stealthy_injection(c_i, &snapshot.row(self.agent), &base, self.omega2)
                    .expect("snapshot dimensions fixed at capture")
            }
        }
    }

    /// Iteration-barrier bookkeeping; only stealthy hooks react. Returns the
    /// trigger iteration when the state armed just now.
    pub fn observe(
        &mut self,
        own_residual: f64,
        k: usize,
        wiretap: &dyn WiretapProvider,
        log: &mut Vec<WiretapAccess>,
    ) -> Result<Option<usize>, AttackError> {
        if !self.variant.is_stealthy() {
            return Ok(None);
        }
        match self
            .stealth
            .update(self.agent, own_residual, self.eps_att, k, wiretap)?
        {
            Some(access) => {
                let iteration = access.iteration;
                log.push(access);
                Ok(Some(iteration))
            }
            None => Ok(None),
        }
    }
}

/// Interest value ω₁·𝒢(c_i) of one attacker under `spec`.
pub fn interest_value(
    spec: &AttackSpec,
    c_i: &ArrayView1<f64>,
    t_steps: usize,
) -> Result<f64, AttackError> {
    let g = match spec.variant {
        AttackVariant::None => 0.0,
        AttackVariant::Smooth | AttackVariant::StealthySmooth => {
            c_i.iter().map(|v| v * v).sum::<f64>()
        }
        AttackVariant::Rush | AttackVariant::StealthyRush => {
            let rush = RushMatrix::new(
                t_steps,
                spec.t_d.unwrap_or(0),
                spec.m.unwrap_or(0.0),
                spec.big_m.unwrap_or(0.0),
            )?;
            c_i.iter()
                .zip(rush.diag.iter())
                .map(|(v, a)| (a * v) * (a * v))
                .sum::<f64>()
        }
    };
    Ok(spec.omega1 * g)
}

/// Closed-form maximum of 𝒢 over the capped simplex {c ∈ [0,1]^T : Σc = K},
/// taken over the set's vertices (at most one fractional coordinate).
///
/// Unweighted: ⌊K⌋ + frac(K)². Weighted: ones on the ⌊K⌋ largest squared
/// weights, the fraction on the next largest.
pub fn interest_vertex_max(
    spec: &AttackSpec,
    k_sum: f64,
    t_steps: usize,
) -> Result<f64, AttackError> {
    if k_sum < 0.0 || k_sum > t_steps as f64 {
        return Err(AttackError::InvalidSpec(format!(
            "rate-sum {k_sum} outside [0, {t_steps}]"
        )));
    }
    let whole = k_sum.floor() as usize;
    let frac = k_sum - k_sum.floor();
    let g_max = match spec.variant {
        AttackVariant::None => 0.0,
        AttackVariant::Smooth | AttackVariant::StealthySmooth => whole as f64 + frac * frac,
        AttackVariant::Rush | AttackVariant::StealthyRush => {
            let rush = RushMatrix::new(
                t_steps,
                spec.t_d.unwrap_or(0),
                spec.m.unwrap_or(0.0),
                spec.big_m.unwrap_or(0.0),
            )?;
            let mut weights: Vec<f64> = rush.diag.iter().map(|a| a * a).collect();
            weights.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let mut value: f64 = weights.iter().take(whole).sum();
            if whole < t_steps {
                value += weights[whole] * frac * frac;
            }
            value
        }
    };
    Ok(spec.omega1 * g_max)
}

/// Outcome of the objective-sandwich audit between an attacked run and an
/// attack-free reference on the same scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Theorem2Audit {
    /// F(C*), the attack-free objective.
    pub objective_attack_free: f64,
    /// F(Ĉ), the attacked objective.
    pub objective_attacked: f64,
    /// F(Ĉ) − F(C*); nonnegative up to solver tolerance.
    pub deviation: f64,
    /// Σ ω₁·𝒢(ĉ_i) over all attackers.
    pub interest_value: f64,
    /// Σ ω₁·max 𝒢 over all attackers, the closed-form vertex bound.
    pub vertex_bound: f64,
    /// vertex_bound − deviation; nonnegative up to tolerance.
    pub upper_slack: f64,
    pub passed: bool,
}

const SANDWICH_TOL: f64 = 1e-6;

/// Verifies F(C*) ≤ F(Ĉ) ≤ F(Ĉ) + Σω₁𝒢(ĉ_i) and
/// F(Ĉ) − F(C*) ≤ Σω₁·max𝒢, with −1e-6 slack on each inequality.
pub fn theorem2_bound(
    attacked: &RunReport,
    attack_free: &RunReport,
    specs: &[AttackSpec],
) -> Result<Theorem2Audit, AttackError> {
    if attacked.profiles.len() != attack_free.profiles.len() {
        return Err(AttackError::DimensionMismatch(format!(
            "attacked run has {} agents, attack-free has {}",
            attacked.profiles.len(),
            attack_free.profiles.len()
        )));
    }
    let t_steps = attacked.profiles.first().map_or(0, Vec::len);
    let f_hat = attacked.objective;
    let f_star = attack_free.objective;

    let mut interest = 0.0;
    let mut bound = 0.0;
    for spec in specs {
        for agent in spec.agent_ids() {
            let profile = attacked.profiles.get(agent).ok_or_else(|| {
                AttackError::InvalidSpec(format!(
                    "attacker {agent} outside fleet of {}",
                    attacked.profiles.len()
                ))
            })?;
            let c_i = Array1::from_vec(profile.clone());
            interest += interest_value(spec, &c_i.view(), t_steps)?;
            let k_sum = attacked.fleet[agent].target_rate_sum;
            bound += interest_vertex_max(spec, k_sum, t_steps)?;
        }
    }

    let deviation = f_hat - f_star;
    let upper_slack = bound - deviation;
    let passed = deviation >= -SANDWICH_TOL && interest >= -SANDWICH_TOL && upper_slack >= -SANDWICH_TOL;
    let audit = Theorem2Audit {
        objective_attack_free: f_star,
        objective_attacked: f_hat,
        deviation,
        interest_value: interest,
        vertex_bound: bound,
        upper_slack,
        passed,
    };
    if !passed {
        return Err(AttackError::BoundViolated {
            f_star,
            f_hat,
            bound,
        });
    }
    Ok(audit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn central_diff<F: Fn(&Array1<f64>) -> f64>(f: F, at: &Array1<f64>, h: f64) -> Array1<f64> {
        let mut g = Array1::zeros(at.len());
        let mut probe = at.clone();
        for j in 0..at.len() {
            probe[j] = at[j] + h;
            let plus = f(&probe);
            probe[j] = at[j] - h;
            let minus = f(&probe);
            probe[j] = at[j];
            g[j] = (plus - minus) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
    }

    #[test]
    fn smooth_injection_examples() {
        let c = array![0.5, 0.5];
        let inj = smooth_injection(&c.view(), 1e5);
        assert_eq!(inj, array![1e5, 1e5]);
        let zero = Array1::zeros(3);
        assert!(smooth_injection(&zero.view(), 1e5).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn smooth_injection_matches_finite_differences() {
        let omega1 = 2.5;
        let c = array![0.3, 0.8, 0.1, 0.6];
        let inj = smooth_injection(&c.view(), omega1);
        let fd = central_diff(|x| omega1 * x.iter().map(|v| v * v).sum::<f64>(), &c, 1e-6);
        for (a, b) in inj.iter().zip(fd.iter()) {
            assert!(rel_err(*a, *b) <= 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn rush_injection_weights() {
        let rush = RushMatrix::new(4, 2, 0.2, 1e5).unwrap();
        let c = Array1::ones(4);
        let inj = rush_injection(&c.view(), &rush, 1.0).unwrap();
        let want = [2.0 * 0.04, 2.0 * 0.04, 2.0 * 1e10, 2.0 * 1e10];
        for (a, b) in inj.iter().zip(want.iter()) {
            assert!(rel_err(*a, *b) < 1e-12);
        }
        let zero = Array1::zeros(4);
        assert!(rush_injection(&zero.view(), &rush, 1.0)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn rush_injection_matches_finite_differences() {
        let rush = RushMatrix::new(4, 2, 0.2, 3.0).unwrap();
        let omega1 = 1.7;
        let c = array![0.4, 0.9, 0.2, 0.5];
        let inj = rush_injection(&c.view(), &rush, omega1).unwrap();
        let diag = rush.diag().clone();
        let fd = central_diff(
            |x| {
                omega1
                    * x.iter()
                        .zip(diag.iter())
                        .map(|(v, a)| (a * v) * (a * v))
                        .sum::<f64>()
            },
            &c,
            1e-6,
        );
        for (a, b) in inj.iter().zip(fd.iter()) {
            assert!(rel_err(*a, *b) <= 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn rush_matrix_rejects_degenerate_breakpoints() {
        assert!(RushMatrix::new(4, 0, 0.2, 1.0).is_err());
        assert!(RushMatrix::new(4, 4, 0.2, 1.0).is_err());
        assert!(RushMatrix::new(4, 2, 1.0, 0.2).is_err());
    }

    #[test]
    fn stealth_arms_on_third_residual() {
        let profiles = array![[0.4, 0.6], [0.1, 0.9]];
        let wiretap = SliceWiretap::new(&profiles);
        let mut state = StealthState::Dormant;
        let eps_att = 1.1e-4;
        for (k, residual) in [1e-3, 5e-4, 1.05e-4].iter().enumerate() {
            let fired = state.update(0, *residual, eps_att, k, &wiretap).unwrap();
            if k < 2 {
                assert!(fired.is_none());
                assert!(!state.is_armed());
            } else {
                let access = fired.expect("third residual is below the threshold");
                assert_eq!(access.iteration, 2);
                assert!(state.is_armed());
            }
        }
        assert_eq!(state.armed_block(0).unwrap(), profiles.row(0));
    }

    #[test]
    fn stealth_never_rearms() {
        let profiles = array![[0.4, 0.6]];
        let wiretap = SliceWiretap::new(&profiles);
        let mut state = StealthState::Dormant;
        state.update(0, 1e-9, 1e-4, 3, &wiretap).unwrap();
        let again = state.update(0, 1e-9, 1e-4, 4, &wiretap).unwrap();
        assert!(again.is_none());
        match &state {
            StealthState::Armed { trigger_iteration, .. } => assert_eq!(*trigger_iteration, 3),
            StealthState::Dormant => panic!("state should stay armed"),
        }
    }

    #[test]
    fn wiretap_failure_propagates() {
        struct Broken;
        impl WiretapProvider for Broken {
            fn snapshot(&self) -> Result<Array2<f64>, AttackError> {
                Err(AttackError::WiretapUnavailable {
                    iteration: 0,
                    reason: "offline".into(),
                })
            }
        }
        let mut state = StealthState::Dormant;
        let result = state.update(0, 0.0, 1.0, 0, &Broken);
        assert!(matches!(result, Err(AttackError::WiretapUnavailable { .. })));
        assert!(!state.is_armed());
    }

    #[test]
    fn dormant_block_access_is_not_armed() {
        let state = StealthState::Dormant;
        assert!(matches!(
            state.armed_block(0),
            Err(AttackError::NotArmed { agent: 0 })
        ));
    }

    #[test]
    fn stealthy_injection_at_snapshot_returns_base() {
        let c = array![0.3, 0.7];
        let base = array![10.0, -4.0];
        let inj = stealthy_injection(&c.view(), &c.view(), &base, 100.0).unwrap();
        assert_eq!(inj, base);
    }

    #[test]
    fn stealthy_injection_zero_omega2_is_nonstealthy() {
        let c = array![0.3, 0.7];
        let snap = array![0.1, 0.2];
        let base = smooth_injection(&c.view(), 5.0);
        let inj = stealthy_injection(&c.view(), &snap.view(), &base, 0.0).unwrap();
        assert_eq!(inj, base);
    }

    #[test]
    fn stealthy_injection_matches_finite_differences() {
        let omega1 = 3.0;
        let omega2 = 7.0;
        let snap = array![0.2, 0.5, 0.9];
        let c = array![0.6, 0.1, 0.8];
        let base = smooth_injection(&c.view(), omega1);
        let inj = stealthy_injection(&c.view(), &snap.view(), &base, omega2).unwrap();
        let fd = central_diff(
            |x| {
                omega1 * x.iter().map(|v| v * v).sum::<f64>()
                    + omega2
                        * x.iter()
                            .zip(snap.iter())
                            .map(|(v, s)| (v - s) * (v - s))
                            .sum::<f64>()
            },
            &c,
            1e-6,
        );
        for (a, b) in inj.iter().zip(fd.iter()) {
            assert!(rel_err(*a, *b) <= 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn hook_injects_nothing_while_dormant() {
        let spec = AttackSpec {
            attackers: AttackerSet::Ids(vec![0]),
            variant: AttackVariant::StealthySmooth,
            omega1: 1e5,
            omega2: 100.0,
            t_d: None,
            m: None,
            big_m: None,
            eps_att: Some(1.1e-4),
        };
        let hook = AgentAttack::new(0, &spec, 4).unwrap();
        let c = array![0.3, 0.1, 0.4, 0.2];
        assert!(hook.injection(&c.view()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertex_max_unweighted() {
        let spec = AttackSpec {
            attackers: AttackerSet::Ids(vec![0]),
            variant: AttackVariant::Smooth,
            omega1: 1.0,
            omega2: 0.0,
            t_d: None,
            m: None,
            big_m: None,
            eps_att: None,
        };
        // Vertices of {Σ = 1.5, box}: permutations of (1, 0.5, 0) → max 1.25.
        let max = interest_vertex_max(&spec, 1.5, 3).unwrap();
        assert!((max - 1.25).abs() < 1e-12);
        // K = T puts every entry at 1.
        let max = interest_vertex_max(&spec, 3.0, 3).unwrap();
        assert!((max - 3.0).abs() < 1e-12);
    }

    #[test]
    fn vertex_max_matches_enumeration_weighted() {
        let spec = AttackSpec {
            attackers: AttackerSet::Ids(vec![0]),
            variant: AttackVariant::Rush,
            omega1: 2.0,
            omega2: 0.0,
            t_d: Some(2),
            m: Some(0.3),
            big_m: Some(1.5),
            eps_att: None,
        };
        let t_steps = 4;
        let k_sum = 2.3;
        let closed = interest_vertex_max(&spec, k_sum, t_steps).unwrap();
        // Enumerate every vertex: choose the positions of the ⌊K⌋ ones and of
        // the fractional coordinate.
        let rush = RushMatrix::new(t_steps, 2, 0.3, 1.5).unwrap();
        let w: Vec<f64> = rush.diag().iter().map(|a| a * a).collect();
        let whole = k_sum.floor() as usize;
        let frac = k_sum - k_sum.floor();
        let mut best = f64::NEG_INFINITY;
        for ones in 0..(1usize << t_steps) {
            if ones.count_ones() as usize != whole {
                continue;
            }
            for f in 0..t_steps {
                if ones & (1 << f) != 0 {
                    continue;
                }
                let mut value = 0.0;
                for t in 0..t_steps {
                    if ones & (1 << t) != 0 {
                        value += w[t];
                    }
                }
                value += w[f] * frac * frac;
                best = best.max(value);
            }
        }
        assert!((closed - 2.0 * best).abs() < 1e-12, "{closed} vs {}", 2.0 * best);
    }

    #[test]
    fn attacker_set_forms() {
        let ids = AttackerSet::Ids(vec![3, 1, 1, 2]);
        assert_eq!(ids.agent_ids(), vec![1, 2, 3]);
        let range = AttackerSet::Range { start: 4, count: 3 };
        assert_eq!(range.agent_ids(), vec![4, 5, 6]);
        let parsed: AttackerSet = serde_json::from_str("[0, 5]").unwrap();
        assert_eq!(parsed.agent_ids(), vec![0, 5]);
        let parsed: AttackerSet = serde_json::from_str(r#"{"start": 2, "count": 2}"#).unwrap();
        assert_eq!(parsed.agent_ids(), vec![2, 3]);
    }

    #[test]
    fn spec_validation_enforces_trigger_margin() {
        let mut spec = AttackSpec {
            attackers: AttackerSet::Ids(vec![0]),
            variant: AttackVariant::StealthySmooth,
            omega1: 1e5,
            omega2: 100.0,
            t_d: None,
            m: None,
            big_m: None,
            eps_att: Some(1e-5),
        };
        assert!(spec.validate(52, 1e-4).is_err());
        spec.eps_att = Some(1.1e-4);
        assert!(spec.validate(52, 1e-4).is_ok());
        spec.eps_att = Some(0.0);
        assert!(spec.validate(52, 1e-4).is_err());
    }
}
