//! Decentralized shrunken primal-dual solver.
//!
//! A coordinator holds the dual variable and broadcasts it together with the
//! shared gradient ingredients; each EV agent holds its own charging profile
//! and answers with an upstream message per iteration. Primal updates are
//! mutually independent within one iteration (Jacobi scheme: both the primal
//! and the dual step read the frozen iterate pair), so they may run on a
//! worker pool without changing a single bit of the result.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::attacks::{AgentAttack, AttackError, SliceWiretap, WiretapAccess};
use crate::feeder::FeederError;
use crate::fleet::{project_feasible, FleetError};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in profiles or dual at iteration {iteration}")]
    NumericalDivergence { iteration: usize },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error(transparent)]
    Feeder(#[from] FeederError),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

/// Solver parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Primal step size α.
    pub alpha: f64,
    /// Dual step size β.
    pub beta: f64,
    /// Primal shrink factor τ_C in (0, 1].
    pub tau_c: f64,
    /// Dual shrink factor τ_λ in (0, 1].
    pub tau_lambda: f64,
    pub k_max: usize,
    /// Convergence tolerance on ‖C^{k+1} − C^k‖₂.
    pub eps: f64,
    /// Optional upper cap on the dual variable; unbounded when absent.
    #[serde(default)]
    pub lambda_max: Option<f64>,
    /// Voltage magnitude lower bound in p.u.
    pub v_min: f64,
    /// When set, α_k = α/√(k+1) instead of a constant step.
    #[serde(default)]
    pub diminishing_alpha: bool,
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let fail = |m: String| Err(EngineError::InvalidConfig(m));
        if !(self.alpha > 0.0) {
            return fail(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.beta > 0.0) {
            return fail(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.tau_c > 0.0 && self.tau_c <= 1.0) {
            return fail(format!("tau_c must lie in (0, 1], got {}", self.tau_c));
        }
        if !(self.tau_lambda > 0.0 && self.tau_lambda <= 1.0) {
            return fail(format!("tau_lambda must lie in (0, 1], got {}", self.tau_lambda));
        }
        if !(self.eps > 0.0) {
            return fail(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.v_min > 0.0 && self.v_min < 1.1) {
            return fail(format!("v_min must lie in (0, 1.1), got {}", self.v_min));
        }
        if let Some(cap) = self.lambda_max {
            if !(cap > 0.0) {
                return fail(format!("lambda_max must be positive, got {cap}"));
            }
        }
        Ok(())
    }
}

/// Objective-level self-interest term ω₁·𝒢(c) for one agent, used to solve
/// the modified problem directly (no injection hook involved).
#[derive(Debug, Clone)]
pub enum Interest {
    /// 𝒢(c) = ‖c‖₂²; flattens the agent's own profile.
    Quadratic { omega1: f64 },
    /// 𝒢(c) = ‖diag(w)·c‖₂²; large late weights front-load the charging.
    WeightedQuadratic { omega1: f64, weights: Array1<f64> },
}

impl Interest {
    pub fn value(&self, c: &ArrayView1<f64>) -> f64 {
        match self {
            Interest::Quadratic { omega1 } => omega1 * c.iter().map(|v| v * v).sum::<f64>(),
            Interest::WeightedQuadratic { omega1, weights } => {
                omega1
                    * c.iter()
                        .zip(weights.iter())
                        .map(|(v, w)| (w * v) * (w * v))
                        .sum::<f64>()
            }
        }
    }

    pub fn gradient(&self, c: &ArrayView1<f64>) -> Array1<f64> {
        match self {
            Interest::Quadratic { omega1 } => c.mapv(|v| 2.0 * omega1 * v),
            Interest::WeightedQuadratic { omega1, weights } => Array1::from_iter(
                c.iter()
                    .zip(weights.iter())
                    .map(|(v, w)| 2.0 * omega1 * w * w * v),
            ),
        }
    }
}

/// The frozen per-run problem data every operation reads.
#[derive(Debug, Clone)]
pub struct Problem {
    /// Aggregated baseline load P_b, kW, length T.
    pub p_base: Array1<f64>,
    /// Baseline squared voltages, p.u.², one column per step (n×T).
    pub y_d: Array2<f64>,
    /// Charging-to-voltage sensitivity D (n×s).
    pub d: Array2<f64>,
    /// Per-agent maximum charging power P̃, kW.
    pub p_max: Vec<f64>,
    /// Per-agent required rate-sum K.
    pub targets: Vec<f64>,
    /// Feeder-head voltage, p.u.
    pub v0: f64,
    /// Per-agent objective-level interest terms (solver-side, not hooks).
    pub interests: Vec<Option<Interest>>,
}

impl Problem {
    pub fn new(
        p_base: Array1<f64>,
        y_d: Array2<f64>,
        d: Array2<f64>,
        p_max: Vec<f64>,
        targets: Vec<f64>,
        v0: f64,
    ) -> Result<Self, EngineError> {
        let s = p_max.len();
        let t_steps = p_base.len();
        if targets.len() != s {
            return Err(EngineError::DimensionMismatch(format!(
                "{} p_max entries but {} targets",
                s,
                targets.len()
            )));
        }
        if d.ncols() != s {
            return Err(EngineError::DimensionMismatch(format!(
                "D has {} columns for {} agents",
                d.ncols(),
                s
            )));
        }
        if y_d.nrows() != d.nrows() || y_d.ncols() != t_steps {
            return Err(EngineError::DimensionMismatch(format!(
                "y_d is {:?}, want {}x{}",
                y_d.dim(),
                d.nrows(),
                t_steps
            )));
        }
        Ok(Self {
            p_base,
            y_d,
            d,
            p_max,
            targets,
            v0,
            interests: vec![None; s],
        })
    }

    pub fn agent_count(&self) -> usize {
        self.p_max.len()
    }

    pub fn bus_count(&self) -> usize {
        self.d.nrows()
    }

    pub fn t_steps(&self) -> usize {
        self.p_base.len()
    }

    pub fn with_interest(mut self, agent: usize, interest: Interest) -> Self {
        self.interests[agent] = Some(interest);
        self
    }
}

/// Aggregate load P_b(t) + Σ_i P̃_i·c_i(t); agents summed in ascending id
/// order so the result does not depend on the worker count.
pub fn aggregate_load(
    profiles: &Array2<f64>,
    p_base: &Array1<f64>,
    p_max: &[f64],
) -> Result<Array1<f64>, EngineError> {
    let (s, t_steps) = profiles.dim();
    if p_max.len() != s || p_base.len() != t_steps {
        return Err(EngineError::DimensionMismatch(format!(
            "profiles {s}x{t_steps}, {} p_max entries, P_b length {}",
            p_max.len(),
            p_base.len()
        )));
    }
    let mut agg = p_base.clone();
    for (i, row) in profiles.rows().into_iter().enumerate() {
        for (t, v) in row.iter().enumerate() {
            agg[t] += p_max[i] * v;
        }
    }
    Ok(agg)
}

/// Valley-filling objective ½·Σ_t (P_b(t) + Σ_i P̃_i·c_i(t))².
pub fn objective(
    profiles: &Array2<f64>,
    p_base: &Array1<f64>,
    p_max: &[f64],
) -> Result<f64, EngineError> {
    let agg = aggregate_load(profiles, p_base, p_max)?;
    Ok(0.5 * agg.iter().map(|v| v * v).sum::<f64>())
}

fn primal_gradient_from_parts(
    i: usize,
    agg: &Array1<f64>,
    dual: &Array2<f64>,
    d: &Array2<f64>,
    p_max_i: f64,
) -> Array1<f64> {
    let t_steps = agg.len();
    let n = d.nrows();
    let mut g = Array1::zeros(t_steps);
    for t in 0..t_steps {
        let mut dual_term = 0.0;
        for nu in 0..n {
            dual_term += d[[nu, i]] * dual[[nu, t]];
        }
        g[t] = p_max_i * agg[t] - dual_term;
    }
    g
}

/// Gradient of the relaxed Lagrangian with respect to agent i's profile:
/// g(t) = P̃_i·(P_b(t) + Σ_j P̃_j·c_j(t)) − Σ_ν D[ν][i]·λ[ν][t].
pub fn primal_gradient(
    i: usize,
    profiles: &Array2<f64>,
    dual: &Array2<f64>,
    p_base: &Array1<f64>,
    d: &Array2<f64>,
    p_max: &[f64],
) -> Result<Array1<f64>, EngineError> {
    if i >= profiles.nrows() {
        return Err(EngineError::DimensionMismatch(format!(
            "agent {i} out of range for {} profiles",
            profiles.nrows()
        )));
    }
    if dual.nrows() != d.nrows() || dual.ncols() != profiles.ncols() {
        return Err(EngineError::DimensionMismatch(format!(
            "dual is {:?}, want {}x{}",
            dual.dim(),
            d.nrows(),
            profiles.ncols()
        )));
    }
    let agg = aggregate_load(profiles, p_base, p_max)?;
    Ok(primal_gradient_from_parts(i, &agg, dual, d, p_max[i]))
}

/// Gradient of the relaxed Lagrangian with respect to the dual variable:
/// gλ[ν][t] = v_min²·v0² − y[ν](t), the voltage-bound constraint value.
pub fn dual_gradient(
    profiles: &Array2<f64>,
    y_d: &Array2<f64>,
    d: &Array2<f64>,
    v_min: f64,
    v0: f64,
) -> Result<Array2<f64>, EngineError> {
    if d.ncols() != profiles.nrows() || y_d.nrows() != d.nrows() || y_d.ncols() != profiles.ncols()
    {
        return Err(EngineError::DimensionMismatch(format!(
            "profiles {:?}, y_d {:?}, D {:?}",
            profiles.dim(),
            y_d.dim(),
            d.dim()
        )));
    }
    let bound = v_min * v_min * v0 * v0;
    let y = y_d + &d.dot(profiles);
    Ok(y.mapv(|v| bound - v))
}

/// One shrunken primal update: Π((1/τ_C)·Π(τ_C·c − α·(g + a))).
pub fn primal_step(
    c_i: &ArrayView1<f64>,
    gradient: &Array1<f64>,
    injection: &Array1<f64>,
    alpha_k: f64,
    tau_c: f64,
    k_sum: f64,
) -> Result<Array1<f64>, FleetError> {
    let inner = Array1::from_iter(
        c_i.iter()
            .zip(gradient.iter().zip(injection.iter()))
            .map(|(c, (g, a))| tau_c * c - alpha_k * (g + a)),
    );
    let first = project_feasible(&inner, k_sum)?;
    project_feasible(&first.mapv(|v| v / tau_c), k_sum)
}

/// One shrunken dual update: Π_𝔻((1/τ_λ)·Π_𝔻(τ_λ·λ + β·gλ)) with Π_𝔻 the
/// entrywise clip to [0, λ_max].
pub fn dual_step(
    dual: &Array2<f64>,
    dual_grad: &Array2<f64>,
    beta_k: f64,
    tau_lambda: f64,
    lambda_max: Option<f64>,
) -> Array2<f64> {
    let cap = lambda_max.unwrap_or(f64::INFINITY);
    let mut next = dual.clone();
    next.zip_mut_with(dual_grad, |l, g| {
        let inner = (tau_lambda * *l + beta_k * g).clamp(0.0, cap);
        *l = (inner / tau_lambda).clamp(0.0, cap);
    });
    next
}

/// Why the iteration loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// ‖C^{k+1} − C^k‖₂ dropped below eps.
    Tolerance,
    /// k_max iterations were used up.
    IterationCap,
}

/// Agent-to-coordinator message: one per agent per iteration.
#[derive(Debug, Clone)]
pub struct Upstream {
    pub agent: usize,
    pub profile: Array1<f64>,
}

/// Coordinator-to-agents broadcast; identical for every agent.
#[derive(Debug)]
pub struct Downstream<'a> {
    pub k: usize,
    pub dual: &'a Array2<f64>,
    pub aggregate: &'a Array1<f64>,
}

/// Everything a finished run hands to the report builder.
#[derive(Debug, Clone)]
pub struct SolverOutcome {
    pub profiles: Array2<f64>,
    pub dual: Array2<f64>,
    pub residuals: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub min_voltage_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub trigger_iterations: Vec<(usize, usize)>,
    pub wiretap_log: Vec<WiretapAccess>,
}

/// Per-iteration view handed to an observer callback.
pub struct IterationRecord<'a> {
    pub k: usize,
    pub profiles: &'a Array2<f64>,
    pub dual: &'a Array2<f64>,
    pub residual: f64,
    pub objective: f64,
}

pub struct Solver {
    problem: Problem,
    config: SolverConfig,
    hooks: Vec<AgentAttack>,
    workers: usize,
}

impl Solver {
    pub fn new(
        problem: Problem,
        config: SolverConfig,
        hooks: Vec<AgentAttack>,
        workers: usize,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        let s = problem.agent_count();
        let mut seen = vec![false; s];
        for hook in &hooks {
            if hook.agent() >= s {
                return Err(EngineError::InvalidConfig(format!(
                    "attack hook targets agent {} but the fleet has {s} agents",
                    hook.agent()
                )));
            }
            if seen[hook.agent()] {
                return Err(EngineError::InvalidConfig(format!(
                    "agent {} has more than one attack hook",
                    hook.agent()
                )));
            }
            seen[hook.agent()] = true;
        }
        Ok(Self {
            problem,
            config,
            hooks,
            workers: workers.max(1),
        })
    }

    pub fn run(&mut self) -> Result<SolverOutcome, EngineError> {
        self.run_with_observer(|_| {})
    }

    /// Runs the iteration loop, invoking `observer` once per iteration with
    /// the freshly updated iterates.
    pub fn run_with_observer<F>(&mut self, mut observer: F) -> Result<SolverOutcome, EngineError>
    where
        F: FnMut(IterationRecord<'_>),
    {
        let s = self.problem.agent_count();
        let t_steps = self.problem.t_steps();
        let n = self.problem.bus_count();
        let bound = self.config.v_min * self.config.v_min * self.problem.v0 * self.problem.v0;

        let mut hook_index = vec![usize::MAX; s];
        for (h, hook) in self.hooks.iter().enumerate() {
            hook_index[hook.agent()] = h;
        }

        let pool = if self.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(self.workers)
                    .build()
                    .map_err(|e| EngineError::InvalidConfig(e.to_string()))?,
            )
        } else {
            None
        };

        let mut profiles: Array2<f64> = Array2::zeros((s, t_steps));
        let mut dual: Array2<f64> = Array2::zeros((n, t_steps));
        let mut residuals = Vec::new();
        let mut objective_trace = Vec::new();
        let mut min_voltage_trace = Vec::new();
        let mut trigger_iterations = Vec::new();
        let mut wiretap_log = Vec::new();
        let mut stop_reason = StopReason::IterationCap;
        let mut iterations = 0;

        for k in 0..self.config.k_max {
            let alpha_k = if self.config.diminishing_alpha {
                self.config.alpha / ((k + 1) as f64).sqrt()
            } else {
                self.config.alpha
            };

            // Coordinator side: shared gradient ingredients from the frozen
            // iterate, then the broadcast every agent reads.
            let aggregate = aggregate_load(&profiles, &self.problem.p_base, &self.problem.p_max)?;
            let y = &self.problem.y_d + &self.problem.d.dot(&profiles);
            let dual_grad = y.mapv(|v| bound - v);
            let broadcast = Downstream {
                k,
                dual: &dual,
                aggregate: &aggregate,
            };

            // Agent side: independent primal steps, one upstream message each.
            let step = |i: usize| -> Result<Upstream, EngineError> {
                let c_i = profiles.row(i);
                let mut g = primal_gradient_from_parts(
                    i,
                    broadcast.aggregate,
                    broadcast.dual,
                    &self.problem.d,
                    self.problem.p_max[i],
                );
                if let Some(interest) = &self.problem.interests[i] {
                    g = g + interest.gradient(&c_i);
                }
                let injection = if hook_index[i] != usize::MAX {
                    self.hooks[hook_index[i]].injection(&c_i)
                } else {
                    Array1::zeros(t_steps)
                };
                let profile = primal_step(
                    &c_i,
                    &g,
                    &injection,
                    alpha_k,
                    self.config.tau_c,
                    self.problem.targets[i],
                )?;
                Ok(Upstream { agent: i, profile })
            };
            let messages: Vec<Result<Upstream, EngineError>> = match &pool {
                Some(pool) => pool.install(|| {
                    use rayon::prelude::*;
                    (0..s).into_par_iter().map(step).collect()
                }),
                None => (0..s).map(step).collect(),
            };

            let mut next_profiles = Array2::zeros((s, t_steps));
            for message in messages {
                let Upstream { agent, profile } = message?;
                next_profiles.row_mut(agent).assign(&profile);
            }
            let next_dual = dual_step(
                &dual,
                &dual_grad,
                self.config.beta,
                self.config.tau_lambda,
                self.config.lambda_max,
            );

            if next_profiles.iter().any(|v| !v.is_finite())
                || next_dual.iter().any(|v| !v.is_finite())
            {
                return Err(EngineError::NumericalDivergence { iteration: k });
            }

            let residual = next_profiles
                .iter()
                .zip(profiles.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let obj = objective(&next_profiles, &self.problem.p_base, &self.problem.p_max)?;
            let y_next = &self.problem.y_d + &self.problem.d.dot(&next_profiles);
            let min_voltage = y_next
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min)
                .max(0.0)
                .sqrt();

            // Stealth triggers watch the post-projection iterates; a firing
            // trigger wiretaps the pre-update profiles C^(k).
            let wiretap = SliceWiretap::new(&profiles);
            for hook in &mut self.hooks {
                let i = hook.agent();
                let own_residual = next_profiles
                    .row(i)
                    .iter()
                    .zip(profiles.row(i).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if let Some(trigger) = hook.observe(own_residual, k, &wiretap, &mut wiretap_log)? {
                    trigger_iterations.push((i, trigger));
                }
            }

            profiles = next_profiles;
            dual = next_dual;
            residuals.push(residual);
            objective_trace.push(obj);
            min_voltage_trace.push(min_voltage);
            iterations = k + 1;
            observer(IterationRecord {
                k,
                profiles: &profiles,
                dual: &dual,
                residual,
                objective: obj,
            });

            if residual < self.config.eps {
                stop_reason = StopReason::Tolerance;
                break;
            }
        }

        Ok(SolverOutcome {
            profiles,
            dual,
            residuals,
            objective_trace,
            min_voltage_trace,
            iterations,
            converged: stop_reason == StopReason::Tolerance,
            stop_reason,
            trigger_iterations,
            wiretap_log,
        })
    }
}
