//! Independent reference solvers.
//!
//! Two routes that share no iteration code with the decentralized engine:
//! an unshrunken projected primal-dual method with diminishing steps for
//! high-precision solutions, and an exhaustive grid search over each EV's
//! constraint plane for tiny instances. Gradients, the Lagrangian, and even
//! the feasible-set projection (breakpoint search instead of multiplier
//! bisection) are evaluated by this module's own code so the engine is never
//! validated against itself.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::engine::{Interest, Problem};

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("reference solve stalled at residual {} (tolerance {tol})", .best.residual)]
    NotConverged {
        best: Box<ReferenceSolution>,
        tol: f64,
    },
    #[error("instance too large for brute force: {0}")]
    ProblemTooLarge(String),
    #[error("rate-sum {k} outside [0, {t_steps}]")]
    InfeasibleTarget { k: f64, t_steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    HighPrecisionPd,
    GridBruteForce,
}

/// A reference optimum with the route that produced it.
#[derive(Debug, Clone)]
pub struct ReferenceSolution {
    pub profiles: Array2<f64>,
    pub objective: f64,
    pub dual: Array2<f64>,
    pub method: Method,
    /// Primal residual achieved (grid route: the grid resolution).
    pub residual: f64,
}

/// Exact projection onto {z ∈ [0,1]^T : Σ z = K} by breakpoint search: the
/// clipped sum is piecewise linear in the shift μ, so locate the segment
/// containing K and interpolate.
pub fn project_capped_simplex(c: &Array1<f64>, k_sum: f64) -> Result<Array1<f64>, OracleError> {
    let t_steps = c.len();
    if !k_sum.is_finite() || k_sum < 0.0 || k_sum > t_steps as f64 {
        return Err(OracleError::InfeasibleTarget {
            k: k_sum,
            t_steps,
        });
    }
    let sum_at = |mu: f64| c.iter().map(|&v| (v + mu).clamp(0.0, 1.0)).sum::<f64>();
    let mut breakpoints: Vec<f64> = c.iter().flat_map(|&v| [-v, 1.0 - v]).collect();
    breakpoints.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let first = breakpoints[0];
    let last = *breakpoints.last().unwrap();

    let mu = if k_sum <= sum_at(first) {
        first
    } else if k_sum >= sum_at(last) {
        last
    } else {
        let mut found = first;
        for pair in breakpoints.windows(2) {
            let (lo, hi) = (pair[0], pair[1]);
            let (sum_lo, sum_hi) = (sum_at(lo), sum_at(hi));
            if sum_lo <= k_sum && k_sum <= sum_hi {
                found = if sum_hi > sum_lo {
                    lo + (k_sum - sum_lo) * (hi - lo) / (sum_hi - sum_lo)
                } else {
                    lo
                };
                break;
            }
        }
        found
    };
    Ok(c.mapv(|v| (v + mu).clamp(0.0, 1.0)))
}

fn interest_value(interest: &Option<Interest>, c_i: &ndarray::ArrayView1<f64>) -> f64 {
    match interest {
        Some(term) => term.value(c_i),
        None => 0.0,
    }
}

/// Objective of `problem` including any per-agent interest terms, evaluated
/// with plain loops.
pub fn objective_value(problem: &Problem, profiles: &Array2<f64>) -> f64 {
    let (s, t_steps) = profiles.dim();
    let mut value = 0.0;
    for t in 0..t_steps {
        let mut load = problem.p_base[t];
        for i in 0..s {
            load += problem.p_max[i] * profiles[[i, t]];
        }
        value += 0.5 * load * load;
    }
    for i in 0..s {
        value += interest_value(&problem.interests[i], &profiles.row(i));
    }
    value
}

fn primal_grad(problem: &Problem, profiles: &Array2<f64>, dual: &Array2<f64>) -> Array2<f64> {
    let (s, t_steps) = profiles.dim();
    let n = problem.d.nrows();
    let mut load = problem.p_base.clone();
    for i in 0..s {
        for t in 0..t_steps {
            load[t] += problem.p_max[i] * profiles[[i, t]];
        }
    }
    let mut grad = Array2::zeros((s, t_steps));
    for i in 0..s {
        for t in 0..t_steps {
            let mut dual_term = 0.0;
            for nu in 0..n {
                dual_term += problem.d[[nu, i]] * dual[[nu, t]];
            }
            grad[[i, t]] = problem.p_max[i] * load[t] - dual_term;
        }
        if let Some(term) = &problem.interests[i] {
            let extra = term.gradient(&profiles.row(i));
            for t in 0..t_steps {
                grad[[i, t]] += extra[t];
            }
        }
    }
    grad
}

fn dual_grad(problem: &Problem, profiles: &Array2<f64>, v_min: f64) -> Array2<f64> {
    let (s, t_steps) = profiles.dim();
    let n = problem.d.nrows();
    let bound = v_min * v_min * problem.v0 * problem.v0;
    let mut grad = Array2::zeros((n, t_steps));
    for nu in 0..n {
        for t in 0..t_steps {
            let mut y = problem.y_d[[nu, t]];
            for i in 0..s {
                y += problem.d[[nu, i]] * profiles[[i, t]];
            }
            grad[[nu, t]] = bound - y;
        }
    }
    grad
}

/// Conservative Lipschitz estimate of the primal gradient: the aggregate
/// coupling Σ P̃² plus the largest interest curvature.
fn lipschitz_estimate(problem: &Problem) -> f64 {
    let coupling: f64 = problem.p_max.iter().map(|p| p * p).sum();
    let interest = problem
        .interests
        .iter()
        .map(|term| match term {
            Some(Interest::Quadratic { omega1 }) => 2.0 * omega1,
            Some(Interest::WeightedQuadratic { omega1, weights }) => {
                2.0 * omega1 * weights.iter().map(|w| w * w).fold(0.0, f64::max)
            }
            None => 0.0,
        })
        .fold(0.0, f64::max);
    (coupling + interest).max(1e-12)
}

/// Norm of the unit-step projected-gradient map at (profiles, dual): zero
/// exactly at a saddle point, the oracle's optimality certificate.
pub fn projected_gradient_norm(
    problem: &Problem,
    profiles: &Array2<f64>,
    dual: &Array2<f64>,
) -> f64 {
    let grad = primal_grad(problem, profiles, dual);
    let mut sum = 0.0;
    for i in 0..problem.agent_count() {
        let candidate = Array1::from_iter(
            profiles
                .row(i)
                .iter()
                .zip(grad.row(i).iter())
                .map(|(c, g)| c - g),
        );
        let projected =
            project_capped_simplex(&candidate, problem.targets[i]).expect("targets validated");
        for (p, c) in projected.iter().zip(profiles.row(i).iter()) {
            sum += (p - c) * (p - c);
        }
    }
    sum.sqrt()
}

/// High-precision reference: unshrunken projected primal-dual iteration
/// (τ = 1) with diminishing steps, run until the primal residual drops below
/// `tol` or 10⁶ iterations. The caller decides whether a stalled best iterate
/// is acceptable.
pub fn solve_reference(
    problem: &Problem,
    tol: f64,
    v_min: f64,
) -> Result<ReferenceSolution, OracleError> {
    solve_reference_with(problem, tol, v_min, 1_000_000)
}

pub fn solve_reference_with(
    problem: &Problem,
    tol: f64,
    v_min: f64,
    max_iters: usize,
) -> Result<ReferenceSolution, OracleError> {
    let s = problem.agent_count();
    let t_steps = problem.t_steps();
    let n = problem.bus_count();
    for &k in &problem.targets {
        if k < 0.0 || k > t_steps as f64 {
            return Err(OracleError::InfeasibleTarget { k, t_steps });
        }
    }

    let alpha0 = 1.0 / lipschitz_estimate(problem);
    let beta0 = 1.0;
    let mut profiles = Array2::zeros((s, t_steps));
    for i in 0..s {
        // Feasible start: the projection of zero.
        let row = project_capped_simplex(&Array1::zeros(t_steps), problem.targets[i])?;
        profiles.row_mut(i).assign(&row);
    }
    let mut dual: Array2<f64> = Array2::zeros((n, t_steps));

    let mut best_profiles = profiles.clone();
    let mut best_dual = dual.clone();
    let mut best_residual = f64::INFINITY;

    for k in 0..max_iters {
        let scale = 1.0 / ((k + 1) as f64).sqrt();
        let alpha_k = alpha0 * scale;
        let beta_k = beta0 * scale;

        let grad = primal_grad(problem, &profiles, &dual);
        let mut next = Array2::zeros((s, t_steps));
        for i in 0..s {
            let candidate = Array1::from_iter(
                profiles
                    .row(i)
                    .iter()
                    .zip(grad.row(i).iter())
                    .map(|(c, g)| c - alpha_k * g),
            );
            next.row_mut(i)
                .assign(&project_capped_simplex(&candidate, problem.targets[i])?);
        }
        if n > 0 {
            let gl = dual_grad(problem, &profiles, v_min);
            dual.zip_mut_with(&gl, |l, g| {
                *l = (*l + beta_k * g).max(0.0);
            });
        }

        let residual = next
            .iter()
            .zip(profiles.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        profiles = next;
        if residual < best_residual {
            best_residual = residual;
            best_profiles = profiles.clone();
            best_dual = dual.clone();
        }
        if residual < tol {
            return Ok(ReferenceSolution {
                objective: objective_value(problem, &profiles),
                profiles,
                dual,
                method: Method::HighPrecisionPd,
                residual,
            });
        }
    }

    let best = ReferenceSolution {
        objective: objective_value(problem, &best_profiles),
        profiles: best_profiles,
        dual: best_dual,
        method: Method::HighPrecisionPd,
        residual: best_residual,
    };
    Err(OracleError::NotConverged {
        best: Box::new(best),
        tol,
    })
}

const VOLTAGE_PENALTY: f64 = 1e9;

fn voltage_violation(problem: &Problem, profiles: &Array2<f64>, v_min: f64) -> f64 {
    let n = problem.bus_count();
    if n == 0 {
        return 0.0;
    }
    let (s, t_steps) = profiles.dim();
    let bound = v_min * v_min * problem.v0 * problem.v0;
    let mut violation = 0.0;
    for nu in 0..n {
        for t in 0..t_steps {
            let mut y = problem.y_d[[nu, t]];
            for i in 0..s {
                y += problem.d[[nu, i]] * profiles[[i, t]];
            }
            if y < bound {
                violation += bound - y;
            }
        }
    }
    violation
}

/// Per-EV grid on the constraint plane: the first T−1 rates run over the
/// resolution grid, the last is eliminated through the rate-sum.
fn ev_grid(k_sum: f64, t_steps: usize, resolution: f64) -> Vec<Array1<f64>> {
    let steps = (1.0 / resolution).round() as usize;
    let mut points = Vec::new();
    let mut cursor = vec![0usize; t_steps.saturating_sub(1)];
    loop {
        let head: Vec<f64> = cursor
            .iter()
            .map(|&i| (i as f64 * resolution).min(1.0))
            .collect();
        let partial: f64 = head.iter().sum();
        let tail = k_sum - partial;
        if (-1e-9..=1.0 + 1e-9).contains(&tail) {
            let mut point = Array1::zeros(t_steps);
            for (t, v) in head.iter().enumerate() {
                point[t] = *v;
            }
            point[t_steps - 1] = tail.clamp(0.0, 1.0);
            points.push(point);
        }
        // Odometer increment over the free coordinates.
        let mut pos = 0;
        loop {
            if pos == cursor.len() {
                return points;
            }
            cursor[pos] += 1;
            if cursor[pos] <= steps {
                break;
            }
            cursor[pos] = 0;
            pos += 1;
        }
    }
}

/// Exhaustive reference for tiny instances (s·T ≤ 8): enumerates the feasible
/// grid of every EV, scores the objective plus a 10⁹-weighted voltage
/// violation penalty, and returns the minimizer.
pub fn grid_brute_force(
    problem: &Problem,
    resolution: f64,
    v_min: f64,
) -> Result<ReferenceSolution, OracleError> {
    let s = problem.agent_count();
    let t_steps = problem.t_steps();
    if s * t_steps > 8 {
        return Err(OracleError::ProblemTooLarge(format!(
            "s·T = {} exceeds 8",
            s * t_steps
        )));
    }
    if resolution < 1e-3 {
        return Err(OracleError::ProblemTooLarge(format!(
            "resolution {resolution} below the 1e-3 floor"
        )));
    }
    for &k in &problem.targets {
        if k < 0.0 || k > t_steps as f64 {
            return Err(OracleError::InfeasibleTarget { k, t_steps });
        }
    }

    let grids: Vec<Vec<Array1<f64>>> = problem
        .targets
        .iter()
        .map(|&k| ev_grid(k, t_steps, resolution))
        .collect();
    let mut best: Option<(f64, Array2<f64>)> = None;
    let mut cursor = vec![0usize; s];
    let mut profiles = Array2::zeros((s, t_steps));
    loop {
        for i in 0..s {
            profiles.row_mut(i).assign(&grids[i][cursor[i]]);
        }
        let score = objective_value(problem, &profiles)
            + VOLTAGE_PENALTY * voltage_violation(problem, &profiles, v_min);
        if best.as_ref().map_or(true, |(b, _)| score < *b) {
            best = Some((score, profiles.clone()));
        }
        let mut pos = 0;
        loop {
            if pos == s {
                let (_, profiles) = best.expect("grids are nonempty for feasible targets");
                return Ok(ReferenceSolution {
                    objective: objective_value(problem, &profiles),
                    profiles,
                    dual: Array2::zeros((problem.bus_count(), t_steps)),
                    method: Method::GridBruteForce,
                    residual: resolution,
                });
            }
            cursor[pos] += 1;
            if cursor[pos] < grids[pos].len() {
                break;
            }
            cursor[pos] = 0;
            pos += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn unconstrained(p_base: Array1<f64>, p_max: Vec<f64>, targets: Vec<f64>) -> Problem {
        let s = p_max.len();
        let t = p_base.len();
        Problem::new(
            p_base,
            Array2::zeros((0, t)),
            Array2::zeros((0, s)),
            p_max,
            targets,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn capped_simplex_projection_matches_hand_kkt() {
        let z = project_capped_simplex(&array![1.2, 0.4, 0.1], 1.5).unwrap();
        let want = [1.0, 0.4, 0.1];
        for (a, b) in z.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12, "{z:?}");
        }
        let z = project_capped_simplex(&array![0.3, -0.6], 2.0).unwrap();
        assert!(z.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn reference_solution_hand_kkt_single_ev() {
        // min ½((4+6.6c₁)² + (2+6.6c₂)²) with c₁+c₂ = 1 has the interior
        // stationary point c₁ = 4.6/13.2.
        let problem = unconstrained(array![4.0, 2.0], vec![6.6], vec![1.0]);
        let sol = solve_reference(&problem, 1e-10, 0.954).unwrap();
        assert!((sol.profiles[[0, 0]] - 4.6 / 13.2).abs() < 1e-6, "{:?}", sol.profiles);
        assert!((sol.profiles[[0, 1]] - 8.6 / 13.2).abs() < 1e-6);
    }

    #[test]
    fn reference_solution_zero_requirement() {
        let problem = unconstrained(array![3.0, 4.0], vec![6.6, 6.6], vec![0.0, 0.0]);
        let sol = solve_reference(&problem, 1e-10, 0.954).unwrap();
        assert!(sol.profiles.iter().all(|&v| v == 0.0));
        assert!((sol.objective - 12.5).abs() < 1e-12);
    }

    #[test]
    fn reference_agrees_with_grid() {
        let problem = unconstrained(array![4.0, 2.0], vec![6.6], vec![1.0]);
        let reference = solve_reference(&problem, 1e-10, 0.954).unwrap();
        let grid = grid_brute_force(&problem, 1e-3, 0.954).unwrap();
        assert!(
            (reference.objective - grid.objective).abs() < 1e-4,
            "{} vs {}",
            reference.objective,
            grid.objective
        );
    }

    #[test]
    fn certificate_small_at_reference_optimum() {
        let problem = unconstrained(array![4.0, 2.0], vec![6.6], vec![1.0]);
        let tol = 1e-10;
        let sol = solve_reference(&problem, tol, 0.954).unwrap();
        let cert = projected_gradient_norm(&problem, &sol.profiles, &sol.dual);
        assert!(cert <= 10.0 * tol.max(1e-9), "certificate {cert}");
    }

    #[test]
    fn grid_constraint_elimination_single_ev() {
        let problem = unconstrained(array![4.0, 2.0], vec![6.6], vec![1.0]);
        let sol = grid_brute_force(&problem, 1e-3, 0.954).unwrap();
        let sum: f64 = sol.profiles.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!((sol.profiles[[0, 0]] - 4.6 / 13.2).abs() < 2e-3);
    }

    #[test]
    fn grid_rejects_large_instances_and_fine_resolutions() {
        let problem = unconstrained(Array1::zeros(5), vec![1.0, 1.0], vec![1.0, 1.0]);
        assert!(matches!(
            grid_brute_force(&problem, 0.1, 0.954),
            Err(OracleError::ProblemTooLarge(_))
        ));
        let problem = unconstrained(Array1::zeros(2), vec![1.0], vec![1.0]);
        assert!(matches!(
            grid_brute_force(&problem, 5e-4, 0.954),
            Err(OracleError::ProblemTooLarge(_))
        ));
    }

    #[test]
    fn infeasible_target_propagates() {
        let problem = unconstrained(Array1::zeros(2), vec![1.0], vec![2.5]);
        assert!(matches!(
            grid_brute_force(&problem, 0.1, 0.954),
            Err(OracleError::InfeasibleTarget { .. })
        ));
        assert!(matches!(
            solve_reference(&problem, 1e-9, 0.954),
            Err(OracleError::InfeasibleTarget { .. })
        ));
    }

    #[test]
    fn attacked_problem_shifts_reference_toward_flat_profile() {
        let base = unconstrained(array![4.0, 2.0], vec![6.6], vec![1.0]);
        let attacked = base.clone().with_interest(0, Interest::Quadratic { omega1: 50.0 });
        let free = solve_reference(&base, 1e-10, 0.954).unwrap();
        let shifted = solve_reference(&attacked, 1e-10, 0.954).unwrap();
        let spread_free = (free.profiles[[0, 0]] - free.profiles[[0, 1]]).abs();
        let spread_attacked = (shifted.profiles[[0, 0]] - shifted.profiles[[0, 1]]).abs();
        assert!(spread_attacked < spread_free);
    }
}
