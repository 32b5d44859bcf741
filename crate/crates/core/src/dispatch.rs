//! Exact economic dispatch by bisection on the system marginal cost.
//!
//! For strictly convex quadratic costs each unit's optimal output at a given
//! marginal price `λ` is `clamp((λ - b) / 2a, p_min, p_max)`, which is
//! monotone in `λ`. The demand constraint is an inequality, so the
//! unconstrained per-unit optimum is returned whenever it already covers the
//! requirement; otherwise `λ` is bisected until the supply curve meets it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{cost_of, DispatchProblem, DispatchSolution};

const MAX_BISECTIONS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchSolverReport {
    pub solution: DispatchSolution,
    /// Multiplier of the demand constraint ($/MW); zero when it is slack.
    pub lambda: f64,
    pub iterations: usize,
    /// `|ΣP − L_e|` when the demand constraint binds, otherwise zero.
    pub balance_residual: f64,
}

impl DispatchSolverReport {
    pub fn total_output(&self) -> f64 {
        self.solution.power.iter().sum()
    }
}

pub fn solve_dispatch(problem: &DispatchProblem) -> Result<DispatchSolverReport> {
    problem.validate()?;
    for (i, unit) in problem.units.iter().enumerate() {
        if !(unit.a > 0.0) {
            return Err(Error::UnsupportedCost { unit: i + 1, a: unit.a });
        }
    }
    let capacity: f64 = problem.units.iter().map(|u| u.p_max).sum();
    if capacity < problem.demand {
        return Err(Error::Infeasible(format!(
            "total capacity {capacity} MW is below demand {} MW",
            problem.demand
        )));
    }

    let demand = problem.demand;
    let tol = 1e-8 * demand.max(1.0);

    let vertex: Vec<f64> = problem
        .units
        .iter()
        .map(|u| (-u.b / (2.0 * u.a)).clamp(u.p_min, u.p_max))
        .collect();
    if vertex.iter().sum::<f64>() >= demand {
        return report(problem, vertex, 0.0, 0, 0.0);
    }

    let mut lo = problem
        .units
        .iter()
        .map(|u| u.marginal_cost(u.p_min))
        .fold(f64::INFINITY, f64::min);
    let mut hi = problem
        .units
        .iter()
        .map(|u| u.marginal_cost(u.p_max))
        .fold(f64::NEG_INFINITY, f64::max);

    let mut lambda = 0.5 * (lo + hi);
    let mut iterations = 0;
    let mut power = supply(problem, hi);
    while iterations < MAX_BISECTIONS {
        iterations += 1;
        lambda = 0.5 * (lo + hi);
        power = supply(problem, lambda);
        let total: f64 = power.iter().sum();
        if (total - demand).abs() <= tol {
            break;
        }
        if total < demand {
            lo = lambda;
        } else {
            hi = lambda;
        }
        if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
            break;
        }
    }

    // Close the remaining gap analytically on the set of units that are
    // strictly inside their limits; the active set is kept only if it stays
    // consistent with the refined price.
    if let Some((refined_lambda, refined)) = refine(problem, &power) {
        let before = (power.iter().sum::<f64>() - demand).abs();
        let after = (refined.iter().sum::<f64>() - demand).abs();
        if after <= before {
            lambda = refined_lambda;
            power = refined;
        }
    }

    // The demand constraint is an inequality: never stop short of it.
    let total: f64 = power.iter().sum();
    if total < demand {
        let short = demand - total;
        if let Some(i) = (0..power.len())
            .filter(|&i| power[i] + short <= problem.units[i].p_max)
            .max_by(|&i, &j| power[i].partial_cmp(&power[j]).unwrap())
        {
            power[i] += short;
        }
    }
    let residual = (power.iter().sum::<f64>() - demand).abs();
    report(problem, power, lambda, iterations, residual)
}

/// Same as [`solve_dispatch`] with the demand replaced.
pub fn solve_dispatch_for_demand(problem: &DispatchProblem, demand: f64) -> Result<DispatchSolverReport> {
    solve_dispatch(&problem.with_demand(demand)?)
}

fn supply(problem: &DispatchProblem, lambda: f64) -> Vec<f64> {
    problem
        .units
        .iter()
        .map(|u| ((lambda - u.b) / (2.0 * u.a)).clamp(u.p_min, u.p_max))
        .collect()
}

fn refine(problem: &DispatchProblem, power: &[f64]) -> Option<(f64, Vec<f64>)> {
    let interior: Vec<usize> = (0..power.len())
        .filter(|&i| {
            let u = &problem.units[i];
            power[i] > u.p_min && power[i] < u.p_max
        })
        .collect();
    if interior.is_empty() {
        return None;
    }
    let fixed: f64 = (0..power.len())
        .filter(|i| !interior.contains(i))
        .map(|i| power[i])
        .sum();
    let (mut slope, mut offset) = (0.0, 0.0);
    for &i in &interior {
        let u = &problem.units[i];
        slope += 1.0 / (2.0 * u.a);
        offset += u.b / (2.0 * u.a);
    }
    let lambda = (problem.demand - fixed + offset) / slope;
    let mut refined = power.to_vec();
    for &i in &interior {
        let u = &problem.units[i];
        let p = (lambda - u.b) / (2.0 * u.a);
        if p < u.p_min || p > u.p_max {
            return None;
        }
        refined[i] = p;
    }
    Some((lambda, refined))
}

fn report(
    problem: &DispatchProblem,
    power: Vec<f64>,
    lambda: f64,
    iterations: usize,
    balance_residual: f64,
) -> Result<DispatchSolverReport> {
    let cost = cost_of(problem, &power)?;
    Ok(DispatchSolverReport {
        solution: DispatchSolution { power, cost },
        lambda,
        iterations,
        balance_residual,
    })
}
