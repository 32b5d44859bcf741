//! Multi-vehicle charging schedule by operator splitting.
//!
//! The power matrix is split into two copies. The row copy carries the
//! separable terminal-deficit objective together with the no-overcharge cap
//! on each vehicle's delivered energy; its proximal step has a closed form
//! because the objective only depends on the row sum. The column copy carries
//! the per-step constraints (session window, rate box, station capacity) and
//! is updated by an exact Euclidean projection. Scaled dual variables tie the
//! two copies together.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{ChargingSchedule, EvProblem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvSolverOptions {
    pub max_iterations: usize,
    /// Stop once both primal and dual residuals (max-norm) are below this.
    pub tolerance: f64,
    pub rho: f64,
    /// Residual balancing period; 0 disables it.
    pub adapt_every: usize,
}

impl Default for EvSolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50_000,
            tolerance: 1e-6,
            rho: 1.0,
            adapt_every: 100,
        }
    }
}

pub fn solve_ev(problem: &EvProblem) -> Result<ChargingSchedule> {
    solve_ev_with(problem, &EvSolverOptions::default(), None)
}

/// Solves with explicit options; `cancel` is polled between iterations.
pub fn solve_ev_with(
    problem: &EvProblem,
    options: &EvSolverOptions,
    cancel: Option<&AtomicBool>,
) -> Result<ChargingSchedule> {
    if problem.sessions.is_empty() {
        return Err(Error::EmptyProblem);
    }
    if let Err(e) = problem.validate() {
        return Err(match e {
            Error::Dimension { .. } | Error::InvalidInput(_) => e,
            other => Error::InvalidInput(other.to_string()),
        });
    }
    let model = Model::new(problem)?;
    let power = model.run(options, cancel)?;
    ChargingSchedule::from_power(problem, power)
}

struct Model {
    n: usize,
    t: usize,
    delta: f64,
    need: Vec<f64>,
    lo: Vec<Vec<f64>>,
    hi: Vec<Vec<f64>>,
    active: Vec<Vec<bool>>,
    capacity: Vec<f64>,
}

impl Model {
    fn new(problem: &EvProblem) -> Result<Self> {
        let (n, t) = (problem.vehicles(), problem.timesteps);
        let mut lo = vec![vec![0.0; t]; n];
        let mut hi = vec![vec![0.0; t]; n];
        let mut active = vec![vec![false; t]; n];
        for (j, s) in problem.sessions.iter().enumerate() {
            for k in 0..t {
                if s.is_active(k) {
                    lo[j][k] = s.u_min;
                    hi[j][k] = s.u_max;
                    active[j][k] = true;
                }
            }
            let floor: f64 = lo[j].iter().sum::<f64>() * problem.efficiency;
            if floor > s.needed() + 1e-9 {
                return Err(Error::Infeasible(format!(
                    "vehicle {j}: minimum charging rate delivers {floor} kWh, more than the {} kWh needed",
                    s.needed()
                )));
            }
        }
        for k in 0..t {
            let floor: f64 = (0..n).map(|j| lo[j][k]).sum();
            if floor > problem.capacity[k] + 1e-9 {
                return Err(Error::Infeasible(format!(
                    "step {k}: minimum charging rates sum to {floor} kW, above capacity {}",
                    problem.capacity[k]
                )));
            }
        }
        Ok(Self {
            n,
            t,
            delta: problem.efficiency,
            need: problem.sessions.iter().map(|s| s.needed()).collect(),
            lo,
            hi,
            active,
            capacity: problem.capacity.clone(),
        })
    }

    fn run(&self, opts: &EvSolverOptions, cancel: Option<&AtomicBool>) -> Result<Vec<Vec<f64>>> {
        let (n, t) = (self.n, self.t);
        let mut rho = opts.rho;
        let mut x = vec![vec![0.0; t]; n];
        let mut z = vec![vec![0.0; t]; n];
        let mut w = vec![vec![0.0; t]; n];
        let mut column = vec![0.0; n];
        let (mut primal, mut dual) = (f64::INFINITY, f64::INFINITY);

        for iter in 1..=opts.max_iterations {
            if cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
                return Err(Error::Cancelled);
            }
            for j in 0..n {
                self.row_prox(j, &z[j], &w[j], rho, &mut x[j]);
            }
            dual = 0.0;
            for k in 0..t {
                for j in 0..n {
                    column[j] = x[j][k] + w[j][k];
                }
                self.project_column(k, &mut column);
                for j in 0..n {
                    dual = dual.max((column[j] - z[j][k]).abs());
                    z[j][k] = column[j];
                }
            }
            dual *= rho;
            primal = 0.0;
            for j in 0..n {
                for k in 0..t {
                    let r = x[j][k] - z[j][k];
                    w[j][k] += r;
                    primal = primal.max(r.abs());
                }
            }
            if primal < opts.tolerance && dual < opts.tolerance {
                tracing::debug!(iter, primal, dual, rho, "charging schedule converged");
                return Ok(self.polish(z));
            }
            if opts.adapt_every > 0 && iter % opts.adapt_every == 0 {
                let scale = if primal > 10.0 * dual {
                    2.0
                } else if dual > 10.0 * primal {
                    0.5
                } else {
                    1.0
                };
                if scale != 1.0 {
                    rho *= scale;
                    w.iter_mut().flatten().for_each(|v| *v /= scale);
                }
            }
        }
        Err(Error::ConvergenceFailure {
            iterations: opts.max_iterations,
            primal,
            dual,
        })
    }

    /// Minimizes `(δ·Σx − need)² + ρ/2‖x − (z − w)‖²` over the active entries
    /// subject to `δ·Σx ≤ need`. The minimizer shifts every active entry of
    /// `z − w` by the same amount.
    fn row_prox(&self, j: usize, z: &[f64], w: &[f64], rho: f64, out: &mut [f64]) {
        let d = self.delta;
        let active = &self.active[j];
        let count = active.iter().filter(|&&a| a).count() as f64;
        let mut sum = 0.0;
        for k in 0..self.t {
            out[k] = if active[k] { z[k] - w[k] } else { 0.0 };
            sum += out[k];
        }
        if count == 0.0 {
            return;
        }
        let free = 2.0 * d * (self.need[j] - d * sum) / (rho + 2.0 * d * d * count);
        let capped = (self.need[j] / d - sum) / count;
        let shift = free.min(capped);
        for k in 0..self.t {
            if active[k] {
                out[k] += shift;
            }
        }
    }

    /// Euclidean projection of one time column onto
    /// `{lo ≤ u ≤ hi, Σu ≤ capacity}`.
    fn project_column(&self, k: usize, v: &mut [f64]) {
        let clamp = |j: usize, x: f64| x.clamp(self.lo[j][k], self.hi[j][k]);
        let total: f64 = (0..self.n).map(|j| clamp(j, v[j])).sum();
        if total <= self.capacity[k] {
            for j in 0..self.n {
                v[j] = clamp(j, v[j]);
            }
            return;
        }
        // φ(μ) = Σ clamp(v − μ) is piecewise linear and non-increasing;
        // walk its breakpoints to find φ(μ) = capacity.
        let mut breaks: Vec<f64> = (0..self.n)
            .flat_map(|j| [v[j] - self.hi[j][k], v[j] - self.lo[j][k]])
            .filter(|&b| b > 0.0)
            .collect();
        breaks.push(0.0);
        breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        breaks.dedup();
        let phi = |mu: f64| -> f64 { (0..self.n).map(|j| clamp(j, v[j] - mu)).sum() };
        let cap = self.capacity[k];
        let mut mu = *breaks.last().unwrap();
        for pair in breaks.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let (fa, fb) = (phi(a), phi(b));
            if fb <= cap {
                mu = if fa == fb { b } else { a + (fa - cap) * (b - a) / (fa - fb) };
                break;
            }
        }
        for j in 0..self.n {
            v[j] = clamp(j, v[j] - mu);
        }
    }

    /// Shrinks any row that overshoots its energy need back towards its
    /// lower bounds. Column sums only decrease, so the per-step constraints
    /// stay satisfied.
    fn polish(&self, mut z: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
        for j in 0..self.n {
            let row = &mut z[j];
            let cap = self.need[j] / self.delta;
            let sum: f64 = row.iter().sum();
            if sum <= cap {
                continue;
            }
            let floor: f64 = self.lo[j].iter().sum();
            let theta = if sum > floor { ((cap - floor) / (sum - floor)).clamp(0.0, 1.0) } else { 0.0 };
            for k in 0..self.t {
                row[k] = self.lo[j][k] + theta * (row[k] - self.lo[j][k]);
            }
        }
        z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleSummary {
    pub vehicle: usize,
    pub delivered: f64,
    pub terminal: f64,
    pub target: f64,
    pub deficit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSummary {
    pub vehicles: Vec<VehicleSummary>,
    pub aggregate: Vec<f64>,
    pub peak_aggregate: f64,
    pub peak_step: usize,
    /// Steps where the station limit binds.
    pub capacity_binding: Vec<usize>,
    /// Vehicles held at their maximum rate over their whole window.
    pub rate_saturated: Vec<usize>,
    pub objective: f64,
}

/// Recomputes every figure from the power matrix.
pub fn summarize_schedule(problem: &EvProblem, schedule: &ChargingSchedule) -> ScheduleSummary {
    const BIND: f64 = 1e-6;
    let power = &schedule.power;
    let soc = problem.simulate(power);
    let vehicles: Vec<VehicleSummary> = problem
        .sessions
        .iter()
        .zip(&soc)
        .enumerate()
        .map(|(j, (s, x))| {
            let terminal = x[x.len() - 1];
            VehicleSummary {
                vehicle: j,
                delivered: terminal - s.initial,
                terminal,
                target: s.target,
                deficit: s.target - terminal,
            }
        })
        .collect();
    let aggregate: Vec<f64> = (0..problem.timesteps)
        .map(|k| power.iter().map(|row| row[k]).sum())
        .collect();
    let (peak_step, peak_aggregate) = aggregate
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (k, v)| if v > best.1 { (k, v) } else { best });
    let capacity_binding = aggregate
        .iter()
        .zip(&problem.capacity)
        .enumerate()
        .filter(|(_, (a, c))| **a >= **c - BIND && **c > 0.0)
        .map(|(k, _)| k)
        .collect();
    let rate_saturated = problem
        .sessions
        .iter()
        .zip(power)
        .enumerate()
        .filter(|(_, (s, row))| {
            s.arrival < s.depart && (s.arrival..s.depart).all(|k| row[k] >= s.u_max - BIND)
        })
        .map(|(j, _)| j)
        .collect();
    let objective = vehicles.iter().map(|v| v.deficit * v.deficit).sum();
    ScheduleSummary {
        vehicles,
        aggregate,
        peak_aggregate,
        peak_step,
        capacity_binding,
        rate_saturated,
        objective,
    }
}

impl fmt::Display for ScheduleSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Charging schedule summary")?;
        for v in &self.vehicles {
            writeln!(
                f,
                "vehicle {}: delivered {:.3} kWh, final {:.3} of {:.3} kWh, deficit {:.3} kWh",
                v.vehicle + 1,
                v.delivered,
                v.terminal,
                v.target,
                v.deficit
            )?;
        }
        writeln!(
            f,
            "peak aggregate power {:.3} kW at step {}",
            self.peak_aggregate,
            self.peak_step + 1
        )?;
        let list = |xs: &[usize]| {
            if xs.is_empty() {
                "none".to_string()
            } else {
                xs.iter().map(|x| (x + 1).to_string()).collect::<Vec<_>>().join(", ")
            }
        };
        writeln!(f, "station capacity binding at steps: {}", list(&self.capacity_binding))?;
        writeln!(f, "vehicles charging at full rate throughout: {}", list(&self.rate_saturated))?;
        write!(f, "sum of squared deficits {:.6}", self.objective)
    }
}

/// `vehicles × T` power matrix as CSV with 3-decimal kW values.
pub fn schedule_to_csv(schedule: &ChargingSchedule) -> String {
    let mut out = String::new();
    for row in &schedule.power {
        let line: Vec<String> = row.iter().map(|u| format!("{:.3}", u + 0.0)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{check_ev_feasible, fixtures, EvSession, DEFAULT_TOL};

    #[test]
    fn single_step_single_vehicle() {
        let p = EvProblem::with_uniform_capacity(vec![EvSession::new(0.0, 5.0, 10.0, 1)], 1, 10.0)
            .unwrap();
        let s = solve_ev(&p).unwrap();
        assert!((s.power[0][0] - 5.0).abs() < 1e-5, "{:?}", s.power);
        assert!(s.objective < 1e-9);
    }

    #[test]
    fn reference_instance() {
        let p = fixtures::ev_five_vehicle();
        let s = solve_ev(&p).unwrap();
        assert!(s.objective <= 1e-4, "{}", s.objective);
        assert!(check_ev_feasible(&p, &s.power, DEFAULT_TOL).unwrap().is_ok());
        for x in &s.soc {
            assert!((x[20] - 100.0).abs() <= 0.1);
        }
        for k in 0..10 {
            assert!((s.power[0][k] - 10.0).abs() < 1e-3, "{}", s.power[0][k]);
        }
        assert!(s.power[0][10..].iter().all(|&u| u == 0.0));
    }

    #[test]
    fn empty_and_invalid() {
        let p = EvProblem {
            sessions: vec![],
            timesteps: 3,
            capacity: vec![1.0; 3],
            efficiency: 1.0,
        };
        assert!(matches!(solve_ev(&p), Err(Error::EmptyProblem)));
        let mut q = fixtures::ev_five_vehicle();
        q.capacity[3] = f64::NAN;
        assert!(matches!(solve_ev(&q), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn degenerate_window_is_zero_row() {
        let mut sessions = vec![EvSession::new(0.0, 4.0, 2.0, 3)];
        let mut idle = EvSession::new(0.0, 4.0, 2.0, 2);
        idle.arrival = 2;
        sessions.push(idle);
        let p = EvProblem::with_uniform_capacity(sessions, 3, 5.0).unwrap();
        let s = solve_ev(&p).unwrap();
        assert!(s.power[1].iter().all(|&u| u == 0.0));
        assert!((s.objective - 16.0).abs() < 1e-4, "{}", s.objective);
    }

    #[test]
    fn minimum_rate_conflicts_are_infeasible() {
        let mut s = EvSession::new(0.0, 1.0, 2.0, 3);
        s.u_min = 1.0;
        let p = EvProblem::with_uniform_capacity(vec![s], 3, 5.0).unwrap();
        assert!(matches!(solve_ev(&p), Err(Error::Infeasible(_))));
    }

    #[test]
    fn cancellation_is_honoured() {
        let flag = AtomicBool::new(true);
        let p = fixtures::ev_five_vehicle();
        assert!(matches!(
            solve_ev_with(&p, &EvSolverOptions::default(), Some(&flag)),
            Err(Error::Cancelled)
        ));
    }

    #[test]
    fn iteration_cap_reports_residuals() {
        let opts = EvSolverOptions {
            max_iterations: 3,
            ..Default::default()
        };
        match solve_ev_with(&fixtures::ev_five_vehicle(), &opts, None) {
            Err(Error::ConvergenceFailure { iterations: 3, primal, dual }) => {
                assert!(primal.is_finite() && dual.is_finite())
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn summary_of_zero_schedule() {
        let p = fixtures::ev_five_vehicle();
        let s = ChargingSchedule::from_power(&p, vec![vec![0.0; 20]; 5]).unwrap();
        let sum = summarize_schedule(&p, &s);
        for v in &sum.vehicles {
            assert_eq!(v.deficit, 100.0);
            assert_eq!(v.delivered, 0.0);
        }
        assert_eq!(sum.peak_aggregate, 0.0);
        assert!(sum.capacity_binding.is_empty());
    }

    #[test]
    fn summary_of_reference_solution() {
        let p = fixtures::ev_five_vehicle();
        let s = solve_ev(&p).unwrap();
        let sum = summarize_schedule(&p, &s);
        for v in &sum.vehicles {
            assert!((v.delivered - 100.0).abs() <= 0.1);
        }
        assert!(sum.peak_aggregate <= 30.0 + 1e-6);
        assert!(sum.rate_saturated.contains(&0));
        let text = sum.to_string();
        assert!(text.contains("vehicle 1: delivered 100.000 kWh"), "{text}");
    }

    #[test]
    fn csv_has_three_decimals() {
        let p = EvProblem::with_uniform_capacity(vec![EvSession::new(0.0, 5.0, 10.0, 2)], 2, 10.0)
            .unwrap();
        let s = ChargingSchedule::from_power(&p, vec![vec![2.5, 1.0 / 3.0]]).unwrap();
        assert_eq!(schedule_to_csv(&s), "2.500,0.333\n");
    }
}
