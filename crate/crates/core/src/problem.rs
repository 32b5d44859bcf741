//! Problem definitions shared by the solvers, the optimizer loop and the
//! assistant: quadratic-cost economic dispatch and multi-vehicle charging.
//!
//! Problem files are TOML documents whose keys match the field names of the
//! types below. A dispatch file looks like
//!
//! ```toml
//! demand = 400.0
//! [[units]]
//! a = 3.0
//! b = 20.0
//! c = 100.0
//! p_min = 28.0
//! p_max = 206.0
//! ```
//!
//! and a charging file like
//!
//! ```toml
//! timesteps = 20
//! capacity = 30.0          # or a list with one entry per step
//! efficiency = 1.0         # optional
//! [[sessions]]
//! initial = 0.0
//! target = 100.0
//! u_max = 10.0
//! depart = 10              # u_min and arrival default to 0
//! ```

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance applied to every constraint unless the caller picks one.
pub const DEFAULT_TOL: f64 = 1e-6;

/// Quadratic cost `a·P² + b·P + c` and operating box of one thermal unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub p_min: f64,
    pub p_max: f64,
}

impl GeneratorParams {
    pub const fn new(a: f64, b: f64, c: f64, p_min: f64, p_max: f64) -> Self {
        Self { a, b, c, p_min, p_max }
    }

    pub fn cost(&self, power: f64) -> f64 {
        self.a * power * power + self.b * power + self.c
    }

    /// Derivative of the cost curve.
    pub fn marginal_cost(&self, power: f64) -> f64 {
        2.0 * self.a * power + self.b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchProblem {
    pub units: Vec<GeneratorParams>,
    /// Total generation requirement in MW.
    pub demand: f64,
    /// Free-form provenance of the coefficient data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl DispatchProblem {
    pub fn new(units: Vec<GeneratorParams>, demand: f64) -> Result<Self> {
        let problem = Self {
            units,
            demand,
            source: None,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        if self.units.is_empty() {
            return Err(Error::InvalidInput("dispatch problem needs at least one unit".into()));
        }
        if !self.demand.is_finite() || self.demand < 0.0 {
            return Err(Error::InvalidInput(format!(
                "demand must be finite and non-negative, got {}",
                self.demand
            )));
        }
        for (i, u) in self.units.iter().enumerate() {
            let finite = [u.a, u.b, u.c, u.p_min, u.p_max].iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::InvalidInput(format!("unit {}: non-finite parameter", i + 1)));
            }
            if u.p_min > u.p_max {
                return Err(Error::InvalidInput(format!(
                    "unit {}: p_min {} exceeds p_max {}",
                    i + 1,
                    u.p_min,
                    u.p_max
                )));
            }
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.units.len()
    }

    pub fn with_demand(&self, demand: f64) -> Result<Self> {
        let mut next = self.clone();
        next.demand = demand;
        next.validate()?;
        Ok(next)
    }

    pub fn p_min(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.p_min).collect()
    }

    pub fn p_max(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.p_max).collect()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let problem: Self = toml::from_str(text).map_err(|e| Error::ProblemFile(e.to_string()))?;
        problem.validate()?;
        Ok(problem)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("dispatch problem serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchSolution {
    pub power: Vec<f64>,
    pub cost: f64,
}

impl DispatchSolution {
    pub fn evaluate(problem: &DispatchProblem, power: Vec<f64>) -> Result<Self> {
        let cost = cost_of(problem, &power)?;
        Ok(Self { power, cost })
    }
}

/// Total generation cost, summed exactly as `Σ a·P² + b·P + c`.
pub fn cost_of(problem: &DispatchProblem, power: &[f64]) -> Result<f64> {
    check_len(problem.units.len(), power.len())?;
    Ok(problem
        .units
        .iter()
        .zip(power)
        .map(|(unit, &p)| unit.cost(p))
        .sum())
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { expected, got });
    }
    Ok(())
}

/// One violated constraint and how far it is violated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// Dispatch output below the unit's lower limit (units are 1-based).
    BelowMin { unit: usize, value: f64, bound: f64, residual: f64 },
    AboveMax { unit: usize, value: f64, bound: f64, residual: f64 },
    DemandShortfall { total: f64, demand: f64, residual: f64 },
    NonFinite { index: usize },
    /// Charging power outside the session's `[arrival, depart)` window
    /// (vehicles and steps are 0-based).
    Window { vehicle: usize, step: usize, value: f64 },
    RateBelow { vehicle: usize, step: usize, value: f64, bound: f64, residual: f64 },
    RateAbove { vehicle: usize, step: usize, value: f64, bound: f64, residual: f64 },
    Capacity { step: usize, total: f64, capacity: f64, residual: f64 },
    Overcharge { vehicle: usize, terminal: f64, target: f64, residual: f64 },
    Dynamics { vehicle: usize, step: usize, stored: f64, expected: f64 },
    NonFiniteEntry { vehicle: usize, step: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::BelowMin { unit, value, bound, .. } => {
                write!(f, "unit {unit} below p_min ({value} < {bound})")
            }
            Violation::AboveMax { unit, value, bound, .. } => {
                write!(f, "unit {unit} above p_max ({value} > {bound})")
            }
            Violation::DemandShortfall { total, demand, residual } => {
                write!(f, "demand shortfall {residual:.6e} (total {total} < demand {demand})")
            }
            Violation::NonFinite { index } => write!(f, "entry {} is not finite", index + 1),
            Violation::Window { vehicle, step, value } => {
                write!(f, "vehicle {vehicle} charges {value} at step {step} outside its window")
            }
            Violation::RateBelow { vehicle, step, value, bound, .. } => {
                write!(f, "vehicle {vehicle} step {step}: rate {value} below {bound}")
            }
            Violation::RateAbove { vehicle, step, value, bound, .. } => {
                write!(f, "vehicle {vehicle} step {step}: rate {value} above {bound}")
            }
            Violation::Capacity { step, total, capacity, .. } => {
                write!(f, "step {step}: aggregate {total} exceeds capacity {capacity}")
            }
            Violation::Overcharge { vehicle, terminal, target, .. } => {
                write!(f, "vehicle {vehicle} ends at {terminal}, above target {target}")
            }
            Violation::Dynamics { vehicle, step, stored, expected } => {
                write!(f, "vehicle {vehicle} soc[{step}] = {stored}, dynamics give {expected}")
            }
            Violation::NonFiniteEntry { vehicle, step } => {
                write!(f, "vehicle {vehicle} step {step}: non-finite power")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    pub violations: Vec<Violation>,
}

impl Feasibility {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    /// Human-readable reason, `None` when feasible.
    pub fn reason(&self) -> Option<String> {
        if self.is_ok() {
            return None;
        }
        Some(
            self.violations
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; "),
        )
    }
}

pub fn check_dispatch_feasible(
    problem: &DispatchProblem,
    power: &[f64],
    tol: f64,
) -> Result<Feasibility> {
    check_len(problem.units.len(), power.len())?;
    let mut violations = Vec::new();
    for (i, (unit, &p)) in problem.units.iter().zip(power).enumerate() {
        if !p.is_finite() {
            violations.push(Violation::NonFinite { index: i });
            continue;
        }
        if p < unit.p_min - tol {
            violations.push(Violation::BelowMin {
                unit: i + 1,
                value: p,
                bound: unit.p_min,
                residual: unit.p_min - p,
            });
        }
        if p > unit.p_max + tol {
            violations.push(Violation::AboveMax {
                unit: i + 1,
                value: p,
                bound: unit.p_max,
                residual: p - unit.p_max,
            });
        }
    }
    let total: f64 = power.iter().sum();
    if !(total >= problem.demand - tol) && total.is_finite() {
        violations.push(Violation::DemandShortfall {
            total,
            demand: problem.demand,
            residual: problem.demand - total,
        });
    }
    Ok(Feasibility { violations })
}

/// One charging session: energy in kWh, power in kW, steps as indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvSession {
    pub initial: f64,
    pub target: f64,
    #[serde(default)]
    pub u_min: f64,
    pub u_max: f64,
    #[serde(default)]
    pub arrival: usize,
    pub depart: usize,
}

impl EvSession {
    pub fn new(initial: f64, target: f64, u_max: f64, depart: usize) -> Self {
        Self {
            initial,
            target,
            u_min: 0.0,
            u_max,
            arrival: 0,
            depart,
        }
    }

    /// Whether the session may draw power at step `t` (half-open window).
    pub fn is_active(&self, t: usize) -> bool {
        t >= self.arrival && t < self.depart
    }

    /// Energy still needed to hit the target.
    pub fn needed(&self) -> f64 {
        self.target - self.initial
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum CapacitySpec {
    Uniform(f64),
    PerStep(Vec<f64>),
}

#[derive(Debug, Deserialize)]
struct EvProblemFile {
    sessions: Vec<EvSession>,
    timesteps: usize,
    capacity: CapacitySpec,
    #[serde(default = "unit_efficiency")]
    efficiency: f64,
}

fn unit_efficiency() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvProblem {
    pub sessions: Vec<EvSession>,
    pub timesteps: usize,
    /// Aggregate station limit per step, kW.
    pub capacity: Vec<f64>,
    #[serde(default = "unit_efficiency")]
    pub efficiency: f64,
}

impl EvProblem {
    pub fn new(sessions: Vec<EvSession>, timesteps: usize, capacity: Vec<f64>) -> Result<Self> {
        let problem = Self {
            sessions,
            timesteps,
            capacity,
            efficiency: 1.0,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn with_uniform_capacity(
        sessions: Vec<EvSession>,
        timesteps: usize,
        capacity: f64,
    ) -> Result<Self> {
        Self::new(sessions, timesteps, vec![capacity; timesteps])
    }

    pub fn vehicles(&self) -> usize {
        self.sessions.len()
    }

    /// Checks the structural invariants. An empty session list is allowed
    /// here; the solver rejects it separately.
    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidInput(msg));
        if self.timesteps == 0 {
            return invalid("timesteps must be positive".into());
        }
        if self.capacity.len() != self.timesteps {
            return Err(Error::Dimension {
                expected: self.timesteps,
                got: self.capacity.len(),
            });
        }
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return invalid(format!("efficiency must lie in (0, 1], got {}", self.efficiency));
        }
        for (t, &cap) in self.capacity.iter().enumerate() {
            if !cap.is_finite() || cap < 0.0 {
                return invalid(format!("capacity[{t}] must be finite and non-negative, got {cap}"));
            }
        }
        for (j, s) in self.sessions.iter().enumerate() {
            let values = [s.initial, s.target, s.u_min, s.u_max];
            if values.iter().any(|v| !v.is_finite()) {
                return invalid(format!("session {j}: non-finite parameter"));
            }
            if s.initial < 0.0 {
                return invalid(format!("session {j}: initial energy is negative"));
            }
            if s.target < s.initial {
                return invalid(format!(
                    "session {j}: target {} below initial {}",
                    s.target, s.initial
                ));
            }
            if s.u_min < 0.0 || s.u_max < s.u_min {
                return invalid(format!(
                    "session {j}: rate bounds must satisfy 0 <= u_min <= u_max, got [{}, {}]",
                    s.u_min, s.u_max
                ));
            }
            if s.arrival > s.depart {
                return invalid(format!(
                    "session {j}: arrival {} after departure {}",
                    s.arrival, s.depart
                ));
            }
            if s.depart > self.timesteps {
                return invalid(format!(
                    "session {j}: departure {} beyond horizon {}",
                    s.depart, self.timesteps
                ));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: EvProblemFile =
            toml::from_str(text).map_err(|e| Error::ProblemFile(e.to_string()))?;
        let capacity = match file.capacity {
            CapacitySpec::Uniform(c) => vec![c; file.timesteps],
            CapacitySpec::PerStep(v) => v,
        };
        let problem = Self {
            sessions: file.sessions,
            timesteps: file.timesteps,
            capacity,
            efficiency: file.efficiency,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// State-of-charge trajectories implied by a power matrix.
    pub fn simulate(&self, power: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.sessions
            .iter()
            .zip(power)
            .map(|(s, row)| {
                let mut soc = Vec::with_capacity(row.len() + 1);
                let mut x = s.initial;
                soc.push(x);
                for &u in row {
                    x += self.efficiency * u;
                    soc.push(x);
                }
                soc
            })
            .collect()
    }

    fn check_shape(&self, power: &[Vec<f64>]) -> Result<()> {
        check_len(self.vehicles(), power.len())?;
        for row in power {
            check_len(self.timesteps, row.len())?;
        }
        Ok(())
    }
}

/// Power and state-of-charge matrices for every vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargingSchedule {
    /// `vehicles × T`, kW.
    pub power: Vec<Vec<f64>>,
    /// `vehicles × (T+1)`, kWh.
    pub soc: Vec<Vec<f64>>,
    /// Sum of squared terminal deficits.
    pub objective: f64,
    /// Euclidean norm of the terminal deficit vector (square root of `objective`).
    pub deficit_norm: f64,
}

impl ChargingSchedule {
    pub fn from_power(problem: &EvProblem, power: Vec<Vec<f64>>) -> Result<Self> {
        problem.check_shape(&power)?;
        let soc = problem.simulate(&power);
        let objective = terminal_objective(problem, &soc);
        Ok(Self {
            power,
            soc,
            objective,
            deficit_norm: objective.sqrt(),
        })
    }

    /// Full check of a stored schedule, including consistency of the stored
    /// state-of-charge with the charging dynamics.
    pub fn check(&self, problem: &EvProblem, tol: f64) -> Result<Feasibility> {
        let mut verdict = check_ev_feasible(problem, &self.power, tol)?;
        let expected = problem.simulate(&self.power);
        for (j, (stored, exp)) in self.soc.iter().zip(&expected).enumerate() {
            if stored.len() != exp.len() {
                return Err(Error::Dimension {
                    expected: exp.len(),
                    got: stored.len(),
                });
            }
            for (t, (&s, &e)) in stored.iter().zip(exp).enumerate() {
                if !((s - e).abs() <= tol) {
                    verdict.violations.push(Violation::Dynamics {
                        vehicle: j,
                        step: t,
                        stored: s,
                        expected: e,
                    });
                }
            }
        }
        Ok(verdict)
    }
}

fn terminal_objective(problem: &EvProblem, soc: &[Vec<f64>]) -> f64 {
    problem
        .sessions
        .iter()
        .zip(soc)
        .map(|(s, x)| {
            let d = x[x.len() - 1] - s.target;
            d * d
        })
        .sum()
}

/// Verifies window, rate, capacity and no-overcharge constraints of a power
/// matrix. The state of charge is derived from the dynamics, so it is
/// consistent by construction; use [`ChargingSchedule::check`] to audit a
/// stored trajectory.
pub fn check_ev_feasible(problem: &EvProblem, power: &[Vec<f64>], tol: f64) -> Result<Feasibility> {
    problem.check_shape(power)?;
    let mut violations = Vec::new();
    for (j, (s, row)) in problem.sessions.iter().zip(power).enumerate() {
        for (t, &u) in row.iter().enumerate() {
            if !u.is_finite() {
                violations.push(Violation::NonFiniteEntry { vehicle: j, step: t });
                continue;
            }
            if !s.is_active(t) {
                if u.abs() > tol {
                    violations.push(Violation::Window { vehicle: j, step: t, value: u });
                }
                continue;
            }
            if u < s.u_min - tol {
                violations.push(Violation::RateBelow {
                    vehicle: j,
                    step: t,
                    value: u,
                    bound: s.u_min,
                    residual: s.u_min - u,
                });
            }
            if u > s.u_max + tol {
                violations.push(Violation::RateAbove {
                    vehicle: j,
                    step: t,
                    value: u,
                    bound: s.u_max,
                    residual: u - s.u_max,
                });
            }
        }
    }
    for (t, &cap) in problem.capacity.iter().enumerate() {
        let total: f64 = power.iter().map(|row| row[t]).sum();
        if total.is_finite() && total > cap + tol {
            violations.push(Violation::Capacity {
                step: t,
                total,
                capacity: cap,
                residual: total - cap,
            });
        }
    }
    for (j, x) in problem.simulate(power).iter().enumerate() {
        let terminal = x[x.len() - 1];
        let target = problem.sessions[j].target;
        if terminal.is_finite() && terminal > target + tol {
            violations.push(Violation::Overcharge {
                vehicle: j,
                terminal,
                target,
                residual: terminal - target,
            });
        }
    }
    Ok(Feasibility { violations })
}

/// Bundled problem instances.
pub mod fixtures {
    use super::{DispatchProblem, EvProblem};

    pub const FIVE_UNIT_TOML: &str = include_str!("../assets/five_unit.toml");
    pub const EV_FIVE_VEHICLE_TOML: &str = include_str!("../assets/ev_five_vehicle.toml");
    /// Starting solution/cost pairs for the optimizer on [`five_unit`].
    pub const FIVE_UNIT_SEED_TOML: &str = include_str!("../assets/five_unit_seed.toml");

    /// Five thermal units with a 400 MW requirement.
    pub fn five_unit() -> DispatchProblem {
        DispatchProblem::from_toml_str(FIVE_UNIT_TOML).expect("bundled fixture is valid")
    }

    /// Five vehicles over 20 steps with staggered departures and a 30 kW station.
    pub fn ev_five_vehicle() -> EvProblem {
        EvProblem::from_toml_str(EV_FIVE_VEHICLE_TOML).expect("bundled fixture is valid")
    }

    /// Resolves a bundled fixture name, if `name` is one.
    pub fn dispatch_by_name(name: &str) -> Option<DispatchProblem> {
        matches!(name, "five_unit" | "five_unit.toml").then(five_unit)
    }

    pub fn ev_by_name(name: &str) -> Option<EvProblem> {
        matches!(name, "ev_five_vehicle" | "ev_five_vehicle.toml").then(ev_five_vehicle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(a: f64, b: f64, c: f64, lo: f64, hi: f64) -> GeneratorParams {
        GeneratorParams {
            a,
            b,
            c,
            p_min: lo,
            p_max: hi,
        }
    }

    fn bounds_only(demand: f64) -> DispatchProblem {
        let lo = [28.0, 90.0, 68.0, 76.0, 19.0];
        let hi = [206.0, 284.0, 189.0, 266.0, 53.0];
        let units = lo.iter().zip(hi).map(|(&l, h)| unit(1.0, 0.0, 0.0, l, h)).collect();
        DispatchProblem::new(units, demand).unwrap()
    }

    #[test]
    fn cost_direct_substitution() {
        let p = DispatchProblem::new(vec![unit(1.0, 2.0, 3.0, 0.0, 10.0)], 0.0).unwrap();
        assert_eq!(cost_of(&p, &[4.0]).unwrap(), 27.0);
    }

    #[test]
    fn cost_at_zero_is_sum_of_constants() {
        let p = fixtures::five_unit();
        let c: f64 = p.units.iter().map(|u| u.c).sum();
        assert_eq!(cost_of(&p, &[0.0; 5]).unwrap(), c);
    }

    #[test]
    fn cost_length_mismatch() {
        let p = fixtures::five_unit();
        assert!(matches!(
            cost_of(&p, &[1.0, 2.0]),
            Err(Error::Dimension { expected: 5, got: 2 })
        ));
    }

    #[test]
    fn five_unit_cost_at_reported_optimum() {
        let p = fixtures::five_unit();
        let c = cost_of(&p, &[102.8442, 90.0, 76.7303, 77.4255, 53.0]).unwrap();
        assert!((c - 131455.0).abs() <= 0.1, "{c}");
    }

    #[test]
    fn dispatch_feasible_example() {
        let p = bounds_only(400.0);
        let v = check_dispatch_feasible(&p, &[120.0, 90.0, 70.0, 85.0, 40.0], DEFAULT_TOL).unwrap();
        assert!(v.is_ok());
    }

    #[test]
    fn dispatch_below_min() {
        let p = bounds_only(400.0);
        let v = check_dispatch_feasible(&p, &[27.0, 90.0, 70.0, 85.0, 40.0], DEFAULT_TOL).unwrap();
        assert_eq!(v.violations.len(), 2, "{:?}", v.violations);
        assert!(matches!(v.violations[0], Violation::BelowMin { unit: 1, .. }));
    }

    #[test]
    fn dispatch_demand_shortfall_residual() {
        let p = bounds_only(400.0);
        let power = [100.0, 90.0, 70.0, 100.0, 39.9999];
        let v = check_dispatch_feasible(&p, &power, 1e-6).unwrap();
        // 400 - 399.9999 by hand.
        match &v.violations[..] {
            [Violation::DemandShortfall { residual, .. }] => {
                assert!((residual - 1e-4).abs() < 1e-9, "{residual}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_dispatch_problems() {
        assert!(DispatchProblem::new(vec![], 1.0).is_err());
        assert!(DispatchProblem::new(vec![unit(1.0, 0.0, 0.0, 0.0, 1.0)], -1.0).is_err());
        assert!(DispatchProblem::new(vec![unit(1.0, 0.0, 0.0, 2.0, 1.0)], 1.0).is_err());
        assert!(DispatchProblem::new(vec![unit(1.0, 0.0, 0.0, 0.0, 1.0)], f64::NAN).is_err());
    }

    #[test]
    fn ev_zero_schedule_is_feasible() {
        let p = fixtures::ev_five_vehicle();
        let zeros = vec![vec![0.0; 20]; 5];
        assert!(check_ev_feasible(&p, &zeros, DEFAULT_TOL).unwrap().is_ok());
    }

    #[test]
    fn ev_window_is_half_open() {
        let p = fixtures::ev_five_vehicle();
        let mut power = vec![vec![0.0; 20]; 5];
        power[0][10] = 1.0;
        let v = check_ev_feasible(&p, &power, DEFAULT_TOL).unwrap();
        assert_eq!(
            v.violations,
            vec![Violation::Window { vehicle: 0, step: 10, value: 1.0 }]
        );
        power[0][10] = 0.0;
        power[0][9] = 1.0;
        assert!(check_ev_feasible(&p, &power, DEFAULT_TOL).unwrap().is_ok());
    }

    #[test]
    fn ev_reported_schedule_is_feasible() {
        #[rustfmt::skip]
        let power = vec![
            vec![10., 10., 10., 10., 10., 10., 10., 10., 10., 10., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0.],
            vec![8.229, 8.229, 8.229, 8.229, 8.229, 8.229, 8.230, 8.230, 8.231, 8.232, 8.840, 8.853, 0., 0., 0., 0., 0., 0., 0., 0.],
            vec![4.978, 4.978, 4.978, 4.978, 4.978, 4.978, 4.978, 4.978, 4.978, 4.978, 7.668, 7.667, 8.720, 8.720, 8.722, 8.726, 0., 0., 0., 0.],
            vec![3.500, 3.500, 3.500, 3.500, 3.500, 3.500, 3.500, 3.500, 3.500, 3.500, 6.815, 6.814, 8.482, 8.482, 8.483, 8.484, 8.719, 8.722, 0., 0.],
            vec![2.347, 2.347, 2.347, 2.347, 2.347, 2.347, 2.347, 2.347, 2.347, 2.346, 5.093, 5.092, 8.082, 8.082, 8.082, 8.083, 8.459, 8.461, 8.546, 8.540],
        ];
        let p = fixtures::ev_five_vehicle();
        // The printed schedule is rounded to three decimals, so it is checked
        // at the print precision.
        let v = check_ev_feasible(&p, &power, 5e-3).unwrap();
        assert!(v.is_ok(), "{:?}", v.violations);
        let sched = ChargingSchedule::from_power(&p, power).unwrap();
        for x in &sched.soc {
            assert!((x[20] - 100.0).abs() < 0.05, "{}", x[20]);
        }
    }

    #[test]
    fn ev_capacity_rate_and_overcharge_violations() {
        let s = EvSession::new(0.0, 5.0, 4.0, 2);
        let p = EvProblem::with_uniform_capacity(vec![s.clone(), s], 2, 6.0).unwrap();
        let v = check_ev_feasible(&p, &[vec![4.5, 3.0], vec![3.0, 0.0]], DEFAULT_TOL).unwrap();
        let kinds: Vec<_> = v
            .violations
            .iter()
            .map(|v| serde_json::to_value(v).unwrap()["kind"].as_str().unwrap().to_string())
            .collect();
        assert_eq!(kinds, ["rate_above", "capacity", "overcharge"]);
    }

    #[test]
    fn ev_shape_mismatch() {
        let p = fixtures::ev_five_vehicle();
        assert!(matches!(
            check_ev_feasible(&p, &[vec![0.0; 20]], DEFAULT_TOL),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn stored_soc_is_audited() {
        let p = fixtures::ev_five_vehicle();
        let mut sched = ChargingSchedule::from_power(&p, vec![vec![1.0; 20]; 5]).unwrap_or_else(|e| panic!("{e}"));
        assert!(sched.check(&p, DEFAULT_TOL).unwrap().violations.iter().all(|v| !matches!(v, Violation::Dynamics { .. })));
        sched.soc[2][7] += 0.5;
        let v = sched.check(&p, DEFAULT_TOL).unwrap();
        assert!(v
            .violations
            .iter()
            .any(|v| matches!(v, Violation::Dynamics { vehicle: 2, step: 7, .. })));
    }

    #[test]
    fn ev_file_accepts_uniform_or_per_step_capacity() {
        let uniform = "timesteps = 2\ncapacity = 3.0\n[[sessions]]\ninitial = 0.0\ntarget = 1.0\nu_max = 1.0\ndepart = 2\n";
        let per_step = "timesteps = 2\ncapacity = [3.0, 3.0]\n[[sessions]]\ninitial = 0.0\ntarget = 1.0\nu_max = 1.0\ndepart = 2\n";
        assert_eq!(
            EvProblem::from_toml_str(uniform).unwrap(),
            EvProblem::from_toml_str(per_step).unwrap()
        );
        let bad = "timesteps = 2\ncapacity = [3.0]\n[[sessions]]\ninitial = 0.0\ntarget = 1.0\nu_max = 1.0\ndepart = 2\n";
        assert!(EvProblem::from_toml_str(bad).is_err());
    }

    #[test]
    fn dispatch_file_round_trip() {
        let p = fixtures::five_unit();
        assert_eq!(DispatchProblem::from_toml_str(&p.to_toml_string()).unwrap(), p);
    }
}
