//! Exact convex solvers for economic dispatch and EV charging, plus the
//! LLM-driven workflows built on top of them: a prompt-based optimizer loop
//! with feasibility filtering, a tool-calling charging assistant,
//! retrieval-augmented document QA and a few-shot image classification
//! harness.
//!
//! Everything that talks to a model goes through [`llm::ChatProvider`], so
//! each workflow runs offline against scripted or replayed providers.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod assistant;
pub mod dispatch;
pub mod doc;
pub mod error;
pub mod ev;
pub mod llm;
pub mod opro;
pub mod problem;
pub mod sa;
pub mod store;

pub use dispatch::{solve_dispatch, solve_dispatch_for_demand, DispatchSolverReport};
pub use error::{Error, Result};
pub use ev::{schedule_to_csv, solve_ev, summarize_schedule, EvSolverOptions, ScheduleSummary};
pub use problem::{
    check_dispatch_feasible, check_ev_feasible, cost_of, ChargingSchedule, DispatchProblem,
    DispatchSolution, EvProblem, EvSession, Feasibility, GeneratorParams, Violation,
};
