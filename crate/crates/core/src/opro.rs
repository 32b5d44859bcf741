//! Optimization by prompting for economic dispatch.
//!
//! A [`SolutionCostBuffer`] of feasible (solution, cost) pairs seeds every
//! meta-prompt; each step asks the model for one new candidate, parses it,
//! and stores it only if it is feasible and not a near-duplicate. The
//! resulting [`OproRunRecord`] keeps every exchange, so a run can be
//! replayed byte-for-byte or resumed after an interruption.

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::llm::{ChatMessage, ChatProvider, ChatRequest, ReplayProvider};
use crate::problem::{check_dispatch_feasible, cost_of, DispatchProblem, Violation, DEFAULT_TOL};
use crate::store::{self, StoreError};

pub const RUN_FORMAT: &str = "opro-run";
pub const RUN_VERSION: u32 = 1;

/// Consecutive transport failures after which a run gives up.
pub const MAX_TRANSPORT_FAILURES: usize = 3;

const EXAMPLE_VALUES: [&str; 5] = ["123.11", "80.2", "99.67", "101.52", "37"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OproConfig {
    pub steps: usize,
    pub top_k: usize,
    pub seed_count: usize,
    pub temperature: f64,
    pub dedup_epsilon: f64,
    pub capacity: usize,
    /// Seed for the initial buffer sampler.
    pub seed: u64,
}

impl Default for OproConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            top_k: 20,
            seed_count: 2,
            temperature: 1.0,
            dedup_epsilon: 1e-3,
            capacity: 256,
            seed: 0,
        }
    }
}

impl OproConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::InvalidInput("steps must be at least 1".into()));
        }
        if self.top_k < 1 {
            return Err(Error::InvalidInput("top_k must be at least 1".into()));
        }
        if self.capacity < 1 {
            return Err(Error::InvalidInput("capacity must be at least 1".into()));
        }
        if !(self.dedup_epsilon >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidInput("dedup_epsilon and temperature must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "step")]
pub enum Origin {
    Seed,
    Step(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub solution: Vec<f64>,
    pub cost: f64,
    /// Insertion sequence number; breaks cost ties (older first).
    pub seq: u64,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rejection {
    Infeasible { violations: Vec<Violation> },
    Duplicate { of_seq: u64 },
    Dimension { expected: usize, got: usize },
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::Infeasible { violations } => {
                let parts: Vec<String> = violations.iter().map(ToString::to_string).collect();
                write!(f, "infeasible: {}", parts.join("; "))
            }
            Rejection::Duplicate { of_seq } => write!(f, "duplicate of entry {of_seq}"),
            Rejection::Dimension { expected, got } => write!(f, "expected {expected} values, got {got}"),
        }
    }
}

/// Feasible (solution, cost) pairs, deduplicated and bounded in size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionCostBuffer {
    entries: Vec<BufferEntry>,
    capacity: usize,
    dedup_epsilon: f64,
    next_seq: u64,
}

impl SolutionCostBuffer {
    pub fn new(capacity: usize, dedup_epsilon: f64) -> Self {
        Self {
            entries: Vec::new(),
            capacity: capacity.max(1),
            dedup_epsilon,
            next_seq: 0,
        }
    }

    pub fn from_config(cfg: &OproConfig) -> Self {
        Self::new(cfg.capacity, cfg.dedup_epsilon)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dedup_epsilon(&self) -> f64 {
        self.dedup_epsilon
    }

    /// Entries in insertion order.
    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    /// Lowest cost first; ties resolved by insertion order.
    pub fn ranked(&self) -> Vec<&BufferEntry> {
        let mut v: Vec<&BufferEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| a.cost.total_cmp(&b.cost).then(a.seq.cmp(&b.seq)));
        v
    }

    pub fn best(&self) -> Option<&BufferEntry> {
        self.ranked().into_iter().next()
    }

    /// Why `solution` would be refused, if it would.
    pub fn screen(&self, problem: &DispatchProblem, solution: &[f64]) -> Option<Rejection> {
        if solution.len() != problem.dimension() {
            return Some(Rejection::Dimension {
                expected: problem.dimension(),
                got: solution.len(),
            });
        }
        let verdict = check_dispatch_feasible(problem, solution, DEFAULT_TOL).expect("dimension checked");
        if !verdict.is_ok() {
            return Some(Rejection::Infeasible {
                violations: verdict.violations,
            });
        }
        self.entries
            .iter()
            .find(|e| linf(&e.solution, solution) <= self.dedup_epsilon)
            .map(|e| Rejection::Duplicate { of_seq: e.seq })
    }

    /// Inserts `solution` priced by `cost_of` if it is feasible and new.
    pub fn try_insert(
        &mut self,
        problem: &DispatchProblem,
        solution: Vec<f64>,
        origin: Origin,
    ) -> std::result::Result<u64, Rejection> {
        if let Some(r) = self.screen(problem, &solution) {
            return Err(r);
        }
        let cost = cost_of(problem, &solution).expect("dimension checked by feasibility");
        Ok(self.push(solution, cost, origin))
    }

    /// Inserts with a caller-supplied cost (seed files carry their own).
    pub fn try_insert_priced(
        &mut self,
        problem: &DispatchProblem,
        solution: Vec<f64>,
        cost: f64,
        origin: Origin,
    ) -> std::result::Result<u64, Rejection> {
        if let Some(r) = self.screen(problem, &solution) {
            return Err(r);
        }
        Ok(self.push(solution, cost, origin))
    }

    fn push(&mut self, solution: Vec<f64>, cost: f64, origin: Origin) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.entries.push(BufferEntry {
            solution,
            cost,
            seq,
            origin,
        });
        while self.entries.len() > self.capacity {
            // Worst cost goes first; among equal costs the newest.
            let worst = self
                .entries
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.cost.total_cmp(&b.cost).then(a.seq.cmp(&b.seq)))
                .map(|(i, _)| i)
                .unwrap();
            self.entries.remove(worst);
        }
        seq
    }

    /// Checks every stored invariant; used by tests and after restores.
    pub fn audit(&self, problem: &DispatchProblem) -> std::result::Result<(), String> {
        if self.entries.len() > self.capacity {
            return Err(format!("{} entries exceed capacity {}", self.entries.len(), self.capacity));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if let Some(r @ (Rejection::Infeasible { .. } | Rejection::Dimension { .. })) =
                SolutionCostBuffer::new(1, 0.0).screen(problem, &e.solution)
            {
                return Err(format!("entry {}: {r}", e.seq));
            }
            for other in &self.entries[..i] {
                if linf(&other.solution, &e.solution) <= self.dedup_epsilon {
                    return Err(format!("entries {} and {} are duplicates", other.seq, e.seq));
                }
            }
        }
        Ok(())
    }
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Fills a buffer with `count` random feasible points.
///
/// Points are drawn uniformly in the box; a shortfall against demand is
/// spread over the units in proportion to their remaining headroom, then
/// each coordinate is rounded up to 0.01 MW (capped at its maximum) and the
/// point is re-checked.
pub fn seed_buffer(problem: &DispatchProblem, count: usize, seed: u64, cfg: &OproConfig) -> Result<SolutionCostBuffer> {
    if count < 1 {
        return Err(Error::InvalidInput("seed count must be at least 1".into()));
    }
    problem.validate()?;
    let mut buffer = SolutionCostBuffer::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_attempts = 1000 * count;
    let mut attempts = 0;
    while buffer.len() < count.min(cfg.capacity) {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Infeasible(format!(
                "could not sample {count} distinct feasible points in {max_attempts} attempts"
            )));
        }
        let mut p: Vec<f64> = problem
            .units
            .iter()
            .map(|u| if u.p_max > u.p_min { rng.random_range(u.p_min..=u.p_max) } else { u.p_min })
            .collect();
        let shortfall = problem.demand - p.iter().sum::<f64>();
        if shortfall > 0.0 {
            let headroom: f64 = problem.units.iter().zip(&p).map(|(u, x)| u.p_max - x).sum();
            let share = (shortfall / headroom).min(1.0);
            for (x, u) in p.iter_mut().zip(&problem.units) {
                *x += (u.p_max - *x) * share;
            }
        }
        for (x, u) in p.iter_mut().zip(&problem.units) {
            *x = ((*x * 100.0).ceil() / 100.0).clamp(u.p_min, u.p_max);
        }
        let _ = buffer.try_insert(problem, p, Origin::Seed);
    }
    Ok(buffer)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SeedFile {
    pairs: Vec<SeedPair>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SeedPair {
    solution: Vec<f64>,
    /// Stored verbatim when present, otherwise computed.
    cost: Option<f64>,
}

/// Loads seed pairs from TOML (`[[pairs]] solution = [...]`, optional `cost`).
/// Costs given in the file are kept as written; infeasible or duplicate
/// pairs are an error.
pub fn load_seed_buffer(problem: &DispatchProblem, text: &str, cfg: &OproConfig) -> Result<SolutionCostBuffer> {
    let file: SeedFile = toml::from_str(text).map_err(|e| Error::ProblemFile(e.to_string()))?;
    let mut buffer = SolutionCostBuffer::from_config(cfg);
    for (i, pair) in file.pairs.into_iter().enumerate() {
        if pair.solution.len() != problem.dimension() {
            return Err(Error::Dimension {
                expected: problem.dimension(),
                got: pair.solution.len(),
            });
        }
        let outcome = match pair.cost {
            Some(c) => buffer.try_insert_priced(problem, pair.solution, c, Origin::Seed),
            None => buffer.try_insert(problem, pair.solution, Origin::Seed),
        };
        if let Err(r) = outcome {
            return Err(Error::InvalidInput(format!("seed pair {}: {r}", i + 1)));
        }
    }
    if buffer.is_empty() {
        return Err(Error::InvalidInput("seed file has no pairs".into()));
    }
    Ok(buffer)
}

/// Up to six decimals, trailing zeros trimmed, at least one decimal kept.
pub fn format_value(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let mut s = format!("{x:.6}");
    while s.ends_with('0') {
        s.pop();
    }
    if s.ends_with('.') {
        s.push('0');
    }
    if s == "-0.0" {
        s = "0.0".into();
    }
    s
}

/// Like [`format_value`] but whole numbers print without decimals.
pub fn format_bound(x: f64) -> String {
    let s = format_value(x);
    s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
}

fn names(d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("p{i}")).collect()
}

fn prose_list(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [a, b] => format!("{a} and {b}"),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
    }
}

fn bracket(values: impl Iterator<Item = f64>) -> String {
    format!("[{}]", values.map(format_bound).collect::<Vec<_>>().join(", "))
}

/// `p1, p2 = 1.0, 2.5`
pub fn format_solution_line(solution: &[f64]) -> String {
    format!(
        "{} = {}",
        names(solution.len()).join(", "),
        solution.iter().map(|&x| format_value(x)).collect::<Vec<_>>().join(", ")
    )
}

/// The meta-prompt for one step.
pub fn build_prompt(problem: &DispatchProblem, buffer: &SolutionCostBuffer, cfg: &OproConfig) -> String {
    let d = problem.dimension();
    let vars = names(d);
    let listed = prose_list(&vars);
    let mut out = String::new();
    if d == 1 {
        out.push_str(&format!(
            "You need assistance in solving an optimization problem. This problem involves 1 optimization variable, namely {listed}. This variable is subject to constraints defined by its minimum and maximum values: p_min={} and p_max={}. Additionally, {listed} must be greater than or equal to {}.\n",
            bracket(problem.p_min().into_iter()),
            bracket(problem.p_max().into_iter()),
            format_bound(problem.demand),
        ));
        out.push_str(&format!(
            "Your objective is to provide a value for {listed} that satisfies the constraints and minimizes the optimization objective.\n"
        ));
    } else {
        out.push_str(&format!(
            "You need assistance in solving an optimization problem. This problem involves {d} optimization variables, namely {listed}. These variables are subject to constraints defined by their minimum and maximum values: p_min={} and p_max={}. Additionally, the sum of {listed} must be greater than or equal to {}.\n",
            bracket(problem.p_min().into_iter()),
            bracket(problem.p_max().into_iter()),
            format_bound(problem.demand),
        ));
        out.push_str(&format!(
            "Your objective is to provide values for {listed} that satisfy the constraints and minimize the optimization objective.\n"
        ));
    }
    out.push_str("Below are some previous solution and their objective value pairs. The pairs are arranged in descending order based on their function values, where lower values are better.\n\n");
    let mut shown: Vec<&BufferEntry> = buffer.ranked().into_iter().take(cfg.top_k).collect();
    shown.reverse();
    for (i, e) in shown.iter().enumerate() {
        out.push_str(&format!("Solution {}: {}\n", i + 1, format_solution_line(&e.solution)));
        out.push_str(&format!("Objective value {}: {}\n", i + 1, format_value(e.cost)));
    }
    let example: Vec<&str> = (0..d).map(|i| EXAMPLE_VALUES[i % EXAMPLE_VALUES.len()]).collect();
    out.push_str(&format!(
        "\nGive me a new ({}) pair that is different from all pairs above, and has a function value lower than any of the above. Do not give me any explanation, the form of response must strictly follow the example: {} = {}\n",
        vars.join(", "),
        vars.join(", "),
        example.join(", "),
    ));
    out
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[error("parse failure: {reason}")]
pub struct ParseFailure {
    pub reason: String,
}

impl ParseFailure {
    fn new(reason: impl Into<String>) -> Self {
        Self { reason: reason.into() }
    }
}

/// Recognizes `p<digits>(, p<digits>)* =` at the start of a line and
/// returns the variable indices and the text after `=`.
fn candidate(line: &str) -> Option<(Vec<usize>, &str)> {
    let line = line.trim().trim_matches('`').trim();
    let (lhs, rhs) = line.split_once('=')?;
    let lhs = lhs.trim();
    let lhs = lhs
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .unwrap_or(lhs);
    let mut idx = Vec::new();
    for name in lhs.split(',') {
        let digits = name.trim().strip_prefix('p')?;
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        idx.push(digits.parse().ok()?);
    }
    Some((idx, rhs))
}

/// Extracts the D values from a model reply.
pub fn parse_solution(text: &str, dimension: usize) -> std::result::Result<Vec<f64>, ParseFailure> {
    if dimension < 1 {
        return Err(ParseFailure::new("dimension must be at least 1"));
    }
    let found: Vec<(Vec<usize>, &str)> = text.lines().filter_map(candidate).collect();
    let (idx, rhs) = match found.len() {
        0 => return Err(ParseFailure::new("no line of the form `p1, ..., pD = v1, ..., vD`")),
        1 => found.into_iter().next().unwrap(),
        n => return Err(ParseFailure::new(format!("{n} candidate solution lines, expected exactly one"))),
    };
    let expected: Vec<usize> = (1..=dimension).collect();
    if idx.len() != dimension {
        return Err(ParseFailure::new(format!(
            "wrong arity: {} variables named, expected {dimension}",
            idx.len()
        )));
    }
    if idx != expected {
        return Err(ParseFailure::new(format!("variables must be p1..p{dimension} in order")));
    }
    let rhs = rhs.trim().trim_end_matches('`').trim();
    let rhs = rhs
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .or_else(|| rhs.strip_prefix('[').and_then(|s| s.strip_suffix(']')))
        .unwrap_or(rhs);
    let values: Vec<&str> = rhs.split(',').map(str::trim).collect();
    if values.len() != dimension {
        return Err(ParseFailure::new(format!(
            "wrong arity: {} values given, expected {dimension}",
            values.len()
        )));
    }
    values
        .iter()
        .enumerate()
        .map(|(i, v)| match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            Ok(_) => Err(ParseFailure::new(format!("value {} is not finite: {v:?}", i + 1))),
            Err(_) => Err(ParseFailure::new(format!("value {} is not a number: {v:?}", i + 1))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Verdict {
    Accepted { seq: u64 },
    ParseFailure { reason: String },
    Infeasible { violations: Vec<Violation> },
    Duplicate { of_seq: u64 },
}

impl Verdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Verdict::Accepted { .. })
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Accepted { seq } => write!(f, "accepted as entry {seq}"),
            Verdict::ParseFailure { reason } => write!(f, "unparseable: {reason}"),
            Verdict::Infeasible { violations } => {
                write!(f, "{}", Rejection::Infeasible { violations: violations.clone() })
            }
            Verdict::Duplicate { of_seq } => write!(f, "duplicate of entry {of_seq}"),
        }
    }
}

/// One model exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub prompt: String,
    pub response: String,
    pub parsed: Option<Vec<f64>>,
    pub cost: Option<f64>,
    pub verdict: Verdict,
    pub accepted: bool,
    pub best_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Cancelled,
    Aborted { reason: String },
}

impl RunStatus {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, RunStatus::Running)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportFailure {
    pub step: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OproRunRecord {
    pub problem: DispatchProblem,
    pub config: OproConfig,
    pub seed: SolutionCostBuffer,
    pub steps: Vec<StepLog>,
    pub status: RunStatus,
    #[serde(default)]
    pub transport_failures: Vec<TransportFailure>,
}

impl OproRunRecord {
    pub fn new(problem: DispatchProblem, config: OproConfig, seed: SolutionCostBuffer) -> Self {
        Self {
            problem,
            config,
            seed,
            steps: Vec::new(),
            status: RunStatus::Running,
            transport_failures: Vec::new(),
        }
    }

    /// The buffer as it stood after the last logged step.
    pub fn buffer(&self) -> SolutionCostBuffer {
        let mut b = self.seed.clone();
        for s in &self.steps {
            if let (true, Some(p)) = (s.accepted, &s.parsed) {
                let _ = b.try_insert(&self.problem, p.clone(), Origin::Step(s.step));
            }
        }
        b
    }

    pub fn best(&self) -> Option<BufferEntry> {
        self.buffer().best().cloned()
    }

    pub fn seed_best_cost(&self) -> f64 {
        self.seed.best().map_or(f64::INFINITY, |e| e.cost)
    }

    /// Best cost after each step.
    pub fn best_trace(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.best_cost).collect()
    }

    pub fn accepted_count(&self) -> usize {
        self.steps.iter().filter(|s| s.accepted).count()
    }

    /// Persists as a JSONL artifact: header with problem, config, seed
    /// buffer and status, then one line per step.
    pub fn save(&self, path: &Path) -> std::result::Result<(), StoreError> {
        let mut meta = Map::new();
        meta.insert("problem".into(), to_json(&self.problem)?);
        meta.insert("config".into(), to_json(&self.config)?);
        meta.insert("seed".into(), to_json(&self.seed)?);
        meta.insert("status".into(), to_json(&self.status)?);
        meta.insert("transport_failures".into(), to_json(&self.transport_failures)?);
        store::save_records(path, RUN_FORMAT, RUN_VERSION, meta, &self.steps)
    }

    pub fn load(path: &Path) -> std::result::Result<Self, StoreError> {
        let (header, steps) = store::load_records::<StepLog>(path, RUN_FORMAT, RUN_VERSION)?;
        let field = |name: &str| -> std::result::Result<Value, StoreError> {
            header.meta.get(name).cloned().ok_or_else(|| StoreError::Integrity {
                offset: 0,
                reason: format!("header lacks `{name}`"),
            })
        };
        let bad = |e: serde_json::Error| StoreError::Integrity {
            offset: 0,
            reason: e.to_string(),
        };
        Ok(Self {
            problem: serde_json::from_value(field("problem")?).map_err(bad)?,
            config: serde_json::from_value(field("config")?).map_err(bad)?,
            seed: serde_json::from_value(field("seed")?).map_err(bad)?,
            status: serde_json::from_value(field("status")?).map_err(bad)?,
            transport_failures: serde_json::from_value(field("transport_failures")?).map_err(bad)?,
            steps,
        })
    }

    /// A provider that answers this run's prompts with its recorded replies.
    pub fn replay_provider(&self) -> ReplayProvider {
        ReplayProvider::from_pairs(
            self.steps
                .iter()
                .map(|s| (prompt_messages(&s.prompt), s.response.clone())),
        )
    }
}

fn to_json<T: Serialize>(value: &T) -> std::result::Result<Value, StoreError> {
    serde_json::to_value(value).map_err(|e| StoreError::Serialize(e.to_string()))
}

/// The meta-prompt travels as a single system message.
pub fn prompt_messages(prompt: &str) -> Vec<ChatMessage> {
    vec![ChatMessage::system(prompt)]
}

fn request_for(prompt: &str, cfg: &OproConfig) -> ChatRequest {
    ChatRequest::new(prompt_messages(prompt)).with_temperature(cfg.temperature)
}

/// One query-parse-screen cycle. Transport errors carry the step index.
pub fn opro_step(
    problem: &DispatchProblem,
    buffer: &mut SolutionCostBuffer,
    cfg: &OproConfig,
    model: &dyn ChatProvider,
    step: usize,
) -> Result<StepLog> {
    let prompt = build_prompt(problem, buffer, cfg);
    let response = model
        .chat(&request_for(&prompt, cfg))
        .map_err(|source| Error::Step { step, source })?;
    let text = response.content();
    let (parsed, cost, verdict) = match parse_solution(&text, problem.dimension()) {
        Err(e) => (None, None, Verdict::ParseFailure { reason: e.reason }),
        Ok(p) => {
            let cost = cost_of(problem, &p).ok();
            let verdict = match buffer.try_insert(problem, p.clone(), Origin::Step(step)) {
                Ok(seq) => Verdict::Accepted { seq },
                Err(Rejection::Infeasible { violations }) => Verdict::Infeasible { violations },
                Err(Rejection::Duplicate { of_seq }) => Verdict::Duplicate { of_seq },
                Err(r @ Rejection::Dimension { .. }) => Verdict::ParseFailure { reason: r.to_string() },
            };
            (Some(p), cost, verdict)
        }
    };
    tracing::debug!(step, %verdict, "opro step");
    Ok(StepLog {
        step,
        prompt,
        response: text,
        parsed,
        cost,
        accepted: verdict.is_accepted(),
        verdict,
        best_cost: buffer.best().map_or(f64::INFINITY, |e| e.cost),
    })
}

/// Drives a run one step at a time. The record is complete after every
/// step, so callers can persist it between steps.
pub struct OproRunner {
    record: OproRunRecord,
    buffer: SolutionCostBuffer,
    consecutive_failures: usize,
}

impl OproRunner {
    pub fn new(problem: DispatchProblem, cfg: OproConfig, seed: SolutionCostBuffer) -> Result<Self> {
        cfg.validate()?;
        problem.validate()?;
        if seed.is_empty() {
            return Err(Error::InvalidInput("seed buffer is empty".into()));
        }
        Ok(Self {
            buffer: seed.clone(),
            record: OproRunRecord::new(problem, cfg, seed),
            consecutive_failures: 0,
        })
    }

    /// Continues a persisted run from its last logged step.
    pub fn resume(mut record: OproRunRecord) -> Result<Self> {
        record.config.validate()?;
        let buffer = record.buffer();
        buffer
            .audit(&record.problem)
            .map_err(|e| Error::InvalidInput(format!("restored buffer: {e}")))?;
        if record.steps.len() < record.config.steps && !matches!(record.status, RunStatus::Completed) {
            record.status = RunStatus::Running;
        }
        Ok(Self {
            record,
            buffer,
            consecutive_failures: 0,
        })
    }

    pub fn record(&self) -> &OproRunRecord {
        &self.record
    }

    pub fn into_record(self) -> OproRunRecord {
        self.record
    }

    pub fn buffer(&self) -> &SolutionCostBuffer {
        &self.buffer
    }

    pub fn is_done(&self) -> bool {
        self.record.status.is_terminal()
    }

    pub fn cancel(&mut self) {
        if !self.is_done() {
            self.record.status = RunStatus::Cancelled;
        }
    }

    /// Issues one model call. A transport failure leaves the step to be
    /// retried; the third in a row aborts the run.
    pub fn advance(&mut self, model: &dyn ChatProvider) -> Option<&StepLog> {
        if self.is_done() {
            return None;
        }
        if self.record.steps.len() >= self.record.config.steps {
            self.record.status = RunStatus::Completed;
            return None;
        }
        let step = self.record.steps.len() + 1;
        let problem = self.record.problem.clone();
        match opro_step(&problem, &mut self.buffer, &self.record.config, model, step) {
            Ok(log) => {
                self.consecutive_failures = 0;
                self.record.steps.push(log);
                if self.record.steps.len() >= self.record.config.steps {
                    self.record.status = RunStatus::Completed;
                }
                self.record.steps.last()
            }
            Err(e) => {
                self.consecutive_failures += 1;
                tracing::warn!(step, error = %e, "opro transport failure");
                self.record.transport_failures.push(TransportFailure {
                    step,
                    message: e.to_string(),
                });
                if self.consecutive_failures >= MAX_TRANSPORT_FAILURES {
                    self.record.status = RunStatus::Aborted {
                        reason: format!("{MAX_TRANSPORT_FAILURES} consecutive transport failures at step {step}: {e}"),
                    };
                }
                None
            }
        }
    }

    /// Runs to completion, abort or cancellation, calling `on_step` after
    /// every model call.
    pub fn run(
        &mut self,
        model: &dyn ChatProvider,
        cancel: Option<&AtomicBool>,
        mut on_step: impl FnMut(&OproRunRecord),
    ) {
        while !self.is_done() {
            if cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
                self.cancel();
                on_step(&self.record);
                break;
            }
            self.advance(model);
            on_step(&self.record);
        }
    }
}

/// Seeds a buffer from `cfg.seed_count` samples and runs `cfg.steps` steps.
pub fn run_opro(problem: &DispatchProblem, cfg: &OproConfig, model: &dyn ChatProvider) -> Result<OproRunRecord> {
    cfg.validate()?;
    let seed = seed_buffer(problem, cfg.seed_count, cfg.seed, cfg)?;
    run_opro_seeded(problem, cfg, seed, model)
}

pub fn run_opro_seeded(
    problem: &DispatchProblem,
    cfg: &OproConfig,
    seed: SolutionCostBuffer,
    model: &dyn ChatProvider,
) -> Result<OproRunRecord> {
    let mut runner = OproRunner::new(problem.clone(), cfg.clone(), seed)?;
    runner.run(model, None, |_| {});
    Ok(runner.into_record())
}

/// Re-prices the previous run's stored pairs under `new_problem`, keeps the
/// feasible ones, and falls back to fresh samples when none survive.
pub fn adapt_seed(previous: &OproRunRecord, new_problem: &DispatchProblem, cfg: &OproConfig) -> Result<SolutionCostBuffer> {
    new_problem.validate()?;
    if new_problem.dimension() != previous.problem.dimension() {
        return Err(Error::Dimension {
            expected: previous.problem.dimension(),
            got: new_problem.dimension(),
        });
    }
    let mut seed = SolutionCostBuffer::from_config(cfg);
    for e in previous.buffer().entries() {
        let _ = seed.try_insert(new_problem, e.solution.clone(), Origin::Seed);
    }
    if seed.is_empty() {
        tracing::info!("no previous pair is feasible for the new task; sampling a fresh seed");
        return seed_buffer(new_problem, cfg.seed_count, cfg.seed, cfg);
    }
    Ok(seed)
}

pub fn adapt_task(
    previous: &OproRunRecord,
    new_problem: &DispatchProblem,
    cfg: &OproConfig,
    model: &dyn ChatProvider,
) -> Result<OproRunRecord> {
    cfg.validate()?;
    if previous.steps.is_empty() && previous.seed.is_empty() {
        return Err(Error::InvalidInput("previous run is empty".into()));
    }
    let seed = adapt_seed(previous, new_problem, cfg)?;
    run_opro_seeded(new_problem, cfg, seed, model)
}

/// Re-executes a run against its own recorded replies.
pub fn replay_run(record: &OproRunRecord) -> Result<OproRunRecord> {
    let provider = record.replay_provider();
    let mut cfg = record.config.clone();
    cfg.steps = record.steps.len().max(1);
    let mut runner = OproRunner::new(record.problem.clone(), cfg, record.seed.clone())?;
    for _ in 0..record.steps.len() {
        runner.advance(&provider);
    }
    let mut out = runner.into_record();
    out.config = record.config.clone();
    out.status = record.status.clone();
    out.transport_failures = record.transport_failures.clone();
    Ok(out)
}
