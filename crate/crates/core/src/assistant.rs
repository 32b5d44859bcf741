//! Conversational front end for the charging solver.
//!
//! The model collects the `solve_EV` arguments from the user, then writes a
//! short code block calling the function. That block is parsed with a small
//! restricted grammar (literals, flat numeric lists, names bound earlier in
//! the block) and never executed. The native solver runs instead, its
//! summary goes back to the model, and the model explains the result.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::ev::{solve_ev, summarize_schedule, ScheduleSummary};
use crate::llm::{ChatMessage, ChatProvider, ChatRequest, Role};
use crate::problem::{ChargingSchedule, EvProblem, EvSession};
use crate::store::{self, StoreError};

pub const SESSION_FORMAT: &str = "assistant-session";
pub const SESSION_VERSION: u32 = 1;

/// Argument names of `solve_EV`, in positional order.
pub const SIGNATURE: [&str; 8] = [
    "num_of_vehicles",
    "timesteps",
    "initial_states",
    "max_power",
    "terminal_states",
    "dept_time",
    "power_capacity",
    "plot_fig",
];

/// Arguments that must be bound before the solver can run.
pub const REQUIRED: [&str; 7] = [
    "num_of_vehicles",
    "timesteps",
    "initial_states",
    "max_power",
    "terminal_states",
    "dept_time",
    "power_capacity",
];

/// First line of every tool-result message.
pub const TOOL_RESULT_MARKER: &str = "Python Interpreter Execution.";

const SYSTEM_PROMPT: &str = r#"You are an AI assistant specialized in solving EV charging problems. You have been provided with a predefined function called solve_EV() that is capable of addressing various EV charging problems:
```python
import numpy as np

def Solve_EV(num_of_vehicles, timesteps, initial_states, max_power, terminal_states, dept_time, power_capacity, plot_fig):
    x_terminal=cp.Parameter(num_of_vehicles, name='x_terminal')
    x0 = cp.Parameter(num_of_vehicles, name='x0')
    max_sum_u = cp.Parameter(name='max_sum_u')
    u_max = cp.Parameter(num_of_vehicles, name='u_max')
    x = cp.Variable((num_of_vehicles, timesteps+1), name='x')
    u = cp.Variable((num_of_vehicles, timesteps), name='u')

    x_terminal.value=terminal_states
    x0.value=initial_states
    max_sum_u.value = power_capacity
    u_max.value=max_power*np.ones((num_of_vehicles, ))

    obj = 0
    constr = [x[:,0] == x0, x[:,-1] <= x_terminal]

    for t in range(timesteps):
        constr += [x[:,t+1] == x[:,t] + u[:,t],
        u[:,t] <= u_max,
        u[:,t] >= 0,
        cp.sum(u[:,t]) <= max_sum_u,
        u[:,t] <= (t*np.ones_like(dept_time)<dept_time)*100.0+0.000001]
    obj -= cp.norm(x[:, -1]-x_terminal, 2)
    prob = cp.Problem(cp.Maximize(obj), constr)
    prob.solve()

    if plot_fig==True:
        plt.plot(x.value[0])
        plt.plot(u.value[0])
        plt.show()


    return x.value, u.value
```
When a user requests you to solve an EV charging problem, you should ask the user in natural language to provide the necessary parameters. Then, based on user's response, you should generate code to invoke solve_EV() function. Here is an example:

```python
num_of_vehicles = 3
timesteps = 10
initial_states = [0, 0, 0]
max_power = 10.0
terminal_states = [70, 50, 100]
dept_time = [8, 6, 10]
power_capacity = 20
solve_EV(num_of_vehicles, timesteps, initial_states, max_power, terminal_states, dept_time, power_capacity, plot_fig)
```
"#;

pub fn system_prompt_text() -> &'static str {
    SYSTEM_PROMPT
}

pub fn system_prompt() -> ChatMessage {
    ChatMessage::system(SYSTEM_PROMPT)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArgValue {
    Number(f64),
    List(Vec<f64>),
    Bool(bool),
    None,
}

impl fmt::Display for ArgValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArgValue::Number(x) => write!(f, "{x}"),
            ArgValue::List(xs) => {
                let parts: Vec<String> = xs.iter().map(|x| x.to_string()).collect();
                write!(f, "[{}]", parts.join(", "))
            }
            ArgValue::Bool(true) => f.write_str("True"),
            ArgValue::Bool(false) => f.write_str("False"),
            ArgValue::None => f.write_str("None"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInvocation {
    pub function: String,
    pub arguments: BTreeMap<String, ArgValue>,
}

impl ToolInvocation {
    pub fn get(&self, name: &str) -> Option<&ArgValue> {
        self.arguments.get(name)
    }

    /// Renders the invocation as a code block in the accepted grammar.
    pub fn to_code(&self) -> String {
        let mut out = String::from("```python\n");
        for name in REQUIRED {
            if let Some(v) = self.arguments.get(name) {
                out.push_str(&format!("{name} = {v}\n"));
            }
        }
        out.push_str(&format!("{}({})\n```", self.function, REQUIRED.join(", ")));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[error("extraction failure: {reason} (at `{fragment}`)")]
pub struct ExtractionFailure {
    pub reason: String,
    pub fragment: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing: Vec<String>,
}

impl ExtractionFailure {
    fn new(reason: impl Into<String>, fragment: impl Into<String>) -> Self {
        Self {
            reason: reason.into(),
            fragment: fragment.into(),
            missing: Vec::new(),
        }
    }
}

/// Fenced blocks in order of appearance; the info string is dropped.
fn fenced_blocks(text: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in text.lines() {
        let trimmed = line.trim_start();
        if trimmed.starts_with("```") {
            match current.take() {
                Some(lines) => blocks.push(lines.join("\n")),
                None => current = Some(Vec::new()),
            }
        } else if let Some(lines) = current.as_mut() {
            lines.push(line);
        }
    }
    if let Some(lines) = current {
        blocks.push(lines.join("\n"));
    }
    blocks
}

/// A statement whose expression is a call to the solver, optionally
/// assigned (`x, u = solve_EV(...)`).
fn is_call(stmt: &str) -> bool {
    let callee = match stmt.find('(') {
        Some(i) => &stmt[..i],
        None => return false,
    };
    let callee = callee.rsplit('=').next().unwrap_or(callee).trim();
    callee == "solve_EV" || callee == "Solve_EV"
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Splits on commas outside brackets and parentheses.
fn split_top(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '[' | '(' => depth += 1,
            ']' | ')' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&s[start..]);
    parts
}

fn bracket_balance(s: &str) -> i32 {
    s.chars()
        .map(|c| match c {
            '[' | '(' => 1,
            ']' | ')' => -1,
            _ => 0,
        })
        .sum()
}

enum Expr {
    Value(ArgValue),
    Name(String),
}

fn parse_number(s: &str) -> Option<f64> {
    let s = s.trim();
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit() || b"+-.eE".contains(&b)) {
        return None;
    }
    s.parse::<f64>().ok().filter(|x| x.is_finite())
}

fn parse_expr(s: &str) -> std::result::Result<Expr, ExtractionFailure> {
    let s = s.trim();
    let inner = s
        .strip_prefix("np.array(")
        .and_then(|r| r.strip_suffix(')'))
        .map(str::trim)
        .unwrap_or(s);
    match inner {
        "True" | "true" => return Ok(Expr::Value(ArgValue::Bool(true))),
        "False" | "false" => return Ok(Expr::Value(ArgValue::Bool(false))),
        "None" => return Ok(Expr::Value(ArgValue::None)),
        _ => {}
    }
    if let Some(body) = inner.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
        if body.contains('[') || body.contains('(') {
            return Err(ExtractionFailure::new("only flat numeric lists are supported", s));
        }
        let mut items: Vec<&str> = body.split(',').map(str::trim).collect();
        if items.last() == Some(&"") {
            items.pop();
        }
        return items
            .iter()
            .map(|it| parse_number(it).ok_or_else(|| ExtractionFailure::new(format!("`{it}` is not a number"), s)))
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map(|xs| Expr::Value(ArgValue::List(xs)));
    }
    if let Some(x) = parse_number(inner) {
        return Ok(Expr::Value(ArgValue::Number(x)));
    }
    if is_ident(inner) {
        return Ok(Expr::Name(inner.to_string()));
    }
    Err(ExtractionFailure::new("unsupported expression", s))
}

/// Joins physical lines into statements and drops comments.
fn statements(block: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut pending = String::new();
    for line in block.lines() {
        let code = line.split('#').next().unwrap_or("").trim();
        if code.is_empty() && pending.is_empty() {
            continue;
        }
        if !pending.is_empty() {
            pending.push(' ');
        }
        pending.push_str(code);
        if bracket_balance(&pending) <= 0 {
            out.push(std::mem::take(&mut pending));
        }
    }
    if !pending.trim().is_empty() {
        out.push(pending);
    }
    out
}

fn parse_call(
    stmt: &str,
    env: &BTreeMap<String, ArgValue>,
) -> std::result::Result<ToolInvocation, ExtractionFailure> {
    let open = stmt.find('(').expect("call contains a parenthesis");
    let head = stmt[..open].trim();
    let function = head.rsplit('=').next().unwrap_or(head).trim().to_string();
    let Some(args_text) = stmt[open + 1..].trim_end().strip_suffix(')') else {
        return Err(ExtractionFailure::new("unterminated call", stmt));
    };
    let mut arguments = BTreeMap::new();
    let mut missing = Vec::new();
    let mut seen_keyword = false;
    let raw: Vec<&str> = split_top(args_text).into_iter().map(str::trim).collect();
    let raw: Vec<&str> = if raw == [""] { Vec::new() } else { raw };
    for (pos, arg) in raw.iter().enumerate() {
        let (name, expr_text) = match arg.split_once('=') {
            Some((k, v)) if is_ident(k.trim()) && !v.starts_with('=') => {
                seen_keyword = true;
                (k.trim().to_string(), v)
            }
            _ => {
                if seen_keyword {
                    return Err(ExtractionFailure::new("positional argument after keyword argument", *arg));
                }
                match SIGNATURE.get(pos) {
                    Some(n) => (n.to_string(), *arg),
                    None => return Err(ExtractionFailure::new("too many arguments", *arg)),
                }
            }
        };
        if !SIGNATURE.contains(&name.as_str()) {
            return Err(ExtractionFailure::new(format!("unknown argument `{name}`"), *arg));
        }
        if arguments.contains_key(&name) {
            return Err(ExtractionFailure::new(format!("argument `{name}` given twice"), *arg));
        }
        let value = match parse_expr(expr_text)? {
            Expr::Value(v) => v,
            Expr::Name(id) => match env.get(&id) {
                Some(v) => v.clone(),
                None if name == "plot_fig" => ArgValue::None,
                None => {
                    missing.push(name.clone());
                    continue;
                }
            },
        };
        arguments.insert(name, value);
    }
    for name in REQUIRED {
        if !arguments.contains_key(name) && !missing.iter().any(|m| m == name) {
            missing.push(name.to_string());
        }
    }
    if !missing.is_empty() {
        let mut f = ExtractionFailure::new(format!("missing arguments: {}", missing.join(", ")), stmt);
        f.missing = missing;
        return Err(f);
    }
    let inv = ToolInvocation { function, arguments };
    check_arity(&inv, stmt)?;
    Ok(inv)
}

fn integral(v: &ArgValue) -> Option<i64> {
    match v {
        ArgValue::Number(x) if x.fract() == 0.0 && x.abs() < 1e15 => Some(*x as i64),
        _ => None,
    }
}

fn check_arity(inv: &ToolInvocation, stmt: &str) -> std::result::Result<(), ExtractionFailure> {
    let n = inv.get("num_of_vehicles").and_then(integral);
    let Some(n) = n.filter(|&n| n >= 1) else {
        return Err(ExtractionFailure::new("num_of_vehicles must be a positive integer", stmt));
    };
    if inv.get("timesteps").and_then(integral).is_none() {
        return Err(ExtractionFailure::new("timesteps must be an integer", stmt));
    }
    for name in ["initial_states", "max_power", "terminal_states", "dept_time"] {
        match inv.get(name) {
            Some(ArgValue::List(xs)) if xs.len() as i64 != n => {
                return Err(ExtractionFailure::new(
                    format!("{name} has {} entries but num_of_vehicles is {n}", xs.len()),
                    stmt,
                ));
            }
            Some(ArgValue::List(_) | ArgValue::Number(_)) => {}
            _ => return Err(ExtractionFailure::new(format!("{name} must be a number or a list"), stmt)),
        }
    }
    if !matches!(inv.get("power_capacity"), Some(ArgValue::Number(_) | ArgValue::List(_))) {
        return Err(ExtractionFailure::new("power_capacity must be a number or a list", stmt));
    }
    Ok(())
}

/// Finds the first code block that calls the solver and parses it.
/// Returns `Ok(None)` when the reply contains no such call.
pub fn extract_invocation(text: &str) -> std::result::Result<Option<ToolInvocation>, ExtractionFailure> {
    let mut blocks = fenced_blocks(text);
    if blocks.is_empty() {
        blocks.push(text.to_string());
    }
    let Some(stmts) = blocks
        .iter()
        .map(|b| statements(b))
        .find(|stmts| stmts.iter().any(|s| is_call(s)))
    else {
        return Ok(None);
    };
    let mut env = BTreeMap::new();
    for stmt in stmts {
        if stmt.starts_with("import ") || stmt.starts_with("from ") {
            continue;
        }
        if is_call(&stmt) {
            return parse_call(&stmt, &env).map(Some);
        }
        match stmt.split_once('=') {
            Some((lhs, rhs)) if is_ident(lhs.trim()) && !rhs.starts_with('=') => {
                let value = match parse_expr(rhs)? {
                    Expr::Value(v) => v,
                    Expr::Name(id) => env
                        .get(&id)
                        .cloned()
                        .ok_or_else(|| ExtractionFailure::new(format!("`{id}` is not defined"), stmt.as_str()))?,
                };
                env.insert(lhs.trim().to_string(), value);
            }
            _ => return Err(ExtractionFailure::new("unsupported statement", stmt.as_str())),
        }
    }
    unreachable!("a block is only chosen when it contains a call")
}

/// A bound problem plus notes about adjustments made while binding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundProblem {
    pub problem: EvProblem,
    pub warnings: Vec<String>,
}

fn per_vehicle(inv: &ToolInvocation, name: &str, n: usize) -> Result<Vec<f64>> {
    match inv.get(name) {
        Some(ArgValue::Number(x)) => Ok(vec![*x; n]),
        Some(ArgValue::List(xs)) if xs.len() == n => Ok(xs.clone()),
        Some(ArgValue::List(xs)) => Err(Error::Dimension { expected: n, got: xs.len() }),
        _ => Err(Error::InvalidInput(format!("{name} is missing or not numeric"))),
    }
}

/// Maps invocation arguments onto a problem: every vehicle is present from
/// step 0, charges at no less than zero with unit efficiency, and the
/// station limit is the same at every step unless a list is given.
pub fn bind_problem(inv: &ToolInvocation) -> Result<BoundProblem> {
    let count = |name: &str| -> Result<i64> {
        inv.get(name)
            .and_then(integral)
            .ok_or_else(|| Error::InvalidInput(format!("{name} must be an integer")))
    };
    let n = count("num_of_vehicles")?;
    if n < 1 {
        return Err(Error::InvalidInput("num_of_vehicles must be positive".into()));
    }
    let t = count("timesteps")?;
    if t < 1 {
        return Err(Error::InvalidInput("timesteps must be positive".into()));
    }
    let (n, t) = (n as usize, t as usize);
    let initial = per_vehicle(inv, "initial_states", n)?;
    let target = per_vehicle(inv, "terminal_states", n)?;
    let u_max = per_vehicle(inv, "max_power", n)?;
    let depart = per_vehicle(inv, "dept_time", n)?;
    if let Some(x) = u_max.iter().find(|x| **x < 0.0) {
        return Err(Error::InvalidInput(format!("max_power must be non-negative, got {x}")));
    }
    let capacity = match inv.get("power_capacity") {
        Some(ArgValue::Number(c)) => vec![*c; t],
        Some(ArgValue::List(cs)) if cs.len() == t => cs.clone(),
        Some(ArgValue::List(cs)) => return Err(Error::Dimension { expected: t, got: cs.len() }),
        _ => return Err(Error::InvalidInput("power_capacity must be numeric".into())),
    };
    if let Some(c) = capacity.iter().find(|c| **c < 0.0) {
        return Err(Error::InvalidInput(format!("power_capacity must be non-negative, got {c}")));
    }
    let mut warnings = Vec::new();
    let mut sessions = Vec::with_capacity(n);
    for j in 0..n {
        let d = depart[j];
        if d.fract() != 0.0 || d < 0.0 {
            return Err(Error::InvalidInput(format!(
                "dept_time for vehicle {} must be a non-negative integer, got {d}",
                j + 1
            )));
        }
        let mut d = d as usize;
        if d > t {
            warnings.push(format!(
                "dept_time {d} for vehicle {} is beyond the {t}-step horizon; clamped to {t}",
                j + 1
            ));
            d = t;
        }
        sessions.push(EvSession::new(initial[j], target[j], u_max[j], d));
    }
    let problem = EvProblem::new(sessions, t, capacity)?;
    Ok(BoundProblem { problem, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Gathering,
    Ready,
    Solved,
    Explained,
    Failed,
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SessionState::Gathering => "gathering",
            SessionState::Ready => "ready",
            SessionState::Solved => "solved",
            SessionState::Explained => "explained",
            SessionState::Failed => "failed",
        };
        f.write_str(s)
    }
}

/// An argument value and the user turn (1-based) it was bound on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatheredField {
    pub value: ArgValue,
    pub turn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ExtractionFailure,
    SolverError,
    Warning,
    Revision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub turn: usize,
    pub kind: EventKind,
    pub message: String,
}

/// Result of one user turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnOutcome {
    pub state: SessionState,
    /// Assistant messages produced during the turn, in order.
    pub replies: Vec<String>,
    pub schedule: Option<ChargingSchedule>,
    pub summary: Option<ScheduleSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistantSession {
    pub id: String,
    pub state: SessionState,
    pub transcript: Vec<ChatMessage>,
    pub gathered: BTreeMap<String, GatheredField>,
    pub user_turns: usize,
    pub invocation: Option<ToolInvocation>,
    pub problem: Option<EvProblem>,
    pub schedule: Option<ChargingSchedule>,
    pub summary: Option<ScheduleSummary>,
    pub events: Vec<SessionEvent>,
    #[serde(default)]
    consecutive_failures: usize,
}

/// Failures in a row after which the session is given up.
pub const MAX_EXTRACTION_FAILURES: usize = 2;

/// The message carrying solver output back to the model.
pub fn tool_result_text(summary: &ScheduleSummary, schedule: &ChargingSchedule) -> String {
    let rows: Vec<String> = schedule
        .power
        .iter()
        .map(|row| {
            let cells: Vec<String> = row.iter().map(|u| format!("{:.3}", u + 0.0)).collect();
            format!("[{}]", cells.join(", "))
        })
        .collect();
    format!("{TOOL_RESULT_MARKER}\n{summary}\nschedule = [{}]", rows.join(", "))
}

impl AssistantSession {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            state: SessionState::Gathering,
            transcript: vec![system_prompt()],
            gathered: BTreeMap::new(),
            user_turns: 0,
            invocation: None,
            problem: None,
            schedule: None,
            summary: None,
            events: Vec::new(),
            consecutive_failures: 0,
        }
    }

    /// True when every required argument has a bound value.
    pub fn all_bound(&self) -> bool {
        REQUIRED.iter().all(|n| self.gathered.contains_key(*n))
    }

    fn event(&mut self, kind: EventKind, message: impl Into<String>) {
        self.events.push(SessionEvent {
            turn: self.user_turns,
            kind,
            message: message.into(),
        });
    }

    fn ask(&mut self, model: &dyn ChatProvider) -> Result<String> {
        let reply = model.chat(&ChatRequest::new(self.transcript.clone()))?;
        let text = reply.content();
        self.transcript.push(ChatMessage::assistant(text.clone()));
        Ok(text)
    }

    fn bind(&mut self, inv: &ToolInvocation) {
        let turn = self.user_turns;
        for (name, value) in &inv.arguments {
            let unchanged = self.gathered.get(name).is_some_and(|g| &g.value == value);
            if !unchanged {
                self.gathered.insert(
                    name.clone(),
                    GatheredField {
                        value: value.clone(),
                        turn,
                    },
                );
            }
        }
    }

    /// Counts a failure; returns true if the session is now failed.
    fn fail(&mut self, kind: EventKind, message: String) -> bool {
        self.consecutive_failures += 1;
        tracing::warn!(session = %self.id, %message, "assistant turn failure");
        self.event(kind, message);
        if self.consecutive_failures >= MAX_EXTRACTION_FAILURES {
            self.state = SessionState::Failed;
            true
        } else {
            false
        }
    }

    /// Processes one user message. On a provider error the session is left
    /// exactly as it was before the call.
    pub fn handle_user_turn(&mut self, text: &str, model: &dyn ChatProvider) -> Result<TurnOutcome> {
        if self.state == SessionState::Failed {
            return Err(Error::IllegalState(format!("session {} has failed", self.id)));
        }
        let snapshot = self.clone();
        match self.turn(text, model) {
            Ok(outcome) => Ok(outcome),
            Err(e) => {
                *self = snapshot;
                Err(e)
            }
        }
    }

    fn turn(&mut self, text: &str, model: &dyn ChatProvider) -> Result<TurnOutcome> {
        if matches!(
            self.state,
            SessionState::Ready | SessionState::Solved | SessionState::Explained
        ) {
            self.state = SessionState::Gathering;
            self.event(EventKind::Revision, "new user turn after a solution; gathering again");
        }
        self.user_turns += 1;
        self.transcript.push(ChatMessage::user(text));
        let mut replies = Vec::new();
        loop {
            let reply = self.ask(model)?;
            replies.push(reply.clone());
            let inv = match extract_invocation(&reply) {
                Ok(None) => break,
                Ok(Some(inv)) => inv,
                Err(f) => {
                    if self.fail(EventKind::ExtractionFailure, f.to_string()) {
                        break;
                    }
                    self.transcript.push(ChatMessage::user(format!(
                        "The solve_EV call could not be read: {}. Please send the corrected code block.",
                        f.reason
                    )));
                    continue;
                }
            };
            self.bind(&inv);
            self.invocation = Some(inv.clone());
            self.state = SessionState::Ready;
            let solved = bind_problem(&inv).and_then(|bound| {
                let schedule = solve_ev(&bound.problem)?;
                Ok((bound, schedule))
            });
            match solved {
                Err(e) => {
                    self.state = SessionState::Gathering;
                    if self.fail(EventKind::SolverError, e.to_string()) {
                        break;
                    }
                    self.transcript.push(ChatMessage::user(format!(
                        "{TOOL_RESULT_MARKER}\nsolve_EV raised an error: {e}. Please ask the user to correct the parameters or send a corrected call."
                    )));
                    continue;
                }
                Ok((bound, schedule)) => {
                    self.consecutive_failures = 0;
                    for w in &bound.warnings {
                        self.event(EventKind::Warning, w.clone());
                    }
                    let summary = summarize_schedule(&bound.problem, &schedule);
                    self.transcript.push(ChatMessage::user(tool_result_text(&summary, &schedule)));
                    self.problem = Some(bound.problem);
                    self.schedule = Some(schedule);
                    self.summary = Some(summary);
                    self.state = SessionState::Solved;
                    replies.push(self.ask(model)?);
                    self.state = SessionState::Explained;
                    break;
                }
            }
        }
        let fresh = matches!(self.state, SessionState::Explained);
        Ok(TurnOutcome {
            state: self.state,
            replies,
            schedule: if fresh { self.schedule.clone() } else { None },
            summary: if fresh { self.summary.clone() } else { None },
        })
    }

    /// The latest assistant message, if any.
    pub fn last_reply(&self) -> Option<String> {
        self.transcript
            .iter()
            .rev()
            .find(|m| m.role == Role::Assistant)
            .map(ChatMessage::text)
    }

    /// Saves as JSONL: a header with the session state, then one message
    /// per line.
    pub fn save(&self, path: &Path) -> std::result::Result<(), StoreError> {
        let mut value = serde_json::to_value(self).map_err(|e| StoreError::Serialize(e.to_string()))?;
        let obj = value.as_object_mut().expect("session serializes to an object");
        obj.remove("transcript");
        let meta: Map<String, Value> = std::mem::take(obj);
        store::save_records(path, SESSION_FORMAT, SESSION_VERSION, meta, &self.transcript)
    }

    pub fn load(path: &Path) -> std::result::Result<Self, StoreError> {
        let (header, transcript) = store::load_records::<ChatMessage>(path, SESSION_FORMAT, SESSION_VERSION)?;
        let mut meta = header.meta;
        meta.insert(
            "transcript".into(),
            serde_json::to_value(&transcript).map_err(|e| StoreError::Serialize(e.to_string()))?,
        );
        serde_json::from_value(Value::Object(meta)).map_err(|e| StoreError::Integrity {
            offset: 0,
            reason: format!("session header: {e}"),
        })
    }
}

/// Feeds user turns until the session is explained, fails, or the turns
/// run out.
pub fn run_session<I, S>(id: &str, model: &dyn ChatProvider, turns: I) -> Result<AssistantSession>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut session = AssistantSession::new(id);
    for turn in turns {
        session.handle_user_turn(turn.as_ref(), model)?;
        if matches!(session.state, SessionState::Explained | SessionState::Failed) {
            break;
        }
    }
    Ok(session)
}

/// Fixed texts of the reference conversation.
pub mod dialogue {
    pub const USER_OPENING: &str = "Can you help me to schedule the charging of electric vehicles?";

    pub const ASSISTANT_QUESTIONS: &str = "Of course, I'd be happy to help. To provide the best result, I need some specific details from you. Could you please tell me the following:
1. How many vehicles do you have that you need to charge?
2. Over how many timesteps are you planning to charge your vehicles? A timestep could be an hour, for example.
3. What are the initial states (charge levels) of your vehicles? Please list for each vehicle if more than one.
4. What's the maximum power each of your vehicles can consume?
5. What are the final desired states (charge levels) for each of your vehicles?
6. Until what timestep does each of your vehicles not need to start charging? Please list for each vehicle if more than one.
7. What's the total power capacity you want to use for charging all your vehicles?
8. Finally, would you like a plot figure of the charging status?";

    pub const USER_ANSWERS: &str = "1. five,
2. 20 hours,
3. They all start from zero,
4. 10,
5. 100,
6. [10, 12, 16, 18, 20],
7. 30.";

    pub const ASSISTANT_INVOCATION: &str = "Thank you for the information. Based on your input, we can utilize our EV charging solver as follows:
```python
num_of_vehicles = 5
timesteps = 20
# starting from zero for all vehicles
initial_states = [0, 0, 0, 0, 0]
max_power = 10.0
# desired state is 100 for all vehicles
terminal_states = [100, 100, 100, 100, 100]
# staggered start times for charging
dept_time = [10, 12, 16, 18, 20]
power_capacity = 30
Solve_EV(num_of_vehicles, timesteps, initial_states, max_power, terminal_states, dept_time, power_capacity)
```";

    /// User turns of the reference conversation.
    pub fn user_turns() -> [&'static str; 2] {
        [USER_OPENING, USER_ANSWERS]
    }
}
