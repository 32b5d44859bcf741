//! Deterministic offline stand-in for a chat model.
//!
//! The mock recognizes the request shapes produced by the workflows in this
//! crate and answers each in kind: solution lines for optimizer prompts, the
//! question list and solver calls for the charging assistant, excerpt-based
//! answers and summaries for document prompts, and yes/no verdicts for
//! image prompts. Identical requests always get identical replies.

use std::collections::BTreeMap;

use super::{digest, ChatMessage, ChatProvider, ChatRequest, ChatResponse, GatewayError, Role};
use crate::assistant::{dialogue, system_prompt_text, SIGNATURE, TOOL_RESULT_MARKER};
use crate::dispatch::solve_dispatch_for_demand;
use crate::doc;
use crate::opro::{format_solution_line, parse_solution};
use crate::problem::DispatchProblem;

const OPRO_OPENING: &str = "You need assistance in solving an optimization problem.";
const EXTRACTION_FEEDBACK: &str = "The solve_EV call could not be read";

#[derive(Debug, Clone, Default)]
pub struct MockProvider {
    dispatch: Option<DispatchProblem>,
}

impl MockProvider {
    pub fn new() -> Self {
        Self::default()
    }

    /// Optimizer replies move halfway from the best listed pair toward the
    /// exact optimum of `problem` at the demand stated in the prompt.
    pub fn with_dispatch(problem: DispatchProblem) -> Self {
        Self { dispatch: Some(problem) }
    }

    fn reply(&self, request: &ChatRequest) -> String {
        let messages = &request.messages;
        let system = messages
            .first()
            .filter(|m| m.role == Role::System)
            .map(ChatMessage::text)
            .unwrap_or_default();
        let last = messages.last().map(ChatMessage::text).unwrap_or_default();
        if system.starts_with(OPRO_OPENING) {
            return self.opro_reply(&system);
        }
        if system == system_prompt_text() {
            return assistant_reply(messages);
        }
        if let Some(last_msg) = messages.last() {
            if last_msg.images().next().is_some() {
                return image_reply(last_msg);
            }
        }
        doc_reply(&last).unwrap_or_else(|| {
            "I can help with dispatch optimization, EV charging schedules, document questions and image assessment."
                .to_string()
        })
    }

    fn opro_reply(&self, prompt: &str) -> String {
        let Some(spec) = OproPrompt::parse(prompt) else {
            return "I could not read the optimization problem.".into();
        };
        let d = spec.p_min.len();
        let Some(best) = spec.best.clone() else {
            let mid: Vec<f64> = spec.p_min.iter().zip(&spec.p_max).map(|(a, b)| ceil4((a + b) / 2.0)).collect();
            return format_solution_line(&mid);
        };
        let target = self
            .dispatch
            .as_ref()
            .filter(|p| p.dimension() == d && p.p_min() == spec.p_min && p.p_max() == spec.p_max)
            .and_then(|p| solve_dispatch_for_demand(p, spec.demand).ok())
            .map(|r| r.solution.power);
        let next: Vec<f64> = match target {
            Some(opt) => best
                .iter()
                .zip(&opt)
                .zip(&spec.p_max)
                .map(|((x, o), hi)| ceil4(x + 0.5 * (o - x)).min(*hi))
                .collect(),
            None => {
                // Shift output between two units chosen from the prompt hash.
                let h = u64::from_str_radix(&digest(&[ChatMessage::user(prompt)])[..12], 16).unwrap_or(0);
                let mut x = best;
                if d >= 2 {
                    let i = (h % d as u64) as usize;
                    let j = (i + 1 + (h / d as u64 % (d as u64 - 1)) as usize) % d;
                    let room = (x[i] - spec.p_min[i]).min(spec.p_max[j] - x[j]);
                    let delta = (room * 0.5 * 1e4).floor() / 1e4;
                    x[i] -= delta;
                    x[j] += delta;
                } else {
                    x[0] = ceil4((x[0] + spec.demand.max(spec.p_min[0])) / 2.0);
                }
                x
            }
        };
        format_solution_line(&next)
    }
}

impl ChatProvider for MockProvider {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        for m in &request.messages {
            m.validate()?;
        }
        Ok(ChatResponse::from_text(self.reply(request)))
    }

    fn name(&self) -> &str {
        "mock"
    }
}

fn ceil4(x: f64) -> f64 {
    let y = (x * 1e4).ceil() / 1e4;
    if y - x > 1e-4 {
        x
    } else {
        y
    }
}

struct OproPrompt {
    p_min: Vec<f64>,
    p_max: Vec<f64>,
    demand: f64,
    best: Option<Vec<f64>>,
}

fn bracketed(text: &str, key: &str) -> Option<Vec<f64>> {
    let start = text.find(key)? + key.len();
    let rest = &text[start..];
    let end = rest.find(']')?;
    rest[..end].split(',').map(|v| v.trim().parse().ok()).collect()
}

impl OproPrompt {
    fn parse(prompt: &str) -> Option<Self> {
        let p_min = bracketed(prompt, "p_min=[")?;
        let p_max = bracketed(prompt, "p_max=[")?;
        let key = "greater than or equal to ";
        let at = prompt.find(key)? + key.len();
        let demand = prompt[at..]
            .split_whitespace()
            .next()?
            .trim_end_matches('.')
            .parse()
            .ok()?;
        let d = p_min.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut pending: Option<Vec<f64>> = None;
        for line in prompt.lines() {
            if let Some(rest) = line.strip_prefix("Solution ") {
                pending = rest.split_once(": ").and_then(|(_, s)| parse_solution(s, d).ok());
            } else if let Some(rest) = line.strip_prefix("Objective value ") {
                let cost: Option<f64> = rest.split_once(": ").and_then(|(_, c)| c.trim().parse().ok());
                if let (Some(cost), Some(x)) = (cost, pending.take()) {
                    if best.as_ref().is_none_or(|(c, _)| cost <= *c) {
                        best = Some((cost, x));
                    }
                }
            }
        }
        Some(Self {
            p_min,
            p_max,
            demand,
            best: best.map(|(_, x)| x),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Arg {
    Num(f64),
    List(Vec<f64>),
    Flag(bool),
}

fn number_word(w: &str) -> Option<f64> {
    const WORDS: [&str; 21] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
        "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen", "twenty",
    ];
    if let Some(i) = WORDS.iter().position(|x| *x == w) {
        return Some(i as f64);
    }
    Some(match w {
        "thirty" => 30.0,
        "forty" => 40.0,
        "fifty" => 50.0,
        "hundred" => 100.0,
        "none" | "nothing" | "empty" => 0.0,
        _ => return None,
    })
}

fn parse_value(field: &str, text: &str) -> Option<Arg> {
    let lower = text.to_lowercase();
    if field == "plot_fig" {
        let words: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).collect();
        if words.iter().any(|w| matches!(*w, "yes" | "true" | "sure" | "please")) {
            return Some(Arg::Flag(true));
        }
        if words.iter().any(|w| matches!(*w, "no" | "false" | "not")) {
            return Some(Arg::Flag(false));
        }
        return None;
    }
    if let (Some(a), Some(b)) = (lower.find('['), lower.find(']')) {
        if a < b {
            let items: Option<Vec<f64>> = lower[a + 1..b]
                .split(',')
                .map(|v| v.trim())
                .filter(|v| !v.is_empty())
                .map(|v| v.parse().ok().or_else(|| number_word(v)))
                .collect();
            return items.map(Arg::List);
        }
    }
    lower
        .split(|c: char| !(c.is_ascii_alphanumeric() || c == '.' || c == '-'))
        .map(|w| w.trim_matches('.'))
        .filter(|w| !w.is_empty())
        .find_map(|w| w.parse::<f64>().ok().filter(|x| x.is_finite()).or_else(|| number_word(w)))
        .map(Arg::Num)
}

/// Keyword cues for a free-form sentence, checked in order.
const CUES: [(&str, &[&str]); 8] = [
    ("power_capacity", &["capacity"]),
    ("max_power", &["max_power", "maximum power", "max power", "charging rate"]),
    ("initial_states", &["initial", "start from", "starting"]),
    ("terminal_states", &["terminal", "final", "desired", "target"]),
    ("dept_time", &["dept", "departure", "deadline"]),
    ("timesteps", &["timestep", "time step", "hours", "horizon"]),
    ("plot_fig", &["plot", "figure"]),
    ("num_of_vehicles", &["num_of_vehicles", "vehicles", "cars"]),
];

fn gather(user_texts: &[String]) -> BTreeMap<&'static str, Arg> {
    let mut out = BTreeMap::new();
    for text in user_texts {
        for line in text.lines() {
            let trimmed = line.trim();
            let numbered = trimmed
                .split_once('.')
                .and_then(|(n, rest)| n.parse::<usize>().ok().map(|n| (n, rest)))
                .filter(|(n, _)| (1..=SIGNATURE.len()).contains(n));
            if let Some((n, rest)) = numbered {
                if let Some(v) = parse_value(SIGNATURE[n - 1], rest) {
                    out.insert(SIGNATURE[n - 1], v);
                }
                continue;
            }
            for sentence in trimmed.split_inclusive(['.', '?', '!', ';']) {
                let lower = sentence.to_lowercase();
                let field = SIGNATURE
                    .iter()
                    .find(|name| lower.contains(&format!("{name} =")) || lower.contains(&format!("{name}=")))
                    .copied()
                    .or_else(|| {
                        CUES.iter()
                            .find(|(_, cues)| cues.iter().any(|c| lower.contains(c)))
                            .map(|(f, _)| *f)
                    });
                let Some(field) = field else { continue };
                let value_text = lower.split_once('=').map_or(lower.as_str(), |(_, v)| v);
                if let Some(v) = parse_value(field, value_text) {
                    out.insert(field, v);
                }
            }
        }
    }
    out
}

fn fmt_num(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

fn invocation(args: &BTreeMap<&'static str, Arg>) -> Option<String> {
    let n = match args.get("num_of_vehicles")? {
        Arg::Num(n) if *n >= 1.0 && n.fract() == 0.0 => *n as usize,
        _ => return None,
    };
    let mut lines = Vec::new();
    for name in &SIGNATURE[..7] {
        let value = match (args.get(name)?, *name) {
            (Arg::Num(x), "max_power") => format!("{x:.1}"),
            (Arg::Num(x), "initial_states" | "terminal_states" | "dept_time") => {
                format!("[{}]", vec![fmt_num(*x); n].join(", "))
            }
            (Arg::Num(x), _) => fmt_num(*x),
            (Arg::List(v), _) => format!("[{}]", v.iter().map(|x| fmt_num(*x)).collect::<Vec<_>>().join(", ")),
            (Arg::Flag(b), _) => if *b { "True" } else { "False" }.to_string(),
        };
        lines.push(format!("{name} = {value}"));
    }
    let mut call_args: Vec<&str> = SIGNATURE[..7].to_vec();
    if let Some(Arg::Flag(b)) = args.get("plot_fig") {
        lines.push(format!("plot_fig = {}", if *b { "True" } else { "False" }));
        call_args.push("plot_fig");
    }
    Some(format!(
        "Thank you for the information. Based on your input, we can utilize our EV charging solver as follows:\n```python\n{}\nSolve_EV({})\n```",
        lines.join("\n"),
        call_args.join(", ")
    ))
}

fn assistant_reply(messages: &[ChatMessage]) -> String {
    let last = messages.last().map(ChatMessage::text).unwrap_or_default();
    if let Some(result) = last.strip_prefix(TOOL_RESULT_MARKER) {
        let result = result.trim_start();
        if let Some(err) = result.strip_prefix("solve_EV raised an error: ") {
            let err = err.split(". Please").next().unwrap_or(err);
            return format!(
                "The solver could not use these parameters ({err}). Could you please check the values and tell me the corrected ones?"
            );
        }
        let summary = result.split("\nschedule = ").next().unwrap_or(result).trim();
        return format!(
            "The charging schedule has been computed. Here is a summary of the result:\n{summary}\nThe schedule lists the charging power of each vehicle at every timestep."
        );
    }
    let user_texts: Vec<String> = messages
        .iter()
        .filter(|m| m.role == Role::User)
        .map(ChatMessage::text)
        .filter(|t| !t.starts_with(TOOL_RESULT_MARKER) && !t.starts_with(EXTRACTION_FEEDBACK))
        .collect();
    let args = gather(&user_texts);
    if let Some(code) = invocation(&args) {
        return code;
    }
    let questions: Vec<&str> = dialogue::ASSISTANT_QUESTIONS.lines().skip(1).collect();
    if args.is_empty() {
        return dialogue::ASSISTANT_QUESTIONS.to_string();
    }
    let missing: Vec<&str> = SIGNATURE[..7]
        .iter()
        .enumerate()
        .filter(|(_, n)| !args.contains_key(*n))
        .map(|(i, _)| questions[i])
        .collect();
    let missing = if missing.is_empty() {
        vec!["1. How many vehicles do you have that you need to charge? Please give a whole number."]
    } else {
        missing
    };
    format!("Thank you. I still need a few details:\n{}", missing.join("\n"))
}

fn image_reply(message: &ChatMessage) -> String {
    let query = message.images().last().cloned();
    let tag = query
        .map(|img| digest(&[ChatMessage::new(Role::User, vec![super::ContentPart::Image { image: img }])]))
        .unwrap_or_default();
    let even = tag.chars().next().and_then(|c| c.to_digit(16)).is_some_and(|v| v % 2 == 0);
    if even {
        "Yes. The last picture shows patches whose color differs from the surrounding vegetation. Considering this observation, it is likely that the last picture depicts an area where wildfires have occurred.".into()
    } else {
        "No. The land cover in the last picture has uniform colors without burn scars, so there is no wildfire in it."
            .into()
    }
}

fn sentences(text: &str, count: usize, max_chars: usize) -> String {
    let flat = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut out = String::new();
    for s in flat.split_inclusive(". ").take(count) {
        out.push_str(s);
    }
    let out = out.trim().to_string();
    if out.chars().count() > max_chars {
        out.chars().take(max_chars).collect::<String>() + "..."
    } else {
        out
    }
}

fn doc_reply(text: &str) -> Option<String> {
    if let Some(at) = text.find(doc::EXCERPTS_HEADER) {
        let body = &text[at + doc::EXCERPTS_HEADER.len()..];
        let first = body.split_once(")\n").map(|(_, rest)| rest)?;
        let excerpt = first.split("\n\n").next().unwrap_or(first);
        return Some(format!("According to excerpt [1]: {excerpt}"));
    }
    if text.contains(&format!("\n{}", doc::QUESTION_LABEL)) {
        return Some("I don't know.".into());
    }
    if let Some(at) = text.find(doc::MAP_LABEL) {
        let body = text[at..].split_once("):\n").map(|(_, b)| b)?;
        return Some(sentences(body, 2, 300));
    }
    if let Some(at) = text.find(doc::REDUCE_HEADER) {
        let parts: Vec<&str> = text[at + doc::REDUCE_HEADER.len()..]
            .lines()
            .filter_map(|l| l.split_once("] ").map(|(_, p)| p.trim()))
            .collect();
        return Some(parts.join(" "));
    }
    if let Some(at) = text.find(doc::SINGLE_HEADER) {
        return Some(sentences(&text[at + doc::SINGLE_HEADER.len()..], 3, 600));
    }
    None
}
