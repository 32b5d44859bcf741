//! Provider-independent chat interface.
//!
//! Requests and responses are plain values; [`ChatProvider`] implementations
//! decide where they go. Offline work uses [`ScriptedProvider`],
//! [`FnProvider`] or [`ReplayProvider`]; [`LiveProvider`] speaks the
//! chat-completions JSON convention over HTTP and [`RecordingProvider`]
//! captures any provider's traffic into a replayable transcript.

mod live;
#[cfg(test)]
pub(crate) use live::test_server as live_test_server;
mod message;
pub mod mock;
mod transcript;

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use thiserror::Error;

pub use live::{LiveConfig, LiveProvider, DEFAULT_API_BASE, DEFAULT_MODEL};
pub use message::{
    digest, request_from_wire, request_to_wire, response_from_wire, response_to_wire,
    ChatMessage, ChatRequest, ChatResponse, ContentPart, ImageRef, ImageSource, Role, Usage,
};
pub use mock::MockProvider;
pub use transcript::{RecordingProvider, ReplayProvider, Transcript, TranscriptEntry};

pub const ENV_API_BASE: &str = "LLM_API_BASE";
pub const ENV_API_KEY: &str = "LLM_API_KEY";
pub const ENV_MODEL: &str = "LLM_MODEL";

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("no recorded response for request digest {digest}")]
    ReplayMiss { digest: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("transcript storage error: {0}")]
    Storage(String),
    #[error("provider not configured: {0}")]
    Config(String),
}

impl GatewayError {
    /// Transport-level failure of the provider itself.
    pub fn is_transport(&self) -> bool {
        matches!(self, GatewayError::Transport(_))
    }
}

pub trait ChatProvider: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;

    fn name(&self) -> &str {
        "provider"
    }
}

impl<P: ChatProvider + ?Sized> ChatProvider for Arc<P> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).chat(request)
    }
    fn name(&self) -> &str {
        (**self).name()
    }
}

impl<P: ChatProvider + ?Sized> ChatProvider for Box<P> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).chat(request)
    }
    fn name(&self) -> &str {
        (**self).name()
    }
}

impl<P: ChatProvider + ?Sized> ChatProvider for &P {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).chat(request)
    }
    fn name(&self) -> &str {
        (**self).name()
    }
}

/// Convenience: send `request` and return the assistant text.
pub fn chat(provider: &dyn ChatProvider, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
    if request.messages.is_empty() {
        return Err(GatewayError::Protocol("request has no messages".into()));
    }
    provider.chat(request)
}

#[derive(Debug, Clone)]
pub enum Matcher {
    Any,
    /// Matches when any text part of any message contains the needle.
    Contains(String),
    /// Matches when the last user message's text contains the needle.
    LastUserContains(String),
}

impl Matcher {
    fn matches(&self, request: &ChatRequest) -> bool {
        match self {
            Matcher::Any => true,
            Matcher::Contains(needle) => request.messages.iter().any(|m| m.text().contains(needle)),
            Matcher::LastUserContains(needle) => request
                .messages
                .iter()
                .rev()
                .find(|m| m.role == Role::User)
                .is_some_and(|m| m.text().contains(needle)),
        }
    }
}

#[derive(Debug)]
struct Rule {
    matcher: Matcher,
    replies: VecDeque<String>,
    /// Keep answering with the last reply once the queue is down to one.
    sticky: bool,
}

/// Rule-table provider. Rules are tried in order; a rule's replies are
/// consumed one per matching call.
#[derive(Debug, Default)]
pub struct ScriptedProvider {
    rules: Mutex<Vec<Rule>>,
    calls: Mutex<Vec<ChatRequest>>,
}

impl ScriptedProvider {
    pub fn new() -> Self {
        Self::default()
    }

    /// Answers every request with `reply`.
    pub fn always(reply: impl Into<String>) -> Self {
        Self::new().rule_sticky(Matcher::Any, reply)
    }

    /// Answers successive requests with `replies`, then fails.
    pub fn sequence<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new().rule_sequence(Matcher::Any, replies)
    }

    pub fn rule_sticky(self, matcher: Matcher, reply: impl Into<String>) -> Self {
        self.rules.lock().unwrap().push(Rule {
            matcher,
            replies: VecDeque::from([reply.into()]),
            sticky: true,
        });
        self
    }

    pub fn rule_sequence<I, S>(self, matcher: Matcher, replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.rules.lock().unwrap().push(Rule {
            matcher,
            replies: replies.into_iter().map(Into::into).collect(),
            sticky: false,
        });
        self
    }

    /// Every request seen so far.
    pub fn calls(&self) -> Vec<ChatRequest> {
        self.calls.lock().unwrap().clone()
    }
}

impl ChatProvider for ScriptedProvider {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.calls.lock().unwrap().push(request.clone());
        let mut rules = self.rules.lock().unwrap();
        for rule in rules.iter_mut() {
            if !rule.matcher.matches(request) || rule.replies.is_empty() {
                continue;
            }
            let text = if rule.sticky && rule.replies.len() == 1 {
                rule.replies[0].clone()
            } else {
                rule.replies.pop_front().unwrap()
            };
            return Ok(ChatResponse::from_text(text));
        }
        Err(GatewayError::Transport("scripted provider has no reply for this request".into()))
    }

    fn name(&self) -> &str {
        "scripted"
    }
}

type ReplyFn = dyn Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync;

/// Provider backed by a closure, for scripts that react to the prompt.
pub struct FnProvider {
    reply: Box<ReplyFn>,
}

impl FnProvider {
    pub fn new<F>(reply: F) -> Self
    where
        F: Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync + 'static,
    {
        Self { reply: Box::new(reply) }
    }
}

impl ChatProvider for FnProvider {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (self.reply)(request).map(ChatResponse::from_text)
    }

    fn name(&self) -> &str {
        "function"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_echo() {
        let p = ScriptedProvider::always("p1 = 5");
        let req = ChatRequest::new(vec![ChatMessage::user("anything")]);
        assert_eq!(p.chat(&req).unwrap().content(), "p1 = 5");
        assert_eq!(p.chat(&req).unwrap().content(), "p1 = 5");
        assert_eq!(p.calls().len(), 2);
    }

    #[test]
    fn sequence_then_exhausted() {
        let p = ScriptedProvider::sequence(["a", "b"]);
        let req = ChatRequest::new(vec![ChatMessage::user("x")]);
        assert_eq!(p.chat(&req).unwrap().content(), "a");
        assert_eq!(p.chat(&req).unwrap().content(), "b");
        assert!(p.chat(&req).unwrap_err().is_transport());
    }

    #[test]
    fn rules_in_order() {
        let p = ScriptedProvider::new()
            .rule_sticky(Matcher::LastUserContains("wildfire".into()), "yes")
            .rule_sticky(Matcher::Any, "fallback");
        let fire = ChatRequest::new(vec![ChatMessage::user("any wildfire?")]);
        let other = ChatRequest::new(vec![ChatMessage::user("hello")]);
        assert_eq!(p.chat(&fire).unwrap().content(), "yes");
        assert_eq!(p.chat(&other).unwrap().content(), "fallback");
    }

    #[test]
    fn empty_request_rejected() {
        let p = ScriptedProvider::always("x");
        assert!(matches!(
            chat(&p, &ChatRequest::new(vec![])),
            Err(GatewayError::Protocol(_))
        ));
    }
}
