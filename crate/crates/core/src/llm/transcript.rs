use std::collections::{HashMap, VecDeque};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatMessage, ChatProvider, ChatRequest, ChatResponse, GatewayError};

/// One recorded exchange. The digest covers the full message list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub digest: String,
    pub request: ChatRequest,
    pub response: ChatResponse,
}

impl TranscriptEntry {
    pub fn new(request: ChatRequest, response: ChatResponse) -> Self {
        Self {
            digest: request.digest(),
            request,
            response,
        }
    }
}

/// Ordered request/response pairs, stored as JSONL (one pair per line).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| GatewayError::Storage(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_jsonl(&text)
    }

    pub fn from_jsonl(text: &str) -> Result<Self, GatewayError> {
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, line)| {
                serde_json::from_str(line)
                    .map_err(|e| GatewayError::Storage(format!("transcript line {}: {e}", i + 1)))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
            .collect()
    }
}

/// Wraps a provider and appends every exchange to a JSONL transcript file.
pub struct RecordingProvider<P> {
    inner: P,
    path: PathBuf,
    lock: Mutex<()>,
}

impl<P: ChatProvider> RecordingProvider<P> {
    pub fn new(inner: P, path: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            path: path.into(),
            lock: Mutex::new(()),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Sends the request and appends the pair to the transcript.
    pub fn record(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let response = self.inner.chat(request)?;
        let mut line = serde_json::to_string(&TranscriptEntry::new(request.clone(), response.clone()))
            .map_err(|e| GatewayError::Storage(e.to_string()))?;
        line.push('\n');
        let _guard = self.lock.lock().unwrap();
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| GatewayError::Storage(format!("{}: {e}", self.path.display())))?;
        // Single write of the whole line so concurrent appenders never interleave.
        file.write_all(line.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|e| GatewayError::Storage(format!("{}: {e}", self.path.display())))?;
        Ok(response)
    }
}

impl<P: ChatProvider> ChatProvider for RecordingProvider<P> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.record(request)
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}

/// Serves recorded responses keyed by message digest. Repeated identical
/// requests are answered in recording order.
#[derive(Debug, Default)]
pub struct ReplayProvider {
    queues: Mutex<HashMap<String, VecDeque<ChatResponse>>>,
}

impl ReplayProvider {
    pub fn new(transcript: &Transcript) -> Self {
        let provider = Self::default();
        for e in &transcript.entries {
            provider.push(e.digest.clone(), e.response.clone());
        }
        provider
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        Ok(Self::new(&Transcript::load(path)?))
    }

    /// Builds a replay table from (messages, reply text) pairs.
    pub fn from_pairs<I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (Vec<ChatMessage>, String)>,
    {
        let provider = Self::default();
        for (messages, text) in pairs {
            provider.push(super::digest(&messages), ChatResponse::from_text(text));
        }
        provider
    }

    pub fn push(&self, digest: String, response: ChatResponse) {
        self.queues
            .lock()
            .unwrap()
            .entry(digest)
            .or_default()
            .push_back(response);
    }

    pub fn remaining(&self) -> usize {
        self.queues.lock().unwrap().values().map(VecDeque::len).sum()
    }
}

impl ChatProvider for ReplayProvider {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let digest = request.digest();
        let mut queues = self.queues.lock().unwrap();
        queues
            .get_mut(&digest)
            .and_then(VecDeque::pop_front)
            .ok_or(GatewayError::ReplayMiss { digest })
    }

    fn name(&self) -> &str {
        "replay"
    }
}
