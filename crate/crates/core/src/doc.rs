//! Retrieval-augmented question answering and summarization over long
//! technical documents.
//!
//! A document is cut into overlapping character windows, each window is
//! embedded to a unit vector, and questions retrieve the best windows by
//! exact cosine similarity. Retrieved windows keep their character spans so
//! every answer can be audited against the source text.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::llm::{ChatMessage, ChatProvider, ChatRequest, GatewayError, LiveConfig};
use crate::store::{self, StoreError};

pub const INDEX_FORMAT: &str = "doc-index";
pub const INDEX_VERSION: u32 = 1;

pub const DEFAULT_CHUNK_SIZE: usize = 1000;
pub const DEFAULT_OVERLAP: usize = 200;
pub const DEFAULT_K: usize = 4;

pub(crate) const EXCERPTS_HEADER: &str = "Document excerpts:\n";
pub(crate) const QUESTION_LABEL: &str = "Question: ";
pub(crate) const MAP_LABEL: &str = "Excerpt (characters ";
pub(crate) const REDUCE_HEADER: &str = "Partial summaries:\n";
pub(crate) const SINGLE_HEADER: &str = "Document:\n";

pub const GENERAL_QUESTIONS: [&str; 3] = [
    "Please summarize this file.",
    "What is the structure of this file?",
    "Please give me several key words strongly related to the content in this file.",
];

pub const TECHNICAL_QUESTIONS: [&str; 5] = [
    "What is the Synchronization in this file?",
    "What is the phase-lock loop Synchronization in this file?",
    "Please summarize the main content of Synchronization part in this file.",
    "Please give an example in real-world application of the synchronization mentioned in this file.",
    "Please tell me, in Reliability Standards in this file, which standard is the most useful one?",
];

/// A window of the source text. `start..end` are character offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub text: String,
}

/// Fixed-stride windows of `size` characters advancing by `size - overlap`.
/// Every start position before the end of the text opens a window, so the
/// last one or two windows may be short.
pub fn chunk(text: &str, size: usize, overlap: usize) -> Result<Vec<Chunk>> {
    if size == 0 {
        return Err(Error::InvalidInput("chunk size must be positive".into()));
    }
    if overlap >= size {
        return Err(Error::InvalidInput(format!(
            "overlap {overlap} must be smaller than chunk size {size}"
        )));
    }
    let chars: Vec<char> = text.chars().collect();
    let stride = size - overlap;
    Ok((0..chars.len())
        .step_by(stride)
        .enumerate()
        .map(|(index, start)| {
            let end = (start + size).min(chars.len());
            Chunk {
                index,
                start,
                end,
                text: chars[start..end].iter().collect(),
            }
        })
        .collect())
}

/// Turns texts into unit vectors of a fixed dimension.
pub trait Embedder: Send + Sync {
    /// Identifies the embedding space; vectors from different ids are not
    /// comparable.
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[String]) -> std::result::Result<Vec<Vec<f64>>, GatewayError>;
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 && norm.is_finite() {
        v.iter_mut().for_each(|x| *x /= norm);
        true
    } else {
        false
    }
}

/// Offline embedder: signed feature hashing of character n-grams.
///
/// Text is lowercased, whitespace runs collapse to one space and the result
/// is padded with boundary markers before n-grams are taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashingEmbedder {
    pub dim: usize,
    pub ngram: usize,
    pub seed: u64,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self {
            dim: 1024,
            ngram: 3,
            seed: 0,
        }
    }
}

impl HashingEmbedder {
    pub fn new(dim: usize, ngram: usize, seed: u64) -> Result<Self> {
        if dim == 0 || ngram == 0 {
            return Err(Error::InvalidInput("embedder dim and n-gram length must be positive".into()));
        }
        Ok(Self { dim, ngram, seed })
    }

    /// Rebuilds the embedder named by an index's embedder id.
    pub fn from_id(id: &str) -> Option<Self> {
        let params = id.strip_prefix("hashing-ngram:")?;
        let (mut ngram, mut dim, mut seed) = (None, None, None);
        for kv in params.split(',') {
            match kv.split_once('=')? {
                ("n", v) => ngram = v.parse().ok(),
                ("dim", v) => dim = v.parse().ok(),
                ("seed", v) => seed = v.parse().ok(),
                _ => return None,
            }
        }
        Self::new(dim?, ngram?, seed?).ok()
    }

    fn hash(&self, gram: &[char]) -> u64 {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::with_key(0xcbf2_9ce4_8422_2325 ^ self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        for c in gram {
            h.write_u32(*c as u32);
        }
        h.finish()
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut padded = vec!['\u{2}'];
        let mut space = false;
        for c in text.chars().flat_map(char::to_lowercase) {
            if c.is_whitespace() {
                space = true;
                continue;
            }
            if space && padded.len() > 1 {
                padded.push(' ');
            }
            space = false;
            padded.push(c);
        }
        padded.push('\u{3}');
        let n = self.ngram.min(padded.len());
        let mut v = vec![0.0; self.dim];
        let mut first = None;
        for gram in padded.windows(n) {
            let h = self.hash(gram);
            first.get_or_insert(h);
            let slot = (h % self.dim as u64) as usize;
            v[slot] += if h >> 63 == 1 { -1.0 } else { 1.0 };
        }
        if !normalize(&mut v) {
            // Every count cancelled; fall back to the first gram's axis.
            v[(first.unwrap_or(0) % self.dim as u64) as usize] = 1.0;
        }
        v
    }
}

impl Embedder for HashingEmbedder {
    fn id(&self) -> String {
        format!("hashing-ngram:n={},dim={},seed={}", self.ngram, self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> std::result::Result<Vec<Vec<f64>>, GatewayError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

pub const ENV_EMBED_MODEL: &str = "LLM_EMBED_MODEL";
pub const DEFAULT_EMBED_MODEL: &str = "text-embedding-3-small";

/// Embeddings endpoint client (`{base}/embeddings`).
pub struct LiveEmbedder {
    config: LiveConfig,
    model: String,
    dim: usize,
    agent: ureq::Agent,
}

impl LiveEmbedder {
    /// `dim` must match what the endpoint returns; it is checked per call.
    pub fn new(config: LiveConfig, model: impl Into<String>, dim: usize) -> Self {
        let agent = config.agent();
        Self {
            config,
            model: model.into(),
            dim,
            agent,
        }
    }

    pub fn from_env(dim: usize) -> std::result::Result<Self, GatewayError> {
        let model = std::env::var(ENV_EMBED_MODEL).unwrap_or_else(|_| DEFAULT_EMBED_MODEL.to_string());
        Ok(Self::new(LiveConfig::from_env()?, model, dim))
    }
}

impl Embedder for LiveEmbedder {
    fn id(&self) -> String {
        format!("live:{}:dim={}", self.model, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> std::result::Result<Vec<Vec<f64>>, GatewayError> {
        let body = json!({"model": self.model, "input": texts});
        let payload = self.config.post_json(&self.agent, "embeddings", &body)?;
        let data = payload
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::Protocol("embeddings response lacks `data`".into()))?;
        if data.len() != texts.len() {
            return Err(GatewayError::Protocol(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                data.len()
            )));
        }
        let mut out = vec![Vec::new(); texts.len()];
        for (pos, item) in data.iter().enumerate() {
            let i = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
            let mut v: Vec<f64> = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| GatewayError::Protocol("embedding item lacks `embedding`".into()))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| GatewayError::Protocol("non-numeric embedding".into())))
                .collect::<std::result::Result<_, _>>()?;
            if v.len() != self.dim {
                return Err(GatewayError::Protocol(format!(
                    "embedding has dimension {}, expected {}",
                    v.len(),
                    self.dim
                )));
            }
            if !normalize(&mut v) {
                return Err(GatewayError::Protocol("zero embedding vector".into()));
            }
            match out.get_mut(i) {
                Some(slot) => *slot = v,
                None => return Err(GatewayError::Protocol(format!("embedding index {i} out of range"))),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexRecord {
    #[serde(flatten)]
    chunk: Chunk,
    vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentIndex {
    pub document_id: String,
    pub embedder: String,
    pub dim: usize,
    pub chunk_size: usize,
    pub overlap: usize,
    /// Full source text, so cited spans can be checked.
    pub source: String,
    pub chunks: Vec<Chunk>,
    pub vectors: Vec<Vec<f64>>,
}

/// A chunk with its similarity to the query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub chunk: usize,
    pub start: usize,
    pub end: usize,
    pub score: f64,
    pub text: String,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl DocumentIndex {
    pub fn build(
        document_id: impl Into<String>,
        text: &str,
        embedder: &dyn Embedder,
        chunk_size: usize,
        overlap: usize,
    ) -> Result<Self> {
        let chunks = chunk(text, chunk_size, overlap)?;
        let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
        let vectors = if texts.is_empty() { Vec::new() } else { embedder.embed(&texts)? };
        if vectors.len() != chunks.len() || vectors.iter().any(|v| v.len() != embedder.dim()) {
            return Err(Error::Gateway(GatewayError::Protocol(
                "embedder returned vectors of the wrong shape".into(),
            )));
        }
        Ok(Self {
            document_id: document_id.into(),
            embedder: embedder.id(),
            dim: embedder.dim(),
            chunk_size,
            overlap,
            source: text.to_string(),
            chunks,
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// Characters `start..end` of the source.
    pub fn span(&self, start: usize, end: usize) -> Option<String> {
        if start > end {
            return None;
        }
        let s: String = self.source.chars().skip(start).take(end - start).collect();
        (s.chars().count() == end - start).then_some(s)
    }

    /// Scores against an already embedded query.
    pub fn retrieve_vector(&self, query: &[f64], k: usize) -> Result<Vec<Retrieved>> {
        if k == 0 {
            return Err(Error::InvalidInput("k must be positive".into()));
        }
        if self.is_empty() {
            return Err(Error::InvalidInput("index has no chunks".into()));
        }
        if query.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: query.len(),
            });
        }
        let mut scored: Vec<(usize, f64)> = self.vectors.iter().map(|v| dot(v, query)).enumerate().collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(i, score)| {
                let c = &self.chunks[i];
                Retrieved {
                    chunk: i,
                    start: c.start,
                    end: c.end,
                    score,
                    text: c.text.clone(),
                }
            })
            .collect())
    }

    /// Exact top-k by cosine, best first, ties by chunk order.
    pub fn retrieve(&self, embedder: &dyn Embedder, query: &str, k: usize) -> Result<Vec<Retrieved>> {
        if embedder.id() != self.embedder {
            return Err(Error::InvalidInput(format!(
                "index was built with `{}`, not `{}`",
                self.embedder,
                embedder.id()
            )));
        }
        let q = embedder.embed(&[query.to_string()])?;
        let q = q
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::Protocol("no query embedding".into()))?;
        self.retrieve_vector(&q, k)
    }

    pub fn save(&self, path: &Path) -> std::result::Result<(), StoreError> {
        let mut meta = Map::new();
        meta.insert("document_id".into(), json!(self.document_id));
        meta.insert("embedder".into(), json!(self.embedder));
        meta.insert("dim".into(), json!(self.dim));
        meta.insert("chunk_size".into(), json!(self.chunk_size));
        meta.insert("overlap".into(), json!(self.overlap));
        meta.insert("source".into(), json!(self.source));
        let records: Vec<IndexRecord> = self
            .chunks
            .iter()
            .zip(&self.vectors)
            .map(|(c, v)| IndexRecord {
                chunk: c.clone(),
                vector: v.clone(),
            })
            .collect();
        store::save_records(path, INDEX_FORMAT, INDEX_VERSION, meta, &records)
    }

    pub fn load(path: &Path) -> std::result::Result<Self, StoreError> {
        let (header, records) = store::load_records::<IndexRecord>(path, INDEX_FORMAT, INDEX_VERSION)?;
        fn bad(reason: String) -> StoreError {
            StoreError::Integrity { offset: 0, reason }
        }
        fn field<T: serde::de::DeserializeOwned>(meta: &Map<String, Value>, k: &str) -> std::result::Result<T, StoreError> {
            let v = meta.get(k).cloned().ok_or_else(|| bad(format!("header lacks `{k}`")))?;
            serde_json::from_value(v).map_err(|e| bad(format!("header field `{k}`: {e}")))
        }
        let meta = &header.meta;
        let dim: usize = field(meta, "dim")?;
        if let Some(r) = records.iter().find(|r| r.vector.len() != dim) {
            return Err(bad(format!("chunk {} has a vector of length {}", r.chunk.index, r.vector.len())));
        }
        let (chunks, vectors) = records.into_iter().map(|r| (r.chunk, r.vector)).unzip();
        Ok(Self {
            document_id: field(meta, "document_id")?,
            embedder: field(meta, "embedder")?,
            dim,
            chunk_size: field(meta, "chunk_size")?,
            overlap: field(meta, "overlap")?,
            source: field(meta, "source")?,
            chunks,
            vectors,
        })
    }
}

/// Wording for each customizable part of the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub persona: String,
    pub task: String,
    pub direct_task: String,
    pub constraints: String,
    pub map_task: String,
    pub reduce_task: String,
    pub single_task: String,
}

const DEFAULT_TEMPLATE: &str = include_str!("../assets/doc_prompt.toml");

impl Default for PromptTemplate {
    fn default() -> Self {
        toml::from_str(DEFAULT_TEMPLATE).expect("bundled prompt template parses")
    }
}

impl PromptTemplate {
    /// Reads a TOML file; keys it omits keep their default wording.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut base: toml::Table = toml::from_str(DEFAULT_TEMPLATE).expect("bundled prompt template parses");
        let overrides: toml::Table = toml::from_str(text).map_err(|e| Error::ProblemFile(e.to_string()))?;
        for (k, v) in overrides {
            if !base.contains_key(&k) {
                return Err(Error::InvalidInput(format!("unknown prompt field `{k}`")));
            }
            base.insert(k, v);
        }
        base.try_into().map_err(|e: toml::de::Error| Error::ProblemFile(e.to_string()))
    }
}

/// The assembled prompt. Context is kept best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAPrompt {
    pub persona: String,
    pub context: Vec<Retrieved>,
    pub task: String,
    pub constraints: String,
    pub question: String,
}

impl QAPrompt {
    pub fn new(template: &PromptTemplate, context: Vec<Retrieved>, question: &str) -> Self {
        let task = if context.is_empty() { &template.direct_task } else { &template.task };
        Self {
            persona: template.persona.clone(),
            context,
            task: task.clone(),
            constraints: template.constraints.clone(),
            question: question.to_string(),
        }
    }

    pub fn user_text(&self) -> String {
        let mut out = String::new();
        if !self.context.is_empty() {
            out.push_str(EXCERPTS_HEADER);
            for (i, r) in self.context.iter().enumerate() {
                out.push_str(&format!(
                    "[{}] (characters {}-{}, similarity {:.3})\n{}\n\n",
                    i + 1,
                    r.start,
                    r.end,
                    r.score,
                    r.text
                ));
            }
        }
        out.push_str(&format!(
            "Task: {}\nConstraints: {}\n{QUESTION_LABEL}{}",
            self.task, self.constraints, self.question
        ));
        out
    }

    pub fn messages(&self) -> Vec<ChatMessage> {
        vec![ChatMessage::system(self.persona.clone()), ChatMessage::user(self.user_text())]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Citation {
    pub chunk: usize,
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub question: String,
    pub text: String,
    pub rag: bool,
    pub citations: Vec<Citation>,
    pub prompt: QAPrompt,
}

/// Answers `question`, with the top `k` chunks as context when `rag` is set.
pub fn answer(
    index: &DocumentIndex,
    embedder: &dyn Embedder,
    question: &str,
    k: usize,
    rag: bool,
    model: &dyn ChatProvider,
    template: &PromptTemplate,
) -> Result<Answer> {
    let context = if rag { index.retrieve(embedder, question, k)? } else { Vec::new() };
    let prompt = QAPrompt::new(template, context, question);
    let reply = model.chat(&ChatRequest::new(prompt.messages()))?;
    let citations = prompt
        .context
        .iter()
        .map(|r| Citation {
            chunk: r.chunk,
            start: r.start,
            end: r.end,
            score: r.score,
        })
        .collect();
    Ok(Answer {
        question: question.to_string(),
        text: reply.content(),
        rag,
        citations,
        prompt,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub text: String,
    /// Per-chunk summaries, in chunk order; empty for a one-chunk document.
    pub partials: Vec<String>,
}

/// Map-reduce summary: one call per chunk, then one combining call. A
/// document of a single chunk is summarized by the combining call alone.
pub fn summarize(index: &DocumentIndex, model: &dyn ChatProvider, template: &PromptTemplate) -> Result<Summary> {
    if index.is_empty() {
        return Err(Error::InvalidInput("document is empty".into()));
    }
    let persona = ChatMessage::system(template.persona.clone());
    let call = |text: String| -> Result<String> {
        Ok(model
            .chat(&ChatRequest::new(vec![persona.clone(), ChatMessage::user(text)]))?
            .content())
    };
    if index.len() == 1 {
        let text = call(format!(
            "{}\n\n{SINGLE_HEADER}{}",
            template.single_task, index.chunks[0].text
        ))?;
        return Ok(Summary {
            text,
            partials: Vec::new(),
        });
    }
    let mut partials = Vec::with_capacity(index.len());
    for c in &index.chunks {
        partials.push(call(format!(
            "{}\n\n{MAP_LABEL}{}-{}):\n{}",
            template.map_task, c.start, c.end, c.text
        ))?);
    }
    let listed: Vec<String> = partials
        .iter()
        .enumerate()
        .map(|(i, p)| format!("[{}] {}", i + 1, p))
        .collect();
    let text = call(format!(
        "{}\n\n{REDUCE_HEADER}{}",
        template.reduce_task,
        listed.join("\n")
    ))?;
    Ok(Summary { text, partials })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{FnProvider, Role};
    use proptest::prelude::*;
    use std::sync::Mutex;

    #[test]
    fn chunk_boundaries() {
        assert!(chunk("", 1000, 200).unwrap().is_empty());
        let text = "x".repeat(2500);
        let starts: Vec<usize> = chunk(&text, 1000, 200).unwrap().iter().map(|c| c.start).collect();
        assert_eq!(starts, vec![0, 800, 1600, 2400]);
        assert!(matches!(chunk("abc", 0, 0), Err(Error::InvalidInput(_))));
        assert!(matches!(chunk("abc", 5, 5), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn chunk_counts_characters() {
        let c = chunk("héllo wörld", 4, 1).unwrap();
        assert_eq!(c[0].text, "héll");
        assert_eq!(c[1].start, 3);
        assert_eq!(c[1].text, "lo w");
    }

    fn reassemble(chunks: &[Chunk]) -> String {
        let mut out = String::new();
        let mut covered = 0;
        for c in chunks {
            out.extend(c.text.chars().skip(covered - c.start.min(covered)));
            covered = covered.max(c.end);
        }
        out
    }

    proptest! {
        #[test]
        fn chunks_reassemble(text in "\\PC{0,300}", size in 1usize..40, overlap_frac in 0.0f64..1.0) {
            let overlap = ((size as f64 * overlap_frac) as usize).min(size - 1);
            let chunks = chunk(&text, size, overlap).unwrap();
            prop_assert_eq!(reassemble(&chunks), text.clone());
            let chars: Vec<char> = text.chars().collect();
            for c in &chunks {
                prop_assert_eq!(&c.text, &chars[c.start..c.end].iter().collect::<String>());
            }
        }

        #[test]
        fn embeddings_are_unit(text in "\\PC{0,200}", seed in 0u64..5) {
            let e = HashingEmbedder::new(64, 3, seed).unwrap();
            let v = e.embed_one(&text);
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9);
            prop_assert_eq!(v, e.embed_one(&text));
        }
    }

    #[test]
    fn hashing_embedder_round_trips_its_id() {
        let e = HashingEmbedder::new(256, 4, 9).unwrap();
        assert_eq!(HashingEmbedder::from_id(&e.id()), Some(e));
        assert_eq!(HashingEmbedder::from_id("live:emb:dim=8"), None);
        assert_eq!(HashingEmbedder::from_id("hashing-ngram:n=3,dim=0,seed=1"), None);
    }

    #[test]
    fn similar_texts_score_higher() {
        let e = HashingEmbedder::default();
        let a = "Inverter-based resources must ride through frequency excursions and support voltage.";
        let b = "Inverter-based resources must ride through frequency excursions and support the voltage.";
        let c = "The committee approved the budget for the new administrative building downtown.";
        let cos = |x: &str, y: &str| dot(&e.embed_one(x), &e.embed_one(y));
        assert!(cos(a, b) > 0.9);
        assert!(cos(a, b) > cos(a, c) + 0.5);
    }

    #[test]
    fn self_retrieval_and_clamp() {
        let e = HashingEmbedder::default();
        let text: String = (0..20).map(|i| format!("Paragraph {i} talks about topic number {}. ", i * 7)).collect();
        let idx = DocumentIndex::build("d", &text, &e, 60, 10).unwrap();
        let target = &idx.chunks[5];
        let hits = idx.retrieve(&e, &target.text, 3).unwrap();
        assert_eq!(hits[0].chunk, 5);
        assert!((hits[0].score - 1.0).abs() < 1e-9);
        assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
        assert_eq!(idx.retrieve(&e, "x", 10_000).unwrap().len(), idx.len());
        assert!(matches!(idx.retrieve(&e, "x", 0), Err(Error::InvalidInput(_))));
        let other = HashingEmbedder::new(1024, 3, 9).unwrap();
        assert!(idx.retrieve(&other, "x", 1).is_err());
    }

    #[test]
    fn ties_keep_chunk_order() {
        let e = HashingEmbedder::default();
        let idx = DocumentIndex::build("d", &"abcd".repeat(6), &e, 4, 0).unwrap();
        let hits = idx.retrieve(&e, "abcd", 6).unwrap();
        let order: Vec<usize> = hits.iter().map(|h| h.chunk).collect();
        assert_eq!(order, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn index_round_trip_is_bit_exact() {
        let e = HashingEmbedder::new(128, 3, 4).unwrap();
        let text = "Grid forming inverters establish voltage and frequency. ".repeat(30);
        let idx = DocumentIndex::build("doc-1", &text, &e, 100, 20).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.jsonl");
        idx.save(&path).unwrap();
        let back = DocumentIndex::load(&path).unwrap();
        assert_eq!(back, idx);
        for (a, b) in back.vectors.iter().flatten().zip(idx.vectors.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let empty = DocumentIndex::build("e", "", &e, 100, 20).unwrap();
        empty.save(&path).unwrap();
        assert_eq!(DocumentIndex::load(&path).unwrap(), empty);
    }

    fn echo() -> FnProvider {
        FnProvider::new(|req| Ok(req.messages.last().unwrap().text()))
    }

    #[test]
    fn context_reaches_the_model() {
        let e = HashingEmbedder::default();
        let text = "Filler sentence about nothing in particular. ".repeat(40)
            + "The phase-lock loop keeps injecting current at the last synchronized phase. "
            + &"More filler text without meaning. ".repeat(40);
        let idx = DocumentIndex::build("d", &text, &e, 200, 40).unwrap();
        let tpl = PromptTemplate::default();
        let a = answer(&idx, &e, "phase-lock loop keeps injecting current", 2, true, &echo(), &tpl).unwrap();
        assert_eq!(a.citations.len(), 2);
        let top = &idx.chunks[a.citations[0].chunk];
        assert!(top.text.contains("phase-lock loop"));
        assert!(a.text.contains(&top.text));
        for c in &a.citations {
            assert_eq!(idx.span(c.start, c.end).unwrap(), idx.chunks[c.chunk].text);
        }
        let plain = answer(&idx, &e, "phase-lock loop", 2, false, &echo(), &tpl).unwrap();
        assert!(plain.citations.is_empty());
        assert!(!plain.text.contains("Document excerpts"));
        assert_eq!(plain.prompt.messages()[0].role, Role::System);
    }

    #[test]
    fn summarize_map_reduce_order() {
        let e = HashingEmbedder::default();
        let seen = std::sync::Arc::new(Mutex::new(Vec::<String>::new()));
        let log = seen.clone();
        let model = FnProvider::new(move |req| {
            let t = req.messages.last().unwrap().text();
            log.lock().unwrap().push(t.clone());
            Ok(match t.split_once("):\n") {
                Some((_, body)) => format!("partial<{}>", &body[..6]),
                None => "final".to_string(),
            })
        });
        let tpl = PromptTemplate::default();
        let idx = DocumentIndex::build("d", "alpha1 beta22 gamma3 delta4", &e, 7, 0).unwrap();
        let s = summarize(&idx, &model, &tpl).unwrap();
        assert_eq!(s.text, "final");
        assert_eq!(s.partials.len(), idx.len());
        let calls = seen.lock().unwrap();
        assert_eq!(calls.len(), idx.len() + 1);
        let combine = calls.last().unwrap();
        let mut at = 0;
        for p in &s.partials {
            let pos = combine[at..].find(p.as_str()).expect("partial present") + at;
            at = pos + p.len();
        }

        drop(calls);
        seen.lock().unwrap().clear();
        let one = DocumentIndex::build("d", "short", &e, 1000, 200).unwrap();
        let s = summarize(&one, &model, &tpl).unwrap();
        assert!(s.partials.is_empty());
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn template_overrides() {
        let t = PromptTemplate::from_toml_str("persona = \"You are terse.\"").unwrap();
        assert_eq!(t.persona, "You are terse.");
        assert_eq!(t.task, PromptTemplate::default().task);
        assert!(PromptTemplate::from_toml_str("colour = \"red\"").is_err());
    }

    #[test]
    fn live_embedder_parses_and_normalizes() {
        use crate::llm::live_test_server::{serve, Canned};
        let body = json!({"data": [
            {"index": 1, "embedding": [0.0, 2.0]},
            {"index": 0, "embedding": [3.0, 4.0]}
        ]})
        .to_string();
        let (base, seen) = serve(vec![Canned { status: 200, body }]);
        let e = LiveEmbedder::new(LiveConfig::new(base, "k", "m"), "emb", 2);
        let v = e.embed(&["a".into(), "b".into()]).unwrap();
        assert_eq!(v, vec![vec![0.6, 0.8], vec![0.0, 1.0]]);
        let sent: Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
        assert_eq!(sent["model"], "emb");
        assert_eq!(sent["input"], json!(["a", "b"]));
    }
}
