//! Few-shot multimodal image classification for situation awareness.
//!
//! Four prompting approaches of increasing richness ask a vision model
//! whether a satellite image shows wildfire. Free-text answers are mapped to
//! yes, no or abstain, and accuracy is measured over seeded rounds of five
//! positive and five negative images.

use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::{ChatMessage, ChatProvider, ChatRequest, ContentPart, ImageRef, Role};

pub const REPORT_FORMAT: &str = "sa-eval";
pub const REPORT_VERSION: u32 = 1;

/// Positive and negative images per round.
pub const PER_CLASS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaApproach {
    /// One image and the plain question.
    Direct,
    /// One image with dataset description and expert persona.
    DirectEngineered,
    /// Labeled example images before the query image.
    FewShotLabeled,
    /// Labeled examples, each with a short explanation.
    FewShotExplained,
}

impl SaApproach {
    pub const ALL: [SaApproach; 4] = [
        SaApproach::Direct,
        SaApproach::DirectEngineered,
        SaApproach::FewShotLabeled,
        SaApproach::FewShotExplained,
    ];

    /// Approaches are numbered 1 to 4 on the command line.
    pub fn from_number(n: u8) -> Option<Self> {
        Self::ALL.get(usize::from(n).checked_sub(1)?).copied()
    }

    pub fn number(self) -> u8 {
        self as u8 + 1
    }

    pub fn uses_exemplars(self) -> bool {
        matches!(self, SaApproach::FewShotLabeled | SaApproach::FewShotExplained)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExemplar {
    pub image: ImageRef,
    pub label: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
}

/// Prompt wording. Defaults reproduce the wildfire experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaPromptConfig {
    pub dataset_description: String,
    pub persona: String,
    pub exemplar_intro: String,
    pub direct_question: String,
    pub engineered_question: String,
    pub few_shot_question: String,
    pub positive_explanation: String,
    pub negative_explanation: String,
}

impl Default for SaPromptConfig {
    fn default() -> Self {
        Self {
            dataset_description: "This dataset contains satellite images about wildfire in Canada, using Longitude and \
                Latitude coordinates for each wildfire spot (> 0.01 acres burned) found. Areas after wildfire may \
                demonstrate different color in satellite images."
                .into(),
            persona: "You are a professor of forestry, and good at observing satellite images.".into(),
            exemplar_intro: "I will give you several examples of satellite images with \"yes\" or \"no\" to specify \
                if wildfire happened."
                .into(),
            direct_question: "Is there wildfire in this image? Answer yes or no.".into(),
            engineered_question: "Now, let's think step by step, and tell me, had wildfire happened in this picture?"
                .into(),
            few_shot_question: "Now, let's think step by step, and tell me, had wildfire happened in the last picture?"
                .into(),
            positive_explanation: "Patches of this area show a darker, brownish color that differs from the \
                surrounding vegetation, which indicates burned land."
                .into(),
            negative_explanation: "The vegetation and land cover in this area have uniform, natural colors without \
                burn scars."
                .into(),
        }
    }
}

fn yes_no(label: bool) -> &'static str {
    if label {
        "yes"
    } else {
        "no"
    }
}

/// `The truths of the first 5 images are "yes", "yes", "no".`
pub fn truths_sentence(labels: &[bool]) -> String {
    let quoted: Vec<String> = labels.iter().map(|l| format!("\"{}\"", yes_no(*l))).collect();
    format!("The truths of the first {} images are {}.", labels.len(), quoted.join(", "))
}

fn check_image(image: &ImageRef, what: &str) -> Result<()> {
    if image.has_payload() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} has no image payload")))
    }
}

/// Builds the chat messages for one query.
///
/// Few-shot approaches put the persona and label list in a system message and
/// the example images, then the query image and the question, in one user
/// message. Explanations follow their example image as text parts.
pub fn build_sa_prompt(
    approach: SaApproach,
    exemplars: &[LabeledExemplar],
    query: &ImageRef,
    cfg: &SaPromptConfig,
) -> Result<Vec<ChatMessage>> {
    check_image(query, "query")?;
    if approach.uses_exemplars() == exemplars.is_empty() {
        return Err(Error::InvalidInput(if exemplars.is_empty() {
            format!("approach {} needs labeled examples", approach.number())
        } else {
            format!("approach {} takes no examples, got {}", approach.number(), exemplars.len())
        }));
    }
    for (i, ex) in exemplars.iter().enumerate() {
        check_image(&ex.image, &format!("example {}", i + 1))?;
        let explained = ex.explanation.as_deref().is_some_and(|e| !e.trim().is_empty());
        match (approach, explained) {
            (SaApproach::FewShotExplained, false) => {
                return Err(Error::InvalidInput(format!("example {} has no explanation", i + 1)));
            }
            (SaApproach::FewShotLabeled, true) => {
                return Err(Error::InvalidInput(format!(
                    "example {} has an explanation, which approach 3 does not use",
                    i + 1
                )));
            }
            _ => {}
        }
    }
    let image = |img: &ImageRef| ContentPart::Image { image: img.clone() };
    let text = |t: String| ContentPart::Text { text: t };
    Ok(match approach {
        SaApproach::Direct => vec![ChatMessage::new(
            Role::User,
            vec![image(query), text(cfg.direct_question.clone())],
        )],
        SaApproach::DirectEngineered => vec![
            ChatMessage::system(format!("{}\n{}", cfg.dataset_description, cfg.persona)),
            ChatMessage::new(Role::User, vec![image(query), text(cfg.engineered_question.clone())]),
        ],
        SaApproach::FewShotLabeled | SaApproach::FewShotExplained => {
            let labels: Vec<bool> = exemplars.iter().map(|e| e.label).collect();
            let system = format!(
                "{}\n{} {} {}",
                cfg.dataset_description,
                cfg.persona,
                cfg.exemplar_intro,
                truths_sentence(&labels)
            );
            let mut parts = Vec::new();
            for (i, ex) in exemplars.iter().enumerate() {
                parts.push(image(&ex.image));
                if let (SaApproach::FewShotExplained, Some(e)) = (approach, &ex.explanation) {
                    parts.push(text(format!("Image {} is \"{}\": {}", i + 1, yes_no(ex.label), e.trim())));
                }
            }
            parts.push(image(query));
            parts.push(text(cfg.few_shot_question.clone()));
            vec![ChatMessage::system(system), ChatMessage::new(Role::User, parts)]
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Yes,
    No,
    Abstain,
}

impl Verdict {
    pub fn matches(self, label: bool) -> bool {
        matches!((self, label), (Verdict::Yes, true) | (Verdict::No, false))
    }
}

/// Phrases consulted when the answer carries no bare yes or no.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelLexicon {
    pub affirmative: Vec<String>,
    pub negative: Vec<String>,
}

impl Default for LabelLexicon {
    fn default() -> Self {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Self {
            affirmative: own(&[
                "wildfires have occurred",
                "wildfire has occurred",
                "wildfire had occurred",
                "wildfire happened",
                "wildfire has happened",
                "wildfire had happened",
                "wildfires happened",
                "signs of wildfire",
                "evidence of wildfire",
                "burn scar",
                "burned area",
                "burnt area",
            ]),
            negative: own(&[
                "no wildfire",
                "no sign of wildfire",
                "no evidence of wildfire",
                "had not",
                "has not",
                "have not",
                "did not",
                "not occurred",
                "not happened",
                "unlikely",
            ]),
        }
    }
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn normalized(text: &str) -> String {
    format!(" {} ", words(text).join(" "))
}

/// Maps a free-text answer to a verdict.
///
/// A leading yes or no decides; otherwise a yes or no word that appears
/// without the other decides; otherwise negative phrases are checked before
/// affirmative ones; otherwise the answer abstains.
pub fn parse_label(text: &str, lexicon: &LabelLexicon) -> Verdict {
    let tokens = words(text);
    match tokens.first().map(String::as_str) {
        Some("yes") => return Verdict::Yes,
        Some("no") => return Verdict::No,
        _ => {}
    }
    let has = |w: &str| tokens.iter().any(|t| t == w);
    match (has("yes"), has("no")) {
        (true, false) => return Verdict::Yes,
        (false, true) => return Verdict::No,
        _ => {}
    }
    let hay = normalized(text);
    let found = |phrases: &[String]| phrases.iter().any(|p| hay.contains(&normalized(p)));
    if found(&lexicon.negative) {
        Verdict::No
    } else if found(&lexicon.affirmative) {
        Verdict::Yes
    } else {
        Verdict::Abstain
    }
}

/// One labeled image listed in a manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: bool,
    pub explanation: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    path: String,
    label: String,
    #[serde(default)]
    explanation: Option<String>,
}

/// Reads a `path,label[,explanation]` CSV with labels 0 or 1. Relative paths
/// resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::InvalidInput(format!("manifest line {line}: {e}")))?;
        let label = match row.label.as_str() {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::InvalidInput(format!(
                    "manifest line {line}: label must be 0 or 1, got `{other}`"
                )))
            }
        };
        let path = PathBuf::from(&row.path);
        out.push(ManifestEntry {
            path: if path.is_absolute() { path } else { base.join(path) },
            label,
            explanation: row.explanation.filter(|e| !e.is_empty()),
        });
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub rounds: usize,
    pub seed: u64,
    /// Example labels in prompt order for approaches 3 and 4.
    pub exemplar_labels: Vec<bool>,
    /// Requests in flight at once within a round.
    pub concurrency: usize,
    pub temperature: Option<f64>,
    pub prompt: SaPromptConfig,
    pub lexicon: LabelLexicon,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            rounds: 1,
            seed: 0,
            exemplar_labels: vec![true, true, true, false, false],
            concurrency: 1,
            temperature: None,
            prompt: SaPromptConfig::default(),
            lexicon: LabelLexicon::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub path: PathBuf,
    pub label: bool,
    pub response: String,
    pub verdict: Verdict,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRound {
    pub round: usize,
    pub items: Vec<EvalItem>,
    pub accuracy: f64,
}

impl EvalRound {
    pub fn correct(&self) -> usize {
        self.items.iter().filter(|i| i.correct).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub approach: SaApproach,
    pub seed: u64,
    pub exemplars: Vec<ManifestEntry>,
    pub rounds: Vec<EvalRound>,
    pub mean_accuracy: f64,
}

impl EvalReport {
    pub fn abstentions(&self) -> usize {
        self.rounds
            .iter()
            .flat_map(|r| &r.items)
            .filter(|i| i.verdict == Verdict::Abstain)
            .count()
    }
}

/// The images drawn for each round, in query order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPlan {
    pub exemplars: Vec<ManifestEntry>,
    pub rounds: Vec<Vec<ManifestEntry>>,
}

/// Draws examples once, then five positives and five negatives per round
/// from the remaining images. Examples never appear as queries.
pub fn plan_evaluation(approach: SaApproach, manifest: &[ManifestEntry], opts: &EvalOptions) -> Result<EvalPlan> {
    if opts.rounds == 0 {
        return Err(Error::InvalidInput("rounds must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut pools: [Vec<&ManifestEntry>; 2] = [
        manifest.iter().filter(|e| !e.label).collect(),
        manifest.iter().filter(|e| e.label).collect(),
    ];
    let mut exemplars = Vec::new();
    if approach.uses_exemplars() {
        if opts.exemplar_labels.is_empty() {
            return Err(Error::InvalidInput("approach needs at least one example label".into()));
        }
        for class in [false, true] {
            let want = opts.exemplar_labels.iter().filter(|l| **l == class).count();
            let pool = &mut pools[usize::from(class)];
            if pool.len() < want + PER_CLASS {
                return Err(Error::InsufficientData(format!(
                    "{} {} images needed ({want} examples + {PER_CLASS} queries), manifest has {}",
                    want + PER_CLASS,
                    if class { "positive" } else { "negative" },
                    pool.len()
                )));
            }
            pool.shuffle(&mut rng);
        }
        let mut taken = [0usize; 2];
        for label in &opts.exemplar_labels {
            let c = usize::from(*label);
            exemplars.push(pools[c][taken[c]].clone());
            taken[c] += 1;
        }
        for c in 0..2 {
            pools[c].drain(..taken[c]);
        }
    }
    for (class, pool) in pools.iter().enumerate() {
        if pool.len() < PER_CLASS {
            return Err(Error::InsufficientData(format!(
                "{PER_CLASS} {} images needed per round, manifest has {}",
                if class == 1 { "positive" } else { "negative" },
                pool.len()
            )));
        }
    }
    let rounds = (0..opts.rounds)
        .map(|_| {
            let mut items: Vec<ManifestEntry> = pools
                .iter()
                .rev()
                .flat_map(|pool| pool.choose_multiple(&mut rng, PER_CLASS).map(|e| (*e).clone()).collect::<Vec<_>>())
                .collect();
            items.shuffle(&mut rng);
            items
        })
        .collect();
    Ok(EvalPlan { exemplars, rounds })
}

fn load_image(entry: &ManifestEntry) -> Result<ImageRef> {
    ImageRef::from_path(&entry.path).map_err(|e| {
        Error::InvalidInput(format!("cannot read image {}: {e}", entry.path.display()))
    })
}

fn query_item(
    approach: SaApproach,
    exemplars: &[LabeledExemplar],
    entry: &ManifestEntry,
    model: &dyn ChatProvider,
    opts: &EvalOptions,
) -> Result<EvalItem> {
    let image = load_image(entry)?;
    let messages = build_sa_prompt(approach, exemplars, &image, &opts.prompt)?;
    let mut request = ChatRequest::new(messages);
    if let Some(t) = opts.temperature {
        request = request.with_temperature(t);
    }
    let (response, error) = match model.chat(&request) {
        Ok(r) => (r.content(), None),
        Err(e) => (String::new(), Some(e.to_string())),
    };
    let verdict = if error.is_some() {
        Verdict::Abstain
    } else {
        parse_label(&response, &opts.lexicon)
    };
    Ok(EvalItem {
        path: entry.path.clone(),
        label: entry.label,
        response,
        correct: verdict.matches(entry.label),
        verdict,
        error,
    })
}

/// Runs every round of `plan`. A failed request is logged on its item and
/// scored as incorrect.
pub fn run_plan(
    approach: SaApproach,
    plan: &EvalPlan,
    model: &dyn ChatProvider,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let exemplars = plan
        .exemplars
        .iter()
        .map(|e| {
            Ok(LabeledExemplar {
                image: load_image(e)?,
                label: e.label,
                explanation: (approach == SaApproach::FewShotExplained).then(|| {
                    e.explanation.clone().unwrap_or_else(|| {
                        if e.label {
                            opts.prompt.positive_explanation.clone()
                        } else {
                            opts.prompt.negative_explanation.clone()
                        }
                    })
                }),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let width = opts.concurrency.max(1);
    let mut rounds = Vec::with_capacity(plan.rounds.len());
    for (r, entries) in plan.rounds.iter().enumerate() {
        let mut items = Vec::with_capacity(entries.len());
        for batch in entries.chunks(width) {
            let results: Vec<Result<EvalItem>> = if width == 1 {
                batch.iter().map(|e| query_item(approach, &exemplars, e, model, opts)).collect()
            } else {
                std::thread::scope(|s| {
                    let handles: Vec<_> = batch
                        .iter()
                        .map(|e| s.spawn(|| query_item(approach, &exemplars, e, model, opts)))
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("query thread panicked")).collect()
                })
            };
            for item in results {
                items.push(item?);
            }
        }
        let accuracy = items.iter().filter(|i| i.correct).count() as f64 / items.len() as f64;
        tracing::info!(round = r + 1, accuracy, "wildfire round scored");
        rounds.push(EvalRound {
            round: r + 1,
            items,
            accuracy,
        });
    }
    let mean_accuracy = rounds.iter().map(|r| r.accuracy).sum::<f64>() / rounds.len() as f64;
    Ok(EvalReport {
        approach,
        seed: opts.seed,
        exemplars: plan.exemplars.clone(),
        rounds,
        mean_accuracy,
    })
}

pub fn evaluate(
    approach: SaApproach,
    manifest: &[ManifestEntry],
    model: &dyn ChatProvider,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let plan = plan_evaluation(approach, manifest, opts)?;
    run_plan(approach, &plan, model, opts)
}
