//! Shared domain types: caption records, MCQ items, thought traces, labeled
//! samples, and chat messages, plus trace composition/segmentation and the
//! canonical assistant rendering used across every stage.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Default cue markers appended to a seed thought to elicit reflective
/// continuations.
pub const DEFAULT_CUES: [&str; 3] = ["Wait,", "Hmm,", "Alternatively,"];

/// Errors raised by domain-type constructors and trace operations.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DomainError {
    #[error("trace seed is empty")]
    EmptySeed,
    #[error("expansion supplied without a cue marker")]
    ExpansionWithoutCue,
    #[error("cue marker supplied without an expansion")]
    CueWithoutExpansion,
    #[error("invalid option letter: {0:?}")]
    InvalidLetter(String),
    #[error("cue {0:?} is not in the configured cue set")]
    CueNotInSet(String),
    #[error("caption record {0:?} invalid: {1}")]
    InvalidCaption(String, String),
    #[error("mcq {0:?} invalid: {1}")]
    InvalidMcq(String, String),
    #[error("conversation invalid: {0}")]
    InvalidConversation(String),
}

/// Normalization used everywhere two option texts are compared: lowercase,
/// trim, collapse internal whitespace runs to a single space.
pub fn normalize(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

// ---------------------------------------------------------------------------
// Option letters
// ---------------------------------------------------------------------------

/// A multiple-choice option letter. The synthesis pipeline uses A-D; the
/// evaluation harness accepts up to A-J for wide benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Letter(char);

impl Letter {
    pub const MAX: char = 'J';

    /// Last letter valid for generated four-choice questions.
    pub const MAX_MCQ: char = 'D';

    pub fn from_char(c: char) -> Result<Self, DomainError> {
        let up = c.to_ascii_uppercase();
        if ('A'..='J').contains(&up) {
            Ok(Letter(up))
        } else {
            Err(DomainError::InvalidLetter(c.to_string()))
        }
    }

    /// Parses "A", "a", or "(A)" style strings.
    pub fn parse(s: &str) -> Result<Self, DomainError> {
        let t = s.trim();
        let inner = t.strip_prefix('(').and_then(|r| r.strip_suffix(')')).unwrap_or(t);
        let mut chars = inner.trim().chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Letter::from_char(c),
            _ => Err(DomainError::InvalidLetter(s.to_string())),
        }
    }

    /// The letter for a zero-based choice index (0 -> A).
    pub fn from_index(i: usize) -> Result<Self, DomainError> {
        let c = (b'A' + u8::try_from(i).map_err(|_| DomainError::InvalidLetter(i.to_string()))?)
            as char;
        Letter::from_char(c)
    }

    pub fn as_char(&self) -> char {
        self.0
    }

    pub fn index(&self) -> usize {
        (self.0 as u8 - b'A') as usize
    }

    /// True for the A-D range used by generated questions.
    pub fn is_mcq_letter(&self) -> bool {
        self.0 <= Self::MAX_MCQ
    }
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl TryFrom<String> for Letter {
    type Error = DomainError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Letter::parse(&s)
    }
}

impl From<Letter> for String {
    fn from(l: Letter) -> String {
        l.0.to_string()
    }
}

// ---------------------------------------------------------------------------
// Corpus records and MCQ items
// ---------------------------------------------------------------------------

/// One input corpus row: an image identifier, a locator, and its dense
/// description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub image_uri: String,
    pub description: String,
}

impl CaptionRecord {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.image_id.trim().is_empty() {
            return Err(DomainError::InvalidCaption(
                self.image_id.clone(),
                "image_id is empty".into(),
            ));
        }
        if self.description.trim().is_empty() {
            return Err(DomainError::InvalidCaption(
                self.image_id.clone(),
                "description is empty".into(),
            ));
        }
        Ok(())
    }
}

/// Provenance of a generated question: which model produced it and a digest
/// of the prompt that elicited it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqSource {
    pub model_id: String,
    pub prompt_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub letter: Letter,
    pub text: String,
}

/// A validated four-choice question with a resolved gold letter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    pub mcq_id: String,
    pub image_id: String,
    pub question: String,
    pub choices: Vec<Choice>,
    pub gold_letter: Letter,
    pub gold_text: String,
    pub source: McqSource,
}

impl McqItem {
    /// Checks every structural invariant: exactly four choices labeled A-D in
    /// order, nonempty pairwise-distinct texts after normalization, and a
    /// gold text that matches the gold choice under normalization.
    pub fn validate(&self) -> Result<(), DomainError> {
        let err = |reason: String| DomainError::InvalidMcq(self.mcq_id.clone(), reason);
        if self.question.trim().is_empty() {
            return Err(err("question is empty".into()));
        }
        if self.choices.len() != 4 {
            return Err(err(format!("expected 4 choices, got {}", self.choices.len())));
        }
        for (i, choice) in self.choices.iter().enumerate() {
            let expected = Letter::from_index(i).expect("index < 4");
            if choice.letter != expected {
                return Err(err(format!(
                    "choice {} labeled {}, expected {}",
                    i, choice.letter, expected
                )));
            }
            if choice.text.trim().is_empty() {
                return Err(err(format!("choice {} text is empty", expected)));
            }
        }
        for i in 0..self.choices.len() {
            for j in (i + 1)..self.choices.len() {
                if normalize(&self.choices[i].text) == normalize(&self.choices[j].text) {
                    return Err(err(format!(
                        "choices {} and {} are duplicates after normalization",
                        self.choices[i].letter, self.choices[j].letter
                    )));
                }
            }
        }
        if !self.gold_letter.is_mcq_letter() {
            return Err(err(format!("gold letter {} outside A-D", self.gold_letter)));
        }
        let gold_choice = &self.choices[self.gold_letter.index()];
        if normalize(&gold_choice.text) != normalize(&self.gold_text) {
            return Err(err(format!(
                "gold text {:?} does not match choice {} text {:?}",
                self.gold_text, self.gold_letter, gold_choice.text
            )));
        }
        Ok(())
    }

    /// Choices rendered one per line as "(A) text".
    pub fn choices_block(&self) -> String {
        self.choices
            .iter()
            .map(|c| format!("({}) {}", c.letter, c.text))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

// ---------------------------------------------------------------------------
// Cue markers and thought traces
// ---------------------------------------------------------------------------

/// The set of cue markers a run is configured to draw from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CueSet(Vec<String>);

impl CueSet {
    pub fn new(cues: Vec<String>) -> Self {
        CueSet(cues)
    }

    pub fn contains(&self, text: &str) -> bool {
        self.0.iter().any(|c| c == text)
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for CueSet {
    fn default() -> Self {
        CueSet(DEFAULT_CUES.iter().map(|s| s.to_string()).collect())
    }
}

/// A cue marker such as "Wait," appended to a seed thought.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CueMarker(String);

impl CueMarker {
    /// Constructs a marker, checking membership in the configured set.
    pub fn new(text: impl Into<String>, set: &CueSet) -> Result<Self, DomainError> {
        let text = text.into();
        if set.contains(&text) {
            Ok(CueMarker(text))
        } else {
            Err(DomainError::CueNotInSet(text))
        }
    }

    /// Constructs a marker without membership checking. Used when reading
    /// traces back from disk, where the original cue set is not at hand.
    pub fn from_raw(text: impl Into<String>) -> Self {
        CueMarker(text.into())
    }

    pub fn text(&self) -> &str {
        &self.0
    }
}

/// The cue-plus-continuation half of an expanded trace. Kept as one unit so
/// a trace can never hold an expansion without its cue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Expansion {
    cue: CueMarker,
    text: String,
}

/// A reasoning trace: a seed thought, optionally extended by a cue marker
/// and an expansion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TraceRepr", into = "TraceRepr")]
pub struct ThoughtTrace {
    seed: String,
    expansion: Option<Expansion>,
}

/// Flat serialization shape for [`ThoughtTrace`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TraceRepr {
    seed: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cue: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    expansion: Option<String>,
}

impl TryFrom<TraceRepr> for ThoughtTrace {
    type Error = DomainError;
    fn try_from(r: TraceRepr) -> Result<Self, Self::Error> {
        compose_trace(&r.seed, r.cue.map(CueMarker::from_raw), r.expansion)
    }
}

impl From<ThoughtTrace> for TraceRepr {
    fn from(t: ThoughtTrace) -> TraceRepr {
        match t.expansion {
            None => TraceRepr { seed: t.seed, cue: None, expansion: None },
            Some(e) => TraceRepr {
                seed: t.seed,
                cue: Some(e.cue.text().to_string()),
                expansion: Some(e.text),
            },
        }
    }
}

impl ThoughtTrace {
    pub fn seed(&self) -> &str {
        &self.seed
    }

    pub fn cue(&self) -> Option<&CueMarker> {
        self.expansion.as_ref().map(|e| &e.cue)
    }

    pub fn expansion_text(&self) -> Option<&str> {
        self.expansion.as_ref().map(|e| e.text.as_str())
    }

    pub fn is_expanded(&self) -> bool {
        self.expansion.is_some()
    }

    /// The full trace text: the seed alone, or seed, cue, and expansion
    /// joined by single spaces.
    pub fn render(&self) -> String {
        match &self.expansion {
            None => self.seed.clone(),
            Some(e) => format!("{} {} {}", self.seed, e.cue.text(), e.text),
        }
    }
}

/// Builds a trace from its parts, enforcing that the seed is nonempty and
/// that a cue and an expansion only ever appear together.
pub fn compose_trace(
    seed: &str,
    cue: Option<CueMarker>,
    expansion: Option<String>,
) -> Result<ThoughtTrace, DomainError> {
    if seed.trim().is_empty() {
        return Err(DomainError::EmptySeed);
    }
    let expansion = match (cue, expansion) {
        (None, None) => None,
        (Some(cue), Some(text)) => Some(Expansion { cue, text }),
        (None, Some(_)) => return Err(DomainError::ExpansionWithoutCue),
        (Some(_), None) => return Err(DomainError::CueWithoutExpansion),
    };
    Ok(ThoughtTrace { seed: seed.to_string(), expansion })
}

/// Splits text into thought segments on the exact "\n\n" delimiter, dropping
/// empty segments.
pub fn split_thoughts(text: &str) -> Vec<String> {
    text.split("\n\n").filter(|s| !s.is_empty()).map(|s| s.to_string()).collect()
}

/// Renders the canonical assistant turn for a trace and a resolved letter:
/// a think block, a blank line, and a parenthesized answer block.
pub fn render_assistant(trace: &ThoughtTrace, letter: Letter) -> Result<String, DomainError> {
    if !letter.is_mcq_letter() {
        return Err(DomainError::InvalidLetter(letter.to_string()));
    }
    Ok(format!("<think> {} </think>\n\n<answer> ({}) </answer>", trace.render(), letter))
}

// ---------------------------------------------------------------------------
// Labeled samples
// ---------------------------------------------------------------------------

/// Which synthesis stage produced a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Simple,
    Expanded,
}

/// Generation metadata carried on every sample for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenMeta {
    pub model_id: String,
    pub temperature: f64,
    pub top_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u32>,
    pub repetition_penalty: f64,
    pub sample_index: u32,
}

/// One labeled trace: the thought, the predicted letter (if any), and its
/// correctness against the referenced question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub sample_id: String,
    pub mcq_id: String,
    pub trace: ThoughtTrace,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_letter: Option<Letter>,
    pub correct: bool,
    pub stage: Stage,
    /// Correctness of the simple seed this trace descends from. For simple
    /// samples this equals `correct`.
    pub seed_correct: bool,
    pub gen_meta: GenMeta,
}

impl LabeledSample {
    /// Re-checks the labeling invariants against the question this sample
    /// references.
    pub fn validate_against(&self, item: &McqItem) -> Result<(), DomainError> {
        let err = |reason: String| DomainError::InvalidMcq(self.sample_id.clone(), reason);
        if self.mcq_id != item.mcq_id {
            return Err(err(format!("sample references {}, item is {}", self.mcq_id, item.mcq_id)));
        }
        let expect_correct = self.predicted_letter == Some(item.gold_letter);
        if self.correct != expect_correct {
            return Err(err(format!(
                "correct={} disagrees with predicted {:?} vs gold {}",
                self.correct, self.predicted_letter, item.gold_letter
            )));
        }
        match self.stage {
            Stage::Simple if self.trace.is_expanded() => {
                Err(err("simple sample carries an expansion".into()))
            }
            Stage::Expanded if !self.trace.is_expanded() => {
                Err(err("expanded sample missing its expansion".into()))
            }
            _ => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// Chat messages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::System => write!(f, "system"),
            Role::User => write!(f, "user"),
            Role::Assistant => write!(f, "assistant"),
        }
    }
}

/// How an image reaches the model: by reference or as inline base64.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    Url(String),
    Base64 { media_type: String, data: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    Image { source: ImageSource },
}

impl ContentPart {
    pub fn text(s: impl Into<String>) -> Self {
        ContentPart::Text { text: s.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: vec![ContentPart::text(text)] }
    }

    pub fn user(text: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: vec![ContentPart::text(text)] }
    }

    pub fn user_parts(parts: Vec<ContentPart>) -> Self {
        ChatMessage { role: Role::User, content: parts }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, content: vec![ContentPart::text(text)] }
    }

    /// Concatenation of the message's text parts.
    pub fn text_content(&self) -> String {
        self.content
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text { text } => Some(text.as_str()),
                _ => None,
            })
            .collect::<Vec<_>>()
            .join("")
    }
}

/// At most one system message per conversation, and it must come first.
pub fn validate_conversation(messages: &[ChatMessage]) -> Result<(), DomainError> {
    for (i, m) in messages.iter().enumerate() {
        if m.role == Role::System && i != 0 {
            return Err(DomainError::InvalidConversation(format!(
                "system message at position {i}, expected first"
            )));
        }
    }
    Ok(())
}
