//! Stage 1: turn dense image descriptions into validated multiple-choice
//! questions via a generate-then-reparse protocol against an LLM endpoint.

use crate::domain::{normalize, CaptionRecord, ChatMessage, Choice, Letter, McqItem, McqSource};
use crate::modelio::{
    cached_chat, ChatBackend, ChatRequest, ModelIoError, ResponseCache, SamplingParams,
};
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::sync::LazyLock;

pub const MCQ_SYSTEM_PROMPT: &str =
    "You are an assistant that converts image descriptions to multi-choice visual questions.";

/// User-turn template for question generation; the description is
/// substituted at the final slot.
const MCQ_USER_TEMPLATE: &str = r#"Task:
You are given a detailed description of an image. Your goal is to generate diverse vision-centric, detailed questions that require a careful examination of the image for subtle visual details.  Each question should be answerable in a brief sentence or single phrase.
Instructions: 
- Focus on Visual Detail:
    - Ask questions that require examining fine details such as textures, patterns, and small or hidden elements.
    - Encourage the reader to analyze spatial relationships like object overlap, perspective, and layout.
    - Include aspects of lighting, shadows, and color gradients that affect the image's mood and depth.
- Comprehensive Coverage:
    - Ensure that the questions, as a group, address the majority of important details mentioned in the image description.
- Design for Multiple-Choice:
    - For each question, provide 4 answer options labeled A, B, C, and D.
    - Include one correct answer and three plausible distractors.
- Encourage Careful Inspection:
    - Design each question so that it cannot be answered without a close, careful visual inspection of the image.
    - Avoid generic or overly broad questions; each should target specific visual cues mentioned or implied in the description.
- Clarity, Specificity, and Brevity in Answers:
    - Formulate questions that are clear and focused on visual elements.
    - Ensure each question is detailed enough to challenge the reader to look beyond the surface.
    - Avoid questions that can be answered with general knowledge or assumptions.
    - Each question should be answerable in a brief sentence or even a single phrase.
- Structured Output:
    - Provide the questions in a numbered list.
    - Example Format: 1. <question> question here </question> <choices> (A) ... (B) ... (C) ... (D) ...  </choices> <answer> short answer here </answer>

Image Description:
"#;

/// User-turn template asking the model to reformat a previous response into
/// the tag grammar; the raw block is substituted at the final slot.
const REPARSE_TEMPLATE: &str = r#"You are given a text containing multiple multi-choice questions. Each question includes a question statement, several choices, and an answer. Your task is to reformat the text so that each multi-choice question follows the structure below:

1. <question> question text here </question> <choices> (A) choice A text (B) choice B text (C) choice C text (D) choice D text </choices> <answer> answer text here </answer>

Please ensure that:
- Each question is numbered sequentially (e.g., 1., 2., 3., …).
- The question portion is enclosed within the `<question>` tags.
- All answer options are enclosed within the `<choices>` tags, with each option clearly labeled (A), (B), (C), (D).
- The answer is enclosed within the `<answer>` tags.
- The original content is preserved, but any formatting issues are corrected according to the template above.

Here is the original content: "#;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QgenError {
    #[error("raw block is empty")]
    EmptyRaw,
    #[error("no entries parsed from model output")]
    NoEntriesParsed,
    #[error("answer text {0:?} matches multiple choices")]
    AmbiguousGold(String),
    #[error("answer text {0:?} matches no choice")]
    NoGoldMatch(String),
}

/// A model response before validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawMcqBlock {
    pub text: String,
}

/// One entry lifted out of the raw block by the tag grammar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedEntry {
    pub question: String,
    pub choices: [String; 4],
    pub answer_text: String,
}

/// Grammar-level parse result with skip diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedBlock {
    pub entries: Vec<ParsedEntry>,
    /// Candidate entries that failed the grammar.
    pub skipped: usize,
}

impl ParsedBlock {
    pub fn require_entries(&self) -> Result<&[ParsedEntry], QgenError> {
        if self.entries.is_empty() {
            Err(QgenError::NoEntriesParsed)
        } else {
            Ok(&self.entries)
        }
    }
}

pub fn build_mcq_prompt(
    record: &CaptionRecord,
    model_id: &str,
    params: SamplingParams,
) -> ChatRequest {
    let user = format!("{MCQ_USER_TEMPLATE}{}", record.description);
    ChatRequest::new(
        model_id,
        vec![ChatMessage::system(MCQ_SYSTEM_PROMPT), ChatMessage::user(user)],
        params,
    )
    .expect("static prompt structure is valid")
}

pub fn build_reparse_prompt(
    raw: &RawMcqBlock,
    model_id: &str,
    params: SamplingParams,
) -> Result<ChatRequest, QgenError> {
    if raw.text.trim().is_empty() {
        return Err(QgenError::EmptyRaw);
    }
    let user = format!("{REPARSE_TEMPLATE}{}", raw.text);
    Ok(ChatRequest::new(model_id, vec![ChatMessage::user(user)], params)
        .expect("static prompt structure is valid"))
}

static ENTRY_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?s)<question>(.*?)</question>\s*<choices>(.*?)</choices>\s*<answer>(.*?)</answer>")
        .expect("entry regex")
});
static CHOICES_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?s)\(A\)(.*?)\(B\)(.*?)\(C\)(.*?)\(D\)(.*)").expect("choices regex")
});

/// Total parse of a raw block: extracts every entry matching the tag
/// grammar, skipping (and counting) malformed candidates. Never fails.
pub fn parse_mcq_block(text: &str) -> ParsedBlock {
    let candidates = text.matches("<question>").count();
    let mut entries = Vec::new();
    for caps in ENTRY_RE.captures_iter(text) {
        let question = caps[1].trim().to_string();
        let answer_text = caps[3].trim().to_string();
        let Some(choice_caps) = CHOICES_RE.captures(&caps[2]) else {
            continue;
        };
        let choices: [String; 4] = [
            choice_caps[1].trim().to_string(),
            choice_caps[2].trim().to_string(),
            choice_caps[3].trim().to_string(),
            choice_caps[4].trim().to_string(),
        ];
        if question.is_empty() {
            continue;
        }
        entries.push(ParsedEntry { question, choices, answer_text });
    }
    let skipped = candidates.saturating_sub(entries.len());
    ParsedBlock { entries, skipped }
}

static BARE_LETTER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\(?\s*([A-Da-d])\s*\)?\.?$").expect("bare letter regex"));

/// Resolves which choice the answer text designates: a bare letter form is
/// taken directly, otherwise the unique choice equal under normalization.
pub fn resolve_gold(entry: &ParsedEntry) -> Result<Letter, QgenError> {
    let answer = entry.answer_text.trim();
    if let Some(caps) = BARE_LETTER_RE.captures(answer) {
        let c = caps[1].chars().next().expect("captured letter");
        return Ok(Letter::from_char(c).expect("A-D by regex"));
    }
    let target = normalize(answer);
    let matches: Vec<usize> = entry
        .choices
        .iter()
        .enumerate()
        .filter(|(_, text)| normalize(text) == target)
        .map(|(i, _)| i)
        .collect();
    match matches.as_slice() {
        [i] => Ok(Letter::from_index(*i).expect("index < 4")),
        [] => Err(QgenError::NoGoldMatch(entry.answer_text.clone())),
        _ => Err(QgenError::AmbiguousGold(entry.answer_text.clone())),
    }
}

/// Settings for the question-generation stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QgenSettings {
    pub model_id: String,
    pub params: SamplingParams,
    /// Always issue the reparse call instead of only on parse failure.
    pub force_reparse: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QgenStats {
    pub records: usize,
    pub parsed_entries: usize,
    pub skipped_entries: usize,
    pub reparse_calls: usize,
    pub dropped_no_gold: usize,
    pub dropped_ambiguous: usize,
    pub dropped_duplicate: usize,
    pub dropped_invalid: usize,
    /// Records whose output parsed to zero entries even after reparse.
    pub records_without_entries: usize,
    pub failed_records: usize,
    pub items: usize,
}

fn prompt_digest(request: &ChatRequest) -> String {
    let mut hasher = Sha256::new();
    for message in &request.messages {
        hasher.update(message.text_content().as_bytes());
        hasher.update([0u8]);
    }
    hex::encode(hasher.finalize())
}

/// Runs Stage 1 for one record: generate, conditionally reparse, resolve,
/// validate, and dedup.
fn mcqs_for_record(
    record: &CaptionRecord,
    backend: &dyn ChatBackend,
    cache: &ResponseCache,
    settings: &QgenSettings,
    stats: &mut QgenStats,
) -> Result<Vec<McqItem>, ModelIoError> {
    let request = build_mcq_prompt(record, &settings.model_id, settings.params.clone());
    let source = McqSource {
        model_id: settings.model_id.clone(),
        prompt_sha256: prompt_digest(&request),
    };
    let response = cached_chat(backend, cache, &request)?;
    let raw = RawMcqBlock { text: response.completions[0].clone() };

    let mut block = parse_mcq_block(&raw.text);
    if settings.force_reparse || block.entries.is_empty() {
        if let Ok(reparse_request) =
            build_reparse_prompt(&raw, &settings.model_id, settings.params.clone())
        {
            stats.reparse_calls += 1;
            let reparsed = cached_chat(backend, cache, &reparse_request)?;
            let reparsed_block = parse_mcq_block(&reparsed.completions[0]);
            if settings.force_reparse || !reparsed_block.entries.is_empty() {
                block = reparsed_block;
            }
        }
    }
    stats.parsed_entries += block.entries.len();
    stats.skipped_entries += block.skipped;
    if block.require_entries().is_err() {
        stats.records_without_entries += 1;
        return Ok(Vec::new());
    }

    let mut seen_questions: HashSet<String> = HashSet::new();
    let mut items = Vec::new();
    for entry in &block.entries {
        let gold_letter = match resolve_gold(entry) {
            Ok(letter) => letter,
            Err(QgenError::NoGoldMatch(_)) => {
                stats.dropped_no_gold += 1;
                continue;
            }
            Err(QgenError::AmbiguousGold(_)) => {
                stats.dropped_ambiguous += 1;
                continue;
            }
            Err(_) => unreachable!("resolve_gold returns only gold errors"),
        };
        if !seen_questions.insert(normalize(&entry.question)) {
            stats.dropped_duplicate += 1;
            continue;
        }
        let item = McqItem {
            mcq_id: format!("{}-q{:02}", record.image_id, items.len()),
            image_id: record.image_id.clone(),
            question: entry.question.clone(),
            choices: entry
                .choices
                .iter()
                .enumerate()
                .map(|(i, text)| Choice {
                    letter: Letter::from_index(i).expect("index < 4"),
                    text: text.clone(),
                })
                .collect(),
            gold_letter,
            gold_text: entry.choices[gold_letter.index()].clone(),
            source: source.clone(),
        };
        if item.validate().is_err() {
            stats.dropped_invalid += 1;
            continue;
        }
        items.push(item);
    }
    Ok(items)
}

/// Stage-1 driver over the whole corpus. Per-record failures are counted,
/// never fatal.
pub fn generate_mcqs(
    records: &[CaptionRecord],
    backend: &dyn ChatBackend,
    cache: &ResponseCache,
    settings: &QgenSettings,
    max_in_flight: usize,
) -> (Vec<McqItem>, QgenStats) {
    let results = crate::modelio::run_bounded(records, max_in_flight, |_, record| {
        let mut local = QgenStats::default();
        let outcome = mcqs_for_record(record, backend, cache, settings, &mut local);
        (outcome, local)
    });
    let mut stats = QgenStats::default();
    let mut items = Vec::new();
    for (outcome, local) in results {
        stats.records += 1;
        stats.parsed_entries += local.parsed_entries;
        stats.skipped_entries += local.skipped_entries;
        stats.reparse_calls += local.reparse_calls;
        stats.dropped_no_gold += local.dropped_no_gold;
        stats.dropped_ambiguous += local.dropped_ambiguous;
        stats.dropped_duplicate += local.dropped_duplicate;
        stats.dropped_invalid += local.dropped_invalid;
        stats.records_without_entries += local.records_without_entries;
        match outcome {
            Ok(mut record_items) => items.append(&mut record_items),
            Err(_) => stats.failed_records += 1,
        }
    }
    stats.items = items.len();
    (items, stats)
}
