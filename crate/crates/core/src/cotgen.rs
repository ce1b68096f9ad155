//! Stage 2: sample simple CoTs from the VLM endpoint, parse think/answer
//! tags, extract the predicted letter, and label correctness against the
//! generated questions.

use crate::domain::{
    compose_trace, CaptionRecord, ChatMessage, ContentPart, GenMeta, ImageSource, LabeledSample,
    Letter, McqItem, Stage,
};
use crate::modelio::{
    cached_chat, ChatBackend, ChatRequest, ResponseCache, SamplingParams,
};
use base64::Engine;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::LazyLock;

/// System prompt instructing the model to think before answering.
pub const THINK_ANSWER_SYSTEM_PROMPT: &str = "A conversation between User and Assistant. The user asks a visual question, and the Assistant solves it. The assistant first thinks about the reasoning process in the mind and then provides the user with the answer. The reasoning process and answer are enclosed within <think> </think> and <answer> </answer> tags, respectively, i.e., <think> reasoning process here </think> <answer> answer here </answer>. Format the answer with the letter of the correct option in parentheses.";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CotgenError {
    #[error("response carries no think block")]
    MissingThink,
}

/// The question-and-choices text shown to the model under the image.
pub fn question_user_text(question: &str, choices_block: &str) -> String {
    format!("{question}\nSelect from the following choices.\n{choices_block}")
}

/// Builds the user content part for an image locator: http(s) URIs pass
/// through by reference; local files are inlined as base64 data. Missing
/// files fall back to the raw locator so offline mock runs still work.
pub fn image_part(image_uri: &str) -> ContentPart {
    if image_uri.starts_with("http://") || image_uri.starts_with("https://") {
        return ContentPart::Image { source: ImageSource::Url(image_uri.to_string()) };
    }
    match std::fs::read(image_uri) {
        Ok(bytes) => {
            let media_type = match image_uri.rsplit('.').next().map(str::to_ascii_lowercase) {
                Some(ext) if ext == "png" => "image/png",
                Some(ext) if ext == "gif" => "image/gif",
                Some(ext) if ext == "webp" => "image/webp",
                _ => "image/jpeg",
            };
            ContentPart::Image {
                source: ImageSource::Base64 {
                    media_type: media_type.to_string(),
                    data: base64::engine::general_purpose::STANDARD.encode(bytes),
                },
            }
        }
        Err(_) => ContentPart::Image { source: ImageSource::Url(image_uri.to_string()) },
    }
}

pub fn build_cot_prompt(
    item: &McqItem,
    record: &CaptionRecord,
    model_id: &str,
    params: SamplingParams,
) -> ChatRequest {
    let user = ChatMessage::user_parts(vec![
        image_part(&record.image_uri),
        ContentPart::text(question_user_text(&item.question, &item.choices_block())),
    ]);
    ChatRequest::new(
        model_id,
        vec![ChatMessage::system(THINK_ANSWER_SYSTEM_PROMPT), user],
        params,
    )
    .expect("static prompt structure is valid")
}

static THINK_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)<think>(.*?)</think>").expect("think regex"));
static ANSWER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)<answer>(.*?)</answer>").expect("answer regex"));

/// Pulls the first think span and the last answer span out of a response.
/// Missing tags yield absent fields, never errors.
pub fn parse_think_answer(text: &str) -> (Option<String>, Option<String>) {
    let think = THINK_RE.captures(text).map(|c| c[1].trim().to_string());
    let answer = ANSWER_RE
        .captures_iter(text)
        .last()
        .map(|c| c[1].trim().to_string());
    (think, answer)
}

static PAREN_LETTER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\(([A-J])\)").expect("paren letter regex"));

/// Last "(X)" occurrence within the letter range, else the last standalone
/// "X." / "X)" token, else nothing.
pub fn extract_letter_upto(text: &str, max: Letter) -> Option<Letter> {
    let in_range = |c: char| c >= 'A' && c <= max.as_char();
    let paren = PAREN_LETTER_RE
        .captures_iter(text)
        .filter_map(|c| c[1].chars().next())
        .filter(|c| in_range(*c))
        .last();
    if let Some(c) = paren {
        return Some(Letter::from_char(c).expect("in range"));
    }
    text.split_whitespace()
        .filter_map(|token| {
            let mut chars = token.chars();
            match (chars.next(), chars.next(), chars.next()) {
                (Some(c), Some(p), None) if in_range(c) && (p == '.' || p == ')') => Some(c),
                _ => None,
            }
        })
        .next_back()
        .map(|c| Letter::from_char(c).expect("in range"))
}

/// Letter extraction over the four-option range used by generated questions.
pub fn extract_letter(text: &str) -> Option<Letter> {
    extract_letter_upto(text, Letter::from_char(Letter::MAX_MCQ).expect("D is valid"))
}

/// Labels one sampled CoT. Responses without a think block are dropped.
pub fn label_sample(
    item: &McqItem,
    sample_id: String,
    think: Option<&str>,
    letter: Option<Letter>,
    gen_meta: GenMeta,
) -> Result<LabeledSample, CotgenError> {
    let think = think.map(str::trim).filter(|t| !t.is_empty()).ok_or(CotgenError::MissingThink)?;
    let trace = compose_trace(think, None, None).expect("nonempty think");
    let correct = letter == Some(item.gold_letter);
    Ok(LabeledSample {
        sample_id,
        mcq_id: item.mcq_id.clone(),
        trace,
        predicted_letter: letter,
        correct,
        stage: Stage::Simple,
        seed_correct: correct,
        gen_meta,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CotgenSettings {
    pub model_id: String,
    pub params: SamplingParams,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotgenStats {
    pub mcqs: usize,
    pub samples: usize,
    pub dropped_missing_think: usize,
    pub failed_items: usize,
}

/// Stage-2 driver: n samples per question, labeled and counted.
pub fn generate_cots(
    items: &[McqItem],
    records_by_id: &HashMap<String, CaptionRecord>,
    backend: &dyn ChatBackend,
    cache: &ResponseCache,
    settings: &CotgenSettings,
    max_in_flight: usize,
) -> (Vec<LabeledSample>, CotgenStats) {
    let results = crate::modelio::run_bounded(items, max_in_flight, |_, item| {
        let Some(record) = records_by_id.get(&item.image_id) else {
            return Err(format!("no caption record for image {}", item.image_id));
        };
        let request = build_cot_prompt(item, record, &settings.model_id, settings.params.clone());
        let response = cached_chat(backend, cache, &request).map_err(|e| e.to_string())?;
        let mut labeled = Vec::new();
        let mut dropped = 0usize;
        for (i, completion) in response.completions.iter().enumerate() {
            let (think, answer_block) = parse_think_answer(completion);
            let letter = answer_block.as_deref().and_then(extract_letter);
            let gen_meta = GenMeta {
                model_id: settings.model_id.clone(),
                temperature: settings.params.temperature,
                top_p: settings.params.top_p,
                top_k: settings.params.top_k,
                repetition_penalty: settings.params.repetition_penalty,
                sample_index: i as u32,
            };
            let sample_id = format!("{}-s{}", item.mcq_id, i);
            match label_sample(item, sample_id, think.as_deref(), letter, gen_meta) {
                Ok(sample) => labeled.push(sample),
                Err(CotgenError::MissingThink) => dropped += 1,
            }
        }
        Ok((labeled, dropped))
    });
    let mut stats = CotgenStats { mcqs: items.len(), ..Default::default() };
    let mut samples = Vec::new();
    for result in results {
        match result {
            Ok((mut labeled, dropped)) => {
                stats.dropped_missing_think += dropped;
                samples.append(&mut labeled);
            }
            Err(_) => stats.failed_items += 1,
        }
    }
    stats.samples = samples.len();
    (samples, stats)
}
