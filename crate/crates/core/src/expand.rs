//! Stage 3: thought-expansion. Precondition the reasoning model with the
//! description, question, seed CoT, and a cue marker via assistant prefill;
//! harvest continuations; parse out the expansion and its answer; and apply
//! the caption-leak bad-word filter.

use crate::cotgen::{extract_letter, question_user_text};
use crate::domain::{
    compose_trace, CaptionRecord, ChatMessage, CueMarker, CueSet, GenMeta, LabeledSample, Letter,
    McqItem, Stage,
};
use crate::modelio::{cached_chat, ChatBackend, ChatRequest, ResponseCache, SamplingParams};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;

/// Words whose presence in an expansion reveals the model was reading the
/// caption instead of the image.
pub const DEFAULT_BAD_WORDS: [&str; 13] = [
    "describe",
    "description",
    "described",
    "describes",
    "descriptions",
    "mention",
    "mentions",
    "mentioned",
    "misread",
    "text",
    "stated",
    "says",
    "mental",
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExpandError {
    #[error("continuation is empty")]
    EmptyContinuation,
    #[error("expansion rejected by bad-word filter: {0:?}")]
    FilteredOut(String),
    #[error("expansion requires a simple-stage seed, got {0:?}")]
    SeedNotSimple(String),
}

/// Whole-word, case-insensitive matcher over a configured word list. Word
/// boundaries are non-letter neighbors, so "context" passes while
/// "MENTIONED" is caught.
#[derive(Debug)]
pub struct BadWordFilter {
    patterns: Vec<(String, Regex)>,
}

impl BadWordFilter {
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let patterns = words
            .iter()
            .map(|w| {
                let word = w.as_ref().to_string();
                let pattern = format!(
                    r"(?i)(?:^|[^\p{{L}}]){}(?:$|[^\p{{L}}])",
                    regex::escape(&word)
                );
                let re = Regex::new(&pattern).expect("bad-word pattern compiles");
                (word, re)
            })
            .collect();
        BadWordFilter { patterns }
    }

    /// The first listed word that occurs in `z2`, or None when it passes.
    pub fn check(&self, z2: &str) -> Option<&str> {
        self.patterns
            .iter()
            .find(|(_, re)| re.is_match(z2))
            .map(|(word, _)| word.as_str())
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.patterns.iter().map(|(w, _)| w.as_str())
    }
}

impl Default for BadWordFilter {
    fn default() -> Self {
        BadWordFilter::new(&DEFAULT_BAD_WORDS)
    }
}

/// The assistant prefill that preconditions the reasoning model: an open
/// think tag, the seed thought, and the cue.
pub fn expansion_prefill(seed_text: &str, cue: &CueMarker) -> String {
    format!("<think> {} {}", seed_text, cue.text())
}

/// Builds the continuation request: description plus question as user text
/// (text only; the reasoning model takes no image) and the seed-plus-cue
/// prefill.
pub fn build_expansion_request(
    record: &CaptionRecord,
    item: &McqItem,
    seed: &LabeledSample,
    cue: &CueMarker,
    model_id: &str,
    params: SamplingParams,
    stop: Option<Vec<String>>,
) -> Result<ChatRequest, ExpandError> {
    if seed.stage != Stage::Simple {
        return Err(ExpandError::SeedNotSimple(seed.sample_id.clone()));
    }
    let user = format!(
        "{}\n\n{}",
        record.description,
        question_user_text(&item.question, &item.choices_block())
    );
    let mut request = ChatRequest::new(model_id, vec![ChatMessage::user(user)], params)
        .expect("static prompt structure is valid")
        .with_prefill(expansion_prefill(seed.trace.seed(), cue))
        .expect("no assistant turn present");
    if let Some(stop) = stop {
        request = request.with_stop(stop);
    }
    Ok(request)
}

/// Splits a continuation into the expansion text (up to the first close of
/// the think block) and the predicted letter (from the remainder, or the
/// whole text when no close tag is present).
pub fn parse_continuation(continuation: &str) -> Result<(String, Option<Letter>), ExpandError> {
    if continuation.trim().is_empty() {
        return Err(ExpandError::EmptyContinuation);
    }
    let (z2, tail) = match continuation.find("</think>") {
        Some(pos) => (&continuation[..pos], Some(&continuation[pos + "</think>".len()..])),
        None => (continuation, None),
    };
    let z2 = z2.trim().to_string();
    if z2.is_empty() {
        return Err(ExpandError::EmptyContinuation);
    }
    let letter = extract_letter(tail.unwrap_or(continuation));
    Ok((z2, letter))
}

/// Labels one expansion: filter, compose, and score against the gold
/// letter. The seed's correctness is carried along for pairing rules.
#[allow(clippy::too_many_arguments)]
pub fn label_expansion(
    item: &McqItem,
    seed: &LabeledSample,
    cue: &CueMarker,
    z2: &str,
    letter: Option<Letter>,
    gen_meta: GenMeta,
    filter: &BadWordFilter,
    sample_id: String,
) -> Result<LabeledSample, ExpandError> {
    if let Some(word) = filter.check(z2) {
        return Err(ExpandError::FilteredOut(word.to_string()));
    }
    let trace = compose_trace(seed.trace.seed(), Some(cue.clone()), Some(z2.to_string()))
        .expect("seed already validated nonempty");
    Ok(LabeledSample {
        sample_id,
        mcq_id: item.mcq_id.clone(),
        trace,
        predicted_letter: letter,
        correct: letter == Some(item.gold_letter),
        stage: Stage::Expanded,
        seed_correct: seed.correct,
        gen_meta,
    })
}

/// One filter rejection, logged for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterAuditRow {
    pub sample_id: String,
    pub word: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpandSettings {
    pub model_id: String,
    pub params: SamplingParams,
    /// Stop strings for the continuation; "</answer>" bounds generation.
    pub stop: Option<Vec<String>>,
    /// Distinct cues drawn per seed.
    pub cues_per_seed: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpandStats {
    pub seeds: usize,
    pub requests: usize,
    pub expansions: usize,
    pub filtered_out: usize,
    pub empty_continuations: usize,
    pub failed_requests: usize,
}

/// Cue draw for one seed: uniform over the configured set, derived from the
/// run seed and the sample id so draws are stable under reordering and
/// parallelism.
fn draw_cues(cues: &CueSet, rng_seed: u64, sample_id: &str, count: usize) -> Vec<CueMarker> {
    let mut hasher = Sha256::new();
    hasher.update(rng_seed.to_le_bytes());
    hasher.update(sample_id.as_bytes());
    let digest = hasher.finalize();
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..cues.len()).collect();
    indices.shuffle(&mut rng);
    indices
        .into_iter()
        .take(count.min(cues.len()))
        .map(|i| CueMarker::from_raw(cues.as_slice()[i].clone()))
        .collect()
}

/// Stage-3 driver over every simple seed.
#[allow(clippy::too_many_arguments)]
pub fn expand_seeds(
    seeds: &[LabeledSample],
    items_by_id: &HashMap<String, McqItem>,
    records_by_id: &HashMap<String, CaptionRecord>,
    backend: &dyn ChatBackend,
    cache: &ResponseCache,
    settings: &ExpandSettings,
    cues: &CueSet,
    filter: &BadWordFilter,
    rng_seed: u64,
    max_in_flight: usize,
) -> (Vec<LabeledSample>, Vec<FilterAuditRow>, ExpandStats) {
    let mut work: Vec<(&LabeledSample, usize, CueMarker)> = Vec::new();
    for seed in seeds.iter().filter(|s| s.stage == Stage::Simple) {
        for (cue_index, cue) in draw_cues(cues, rng_seed, &seed.sample_id, settings.cues_per_seed)
            .into_iter()
            .enumerate()
        {
            work.push((seed, cue_index, cue));
        }
    }
    let mut stats = ExpandStats {
        seeds: seeds.iter().filter(|s| s.stage == Stage::Simple).count(),
        requests: work.len(),
        ..Default::default()
    };

    let results = crate::modelio::run_bounded(&work, max_in_flight, |_, (seed, cue_index, cue)| {
        let item = items_by_id.get(&seed.mcq_id)?;
        let record = records_by_id.get(&item.image_id)?;
        let request = build_expansion_request(
            record,
            item,
            seed,
            cue,
            &settings.model_id,
            settings.params.clone(),
            settings.stop.clone(),
        )
        .ok()?;
        let response = cached_chat(backend, cache, &request).ok()?;
        let mut expansions = Vec::new();
        let mut audit = Vec::new();
        let mut empties = 0usize;
        for (i, continuation) in response.completions.iter().enumerate() {
            let sample_id = format!("{}-c{}-x{}", seed.sample_id, cue_index, i);
            let (z2, letter) = match parse_continuation(continuation) {
                Ok(parsed) => parsed,
                Err(_) => {
                    empties += 1;
                    continue;
                }
            };
            let gen_meta = GenMeta {
                model_id: settings.model_id.clone(),
                temperature: settings.params.temperature,
                top_p: settings.params.top_p,
                top_k: settings.params.top_k,
                repetition_penalty: settings.params.repetition_penalty,
                sample_index: i as u32,
            };
            match label_expansion(item, seed, cue, &z2, letter, gen_meta, filter, sample_id.clone())
            {
                Ok(sample) => expansions.push(sample),
                Err(ExpandError::FilteredOut(word)) => {
                    audit.push(FilterAuditRow { sample_id, word })
                }
                Err(_) => empties += 1,
            }
        }
        Some((expansions, audit, empties))
    });

    let mut expansions = Vec::new();
    let mut audit_rows = Vec::new();
    for result in results {
        match result {
            Some((mut samples, mut audit, empties)) => {
                stats.empty_continuations += empties;
                stats.filtered_out += audit.len();
                expansions.append(&mut samples);
                audit_rows.append(&mut audit);
            }
            None => stats.failed_requests += 1,
        }
    }
    stats.expansions = expansions.len();
    (expansions, audit_rows, stats)
}
