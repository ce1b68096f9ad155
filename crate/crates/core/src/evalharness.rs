//! Evaluation harness: direct-answer and internal-thinking runs over
//! standardized MCQ benchmarks, accuracy scoring with macro averaging, and
//! repeated rollouts for difficulty estimation.

use crate::analyze::QuestionRollouts;
use crate::cotgen::{extract_letter_upto, image_part, question_user_text, THINK_ANSWER_SYSTEM_PROMPT};
use crate::domain::{ChatMessage, ContentPart, DomainError, Letter};
use crate::modelio::{cached_chat, ChatBackend, ChatRequest, ResponseCache, SamplingParams};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

/// System prompt asking for the answer directly, with no think block.
pub const DIRECT_ANSWER_SYSTEM_PROMPT: &str = "A conversation between User and Assistant. The user asks a visual question, and the Assistant solves it. The answer are enclosed within <answer> </answer> tags, respectively, i.e., <answer> answer here </answer>. Format the answer with the letter of the correct option in parentheses.";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("benchmark {0:?} has no outcomes")]
    EmptyBenchmark(String),
    #[error("benchmark item {0:?} invalid: {1}")]
    InvalidItem(String, String),
}

/// One standardized benchmark question with 2-10 options labeled from A.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub benchmark: String,
    pub item_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_uri: Option<String>,
    pub question: String,
    pub choices: Vec<String>,
    pub gold_letter: Letter,
}

impl BenchmarkItem {
    pub fn validate(&self) -> Result<(), EvalError> {
        let err = |m: String| EvalError::InvalidItem(self.item_id.clone(), m);
        if !(2..=10).contains(&self.choices.len()) {
            return Err(err(format!("expected 2-10 choices, got {}", self.choices.len())));
        }
        if self.gold_letter.index() >= self.choices.len() {
            return Err(err(format!(
                "gold letter {} outside the {}-option range",
                self.gold_letter,
                self.choices.len()
            )));
        }
        Ok(())
    }

    /// The last valid letter for this item's option count.
    pub fn max_letter(&self) -> Letter {
        Letter::from_index(self.choices.len() - 1).expect("validated option count")
    }

    pub fn choices_block(&self) -> String {
        self.choices
            .iter()
            .enumerate()
            .map(|(i, text)| format!("({}) {}", Letter::from_index(i).expect("in range"), text))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Direct,
    Think,
}

/// Letter extraction shared with the synthesis stages; the option range
/// widens to the benchmark's declared count.
pub fn extract_answer_letter(text: &str, max: Letter) -> Option<Letter> {
    extract_letter_upto(text, max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub item_id: String,
    pub mode: EvalMode,
    pub raw_response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extracted_letter: Option<Letter>,
    pub correct: bool,
    pub response_words: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSettings {
    pub model_id: String,
    pub mode: EvalMode,
    pub max_new_tokens: u32,
    /// Budget for text-only benchmarks, which run longer.
    pub text_only_max_new_tokens: u32,
}

/// Greedy evaluation prompt for one item. Text-only items omit the image
/// part and use the larger token budget.
pub fn build_eval_prompt(
    item: &BenchmarkItem,
    mode: EvalMode,
    settings: &EvalSettings,
) -> ChatRequest {
    let system = match mode {
        EvalMode::Direct => DIRECT_ANSWER_SYSTEM_PROMPT,
        EvalMode::Think => THINK_ANSWER_SYSTEM_PROMPT,
    };
    let text = question_user_text(&item.question, &item.choices_block());
    let user = match &item.image_uri {
        Some(uri) => ChatMessage::user_parts(vec![image_part(uri), ContentPart::text(text)]),
        None => ChatMessage::user(text),
    };
    let max_new_tokens = if item.image_uri.is_none() {
        settings.text_only_max_new_tokens
    } else {
        settings.max_new_tokens
    };
    ChatRequest::new(
        &settings.model_id,
        vec![ChatMessage::system(system), user],
        SamplingParams::greedy(max_new_tokens),
    )
    .expect("static prompt structure is valid")
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalStats {
    pub items: usize,
    pub outcomes: usize,
    pub failed_items: usize,
}

/// Runs one evaluation pass over the items.
pub fn run_eval(
    items: &[BenchmarkItem],
    backend: &dyn ChatBackend,
    cache: &ResponseCache,
    settings: &EvalSettings,
    max_in_flight: usize,
) -> (Vec<EvalOutcome>, EvalStats) {
    let results = crate::modelio::run_bounded(items, max_in_flight, |_, item| {
        let request = build_eval_prompt(item, settings.mode, settings);
        let response = cached_chat(backend, cache, &request).ok()?;
        let raw = response.completions.into_iter().next().unwrap_or_default();
        let extracted = extract_answer_letter(&raw, item.max_letter());
        Some(EvalOutcome {
            item_id: item.item_id.clone(),
            mode: settings.mode,
            correct: extracted == Some(item.gold_letter),
            extracted_letter: extracted,
            response_words: raw.split_whitespace().count(),
            raw_response: raw,
        })
    });
    let mut stats = EvalStats { items: items.len(), ..Default::default() };
    let mut outcomes = Vec::new();
    for result in results {
        match result {
            Some(outcome) => outcomes.push(outcome),
            None => stats.failed_items += 1,
        }
    }
    stats.outcomes = outcomes.len();
    (outcomes, stats)
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Unweighted mean of per-benchmark accuracies, to two decimals.
pub fn macro_average(accuracies: &[f64]) -> f64 {
    assert!(!accuracies.is_empty());
    round2(accuracies.iter().sum::<f64>() / accuracies.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub per_benchmark: BTreeMap<String, f64>,
    pub average: f64,
}

/// Per-benchmark accuracy (percent, two decimals) and the macro average.
/// Every item's benchmark must have at least one outcome.
pub fn score(
    items: &[BenchmarkItem],
    outcomes: &[EvalOutcome],
) -> Result<ScoreReport, EvalError> {
    let benchmark_of: HashMap<&str, &str> =
        items.iter().map(|i| (i.item_id.as_str(), i.benchmark.as_str())).collect();
    let mut totals: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for item in items {
        totals.entry(item.benchmark.as_str()).or_insert((0, 0));
    }
    for outcome in outcomes {
        let Some(benchmark) = benchmark_of.get(outcome.item_id.as_str()) else {
            continue;
        };
        let entry = totals.entry(benchmark).or_insert((0, 0));
        entry.0 += outcome.correct as usize;
        entry.1 += 1;
    }
    let mut per_benchmark = BTreeMap::new();
    for (benchmark, (correct, total)) in &totals {
        if *total == 0 {
            return Err(EvalError::EmptyBenchmark(benchmark.to_string()));
        }
        per_benchmark
            .insert(benchmark.to_string(), round2(100.0 * *correct as f64 / *total as f64));
    }
    let accuracies: Vec<f64> = per_benchmark.values().copied().collect();
    Ok(ScoreReport { average: macro_average(&accuracies), per_benchmark })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutSettings {
    pub model_id: String,
    pub n: u32,
    pub params: SamplingParams,
    pub mode: EvalMode,
}

/// n sampled generations per item, each scored for correctness; feeds
/// difficulty binning.
pub fn run_rollouts(
    items: &[BenchmarkItem],
    backend: &dyn ChatBackend,
    cache: &ResponseCache,
    settings: &RolloutSettings,
    max_in_flight: usize,
) -> (Vec<QuestionRollouts>, EvalStats) {
    assert!(settings.n >= 1, "rollout count must be at least 1");
    let results = crate::modelio::run_bounded(items, max_in_flight, |_, item| {
        let eval_settings = EvalSettings {
            model_id: settings.model_id.clone(),
            mode: settings.mode,
            max_new_tokens: settings.params.max_new_tokens,
            text_only_max_new_tokens: settings.params.max_new_tokens,
        };
        let mut request = build_eval_prompt(item, settings.mode, &eval_settings);
        request.params = settings.params.clone();
        request.params.n = settings.n;
        let response = cached_chat(backend, cache, &request).ok()?;
        let correct: Vec<bool> = response
            .completions
            .iter()
            .map(|text| {
                extract_answer_letter(text, item.max_letter()) == Some(item.gold_letter)
            })
            .collect();
        Some(QuestionRollouts { question_id: item.item_id.clone(), correct })
    });
    let mut stats = EvalStats { items: items.len(), ..Default::default() };
    let mut rollouts = Vec::new();
    for result in results {
        match result {
            Some(r) => rollouts.push(r),
            None => stats.failed_items += 1,
        }
    }
    stats.outcomes = rollouts.len();
    (rollouts, stats)
}

/// Benchmark JSONL row: choices as bare strings, letters implied by order.
pub fn load_benchmark(path: &std::path::Path) -> Result<Vec<BenchmarkItem>, crate::datasets::DatasetError> {
    let items: Vec<BenchmarkItem> = crate::datasets::read_jsonl(path)?;
    for item in &items {
        item.validate().map_err(|e| crate::datasets::DatasetError::Schema {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
    }
    Ok(items)
}

impl From<DomainError> for EvalError {
    fn from(e: DomainError) -> Self {
        EvalError::InvalidItem(String::new(), e.to_string())
    }
}
