//! Trace analytics: cognitive-behavior tagging, length statistics, and
//! difficulty binning from rollout accuracy, plus CSV outputs for plotting.

use crate::domain::split_thoughts;
use crate::modelio::{
    cached_chat, ChatBackend, ChatRequest, ResponseCache, SamplingParams,
};
use crate::domain::ChatMessage;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use std::sync::LazyLock;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalyzeError {
    #[error("input is empty or contains an empty trace")]
    EmptyInput,
    #[error("questions have differing rollout counts: {0} vs {1}")]
    UnevenRollouts(usize, usize),
    #[error("difficulty bin missing or empty: {0}")]
    MissingBin(String),
    #[error("csv write failed: {0}")]
    Csv(String),
}

/// Lexical cues per behavior, matched case-insensitively as substrings
/// within a thought segment.
pub const BACKTRACKING_CUES: [&str; 5] =
    ["wait", "hold on", "actually, no", "i got confused", "let me re"];
pub const VERIFICATION_CUES: [&str; 5] =
    ["double-check", "let me check", "verify", "confirm", "make sure"];
pub const SUBGOAL_CUES: [&str; 6] =
    ["first,", "next,", "then,", "step ", "break this down", "let me start by"];

/// Per-segment behavior flags.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentFlags {
    pub verification: bool,
    pub backtracking: bool,
    pub subgoal_setting: bool,
}

/// Behavior counts for one trace; each count is the number of segments in
/// which at least one cue for that behavior fired.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorTags {
    pub verification: usize,
    pub backtracking: usize,
    pub subgoal_setting: usize,
    pub segments: Vec<SegmentFlags>,
}

fn any_cue(segment_lower: &str, cues: &[&str]) -> bool {
    cues.iter().any(|cue| segment_lower.contains(cue))
}

/// Tags one trace by splitting into segments and matching behavior cues.
pub fn tag_behaviors(trace_text: &str) -> BehaviorTags {
    let mut tags = BehaviorTags::default();
    for segment in split_thoughts(trace_text) {
        let lower = segment.to_lowercase();
        let flags = SegmentFlags {
            verification: any_cue(&lower, &VERIFICATION_CUES),
            backtracking: any_cue(&lower, &BACKTRACKING_CUES),
            subgoal_setting: any_cue(&lower, &SUBGOAL_CUES),
        };
        tags.verification += flags.verification as usize;
        tags.backtracking += flags.backtracking as usize;
        tags.subgoal_setting += flags.subgoal_setting as usize;
        tags.segments.push(flags);
    }
    tags
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    pub median: f64,
    /// Nearest-rank 90th percentile.
    pub p90: f64,
}

fn summarize(values: &[f64]) -> SummaryStats {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let rank = ((0.9 * n as f64).ceil() as usize).clamp(1, n);
    SummaryStats { mean, median, p90: sorted[rank - 1] }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub n: usize,
    pub words: SummaryStats,
    pub chars: SummaryStats,
}

/// Word (whitespace-delimited) and character length summaries over a set of
/// traces. Empty input or any empty trace is an error; empties are rejected
/// upstream.
pub fn length_stats<S: AsRef<str>>(traces: &[S]) -> Result<LengthStats, AnalyzeError> {
    if traces.is_empty() || traces.iter().any(|t| t.as_ref().trim().is_empty()) {
        return Err(AnalyzeError::EmptyInput);
    }
    let words: Vec<f64> =
        traces.iter().map(|t| t.as_ref().split_whitespace().count() as f64).collect();
    let chars: Vec<f64> = traces.iter().map(|t| t.as_ref().chars().count() as f64).collect();
    Ok(LengthStats { n: traces.len(), words: summarize(&words), chars: summarize(&chars) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bin {
    Easy,
    Hard,
}

impl Bin {
    pub fn as_str(&self) -> &'static str {
        match self {
            Bin::Easy => "easy",
            Bin::Hard => "hard",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyBin {
    pub question_id: String,
    pub rollout_accuracy: f64,
    pub bin: Bin,
}

/// Correct-flag lists from repeated rollouts of one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRollouts {
    pub question_id: String,
    pub correct: Vec<bool>,
}

/// Median split over per-question rollout accuracy. Every question must
/// have the same rollout count; accuracies at or below the median go to the
/// hard bin.
pub fn bin_difficulty(rollouts: &[QuestionRollouts]) -> Result<Vec<DifficultyBin>, AnalyzeError> {
    if rollouts.is_empty() {
        return Err(AnalyzeError::EmptyInput);
    }
    let count = rollouts[0].correct.len();
    if count == 0 {
        return Err(AnalyzeError::EmptyInput);
    }
    for q in rollouts {
        if q.correct.len() != count {
            return Err(AnalyzeError::UnevenRollouts(count, q.correct.len()));
        }
    }
    let accuracies: Vec<f64> = rollouts
        .iter()
        .map(|q| q.correct.iter().filter(|c| **c).count() as f64 / count as f64)
        .collect();
    let mut sorted = accuracies.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    Ok(rollouts
        .iter()
        .zip(&accuracies)
        .map(|(q, &accuracy)| DifficultyBin {
            question_id: q.question_id.clone(),
            rollout_accuracy: accuracy,
            bin: if accuracy <= median { Bin::Hard } else { Bin::Easy },
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinLengthStats {
    pub bin: Bin,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
}

/// Groups response lengths by difficulty bin. Every referenced question must
/// be binned, and both bins must end up nonempty.
pub fn length_by_difficulty(
    lengths: &[(String, usize)],
    bins: &[DifficultyBin],
) -> Result<Vec<BinLengthStats>, AnalyzeError> {
    let bin_of: HashMap<&str, Bin> =
        bins.iter().map(|b| (b.question_id.as_str(), b.bin)).collect();
    let mut grouped: HashMap<Bin, Vec<f64>> = HashMap::new();
    for (question_id, words) in lengths {
        let bin = bin_of
            .get(question_id.as_str())
            .ok_or_else(|| AnalyzeError::MissingBin(question_id.clone()))?;
        grouped.entry(*bin).or_default().push(*words as f64);
    }
    let mut out = Vec::new();
    for bin in [Bin::Easy, Bin::Hard] {
        let values = grouped
            .get(&bin)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| AnalyzeError::MissingBin(bin.as_str().to_string()))?;
        let stats = summarize(values);
        out.push(BinLengthStats {
            bin,
            n: values.len(),
            mean: stats.mean,
            median: stats.median,
            p90: stats.p90,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// CSV outputs
// ---------------------------------------------------------------------------

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, AnalyzeError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| AnalyzeError::Csv(e.to_string()))?;
    }
    csv::Writer::from_path(path).map_err(|e| AnalyzeError::Csv(e.to_string()))
}

pub fn write_behaviors_csv(
    path: &Path,
    rows: &[(String, BehaviorTags)],
) -> Result<(), AnalyzeError> {
    let mut writer = csv_writer(path)?;
    writer
        .write_record(["trace_id", "verification", "backtracking", "subgoal"])
        .map_err(|e| AnalyzeError::Csv(e.to_string()))?;
    for (trace_id, tags) in rows {
        writer
            .write_record([
                trace_id.as_str(),
                &tags.verification.to_string(),
                &tags.backtracking.to_string(),
                &tags.subgoal_setting.to_string(),
            ])
            .map_err(|e| AnalyzeError::Csv(e.to_string()))?;
    }
    writer.flush().map_err(|e| AnalyzeError::Csv(e.to_string()))
}

pub fn write_difficulty_csv(path: &Path, bins: &[DifficultyBin]) -> Result<(), AnalyzeError> {
    let mut writer = csv_writer(path)?;
    writer
        .write_record(["question_id", "accuracy", "bin"])
        .map_err(|e| AnalyzeError::Csv(e.to_string()))?;
    for bin in bins {
        writer
            .write_record([
                bin.question_id.as_str(),
                &format!("{:.6}", bin.rollout_accuracy),
                bin.bin.as_str(),
            ])
            .map_err(|e| AnalyzeError::Csv(e.to_string()))?;
    }
    writer.flush().map_err(|e| AnalyzeError::Csv(e.to_string()))
}

pub fn write_lengths_by_bin_csv(
    path: &Path,
    stats: &[BinLengthStats],
) -> Result<(), AnalyzeError> {
    let mut writer = csv_writer(path)?;
    writer
        .write_record(["bin", "n", "mean", "median", "p90"])
        .map_err(|e| AnalyzeError::Csv(e.to_string()))?;
    for row in stats {
        writer
            .write_record([
                row.bin.as_str(),
                &row.n.to_string(),
                &format!("{:.4}", row.mean),
                &format!("{:.4}", row.median),
                &format!("{:.4}", row.p90),
            ])
            .map_err(|e| AnalyzeError::Csv(e.to_string()))?;
    }
    writer.flush().map_err(|e| AnalyzeError::Csv(e.to_string()))
}

// ---------------------------------------------------------------------------
// Optional LLM-judge mode
// ---------------------------------------------------------------------------

const JUDGE_PROMPT: &str = r#"You will be shown a reasoning trace. Answer three yes/no questions about it.
1. Does the trace check or re-examine an intermediate conclusion for correctness?
2. Does the trace abandon or revise an earlier approach or answer?
3. Does the trace break the task into smaller steps or subgoals?
Reply with exactly three lines in the form "1. yes", "2. no", "3. yes".

Trace:
"#;

pub fn build_judge_prompt(trace_text: &str, model_id: &str) -> ChatRequest {
    ChatRequest::new(
        model_id,
        vec![ChatMessage::user(format!("{JUDGE_PROMPT}{trace_text}"))],
        SamplingParams::greedy(32),
    )
    .expect("static prompt structure is valid")
}

static JUDGE_LINE_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?mi)^\s*([123])\s*[.):]?\s*(yes|no)\b").expect("judge regex"));

/// (verification, backtracking, subgoal) booleans from a judge reply;
/// unanswered questions default to no.
pub fn parse_judge_response(text: &str) -> (bool, bool, bool) {
    let mut answers = [false; 3];
    for caps in JUDGE_LINE_RE.captures_iter(text) {
        let idx = caps[1].parse::<usize>().expect("1-3") - 1;
        answers[idx] = caps[2].eq_ignore_ascii_case("yes");
    }
    (answers[0], answers[1], answers[2])
}

/// Routes each trace through the judge model; counts are 0/1 per behavior.
pub fn judge_behaviors(
    traces: &[(String, String)],
    backend: &dyn ChatBackend,
    cache: &ResponseCache,
    model_id: &str,
    max_in_flight: usize,
) -> Vec<(String, BehaviorTags)> {
    crate::modelio::run_bounded(traces, max_in_flight, |_, (trace_id, text)| {
        let request = build_judge_prompt(text, model_id);
        let reply = cached_chat(backend, cache, &request)
            .ok()
            .and_then(|r| r.completions.into_iter().next())
            .unwrap_or_default();
        let (verification, backtracking, subgoal) = parse_judge_response(&reply);
        let tags = BehaviorTags {
            verification: verification as usize,
            backtracking: backtracking as usize,
            subgoal_setting: subgoal as usize,
            segments: Vec::new(),
        };
        (trace_id.clone(), tags)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_fire_on_reflective_trace() {
        let trace = "Upon examining the racket, the strings show stars. Wait, no, hold on. The image shows a smiley face.\n\nWait, maybe I got confused. Let me double-check. The smaller racket has a smiley face within the strings.";
        let tags = tag_behaviors(trace);
        assert!(tags.backtracking >= 1);
        assert!(tags.verification >= 1);
        assert_eq!(tags.segments.len(), 2);
        assert_eq!(
            tags.backtracking,
            tags.segments.iter().filter(|s| s.backtracking).count()
        );
    }

    #[test]
    fn linear_trace_tags_zero() {
        let tags = tag_behaviors("The sky is blue so the answer is (B).");
        assert_eq!(tags.verification, 0);
        assert_eq!(tags.backtracking, 0);
        assert_eq!(tags.subgoal_setting, 0);
    }

    #[test]
    fn subgoal_counts_per_segment() {
        let tags = tag_behaviors("First, count the chairs.\n\nNext, compare heights.");
        assert_eq!(tags.subgoal_setting, 2);
    }

    #[test]
    fn length_stats_examples() {
        let stats = length_stats(&["a b", "a b c d"]).unwrap();
        assert_eq!(stats.words.mean, 3.0);
        assert_eq!(stats.n, 2);

        let single = length_stats(&["one two three"]).unwrap();
        assert_eq!(single.words.mean, 3.0);
        assert_eq!(single.words.median, 3.0);

        assert_eq!(length_stats(&[""]), Err(AnalyzeError::EmptyInput));
        let none: [&str; 0] = [];
        assert_eq!(length_stats(&none), Err(AnalyzeError::EmptyInput));
    }

    fn rollouts(cases: &[(&str, usize, usize)]) -> Vec<QuestionRollouts> {
        // (id, correct, total)
        cases.iter()
            .map(|(id, correct, total)| QuestionRollouts {
                question_id: id.to_string(),
                correct: (0..*total).map(|i| i < *correct).collect(),
            })
            .collect()
    }

    #[test]
    fn median_split_with_tie_to_hard() {
        // Accuracies {1.0, 0.5, 0.0, 0.8}: median 0.65, hard = {0.5, 0.0}.
        let input = rollouts(&[("a", 10, 10), ("b", 5, 10), ("c", 0, 10), ("d", 8, 10)]);
        let bins = bin_difficulty(&input).unwrap();
        let by_id: HashMap<&str, Bin> =
            bins.iter().map(|b| (b.question_id.as_str(), b.bin)).collect();
        assert_eq!(by_id["a"], Bin::Easy);
        assert_eq!(by_id["b"], Bin::Hard);
        assert_eq!(by_id["c"], Bin::Hard);
        assert_eq!(by_id["d"], Bin::Easy);

        // Exactly-median accuracy goes to hard.
        let tied = rollouts(&[("a", 2, 4), ("b", 2, 4), ("c", 4, 4)]);
        let bins = bin_difficulty(&tied).unwrap();
        assert_eq!(bins[0].bin, Bin::Hard);
        assert_eq!(bins[1].bin, Bin::Hard);
        assert_eq!(bins[2].bin, Bin::Easy);
    }

    #[test]
    fn perfect_and_zero_rollouts() {
        let input = rollouts(&[("all", 11, 11), ("none", 0, 11), ("mid", 6, 11)]);
        let bins = bin_difficulty(&input).unwrap();
        let by_id: HashMap<&str, Bin> =
            bins.iter().map(|b| (b.question_id.as_str(), b.bin)).collect();
        assert_eq!(by_id["all"], Bin::Easy);
        assert_eq!(by_id["none"], Bin::Hard);
    }

    #[test]
    fn uneven_rollouts_rejected() {
        let input = rollouts(&[("a", 1, 11), ("b", 1, 10)]);
        assert_eq!(bin_difficulty(&input), Err(AnalyzeError::UnevenRollouts(11, 10)));
    }

    #[test]
    fn binning_is_permutation_invariant() {
        let input = rollouts(&[("a", 10, 10), ("b", 5, 10), ("c", 0, 10), ("d", 8, 10)]);
        let mut reversed = input.clone();
        reversed.reverse();
        let mut bins_a = bin_difficulty(&input).unwrap();
        let mut bins_b = bin_difficulty(&reversed).unwrap();
        bins_a.sort_by(|x, y| x.question_id.cmp(&y.question_id));
        bins_b.sort_by(|x, y| x.question_id.cmp(&y.question_id));
        assert_eq!(bins_a, bins_b);
    }

    #[test]
    fn lengths_by_bin_ordering_and_errors() {
        let bins = vec![
            DifficultyBin { question_id: "e".into(), rollout_accuracy: 1.0, bin: Bin::Easy },
            DifficultyBin { question_id: "h".into(), rollout_accuracy: 0.0, bin: Bin::Hard },
        ];
        let lengths = vec![
            ("e".to_string(), 10),
            ("h".to_string(), 50),
            ("e".to_string(), 12),
            ("h".to_string(), 60),
        ];
        let stats = length_by_difficulty(&lengths, &bins).unwrap();
        assert_eq!(stats[0].bin, Bin::Easy);
        assert!(stats[1].mean > stats[0].mean);

        let unknown = vec![("x".to_string(), 5)];
        assert!(matches!(
            length_by_difficulty(&unknown, &bins),
            Err(AnalyzeError::MissingBin(_))
        ));

        let easy_only = vec![("e".to_string(), 5)];
        assert_eq!(
            length_by_difficulty(&easy_only, &bins),
            Err(AnalyzeError::MissingBin("hard".into()))
        );

        let equal = vec![("e".to_string(), 7), ("h".to_string(), 7)];
        let stats = length_by_difficulty(&equal, &bins).unwrap();
        assert_eq!(stats[0].mean, stats[1].mean);
    }

    #[test]
    fn judge_response_parsing() {
        assert_eq!(parse_judge_response("1. yes\n2. no\n3. yes"), (true, false, true));
        assert_eq!(parse_judge_response("1) NO\n2) Yes\n3) no"), (false, true, false));
        assert_eq!(parse_judge_response("nothing useful"), (false, false, false));
    }

    #[test]
    fn judge_mode_routes_traces_through_the_backend() {
        use crate::modelio::{MockBackend, ResponseCache, ScriptRule};
        let mock = MockBackend::scripted(vec![ScriptRule::any(vec![
            "1. yes\n2. no\n3. yes".into(),
        ])]);
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let traces = vec![("t0".to_string(), "some trace".to_string())];
        let tagged = judge_behaviors(&traces, &mock, &cache, "judge-model", 2);
        assert_eq!(tagged.len(), 1);
        assert_eq!(tagged[0].1.verification, 1);
        assert_eq!(tagged[0].1.backtracking, 0);
        assert_eq!(tagged[0].1.subgoal_setting, 1);
        assert_eq!(mock.calls(), 1);
    }

    #[test]
    fn csv_files_have_expected_headers() {
        let dir = tempfile::tempdir().unwrap();
        let behaviors = dir.path().join("behaviors.csv");
        write_behaviors_csv(
            &behaviors,
            &[("t0".to_string(), tag_behaviors("Wait, let me check."))],
        )
        .unwrap();
        let content = std::fs::read_to_string(&behaviors).unwrap();
        assert!(content.starts_with("trace_id,verification,backtracking,subgoal\n"));
        assert!(content.contains("t0,1,1,0"));
    }
}
