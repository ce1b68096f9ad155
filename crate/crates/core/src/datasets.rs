//! Builds the SFT set and DPO preference pairs from labeled samples, applies
//! deduplication, and serializes chat-format training files.
//!
//! Selection rules: SFT keeps every trace that terminates correctly (bare
//! correct seeds and correct expansions of either seed kind). Preference
//! pairs come in three relations: a correct seed over an incorrect seed from
//! the same question, a correct expansion of an incorrect seed over that
//! same bare seed, and (for compactness) a bare correct seed over its own
//! correct expansion.

use crate::cotgen::{question_user_text, THINK_ANSWER_SYSTEM_PROMPT};
use crate::domain::{render_assistant, LabeledSample, McqItem, Role, Stage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DatasetError {
    #[error("sample references unknown mcq {0:?}")]
    UnknownMcq(String),
    #[error("sample {0:?} is inconsistent with its question: {1}")]
    Inconsistent(String, String),
    #[error("I/O on {path}: {message}")]
    Io { path: String, message: String },
    #[error("schema error at {path}:{line}: {message}")]
    Schema { path: String, line: usize, message: String },
}

/// Which selection rule admitted an SFT row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SftOrigin {
    SeedCorrect,
    ExpandOfCorrect,
    ExpandOfIncorrect,
}

/// Which preference relation produced a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairRelation {
    CorrectnessSeed,
    CorrectnessExpansion,
    Compactness,
}

impl PairRelation {
    pub fn as_str(&self) -> &'static str {
        match self {
            PairRelation::CorrectnessSeed => "correctness_seed",
            PairRelation::CorrectnessExpansion => "correctness_expansion",
            PairRelation::Compactness => "compactness",
        }
    }
}

/// A chat message rendered to plain text for training files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub mcq_id: String,
    pub messages: Vec<RenderedMessage>,
    pub origin: SftOrigin,
}

impl SftExample {
    pub fn assistant_text(&self) -> &str {
        &self.messages.last().expect("assistant message present").content
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub mcq_id: String,
    pub prompt: Vec<RenderedMessage>,
    pub chosen: String,
    pub rejected: String,
    pub relation: PairRelation,
    /// Set when the rejected side never produced a parseable letter.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub rejected_unanswered: bool,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetOptions {
    /// Upper bound on correctness_seed pairs per question; None = unlimited.
    pub correctness_pair_cap: Option<usize>,
}

/// The prompt shown at training time: think-answer system message plus the
/// question with an image slot.
fn prompt_messages(item: &McqItem) -> Vec<RenderedMessage> {
    vec![
        RenderedMessage {
            role: Role::System,
            content: THINK_ANSWER_SYSTEM_PROMPT.to_string(),
        },
        RenderedMessage {
            role: Role::User,
            content: format!(
                "<image>{}",
                question_user_text(&item.question, &item.choices_block())
            ),
        },
    ]
}

/// Canonical assistant text. Samples without a parseable letter render an
/// empty answer block, matching the behavior being penalized.
pub fn assistant_text(sample: &LabeledSample) -> String {
    match sample.predicted_letter {
        Some(letter) => render_assistant(&sample.trace, letter)
            .expect("labeled samples carry pipeline-range letters"),
        None => format!("<think> {} </think>\n\n<answer> </answer>", sample.trace.render()),
    }
}

fn check_sample(sample: &LabeledSample, store: &HashMap<String, McqItem>) -> Result<(), DatasetError> {
    let item = store
        .get(&sample.mcq_id)
        .ok_or_else(|| DatasetError::UnknownMcq(sample.mcq_id.clone()))?;
    sample
        .validate_against(item)
        .map_err(|e| DatasetError::Inconsistent(sample.sample_id.clone(), e.to_string()))
}

/// Builds the SFT set: every correct simple sample and every correct
/// expanded sample, rendered to chat format, then deduplicated.
pub fn build_sft(
    samples: &[LabeledSample],
    store: &HashMap<String, McqItem>,
) -> Result<Vec<SftExample>, DatasetError> {
    let mut rows = Vec::new();
    for sample in samples {
        check_sample(sample, store)?;
        if !sample.correct {
            continue;
        }
        let item = &store[&sample.mcq_id];
        let origin = match (sample.stage, sample.seed_correct) {
            (Stage::Simple, _) => SftOrigin::SeedCorrect,
            (Stage::Expanded, true) => SftOrigin::ExpandOfCorrect,
            (Stage::Expanded, false) => SftOrigin::ExpandOfIncorrect,
        };
        let mut messages = prompt_messages(item);
        messages.push(RenderedMessage { role: Role::Assistant, content: assistant_text(sample) });
        rows.push(SftExample { mcq_id: sample.mcq_id.clone(), messages, origin });
    }
    Ok(dedup_sft(rows))
}

/// Builds preference pairs for the three relations, then deduplicates.
pub fn build_dpo(
    samples: &[LabeledSample],
    store: &HashMap<String, McqItem>,
    options: &DatasetOptions,
) -> Result<Vec<PreferencePair>, DatasetError> {
    for sample in samples {
        check_sample(sample, store)?;
    }

    // Group by question, preserving first-appearance order.
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, (Vec<&LabeledSample>, Vec<&LabeledSample>)> = HashMap::new();
    for sample in samples {
        let entry = groups.entry(&sample.mcq_id).or_insert_with(|| {
            order.push(&sample.mcq_id);
            (Vec::new(), Vec::new())
        });
        match sample.stage {
            Stage::Simple => entry.0.push(sample),
            Stage::Expanded => entry.1.push(sample),
        }
    }

    let mut pairs = Vec::new();
    for mcq_id in order {
        let item = &store[mcq_id];
        let prompt = prompt_messages(item);
        let (simples, expanded) = &groups[mcq_id];
        let correct_simples: Vec<&&LabeledSample> =
            simples.iter().filter(|s| s.correct).collect();
        let incorrect_simples: Vec<&&LabeledSample> =
            simples.iter().filter(|s| !s.correct).collect();

        // Correctness over seeds: every (correct, incorrect) simple pair
        // within the question, up to the configured cap.
        let cap = options.correctness_pair_cap.unwrap_or(usize::MAX);
        let mut emitted = 0usize;
        'seed_pairs: for chosen in &correct_simples {
            for rejected in &incorrect_simples {
                if emitted >= cap {
                    break 'seed_pairs;
                }
                pairs.push(PreferencePair {
                    mcq_id: mcq_id.to_string(),
                    prompt: prompt.clone(),
                    chosen: assistant_text(chosen),
                    rejected: assistant_text(rejected),
                    relation: PairRelation::CorrectnessSeed,
                    rejected_unanswered: rejected.predicted_letter.is_none(),
                });
                emitted += 1;
            }
        }

        // Correctness over expansions: a correct expansion of an incorrect
        // seed beats that same bare seed.
        for expansion in expanded.iter().filter(|e| e.correct && !e.seed_correct) {
            let Some(seed) = incorrect_simples
                .iter()
                .find(|s| s.trace.seed() == expansion.trace.seed())
            else {
                continue;
            };
            pairs.push(PreferencePair {
                mcq_id: mcq_id.to_string(),
                prompt: prompt.clone(),
                chosen: assistant_text(expansion),
                rejected: assistant_text(seed),
                relation: PairRelation::CorrectnessExpansion,
                rejected_unanswered: seed.predicted_letter.is_none(),
            });
        }

        // Compactness: the bare correct seed beats its own correct expansion.
        for expansion in expanded.iter().filter(|e| e.correct && e.seed_correct) {
            let Some(seed) = correct_simples
                .iter()
                .find(|s| s.trace.seed() == expansion.trace.seed())
            else {
                continue;
            };
            pairs.push(PreferencePair {
                mcq_id: mcq_id.to_string(),
                prompt: prompt.clone(),
                chosen: assistant_text(seed),
                rejected: assistant_text(expansion),
                relation: PairRelation::Compactness,
                rejected_unanswered: false,
            });
        }
    }
    Ok(dedup_dpo(pairs))
}

/// Order-stable first-occurrence dedup.
fn dedup_by_key<T, K, F>(rows: Vec<T>, key: F) -> Vec<T>
where
    K: Eq + Hash,
    F: Fn(&T) -> K,
{
    let mut seen = HashSet::new();
    rows.into_iter().filter(|row| seen.insert(key(row))).collect()
}

pub fn dedup_sft(rows: Vec<SftExample>) -> Vec<SftExample> {
    dedup_by_key(rows, |r| (r.mcq_id.clone(), r.assistant_text().to_string()))
}

pub fn dedup_dpo(rows: Vec<PreferencePair>) -> Vec<PreferencePair> {
    dedup_by_key(rows, |r| (r.mcq_id.clone(), r.chosen.clone(), r.rejected.clone()))
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), DatasetError> {
    let io_err = |e: std::io::Error| DatasetError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut writer = std::io::BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| DatasetError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        writer.write_all(line.as_bytes()).map_err(io_err)?;
        writer.write_all(b"\n").map_err(io_err)?;
    }
    writer.flush().map_err(io_err)
}

/// Reads a JSONL file, reporting the 1-based line number on schema errors.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = std::fs::File::open(path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DatasetError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| DatasetError::Schema {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Stats sidecar written next to the dataset files.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub sft_count: usize,
    pub dpo_count_by_relation: BTreeMap<String, usize>,
    pub drop_counts: BTreeMap<String, usize>,
    pub filter_counts: BTreeMap<String, usize>,
}

/// Seeded random split; `holdout_ratio` is the fraction routed to the second
/// returned set.
pub fn seeded_split<T>(rows: Vec<T>, holdout_ratio: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    assert!((0.0..=1.0).contains(&holdout_ratio), "ratio must be in [0,1]");
    let n = rows.len();
    let holdout = ((n as f64) * holdout_ratio).round() as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let holdout_set: HashSet<usize> = indices.into_iter().take(holdout).collect();
    let mut train = Vec::with_capacity(n - holdout);
    let mut held = Vec::with_capacity(holdout);
    for (i, row) in rows.into_iter().enumerate() {
        if holdout_set.contains(&i) {
            held.push(row);
        } else {
            train.push(row);
        }
    }
    (train, held)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{compose_trace, Choice, CueMarker, CueSet, GenMeta, Letter, McqSource};

    fn meta() -> GenMeta {
        GenMeta {
            model_id: "m".into(),
            temperature: 0.7,
            top_p: 0.8,
            top_k: None,
            repetition_penalty: 1.05,
            sample_index: 0,
        }
    }

    fn item(mcq_id: &str, gold: char) -> McqItem {
        McqItem {
            mcq_id: mcq_id.into(),
            image_id: "img".into(),
            question: "Which?".into(),
            choices: ["w", "x", "y", "z"]
                .iter()
                .enumerate()
                .map(|(i, t)| Choice {
                    letter: Letter::from_index(i).unwrap(),
                    text: t.to_string(),
                })
                .collect(),
            gold_letter: Letter::from_char(gold).unwrap(),
            gold_text: match gold {
                'A' => "w",
                'B' => "x",
                'C' => "y",
                _ => "z",
            }
            .into(),
            source: McqSource { model_id: "m".into(), prompt_sha256: "0".into() },
        }
    }

    fn simple(mcq_id: &str, id: &str, seed_text: &str, letter: Option<char>, gold: char) -> LabeledSample {
        let predicted = letter.map(|c| Letter::from_char(c).unwrap());
        let correct = letter == Some(gold);
        LabeledSample {
            sample_id: id.into(),
            mcq_id: mcq_id.into(),
            trace: compose_trace(seed_text, None, None).unwrap(),
            predicted_letter: predicted,
            correct,
            stage: Stage::Simple,
            seed_correct: correct,
            gen_meta: meta(),
        }
    }

    fn expanded(
        mcq_id: &str,
        id: &str,
        seed: &LabeledSample,
        z2: &str,
        letter: Option<char>,
        gold: char,
    ) -> LabeledSample {
        let cue = CueMarker::new("Wait,", &CueSet::default()).unwrap();
        let predicted = letter.map(|c| Letter::from_char(c).unwrap());
        LabeledSample {
            sample_id: id.into(),
            mcq_id: mcq_id.into(),
            trace: compose_trace(seed.trace.seed(), Some(cue), Some(z2.into())).unwrap(),
            predicted_letter: predicted,
            correct: letter == Some(gold),
            stage: Stage::Expanded,
            seed_correct: seed.correct,
            gen_meta: meta(),
        }
    }

    fn store(items: &[McqItem]) -> HashMap<String, McqItem> {
        items.iter().map(|i| (i.mcq_id.clone(), i.clone())).collect()
    }

    /// The worked grid: one question, seeds (correct, correct, incorrect),
    /// three correct expansions each.
    fn worked_grid() -> (HashMap<String, McqItem>, Vec<LabeledSample>) {
        let q = item("q0", 'A');
        let s0 = simple("q0", "s0", "seed zero", Some('A'), 'A');
        let s1 = simple("q0", "s1", "seed one", Some('A'), 'A');
        let s2 = simple("q0", "s2", "seed two", Some('C'), 'A');
        let mut samples = vec![s0.clone(), s1.clone(), s2.clone()];
        for (k, seed) in [&s0, &s1, &s2].into_iter().enumerate() {
            for j in 0..3 {
                samples.push(expanded(
                    "q0",
                    &format!("e{k}{j}"),
                    seed,
                    &format!("expansion {k}-{j}"),
                    Some('A'),
                    'A',
                ));
            }
        }
        (store(&[q]), samples)
    }

    #[test]
    fn worked_grid_sft_rows() {
        let (store, samples) = worked_grid();
        let rows = build_sft(&samples, &store).unwrap();
        assert_eq!(rows.len(), 11);
        let by_origin = |o: SftOrigin| rows.iter().filter(|r| r.origin == o).count();
        assert_eq!(by_origin(SftOrigin::SeedCorrect), 2);
        assert_eq!(by_origin(SftOrigin::ExpandOfCorrect), 6);
        assert_eq!(by_origin(SftOrigin::ExpandOfIncorrect), 3);
    }

    #[test]
    fn worked_grid_dpo_pairs() {
        let (store, samples) = worked_grid();
        let pairs = build_dpo(&samples, &store, &DatasetOptions::default()).unwrap();
        assert_eq!(pairs.len(), 11);
        let by_relation = |r: PairRelation| pairs.iter().filter(|p| p.relation == r).count();
        assert_eq!(by_relation(PairRelation::CorrectnessSeed), 2);
        assert_eq!(by_relation(PairRelation::CorrectnessExpansion), 3);
        assert_eq!(by_relation(PairRelation::Compactness), 6);
    }

    #[test]
    fn all_incorrect_yields_nothing_for_sft() {
        let q = item("q0", 'A');
        let s = simple("q0", "s0", "seed", Some('B'), 'A');
        let e = expanded("q0", "e0", &s, "z2", Some('C'), 'A');
        let rows = build_sft(&[s, e], &store(&[q])).unwrap();
        assert!(rows.is_empty());
    }

    #[test]
    fn single_correct_seed_yields_no_pairs() {
        let q = item("q0", 'A');
        let s = simple("q0", "s0", "seed", Some('A'), 'A');
        let pairs = build_dpo(&[s], &store(&[q]), &DatasetOptions::default()).unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn incorrect_seed_with_correct_expansion_yields_one_pair() {
        let q = item("q0", 'A');
        let s = simple("q0", "s0", "seed", Some('B'), 'A');
        let e = expanded("q0", "e0", &s, "z2", Some('A'), 'A');
        let pairs = build_dpo(&[s.clone(), e], &store(&[q]), &DatasetOptions::default()).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].relation, PairRelation::CorrectnessExpansion);
        assert_eq!(pairs[0].rejected, assistant_text(&s));
        assert!(pairs[0].chosen.contains("Wait, z2"));
    }

    #[test]
    fn unanswered_seed_serves_as_rejected_side() {
        let q = item("q0", 'A');
        let good = simple("q0", "s0", "seed good", Some('A'), 'A');
        let silent = simple("q0", "s1", "seed silent", None, 'A');
        let pairs =
            build_dpo(&[good, silent], &store(&[q]), &DatasetOptions::default()).unwrap();
        assert_eq!(pairs.len(), 1);
        assert!(pairs[0].rejected_unanswered);
        assert!(pairs[0].rejected.ends_with("<answer> </answer>"));
    }

    #[test]
    fn expansion_of_correct_seed_that_is_wrong_is_unused() {
        let q = item("q0", 'A');
        let s = simple("q0", "s0", "seed", Some('A'), 'A');
        let e = expanded("q0", "e0", &s, "z2", Some('B'), 'A');
        let sft = build_sft(&[s.clone(), e.clone()], &store(std::slice::from_ref(&q))).unwrap();
        assert_eq!(sft.len(), 1); // only the seed
        let pairs = build_dpo(&[s, e], &store(&[q]), &DatasetOptions::default()).unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn correctness_pair_cap_limits_cross_product() {
        let q = item("q0", 'A');
        let mut samples = Vec::new();
        for i in 0..3 {
            samples.push(simple("q0", &format!("c{i}"), &format!("good {i}"), Some('A'), 'A'));
            samples.push(simple("q0", &format!("w{i}"), &format!("bad {i}"), Some('B'), 'A'));
        }
        let uncapped =
            build_dpo(&samples, &store(std::slice::from_ref(&q)), &DatasetOptions::default())
                .unwrap();
        assert_eq!(uncapped.len(), 9);
        let capped = build_dpo(
            &samples,
            &store(&[q]),
            &DatasetOptions { correctness_pair_cap: Some(4) },
        )
        .unwrap();
        assert_eq!(capped.len(), 4);
    }

    #[test]
    fn unknown_mcq_is_an_error() {
        let s = simple("missing", "s0", "seed", Some('A'), 'A');
        let err = build_sft(&[s], &HashMap::new()).unwrap_err();
        assert_eq!(err, DatasetError::UnknownMcq("missing".into()));
    }

    #[test]
    fn mislabeled_sample_is_an_error() {
        let q = item("q0", 'A');
        let mut s = simple("q0", "s0", "seed", Some('B'), 'A');
        s.correct = true; // lie about correctness
        let err = build_sft(&[s], &store(&[q])).unwrap_err();
        assert!(matches!(err, DatasetError::Inconsistent(_, _)));
    }

    #[test]
    fn dedup_keeps_first_and_is_idempotent() {
        let q = item("q0", 'A');
        let s = simple("q0", "s0", "seed", Some('A'), 'A');
        let twin = {
            let mut t = s.clone();
            t.sample_id = "s1".into();
            t
        };
        let rows = build_sft(&[s.clone(), twin], &store(std::slice::from_ref(&q))).unwrap();
        assert_eq!(rows.len(), 1);

        // Same trace under a different question is kept.
        let q1 = item("q1", 'A');
        let other = {
            let mut t = s.clone();
            t.mcq_id = "q1".into();
            t.sample_id = "s2".into();
            t
        };
        let rows = build_sft(&[s, other], &store(&[q, q1])).unwrap();
        assert_eq!(rows.len(), 2);

        let deduped = dedup_sft(rows.clone());
        assert_eq!(dedup_sft(deduped.clone()), deduped);
    }

    #[test]
    fn jsonl_round_trip_and_schema_error_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        let (mcq_store, samples) = worked_grid();
        let rows = build_sft(&samples, &mcq_store).unwrap();
        write_jsonl(&path, &rows).unwrap();
        let back: Vec<SftExample> = read_jsonl(&path).unwrap();
        assert_eq!(back, rows);

        let empty: Vec<SftExample> = Vec::new();
        let empty_path = dir.path().join("empty.jsonl");
        write_jsonl(&empty_path, &empty).unwrap();
        assert_eq!(read_jsonl::<SftExample>(&empty_path).unwrap(), empty);

        let bad_path = dir.path().join("bad.jsonl");
        let mut content = String::new();
        for row in &rows {
            content.push_str(&serde_json::to_string(row).unwrap());
            content.push('\n');
        }
        let mut lines: Vec<&str> = content.lines().collect();
        lines.insert(6, "{broken");
        std::fs::write(&bad_path, lines.join("\n")).unwrap();
        match read_jsonl::<SftExample>(&bad_path) {
            Err(DatasetError::Schema { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn seeded_split_is_deterministic_and_partitioning() {
        let rows: Vec<u32> = (0..100).collect();
        let (train_a, val_a) = seeded_split(rows.clone(), 0.2, 7);
        let (train_b, val_b) = seeded_split(rows.clone(), 0.2, 7);
        assert_eq!(train_a, train_b);
        assert_eq!(val_a, val_b);
        assert_eq!(val_a.len(), 20);
        let mut all: Vec<u32> = train_a.iter().chain(val_a.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, rows);
    }
}
