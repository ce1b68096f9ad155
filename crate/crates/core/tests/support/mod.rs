//! Shared test support: an independent brute-force oracle for the dataset
//! construction rules, a randomized outcome-grid generator, reference CoT
//! fixtures, and helpers that drive the pipeline over the bundled corpus.

#![allow(dead_code)]

use forge_core::config::{load_config, Config};
use forge_core::datasets::{PreferencePair, SftExample, SftOrigin};
use forge_core::domain::{
    compose_trace, Choice, CueMarker, GenMeta, LabeledSample, Letter, McqItem,
    McqSource, Stage, DEFAULT_CUES,
};
use forge_core::modelio::ChatBackend;
use forge_core::pipeline::{run_stage_with_backend, RunOptions, StageKind, StageReport};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// Reference CoT fixtures (model-output samples used across tests)
// ---------------------------------------------------------------------------

pub const SIMPLE_COT_FIXTURE: &str = "<think> \nUpon examining the smaller tennis racket, I can see that there is a distinct pattern of stars within its strings. This pattern is consistent across the strings, making it clear what the design is.\n</think> \n\n<answer> (D) </answer>";

pub const EXPANDED_COT_FIXTURE: &str = "<think> \nUpon examining the smaller tennis racket, I can see that there is a distinct pattern of stars within its strings. This pattern is consistent across the strings, making it clear what the design is. Wait, no, hold on. Actually, the image shows a smiley face inside the strings, but it's upside down. So that must be the decoration.\n\nWait, maybe I got confused. Let me double-check. The smaller racket has a smiley face printed in black within the strings. So the correct answer should be A smiley face. But wait, the options include both A and C. Hmm, could it be a logo? No, because the Wilson racket has a logo, but the smaller one has a smiley face. So the decoration is a smiley face, which is option A. \n</think> \n\n<answer> (A) </answer>";

// ---------------------------------------------------------------------------
// Independent oracle for the dataset-construction rules
// ---------------------------------------------------------------------------

/// Renders an assistant turn straight from the sample's parts, without going
/// through the library's trace or assistant rendering.
pub fn oracle_render(sample: &LabeledSample) -> String {
    let trace_text = match (sample.trace.cue(), sample.trace.expansion_text()) {
        (Some(cue), Some(z2)) => format!("{} {} {}", sample.trace.seed(), cue.text(), z2),
        _ => sample.trace.seed().to_string(),
    };
    match sample.predicted_letter {
        Some(letter) => {
            format!("<think> {trace_text} </think>\n\n<answer> ({letter}) </answer>")
        }
        None => format!("<think> {trace_text} </think>\n\n<answer> </answer>"),
    }
}

/// (mcq_id, assistant, origin) tuples from a literal application of the
/// SFT selection formulas, with first-occurrence dedup on
/// (mcq_id, assistant).
pub fn oracle_sft(samples: &[LabeledSample]) -> Vec<(String, String, String)> {
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for sample in samples {
        if !sample.correct {
            continue;
        }
        let origin = match (sample.stage, sample.seed_correct) {
            (Stage::Simple, _) => "seed_correct",
            (Stage::Expanded, true) => "expand_of_correct",
            (Stage::Expanded, false) => "expand_of_incorrect",
        };
        let assistant = oracle_render(sample);
        if seen.insert((sample.mcq_id.clone(), assistant.clone())) {
            rows.push((sample.mcq_id.clone(), assistant, origin.to_string()));
        }
    }
    rows
}

/// (mcq_id, chosen, rejected, relation) tuples from a literal application of
/// the three preference relations, with first-occurrence dedup on
/// (mcq_id, chosen, rejected).
pub fn oracle_dpo(samples: &[LabeledSample]) -> Vec<(String, String, String, String)> {
    let mut question_order: Vec<&str> = Vec::new();
    let mut seen_questions = HashSet::new();
    for s in samples {
        if seen_questions.insert(s.mcq_id.as_str()) {
            question_order.push(&s.mcq_id);
        }
    }
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    let mut push = |mcq: &str, chosen: String, rejected: String, relation: &str| {
        if seen.insert((mcq.to_string(), chosen.clone(), rejected.clone())) {
            rows.push((mcq.to_string(), chosen, rejected, relation.to_string()));
        }
    };
    for mcq in question_order {
        let simples: Vec<&LabeledSample> = samples
            .iter()
            .filter(|s| s.mcq_id == mcq && s.stage == Stage::Simple)
            .collect();
        let expanded: Vec<&LabeledSample> = samples
            .iter()
            .filter(|s| s.mcq_id == mcq && s.stage == Stage::Expanded)
            .collect();
        for chosen in simples.iter().filter(|s| s.correct) {
            for rejected in simples.iter().filter(|s| !s.correct) {
                push(mcq, oracle_render(chosen), oracle_render(rejected), "correctness_seed");
            }
        }
        for expansion in expanded.iter().filter(|e| e.correct && !e.seed_correct) {
            if let Some(seed) = simples
                .iter()
                .find(|s| !s.correct && s.trace.seed() == expansion.trace.seed())
            {
                push(
                    mcq,
                    oracle_render(expansion),
                    oracle_render(seed),
                    "correctness_expansion",
                );
            }
        }
        for expansion in expanded.iter().filter(|e| e.correct && e.seed_correct) {
            if let Some(seed) = simples
                .iter()
                .find(|s| s.correct && s.trace.seed() == expansion.trace.seed())
            {
                push(mcq, oracle_render(seed), oracle_render(expansion), "compactness");
            }
        }
    }
    rows
}

pub fn origin_str(origin: SftOrigin) -> String {
    match origin {
        SftOrigin::SeedCorrect => "seed_correct",
        SftOrigin::ExpandOfCorrect => "expand_of_correct",
        SftOrigin::ExpandOfIncorrect => "expand_of_incorrect",
    }
    .to_string()
}

pub fn sft_tuples(rows: &[SftExample]) -> Vec<(String, String, String)> {
    rows.iter()
        .map(|r| (r.mcq_id.clone(), r.assistant_text().to_string(), origin_str(r.origin)))
        .collect()
}

pub fn dpo_tuples(pairs: &[PreferencePair]) -> Vec<(String, String, String, String)> {
    pairs
        .iter()
        .map(|p| {
            (p.mcq_id.clone(), p.chosen.clone(), p.rejected.clone(), p.relation.as_str().to_string())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Randomized outcome grids
// ---------------------------------------------------------------------------

fn grid_meta(index: u32) -> GenMeta {
    GenMeta {
        model_id: "grid".into(),
        temperature: 0.7,
        top_p: 0.8,
        top_k: None,
        repetition_penalty: 1.05,
        sample_index: index,
    }
}

fn grid_item(q: usize, gold: Letter) -> McqItem {
    let choices: Vec<Choice> = (0..4)
        .map(|i| Choice {
            letter: Letter::from_index(i).unwrap(),
            text: format!("choice {q}-{i}"),
        })
        .collect();
    let gold_text = choices[gold.index()].text.clone();
    McqItem {
        mcq_id: format!("g{q:02}"),
        image_id: "grid-image".into(),
        question: format!("Grid question {q}?"),
        choices,
        gold_letter: gold,
        gold_text,
        source: McqSource { model_id: "grid".into(), prompt_sha256: "0".into() },
    }
}

fn random_letter(rng: &mut ChaCha8Rng, gold: Letter) -> Option<Letter> {
    match rng.gen_range(0..10) {
        0..=3 => Some(gold),
        4..=7 => {
            let mut wrong = rng.gen_range(0..4usize);
            if wrong == gold.index() {
                wrong = (wrong + 1) % 4;
            }
            Some(Letter::from_index(wrong).unwrap())
        }
        _ => None,
    }
}

/// A random outcome grid: questions with random gold letters, seeds with
/// random correctness (including unanswered), and expansions per seed with
/// random correctness and occasional duplicate texts to exercise dedup.
pub fn random_grid(
    rng: &mut ChaCha8Rng,
    max_questions: usize,
    max_seeds: usize,
    max_expansions: usize,
) -> (HashMap<String, McqItem>, Vec<LabeledSample>) {
    let questions = rng.gen_range(1..=max_questions);
    let mut store = HashMap::new();
    let mut simples = Vec::new();
    let mut expansions = Vec::new();
    for q in 0..questions {
        let gold = Letter::from_index(rng.gen_range(0..4usize)).unwrap();
        let item = grid_item(q, gold);
        let seeds = rng.gen_range(0..=max_seeds);
        for s in 0..seeds {
            let letter = random_letter(rng, gold);
            let correct = letter == Some(gold);
            let seed = LabeledSample {
                sample_id: format!("g{q:02}-s{s}"),
                mcq_id: item.mcq_id.clone(),
                trace: compose_trace(&format!("thought {q}-{s}"), None, None).unwrap(),
                predicted_letter: letter,
                correct,
                stage: Stage::Simple,
                seed_correct: correct,
                gen_meta: grid_meta(s as u32),
            };
            let expansion_count = rng.gen_range(0..=max_expansions);
            for e in 0..expansion_count {
                let cue = CueMarker::from_raw(DEFAULT_CUES[rng.gen_range(0..DEFAULT_CUES.len())]);
                let z2 = if e > 0 && rng.gen_range(0..100) < 15 {
                    format!("expansion {q}-{s}-0")
                } else {
                    format!("expansion {q}-{s}-{e}")
                };
                let exp_letter = random_letter(rng, gold);
                expansions.push(LabeledSample {
                    sample_id: format!("g{q:02}-s{s}-x{e}"),
                    mcq_id: item.mcq_id.clone(),
                    trace: compose_trace(seed.trace.seed(), Some(cue), Some(z2)).unwrap(),
                    predicted_letter: exp_letter,
                    correct: exp_letter == Some(gold),
                    stage: Stage::Expanded,
                    seed_correct: seed.correct,
                    gen_meta: grid_meta(e as u32),
                });
            }
            simples.push(seed);
        }
        store.insert(item.mcq_id.clone(), item);
    }
    let mut samples = simples;
    samples.append(&mut expansions);
    (store, samples)
}

// ---------------------------------------------------------------------------
// Pipeline run helpers
// ---------------------------------------------------------------------------

pub fn repo_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

/// Stages a run directory: fixture corpus, benchmark, and a mock-endpoint
/// config with relative paths, so two staged directories produce identical
/// manifests.
pub fn stage_run_dir(dir: &Path) -> Config {
    std::fs::copy(repo_fixture("captions.jsonl"), dir.join("captions.jsonl")).unwrap();
    std::fs::copy(repo_fixture("benchmark.jsonl"), dir.join("benchmark.jsonl")).unwrap();
    let config_text = r#"
rng_seed = 7
max_in_flight = 4

[paths]
corpus = "captions.jsonl"
workdir = "work"
benchmark = "benchmark.jsonl"

[endpoints.qgen_model]
kind = "mock"
model_id = "gen-model"

[endpoints.vlm_model]
kind = "mock"
model_id = "vlm-model"

[endpoints.reason_model]
kind = "mock"
model_id = "reason-model"

[endpoints.eval_model]
kind = "mock"
model_id = "eval-model"
"#;
    let config_path = dir.join("run.toml");
    std::fs::write(&config_path, config_text).unwrap();
    load_config(&config_path).unwrap()
}

pub const SYNTHESIS_STAGES: [StageKind; 5] = [
    StageKind::GenMcq,
    StageKind::GenCot,
    StageKind::Expand,
    StageKind::BuildSft,
    StageKind::BuildDpo,
];

/// Runs the five synthesis stages with one shared backend.
pub fn run_synthesis(config: &Config, backend: &dyn ChatBackend) -> Vec<StageReport> {
    SYNTHESIS_STAGES
        .iter()
        .map(|stage| {
            run_stage_with_backend(*stage, config, &RunOptions::default(), Some(backend))
                .unwrap_or_else(|e| panic!("stage {} failed: {e}", stage.name()))
        })
        .collect()
}

pub fn read_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}
