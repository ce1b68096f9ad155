//! Property tests for the trace, parsing, tagging, and binning invariants.

mod support;

use forge_core::analyze::{bin_difficulty, tag_behaviors, QuestionRollouts};
use forge_core::cotgen::{extract_letter, parse_think_answer};
use forge_core::domain::{
    compose_trace, normalize, render_assistant, split_thoughts, CueMarker, CueSet, Letter,
};
use forge_core::evalharness::extract_answer_letter;
use proptest::prelude::*;

/// Trimmed, nonempty text free of tag markup and double newlines.
fn plain_text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9][a-zA-Z0-9 ,.'()-]{0,60}".prop_map(|s| s.trim().to_string()).prop_filter(
        "nonempty after trim",
        |s| !s.is_empty(),
    )
}

fn segment() -> impl Strategy<Value = String> {
    "[a-zA-Z][a-zA-Z ,.]{0,30}".prop_filter("no double newline", |s| !s.contains("\n\n"))
}

proptest! {
    #[test]
    fn split_join_round_trip(segments in prop::collection::vec(segment(), 1..8)) {
        let joined = segments.join("\n\n");
        prop_assert_eq!(split_thoughts(&joined), segments);
    }

    #[test]
    fn split_is_idempotent_through_join(text in "[a-zA-Z \n]{0,80}") {
        let once = split_thoughts(&text);
        let again = split_thoughts(&once.join("\n\n"));
        prop_assert_eq!(once, again);
    }

    #[test]
    fn normalize_is_idempotent(text in ".{0,80}") {
        let once = normalize(&text);
        prop_assert_eq!(normalize(&once), once);
    }

    #[test]
    fn render_then_parse_recovers_trace_and_letter(
        seed in plain_text(),
        expansion in proptest::option::of(plain_text()),
        cue_index in 0usize..3,
        letter_index in 0usize..4,
    ) {
        let cues = CueSet::default();
        let cue = expansion
            .as_ref()
            .map(|_| CueMarker::new(cues.as_slice()[cue_index].clone(), &cues).unwrap());
        let trace = compose_trace(&seed, cue, expansion).unwrap();
        let letter = Letter::from_index(letter_index).unwrap();
        let rendered = render_assistant(&trace, letter).unwrap();

        let (think, answer) = parse_think_answer(&rendered);
        let expected_think = trace.render();
        let expected_answer = format!("({letter})");
        prop_assert_eq!(think.as_deref(), Some(expected_think.as_str()));
        prop_assert_eq!(answer.as_deref(), Some(expected_answer.as_str()));
        prop_assert_eq!(extract_letter(&rendered), Some(letter));
    }

    #[test]
    fn tagging_is_monotone_under_appended_segments(
        base in prop::collection::vec(segment(), 1..5),
        extra in segment(),
    ) {
        let before = tag_behaviors(&base.join("\n\n"));
        let mut extended = base.clone();
        extended.push(extra);
        let after = tag_behaviors(&extended.join("\n\n"));
        prop_assert!(after.verification >= before.verification);
        prop_assert!(after.backtracking >= before.backtracking);
        prop_assert!(after.subgoal_setting >= before.subgoal_setting);
    }

    #[test]
    fn bin_assignment_is_permutation_invariant(
        accuracies in prop::collection::vec(0usize..=11, 2..20),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let rollouts: Vec<QuestionRollouts> = accuracies
            .iter()
            .enumerate()
            .map(|(i, &correct)| QuestionRollouts {
                question_id: format!("q{i}"),
                correct: (0..11).map(|k| k < correct).collect(),
            })
            .collect();
        let mut shuffled = rollouts.clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        shuffled.shuffle(&mut rng);

        let mut bins_a = bin_difficulty(&rollouts).unwrap();
        let mut bins_b = bin_difficulty(&shuffled).unwrap();
        bins_a.sort_by(|x, y| x.question_id.cmp(&y.question_id));
        bins_b.sort_by(|x, y| x.question_id.cmp(&y.question_id));
        prop_assert_eq!(bins_a, bins_b);
    }
}

/// The harness and the synthesis stages must share one letter-extraction
/// implementation: equal outputs over a fixed 200-case fixture.
#[test]
fn letter_extraction_is_shared_across_modules() {
    let mut cases = Vec::new();
    for i in 0..200u32 {
        let letter = (b'A' + (i % 6) as u8) as char;
        let case = match i % 8 {
            0 => format!("the answer is ({letter})"),
            1 => format!("({letter}) early, then (B) later"),
            2 => format!("token {letter}. end"),
            3 => format!("token {letter}) end"),
            4 => "no letters at all".to_string(),
            5 => format!("<answer> ({letter}) </answer>"),
            6 => format!("N.B. ambiguous {letter}x"),
            _ => format!("I pick ({letter}) but wait, actually (A)"),
        };
        cases.push(case);
    }
    let max = Letter::from_char('D').unwrap();
    for case in &cases {
        assert_eq!(
            extract_answer_letter(case, max),
            extract_letter(case),
            "divergence on {case:?}"
        );
    }
}
