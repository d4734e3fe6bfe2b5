use super::generate::{
    generate_template_script, GeneratorError, GeneratorKnobs, GeneratorRegistry, ScriptFamily,
};
use super::*;
use proptest::prelude::*;

fn fixture_json() -> serde_json::Value {
    serde_json::json!({
        "script_id": "fsa-demo",
        "task_type": "interval",
        "question": "Which segment in Video 2 matches the segment between 5s and 10s in Video 1?",
        "gold": {"kind": "interval", "value": [12.0, 20.0]},
        "videos": [
            {
                "video_index": 1,
                "duration_s": 30.0,
                "events": [
                    {"start_s": 5.0, "end_s": 10.0, "visual": "pouring water into the pot"},
                    {"start_s": 12.0, "end_s": 20.0, "visual": "stirring the mixture"}
                ],
                "captions": [
                    {"start_s": 5.0, "end_s": 10.0, "text": "Add the water now."}
                ]
            },
            {
                "video_index": 2,
                "duration_s": 40.0,
                "events": [
                    {"start_s": 12.0, "end_s": 20.0, "visual": "pouring water into the pan"}
                ],
                "captions": []
            }
        ]
    })
}

fn fixture() -> SemanticScript {
    validate_script(&fixture_json()).expect("fixture is valid")
}

#[test]
fn valid_document_round_trips() {
    let script = fixture();
    let serialized = script.to_canonical_string();
    let reparsed = validate_script(&serde_json::from_str(&serialized).unwrap()).unwrap();
    assert_eq!(script, reparsed);
    assert_eq!(serialized, reparsed.to_canonical_string());
}

#[test]
fn inverted_event_span_reports_its_path() {
    let mut doc = fixture_json();
    doc["videos"][0]["events"][1]["start_s"] = serde_json::json!(25.0);
    doc["videos"][0]["events"][1]["end_s"] = serde_json::json!(21.0);
    let errs = validate_script(&doc).unwrap_err();
    assert!(
        errs.0.iter().any(|e| e.path == "videos[0].events[1].end_s"),
        "got: {errs}"
    );
}

#[test]
fn gold_task_type_pairs_validate_only_on_the_diagonal() {
    let golds = [
        GoldAnswer::Letter("A".into()),
        GoldAnswer::LetterSet("AC".into()),
        GoldAnswer::Sequence("3->5->4->2->1".into()),
        GoldAnswer::Interval {
            start_s: 1.0,
            end_s: 2.0,
        },
        GoldAnswer::FreeText("anything".into()),
    ];
    let mut valid_pairs = Vec::new();
    for task_type in TaskType::ALL {
        for gold in &golds {
            let mut doc = fixture_json();
            doc["task_type"] = serde_json::json!(task_type.as_str());
            doc["gold"] = serde_json::to_value(gold).unwrap();
            if matches!(task_type, TaskType::SingleChoice | TaskType::MultiSelect) {
                doc["options"] = serde_json::json!({"A": "first", "B": "second", "C": "third"});
            }
            if validate_script(&doc).is_ok() {
                valid_pairs.push((task_type, gold.task_type()));
            }
        }
    }
    let expected: Vec<_> = TaskType::ALL.into_iter().map(|t| (t, t)).collect();
    assert_eq!(valid_pairs, expected);
}

#[test]
fn single_choice_with_letter_set_gold_is_a_mismatch() {
    let mut doc = fixture_json();
    doc["task_type"] = serde_json::json!("single_choice");
    doc["options"] = serde_json::json!({"A": "x", "C": "y"});
    doc["gold"] = serde_json::json!({"kind": "letter_set", "value": "AC"});
    let errs = validate_script(&doc).unwrap_err();
    assert!(errs
        .0
        .iter()
        .any(|e| e.message == "gold/task_type mismatch"));
}

#[test]
fn fewer_than_two_videos_is_rejected() {
    let mut doc = fixture_json();
    doc["videos"].as_array_mut().unwrap().truncate(1);
    let errs = validate_script(&doc).unwrap_err();
    assert!(errs.0.iter().any(|e| e.path == "videos"));
}

#[test]
fn unsorted_events_are_rejected() {
    let mut doc = fixture_json();
    let events = doc["videos"][0]["events"].as_array_mut().unwrap();
    events.swap(0, 1);
    let errs = validate_script(&doc).unwrap_err();
    assert!(errs.0.iter().any(|e| e.path == "videos[0].events"));
}

#[test]
fn all_violations_are_collected_not_just_the_first() {
    let mut doc = fixture_json();
    doc["script_id"] = serde_json::json!("");
    doc["videos"][0]["events"][0]["visual"] = serde_json::json!("");
    let errs = validate_script(&doc).unwrap_err();
    assert!(errs.0.len() >= 2, "expected both violations: {errs}");
}

#[test]
fn slice_disjoint_window_is_empty() {
    let script = fixture();
    let hits = slice(&script, 1, (0.0, 4.0), Channel::Events).unwrap();
    assert!(hits.is_empty());
}

#[test]
fn slice_spanning_window_returns_both_entries() {
    let script = fixture();
    let hits = slice(&script, 1, (8.0, 15.0), Channel::Events).unwrap();
    let texts: Vec<_> = hits.iter().map(|h| h.text).collect();
    assert_eq!(
        texts,
        vec!["pouring water into the pot", "stirring the mixture"]
    );
}

#[test]
fn slice_includes_boundary_touching_entries() {
    let script = fixture();
    let hits = slice(&script, 1, (10.0, 11.9), Channel::Events).unwrap();
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0].text, "pouring water into the pot");
    // An instant query on a boundary still hits.
    let hits = slice(&script, 1, (10.0, 10.0), Channel::Events).unwrap();
    assert_eq!(hits.len(), 1);
}

#[test]
fn slice_unknown_video_errors() {
    let script = fixture();
    assert!(matches!(
        slice(&script, 9, (0.0, 1.0), Channel::Events),
        Err(ScriptError::UnknownVideo(9))
    ));
}

#[test]
fn slice_rejects_inverted_window() {
    let script = fixture();
    assert!(matches!(
        slice(&script, 1, (5.0, 1.0), Channel::Events),
        Err(ScriptError::InvalidWindow(..))
    ));
}

#[test]
fn slice_full_window_returns_every_entry_once() {
    let script = fixture();
    for video in &script.videos {
        let hits = slice(
            &script,
            video.video_index,
            (0.0, video.duration_s),
            Channel::Events,
        )
        .unwrap();
        assert_eq!(hits.len(), video.events.len());
    }
}

proptest! {
    #[test]
    fn slice_matches_brute_force_oracle(seed in 0u64..400, t0 in 0.0f64..160.0, len in 0.0f64..160.0) {
        let script = generate_template_script(
            ScriptFamily::AlignmentInterval, seed, &GeneratorKnobs::default()).unwrap();
        let t1 = t0 + len;
        let video = &script.videos[0];
        let hits = slice(&script, 1, (t0, t1), Channel::Events).unwrap();
        // Oracle: test every entry directly against the clamped window.
        let c0 = t0.clamp(0.0, video.duration_s);
        let c1 = t1.clamp(0.0, video.duration_s);
        let expected: Vec<&str> = video.events.iter()
            .filter(|e| e.start_s <= c1 && e.end_s >= c0)
            .map(|e| e.visual.as_str())
            .collect();
        let got: Vec<&str> = hits.iter().map(|h| h.text).collect();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn slice_is_monotone_in_the_window(seed in 0u64..200, a in 0.0f64..100.0, b in 0.0f64..100.0, grow in 0.0f64..40.0) {
        let script = generate_template_script(
            ScriptFamily::ChoiceBehavior, seed, &GeneratorKnobs::default()).unwrap();
        let (t0, t1) = if a <= b { (a, b) } else { (b, a) };
        let small = slice(&script, 1, (t0, t1), Channel::Events).unwrap();
        let large = slice(&script, 1, ((t0 - grow).max(0.0), t1 + grow), Channel::Events).unwrap();
        for entry in &small {
            prop_assert!(large.iter().any(|e| e == entry));
        }
    }
}

#[test]
fn generated_scripts_validate_for_a_thousand_seeds_per_family() {
    let knobs = GeneratorKnobs::default();
    for family in [
        ScriptFamily::AlignmentInterval,
        ScriptFamily::ChoiceBehavior,
    ] {
        for seed in 0..1000u64 {
            let script = generate_template_script(family, seed, &knobs)
                .unwrap_or_else(|e| panic!("{family:?} seed {seed}: {e}"));
            check_script(&script).unwrap_or_else(|e| panic!("{family:?} seed {seed}: {e}"));
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let knobs = GeneratorKnobs::default();
    for family in [
        ScriptFamily::AlignmentInterval,
        ScriptFamily::ChoiceBehavior,
    ] {
        let a = generate_template_script(family, 7, &knobs).unwrap();
        let b = generate_template_script(family, 7, &knobs).unwrap();
        assert_eq!(a.to_canonical_string(), b.to_canonical_string());
        let c = generate_template_script(family, 8, &knobs).unwrap();
        assert_ne!(a.to_canonical_string(), c.to_canonical_string());
    }
}

#[test]
fn alignment_gold_equals_the_planted_matching_event() {
    let script = generate_template_script(
        ScriptFamily::AlignmentInterval,
        0,
        &GeneratorKnobs::default(),
    )
    .unwrap();
    let GoldAnswer::Interval { start_s, end_s } = script.gold else {
        panic!("alignment gold must be an interval");
    };
    // The question names the reference window in video 1; the event planted
    // there shares its phrase with exactly one event of video 2, whose span
    // is the gold.
    let re = regex::Regex::new(r"between ([0-9.]+)s and ([0-9.]+)s in Video 1").unwrap();
    let caps = re
        .captures(&script.question)
        .expect("question names window");
    let r0: f64 = caps[1].parse().unwrap();
    let r1: f64 = caps[2].parse().unwrap();
    let ref_event = script.videos[0]
        .events
        .iter()
        .find(|e| e.start_s == r0 && e.end_s == r1)
        .expect("reference event exists");
    let matches: Vec<_> = script.videos[1]
        .events
        .iter()
        .filter(|e| e.visual == ref_event.visual)
        .collect();
    assert_eq!(matches.len(), 1, "exactly one functional match in video 2");
    assert_eq!((matches[0].start_s, matches[0].end_s), (start_s, end_s));
}

#[test]
fn choice_behavior_keyword_appears_only_in_gold_videos() {
    // Text-search oracle over all generated events.
    for seed in 0..50u64 {
        let script = generate_template_script(
            ScriptFamily::ChoiceBehavior,
            seed,
            &GeneratorKnobs::default(),
        )
        .unwrap();
        let GoldAnswer::LetterSet(ref letters) = script.gold else {
            panic!("choice gold must be a letter set");
        };
        let phrase_start = script.question.find('"').unwrap() + 1;
        let phrase_end = script.question.rfind('"').unwrap();
        let phrase = &script.question[phrase_start..phrase_end];
        for (vi, video) in script.videos.iter().enumerate() {
            let letter = (b'A' + vi as u8) as char;
            let full = slice(
                &script,
                video.video_index,
                (0.0, video.duration_s),
                Channel::Events,
            )
            .unwrap();
            let contains = full.iter().any(|e| e.text.contains(phrase));
            assert_eq!(
                contains,
                letters.contains(letter),
                "seed {seed} video {} phrase {phrase:?}",
                vi + 1
            );
        }
    }
}

#[test]
fn inconsistent_knobs_error() {
    let knobs = GeneratorKnobs {
        duration_range: (10.0, 20.0),
        events_per_video: 6,
        ..GeneratorKnobs::default()
    };
    let err = generate_template_script(ScriptFamily::ChoiceBehavior, 0, &knobs).unwrap_err();
    assert!(matches!(err, GeneratorError::Inconsistent(_)));
    assert!(err.to_string().contains("duration range too small"));
}

#[test]
fn registry_resolves_families_by_name() {
    let registry = GeneratorRegistry::with_builtins();
    assert!(registry.get("alignment_interval").is_some());
    assert!(registry.get("choice_behavior").is_some());
    assert!(registry.get("nope").is_none());
    assert!(matches!(
        registry.generate("nope", 0, &GeneratorKnobs::default()),
        Err(GeneratorError::UnknownFamily(_))
    ));
}
