// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use line_core::engine::{explain_neuron, ExplanationResult, StepKind};
use line_core::proposer::ForbiddenPolicy;
use line_core::replay::ReplayFixture;
use line_core::Origin;

fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn replay() -> ExplanationResult {
    let f = ReplayFixture::load(&fixture_path("replay_avgpool_1255.json")).unwrap();
    let p = f
        .providers(f.config.max_retries, ForbiddenPolicy::Accept)
        .unwrap();
    explain_neuron(&f.config, &f.neurons[0].neuron, p.providers()).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12 && format!("{a:.2}") == format!("{b:.2}")
}

#[test]
fn recorded_entries_reproduced() {
    let r = replay();
    let expected = [
        ("pool table", 0.96, 0, Origin::Predefined),
        ("barbell", 0.67, 0, Origin::Predefined),
        ("gym", 1.91, 4, Origin::Generated),
        ("billiards", 0.71, 5, Origin::Generated),
        ("strength training", 2.08, 6, Origin::Generated),
        ("weightlifting", 1.47, 7, Origin::Generated),
        ("physical exercise", 1.33, 11, Origin::Summary),
    ];
    for (label, score, step, origin) in expected {
        let e = r
            .scoreboard
            .entries()
            .iter()
            .find(|e| e.label.as_str() == label)
            .unwrap();
        assert!(close(e.score, score), "{label}: {}", e.score);
        assert_eq!((e.step, e.origin), (step, origin), "{label}");
    }
    assert_eq!(r.best_label.as_str(), "strength training");
    assert!(close(r.best_score, 2.08));
    assert_eq!(r.origin, Origin::Generated);
}

#[test]
fn initial_board_matches_recorded_start() {
    let r = replay();
    let init: Vec<_> = r
        .scoreboard
        .entries()
        .iter()
        .filter(|e| e.step == 0)
        .collect();
    let expected = [
        ("pool table", 0.96),
        ("barbell", 0.67),
        ("exercise mat", 0.59),
        ("dumbbell", 0.46),
        ("parallel bars", 0.35),
        ("leonberg", 0.31),
        ("chocolate sauce", 0.18),
        ("pier", 0.24),
        ("christmas stocking", 0.23),
        ("beer glass", 0.11),
    ];
    assert_eq!(init.len(), expected.len());
    for (e, (label, score)) in init.iter().zip(expected) {
        assert_eq!(e.label.as_str(), label);
        assert!(close(e.score, score));
    }
}

#[test]
fn loop_steps_and_repeats() {
    let r = replay();
    let recs = &r.trace.records;
    assert_eq!(recs.len(), 12);
    assert_eq!(recs[0].kind, StepKind::Init);
    let loop_scores = [
        0.59, 0.11, 0.08, 1.91, 0.71, 2.08, 1.47, 1.30, 1.47, 0.24, 1.33,
    ];
    for (rec, s) in recs[1..].iter().zip(loop_scores) {
        assert!(rec.error.is_none(), "step {}: {:?}", rec.step, rec.error);
        assert!(close(rec.score.unwrap(), s), "step {}", rec.step);
    }
    // step 1 repeats a predefined concept; step 9 repeats step 7
    assert!(recs[1].duplicate && !recs[1].cache_hit);
    assert!(recs[9].duplicate && recs[9].cache_hit);
    assert_eq!(recs[9].concept.as_ref().unwrap().as_str(), "weightlifting");
    assert_eq!(
        r.scoreboard
            .get(&recs[9].concept.clone().unwrap())
            .unwrap()
            .step,
        7
    );
    assert_eq!(recs[11].kind, StepKind::Summary);
    assert_eq!(r.trace.cumulative_best.len(), 12);
    assert!(r.trace.cumulative_best.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn scoreboard_json_is_stable_and_matches_golden() {
    let a = replay().scoreboard.to_json();
    let b = replay().scoreboard.to_json();
    assert_eq!(a, b);
    let golden =
        std::fs::read_to_string(fixture_path("replay_avgpool_1255.scoreboard.json")).unwrap();
    assert_eq!(a + "\n", golden);
    assert_eq!(replay().to_json(), replay().to_json());
}
