//! Regenerates the derived fixtures: the scripted pouring trace and the
//! golden event timeline recognized from it. The hand-written fixtures
//! (household, bookshelf, restructure, the two diff states) are the source
//! of truth and are not touched.
//!
//! The trace scripts a two-handed tabletop session at 30 Hz: the left hand
//! closes the milk carton, reopens it, carries it over the white bowl and
//! pours, then sets it down; the right hand closes the carton at its new
//! spot and finally rests against the ground. Hand paths are piecewise
//! linear between keyframes, so every geometric threshold crossing happens
//! at a predictable time.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use concept_hierarchy::environment::{EnvironmentState, DEFAULT_HISTORY_DEPTH};
use concept_hierarchy::io::{load_hierarchy, load_trace};
use concept_hierarchy::recognizer::{export_timeline, ExportFormat, Recognizer, DEFAULT_DEBOUNCE};

const FRAMES: usize = 600;
const RATE: f64 = 30.0;

/// Piecewise-linear path: position at `t` interpolates between keyframes.
struct Path3 {
    keys: Vec<(f64, [f64; 3])>,
}

impl Path3 {
    fn new(keys: &[(f64, [f64; 3])]) -> Path3 {
        Path3 { keys: keys.to_vec() }
    }

    fn at(&self, t: f64) -> [f64; 3] {
        let mut prev = self.keys[0];
        for &key in &self.keys {
            if t < key.0 {
                let span = key.0 - prev.0;
                if span <= 0.0 {
                    return key.1;
                }
                let s = (t - prev.0) / span;
                return [
                    prev.1[0] + (key.1[0] - prev.1[0]) * s,
                    prev.1[1] + (key.1[1] - prev.1[1]) * s,
                    prev.1[2] + (key.1[2] - prev.1[2]) * s,
                ];
            }
            prev = key;
        }
        prev.1
    }
}

fn pose_json(position: [f64; 3]) -> serde_json::Value {
    serde_json::json!([1.0, 0.0, 0.0, 0.0, position[0], position[1], position[2]])
}

fn in_windows(t: f64, windows: &[(f64, f64)]) -> bool {
    windows.iter().any(|&(a, b)| t >= a && t <= b)
}

fn build_trace() -> Vec<String> {
    let rest_left = [0.60, -0.40, 0.90];
    let rest_right = [0.65, 0.40, 0.90];
    let carton_start = [0.50, 0.00, 0.80];
    let near_start = [0.50, 0.02, 0.80];
    let hover = [0.50, -0.10, 0.95];
    let grip_start = [0.50, -0.06, 0.80];
    let pour_carton = [-0.20, 0.30, 0.95];
    let pour_hand = [-0.20, 0.24, 0.95];
    let rest_carton = [0.15, 0.55, 0.80];
    let rest_grip = [0.15, 0.49, 0.80];
    let near_rest = [0.15, 0.57, 0.80];
    let ground_touch = [0.40, 0.40, 0.10];

    let left = Path3::new(&[
        (0.0, rest_left),
        (1.5, rest_left),
        (2.0, near_start),
        (4.0, near_start),
        (4.25, hover),
        (4.5, near_start),
        (6.5, near_start),
        (6.9, hover),
        (7.4, grip_start),
        (8.2, pour_hand),
        (10.8, pour_hand),
        (11.6, rest_grip),
        (12.4, rest_grip),
        (13.0, rest_left),
        (20.0, rest_left),
    ]);
    let right = Path3::new(&[
        (0.0, rest_right),
        (13.0, rest_right),
        (13.5, near_rest),
        (16.0, near_rest),
        (16.5, ground_touch),
        (18.0, ground_touch),
        (18.5, rest_right),
        (20.0, rest_right),
    ]);
    let carton = Path3::new(&[
        (0.0, carton_start),
        (7.4, carton_start),
        (8.2, pour_carton),
        (10.8, pour_carton),
        (11.6, rest_carton),
        (20.0, rest_carton),
    ]);

    let left_touches_carton = [(2.0, 4.0), (4.5, 6.5), (7.4, 12.4)];
    let right_touches_carton = [(13.5, 16.0)];
    let right_touches_ground = [(16.5, 18.0)];

    let statics: [(&str, [f64; 3]); 4] = [
        ("CerealBoxInstance", [0.55, -0.35, 0.80]),
        ("WhiteBowlInstance", [-0.20, 0.30, 0.80]),
        ("GreyBowlInstance", [-0.60, 0.10, 0.80]),
        ("PersonInstance", [0.80, 0.00, 0.00]),
    ];

    let mut lines = Vec::with_capacity(FRAMES);
    for i in 0..FRAMES {
        let t = i as f64 / RATE;
        let mut entities = serde_json::Map::new();
        entities.insert("MilkBoxInstance".to_string(), pose_json(carton.at(t)));
        for (name, position) in statics {
            entities.insert(name.to_string(), pose_json(position));
        }
        let mut hands = serde_json::Map::new();
        hands.insert("LeftHandInstance".to_string(), serde_json::json!(left.at(t)));
        hands.insert("RightHandInstance".to_string(), serde_json::json!(right.at(t)));
        let mut contacts: Vec<serde_json::Value> = Vec::new();
        if in_windows(t, &left_touches_carton) {
            contacts.push(serde_json::json!(["LeftHandInstance", "MilkBoxInstance"]));
        }
        if in_windows(t, &right_touches_carton) {
            contacts.push(serde_json::json!(["RightHandInstance", "MilkBoxInstance"]));
        }
        if in_windows(t, &right_touches_ground) {
            contacts.push(serde_json::json!(["RightHandInstance", "GroundInstance"]));
        }
        let frame = serde_json::json!({
            "timestamp": t,
            "entities": entities,
            "hands": hands,
            "contacts": contacts,
        });
        lines.push(frame.to_string());
    }
    lines
}

fn recognize(fixtures: &Path) -> Result<String, String> {
    let (mut graph, _) = load_hierarchy(&fixtures.join("household.json"), true)
        .map_err(|e| format!("household fixture: {e}"))?;
    let frames =
        load_trace(&fixtures.join("pouring_trace.jsonl")).map_err(|e| format!("trace: {e}"))?;
    let mut env = EnvironmentState::seeded_with_capacity(&graph, DEFAULT_HISTORY_DEPTH);
    let mut recognizer = Recognizer::with_debounce(DEFAULT_DEBOUNCE);
    for frame in frames {
        recognizer.step(&mut graph, &mut env, frame).map_err(|e| format!("step: {e}"))?;
    }
    recognizer.finish(&mut graph, &mut env);
    for warning in env.warnings.iter().chain(recognizer.warnings.iter()) {
        eprintln!("warning: {warning}");
    }
    let mut per_gripper: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for event in &recognizer.timeline().events {
        per_gripper.entry(event.gripper.as_str()).or_default().push(format!(
            "{} [{:.2}, {:.2}] {:?}",
            event.skill, event.t_start, event.t_end, event.outcome
        ));
    }
    for (gripper, events) in per_gripper {
        eprintln!("{gripper}:");
        for line in events {
            eprintln!("  {line}");
        }
    }
    Ok(export_timeline(recognizer.timeline(), ExportFormat::Json))
}

fn main() {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let trace_path = fixtures.join("pouring_trace.jsonl");
    let trace = build_trace().join("\n") + "\n";
    if let Err(e) = std::fs::write(&trace_path, trace) {
        eprintln!("cannot write {}: {e}", trace_path.display());
        std::process::exit(2);
    }
    eprintln!("wrote {} ({FRAMES} frames)", trace_path.display());
    match recognize(&fixtures) {
        Ok(timeline) => {
            let golden = fixtures.join("golden_events.json");
            if let Err(e) = std::fs::write(&golden, timeline) {
                eprintln!("cannot write {}: {e}", golden.display());
                std::process::exit(2);
            }
            eprintln!("wrote {}", golden.display());
        }
        Err(e) => {
            eprintln!("recognition failed: {e}");
            std::process::exit(2);
        }
    }
}
