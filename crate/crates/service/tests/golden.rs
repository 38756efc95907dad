//! Conformance suite: request scripts in `tests/golden` run through the
//! one-shot mode must reproduce the stored transcripts, and every stored
//! message must survive a decode/encode round trip unchanged. Set
//! `BRONCHOSTEER_BLESS=1` to rewrite the transcripts.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use bronchosteer_service::{run_oneshot, Envelope, Event, Request};

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn scripts() -> Vec<PathBuf> {
    let mut v: Vec<_> = fs::read_dir(golden_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(".requests.ndjson"))
        .collect();
    v.sort();
    v
}

fn transcript_path(script: &Path) -> PathBuf {
    PathBuf::from(script.to_string_lossy().replace(".requests.", ".transcript."))
}

fn lines(text: &str) -> Vec<Value> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Structural equality with a relative tolerance on numbers, so transcripts
/// survive last-bit differences in platform math libraries.
fn close(a: &Value, b: &Value, path: &str) -> Result<(), String> {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            if (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0) {
                Ok(())
            } else {
                Err(format!("{path}: {x} != {y}"))
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => x
            .iter()
            .zip(y)
            .enumerate()
            .try_for_each(|(i, (x, y))| close(x, y, &format!("{path}[{i}]"))),
        (Value::Object(x), Value::Object(y)) if x.len() == y.len() => x.iter().try_for_each(|(k, v)| match y.get(k) {
            Some(w) => close(v, w, &format!("{path}.{k}")),
            None => Err(format!("{path}: missing key {k}")),
        }),
        _ if a == b => Ok(()),
        _ => Err(format!("{path}: {a} != {b}")),
    }
}

fn run(script: &Path) -> String {
    let input = fs::read(script).unwrap();
    let mut out = Vec::new();
    run_oneshot(&input[..], &mut out).unwrap();
    String::from_utf8(out).unwrap()
}

#[test]
fn oneshot_runs_reproduce_the_transcripts() {
    let bless = std::env::var_os("BRONCHOSTEER_BLESS").is_some();
    let scripts = scripts();
    assert!(scripts.len() >= 2);
    for script in scripts {
        let produced = run(&script);
        let stored = transcript_path(&script);
        if bless {
            fs::write(&stored, &produced).unwrap();
            continue;
        }
        let expected = lines(&fs::read_to_string(&stored).unwrap());
        let got = lines(&produced);
        assert_eq!(got.len(), expected.len(), "{}", script.display());
        for (i, (g, e)) in got.iter().zip(&expected).enumerate() {
            if let Err(diff) = close(g, e, "") {
                panic!("{} line {}: {diff}", stored.display(), i + 1);
            }
        }
    }
}

#[test]
fn stored_events_round_trip_losslessly() {
    let mut seen = BTreeSet::new();
    let mut files: Vec<_> = scripts().iter().map(|s| transcript_path(s)).collect();
    files.push(golden_dir().join("catalog.ndjson"));
    for file in files {
        for line in fs::read_to_string(&file).unwrap().lines() {
            let original: Value = serde_json::from_str(line).unwrap();
            let event: Envelope<Event> =
                serde_json::from_str(line).unwrap_or_else(|e| panic!("{}: {e}: {line}", file.display()));
            assert_eq!(serde_json::to_value(&event).unwrap(), original, "{}", file.display());
            let again: Envelope<Event> = serde_json::from_str(&event.to_line()).unwrap();
            assert_eq!(again, event);
            seen.insert(original["type"].as_str().unwrap().to_string());
        }
    }
    let all = [
        "session",
        "scene_loaded",
        "stage",
        "plans",
        "plan_selected",
        "aimed",
        "alignment",
        "autonomous",
        "hold_requested",
        "tick",
        "segment",
        "done",
        "record",
        "snapshot",
        "error",
    ];
    for t in all {
        assert!(seen.contains(t), "no stored example of `{t}` events");
    }
}

#[test]
fn request_scripts_parse_where_well_formed() {
    for script in scripts() {
        for line in fs::read_to_string(&script).unwrap().lines() {
            let Ok(value) = serde_json::from_str::<Value>(line) else {
                continue;
            };
            if value["v"] != 1 {
                continue;
            }
            if let Ok(req) = serde_json::from_value::<Envelope<Request>>(value) {
                let again: Envelope<Request> = serde_json::from_str(&req.to_line()).unwrap();
                assert_eq!(again, req);
            }
        }
    }
}
