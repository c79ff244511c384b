use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn oxyfield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oxyfield")).args(args).output().unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = oxyfield(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

/// Every file below `dir`, keyed by relative path.
fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_is_deterministic_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    let noisy = ["--frames", "2", "--shot-noise", "1.0", "--read-noise", "2.0"];
    for (dir, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        let mut args = vec!["simulate", "--seed", seed, "--out", s(dir)];
        args.extend(noisy);
        let out = oxyfield(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (ta, tb, tc) = (tree(&a), tree(&b), tree(&c));
    assert!(ta.contains_key("manifest.json") && ta.keys().any(|k| k.ends_with(".hsr")));
    assert_eq!(ta, tb);
    assert_ne!(ta, tc, "a different seed must change the noise");
}

#[test]
fn process_wedge_recording_meets_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let rec = tmp.path().join("rec");
    let png = tmp.path().join("png");
    let sim = ok_json(&["--json", "simulate", "--phantom", "wedge", "--frames", "2", "--out", s(&rec)]);
    assert_eq!(sim["events"], 1);
    let r = ok_json(&["process", s(&rec), "--out", s(&png), "--min-accuracy", "0.999", "--json"]);
    let frames = r["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 2);
    for f in frames {
        assert_eq!(f["calibrated"], true);
        assert!(f["accuracy"].as_f64().unwrap() >= 0.999, "{f}");
        assert_eq!(f["false_tissue"], 0);
    }
    for name in ["frame_00000000.png", "frame_00000000_overlay.png", "frame_00000001.png"] {
        let bytes = fs::read(png.join(name)).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }
}

#[test]
fn process_resection_localizes_the_boundary() {
    let tmp = tempfile::tempdir().unwrap();
    let rec = tmp.path().join("rec");
    ok_json(&["--json", "simulate", "--phantom", "resection", "--frames", "3", "--out", s(&rec)]);
    let r = ok_json(&["--json", "process", s(&rec)]);
    assert!(r["max_boundary_error_px"].as_f64().unwrap() <= 1.0, "{r}");
    assert!(r["min_accuracy"].as_f64().unwrap() >= 0.999, "{r}");
}

#[test]
fn process_single_frame_with_roi() {
    let tmp = tempfile::tempdir().unwrap();
    let rec = tmp.path().join("rec");
    ok_json(&["--json", "simulate", "--frames", "1", "--no-roi", "--out", s(&rec)]);
    let frame = rec.join("frames/00000000.hsr");
    let bare = ok_json(&["--json", "process", s(&frame)]);
    assert_eq!(bare["frames"][0]["calibrated"], false);
    let scenario: Value = serde_json::from_slice(&fs::read(rec.join("scenario.json")).unwrap()).unwrap();
    let g = &scenario["gauze"];
    let roi = format!("{},{},{},{}", g["x"], g["y"], g["width"], g["height"]);
    let r = ok_json(&["--json", "process", s(&frame), "--roi", &roi, "--scenario", "wedge"]);
    assert_eq!(r["frames"][0]["calibrated"], true);
    assert!(r["min_accuracy"].as_f64().unwrap() >= 0.999, "{r}");
}

#[test]
fn bench_reports_the_five_stage_rows_and_total() {
    let out = oxyfield(&["bench", "--profile", "s5", "--levels", "36", "--repetitions", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let rows = ["Reflectance Cube", "RGB Image", "Oxy Correlation", "Oxy Image", "Add. Overhead", "Total"];
    let mut last = 0;
    for r in rows {
        let at = text.find(r).unwrap_or_else(|| panic!("missing row {r}:\n{text}"));
        assert!(at >= last, "rows out of order:\n{text}");
        last = at;
    }
    let j = ok_json(&["bench", "--repetitions", "5", "--json"]);
    let names: Vec<&str> = j["stages"].as_array().unwrap().iter().map(|s| s["stage"].as_str().unwrap()).collect();
    assert_eq!(names, rows);
}

#[test]
fn generators_write_loadable_files() {
    let tmp = tempfile::tempdir().unwrap();
    let calib = tmp.path().join("x20.calib");
    let lib = tmp.path().join("lib.json");
    let c = ok_json(&["--json", "calib", "gen", "--profile", "x20", "--distances", "40,56,80", "--out", s(&calib)]);
    assert_eq!(c["profile"], "x20");
    let l = ok_json(&["--json", "library", "gen", "--levels", "12", "--out", s(&lib)]);
    assert_eq!(l["levels"], 12);
    let loaded = oxyfield::calib::load_calibration(&calib).unwrap();
    let fresh =
        oxyfield::calib::synthesize_default_calibration(&oxyfield::calib::CameraProfile::x20(), &[40.0, 56.0, 80.0])
            .unwrap();
    assert_eq!(loaded, fresh);
    assert_eq!(oxyfield::oxy::load_library(&lib).unwrap().len(), 12);
}

#[test]
fn serve_runs_for_the_requested_duration() {
    let out = oxyfield(&["serve", "--bind", "127.0.0.1:0", "--duration", "1", "--fps", "4", "--json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let first: Value = serde_json::Deserializer::from_str(&text).into_iter().next().unwrap().unwrap();
    assert!(first["listening"].as_str().unwrap().ends_with("/stream"));
}

fn error_line(out: &Output) -> String {
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "error must be one line: {err:?}");
    err.trim_end().to_string()
}

#[test]
fn exit_codes_classify_failures() {
    let usage = oxyfield(&["bench", "--profile", "s9"]);
    assert_eq!(usage.status.code(), Some(2));
    assert!(error_line(&usage).starts_with("error[2] usage:"));

    let missing = oxyfield(&["process", "/nonexistent/frame.hsr"]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(error_line(&missing).starts_with("error[3] data:"));

    let tmp = tempfile::tempdir().unwrap();
    let junk = tmp.path().join("junk.hsr");
    fs::write(&junk, b"HSR1 but truncated").unwrap();
    let bad = oxyfield(&["--json", "process", s(&junk)]);
    assert_eq!(bad.status.code(), Some(3));
    let v: Value = serde_json::from_str(&error_line(&bad)).unwrap();
    assert_eq!(v["error"]["code"], 3);
    assert_eq!(v["error"]["kind"], "data");

    let help = oxyfield(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
}
