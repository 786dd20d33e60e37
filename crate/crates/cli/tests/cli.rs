use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use feanet::field_image::{load_image, load_phase};
use serde_json::Value;

fn feanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_feanet")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, extra: &[&str]) {
    let mut args = vec!["generate", "--out", path(dir)];
    args.extend_from_slice(extra);
    let out = feanet(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn biphase(dir: &Path, n: &str) {
    generate(dir, &["--kind", "elasticity", "--n", n, "--E", "0.241e12", "--nu", "0.36", "--E1", "0.2e12", "--nu1", "0.25"]);
}

#[test]
fn generate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        generate(d, &["--kind", "thermal", "--n", "13", "--seed", "7", "--count", "2"]);
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 5);
    for name in names {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn different_seeds_differ() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate(&a, &["--kind", "thermal", "--n", "9", "--seed", "1"]);
    generate(&b, &["--kind", "thermal", "--n", "9", "--seed", "2"]);
    assert_ne!(fs::read(a.join("sample_000_v.fean")).unwrap(), fs::read(b.join("sample_000_v.fean")).unwrap());
}

#[test]
fn memory_report_row() {
    let out = feanet(&["memory-report", "--n", "100"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let row = text.lines().find(|l| l.starts_with("elasticity-2D,")).unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(&fields[1..3], ["3040000", "160288"]);
    assert!(fields[3].starts_with("18.96"), "{row}");
}

#[test]
fn infer_reports_offline_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let run = tmp.path().join("run");
    generate(&data, &["--kind", "elasticity", "--n", "11", "--seed", "3"]);
    let out = feanet(&["infer", "--dataset", path(&data), "--depth", "4000", "--out", path(&run), "--json"]);
    assert_eq!(code(&out), 0);
    let reported = json(&out)["result"]["error"].as_f64().unwrap();
    let u = load_image(run.join("u.fean")).unwrap();
    let reference = load_image(data.join("sample_000_u.fean")).unwrap();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 1..10 {
        for j in 1..10 {
            for c in 0..2 {
                num += (u.get(i, j, c) - reference.get(i, j, c)).powi(2);
                den += reference.get(i, j, c).powi(2);
            }
        }
    }
    let offline = (num / den).sqrt();
    assert!((reported - offline).abs() <= 1e-12 * offline.max(1e-300), "{reported} vs {offline}");
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(history.starts_with("depth,residual,error"));
    assert_eq!(history.lines().count(), 4002);
}

#[test]
fn divergence_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), &["--kind", "thermal", "--n", "13"]);
    let out = feanet(&["infer", "--dataset", path(tmp.path()), "--omega", "1.95", "--depth", "3000", "--json"]);
    assert_eq!(code(&out), 2);
    let v = json(&out);
    assert_eq!(v["status"], "error");
    assert!(v["error"].as_str().unwrap().contains("diverged"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&feanet(&["bogus"])), 1);
    assert_eq!(code(&feanet(&["memory-report", "--no-such-flag"])), 1);
    assert_eq!(code(&feanet(&["--help"])), 0);
    assert_eq!(code(&feanet(&["--version"])), 0);
    assert_eq!(code(&feanet(&["learn-props", "--dataset", "/nonexistent/manifest.json"])), 1);
}

#[test]
fn collinear_loading_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), &["--kind", "elasticity", "--n", "12", "--collinear", "2"]);
    let out = feanet(&["learn-filter", "--dataset", path(tmp.path())]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("rank deficient"));
}

#[test]
fn learn_filter_recovers_kernel() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    generate(&data, &["--kind", "thermoelasticity", "--n", "12", "--seed", "5"]);
    let out = feanet(&["learn-filter", "--dataset", path(&data), "--out", path(&tmp.path().join("f")), "--json"]);
    assert_eq!(code(&out), 0);
    for block in json(&out)["result"]["reference"]["blocks"].as_array().unwrap() {
        if let Some(e) = block["relative_error"].as_f64() {
            assert!(e < 1e-6, "{block}");
        }
    }
    assert!(tmp.path().join("f/kernel.json").exists());
    assert!(tmp.path().join("f/loss_history.csv").exists());
}

#[test]
fn config_precedence_and_show_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"kind": "thermal", "n": 9, "count": 2}"#).unwrap();
    let out = feanet(&["generate", "--config", path(&cfg), "--n", "11", "--show-config", "--json"]);
    assert_eq!(code(&out), 0);
    let c = &json(&out)["result"]["config"];
    assert_eq!(c["n"], 11);
    assert_eq!(c["count"], 2);
    assert_eq!(c["kind"], "thermal");

    let defaults = json(&feanet(&["learn-phase", "--dataset", "unused", "--show-config", "--json"]));
    assert_eq!(defaults["result"]["config"]["options"]["learning_rate"], 0.01);

    fs::write(&cfg, r#"{"kind": "thermal", "typo": 1}"#).unwrap();
    assert_eq!(code(&feanet(&["generate", "--config", path(&cfg), "--out", path(tmp.path())])), 1);
}

#[test]
fn thread_count_from_environment() {
    let out = Command::new(env!("CARGO_BIN_EXE_feanet"))
        .args(["memory-report", "--json"])
        .env("FEANET_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert_eq!(json(&out)["schema_version"], 1);
}

#[test]
fn learners_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    biphase(&data, "13");
    let truth = load_phase(data.join("phase.fean")).unwrap();

    let out = feanet(&["learn-phase", "--dataset", path(&data), "--out", path(&tmp.path().join("p")), "--json"]);
    assert_eq!(code(&out), 0);
    assert_eq!(json(&out)["result"]["phase_error"]["binarized"], 0.0);
    assert_eq!(load_phase(tmp.path().join("p/phase_binarized.fean")).unwrap(), truth);

    let out = feanet(&["learn-props", "--dataset", path(&data), "--json", "--seed", "4"]);
    assert_eq!(code(&out), 0);
    for (k, e) in json(&out)["result"]["relative_error"].as_object().unwrap() {
        assert!(e.as_f64().unwrap() < 1e-2, "{k} {e}");
    }

    let out = feanet(&["learn-joint", "--dataset", path(&data), "--json", "--seed", "1"]);
    assert_eq!(code(&out), 0);
    let r = &json(&out)["result"]["reference"];
    assert_eq!(r["phase_error"], 0.0);
    assert!(r["relative_error"]["E0"].as_f64().unwrap() < 3e-2);
    assert!(r["relative_error"]["E1"].as_f64().unwrap() < 3e-2);
}

#[test]
fn export_formats() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), &["--kind", "elasticity", "--n", "5"]);
    let csv = tmp.path().join("u.csv");
    let input = tmp.path().join("sample_000_u.fean");
    assert_eq!(code(&feanet(&["export", "--input", path(&input), "--format", "csv", "--out", path(&csv)])), 0);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("i,j,x,y"));
    assert_eq!(text.lines().count(), 26);
    let pgm = tmp.path().join("u.pgm");
    let args = ["export", "--input", path(&input), "--format", "pgm", "--channel", "1", "--out", path(&pgm)];
    assert_eq!(code(&feanet(&args)), 0);
    assert!(fs::read(&pgm).unwrap().starts_with(b"P5\n5 5\n255\n"));
    let bad = ["export", "--input", path(&input), "--format", "pgm", "--channel", "2", "--out", path(&pgm)];
    assert_eq!(code(&feanet(&bad)), 1);
}

#[test]
fn kernel_csv_matches_closed_form() {
    let out = feanet(&["kernel", "--kind", "thermal", "--kappa", "3"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let weights: Vec<f64> = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(weights, [1.0, 1.0, 1.0, 1.0, -8.0, 1.0, 1.0, 1.0, 1.0]);
}
