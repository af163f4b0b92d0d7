//! End-to-end checks of the command-line interface: every file the CLI
//! writes must be readable by the matching loader, outputs must be
//! deterministic under fixed seeds, and failures must use the documented
//! exit codes.

use std::path::Path;
use std::process::{Command, Output};

use raypath::geometry::{load_scene, Vec3};
use raypath::trainpipe::parse_metrics_csv;

fn raypath(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_raypath"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn raypath")
}

fn stdout_str(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf8 stdout")
}

#[test]
fn gen_scene_round_trips_through_loader() {
    let dir = tempfile::tempdir().unwrap();
    let out = raypath(
        &["gen-scene", "--seed", "11", "--out", "scene.json", "--preset", "desk"],
        dir.path(),
    );
    assert!(out.status.success(), "{out:?}");
    let scene = load_scene(dir.path().join("scene.json")).unwrap();
    assert!(scene.num_facets() >= 20);

    // Same seed, same bytes.
    let out2 = raypath(
        &["gen-scene", "--seed", "11", "--out", "scene2.json", "--preset", "desk"],
        dir.path(),
    );
    assert!(out2.status.success());
    let a = std::fs::read(dir.path().join("scene.json")).unwrap();
    let b = std::fs::read(dir.path().join("scene2.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn enumerate_3_2_prints_six_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = raypath(&["enumerate", "--n", "3", "--k", "2"], dir.path());
    assert!(out.status.success());
    let text = stdout_str(&out);
    let lines: Vec<&str> = text.lines().map(str::trim).collect();
    assert_eq!(
        lines,
        vec!["[0,1]", "[0,2]", "[1,0]", "[1,2]", "[2,0]", "[2,1]"]
    );
}

fn write_mirror_scene(path: &Path) {
    let scene = raypath::geometry::Scene::new(
        Vec3::new(0.0, 0.0, 1.0),
        Vec3::new(2.0, 0.0, 1.0),
        vec![[
            Vec3::new(-100.0, -100.0, 0.0),
            Vec3::new(300.0, -100.0, 0.0),
            Vec3::new(-100.0, 300.0, 0.0),
        ]],
    )
    .unwrap();
    raypath::geometry::save_scene(path, &scene).unwrap();
}

#[test]
fn trace_analytic_mirror() {
    let dir = tempfile::tempdir().unwrap();
    write_mirror_scene(&dir.path().join("mirror.json"));
    let out = raypath(
        &["trace", "--scene", "mirror.json", "--candidate", "0"],
        dir.path(),
    );
    assert!(out.status.success());
    let value: serde_json::Value = serde_json::from_str(stdout_str(&out).trim()).unwrap();
    assert_eq!(value["valid"], serde_json::json!(true));
    assert_eq!(value["failure"], serde_json::json!("none"));
    let p = &value["points"][1];
    assert!((p[0].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!(p[1].as_f64().unwrap().abs() < 1e-9);
    assert!(p[2].as_f64().unwrap().abs() < 1e-9);
}

#[test]
fn oracle_output_matches_trace_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    write_mirror_scene(&dir.path().join("mirror.json"));
    let out = raypath(
        &["oracle", "--scene", "mirror.json", "--k", "1", "--out", "valid.jsonl"],
        dir.path(),
    );
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.path().join("valid.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1);
    let value: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(value["candidate"], serde_json::json!([0]));
}

#[test]
fn baseline_reports_exact_ratio() {
    let dir = tempfile::tempdir().unwrap();
    write_mirror_scene(&dir.path().join("mirror.json"));
    let out = raypath(
        &[
            "baseline", "--scene", "mirror.json", "--k", "1", "--samples", "50", "--seed", "3",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let value: serde_json::Value = serde_json::from_str(stdout_str(&out).trim()).unwrap();
    // One facet, one valid path: the uniform sampler always hits it.
    assert_eq!(value["accuracy"], serde_json::json!(1.0));
    assert_eq!(value["exact_uniform_accuracy"], serde_json::json!(1.0));
}

fn tiny_config_json(out_dir: &str) -> String {
    format!(
        r#"{{
  "k": 1,
  "model": {{ "d": 8, "flow_hidden": 16, "logit_clamp": 30.0, "loss": "raw" }},
  "steps": 10,
  "batch": 4,
  "lr": 0.001,
  "eval_every": 5,
  "eval_scenes": 2,
  "eval_samples_per_scene": 5,
  "scene_gen": {{
    "street_width": [9.0, 12.0],
    "street_length": [16.0, 24.0],
    "buildings_per_side": [1, 1],
    "building_depth": [4.0, 6.0],
    "building_height": [7.0, 10.0],
    "r_max": 2,
    "min_separation": 1.0,
    "max_placement_retries": 100
  }},
  "out_dir": "{out_dir}"
}}"#
    )
}

#[test]
fn train_eval_export_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), tiny_config_json("run")).unwrap();
    let out = raypath(&["train", "--config", "cfg.json"], dir.path());
    assert!(out.status.success(), "{out:?}");

    // The metrics file parses, and export re-emits it both ways.
    let rows = parse_metrics_csv(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(rows.len(), 3); // steps 0, 5, final 10

    let csv = raypath(
        &["export-metrics", "--log", "run/metrics.csv", "--format", "csv"],
        dir.path(),
    );
    assert!(csv.status.success());
    assert!(stdout_str(&csv).starts_with("step,loss,accuracy,hit_rate"));

    let json = raypath(
        &["export-metrics", "--log", "run/metrics.csv", "--format", "json"],
        dir.path(),
    );
    assert!(json.status.success());
    let parsed: serde_json::Value = serde_json::from_str(stdout_str(&json).trim()).unwrap();
    assert_eq!(parsed.as_array().unwrap().len(), 3);
    assert!(parsed[0]["loss"].is_null()); // pre-training row

    // Evaluating the checkpoint twice with the same seeds is byte-identical.
    let eval_args = [
        "eval",
        "--ckpt",
        "run/ckpt_final.json",
        "--scenes-seed",
        "9",
        "--num",
        "3",
        "--samples",
        "4",
    ];
    let e1 = raypath(&eval_args, dir.path());
    let e2 = raypath(&eval_args, dir.path());
    assert!(e1.status.success());
    assert_eq!(e1.stdout, e2.stdout);

    // Curriculum hand-off through the CLI: train K=2 from the K=1 checkpoint.
    let cfg2 = tiny_config_json("run2").replace("\"k\": 1", "\"k\": 2");
    std::fs::write(dir.path().join("cfg2.json"), cfg2).unwrap();
    let out2 = raypath(
        &["train", "--config", "cfg2.json", "--init", "run/ckpt_final.json"],
        dir.path(),
    );
    assert!(out2.status.success(), "{out2:?}");
}

#[test]
fn threads_env_var_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_raypath"))
        .args(["enumerate", "--n", "3", "--k", "1"])
        .env("RAYPATH_THREADS", "1")
        .current_dir(dir.path())
        .output()
        .expect("spawn raypath");
    assert!(out.status.success());
    assert_eq!(stdout_str(&out).lines().count(), 3);

    // And the flag equivalent.
    let out = raypath(&["--threads", "1", "enumerate", "--n", "3", "--k", "1"], dir.path());
    assert!(out.status.success());
}

#[test]
fn exit_codes_are_documented_values() {
    let dir = tempfile::tempdir().unwrap();

    // 2: usage error (unknown subcommand / flag), from clap.
    let out = raypath(&["no-such-command"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    // 3: unreadable file.
    let out = raypath(
        &["trace", "--scene", "missing.json", "--candidate", "0"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error kind=io msg="), "{err}");

    // 4: invalid input (consecutive repeat in the candidate).
    write_mirror_scene(&dir.path().join("mirror.json"));
    let out = raypath(
        &["trace", "--scene", "mirror.json", "--candidate", "0,0"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(4));

    // 4: config validation failure.
    std::fs::write(
        dir.path().join("bad.json"),
        tiny_config_json("x").replace("\"batch\": 4", "\"batch\": 0"),
    )
    .unwrap();
    let out = raypath(&["train", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(4));

    // 5: runtime limit (oracle cap exceeded).
    let out = raypath(
        &["oracle", "--scene", "mirror.json", "--k", "1", "--cap", "0"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(5));
}
