//! Black-box checks of the vlk binary: exit codes, stream separation, the
//! report envelope, and determinism of repeated invocations. Volumes stay
//! small; the binary itself is a debug build.

use std::path::Path;
use std::process::{Command, Output};

use vlk_core::{write_volume, Volume};

fn vlk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlk"))
        .args(args)
        .output()
        .expect("spawn vlk")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not json ({e}): {}",
            String::from_utf8_lossy(&out.stdout)
        )
    })
}

fn write_label_volume(stem: &Path, dims: [usize; 3], fill: u8) {
    let n = dims[0] * dims[1] * dims[2];
    let v = Volume::from_u8(dims, [0.6, 0.3, 0.3], vec![fill; n]).unwrap();
    write_volume(&v, stem).unwrap();
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = vlk(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
}

#[test]
fn help_and_version_exit_zero() {
    for flag in ["--help", "--version"] {
        let out = vlk(&[flag]);
        assert_eq!(out.status.code(), Some(0), "{flag}");
    }
    let out = vlk(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["phantom", "tta", "eval", "appendix-a", "agree", "pipeline"] {
        assert!(text.contains(sub), "help does not mention {sub}");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = vlk(&["eval", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_rejects_mismatched_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    write_label_volume(&a, [4, 4, 4], 1);
    write_label_volume(&b, [4, 4, 5], 1);
    let out = vlk(&["eval", "--pred", a.to_str().unwrap(), "--gt", b.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("shape mismatch"), "stderr: {err}");
}

#[test]
fn missing_input_is_a_data_error() {
    let out = vlk(&["eval", "--pred", "/nonexistent/x", "--gt", "/nonexistent/y"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_thread_cap_is_a_data_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_vlk"))
        .args(["--help"])
        .env("VLK_THREADS", "many")
        .output()
        .unwrap();
    // --help short-circuits before env handling, so use a real subcommand
    assert_eq!(out.status.code(), Some(0));
    let out = Command::new(env!("CARGO_BIN_EXE_vlk"))
        .args(["eval", "--pred", "/x", "--gt", "/y"])
        .env("VLK_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("VLK_THREADS"));
}

/// phantom -> make-labels -> tta -> eval on a small cube; checks the JSON
/// envelope, config echo, stream separation, and that repeated identical
/// invocations produce byte-identical reports.
#[test]
fn phantom_to_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();

    let out = vlk(&[
        "phantom", "--dims", "64", "--seed", "7", "--out-prefix", &p("case"),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_eq!(report["tool"], "vlk");
    assert_eq!(report["command"], "phantom");
    assert_eq!(report["config"]["seed"], 7);
    assert_eq!(report["config"]["dims"], serde_json::json!([64, 64, 64]));
    assert!(report["result"]["foreground_voxels"].as_u64().unwrap() > 0);
    assert!(!out.stderr.is_empty(), "expected a human summary on stderr");

    let out = vlk(&[
        "make-labels",
        "--seg", &p("case_seg"),
        "--centerlines", &p("case_centerlines.json"),
        "--out", &p("gt"),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let counts = stdout_json(&out)["result"]["voxels_per_class"].clone();
    assert!(counts["BA"].as_u64().unwrap() > 0);

    let tta_args = [
        "tta",
        "--seg", &p("case_seg"),
        "--predictor", "oracle",
        "--centerlines", &p("case_centerlines.json"),
        "--k", "2",
        "--seed", "11",
        "--out-labels", &p("consensus"),
        "--out-uncertainty", &p("spread"),
    ];
    let first = vlk(&tta_args);
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    let second = vlk(&tta_args);
    assert_eq!(first.stdout, second.stdout, "reports differ between reruns");

    let out = vlk(&["eval", "--pred", &p("consensus"), "--gt", &p("gt")]);
    assert_eq!(out.status.code(), Some(0));
    let eval = stdout_json(&out);
    let dice = eval["result"]["mean_vessel_dice"].as_f64().unwrap();
    assert!(dice > 0.99, "oracle consensus dice {dice}");
    // vessels only by default; background appears with --per-class
    assert!(eval["result"]["per_class"]["BA"].is_object());
    assert!(eval["result"]["per_class"]["background"].is_null());
    let out = vlk(&["eval", "--pred", &p("consensus"), "--gt", &p("gt"), "--per-class"]);
    assert!(stdout_json(&out)["result"]["per_class"]["background"].is_object());
}

#[test]
fn tta_oracle_requires_centerlines() {
    let dir = tempfile::tempdir().unwrap();
    let seg = dir.path().join("seg");
    write_label_volume(&seg, [4, 4, 4], 1);
    let out = vlk(&[
        "tta",
        "--seg", seg.to_str().unwrap(),
        "--predictor", "oracle",
        "--k", "2",
        "--seed", "1",
        "--out-labels", dir.path().join("l").to_str().unwrap(),
        "--out-uncertainty", dir.path().join("u").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--centerlines"));
}

#[test]
fn agree_reports_per_vessel_and_writes_scatter() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("pairs.csv");
    std::fs::write(
        &csv_path,
        "vessel,manual,auto\n\
         BA,40.1,40.3\nBA,38.2,38.0\nBA,41.0,41.2\n\
         LICA,55.0,54.8\nLICA,56.1,56.4\nLICA,54.2,54.2\n",
    )
    .unwrap();
    let scatter = dir.path().join("scatter.csv");
    let out = vlk(&[
        "agree",
        "--pairs", csv_path.to_str().unwrap(),
        "--scatter-out", scatter.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let report = stdout_json(&out);
    assert_eq!(report["result"]["vessels"]["BA"]["n"], 3);
    assert_eq!(report["result"]["overall"]["n"], 6);
    assert!(report["result"]["vessels"]["BA"]["wilcoxon_p"].as_f64().unwrap() > 0.05);
    let scatter_text = std::fs::read_to_string(&scatter).unwrap();
    assert!(scatter_text.starts_with("vessel,pair_mean,difference"));
    assert_eq!(scatter_text.lines().count(), 7);
}

#[test]
fn agree_percent_mode_fails_on_zero_pair_mean() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("pairs.csv");
    std::fs::write(&csv_path, "vessel,manual,auto\nBA,1.0,-1.0\nBA,2.0,3.0\n").unwrap();
    let ok = vlk(&["agree", "--pairs", csv_path.to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(stdout_json(&ok)["result"]["vessels"]["BA"]["percent_of_mean"].is_null());
    let bad = vlk(&["agree", "--pairs", csv_path.to_str().unwrap(), "--percent"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn appendix_a_reports_both_inversions() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    assert_eq!(
        vlk(&["phantom", "--dims", "64", "--seed", "3", "--out-prefix", &p("ph")])
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        vlk(&[
            "make-labels",
            "--seg", &p("ph_seg"),
            "--centerlines", &p("ph_centerlines.json"),
            "--out", &p("labels"),
        ])
        .status
        .code(),
        Some(0)
    );
    let out = vlk(&[
        "appendix-a",
        "--seg", &p("ph_seg"),
        "--labels", &p("labels"),
        "--n", "4",
        "--seed", "5",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let r = stdout_json(&out);
    assert_eq!(r["result"]["num_trials"], 4);
    assert_eq!(r["result"]["trials"].as_array().unwrap().len(), 4);
    let std_mean = r["result"]["standard"]["mean"].as_f64().unwrap();
    let cg_mean = r["result"]["coordinate_guided"]["mean"].as_f64().unwrap();
    assert!(cg_mean <= std_mean);
}

#[test]
fn preprocess_fixed_hits_target_dims() {
    let dir = tempfile::tempdir().unwrap();
    let seg = dir.path().join("seg");
    write_label_volume(&seg, [16, 24, 20], 2);
    let out_stem = dir.path().join("resized");
    let out = vlk(&[
        "preprocess",
        "--mode", "fixed",
        "--seg", seg.to_str().unwrap(),
        "--target", "8,16,16",
        "--out", out_stem.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        stdout_json(&out)["result"]["output_dims"],
        serde_json::json!([8, 16, 16])
    );
    let back = vlk_core::read_volume(&out_stem).unwrap();
    assert_eq!(back.dims(), [8, 16, 16]);
}

#[test]
fn preprocess_patches_emits_plan_and_patches() {
    let dir = tempfile::tempdir().unwrap();
    let seg = dir.path().join("seg");
    write_label_volume(&seg, [10, 10, 10], 1);
    let out = vlk(&[
        "preprocess",
        "--mode", "patches",
        "--seg", seg.to_str().unwrap(),
        "--patch", "8,8,8",
        "--step", "0.5",
        "--emit-patches",
        "--out", dir.path().join("pat").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let r = stdout_json(&out);
    let offsets = r["result"]["plan"]["offsets"].as_array().unwrap();
    assert_eq!(offsets.len(), 8, "two positions per axis");
    let written = r["result"]["patches_written"].as_array().unwrap();
    assert_eq!(written.len(), 8);
    let first = vlk_core::read_volume(written[0].as_str().unwrap()).unwrap();
    assert_eq!(first.dims(), [8, 8, 8]);
}

#[test]
fn pipeline_smoke_produces_full_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = vlk(&[
        "pipeline",
        "--dims", "64",
        "--seed", "9",
        "--k", "2",
        "--out-dir", dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = stdout_json(&out);
    assert!(r["result"]["eval"]["mean_vessel_dice"].as_f64().unwrap() > 0.95);
    assert_eq!(
        r["result"]["tta"]["per_layer_misassignment"].as_array().unwrap().len(),
        2
    );
    assert!(r["result"]["velocity_agreement"]["summary"]["wilcoxon_p"].is_f64());
    for artifact in ["seg", "gt_labels", "consensus", "uncertainty", "velocity"] {
        let stem = dir.path().join("run").join(artifact);
        assert!(stem.with_extension("json").exists(), "{artifact} header missing");
        assert!(stem.with_extension("raw").exists(), "{artifact} payload missing");
    }
}
