//! CLI pipeline integration: command functions end to end, run-log
//! semantics, binary exit codes.

use std::fs;
use std::path::Path;
use std::process::Command;

use cospeech_cli::commands::{
    cmd_analyze, cmd_gate_dump, cmd_generate, cmd_metrics, cmd_pretrain, cmd_synth, cmd_train,
};
use cospeech_cli::error::CliError;
use cospeech_cli::runlog::read_runlog;

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, body).unwrap();
    path
}

const SMALL_CONFIG: &str = r#"
preset = "desk"

[model]
epochs = 6
batch = 4
n_speakers = 4
audio_dim = 24
word_dim = 12
style_dim = 8

[synth]
n_clips = 8
n_speakers = 4
audio_dim = 24
word_dim = 12
style_dim = 8

[train]
codec_steps = 20
"#;

#[test]
fn full_pipeline_runs_and_artifacts_parse() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let config = write_config(root, SMALL_CONFIG);
    let data = root.join("data");
    cmd_synth(&config, &data, Some(5)).unwrap();
    assert!(data.join("clip_0000/manifest.json").exists());
    assert!(data.join("synth_spec.json").exists());

    let codec = root.join("codec");
    cmd_pretrain(&data, &config, &codec, Some(20), 1).unwrap();
    assert!(codec.join("checkpoint.json").exists());

    let run = root.join("run");
    cmd_train(&data, &codec, &config, &run, 2, None).unwrap();
    let (header, records) = read_runlog(&run.join("runlog.jsonl")).unwrap();
    assert_eq!(header.clips, 8);
    assert_eq!(records.len(), 6);
    for r in &records {
        assert!(r.losses.total.is_finite());
    }

    let gen_dir = root.join("gen").join("clip_0000");
    cmd_generate(
        &run.join("checkpoint"),
        &data.join("clip_0000"),
        &gen_dir,
        false,
        0,
    )
    .unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(gen_dir.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["arrays"]["gate_psi"].is_object());
    assert!(manifest["arrays"]["frames"].is_object());

    let dump = root.join("gate.csv");
    cmd_gate_dump(&run.join("checkpoint"), &data, &dump, 0).unwrap();
    let text = fs::read_to_string(&dump).unwrap();
    assert!(text.starts_with("clip,frame,psi,flag"));
    assert_eq!(text.lines().count(), 1 + 8 * 64);

    let report_path = root.join("analysis.json");
    cmd_analyze(&data, &report_path, 0, 100, Some(&root.join("psd.tsv"))).unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report["classes"]["beat"]["peak_hz"]["point"].is_number());
    assert!(root.join("psd.tsv").exists());

    let metrics_path = root.join("metrics.jsonl");
    cmd_metrics(&data, &gen_dir.parent().unwrap().to_path_buf(), &metrics_path, 0).unwrap();
    let lines: Vec<serde_json::Value> = fs::read_to_string(&metrics_path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0]["metric"], "fgd");
    assert!(lines[0]["value"].as_f64().unwrap().is_finite());
}

const WARMUP_CONFIG: &str = r#"
preset = "desk"

[model]
epochs = 34
batch = 6
n_speakers = 3
audio_dim = 16
word_dim = 8
style_dim = 8
phys_warmup = { start = 30, end = 80 }

[synth]
n_clips = 6
n_speakers = 3
audio_dim = 16
word_dim = 8
style_dim = 8
"#;

#[test]
fn beta_phys_zero_diverges_only_after_physics_warmup() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let config = write_config(root, WARMUP_CONFIG);
    let data = root.join("data");
    cmd_synth(&config, &data, Some(3)).unwrap();
    let codec = root.join("codec");
    cmd_pretrain(&data, &config, &codec, Some(15), 4).unwrap();

    let run_a = root.join("with_ibp");
    let run_b = root.join("without_ibp");
    cmd_train(&data, &codec, &config, &run_a, 9, None).unwrap();
    cmd_train(&data, &codec, &config, &run_b, 9, Some(0.0)).unwrap();

    let (_, rec_a) = read_runlog(&run_a.join("runlog.jsonl")).unwrap();
    let (_, rec_b) = read_runlog(&run_b.join("runlog.jsonl")).unwrap();
    assert_eq!(rec_a.len(), 34);
    // Physics warmup starts at epoch 30: the ramp is still zero AT 30, so
    // the trajectories must agree through epoch 30 and split afterwards.
    for epoch in 0..=30 {
        assert_eq!(
            rec_a[epoch].losses.total.to_bits(),
            rec_b[epoch].losses.total.to_bits(),
            "epoch {epoch} diverged before the physics warmup"
        );
    }
    let diverged = (31..34).any(|e| rec_a[e].losses.total != rec_b[e].losses.total);
    assert!(diverged, "physics term had no effect after warmup");
    assert!(rec_a[33].losses.beta_phys > 0.0);
    assert_eq!(rec_b[33].losses.beta_phys, 0.0);
    // Checkpoints differ.
    let bytes_a = fs::read(run_a.join("checkpoint/arr_00000.bin")).unwrap();
    let bytes_b = fs::read(run_b.join("checkpoint/arr_00000.bin")).unwrap();
    let differs = (0..fs::read_dir(run_a.join("checkpoint")).unwrap().count() - 1).any(|i| {
        let name = format!("arr_{i:05}.bin");
        fs::read(run_a.join("checkpoint").join(&name)).unwrap()
            != fs::read(run_b.join("checkpoint").join(&name)).unwrap()
    });
    assert!(differs || bytes_a != bytes_b);
}

#[test]
fn config_errors_are_reported_as_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "preset = \"unknown\"");
    let err = cmd_synth(&config, &tmp.path().join("out"), None).unwrap_err();
    assert!(matches!(err, CliError::Config(_)));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn missing_data_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL_CONFIG);
    let err = cmd_pretrain(
        &tmp.path().join("nope"),
        &config,
        &tmp.path().join("codec"),
        Some(1),
        0,
    )
    .unwrap_err();
    assert!(matches!(err, CliError::Data(_)));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn diverging_training_is_a_numeric_error() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let diverging = SMALL_CONFIG.replace("epochs = 6", "epochs = 6\nlr = 1e18");
    let config = write_config(root, &diverging);
    let data = root.join("data");
    cmd_synth(&config, &data, Some(1)).unwrap();
    let codec = root.join("codec");
    cmd_pretrain(&data, &config, &codec, Some(3), 0).unwrap();
    // A learning rate of 1e18 overflows the parameters within a few steps.
    let err = cmd_train(&data, &codec, &config, &root.join("run"), 0, None).unwrap_err();
    assert!(matches!(err, CliError::Numeric(_)), "got {err:?}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn binary_rejects_unknown_flags_with_usage() {
    let exe = env!("CARGO_BIN_EXE_cospeech");
    let out = Command::new(exe)
        .args(["synth", "--no-such-flag"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr).to_lowercase();
    assert!(stderr.contains("usage"), "stderr: {stderr}");
}

#[test]
fn binary_reports_version_and_help() {
    let exe = env!("CARGO_BIN_EXE_cospeech");
    let out = Command::new(exe).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for sub in ["synth", "pretrain-codec", "train", "generate", "gate-dump", "analyze", "metrics"] {
        assert!(stdout.contains(sub), "help missing {sub}");
    }
}

#[test]
fn beat_only_synth_then_analyze_finds_the_beat_peak() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let config = write_config(
        root,
        r#"
preset = "desk"

[synth]
n_clips = 12
n_speakers = 3
semantic_fraction = 0.0
audio_dim = 8
word_dim = 8
style_dim = 8
"#,
    );
    let data = root.join("data");
    cmd_synth(&config, &data, Some(2)).unwrap();
    let report_path = root.join("report.json");
    cmd_analyze(&data, &report_path, 0, 200, None).unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    let peak = report["classes"]["beat"]["peak_hz"]["point"].as_f64().unwrap();
    // One 64-sample Welch bin at 30 fps is ~0.47 Hz.
    assert!(
        (peak - 1.12).abs() <= 30.0 / 64.0,
        "beat peak {peak} not near 1.12 Hz"
    );
    assert!(report["classes"].get("semantic").is_none());
}
