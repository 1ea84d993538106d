//! End-to-end command tests over the external interfaces: dataset layout,
//! experiment configs, edit outputs, metrics CSV, and verify reports.

use std::path::Path;

use smudge_cli::{cmd_edit, cmd_gen_data, cmd_invert, cmd_stats, cmd_verify, EditArgs};

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn gen_data_is_deterministic_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    cmd_gen_data(&a, 5, 16, 7).unwrap();
    cmd_gen_data(&b, 5, 16, 7).unwrap();
    for name in ["manifest.json", "sample_00000.tnsr", "sample_00004.tnsr"] {
        let x = std::fs::read(a.join(name)).unwrap();
        let y = std::fs::read(b.join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between identical seeds");
    }
    assert_eq!(std::fs::read_dir(&a).unwrap().count(), 6);
}

#[test]
fn gen_data_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    cmd_gen_data(dir.path(), 0, 16, 0).unwrap();
    let manifest = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(v["samples"].as_array().unwrap().len(), 0);
}

fn analytic_move_config(out_dir: &Path) -> String {
    format!(
        r#"{{
  "schedule": {{"t_train": 1000, "beta_min": 1e-4, "beta_max": 2e-2, "infer_steps": 50}},
  "denoiser": {{"kind": "analytic"}},
  "sampler": {{"n": 40, "tau_sde": 18, "rng_seed": 3}},
  "edit_spec": {{"task": "move", "src": [10, 16], "dst": [22, 16]}},
  "image": {{"size": 32, "cx": 10.0, "cy": 16.0}},
  "out_dir": "{}"
}}"#,
        out_dir.display()
    )
}

#[test]
fn edit_writes_outputs_and_appends_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = dir.path().join("move.json");
    write(&config, &analytic_move_config(&out_dir));

    let args = EditArgs {
        config: config.clone(),
        runs: 2,
        jobs: 2,
    };
    cmd_edit(&args).unwrap();

    for seed in [3, 4] {
        assert!(out_dir.join(format!("edit_seed{seed}.tnsr")).exists());
        assert!(out_dir.join(format!("edit_seed{seed}.pgm")).exists());
        let log: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(out_dir.join(format!("runlog_seed{seed}.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(log["infer_steps"], 50);
        assert_eq!(log["sampler"]["rng_seed"], seed);
        assert_eq!(log["steps"].as_array().unwrap().len(), 50);
    }

    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "task,seed,objective,out_mask_mse,wall_ms");
    assert_eq!(lines.len(), 3);

    // Re-running appends rather than overwriting.
    cmd_edit(&EditArgs {
        config,
        runs: 1,
        jobs: 1,
    })
    .unwrap();
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    // The move landed: objective column is the centroid error in pixels.
    let last = metrics.lines().last().unwrap();
    let objective: f64 = last.split(',').nth(2).unwrap().parse().unwrap();
    assert!(objective <= 1.5, "centroid error {objective}");

    // Aggregation over the produced CSV.
    let stats_out = dir.path().join("stats.json");
    cmd_stats(&out_dir.join("metrics.csv"), Some(&stats_out)).unwrap();
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&stats_out).unwrap()).unwrap();
    assert_eq!(stats["move"]["runs"], 3);
}

#[test]
fn identity_edit_objective_is_reconstruction_mse() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = dir.path().join("id.json");
    write(
        &config,
        &format!(
            r#"{{
  "denoiser": {{"kind": "analytic"}},
  "edit_spec": {{"task": "identity"}},
  "image": {{"size": 32, "cx": 12.0, "cy": 14.0}},
  "out_dir": "{}"
}}"#,
            out_dir.display()
        ),
    );
    cmd_edit(&EditArgs {
        config,
        runs: 1,
        jobs: 1,
    })
    .unwrap();
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let row = metrics.lines().nth(1).unwrap();
    let objective: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
    // Identity edits report whole-image reconstruction MSE, which stays at
    // round-trip level.
    assert!(objective < 1e-3, "identity objective {objective}");
}

#[test]
fn replace_task_gains_reference_appearance() {
    // Appearance replace within the blob manifold: the masked region is
    // pulled from the source position toward the reference position, so the
    // edited region ends up closer (in cosine) to the reference content.
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = dir.path().join("replace.json");
    write(
        &config,
        &format!(
            r#"{{
  "denoiser": {{"kind": "analytic"}},
  "sampler": {{"n": 40, "tau_sde": 18, "rng_seed": 1}},
  "edit_spec": {{"task": "replace", "center": [16, 16], "radius": 8.0}},
  "image": {{"size": 32, "cx": 12.0, "cy": 16.0}},
  "reference_image": {{"size": 32, "cx": 20.0, "cy": 16.0}},
  "out_dir": "{}"
}}"#,
            out_dir.display()
        ),
    );
    cmd_edit(&EditArgs {
        config,
        runs: 1,
        jobs: 1,
    })
    .unwrap();
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let row = metrics.lines().nth(1).unwrap();
    let objective: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
    assert!(
        objective > 0.0,
        "edited region should be closer to the reference than to the source, gain {objective}"
    );
}

#[test]
fn invert_reports_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = dir.path().join("inv.json");
    write(
        &config,
        &format!(
            r#"{{
  "denoiser": {{"kind": "analytic"}},
  "edit_spec": {{"task": "identity"}},
  "image": {{"size": 32, "cx": 16.0, "cy": 16.0}},
  "out_dir": "{}"
}}"#,
            out_dir.display()
        ),
    );
    cmd_invert(&config).unwrap();
    assert!(out_dir.join("z_top.tnsr").exists());
    assert!(out_dir.join("reconstruction.pgm").exists());
    let log: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("invert_log.json")).unwrap())
            .unwrap();
    assert!(log["roundtrip_rel_mse"].as_f64().unwrap() < 1e-2);
    assert_eq!(log["bank_timesteps"].as_array().unwrap().len(), 50);
}

#[test]
fn missing_referenced_file_fails_up_front() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    write(
        &config,
        r#"{
  "denoiser": {"kind": "tiny", "bundle": "nope.bundle"},
  "edit_spec": {"task": "identity"},
  "image": "missing.tnsr"
}"#,
    );
    let err = cmd_edit(&EditArgs {
        config,
        runs: 1,
        jobs: 1,
    })
    .unwrap_err();
    assert!(err.to_string().contains("does not exist"), "{err}");
}

#[test]
fn verify_limits_suite_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let pass = cmd_verify("limits", Some(&out)).unwrap();
    assert!(pass);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
    assert_eq!(report["suites"][0]["suite"], "limits");
    assert!(report["suites"][0]["checks"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["pass"] == true));
}

#[test]
fn verify_unknown_suite_errors() {
    assert!(cmd_verify("nonsense", None).is_err());
}
