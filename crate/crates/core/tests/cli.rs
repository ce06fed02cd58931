//! The `dr2` binary end to end: exit codes, error lines, manifests and the
//! command examples.

use std::path::Path;
use std::process::{Command, Output};

use dr2::degradation::{read_manifest, Quality, DEGRADED_DIR, LR_DIR, MANIFEST_CSV};
use dr2::enhancement::{read_pairs, PAIR_MANIFEST};
use dr2::harness::{RunManifest, COARSE_DIR, RUN_MANIFEST};

fn dr2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dr2"))
        .args(args)
        .env_remove("DR2_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dr2(args);
    assert!(
        out.status.success(),
        "dr2 {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    let line = String::from_utf8_lossy(&out.stderr);
    let last = line.lines().last().expect("an error line on stderr");
    serde_json::from_str(last).unwrap_or_else(|e| panic!("not JSON ({e}): {last}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn count_files(dir: &Path) -> usize {
    std::fs::read_dir(dir).unwrap().count()
}

/// Tiny toy checkpoint for commands that need a denoiser.
fn tiny_model(dir: &Path) -> String {
    let out = dir.join("toy");
    ok(&[
        "train", "toy-ddpm", "--synthetic-count", "8", "--widths", "4,8,8", "--epochs", "1", "--batch-size", "4",
        "--seed", "1", "--out-dir", s(&out),
    ]);
    out.to_string_lossy().into_owned()
}

#[test]
fn help_and_version_exit_zero() {
    assert!(dr2(&["--help"]).status.success());
    assert!(dr2(&["--version"]).status.success());
}

#[test]
fn usage_errors_are_json_with_code_2() {
    for args in [&["frobnicate"][..], &["degrade", "--level", "extreme"], &["restore", "--N", "four"]] {
        let out = dr2(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert_eq!(error_json(&out)["error"], "usage");
    }
}

#[test]
fn runtime_errors_are_json_with_code_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dr2(&["restore", "--input-dir", s(dir.path()), "--denoiser", s(&dir.path().join("missing"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_json(&out);
    assert_eq!(err["error"], "io");
    assert!(err["message"].as_str().unwrap().contains("missing"));

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let model = tiny_model(dir.path());
    let out = dr2(&["gridsearch", "--input-dir", s(&empty), "--ref-dir", s(&empty), "--denoiser", &model, "--out-dir", s(&dir.path().join("g"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "empty_input");
}

#[test]
fn degrade_severe_x16_writes_five_of_each() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("set");
    ok(&[
        "degrade", "--synthetic-count", "5", "--image-size", "64", "--level", "severe", "--factor", "16", "--count", "5",
        "--seed", "3", "--out-dir", s(&out),
    ]);
    assert_eq!(count_files(&out.join(DEGRADED_DIR)), 5);
    assert_eq!(count_files(&out.join(LR_DIR)), 5);
    let rows = read_manifest(out.join(MANIFEST_CSV)).unwrap();
    assert_eq!(rows.len(), 5);
    for r in &rows {
        assert_eq!(r.r, 16);
        assert!(matches!(r.q, Quality::Jpeg(q) if (30..=40).contains(&q)), "{:?}", r.q);
    }
}

#[test]
fn seed_precedence_flag_then_config_then_env() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    let out = Command::new(env!("CARGO_BIN_EXE_dr2"))
        .args(["degrade", "--synthetic-count", "2", "--factor", "4", "--out-dir", s(&first)])
        .env("DR2_SEED", "7")
        .output()
        .unwrap();
    assert!(out.status.success());
    let manifest = RunManifest::read(first.join(RUN_MANIFEST)).unwrap();
    assert_eq!(manifest.run.seed, 7);
    assert_eq!(manifest.args["seed"].as_integer(), Some(7));

    // The config beats the environment, a flag beats the config.
    let config = first.join(RUN_MANIFEST);
    let second = dir.path().join("b");
    let out = Command::new(env!("CARGO_BIN_EXE_dr2"))
        .args(["degrade", "--config", s(&config), "--out-dir", s(&second)])
        .env("DR2_SEED", "99")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(RunManifest::read(second.join(RUN_MANIFEST)).unwrap().run.seed, 7);
    let third = dir.path().join("c");
    ok(&["degrade", "--config", s(&config), "--seed", "9", "--out-dir", s(&third)]);
    let m = RunManifest::read(third.join(RUN_MANIFEST)).unwrap();
    assert_eq!(m.run.seed, 9);
    assert_eq!(m.args["factor"].as_integer(), Some(4));
}

#[test]
fn config_from_another_command_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    ok(&["degrade", "--synthetic-count", "1", "--factor", "4", "--seed", "1", "--out-dir", s(&first)]);
    let out = dr2(&["restore", "--config", s(&first.join(RUN_MANIFEST))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "manifest_mismatch");
}

#[test]
fn model_commands_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let set = dir.path().join("set");
    ok(&["degrade", "--synthetic-count", "3", "--level", "mild", "--factor", "4", "--seed", "2", "--out-dir", s(&set)]);
    let model = tiny_model(dir.path());
    let inputs = set.join(DEGRADED_DIR);
    let refs = set.join("hr");

    // restore: identity enhancer output equals the coarse estimate, omega default recorded.
    let restored = dir.path().join("restored");
    ok(&["restore", "--input-dir", s(&inputs), "--denoiser", &model, "--tau", "100", "--save-coarse", "--seed", "4", "--out-dir", s(&restored)]);
    let m = RunManifest::read(restored.join(RUN_MANIFEST)).unwrap();
    assert_eq!(m.args["omega"].as_integer(), Some(350));
    for name in ["00000.png", "00001.png", "00002.png"] {
        assert_eq!(
            std::fs::read(restored.join(name)).unwrap(),
            std::fs::read(restored.join(COARSE_DIR).join(name)).unwrap()
        );
    }

    // gridsearch: 2x2 sweep gives four rows and one sheet.
    let grid = dir.path().join("grid");
    ok(&[
        "gridsearch", "--input-dir", s(&inputs), "--ref-dir", s(&refs), "--denoiser", &model, "--n-set", "2,4", "--tau-set",
        "10,30", "--omega-offset", "20", "--embedder", "projection:8:0", "--seed", "1", "--out-dir", s(&grid),
    ]);
    let csv = std::fs::read_to_string(grid.join("gridsearch.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("N,tau,omega,psnr,deg"));
    assert!(grid.join("grid.png").is_file());

    // ablate-omega: three refinement-on rows, off rows skip omega <= tau.
    let ablate = dir.path().join("ablate");
    ok(&[
        "ablate-omega", "--input-dir", s(&inputs), "--ref-dir", s(&refs), "--denoiser", &model, "--tau", "20", "--omega-set",
        "30,40,50", "--off-omega-set", "15,30", "--off-tau-set", "0,20", "--seed", "1", "--out-dir", s(&ablate),
    ]);
    let csv = std::fs::read_to_string(ablate.join("ablate_omega.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 + 2 + 1);

    // pairs: tau drawn from the default set.
    let pairs = dir.path().join("pairs");
    ok(&["train", "pairs", "--denoiser", &model, "--synthetic-count", "6", "--seed", "5", "--out-dir", s(&pairs)]);
    assert!(pairs.join(PAIR_MANIFEST).is_file());
    let read = read_pairs(&pairs).unwrap();
    assert_eq!(read.len(), 6);
    assert!(read.iter().all(|p| [50, 100, 150, 200].contains(&p.tau)));

    let enh = dir.path().join("enh");
    ok(&["train", "baseline-enhancer", "--pairs-dir", s(&pairs), "--width", "4", "--blocks", "1", "--epochs", "1", "--out-dir", s(&enh)]);
    let final_dir = dir.path().join("final");
    let spec = format!("baseline:{}", s(&enh));
    ok(&["restore", "--input-dir", s(&inputs), "--denoiser", &model, "--tau", "20", "--omega", "40", "--enhancer", &spec, "--out-dir", s(&final_dir)]);
    assert_eq!(count_files(&final_dir), 4);

    // A baseline checkpoint passed where a denoiser is expected fails cleanly.
    let out = dr2(&["restore", "--input-dir", s(&inputs), "--denoiser", s(&enh), "--out-dir", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "unsupported_format");
}

#[test]
fn evaluate_self_is_capped_and_schema_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let set = dir.path().join("set");
    ok(&["degrade", "--synthetic-count", "3", "--factor", "4", "--seed", "2", "--out-dir", s(&set)]);
    let hr = set.join("hr");
    let first = dir.path().join("m1.csv");
    let second = dir.path().join("m2.csv");
    for csv in [&first, &second] {
        ok(&["evaluate", "--pred-dir", s(&hr), "--ref-dir", s(&hr), "--out-csv", s(csv)]);
    }
    let text = std::fs::read_to_string(&first).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "name,psnr,ssim,deg,lpips");
    assert_eq!(lines.len(), 1 + 3 + 1);
    for row in &lines[1..] {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[1].parse::<f64>().unwrap(), 100.0, "{row}");
    }
    assert!(lines[4].starts_with("MEAN,"));
    assert_eq!(text, std::fs::read_to_string(&second).unwrap());
}
