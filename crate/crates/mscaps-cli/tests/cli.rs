//! Command-line contract: exit codes, artifact formats, config precedence,
//! and stage chaining on small scenes.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mscaps"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Synthesizes the small shared scene into `dir` and returns its file paths.
fn small_scene(dir: &Path) -> (String, String, String) {
    let out = bin()
        .args(["synth", "--size", "32x32", "--region", "8,8,24,24"])
        .args(["--looks", "9", "--contrast", "4", "--seed", "3"])
        .args(["-o".as_ref(), dir.as_os_str()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "synth failed: {}", stderr(&out));
    let path = |n: &str| dir.join(n).to_str().unwrap().to_string();
    (path("img1.pgm"), path("img2.pgm"), path("truth.pgm"))
}

#[test]
fn synthesized_truth_covers_exactly_the_requested_region() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["synth", "--size", "128x128", "--region", "40,40,80,80"])
        .args(["--looks", "4", "--contrast", "3", "--seed", "7"])
        .args(["-o".as_ref(), dir.path().as_os_str()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let truth = std::fs::read(dir.path().join("truth.pgm")).unwrap();
    let raster = &truth[b"P5\n128 128\n255\n".len()..];
    assert_eq!(raster.len(), 128 * 128);
    let changed = raster.iter().filter(|&&v| v == 255).count();
    assert_eq!(changed, 40 * 40, "half-open region should cover 1600 pixels");
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["synth", "--help"])), 0);
    assert_eq!(code(&run(&["no-such-command"])), 2);
    assert_eq!(code(&run(&["synth", "--no-such-flag"])), 2);
    assert_eq!(code(&run(&["synth", "--size", "axb"])), 2);
    assert_eq!(code(&run(&["synth", "--size", "32x32"])), 2, "region is required");
    assert_eq!(code(&run(&["sweep", "--values", "9,13"])), 2, "axis is required");
}

#[test]
fn flag_validation_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (img1, img2, _) = small_scene(dir.path());
    let out = run(&["synth", "--size", "32x32", "--region", "8,8,24,24", "--looks", "0"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("looks"), "stderr: {}", stderr(&out));

    for patch in ["8", "7", "0"] {
        let out = run(&["train", "--img1", &img1, "--img2", &img2, "--patch-size", patch]);
        assert_eq!(code(&out), 2, "patch {patch} accepted");
    }

    let out = run(&["synth", "--size", "32x32", "--region", "8,8,40,24"]);
    assert_eq!(code(&out), 2, "region outside the scene accepted");
}

#[test]
fn missing_and_corrupt_inputs_are_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["di", "--img1", "/nonexistent/a.pgm", "--img2", "/nonexistent/b.pgm"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("di:"), "stage prefix missing: {}", stderr(&out));

    let bogus = dir.path().join("model.ckpt");
    std::fs::write(&bogus, b"not a checkpoint").unwrap();
    let (img1, img2, _) = small_scene(dir.path());
    let out = run(&["infer", "--img1", &img1, "--img2", &img2, "--model", bogus.to_str().unwrap()]);
    assert_eq!(code(&out), 1);

    let truncated = dir.path().join("short.pgm");
    std::fs::write(&truncated, b"P5\n8 8\n255\nxx").unwrap();
    let out = run(&["di", "--img1", truncated.to_str().unwrap(), "--img2", &img2]);
    assert_eq!(code(&out), 1);
}

#[test]
fn mismatched_image_sizes_fail() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (img1, _, _) = small_scene(a.path());
    let out = bin()
        .args(["synth", "--size", "16x16", "--region", "4,4,12,12", "--seed", "3"])
        .args(["-o".as_ref(), b.path().as_os_str()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let img2 = b.path().join("img1.pgm");
    let out = run(&["di", "--img1", &img1, "--img2", img2.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("differ"), "stderr: {}", stderr(&out));
}

#[test]
fn train_rejects_conflicting_image_sources() {
    let dir = tempfile::tempdir().unwrap();
    let (img1, img2, _) = small_scene(dir.path());
    let out = bin()
        .args(["di", "--img1", &img1, "--img2", &img2])
        .args(["-o".as_ref(), dir.path().as_os_str()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let di = dir.path().join("di.pgm").to_str().unwrap().to_string();
    let out = run(&["train", "--img1", &img1, "--img2", &img2, "--di", &di]);
    assert_eq!(code(&out), 2);
    let out = run(&["train", "--img1", &img1]);
    assert_eq!(code(&out), 2);
    let out = run(&["train"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_of_a_map_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, truth) = small_scene(dir.path());
    let out = bin()
        .args(["eval", "--map", &truth, "--truth", &truth])
        .args(["-o".as_ref(), dir.path().as_os_str()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let line = String::from_utf8_lossy(&out.stdout);
    assert!(
        line.contains("OE=0 PCC=100.00 KC=100.00"),
        "unexpected metrics line: {line}"
    );
    assert!(dir.path().join("metrics.txt").exists());
    assert!(dir.path().join("metrics.kv").exists());
}

#[test]
fn eval_rejects_gray_maps_and_size_mismatches() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (img1, _, truth) = small_scene(a.path());
    // img1 has intermediate gray values, so it is not a change mask.
    let out = run(&["eval", "--map", &img1, "--truth", &truth]);
    assert_eq!(code(&out), 1);

    let out = bin()
        .args(["synth", "--size", "16x16", "--region", "4,4,12,12", "--seed", "3"])
        .args(["-o".as_ref(), b.path().as_os_str()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let small_truth = b.path().join("truth.pgm");
    let out = run(&["eval", "--map", &truth, "--truth", small_truth.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn config_file_sets_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mscaps.conf");
    std::fs::write(&cfg, "# scene defaults\nsize=32x32\nregion=8,8,24,24\nlooks=0\n").unwrap();
    let cfg = cfg.to_str().unwrap();

    // looks=0 from the config is rejected exactly like the flag would be.
    let out = run(&["synth", "--config", cfg, "-o", dir.path().join("a").to_str().unwrap()]);
    assert_eq!(code(&out), 2);

    // The flag overrides the config value; size and region come from the file.
    let out = run(&[
        "synth", "--config", cfg, "--looks", "4",
        "-o", dir.path().join("b").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(dir.path().join("b/img1.pgm").exists());

    let out = run(&["synth", "--config", "/nonexistent.conf"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn di_and_labels_are_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let (img1, img2, _) = small_scene(dir.path());
    let out = bin()
        .args(["di", "--img1", &img1, "--img2", &img2])
        .args(["-o".as_ref(), dir.path().as_os_str()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let di = std::fs::read(dir.path().join("di.pgm")).unwrap();
    assert!(di.starts_with(b"P5\n32 32\n255\n"));
    assert_eq!(di.len(), b"P5\n32 32\n255\n".len() + 32 * 32);

    let out = bin()
        .args(["label", "--img1", &img1, "--img2", &img2])
        .args(["-o".as_ref(), dir.path().as_os_str()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let labels = std::fs::read(dir.path().join("labels.pgm")).unwrap();
    let raster = &labels[b"P5\n32 32\n255\n".len()..];
    assert_eq!(raster.len(), 32 * 32);
    assert!(raster.iter().all(|v| matches!(v, 0 | 128 | 255)));
    assert!(raster.iter().any(|&v| v == 255), "no changed pixels labeled");
}

#[test]
fn value_sweep_writes_one_row_per_distinct_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["sweep", "--axis", "patch-size", "--values", "9,13,9,17"])
        .args(["--size", "32x32", "--region", "8,8,24,24", "--looks", "9"])
        .args(["--contrast", "4", "--seed", "3", "--samples", "40", "--epochs", "1"])
        .args(["-o".as_ref(), dir.path().as_os_str()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("duplicate"), "no dedup warning: {}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "value,fp,fn,oe,pcc,kc");
    assert_eq!(lines.len(), 4, "expected three data rows: {csv}");
    for (line, value) in lines[1..].iter().zip(["9", "13", "17"]) {
        assert!(line.starts_with(&format!("{value},")), "row order: {csv}");
        assert_eq!(line.split(',').count(), 6);
        assert!(dir.path().join(format!("patch-size-{value}/model.ckpt")).exists());
        assert!(dir.path().join(format!("patch-size-{value}/changemap.png")).exists());
    }

    let out = run(&["sweep", "--axis", "patch-size", "--values", "5,9,13"]);
    assert_eq!(code(&out), 2, "5x5 patches are below the network minimum");
    let out = run(&["sweep", "--axis", "samples", "--values", ""]);
    assert_eq!(code(&out), 2);
}

#[test]
fn run_without_ground_truth_skips_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let work = tempfile::tempdir().unwrap();
    let (img1, img2, _) = small_scene(dir.path());
    let out = bin()
        .args(["run", "--img1", &img1, "--img2", &img2])
        .args(["--samples", "20", "--epochs", "1", "--seed", "3"])
        .args(["-o".as_ref(), work.path().as_os_str()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(work.path().join("changemap.png").exists());
    assert!(!work.path().join("metrics.txt").exists());
    assert!(stderr(&out).contains("skipping evaluation"));
    assert!(out.stdout.is_empty());
}

#[test]
fn run_with_ground_truth_reports_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let work = tempfile::tempdir().unwrap();
    let (img1, img2, truth) = small_scene(dir.path());
    let out = bin()
        .args(["run", "--img1", &img1, "--img2", &img2, "--truth", &truth])
        .args(["--samples", "20", "--epochs", "1", "--seed", "3"])
        .args(["-o".as_ref(), work.path().as_os_str()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let line = String::from_utf8_lossy(&out.stdout);
    assert!(line.starts_with("FP="), "metrics line: {line}");
    assert!(work.path().join("metrics.kv").exists());
}

#[test]
fn staged_commands_reproduce_the_combined_run() {
    let combined = tempfile::tempdir().unwrap();
    let staged = tempfile::tempdir().unwrap();
    let scene = [
        "--size", "32x32", "--region", "8,8,24,24",
        "--looks", "9", "--contrast", "4", "--seed", "3",
    ];
    let knobs = ["--samples", "30", "--epochs", "2", "--deterministic"];

    let out = bin()
        .args(["run"])
        .args(scene)
        .args(knobs)
        .args(["-o".as_ref(), combined.path().as_os_str()])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let sdir = staged.path().to_str().unwrap().to_string();
    let p = |n: &str| format!("{sdir}/{n}");
    let out = bin().args(["synth"]).args(scene).args(["-o", &sdir]).output().unwrap();
    assert_eq!(code(&out), 0);
    let out = bin()
        .args(["train", "--img1", &p("img1.pgm"), "--img2", &p("img2.pgm"), "--seed", "3"])
        .args(knobs)
        .args(["-o", &sdir])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let out = bin()
        .args(["infer", "--img1", &p("img1.pgm"), "--img2", &p("img2.pgm")])
        .args(["--model", &p("model.ckpt"), "--deterministic", "--seed", "3"])
        .args(["-o", &sdir])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    for name in ["img1.pgm", "img2.pgm", "truth.pgm", "model.ckpt", "changemap.png"] {
        let a = std::fs::read(combined.path().join(name)).unwrap();
        let b = std::fs::read(staged.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between run and staged commands");
    }

    let out = bin()
        .args(["eval", "--map", &p("changemap.png"), "--truth", &p("truth.pgm")])
        .args(["-o", &sdir])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let a = std::fs::read_to_string(combined.path().join("metrics.txt")).unwrap();
    let b = std::fs::read_to_string(staged.path().join("metrics.txt")).unwrap();
    assert_eq!(a, b, "metrics differ between run and staged commands");
}
