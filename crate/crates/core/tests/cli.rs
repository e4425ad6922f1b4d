//! Command-line behavior: default flags landing in manifests, exit codes,
//! atomicity on failure, manifest replay, tensor outputs, the selftest, and
//! the compiled binary itself.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use semstyle::adain::FallbackPolicy;
use semstyle::cli::run_cli;
use semstyle::io::{load_fmap, sha256_file, RunManifest};
use semstyle::pipeline::{QuerySource, TransferMode};

fn run(args: &[String]) -> i32 {
    run_cli(args.iter().cloned())
}

fn strs(args: &[&str]) -> Vec<String> {
    args.iter().map(|s| s.to_string()).collect()
}

/// Generates `count` scenes into `dir` and returns the directory path as a
/// string.
fn make_scenes(dir: &Path, palette: &str, seed: u64, count: usize) -> String {
    let dir_s = dir.to_string_lossy().into_owned();
    let code = run(&strs(&[
        "semstyle", "gen-scenes", "--out-dir", &dir_s, "--seed", &seed.to_string(),
        "--palette", palette, "--height", "32", "--width", "64",
        "--count", &count.to_string(), "--objects", "3",
    ]));
    assert_eq!(code, 0, "scene generation failed");
    dir_s
}

#[test]
fn unspecified_flags_land_in_the_manifest_at_their_documented_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let content_dir = make_scenes(&dir.path().join("content"), "day", 1, 1);
    let style_dir = make_scenes(&dir.path().join("style"), "snow", 2, 1);
    let out = dir.path().join("out.png");
    let manifest_path = dir.path().join("run.json");

    let code = run(&strs(&[
        "semstyle", "transfer",
        "--content", &format!("{content_dir}/scene_0000.png"),
        "--content-mask", &format!("{content_dir}/scene_0000_mask.png"),
        "--style", &format!("{style_dir}/scene_0000.png"),
        "--style-mask", &format!("{style_dir}/scene_0000_mask.png"),
        "--out", &out.to_string_lossy(),
        "--manifest", &manifest_path.to_string_lossy(),
    ]));
    assert_eq!(code, 0);

    let manifest = RunManifest::load(&manifest_path).unwrap();
    assert_eq!(manifest.engine_version, env!("CARGO_PKG_VERSION"));
    assert_eq!(manifest.config.mode, TransferMode::Cactif);
    assert!((manifest.config.p - 0.25).abs() < 1e-12);
    assert_eq!(manifest.config.steps, 50);
    assert_eq!(manifest.config.skip, 30);
    assert_eq!(manifest.config.sites, vec!["16x16".to_string(), "32x32".to_string()]);
    assert_eq!(manifest.config.fallback, FallbackPolicy::GlobalStyleStats);
    assert_eq!(manifest.config.query_source, QuerySource::OutputStream);
    assert_eq!(manifest.config.seed, 0);
    assert_eq!(manifest.seed, 0);
    assert_eq!(manifest.inputs.len(), 4, "content, style, and both masks");
    assert!(manifest.metrics.contains_key("psnr_vs_content_db"));
    assert!(manifest.metrics.contains_key("max_abs_vs_content"));
    manifest.verify_outputs().unwrap();
}

#[test]
fn batch_writes_one_output_per_content_image_plus_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let content_dir = make_scenes(&dir.path().join("content"), "day", 10, 3);
    let style_dir = make_scenes(&dir.path().join("style"), "fog", 20, 1);
    let out_dir = dir.path().join("stylized");

    let code = run(&strs(&[
        "semstyle", "batch", "--content-dir", &content_dir,
        "--style", &format!("{style_dir}/scene_0000.png"),
        "--style-mask", &format!("{style_dir}/scene_0000_mask.png"),
        "--steps", "8", "--skip", "5", "--sites", "16x16", "--seed", "4",
        "--out-dir", &out_dir.to_string_lossy(),
    ]));
    assert_eq!(code, 0);

    let mut names: Vec<String> = fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        vec!["manifest.json", "scene_0000.png", "scene_0001.png", "scene_0002.png"],
        "outputs keep their content names"
    );

    let manifest = RunManifest::load(&out_dir.join("manifest.json")).unwrap();
    assert_eq!(manifest.outputs.len(), 3);
    manifest.verify_outputs().unwrap();
}

#[test]
fn invalid_invocations_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let content_dir = make_scenes(&dir.path().join("content"), "day", 1, 1);
    let style_dir = make_scenes(&dir.path().join("style"), "snow", 2, 1);
    let content = format!("{content_dir}/scene_0000.png");
    let content_mask = format!("{content_dir}/scene_0000_mask.png");
    let style = format!("{style_dir}/scene_0000.png");
    let style_mask = format!("{style_dir}/scene_0000_mask.png");
    let out = dir.path().join("out.png");
    let out_s = out.to_string_lossy().into_owned();

    assert_eq!(run(&strs(&["semstyle", "frobnicate"])), 1, "unknown subcommand");

    assert_eq!(
        run(&strs(&[
            "semstyle", "gen-scenes", "--out-dir", &dir.path().join("x").to_string_lossy(),
            "--palette", "dusk",
        ])),
        1,
        "unknown palette"
    );

    let code = run(&strs(&[
        "semstyle", "transfer", "--content", &content, "--content-mask", &content_mask,
        "--style", &style, "--style-mask", &style_mask, "--p", "1.5", "--out", &out_s,
    ]));
    assert_eq!(code, 1, "filter fraction outside [0, 1]");
    assert!(!out.exists(), "rejected run must not write outputs");

    let code = run(&strs(&[
        "semstyle", "transfer", "--content", &content, "--style", &style, "--out", &out_s,
    ]));
    assert_eq!(code, 1, "class-wise modes require masks");
    assert!(!out.exists());

    let code = run(&strs(&[
        "semstyle", "metrics", "--generated", &content_dir, "--reference", &style_dir,
    ]));
    assert_eq!(code, 1, "distribution metrics need at least two images per side");
}

#[test]
fn missing_input_files_exit_two_and_leave_nothing_behind() {
    let dir = tempfile::tempdir().unwrap();
    let content_dir = make_scenes(&dir.path().join("content"), "day", 1, 1);
    let out = dir.path().join("out.png");
    let manifest = dir.path().join("run.json");

    let code = run(&strs(&[
        "semstyle", "transfer",
        "--content", &format!("{content_dir}/scene_0000.png"),
        "--content-mask", &format!("{content_dir}/scene_0000_mask.png"),
        "--style", &dir.path().join("absent.png").to_string_lossy(),
        "--style-mask", &format!("{content_dir}/scene_0000_mask.png"),
        "--out", &out.to_string_lossy(),
        "--manifest", &manifest.to_string_lossy(),
    ]));
    assert_eq!(code, 2, "unreadable input is an I/O failure");
    assert!(!out.exists(), "no output after a failed run");
    assert!(!manifest.exists(), "no manifest after a failed run");
}

#[test]
fn unsupported_output_extension_fails_without_partial_files() {
    let dir = tempfile::tempdir().unwrap();
    let content_dir = make_scenes(&dir.path().join("content"), "day", 1, 1);
    let out = dir.path().join("out.bmp");

    let code = run(&strs(&[
        "semstyle", "transfer",
        "--content", &format!("{content_dir}/scene_0000.png"),
        "--content-mask", &format!("{content_dir}/scene_0000_mask.png"),
        "--style", &format!("{content_dir}/scene_0000.png"),
        "--style-mask", &format!("{content_dir}/scene_0000_mask.png"),
        "--steps", "6", "--skip", "3", "--sites", "16x16",
        "--out", &out.to_string_lossy(),
    ]));
    assert_eq!(code, 1);
    assert!(!out.exists(), "unsupported extension must not produce a file");
}

#[test]
fn global_modes_run_without_masks() {
    let dir = tempfile::tempdir().unwrap();
    let content_dir = make_scenes(&dir.path().join("content"), "day", 1, 1);
    let style_dir = make_scenes(&dir.path().join("style"), "night", 2, 1);

    for mode in ["adain", "cross"] {
        let out = dir.path().join(format!("{mode}.png"));
        let code = run(&strs(&[
            "semstyle", "transfer", "--mode", mode,
            "--content", &format!("{content_dir}/scene_0000.png"),
            "--style", &format!("{style_dir}/scene_0000.png"),
            "--steps", "6", "--skip", "3", "--sites", "16x16",
            "--out", &out.to_string_lossy(),
        ]));
        assert_eq!(code, 0, "mode {mode} should not need masks");
        assert!(out.exists());
    }
}

#[test]
fn a_manifest_replays_its_own_command_to_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let content_dir = make_scenes(&dir.path().join("content"), "day", 5, 1);
    let style_dir = make_scenes(&dir.path().join("style"), "snow", 6, 1);
    let out = dir.path().join("out.png");
    let manifest_path = dir.path().join("run.json");

    let code = run(&strs(&[
        "semstyle", "transfer",
        "--content", &format!("{content_dir}/scene_0000.png"),
        "--content-mask", &format!("{content_dir}/scene_0000_mask.png"),
        "--style", &format!("{style_dir}/scene_0000.png"),
        "--style-mask", &format!("{style_dir}/scene_0000_mask.png"),
        "--steps", "10", "--skip", "6", "--sites", "16x16", "--seed", "9",
        "--out", &out.to_string_lossy(),
        "--manifest", &manifest_path.to_string_lossy(),
    ]));
    assert_eq!(code, 0);

    let manifest = RunManifest::load(&manifest_path).unwrap();
    let manifest_bytes = fs::read(&manifest_path).unwrap();
    assert_eq!(manifest.outputs.len(), 1);
    let recorded_hash = manifest.outputs[0].sha256.clone();

    fs::remove_file(&out).unwrap();
    assert_eq!(run(&manifest.command), 0, "recorded command failed to replay");
    assert_eq!(sha256_file(&out).unwrap(), recorded_hash, "replayed output drifted");
    assert_eq!(fs::read(&manifest_path).unwrap(), manifest_bytes, "manifest drifted");
}

#[test]
fn invert_writes_a_replayable_latent_and_a_faithful_report() {
    let dir = tempfile::tempdir().unwrap();
    let content_dir = make_scenes(&dir.path().join("content"), "day", 3, 1);
    let latent = dir.path().join("latent.fmap");
    let report_path = dir.path().join("report.json");

    let code = run(&strs(&[
        "semstyle", "invert", "--input", &format!("{content_dir}/scene_0000.png"),
        "--steps", "10", "--seed", "7",
        "--out", &latent.to_string_lossy(),
        "--report", &report_path.to_string_lossy(),
    ]));
    assert_eq!(code, 0);

    let loaded = load_fmap(&latent).unwrap();
    assert_eq!(loaded.shape(), (3, 32, 64), "latent keeps the image shape");

    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(&report_path).unwrap()).unwrap();
    let err = report["roundtrip_max_abs_error"].as_f64().unwrap();
    assert!(err <= 1e-3, "inversion round trip error {err:.2e}");
    assert_eq!(report["steps"].as_u64(), Some(10));
    assert_eq!(
        report["latent"]["sha256"].as_str().unwrap(),
        sha256_file(&latent).unwrap(),
        "report must describe the file actually written"
    );
}

#[test]
fn transfer_can_write_tensors_instead_of_images() {
    let dir = tempfile::tempdir().unwrap();
    let content_dir = make_scenes(&dir.path().join("content"), "day", 8, 1);
    let out = dir.path().join("out.fmap");

    let code = run(&strs(&[
        "semstyle", "transfer", "--mode", "adain",
        "--content", &format!("{content_dir}/scene_0000.png"),
        "--style", &format!("{content_dir}/scene_0000.png"),
        "--steps", "6", "--skip", "3", "--sites", "16x16",
        "--out", &out.to_string_lossy(),
    ]));
    assert_eq!(code, 0);
    assert_eq!(load_fmap(&out).unwrap().shape(), (3, 32, 64));
}

#[test]
fn selftest_passes_in_process() {
    assert_eq!(run(&strs(&["semstyle", "selftest"])), 0);
}

#[test]
fn compiled_binary_reports_its_version_and_passes_the_selftest() {
    let bin = PathBuf::from(env!("CARGO_BIN_EXE_semstyle"));

    let version = Command::new(&bin).arg("--version").output().unwrap();
    assert!(version.status.success());
    let text = String::from_utf8_lossy(&version.stdout);
    assert!(
        text.contains(env!("CARGO_PKG_VERSION")),
        "--version printed: {text}"
    );

    let selftest = Command::new(&bin).arg("selftest").output().unwrap();
    assert!(
        selftest.status.success(),
        "selftest failed:\n{}",
        String::from_utf8_lossy(&selftest.stdout)
    );
}
