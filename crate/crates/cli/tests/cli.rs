use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mface(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mface"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn mface")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

const SMALL: &str = "[camera]\nwidth = 128\nheight = 128\n\n[fit]\nstage1_iters = 40\nstage2_iters = 40\n";

#[test]
fn synth_fit_render_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("small.toml"), SMALL).unwrap();
    let common = ["--config", "small.toml", "--vertices", "150", "--seed", "4"];

    let mut args = common.to_vec();
    args.extend(["synth", "--faces", "2", "--out-dir", "s", "--save-bundle"]);
    ok(&mface(&args, d));
    for f in ["image.png", "mask.pgm", "landmarks.txt", "scene.txt", "centers.txt", "heatmap.pgm", "bundle.mf3d"] {
        assert!(d.join("s").join(f).exists(), "{f} missing");
    }

    let fit = [
        "--config", "small.toml", "--bundle", "s/bundle.mf3d",
        "fit", "--image", "s/image.png", "--mask", "s/mask.pgm", "--landmarks", "s/landmarks.txt",
        "--centers", "s/centers.txt", "--out", "fit.txt", "--trace", "trace.csv",
    ];
    ok(&mface(&fit, d));
    let trace = fs::read_to_string(d.join("trace.csv")).unwrap();
    assert!(trace.lines().count() > 80);

    let eval = ["--bundle", "s/bundle.mf3d", "eval-nme", "--pred", "fit.txt", "--gt", "s/scene.txt"];
    let out = mface(&eval, d);
    ok(&out);
    let csv = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())).collect();
    assert_eq!(rows.len(), 2, "{csv}");
    for r in rows {
        let nme: f64 = r.split(',').nth(1).unwrap().parse().unwrap();
        assert!(nme.is_finite() && nme < 20.0, "{r}");
    }

    let render = [
        "--bundle", "s/bundle.mf3d", "render", "--scene", "s/scene.txt", "--out", "r.png",
        "--mask-out", "r.pgm",
    ];
    ok(&mface(&render, d));
    assert_eq!(fs::read(d.join("r.pgm")).unwrap(), fs::read(d.join("s/mask.pgm")).unwrap());
    assert_eq!(fs::read(d.join("r.png")).unwrap(), fs::read(d.join("s/image.png")).unwrap());
}

#[test]
fn detect_peaks_finds_synthetic_centers() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("small.toml"), SMALL).unwrap();
    ok(&mface(&["--config", "small.toml", "--vertices", "80", "synth", "--faces", "3", "--out-dir", "s"], d));
    let out = mface(&["detect-peaks", "--heatmap", "s/heatmap.pgm"], d);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let peaks = text.lines().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())).count();
    assert_eq!(peaks, 3, "{text}");
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.toml"), "[weights]\npix = -1.0\n").unwrap();
    let out = mface(&["--config", "bad.toml", "synth", "--out-dir", "s"], d);
    assert_eq!(out.status.code(), Some(2));
    fs::write(d.join("typo.toml"), "[fit]\nstage_one = 3\n").unwrap();
    let out = mface(&["--config", "typo.toml", "synth", "--out-dir", "s"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mface(&["--vertices", "40", "render", "--scene", "nope.txt", "--out", "x.png"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}
