use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lfesi::esi::read_pfm;
use lfesi::lf::{save_lightfield, LfDims, LightFieldVideo, StorageFormat};

const DEMO: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/demo_scene.txt");
const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/demo_esi_t0000.pfm");

fn lfesi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfesi"))
        .args(args)
        .env("LF_ESI_THREADS", "1")
        .output()
        .expect("spawning lfesi")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn ok(args: &[&str]) -> String {
    let out = lfesi(args);
    assert!(
        out.status.success(),
        "lfesi {args:?}: {}",
        text(&out.stderr)
    );
    text(&out.stdout)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, spec: &str, name: &str) -> PathBuf {
    let out = dir.join(name);
    ok(&["synth", "--spec", spec, "--out", s(&out), "--seed", "0"]);
    out
}

#[test]
fn synth_writes_scene_and_boxes() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), DEMO, "a");
    let b = synth(dir.path(), DEMO, "b");
    for f in [
        "scene.lft",
        "gt.txt",
        "disparity_t0000.pfm",
        "disparity_t0001.pfm",
    ] {
        assert!(a.join(f).is_file(), "{f} missing");
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let gt = fs::read_to_string(a.join("gt.txt")).unwrap();
    assert_eq!(gt.lines().count(), 4);
}

#[test]
fn oversized_disparity_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("wide.txt");
    let scene = fs::read_to_string(DEMO)
        .unwrap()
        .replace("layer.0.disparity=1.5", "layer.0.disparity=9");
    fs::write(&spec, scene).unwrap();
    let out = lfesi(&[
        "synth",
        "--spec",
        s(&spec),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        text(&out.stderr).contains("min(H, W)/4"),
        "{}",
        text(&out.stderr)
    );
}

#[test]
fn constant_field_has_zero_structure() {
    let dir = tempfile::tempdir().unwrap();
    let lf = LightFieldVideo::constant(LfDims::new(2, 5, 5, 16, 16, 3), 0.3).unwrap();
    let path = dir.path().join("flat.lft");
    save_lightfield(&lf, &path, StorageFormat::Packed).unwrap();
    let stdout = ok(&["esi", "--lf", s(&path), "--out", s(&dir.path().join("e"))]);
    assert_eq!(stdout.lines().count(), 2);
    assert!(stdout.lines().all(|l| l.contains(" max=0 ")), "{stdout}");
}

#[test]
fn sum_is_three_means_and_default_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(dir.path(), DEMO, "scene");
    let lft = scene.join("scene.lft");
    let run = |variant: &str| {
        let out = dir.path().join(variant);
        let set = format!("esi_variant={variant}");
        ok(&[
            "esi",
            "--lf",
            s(&lft),
            "--out",
            s(&out),
            "--set",
            &set,
            "--png",
        ]);
        out
    };
    let (sum, mean, default) = (run("sum"), run("mean"), run("esi"));
    let a = read_pfm(sum.join("esi_t0000.pfm")).unwrap();
    let b = read_pfm(mean.join("esi_t0000.pfm")).unwrap();
    let ratio = a.stats().1 / b.stats().1;
    assert!((ratio - 3.0).abs() <= 1e-4, "ratio {ratio}");
    assert!(sum.join("esi_t0001.png").is_file());
    assert_eq!(
        fs::read(default.join("esi_t0000.pfm")).unwrap(),
        fs::read(GOLDEN).unwrap()
    );
}

#[test]
fn gradcheck_passes() {
    let stdout = ok(&["gradcheck", "--set", "gc_per_param=2"]);
    assert_eq!(stdout.matches(" ok").count(), 3, "{stdout}");
}

#[test]
fn perfect_prediction_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(dir.path(), DEMO, "scene");
    let gt = scene.join("gt.txt");
    let pred = dir.path().join("pred.txt");
    let rows: String = fs::read_to_string(&gt)
        .unwrap()
        .lines()
        .filter(|l| l.split_whitespace().nth(1) == Some("0"))
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            format!("{} {} {} {} {} 1\n", f[0], f[2], f[3], f[4], f[5])
        })
        .collect();
    fs::write(&pred, rows).unwrap();
    let report = dir.path().join("m.txt");
    let stdout = ok(&[
        "eval",
        "--pred",
        s(&pred),
        "--gt",
        s(&gt),
        "--out",
        s(&report),
    ]);
    assert!(stdout.contains("success=1\n"), "{stdout}");
    assert!(stdout.contains("precision=1\n"), "{stdout}");
    assert_eq!(fs::read_to_string(report).unwrap(), stdout);
}

#[test]
fn track_needs_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = lfesi(&[
        "track",
        "--data",
        s(dir.path()),
        "--out",
        s(&dir.path().join("r.txt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("--checkpoint"));
}

#[test]
fn unknown_config_key_is_an_input_error() {
    let out = lfesi(&["gradcheck", "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_lists_the_config_keys() {
    for (sub, keys) in [
        ("esi", &["esi_step", "esi_variant", "channel_policy"][..]),
        (
            "train",
            &["steps", "lr", "toy_videos", "mask_rate", "gas"][..],
        ),
        ("track", &["target_layer", "heads"][..]),
        ("eval", &["target_layer"][..]),
        ("gradcheck", &["gc_tol", "gc_eps", "seed"][..]),
        ("synth", &["layer.N.disparity"][..]),
    ] {
        let stdout = ok(&[sub, "--help"]);
        for k in keys {
            assert!(stdout.contains(k), "{sub} --help lacks {k}");
        }
    }
}

#[test]
fn train_then_track_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(dir.path(), DEMO, "scene");
    let model = dir.path().join("model");
    ok(&[
        "train",
        "--out",
        s(&model),
        "--set",
        "steps=2",
        "--set",
        "toy_videos=1",
        "--set",
        "toy_size=64",
        "--set",
        "search_side=64",
    ]);
    for f in ["model.atin", "run.cfg", "loss.csv"] {
        assert!(model.join(f).is_file(), "{f} missing");
    }
    assert_eq!(
        fs::read_to_string(model.join("loss.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );
    let results = dir.path().join("r.txt");
    let dump = dir.path().join("rel");
    ok(&[
        "track",
        "--checkpoint",
        s(&model.join("model.atin")),
        "--data",
        s(&scene),
        "--out",
        s(&results),
        "--dump-relations",
        s(&dump),
    ]);
    let rows = fs::read_to_string(&results).unwrap();
    assert_eq!(rows.lines().count(), 2);
    let pbm = fs::read_to_string(dump.join("relation_l0.pbm")).unwrap();
    assert!(pbm.starts_with("P1\n"));
    ok(&[
        "eval",
        "--pred",
        s(&results),
        "--gt",
        s(&scene.join("gt.txt")),
    ]);
}
