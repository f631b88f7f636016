use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn glca(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glca"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn glca")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn tiny_config(dir: &Path) {
    fs::write(
        dir.join("tiny.conf"),
        "# a few steps on a handful of scenes\nsteps = 4\ntrain_images = 3\ntest_images = 2\nlr_global = 0.01\n",
    )
    .unwrap();
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path());
    for out in ["a", "b"] {
        let o = glca(dir.path(), &["--config", "tiny.conf", "--seed", "3", "gen-data", "--out", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for split in ["train", "test"] {
        let names: Vec<_> = fs::read_dir(dir.path().join("a").join(split))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert!(!names.is_empty());
        for name in names {
            let a = fs::read(dir.path().join("a").join(split).join(&name)).unwrap();
            let b = fs::read(dir.path().join("b").join(split).join(&name)).unwrap();
            assert_eq!(a, b, "{split}/{name:?}");
        }
    }
}

#[test]
fn train_infer_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path());
    let p = dir.path();
    assert_eq!(code(&glca(p, &["--config", "tiny.conf", "gen-data", "--out", "data"])), 0);

    let t1 = glca(p, &["--config", "tiny.conf", "--deterministic", "train", "--data", "data", "--out", "r1"]);
    assert_eq!(code(&t1), 0, "{}", String::from_utf8_lossy(&t1.stderr));
    let t2 = glca(p, &["--config", "tiny.conf", "--deterministic", "train", "--data", "data", "--out", "r2"]);
    assert_eq!(code(&t2), 0);
    for f in ["train.jsonl", "model.json", "run.conf"] {
        assert_eq!(fs::read(p.join("r1").join(f)).unwrap(), fs::read(p.join("r2").join(f)).unwrap(), "{f}");
    }
    let log = fs::read_to_string(p.join("r1/train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(!log.contains("step_ms"));

    let inf = glca(p, &["infer", "--ckpt", "r1/model.json", "--input", "data/test", "--out", "pred", "--overlay"]);
    assert_eq!(code(&inf), 0, "{}", String::from_utf8_lossy(&inf.stderr));
    assert!(p.join("pred/0000.pgm").exists());
    assert!(p.join("pred/0000_overlay.ppm").exists());
    let stdout = String::from_utf8(inf.stdout).unwrap();
    assert!(stdout.contains("\"transient_peak\""));

    let ev = glca(p, &["eval", "--pred", "pred", "--gt", "data/test"]);
    assert_eq!(code(&ev), 0);
    let lines: Vec<&str> = std::str::from_utf8(&ev.stdout).unwrap().lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("{\"image\":\"summary\""));
}

#[test]
fn patch_and_global_agree_on_one_tile() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("one.conf"), "image_height = 32\nimage_width = 32\ntrain_images = 1\ntest_images = 1\nsteps = 1\n")
        .unwrap();
    assert_eq!(code(&glca(p, &["--config", "one.conf", "gen-data", "--out", "data"])), 0);
    assert_eq!(code(&glca(p, &["--config", "one.conf", "train", "--data", "data", "--out", "run"])), 0);
    for mode in ["patch", "global"] {
        let o = glca(p, &["--mode", mode, "infer", "--ckpt", "run/model.json", "--input", "data/test/0000.ppm", "--out", mode]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(p.join("patch/0000.pgm")).unwrap(), fs::read(p.join("global/0000.pgm")).unwrap());
}

#[test]
fn tile_prints_the_plan() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("uhr.conf"), "patch = 500\noverlap = 50\nglobal_size = 500\n").unwrap();
    let o = glca(dir.path(), &["--config", "uhr.conf", "tile", "--height", "2448", "--width", "2448", "--plan"]);
    assert_eq!(code(&o), 0);
    let plan: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(plan["origins"].as_array().unwrap().len(), 36);
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let ok = glca(dir.path(), &["gradcheck"]);
    assert_eq!(code(&ok), 0);
    let report: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(report["passed"], true);

    let one = glca(dir.path(), &["gradcheck", "--d-model", "1"]);
    assert_eq!(code(&one), 0);

    let bad = glca(dir.path(), &["gradcheck", "--corrupt"]);
    assert_eq!(code(&bad), 4);
}

#[test]
fn exit_codes_classify_failures() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("typo.conf"), "patchh = 16\n").unwrap();
    let o = glca(p, &["--config", "typo.conf", "tile", "--height", "8", "--width", "8"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("`patchh`"));

    fs::write(p.join("bad.conf"), "overlap = 40\n").unwrap();
    assert_eq!(code(&glca(p, &["--config", "bad.conf", "tile", "--height", "8", "--width", "8"])), 2);

    assert_eq!(code(&glca(p, &["frobnicate"])), 2);
    assert_eq!(code(&glca(p, &["--mode", "sideways", "tile", "--height", "8", "--width", "8"])), 2);

    assert_eq!(code(&glca(p, &["infer", "--ckpt", "missing.json", "--input", "x.ppm", "--out", "o"])), 3);
    fs::write(p.join("broken.json"), "{\"format\": 1}").unwrap();
    assert_eq!(code(&glca(p, &["infer", "--ckpt", "broken.json", "--input", "x.ppm", "--out", "o"])), 3);
    assert_eq!(code(&glca(p, &["train", "--data", "nowhere", "--out", "o"])), 3);
}
