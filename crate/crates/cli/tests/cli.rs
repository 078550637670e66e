use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_despeckle"));
    for (k, _) in std::env::vars() {
        if k.starts_with("DESPECKLE_") {
            c.env_remove(k);
        }
    }
    c
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gradient_pgm(path: &Path, w: usize, h: usize) {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend((0..w * h).map(|i| (30 + (i * 7) % 200) as u8));
    std::fs::write(path, bytes).unwrap();
}

fn image_dir(dir: &Path, n: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        gradient_pgm(&dir.join(format!("im{i}.pgm")), 16 + 4 * i, 16);
    }
}

#[test]
fn unreachable_level_reports_category_and_exits_one() {
    let d = tempfile::tempdir().unwrap();
    let input = d.path().join("a.pgm");
    gradient_pgm(&input, 8, 8);
    let o = bin()
        .args(["corrupt", "--level", "0.25", "--input"])
        .arg(&input)
        .arg("--output")
        .arg(d.path().join("b.pgm"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: level-unreachable:"), "{}", stderr(&o));
}

#[test]
fn corrupt_at_step_zero_is_identity() {
    let d = tempfile::tempdir().unwrap();
    let input = d.path().join("a.pgm");
    let output = d.path().join("b.pgm");
    gradient_pgm(&input, 12, 8);
    let o = bin()
        .args(["corrupt", "--step", "0", "--input"])
        .arg(&input)
        .arg("--output")
        .arg(&output)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&input).unwrap(), std::fs::read(&output).unwrap());
    let manifest = std::fs::read_to_string(d.path().join("b.pgm.manifest")).unwrap();
    assert!(manifest.contains("run.subcommand=corrupt"));
    assert!(manifest.contains("step=0"));
}

#[test]
fn corrupt_is_seeded() {
    let d = tempfile::tempdir().unwrap();
    let input = d.path().join("in");
    image_dir(&input, 3);
    let run = |out: &str, seed: &str| {
        let o = bin()
            .args(["corrupt", "--level", "0.08", "--seed", seed, "--input"])
            .arg(&input)
            .arg("--output")
            .arg(d.path().join(out))
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(d.path().join(out).join("im1.pgm")).unwrap()
    };
    assert_eq!(run("a", "4"), run("b", "4"));
    assert_ne!(run("a", "4"), run("c", "5"));
}

#[test]
fn eval_reports_unmatched_names() {
    let d = tempfile::tempdir().unwrap();
    let clean = d.path().join("clean");
    let test = d.path().join("test");
    image_dir(&clean, 2);
    std::fs::create_dir_all(&test).unwrap();
    gradient_pgm(&test.join("im0.pgm"), 16, 16);
    gradient_pgm(&test.join("other.pgm"), 16, 16);
    let o = bin()
        .args(["eval", "--clean"])
        .arg(&clean)
        .arg("--test")
        .arg(&test)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.starts_with("error: contract:"), "{e}");
    assert!(e.contains("im1.pgm") && e.contains("other.pgm"), "{e}");
}

#[test]
fn eval_of_identical_sets_hits_the_psnr_cap() {
    let d = tempfile::tempdir().unwrap();
    let clean = d.path().join("clean");
    image_dir(&clean, 2);
    let o = bin()
        .args(["eval", "--clean"])
        .arg(&clean)
        .arg("--test")
        .arg(&clean)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = String::from_utf8(o.stdout).unwrap();
    assert!(csv.starts_with("image,mse,psnr_db,ssim\n"));
    assert!(csv.contains("\nmean,0.0000000000e0,100.000000,1.00000000\n"), "{csv}");
}

#[test]
fn verify_passes_and_negative_control_fails() {
    let ok = bin()
        .args(["verify", "--samples", "20000", "--grad-seeds", "1"])
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", stderr(&ok));
    let out = String::from_utf8_lossy(&ok.stdout);
    assert!(out.lines().all(|l| l.starts_with("[PASS]")), "{out}");

    let bad = bin()
        .args(["verify", "--samples", "20000", "--grad-seeds", "1", "--inject-fault"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("'martingale'"), "{}", stderr(&bad));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("[FAIL] martingale"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = bin().args(["corrupt", "--bogus"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_required_setting_names_it() {
    let o = bin().args(["train", "--out", "x.ckpt"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("'data'"), "{}", stderr(&o));
}

#[test]
fn config_file_and_environment_precedence() {
    let d = tempfile::tempdir().unwrap();
    let input = d.path().join("a.pgm");
    gradient_pgm(&input, 8, 8);
    let cfg = d.path().join("run.cfg");
    std::fs::write(&cfg, "# corrupt settings\nlevel = 0.04\nseed = 1\n").unwrap();
    let run = |out: &str, extra: &[&str], env: Option<(&str, &str)>| {
        let mut c = bin();
        c.arg("--config").arg(&cfg).arg("corrupt").args(extra);
        c.arg("--input").arg(&input).arg("--output").arg(d.path().join(out));
        if let Some((k, v)) = env {
            c.env(k, v);
        }
        let o = c.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read_to_string(d.path().join(format!("{out}.manifest"))).unwrap()
    };
    let m = run("f.pgm", &[], None);
    assert!(m.contains("\nlevel=0.04\n") && m.contains("\nseed=1\n"), "{m}");
    let m = run("g.pgm", &["--seed", "7"], None);
    assert!(m.contains("\nseed=7\n"), "{m}");
    let m = run("h.pgm", &[], Some(("DESPECKLE_SEED", "9")));
    assert!(m.contains("\nseed=9\n"), "{m}");

    std::fs::write(&cfg, "levle = 0.04\n").unwrap();
    let o = bin()
        .arg("--config")
        .arg(&cfg)
        .args(["corrupt", "--step", "1", "--input"])
        .arg(&input)
        .arg("--output")
        .arg(d.path().join("x.pgm"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("levle"), "{}", stderr(&o));
}

#[test]
fn train_then_denoise_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    image_dir(&data, 3);
    let ckpt = d.path().join("m.ckpt");
    let o = bin()
        .args([
            "train", "--epochs", "2", "--batch", "2", "--patch", "16", "--base-width", "4",
            "--emb-dim", "4", "--checkpoint-interval", "1", "--data",
        ])
        .arg(&data)
        .arg("--out")
        .arg(&ckpt)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.path().join("m.ckpt.epoch-1").exists());
    assert!(!d.path().join("m.ckpt.epoch-2").exists());
    let manifest = std::fs::read_to_string(d.path().join("m.ckpt.manifest")).unwrap();
    assert!(manifest.contains("run.checkpoint_id=sha256:"));

    // The manifest replays as a config file.
    let again = d.path().join("again.ckpt");
    let o = bin()
        .arg("--config")
        .arg(d.path().join("m.ckpt.manifest"))
        .args(["train", "--out"])
        .arg(&again)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&again).unwrap());

    for method in ["ode", "ddim", "stochastic"] {
        let out = d.path().join(format!("out-{method}"));
        let o = bin()
            .args(["denoise", "--step", "20", "--zeta", "0.5", "--method", method, "--checkpoint"])
            .arg(&ckpt)
            .arg("--input")
            .arg(&data)
            .arg("--output")
            .arg(&out)
            .output()
            .unwrap();
        assert!(o.status.success(), "{method}: {}", stderr(&o));
        for i in 0..3 {
            assert!(out.join(format!("im{i}.pgm")).exists());
        }
    }

    let o = bin()
        .args(["denoise", "--step", "501", "--checkpoint"])
        .arg(&ckpt)
        .arg("--input")
        .arg(&data)
        .arg("--output")
        .arg(d.path().join("never"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: level-unreachable:"), "{}", stderr(&o));
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let d = tempfile::tempdir().unwrap();
    let ckpt = d.path().join("bad.ckpt");
    std::fs::write(&ckpt, b"GBMD\x01\x00").unwrap();
    let input = d.path().join("a.pgm");
    gradient_pgm(&input, 8, 8);
    let o = bin()
        .args(["denoise", "--step", "1", "--checkpoint"])
        .arg(&ckpt)
        .arg("--input")
        .arg(&input)
        .arg("--output")
        .arg(d.path().join("b.pgm"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: corrupt-checkpoint:"), "{}", stderr(&o));
}
