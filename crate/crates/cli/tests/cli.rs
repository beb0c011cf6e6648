use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn qfm(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_qfm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run qfm");
    out
}

fn ok(args: &[&str]) -> String {
    let out = qfm(args);
    assert!(
        out.status.success(),
        "qfm {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn gen(dir: &Path, name: &str, seed: &str, unlabeled: bool) -> String {
    let out = dir.join(name);
    let mut args = vec![
        "gen-data",
        "--contents",
        "6",
        "--distortions-per-content",
        "4",
        "--image-size",
        "16",
        "--seed",
        seed,
        "--name",
        name,
        "--out",
        out.to_str().unwrap(),
    ];
    if unlabeled {
        args.push("--unlabeled");
    }
    ok(&args);
    out.join("manifest.csv").display().to_string()
}

const MODEL: &str = "
[model.encoder]
image_size = 16
patch_size = 8
embed_dim = 16
num_layers = 1
num_heads = 2
mlp_ratio = 2

[optim]
epochs = 1
batch_size = 4
lr = 0.001
";

#[test]
fn end_to_end_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let train = gen(d, "lab", "1", false);
    let other = gen(d, "other", "2", false);
    let pool = gen(d, "pool", "3", true);
    assert_eq!(fs::read_to_string(&train).unwrap().lines().filter(|l| l.starts_with("lab-")).count(), 24);

    // teacher on its own manifest
    let teacher_cfg = d.join("teacher.toml");
    fs::write(&teacher_cfg, MODEL).unwrap();
    let teacher = d.join("teacher.ckpt");
    let s = ok(&[
        "pretrain-teacher",
        "--config",
        teacher_cfg.to_str().unwrap(),
        "--manifest",
        &other,
        "--out",
        teacher.to_str().unwrap(),
    ]);
    assert!(s.contains("sha256"), "{s}");

    let cfg = d.join("run.toml");
    fs::write(
        &cfg,
        format!(
            "{MODEL}\n[qfm]\nlambda1 = 0.1\nlambda2 = 0.1\nk_a = 2\n\n[dle]\nenabled = true\nteacher = {:?}\npool = {:?}\n\n[data]\ntrain = {:?}\n",
            teacher.display().to_string(),
            pool,
            train
        ),
    )
    .unwrap();
    let run = d.join("run");
    ok(&["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    for f in ["model.ckpt", "report.txt", "report.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let ckpt = run.join("model.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let e = ok(&["eval", "--checkpoint", ckpt, "--manifest", &other]);
    assert!(e.starts_with("other:") && e.contains("srcc"), "{e}");

    // the training manifest name is read back from the checkpoint
    let x = ok(&["cross-eval", "--checkpoint", ckpt, "--manifest", &other]);
    assert!(x.contains("other:"));
    assert!(!qfm(&["cross-eval", "--checkpoint", ckpt, "--manifest", &train]).status.success());
    ok(&["cross-eval", "--checkpoint", ckpt, "--manifest", &train, "--allow-same"]);

    let m = ok(&["match-debug", "--checkpoint", ckpt, "--manifest", &train, "--batch", "5", "-k", "2"]);
    assert_eq!(m.lines().count(), 5);
    assert!(m.lines().all(|l| l.matches("S ").count() == 2), "{m}");

    let cj = d.join("confusion.json");
    let cs = d.join("confusion.svg");
    ok(&[
        "confusion",
        "--checkpoint",
        ckpt,
        "--manifest",
        &other,
        "--json",
        cj.to_str().unwrap(),
        "--svg",
        cs.to_str().unwrap(),
    ]);
    assert!(fs::read_to_string(&cs).unwrap().starts_with("<svg"));

    let plots = d.join("plots");
    ok(&[
        "report",
        "--run",
        run.join("report.json").to_str().unwrap(),
        "--confusion",
        cj.to_str().unwrap(),
        "--out",
        plots.to_str().unwrap(),
    ]);
    for f in ["report.txt", "epochs.svg", "confusion.svg"] {
        assert!(plots.join(f).exists(), "{f} missing");
    }
}

#[test]
fn sweep_writes_one_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let train = gen(d, "lab", "4", false);
    let cfg = d.join("run.toml");
    fs::write(&cfg, format!("{MODEL}\n[data]\ntrain = {train:?}\n")).unwrap();
    let out = d.join("sweep");
    ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--sweep",
        "--ks",
        "1,2",
        "--lambdas",
        "0.1",
    ]);
    let table = fs::read_to_string(out.join("sweep.txt")).unwrap();
    // header plus two K rows and one row for each lambda
    assert_eq!(table.lines().count(), 5, "{table}");
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = qfm(&["eval", "--checkpoint", "nope.ckpt", "--manifest", missing.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.ckpt"));
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[optim]\nlr = \"fast\"\n").unwrap();
    let out = qfm(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
}
