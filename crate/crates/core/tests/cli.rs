use std::path::Path;
use std::process::{Command, Output};

fn longflair(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_longflair"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = "
[model.generator]
base_channels = 2
[model.discriminator]
base_channels = 2
[train]
batch_size = 4
";

#[test]
fn usage_errors_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    assert_eq!(code(&longflair(p, &["--help"])), 0);
    assert_eq!(code(&longflair(p, &["--version"])), 0);
    assert_eq!(code(&longflair(p, &["bogus"])), 1);
    assert_eq!(code(&longflair(p, &["phantom", "--preset", "huge"])), 1);
    assert_eq!(code(&longflair(p, &["train", "--arch", "gan"])), 1);
    let o = longflair(p, &["train"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("manifest"));
    let o = longflair(
        p,
        &["predict", "--checkpoint", "x", "--mprage", "a", "--t2", "b", "--pd", "c", "--flair", "d", "--days", "0"],
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn runtime_failures_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let o = longflair(p, &["train", "--manifest", "missing.csv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.csv"));
    let o = longflair(
        p,
        &["predict", "--checkpoint", "none", "--mprage", "a", "--t2", "b", "--pd", "c", "--flair", "d", "--days", "30"],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn phantom_to_evaluation_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let o = longflair(p, &["phantom", "--out", "data", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = std::fs::read_to_string(p.join("data/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 12 * 4);

    std::fs::write(p.join("tiny.toml"), TINY).unwrap();
    let o = longflair(
        p,
        &["train", "--config", "tiny.toml", "--manifest", "data/manifest.csv", "--arch", "acgan", "--max-steps", "2", "--out", "run"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["config.toml", "folds.json", "metrics.jsonl", "best.ckpt", "best.json", "final.ckpt"] {
        assert!(p.join("run").join(f).is_file(), "{f} missing");
    }
    let cfg = std::fs::read_to_string(p.join("run/config.toml")).unwrap();
    assert!(cfg.contains("arch = \"acgan\""));
    let log = std::fs::read_to_string(p.join("run/metrics.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["epoch"], 0);
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(last["steps"], 2);
    assert!(last["train"]["g_cls"].is_number());

    let src = |m: &str| format!("data/P01_t1_{m}.nii");
    let (a, b, c, e) = (src("mprage"), src("t2"), src("pd"), src("flair"));
    let o = longflair(
        p,
        &[
            "predict", "--checkpoint", "run/best", "--mprage", &a, "--t2", &b, "--pd", &c, "--flair", &e, "--days", "730",
            "--target", "data/P01_t3_flair.nii", "--preview", "preview.png", "--out", "pred/P01.nii.gz",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("psnr_db"));
    let png = std::fs::read(p.join("preview.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");

    std::fs::create_dir(p.join("ref")).unwrap();
    std::fs::copy(p.join("data/P01_t3_flair.nii"), p.join("ref/P01.nii")).unwrap();
    let o = longflair(p, &["evaluate", "--pred", "pred", "--ref", "ref", "--out", "metrics.csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(p.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("volume_id,psnr_db,nmse,ssim\nP01,"));

    std::fs::copy(p.join("data/P02_t3_flair.nii"), p.join("ref/P02.nii")).unwrap();
    let o = longflair(p, &["evaluate", "--pred", "pred", "--ref", "ref"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("P02"));
}

#[test]
fn crossval_writes_reports() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    assert_eq!(code(&longflair(p, &["phantom", "--out", "data", "--format", "vol"])), 0);
    std::fs::write(p.join("tiny.toml"), TINY).unwrap();
    let o = longflair(
        p,
        &["crossval", "--config", "tiny.toml", "--manifest", "data/manifest.csv", "--folds", "1", "--out", "cv"],
    );
    assert_eq!(code(&o), 1);
    let o = longflair(
        p,
        &[
            "crossval", "--config", "tiny.toml", "--manifest", "data/manifest.csv", "--folds", "2", "--arch", "unet",
            "--max-steps", "1", "--out", "cv",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(p.join("cv/crossval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("cv/crossval.json")).unwrap()).unwrap();
    assert_eq!(json["k"], 2);
    assert_eq!(json["arch"], "unet");
}

#[test]
fn fold_override_is_honoured() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    assert_eq!(code(&longflair(p, &["phantom", "--out", "data", "--format", "vol"])), 0);
    std::fs::write(p.join("tiny.toml"), TINY).unwrap();
    let map: serde_json::Map<String, serde_json::Value> =
        (1..=12).map(|i| (format!("P{i:02}"), serde_json::json!(usize::from(i > 10)))).collect();
    std::fs::write(p.join("folds.json"), serde_json::Value::Object(map).to_string()).unwrap();
    let o = longflair(
        p,
        &[
            "train", "--config", "tiny.toml", "--manifest", "data/manifest.csv", "--folds", "2", "--fold-override",
            "folds.json", "--fold", "1", "--arch", "unet", "--max-steps", "1", "--out", "run",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let folds: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("run/folds.json")).unwrap()).unwrap();
    assert_eq!(folds["assignment"]["P11"], 1);
    assert_eq!(folds["assignment"]["P10"], 0);
}
