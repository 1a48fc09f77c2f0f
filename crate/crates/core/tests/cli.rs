use std::fs;
use std::path::Path;
use std::process::Command;

use minugraph::evaluation::MetricsReport;
use minugraph::io::{load_checkpoint, read_epoch_log, RunConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_minugraph"))
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = bin().args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_spec(dir: &Path, identities: usize, impressions: usize) -> std::path::PathBuf {
    let p = dir.join(format!("spec_{identities}_{impressions}.json"));
    let body = format!(
        r#"{{"identities": {identities}, "impressions": {impressions}, "min_minutiae": 12, "max_minutiae": 16, "seed": 5}}"#
    );
    fs::write(&p, body).unwrap();
    p
}

fn write_config(dir: &Path, name: &str, edit: impl FnOnce(&mut RunConfig)) -> std::path::PathBuf {
    let mut c = RunConfig::default();
    c.model.width = 8;
    c.model.embed_dim = 12;
    c.model.trm_layers = 2;
    c.model.cam_layers = 2;
    c.model.k_minutia = 4;
    c.model.k_fingerprint = 3;
    c.model.ffm_hidden = 16;
    c.train.epochs = 2;
    c.train.identities_per_batch = 3;
    c.train.impressions_per_identity = 3;
    c.train.learning_rate = 1e-3;
    c.train.schedule_horizon = Some(50);
    edit(&mut c);
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(&c).unwrap()).unwrap();
    p
}

#[test]
fn gen_data_writes_one_line_per_impression_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"identities": 100, "impressions": 4, "seed": 0}"#).unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    assert_eq!(run(&["gen-data", "--spec", s(&spec), "--out", s(&a)]).0, 0);
    assert_eq!(run(&["gen-data", "--spec", s(&spec), "--out", s(&b)]).0, 0);
    let text = fs::read(&a).unwrap();
    assert_eq!(String::from_utf8_lossy(&text).lines().count(), 400);
    assert_eq!(text, fs::read(&b).unwrap());

    let c = dir.path().join("c.jsonl");
    assert_eq!(
        run(&["gen-data", "--spec", s(&spec), "--out", s(&c), "--seed", "1"]).0,
        0
    );
    assert_ne!(text, fs::read(&c).unwrap());
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), 5, 1);
    let out = dir.path().join("d.jsonl");
    let (code, _, err) = run(&["gen-data", "--spec", s(&spec), "--out", s(&out)]);
    assert_eq!(code, 1, "{err}");
    assert!(!out.exists());

    assert_eq!(run(&["train", "--bogus"]).0, 1);
    assert_eq!(run(&["grad-check", "--inject-fault", "nothing"]).0, 1);

    let bad = write_config(dir.path(), "bad.json", |c| c.train.margin = -1.0);
    let data = dir.path().join("ok.jsonl");
    assert_eq!(
        run(&[
            "gen-data",
            "--spec",
            s(&write_spec(dir.path(), 4, 4)),
            "--out",
            s(&data)
        ])
        .0,
        0
    );
    let ck = dir.path().join("m.ckpt");
    let (code, _, err) = run(&["train", "--data", s(&data), "--config", s(&bad), "--out", s(&ck)]);
    assert_eq!(code, 1, "{err}");
}

#[test]
fn train_resume_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    assert_eq!(
        run(&[
            "gen-data",
            "--spec",
            s(&write_spec(dir.path(), 6, 4)),
            "--out",
            s(&data)
        ])
        .0,
        0
    );
    let cfg = write_config(dir.path(), "c.json", |_| {});
    let full = dir.path().join("full.ckpt");
    let (code, _, err) = run(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&full)]);
    assert_eq!(code, 0, "{err}");
    let log = read_epoch_log(&dir.path().join("full.ckpt.log.jsonl")).unwrap();
    assert_eq!(log.len(), 2);
    assert_eq!(log[0].epoch, 1);

    let one = write_config(dir.path(), "one.json", |c| c.train.epochs = 1);
    let part = dir.path().join("part.ckpt");
    assert_eq!(
        run(&["train", "--data", s(&data), "--config", s(&one), "--out", s(&part)]).0,
        0
    );
    let resumed = dir.path().join("resumed.ckpt");
    let (code, _, err) = run(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&resumed),
        "--resume",
        s(&part),
    ]);
    assert_eq!(code, 0, "{err}");
    let (a, b) = (load_checkpoint(&full).unwrap(), load_checkpoint(&resumed).unwrap());
    assert_eq!(a.to_bytes(), b.to_bytes());

    let metrics = dir.path().join("m.json");
    let (code, _, err) = run(&[
        "eval",
        "--data",
        s(&data),
        "--checkpoint",
        s(&full),
        "--far",
        "0.1",
        "--topk",
        "1,2",
        "--out",
        s(&metrics),
    ]);
    assert_eq!(code, 0, "{err}");
    let report: MetricsReport = serde_json::from_slice(&fs::read(&metrics).unwrap()).unwrap();
    assert_eq!(report.score_counts.genuine, 18);
    assert_eq!(report.score_counts.impostor, 90);
    assert!((0.0..=1.0).contains(&report.eer));
}

#[test]
fn resume_rejects_a_different_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    run(&[
        "gen-data",
        "--spec",
        s(&write_spec(dir.path(), 4, 4)),
        "--out",
        s(&data),
    ]);
    let cfg = write_config(dir.path(), "c.json", |c| c.train.epochs = 1);
    let ck = dir.path().join("a.ckpt");
    assert_eq!(
        run(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ck)]).0,
        0
    );
    let other = write_config(dir.path(), "o.json", |c| c.model.width = 6);
    let out = dir.path().join("b.ckpt");
    let (code, _, _) = run(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&other),
        "--out",
        s(&out),
        "--resume",
        s(&ck),
    ]);
    assert_eq!(code, 1);
}

#[test]
fn one_to_one_split_scores_every_pair() {
    let dir = tempfile::tempdir().unwrap();
    // no perturbation: every impression repeats its template exactly
    let spec = dir.path().join("spec.json");
    let body = r#"{"identities": 12, "impressions": 2, "min_minutiae": 12, "max_minutiae": 16, "seed": 2,
        "perturb": {"rotation_deg": 0.0, "translation": 0.0, "jitter": 0.0, "orientation_jitter_deg": 0.0,
                    "dropout": 0.0, "spurious_min": 0, "spurious_max": 0}}"#;
    fs::write(&spec, body).unwrap();
    let data = dir.path().join("d.jsonl");
    assert_eq!(run(&["gen-data", "--spec", s(&spec), "--out", s(&data)]).0, 0);
    let cfg = write_config(dir.path(), "c.json", |c| {
        c.train.epochs = 0;
        c.model.k_fingerprint = 4;
    });
    let ck = dir.path().join("m.ckpt");
    assert_eq!(
        run(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ck)]).0,
        0
    );
    let metrics = dir.path().join("m.json");
    let (code, _, err) = run(&[
        "eval",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ck),
        "--far",
        "0.01",
        "--topk",
        "1,12",
        "--gallery-split",
        "1/1",
        "--out",
        s(&metrics),
    ]);
    assert_eq!(code, 0, "{err}");
    let report: MetricsReport = serde_json::from_slice(&fs::read(&metrics).unwrap()).unwrap();
    assert_eq!(report.score_counts.genuine, 12);
    assert_eq!(report.score_counts.impostor, 132);
    // the probe's CAM context includes its duplicate, the gallery copy's
    // does not, so exact self-matching is not guaranteed
    assert!(report.topk[&1] > 0.5, "{:?}", report.topk);
    assert_eq!(report.topk[&12], 1.0);
}

#[test]
fn grad_check_exit_codes() {
    let (code, out, _) = run(&["grad-check", "--seed", "2"]);
    assert_eq!(code, 0, "{out}");
    assert_eq!(out.lines().count(), 8);
    let (code, out, _) = run(&["grad-check", "--inject-fault", "ffm"]);
    assert_eq!(code, 2);
    assert!(out.lines().any(|l| l.starts_with("ffm") && l.ends_with("FAIL")));
}

#[test]
fn sweep_writes_a_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    run(&[
        "gen-data",
        "--spec",
        s(&write_spec(dir.path(), 6, 4)),
        "--out",
        s(&data),
    ]);
    let cfg = write_config(dir.path(), "c.json", |_| {});
    let out = dir.path().join("sweep.csv");
    let args = [
        "sweep",
        "--param",
        "neighbors",
        "--values",
        "2,3",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--epochs",
        "1",
        "--far",
        "0.1",
    ];
    let (code, _, err) = run(&args);
    assert_eq!(code, 0, "{err}");
    let table = fs::read_to_string(&out).unwrap();
    let lines: Vec<_> = table.lines().collect();
    assert_eq!(lines[0], "param,value,tar_at_far,eer,top1");
    assert!(lines[1].starts_with("neighbors,2,"));
    assert!(lines[2].starts_with("neighbors,3,"));
    assert_eq!(run(&args).0, 0);
    assert_eq!(table, fs::read_to_string(&out).unwrap());
}
