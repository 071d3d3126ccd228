//! The `sdvit` binary driven end to end on a tiny experiment.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sdvit::analysis::parse_ppm;
use sdvit::cli::Comparison;
use sdvit::protocol::RunReport;

fn sdvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdvit"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = sdvit(args);
    assert!(
        out.status.success(),
        "sdvit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"{
  "model": {"image_size": 32, "channels": 3, "patch_size": 8, "embed_dim": 16,
            "num_heads": 2, "num_blocks": 4, "mlp_ratio": 2, "num_classes": 7},
  "train": {"steps": 12, "eval_interval": 4, "batch_size": 8,
            "optimizer": {"lr": 0.001},
            "distill": {"lambda": 0.2, "tau": 5.0, "detach_teacher": true, "selection": "range:0-3"}},
  "grid": {"lambdas": [0.2], "taus": [5.0]},
  "trials": 2
}"#;

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&[
        "gen-data",
        "--out",
        p(&a),
        "--per-class",
        "2",
        "--seed",
        "5",
    ]);
    ok(&[
        "gen-data",
        "--out",
        p(&b),
        "--per-class",
        "2",
        "--seed",
        "5",
    ]);
    for domain in ["photo", "cartoon", "sketch", "art"] {
        let ma = fs::read(a.join(domain).join("manifest.json")).unwrap();
        let mb = fs::read(b.join(domain).join("manifest.json")).unwrap();
        assert_eq!(ma, mb, "{domain}");
        let m: serde_json::Value = serde_json::from_slice(&ma).unwrap();
        assert_eq!(m["count"], 14);
    }
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    ok(&["gen-data", "--out", p(&data), "--per-class", "3"]);
    let cfg = root.join("tiny.json");
    fs::write(&cfg, TINY).unwrap();

    let sd = root.join("sd");
    let erm = root.join("erm");
    let common = [
        "--config",
        p(&cfg),
        "--target",
        "sketch",
        "--data",
        p(&data),
    ];
    ok(&[&["train"][..], &common, &["--out", p(&sd)]].concat());
    ok(&[&["train"][..], &common, &["--out", p(&erm), "--erm"]].concat());

    let report: RunReport =
        serde_json::from_slice(&fs::read(sd.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.method, "ERM-SDViT");
    assert_eq!(report.selection.to_string(), "range:0-3");
    assert_eq!((report.lambda, report.tau), (0.2, 5.0));
    assert_eq!(report.trials.len(), 2);
    assert_eq!(report.sources, ["photo", "cartoon", "art"]);
    let raw: serde_json::Value =
        serde_json::from_slice(&fs::read(sd.join("report.json")).unwrap()).unwrap();
    assert_eq!(raw["selection"], "range:0-3");
    let erm_report: RunReport =
        serde_json::from_slice(&fs::read(erm.join("report.json")).unwrap()).unwrap();
    assert_eq!(erm_report.method, "ERM-ViT");
    assert_eq!(erm_report.selection.to_string(), "none");
    let cells = fs::read_to_string(sd.join("cells.csv")).unwrap();
    assert_eq!(cells.lines().count(), 3);

    let ckpt = sd.join("checkpoint.sdvt");
    let sketch = data.join("sketch");
    let eval: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&sketch)])).unwrap();
    assert_eq!(
        eval["accuracy"].as_f64().unwrap(),
        report.trials[0].target_accuracy
    );

    let probe = root.join("probe");
    ok(&[
        "probe",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&sketch),
        "--out",
        p(&probe),
    ]);
    let rows = fs::read_to_string(probe.join("probe.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 4);
    let tokens = fs::read_to_string(probe.join("tokens.csv")).unwrap();
    assert!(tokens.starts_with("example_id,domain,label,dim_0,"));
    assert_eq!(tokens.lines().count(), 1 + 21);
    let confusion = fs::read_to_string(probe.join("confusion.csv")).unwrap();
    assert_eq!(confusion.lines().count(), 8);

    let attn = root.join("attn");
    ok(&[
        "attn",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&sketch),
        "--n",
        "2",
        "--out",
        p(&attn),
    ]);
    for i in 0..2 {
        let (w, h, px) =
            parse_ppm(&fs::read(attn.join(format!("attn_{i:04}.ppm"))).unwrap()).unwrap();
        assert_eq!((w, h, px.len()), (32, 32, 32 * 32 * 3));
        assert!(attn.join(format!("attn_{i:04}_overlay.ppm")).is_file());
    }
    assert_eq!(
        fs::read_to_string(attn.join("foreground.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    let cmp = root.join("cmp");
    ok(&[
        "compare",
        "--report",
        p(&sd),
        "--report",
        p(&sd),
        "--out",
        p(&cmp),
    ]);
    let c: Comparison =
        serde_json::from_slice(&fs::read(cmp.join("compare.json")).unwrap()).unwrap();
    assert_eq!(c.rows.len(), 2);
    for row in &c.rows {
        assert_eq!(row.delta, 0.0);
        assert_eq!(row.overlap_delta, 0.0);
        assert_eq!(row.overhead_pct, 0.0);
    }
    ok(&[
        "compare",
        "--report",
        p(&erm),
        "--report",
        p(&sd),
        "--out",
        p(&cmp),
    ]);
    let c: Comparison =
        serde_json::from_slice(&fs::read(cmp.join("compare.json")).unwrap()).unwrap();
    assert_eq!(
        (c.baseline.as_str(), c.method.as_str()),
        ("ERM-ViT", "ERM-SDViT")
    );
    assert_eq!(c.rows[0].delta, report.mean - erm_report.mean);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sdvit(&[]).status.code(), Some(1));
    assert_eq!(
        sdvit(&["train", "--target", "sketch"]).status.code(),
        Some(1)
    );
    let missing = dir.path().join("missing");
    let out = sdvit(&[
        "train",
        "--target",
        "sketch",
        "--out",
        p(&missing),
        "--data",
        p(&missing),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    let data = dir.path().join("data");
    ok(&["gen-data", "--out", p(&data), "--per-class", "1"]);
    let out = sdvit(&[
        "train",
        "--target",
        "clipart",
        "--out",
        p(&missing),
        "--data",
        p(&data),
    ]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(dir.path().join("bad.json"), "{\"trials\": \"three\"}").unwrap();
    let bad = dir.path().join("bad.json");
    let out = sdvit(&[
        "train",
        "--config",
        p(&bad),
        "--target",
        "sketch",
        "--out",
        p(&missing),
        "--data",
        p(&data),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
