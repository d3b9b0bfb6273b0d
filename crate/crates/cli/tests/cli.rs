use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ssmamba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssmamba")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = ssmamba(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn unknown_flag_prints_usage_and_fails() {
    let out = ssmamba(&["pretrain", "--no-such-flag"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_data_is_an_error_not_a_panic() {
    let dir = tempfile::tempdir().unwrap();
    let out = ssmamba(&["finetune", "--data", p(&dir.path().join("nope")), "--out", p(&dir.path().join("x.ckpt"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn params_table_and_json_agree() {
    let table = ok(&["--preset", "tiny", "params"]);
    let json: Value = serde_json::from_str(&ok(&["--preset", "tiny", "params", "--json"])).unwrap();
    let total = json["total"].as_u64().unwrap();
    assert!(table.contains(&format!("total {total} ")), "{table}");
    let sum: u64 = json["modules"].as_array().unwrap().iter().map(|m| m[1].as_u64().unwrap()).sum();
    assert_eq!(sum, total);
}

#[test]
fn config_file_overrides_recipe_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seeed = 3\n").unwrap();
    assert!(!ssmamba(&["--config", p(&bad), "params"]).status.success());

    let data = dir.path().join("bs");
    ok(&["synth", "--kind", "blobs-stripes", "--n", "8", "--size", "16", "--out", p(&data)]);
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "preset = \"tiny\"\n[finetune]\nepochs = 2\nbatch_size = 4\n").unwrap();
    let log = dir.path().join("ft.jsonl");
    ok(&["--config", p(&cfg), "finetune", "--data", p(&data), "--out", p(&dir.path().join("ft.ckpt")), "--log", p(&log)]);
    let epochs: Vec<u64> = lines(&log).iter().filter_map(|r| r["epoch"].as_u64()).collect();
    assert_eq!(epochs, [1, 2]);
}

#[test]
fn finetune_eval_and_gradcam() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("bs");
    ok(&["synth", "--kind", "blobs-stripes", "--n", "10", "--size", "16", "--out", p(&data)]);
    let ckpt = d.join("ft.ckpt");
    ok(&["--preset", "tiny", "finetune", "--data", p(&data), "--out", p(&ckpt), "--epochs", "2"]);

    let metrics = d.join("metrics.jsonl");
    ok(&["eval", "--data", p(&data), "--ckpt", p(&ckpt), "--out", p(&metrics)]);
    let recs = lines(&metrics);
    let splits: Vec<&str> = recs.iter().map(|r| r["split"].as_str().unwrap()).collect();
    assert_eq!(splits, ["train", "val", "test"]);
    let n: u64 = recs.iter().map(|r| r["n"].as_u64().unwrap()).sum();
    assert_eq!(n, 20);
    for r in &recs {
        for k in ["acc", "macro_f1", "auc"] {
            let v = r[k].as_f64().unwrap();
            assert!((0.0..=100.0).contains(&v), "{k} = {v}");
        }
    }

    let img = fs::read_dir(data.join("blobs")).unwrap().next().unwrap().unwrap().path();
    let cam = d.join("cam");
    ok(&["gradcam", "--ckpt", p(&ckpt), "--image", p(&img), "--class", "1", "--out-dir", p(&cam)]);
    for f in ["heatmap.png", "overlay.png"] {
        assert!(fs::read(cam.join(f)).unwrap().starts_with(b"\x89PNG"));
    }

    // A fine-tuning checkpoint is not a pretraining checkpoint.
    let out = ssmamba(&["reconstruct", "--ckpt", p(&ckpt), "--image", p(&img), "--out", p(&d.join("r.png"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn mil_train_and_eval_on_synthetic_bags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bags = d.join("bags");
    ok(&["synth", "--kind", "bags", "--n", "24", "--dim", "8", "--out", p(&bags)]);
    let labels = bags.join("labels.csv");
    let ckpt = d.join("mil.ckpt");
    ok(&[
        "mil-train", "--bags", p(&bags), "--labels", p(&labels), "--out", p(&ckpt), "--task", "label:2", "--task", "score:reg",
        "--epochs", "3",
    ]);
    let out = d.join("mil.jsonl");
    let preds = d.join("preds.jsonl");
    ok(&["mil-eval", "--bags", p(&bags), "--labels", p(&labels), "--ckpt", p(&ckpt), "--out", p(&out), "--predictions", p(&preds)]);
    let recs = lines(&out);
    assert_eq!(recs.len(), 2);
    assert_eq!((recs[0]["task"].as_str(), recs[0]["n"].as_u64()), (Some("label"), Some(24)));
    assert!(recs[0]["auc"].is_number());
    // Every fourth slide has no score.
    assert_eq!((recs[1]["task"].as_str(), recs[1]["n"].as_u64()), (Some("score"), Some(18)));
    assert!(recs[1]["mae"].as_f64().unwrap() >= 0.0);
    assert_eq!(lines(&preds).len(), 24);

    // Same seed, same predictions.
    let again = d.join("preds2.jsonl");
    ok(&["mil-eval", "--bags", p(&bags), "--labels", p(&labels), "--ckpt", p(&ckpt), "--out", p(&d.join("m2.jsonl")), "--predictions", p(&again)]);
    assert_eq!(fs::read(&preds).unwrap(), fs::read(&again).unwrap());
}
