use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
n_train = 12
n_val = 6
stage_channels = 4,8,8
fpn_channels = 8
head_hidden = 16
rois_per_image = 16
epochs = 2
batch_size = 4
warmup_steps = 2
";

fn hce(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hce"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_cfg(dir: &Path, name: &str, extra: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, format!("{SMALL}{extra}")).unwrap();
    p.to_string_lossy().into_owned()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", stdout(o), String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_data_is_idempotent_and_refuses_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "a.cfg", "");
    let out = tmp.path().join("run");
    let out = out.to_str().unwrap();
    let first = hce(&["gen-data", "--config", &cfg, "--out", out]);
    ok(&first);
    assert!(stdout(&first).contains("wrote 12 images"));
    let again = hce(&["gen-data", "--config", &cfg, "--out", out]);
    ok(&again);
    assert_eq!(stdout(&again).matches("up to date").count(), 2);
    let manifest = |dir: &str| fs::read_to_string(Path::new(dir).join("data/train/manifest.json")).unwrap();
    let before = manifest(out);

    let clash = hce(&["gen-data", "--config", &cfg, "--seed", "9", "--out", out]);
    assert!(!clash.status.success());
    assert_eq!(manifest(out), before);

    let other = tmp.path().join("other");
    let other = other.to_str().unwrap();
    ok(&hce(&["gen-data", "--config", &cfg, "--seed", "9", "--out", other]));
    let hash = |m: String| serde_json::from_str::<serde_json::Value>(&m).unwrap()["config_hash"].clone();
    assert_ne!(hash(manifest(other)), hash(before));
}

#[test]
fn train_resume_eval_analyze() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "a.cfg", "");
    let out = tmp.path().join("run");
    let o = out.to_str().unwrap();
    ok(&hce(&["gen-data", "--config", &cfg, "--out", o]));

    let missing = hce(&["eval", "--config", &cfg, "--out", o]);
    assert!(!missing.status.success());

    ok(&hce(&["train", "--config", &cfg, "--out", o]));
    let ck = out.join("checkpoints");
    let final_bytes = fs::read(ck.join("final.ckpt")).unwrap();
    let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, (0..6).collect::<Vec<_>>());
    for l in log.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        for k in ["L_feat", "L_conf", "L_mll", "L_rpn"] {
            assert!(v[k].is_f64(), "{k} missing in {l}");
        }
    }

    let up = hce(&["train", "--config", &cfg, "--out", o]);
    ok(&up);
    assert!(stdout(&up).contains("up to date"));

    // pretend the run stopped after the first epoch
    fs::remove_file(ck.join("final.ckpt")).unwrap();
    fs::copy(ck.join("epoch_001.ckpt"), ck.join("last.ckpt")).unwrap();
    let resumed = hce(&["train", "--config", &cfg, "--out", o]);
    ok(&resumed);
    assert!(stdout(&resumed).contains("resuming at epoch 1 step 3"));
    assert_eq!(fs::read(ck.join("final.ckpt")).unwrap(), final_bytes);
    assert_eq!(fs::read_to_string(out.join("train_log.jsonl")).unwrap(), log);

    let changed = write_cfg(tmp.path(), "b.cfg", "lr = 0.02\n");
    assert!(!hce(&["train", "--config", &changed, "--out", o]).status.success());

    ok(&hce(&["eval", "--config", &cfg, "--out", o]));
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    for k in ["AP", "AP50", "AP75", "APS", "APM", "APL", "time_per_image_s"] {
        assert!(metrics[k].is_f64(), "{k}");
    }
    let dets = fs::read_to_string(out.join("detections.json")).unwrap();
    ok(&hce(&["eval", "--config", &cfg, "--out", o]));
    assert_eq!(fs::read_to_string(out.join("detections.json")).unwrap(), dets);
    let parsed: Vec<serde_json::Value> = serde_json::from_str(&dets).unwrap();
    for d in &parsed {
        assert_eq!(d["bbox"].as_array().unwrap().len(), 4);
        assert!(["feature_fusion", "confidence_fusion"].contains(&d["branch"].as_str().unwrap()));
    }

    ok(&hce(&["analyze", "--config", &cfg, "--out", o]));
    let csv = fs::read_to_string(out.join("breakdown.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("all,")));
    assert!(fs::read_to_string(out.join("breakdown.svg")).unwrap().starts_with("<svg"));

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"[{"image_id": 999, "category_id": 0, "bbox": [1, 1, 4, 4], "score": 0.9}]"#).unwrap();
    let mismatch = hce(&["analyze", "--config", &cfg, "--out", o, "--detections", bad.to_str().unwrap()]);
    assert!(!mismatch.status.success());
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("image_id 999"));
}

fn param_count(text: &str) -> usize {
    let line = text.lines().find(|l| l.starts_with("parameters:")).expect("parameter line");
    line.split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[test]
fn hce_adds_exactly_the_context_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let full = write_cfg(tmp.path(), "full.cfg", "epochs = 1\n");
    let base = write_cfg(
        tmp.path(),
        "base.cfg",
        "epochs = 1\nmll = false\ninstance = false\nglobal = false\nff_train = false\ncf_train = false\ncf_test = false\n",
    );
    let mut counts = Vec::new();
    for (cfg, name) in [(&base, "b"), (&full, "f")] {
        let out = tmp.path().join(name);
        let o = out.to_str().unwrap();
        ok(&hce(&["gen-data", "--config", cfg, "--out", o]));
        let t = hce(&["train", "--config", cfg, "--out", o]);
        ok(&t);
        counts.push(param_count(&stdout(&t)));
    }
    // conv3x3 over the 8-channel top stage, f_cls to 10 classes, conv1x1 2d -> d
    let (top, d, c) = (8, 8, 10);
    let extra = (9 * top * d + d) + (d * c + c) + (2 * d * d + d);
    assert_eq!(counts[1] - counts[0], extra);
}

#[test]
fn gradcheck_reports_every_op_and_flags_faults() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().to_str().unwrap();
    let good = hce(&["gradcheck", "--seed", "3", "--out", o]);
    ok(&good);
    let text = stdout(&good);
    for op in hce::gradcheck::OPS {
        assert_eq!(text.lines().filter(|l| l.split_whitespace().next() == Some(op)).count(), 1, "{op}");
    }
    let bad = hce(&["gradcheck", "--fault", "smooth_l1", "--out", o]);
    assert!(!bad.status.success());
    let failed: Vec<String> = stdout(&bad)
        .lines()
        .filter(|l| l.ends_with("FAIL"))
        .map(|l| l.split_whitespace().next().unwrap().to_string())
        .collect();
    assert_eq!(failed, vec!["smooth_l1"]);
}

#[test]
fn presets_resolve_and_bad_configs_fail_loudly() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().to_str().unwrap();
    let cfg = write_cfg(tmp.path(), "bad.cfg", "mll = false\n");
    let r = hce(&["gen-data", "--config", &cfg, "--out", o]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("mll"));
    let r = hce(&["gen-data", "--config", &write_cfg(tmp.path(), "typo.cfg", "epohcs = 3\n"), "--out", o]);
    assert!(String::from_utf8_lossy(&r.stderr).contains("epohcs"));
    let r = hce(&["eval", "--config", "table2_row9", "--out", o]);
    assert!(!r.status.success());
}
