use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tilscore"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn tilscore")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let cfg = json!({
        "synth": {
            "n_slides": 24, "tiles_min": 4, "tiles_max": 9, "dim": 16, "seed": 3,
            "n_centres": 6, "n_cohorts": 2,
            "survival": {"baseline_hazard": 0.02, "log_hr_per_10pct": -0.3, "censor_hazard": 0.01, "follow_up_months": 120.0}
        },
        "hyper": {"input_dim": 16, "enc_out": 8, "attn_hidden": 4, "batch_size": 4, "max_epochs": 3, "lr": 0.01}
    });
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn synth(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = small_config(dir);
    let out = dir.join("cohort");
    ok(&["--config", p(&cfg), "synth", "--out", p(&out)]);
    (cfg, out)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn white_ppm(path: &Path, size: usize) {
    let mut bytes = format!("P6\n{size} {size}\n255\n").into_bytes();
    bytes.extend(std::iter::repeat_n(255u8, size * size * 3));
    fs::write(path, bytes).unwrap();
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        if path.is_dir() {
            out.extend(dir_bytes(&path).into_iter().map(|(n, b)| (format!("{name}/{n}"), b)));
        } else if name != "config.json" {
            out.push((name, fs::read(&path).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn white_image_keeps_no_tiles() {
    let tmp = tempfile::tempdir().unwrap();
    let img = tmp.path().join("white.ppm");
    white_ppm(&img, 1100);
    let out = tmp.path().join("tile");
    ok(&["tile", "--image", p(&img), "--mpp", "0.5", "--out", p(&out)]);
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["n_kept"], 0);
    assert_eq!(summary["n_tiles"], 4);
    let manifest = fs::read_to_string(out.join("tiles.tsv")).unwrap();
    assert_eq!(manifest.lines().skip(2).filter(|l| l.ends_with("\t1")).count(), 0);
    assert!(out.join("mask.pgm").is_file());
    assert!(out.join("config.json").is_file());
}

#[test]
fn missing_mpp_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let img = tmp.path().join("white.ppm");
    white_ppm(&img, 64);
    let out = run(&["tile", "--image", p(&img), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--mpp"));
}

#[test]
fn small_image_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let img = tmp.path().join("tiny.ppm");
    white_ppm(&img, 64);
    let out = run(&["tile", "--image", p(&img), "--mpp", "0.5", "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_is_reproducible_and_labels_match() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, a) = synth(tmp.path());
    let b = tmp.path().join("again");
    ok(&["--config", p(&cfg), "--workers", "2", "synth", "--out", p(&b)]);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    let bags: Vec<_> = fs::read_dir(a.join("bags")).unwrap().collect();
    assert_eq!(bags.len(), 24);
    let clinical = fs::read_to_string(a.join("clinical.csv")).unwrap();
    assert_eq!(clinical.lines().count(), 25);
    assert!(clinical.starts_with("slide_id,cohort,centre,til_score_pct,os_months,os_event"));

    let c = tmp.path().join("other_seed");
    ok(&["--config", p(&cfg), "--seed", "4", "synth", "--out", p(&c)]);
    assert_ne!(dir_bytes(&a), dir_bytes(&c));
    assert_eq!(read_json(&c.join("config.json"))["seed"], 4);
}

#[test]
fn empty_cohort_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"synth": {"n_slides": 0}}"#).unwrap();
    let out = run(&["--config", p(&cfg), "synth", "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least one slide"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"synthh": {}}"#).unwrap();
    let out = run(&["--config", p(&cfg), "synth", "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_predict_evaluate_survival_heatmap() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, cohort) = synth(tmp.path());
    let bags = cohort.join("bags");
    let clinical = cohort.join("clinical.csv");

    // LOCO over 2 cohorts: one checkpoint per cohort
    let loco = tmp.path().join("loco");
    ok(&["--config", p(&cfg), "train", "--bags", p(&bags), "--clinical", p(&clinical), "--plan", "loco", "--out", p(&loco)]);
    assert!(loco.join("fold_0/model.ectm").is_file());
    assert!(loco.join("fold_1/model.ectm").is_file());
    assert!(!loco.join("fold_2").exists());
    assert_eq!(read_json(&loco.join("ensemble/ensemble.json"))["members"].as_array().unwrap().len(), 2);
    let summary = read_json(&loco.join("summary.json"));
    assert_eq!(summary["k"], 2);

    // same seed, same checkpoints
    let again = tmp.path().join("loco_again");
    ok(&["--config", p(&cfg), "train", "--bags", p(&bags), "--clinical", p(&clinical), "--plan", "loco", "--out", p(&again)]);
    assert_eq!(fs::read(loco.join("fold_0/model.ectm")).unwrap(), fs::read(again.join("fold_0/model.ectm")).unwrap());
    assert_eq!(fs::read(loco.join("fold_1/history.json")).unwrap(), fs::read(again.join("fold_1/history.json")).unwrap());

    // k-fold over centres, restricted to two folds with two restarts each
    let kfold = tmp.path().join("kfold");
    ok(&[
        "--config", p(&cfg), "train", "--bags", p(&bags), "--clinical", p(&clinical), "--k", "3",
        "--restarts", "2", "--folds", "0,2", "--out", p(&kfold),
    ]);
    assert!(kfold.join("fold_0/model.ectm").is_file() && kfold.join("fold_2/model.ectm").is_file());
    assert!(!kfold.join("fold_1").exists());
    let hist = read_json(&kfold.join("fold_0/history.json"));
    assert_eq!(hist["restarts"].as_array().unwrap().len(), 2);
    let plan = fs::read_to_string(kfold.join("plan.csv")).unwrap();
    assert_eq!(plan.lines().count(), 25);

    // one checkpoint equals the fold's own held-out predictions
    let pred = tmp.path().join("pred");
    let model = loco.join("fold_0/model.ectm");
    ok(&["predict", "--checkpoints", p(&model), "--bags", p(&bags), "--out", p(&pred)]);
    let single = fs::read_to_string(pred.join("predictions.csv")).unwrap();
    assert_eq!(single.lines().count(), 25);
    let held: Vec<String> = fs::read_to_string(loco.join("fold_0/predictions.csv")).unwrap().lines().skip(1).map(String::from).collect();
    for line in &held {
        assert!(single.lines().any(|l| l == line), "{line} missing from predictions");
    }
    for line in single.lines().skip(1) {
        let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(v > 0.0 && v < 1.0);
    }

    // identical members reproduce the single model; workers do not matter
    let pred5 = tmp.path().join("pred5");
    let m = p(&model);
    ok(&["--workers", "3", "predict", "--checkpoints", m, m, m, m, m, "--bags", p(&bags), "--out", p(&pred5)]);
    assert_eq!(single, fs::read_to_string(pred5.join("predictions.csv")).unwrap());

    let pred_ens = tmp.path().join("pred_ens");
    ok(&["predict", "--checkpoints", p(&loco.join("ensemble")), "--bags", p(&bags), "--out", p(&pred_ens)]);
    assert_eq!(fs::read_to_string(pred_ens.join("predictions.csv")).unwrap().lines().count(), 25);

    let eval = tmp.path().join("eval");
    ok(&["evaluate", "--predictions", p(&pred.join("predictions.csv")), "--clinical", p(&clinical), "--out", p(&eval)]);
    let metrics = read_json(&eval.join("metrics.json"));
    assert_eq!(metrics["n"], 24);
    assert_eq!(metrics["cutoffs"].as_array().unwrap().len(), 4);
    assert!(metrics["pearson"].is_number());
    let calib = fs::read_to_string(eval.join("calibration.csv")).unwrap();
    assert_eq!(calib.lines().count(), 21);

    let surv = tmp.path().join("surv");
    ok(&[
        "survival", "--predictions", p(&pred.join("predictions.csv")), "--clinical", p(&clinical),
        "--out", p(&surv),
    ]);
    let report = read_json(&surv.join("report.json"));
    assert_eq!(report["n"], 24);
    assert!(report["multivariable"]["terms"][0]["hr"].is_number());
    let km = fs::read_to_string(surv.join("km_pathologist.csv")).unwrap();
    assert!(km.starts_with("group,t,S,at_risk"));
    let table = fs::read_to_string(surv.join("table.csv")).unwrap();
    assert!(table.lines().any(|l| l.contains("concordance")));

    let surv_null = tmp.path().join("surv_null");
    ok(&[
        "survival", "--predictions", p(&pred.join("predictions.csv")), "--clinical", p(&clinical),
        "--no-score", "--out", p(&surv_null),
    ]);
    let table = fs::read_to_string(surv_null.join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(table.lines().nth(1).unwrap().starts_with("null,concordance,"));
    assert!(table.trim_end().ends_with(",0.5"));

    let heat = tmp.path().join("heat");
    let bag = bags.join("slide_00000.ectb");
    ok(&["heatmap", "--checkpoint", p(&model), "--bag", p(&bag), "--out", p(&heat)]);
    let geometry = read_json(&heat.join("geometry.json"));
    let n = geometry["n_tiles"].as_u64().unwrap();
    assert_eq!(geometry["tiles"].as_array().unwrap().len() as u64, n);
    let attention = fs::read(heat.join("attention.pgm")).unwrap();
    assert!(attention.contains(&255));
}

#[test]
fn evaluate_reports_nulls_and_perfect_agreement() {
    let tmp = tempfile::tempdir().unwrap();
    let clinical = tmp.path().join("clinical.csv");
    fs::write(&clinical, "slide_id,cohort,centre,til_score_pct\na,c,x,5\nb,c,x,20\nc,c,y,40\nd,c,y,60\n").unwrap();
    let preds = tmp.path().join("p.csv");
    fs::write(&preds, "slide_id,ectil_score\na,0.05\nb,0.2\nc,0.4\nd,0.6\n").unwrap();
    let out = tmp.path().join("eval");
    ok(&["evaluate", "--predictions", p(&preds), "--clinical", p(&clinical), "--cutoffs", "10,75", "--out", p(&out)]);
    let m = read_json(&out.join("metrics.json"));
    for key in ["pearson", "spearman", "ccc"] {
        assert!((m[key].as_f64().unwrap() - 1.0).abs() < 1e-12, "{key} = {}", m[key]);
    }
    assert_eq!(m["cutoffs"][0]["auroc"], 1.0);
    assert!(m["cutoffs"][1]["auroc"].is_null());
    assert!(m["cutoffs"][1]["ap"].is_null());

    let orphan = tmp.path().join("orphan.csv");
    fs::write(&orphan, "slide_id,ectil_score\nzz,0.5\n").unwrap();
    let o = run(&["evaluate", "--predictions", p(&orphan), "--clinical", p(&clinical), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn survival_cutoffs_give_three_groups() {
    let tmp = tempfile::tempdir().unwrap();
    let mut clinical = String::from("slide_id,cohort,centre,til_score_pct,os_months,os_event\n");
    let mut preds = String::from("slide_id,ectil_score\n");
    for i in 0..30 {
        let pct = [10.0, 50.0, 90.0][i % 3] + (i / 3) as f64;
        let months = 5.0 + (i as f64 * 7.3) % 60.0;
        clinical.push_str(&format!("s{i:02},c,x,{pct},{months},{}\n", (i % 4 != 0) as u8));
        preds.push_str(&format!("s{i:02},{}\n", pct / 100.0));
    }
    let c = tmp.path().join("clinical.csv");
    let pr = tmp.path().join("p.csv");
    fs::write(&c, clinical).unwrap();
    fs::write(&pr, preds).unwrap();
    let out = tmp.path().join("surv");
    ok(&["survival", "--predictions", p(&pr), "--clinical", p(&c), "--split", "cutoffs", "--out", p(&out)]);
    let report = read_json(&out.join("report.json"));
    for km in report["km"].as_array().unwrap() {
        let labels: Vec<&str> = km["groups"].as_array().unwrap().iter().map(|g| g["label"].as_str().unwrap()).collect();
        assert_eq!(labels, ["<30", "30-75", ">=75"]);
        assert_eq!(km["logrank"]["df"], 2);
    }
    let csv = fs::read_to_string(out.join("km_model.csv")).unwrap();
    for label in ["<30", "30-75", ">=75"] {
        assert!(csv.lines().any(|l| l.starts_with(&format!("{label},0,1,"))));
    }
}

#[test]
fn survival_nonconvergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    // the score perfectly orders the deaths: monotone likelihood
    let mut clinical = String::from("slide_id,cohort,centre,til_score_pct,os_months,os_event\n");
    let mut preds = String::from("slide_id,ectil_score\n");
    for i in 0..10 {
        clinical.push_str(&format!("s{i},c,x,{},{},1\n", 10 * i, 1 + i));
        preds.push_str(&format!("s{i},{}\n", 0.1 * i as f64));
    }
    let c = tmp.path().join("clinical.csv");
    let pr = tmp.path().join("p.csv");
    fs::write(&c, clinical).unwrap();
    fs::write(&pr, preds).unwrap();
    let out = run(&["survival", "--predictions", p(&pr), "--clinical", p(&c), "--out", p(&tmp.path().join("s"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn single_tile_heatmap_is_saturated() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"synth": {"n_slides": 1, "tiles_min": 1, "tiles_max": 1, "dim": 16},
                       "hyper": {"input_dim": 16, "enc_out": 8, "attn_hidden": 4, "max_epochs": 1}}"#)
        .unwrap();
    let cohort = tmp.path().join("cohort");
    ok(&["--config", p(&cfg), "synth", "--out", p(&cohort)]);

    // a checkpoint whose score head saturates: zero weights and a large bias
    let mut ck = tilscore_checkpoint(16, 8, 4);
    let n = ck.len();
    ck[n - 8..].copy_from_slice(&40.0f64.to_le_bytes());
    let model = tmp.path().join("m.ectm");
    fs::write(&model, ck).unwrap();

    let out = tmp.path().join("heat");
    ok(&["heatmap", "--checkpoint", p(&model), "--bag", p(&cohort.join("bags/slide_00000.ectb")), "--out", p(&out)]);
    let tail = |name: &str| *fs::read(out.join(name)).unwrap().last().unwrap();
    assert_eq!(tail("attention.pgm"), 255);
    assert_eq!(tail("score.pgm"), 255);
    let g = read_json(&out.join("geometry.json"));
    assert_eq!((g["width"].as_u64(), g["height"].as_u64(), g["n_tiles"].as_u64()), (Some(1), Some(1), Some(1)));

    let mismatch = tmp.path().join("m2.ectm");
    fs::write(&mismatch, tilscore_checkpoint(12, 8, 4)).unwrap();
    let o = run(&["heatmap", "--checkpoint", p(&mismatch), "--bag", p(&cohort.join("bags/slide_00000.ectb")), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

/// An all-zero checkpoint with default training settings, written by hand.
fn tilscore_checkpoint(d: u32, e: u32, a: u32) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(b"ECTM");
    b.extend_from_slice(&1u16.to_le_bytes());
    for v in [d, e, a, 16, 50, 15] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    for v in [1e-4f64, 6e-4, 0.4, 0.1] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    let (d, e, a) = (d as u64, e as u64, a as u64);
    let count = e * d + e + 2 * (a * e + a) + a + e + 1;
    b.extend_from_slice(&count.to_le_bytes());
    b.extend(std::iter::repeat_n(0u8, count as usize * 8));
    b
}
