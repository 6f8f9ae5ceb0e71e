use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_slpnet");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn gen(dir: &Path, k: &str, train: &str, test: &str) {
    ok(&[
        "-q",
        "gen-data",
        "--k",
        k,
        "--n",
        "4",
        "--train",
        train,
        "--test",
        test,
        "--seed",
        "3",
        "--out",
        dir.to_str().unwrap(),
    ]);
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap())
        .collect()
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let args = |d: &Path| {
        vec![
            "gen-data".to_string(),
            "--k".into(),
            "4".into(),
            "--n".into(),
            "4".into(),
            "--train".into(),
            "50".into(),
            "--test".into(),
            "10".into(),
            "--seed".into(),
            "1".into(),
            "--out".into(),
            d.to_str().unwrap().into(),
        ]
    };
    let sa = ok(&args(&a).iter().map(String::as_str).collect::<Vec<_>>());
    let sb = ok(&args(&b).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(sa, sb);
    assert!(sa.contains("sha256"));
    for f in ["train.jsonl", "test.jsonl"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap()
        );
    }
    assert_eq!(
        std::fs::read_to_string(a.join("train.jsonl"))
            .unwrap()
            .lines()
            .count(),
        50
    );
}

#[test]
fn overloaded_data_generation_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "6", "8", "4");
    assert!(tmp.path().join("test.jsonl").is_file());
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(
        run(&["gen-data", "--k", "4", "--n", "4"]).status.code(),
        Some(2)
    );
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        run(&["validate", "--only", "nothing"]).status.code(),
        Some(2)
    );
}

#[test]
fn runtime_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "2", "8", "4");
    let data = tmp.path().to_str().unwrap();
    // slp_sdnet without a checkpoint
    assert_eq!(
        run(&["eval", "--data", data, "--methods", "slp_sdnet"])
            .status
            .code(),
        Some(1)
    );
    // bad config field
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"beta_decay": 2.0}"#).unwrap();
    let out = tmp.path().join("m");
    let code = run(&[
        "train",
        "--data",
        data,
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
    .status
    .code();
    assert_eq!(code, Some(1));
    assert_eq!(
        run(&["eval", "--data", "/no/such/file.jsonl", "--methods", "blp"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let model = tmp.path().join("model");
    gen(&data, "2", "64", "12");
    let stdout = ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--epochs",
        "2",
        "--layers",
        "3",
        "--batch",
        "16",
        "--out",
        model.to_str().unwrap(),
    ]);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("epoch")).count(), 2);
    let history = std::fs::read_to_string(model.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,loss,power,feasibility_rate,lr\n"));
    assert_eq!(history.lines().count(), 3);
    let ck = model.join("checkpoint.json");
    let ck_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&ck).unwrap()).unwrap();
    assert_eq!(ck_json["L"], 3);
    assert_eq!(ck_json["K"], 2);

    let out = tmp.path().join("eval.csv");
    ok(&[
        "-q",
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
        "--grid",
        "5,20",
        "--methods",
        "blp,slp_ipm,slp_sdnet,kkt_oracle",
        "--per-sample",
        "--out",
        out.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "sinr_db,method,mean_power,p05_power,p95_power,feasibility_rate,mean_time_us,n_samples"
    );
    let summary = rows(&out);
    assert_eq!(summary.len(), 8);
    let samples = rows(&tmp.path().join("eval.csv.samples.csv"));
    assert_eq!(samples.len(), 8 * 12);
    // re-aggregate the per-sample rows
    for s in &summary {
        let group: Vec<_> = samples
            .iter()
            .filter(|r| r[0] == s[0] && r[1] == s[1])
            .collect();
        let solved: Vec<f64> = group
            .iter()
            .filter(|r| &r[4] == "true")
            .map(|r| r[5].parse().unwrap())
            .collect();
        let mean = solved.iter().sum::<f64>() / solved.len() as f64;
        let reported: f64 = s[2].parse().unwrap();
        if solved.is_empty() {
            assert!(reported.is_nan());
        } else {
            assert!((mean - reported).abs() <= 1e-9 * reported.abs(), "{s:?}");
        }
        let rate: f64 = s[5].parse().unwrap();
        assert!((rate - solved.len() as f64 / group.len() as f64).abs() <= 1e-12);
        let t: f64 = group
            .iter()
            .map(|r| r[6].parse::<f64>().unwrap())
            .sum::<f64>()
            / group.len() as f64;
        assert!((t - s[6].parse::<f64>().unwrap()).abs() <= 1e-9 * t.max(1.0));
    }
    // the optimizer and the oracle agree
    for db in ["5.0", "20.0"] {
        let get = |m: &str| -> f64 {
            summary.iter().find(|r| &r[0] == db && &r[1] == m).unwrap()[2]
                .parse()
                .unwrap()
        };
        assert!((get("slp_ipm") - get("kkt_oracle")).abs() <= 1e-6 * get("kkt_oracle"));
    }
}

#[test]
fn eval_without_timing_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "3", "4", "10");
    let data = tmp.path().to_str().unwrap();
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    for p in [&a, &b] {
        ok(&[
            "-q",
            "eval",
            "--data",
            data,
            "--methods",
            "blp,slp_ipm",
            "--no-timing",
            "--out",
            p.to_str().unwrap(),
        ]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    for r in rows(&a) {
        assert_eq!(&r[6], "0.0");
    }
}

#[test]
fn bench_time_single_sample() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "4", "4", "5");
    let out = tmp.path().join("t.csv");
    ok(&[
        "bench-time",
        "--data",
        tmp.path().to_str().unwrap(),
        "--methods",
        "blp,slp_ipm",
        "--warmup",
        "3",
        "--single",
        "--out",
        out.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "method,mean_time_us,p95_time_us,n_samples"
    );
    let r = rows(&out);
    assert_eq!(r.len(), 2);
    assert!(r.iter().all(|x| &x[3] == "1"));
}

#[test]
fn validate_prox_group() {
    let stdout = ok(&["validate", "--only", "prox"]);
    assert!(stdout.contains("prox_matches_line_search"));
    assert!(stdout.contains("printed_root_is_rejected"));
    assert!(!stdout.contains("FAIL"));
    assert!(!stdout.contains("jacobian"));
}
