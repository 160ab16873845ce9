mod common;

use std::fs;

use bke_core::data::SplitManifest;
use bke_core::tensor;
use bke_core::Tensor;
use common::{bke, ok, ok_in, s, sample, snapshot, Fixture};

fn read_csv(path: &std::path::Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn missing_dataset_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = bke(&["pretrain", "--out", s(&dir.path().join("o")), "--data", s(&missing)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nowhere"), "{err}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"bke": {"omgea": 0.3}}"#).unwrap();
    let out = bke(&[
        "propagate",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("o")),
        "--features",
        s(&sample("features.csv")),
        "--logits",
        s(&sample("logits.csv")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("omgea"));
}

#[test]
fn propagation_without_ensembling_is_the_softmax() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    ok(&[
        "propagate",
        "--out",
        s(&out),
        "--features",
        s(&sample("features.csv")),
        "--logits",
        s(&sample("logits.csv")),
        "--omega",
        "0",
        "--tau",
        "2",
    ]);
    let q = Tensor::from_rows(&read_csv(&out.join("q.csv"))).unwrap();
    let logits = Tensor::from_rows(&read_csv(&sample("logits.csv"))).unwrap();
    assert!(q.max_abs_diff(&tensor::softmax_rows(&logits, 2.0)) <= 1e-15);
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["bke"]["omega"], 0.0);
    assert_eq!(cfg["bke"]["tau"], 2.0);
}

#[test]
fn closed_and_iterative_propagation_agree() {
    let dir = tempfile::tempdir().unwrap();
    let (features, logits) = (sample("features.csv"), sample("logits.csv"));
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec![
            "propagate",
            "--out",
            s(&out),
            "--features",
            s(&features),
            "--logits",
            s(&logits),
            "--omega",
            "0.7",
        ];
        args.extend_from_slice(extra);
        ok(&args);
        Tensor::from_rows(&read_csv(&out.join("q.csv"))).unwrap()
    };
    let closed = run("closed", &["--method", "closed"]);
    let iter = run("iter", &["--method", "iter", "--iters", "300"]);
    assert!(closed.max_abs_diff(&iter) <= 1e-9);
}

#[test]
fn malformed_csv_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "1,2,3\n4,5,6\n7,oops,9\n").unwrap();
    let out = bke(&[
        "propagate",
        "--out",
        s(&dir.path().join("o")),
        "--features",
        s(&bad),
        "--logits",
        s(&sample("logits.csv")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");

    fs::write(&bad, "1,2\n3\n").unwrap();
    let out = bke(&["propagate", "--out", s(&dir.path().join("o")), "--features", s(&bad), "--logits", s(&bad)]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn row_count_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let short = dir.path().join("short.csv");
    fs::write(&short, "1,2,3\n4,5,6\n").unwrap();
    let out = bke(&[
        "propagate",
        "--out",
        s(&dir.path().join("o")),
        "--features",
        s(&sample("features.csv")),
        "--logits",
        s(&short),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("rows"));
}

#[test]
fn gradcheck_passes_and_catches_a_perturbation() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--out", s(dir.path())]);
    let text = String::from_utf8_lossy(&out.stdout);
    for name in ["cross_view", "cross_model", "ssl_total", "bke", "stop_gradient"] {
        assert!(text.contains(name), "{text}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);

    let bad = bke(&["gradcheck", "--perturb", "1e-3"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn pipeline_outputs() {
    let fx = Fixture::new(200, 20, 3);
    let loss = fs::read_to_string(fx.path("pre").join("loss.csv")).unwrap();
    let mut lines = loss.lines();
    assert_eq!(lines.next(), Some("epoch,loss_cv,loss_cm,loss_total"));
    assert_eq!(lines.count(), 3);

    let ft = fx.path("ft");
    ok(&[
        "finetune",
        "--out",
        s(&ft),
        "--data",
        s(&fx.data()),
        "--split",
        s(&fx.split()),
        "--checkpoint",
        s(&fx.checkpoint()),
        "--fraction",
        "0.1",
        "--epochs",
        "4",
        "--batch-size",
        "16",
        "--eval-window",
        "2",
    ]);
    let split = SplitManifest::read(ft.join("split.json")).unwrap();
    assert_eq!(split.train.len(), 40);
    assert_eq!(split.test.len(), 40);
    assert!(split.train.iter().all(|&i| i < 400));

    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ft.join("report.json")).unwrap()).unwrap();
    let obj = report.as_object().unwrap();
    assert_eq!(obj.len(), 5);
    for k in ["sen", "spe", "hm", "auc", "acc"] {
        assert!(obj[k]["mean"].is_f64() && obj[k]["variance"].is_f64(), "{k}");
    }
    let metrics = fs::read_to_string(ft.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("epoch,sen,spe,hm,auc,acc"));
    assert_eq!(metrics.lines().count(), 5);

    let ev = fx.path("ev");
    ok(&[
        "eval",
        "--out",
        s(&ev),
        "--data",
        s(&fx.data()),
        "--split",
        s(&fx.split()),
        "--checkpoint",
        s(&ft.join("finetune.bkec")),
    ]);
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["images"], 40);
    let total: u64 = eval["confusion"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|r| r.as_array().unwrap().iter().map(|v| v.as_u64().unwrap()))
        .sum();
    assert_eq!(total, 40);
}

#[test]
fn finetune_requires_a_split() {
    let fx = Fixture::new(4, 2, 1);
    let out = bke(&[
        "finetune",
        "--out",
        s(&fx.path("ft")),
        "--data",
        s(&fx.data()),
        "--checkpoint",
        s(&fx.checkpoint()),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("split"));
}

#[test]
fn sweep_rows_follow_the_grids() {
    let fx = Fixture::new(20, 5, 1);
    let out = fx.path("sweep");
    ok(&[
        "sweep",
        "--out",
        s(&out),
        "--data",
        s(&fx.data()),
        "--split",
        s(&fx.split()),
        "--checkpoint",
        s(&fx.checkpoint()),
        "--epochs",
        "1",
        "--eval-window",
        "1",
    ]);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("param,value,hm,acc"));
    let params: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    for (name, rows) in [("omega", 5), ("batch_size", 5), ("tau", 4), ("lambda", 4)] {
        assert_eq!(params.iter().filter(|&&p| p == name).count(), rows, "{name}");
    }
    assert_eq!(params.len(), 18);

    let single = fx.path("single");
    ok(&[
        "sweep",
        "--out",
        s(&single),
        "--data",
        s(&fx.data()),
        "--split",
        s(&fx.split()),
        "--checkpoint",
        s(&fx.checkpoint()),
        "--epochs",
        "1",
        "--grid",
        "tau",
        "--values",
        "1,3",
    ]);
    let csv = fs::read_to_string(single.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn reruns_are_byte_identical() {
    let root = tempfile::tempdir().unwrap();
    let (features, logits) = (sample("features.csv"), sample("logits.csv"));
    let script: Vec<Vec<&str>> = vec![
        vec!["synth", "--out", "data", "--train-per-class", "8", "--test-per-class", "4"],
        vec!["pretrain", "--out", "pre", "--data", "data", "--split", "data/split.json", "--epochs", "2", "--batch-size", "8"],
        vec!["finetune", "--out", "ft", "--data", "data", "--split", "data/split.json", "--checkpoint", "pre/pretrain.bkec", "--epochs", "3", "--batch-size", "8"],
        vec!["eval", "--out", "eval", "--data", "data", "--split", "data/split.json", "--checkpoint", "ft/finetune.bkec"],
        vec!["propagate", "--out", "prop", "--features", s(&features), "--logits", s(&logits)],
        vec!["sweep", "--out", "sweep", "--data", "data", "--split", "data/split.json", "--checkpoint", "pre/pretrain.bkec", "--epochs", "1", "--grid", "omega"],
        vec!["gradcheck", "--out", "grad"],
    ];
    for run in ["a", "b"] {
        let dir = root.path().join(run);
        fs::create_dir_all(&dir).unwrap();
        for args in &script {
            ok_in(&dir, args);
        }
    }
    let (sa, sb) = (snapshot(&root.path().join("a")), snapshot(&root.path().join("b")));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for out in ["data", "pre", "ft", "eval", "prop", "sweep", "grad"] {
        assert!(sa.keys().any(|k| k.starts_with(out)), "{out} wrote nothing");
    }
    for (k, v) in &sa {
        assert!(v == &sb[k], "{} differs", k.display());
    }
}
