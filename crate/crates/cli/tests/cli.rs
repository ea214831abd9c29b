use std::path::Path;
use std::process::{Command, Output};

fn roadsafe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roadsafe"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn synth(dir: &Path) {
    let out = roadsafe(dir, &["synth", "--preset", "SL", "--n-segments", "300", "--seed", "4", "--out", "data"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

const FEATURE_ARGS: [&str; 9] = [
    "features",
    "--osm",
    "data/world.osm",
    "--segments",
    "data/segments.csv",
    "--traffic",
    "data/traffic.csv",
    "--population",
    "data/population.csv",
];

const QUICK: [&str; 4] = ["--folds", "3", "--n-trees", "15"];

#[test]
fn ingest_is_cached_and_reports_parse_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    let first = roadsafe(dir, &["ingest-osm", "data/world.osm", "--out", "cache.json"]);
    assert_eq!(first.status.code(), Some(0));
    let bytes = std::fs::read(dir.join("cache.json")).unwrap();
    let second = roadsafe(dir, &["ingest-osm", "data/world.osm", "--out", "cache.json"]);
    assert_eq!(second.status.code(), Some(0));
    assert_eq!(std::fs::read(dir.join("cache.json")).unwrap(), bytes);
    let log = String::from_utf8_lossy(&second.stderr);
    assert!(log.contains("rebuilt=false"), "{log}");

    let osm = std::fs::read_to_string(dir.join("data/world.osm")).unwrap();
    std::fs::write(dir.join("cut.osm"), &osm[..osm.len() / 2]).unwrap();
    let bad = roadsafe(dir, &["ingest-osm", "cut.osm", "--out", "cut.json"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line"));
}

#[test]
fn logs_are_json_lines_with_hash_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    let out = roadsafe(dir, &[&FEATURE_ARGS[..], &["--seed", "9", "--out", "f.csv"]].concat());
    assert!(out.status.success());
    let log = String::from_utf8(out.stderr).unwrap();
    let mut saw = false;
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).expect("json line");
        let msg = v["msg"].as_str().unwrap();
        saw |= msg.contains("config_hash=") && msg.contains("seed=9");
    }
    assert!(saw, "{log}");
}

#[test]
fn missing_input_exits_1_with_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = roadsafe(tmp.path(), &["evaluate", "--features", "absent.csv", "--segments", "s.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.csv"));
    let out = roadsafe(tmp.path(), &["ingest-osm", "none.osm"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn evaluate_is_reproducible_and_respects_feature_set() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    assert!(roadsafe(dir, &[&FEATURE_ARGS[..], &["--out", "f.csv"]].concat()).status.success());
    let eval = |out: &str, extra: &[&str]| {
        let args = [
            &["evaluate", "--features", "f.csv", "--segments", "data/segments.csv", "--seed", "5", "--out", out][..],
            &QUICK,
            extra,
        ]
        .concat();
        let o = roadsafe(dir, &args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    eval("a", &[]);
    eval("b", &[]);
    for f in ["report.json", "report.txt", "folds.json", "schema.json"] {
        assert_eq!(
            std::fs::read(dir.join("a").join(f)).unwrap(),
            std::fs::read(dir.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("a/report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 5);
    assert!(report["config_hash"].as_str().unwrap().len() == 64);
    assert_eq!(report["cv"]["folds"], 3);

    eval("osm", &["--feature-set", "osm-only"]);
    let schema = std::fs::read_to_string(dir.join("osm/schema.json")).unwrap();
    for traffic in ["aadt", "mean_speed", "p85_speed", "\"direction\""] {
        assert!(!schema.contains(traffic), "{traffic}");
    }
    assert!(schema.contains("maxspeed"));
    let full = std::fs::read_to_string(dir.join("a/schema.json")).unwrap();
    assert!(full.contains("aadt"));
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    std::fs::write(
        dir.join("cfg.json"),
        r#"{"paths":{"features":"data/features.csv","segments":"data/segments.csv"},
            "cv":{"folds":4},"gbt":{"n_trees":10},"seed":1}"#,
    )
    .unwrap();
    let o = roadsafe(dir, &["--config", "cfg.json", "evaluate", "--folds", "2", "--out", "ev"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("ev/report.json")).unwrap()).unwrap();
    assert_eq!(report["cv"]["folds"], 2);
    assert_eq!(report["seed"], 1);

    std::fs::write(dir.join("broken.json"), "{ not json").unwrap();
    let o = roadsafe(dir, &["--config", "broken.json", "evaluate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_predict_and_schema_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    let train = |fs: &str, out: &str| {
        let args = [
            &["train", "--features", "data/features.csv", "--segments", "data/segments.csv"][..],
            &["--feature-set", fs, "--n-trees", "10", "--out", out],
        ]
        .concat();
        assert!(roadsafe(dir, &args).status.success());
    };
    train("all", "all.json");
    train("osm-only", "osm.json");
    let model: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("all.json")).unwrap()).unwrap();
    for key in ["base_score", "config", "schema_hash", "trees"] {
        assert!(model.get(key).is_some(), "{key}");
    }

    let o = roadsafe(dir, &["predict", "--features", "data/features.csv", "--model", "all.json", "--out", "p.csv"]);
    assert!(o.status.success());
    let preds = std::fs::read_to_string(dir.join("p.csv")).unwrap();
    assert_eq!(preds.lines().count(), 301);
    assert!(preds.starts_with("id,p_high_risk,label"));

    // The osm-only model's schema sidecar paired with the full model.
    std::fs::copy(dir.join("osm.json.schema.json"), dir.join("all.json.schema.json")).unwrap();
    let o = roadsafe(dir, &["predict", "--features", "data/features.csv", "--model", "all.json", "--out", "q.csv"]);
    assert_eq!(o.status.code(), Some(3));
}
