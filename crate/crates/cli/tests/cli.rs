use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn ctxrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxrec"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> Output {
    let out = ctxrec(args);
    assert_eq!(
        code(&out),
        0,
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small synthetic world taken through prepare-data and build-cot-store.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    store: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let raw = root.join("raw");
    let data = root.join("data");
    let store = root.join("store");
    ok(&["synth", "--users", "60", "--items", "40", "--seed", "5", "--output", s(&raw)]);
    ok(&[
        "prepare-data",
        "--input",
        s(&raw.join("interactions.jsonl")),
        "--seed",
        "5",
        "--output",
        s(&data),
    ]);
    ok(&["build-cot-store", "--data", s(&data), "--ratio", "0.3", "--seed", "5", "--output", s(&store)]);
    Fixture {
        _dir: dir,
        root,
        data,
        store,
    }
}

fn train(f: &Fixture, name: &str, extra: &[&str]) -> PathBuf {
    let run = f.root.join(name);
    let mut args = vec![
        "train",
        "--data",
        s(&f.data),
        "--store",
        s(&f.store),
        "--max-epochs",
        "2",
        "--seed",
        "5",
        "--output",
        s(&run),
    ];
    args.extend_from_slice(extra);
    ok(&args);
    run
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&ctxrec(&["--help"])), 0);
    assert_eq!(code(&ctxrec(&["--version"])), 0);
    assert_eq!(code(&ctxrec(&["train", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&ctxrec(&[])), 1);
    assert_eq!(code(&ctxrec(&["frobnicate"])), 1);
    assert_eq!(code(&ctxrec(&["train", "--bogus"])), 1);
    assert_eq!(code(&ctxrec(&["train", "--data", "d", "--store", "s", "--variant", "nope"])), 1);
}

#[test]
fn unknown_config_keys_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[train]\nalpah = 0.3\n").unwrap();
    let out = ctxrec(&["synth", "--config", s(&cfg), "--output", s(dir.path())]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpah"));
}

fn toy_log(dir: &Path) -> PathBuf {
    // u1: 3 events, u2: 4 events, u3: 2 events (dropped)
    let rows = [
        ("u1", "a", 10),
        ("u1", "b", 20),
        ("u1", "c", 30),
        ("u2", "a", 11),
        ("u2", "c", 21),
        ("u2", "d", 31),
        ("u2", "e", 41),
        ("u3", "f", 12),
        ("u3", "a", 22),
    ];
    let text: String = rows
        .iter()
        .map(|(u, i, t)| format!("{{\"user_id\":\"{u}\",\"item_id\":\"{i}\",\"timestamp\":{t}}}\n"))
        .collect();
    let path = dir.join("toy.jsonl");
    std::fs::write(&path, text + "not json\n").unwrap();
    path
}

#[test]
fn prepare_data_counts_match_a_hand_count() {
    let dir = tempfile::tempdir().unwrap();
    let log = toy_log(dir.path());
    let out = dir.path().join("prepared");
    ok(&["prepare-data", "--input", s(&log), "--output", s(&out)]);
    let stats = json(&out.join("stats.json"));
    // two users kept, items among their positives: a b c d e
    assert_eq!(stats["users"], 2);
    assert_eq!(stats["items"], 5);
    assert_eq!(stats["reviews"], 7);
    assert_eq!(stats["dropped_users"], 1);
    assert_eq!(stats["malformed_lines"], 1);
    assert!((stats["sparsity_pct"].as_f64().unwrap() - 70.0).abs() < 1e-12);
    // one positive per user in valid and test, the rest in train; each doubled by a negative
    assert_eq!(stats["train_examples"], 6);
    assert_eq!(stats["valid_examples"], 4);
    assert_eq!(stats["test_examples"], 4);
}

#[test]
fn prepare_data_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let log = toy_log(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["prepare-data", "--input", s(&log), "--seed", "9", "--output", s(&a)]);
    ok(&["prepare-data", "--input", s(&log), "--seed", "9", "--output", s(&b)]);
    for name in ["train.jsonl", "valid.jsonl", "test.jsonl", "stats.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn date_filter_and_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let log = toy_log(dir.path());
    let out = dir.path().join("p");
    // every toy timestamp is on 1970-01-01
    let r = ctxrec(&["prepare-data", "--input", s(&log), "--since", "1971-01-01", "--output", s(&out)]);
    assert_eq!(code(&r), 2);
    let r = ctxrec(&["prepare-data", "--input", s(&log), "--until", "1970-13-01", "--output", s(&out)]);
    assert_eq!(code(&r), 1);
    let r = ctxrec(&["prepare-data", "--input", s(&dir.path().join("absent.jsonl")), "--output", s(&out)]);
    assert_ne!(code(&r), 0);
    ok(&["prepare-data", "--input", s(&log), "--until", "1970-01-01", "--output", s(&out)]);
}

#[test]
fn store_build_is_deterministic_and_reports_m() {
    let f = fixture();
    let again = f.root.join("store2");
    let out = ok(&["build-cot-store", "--data", s(&f.data), "--ratio", "0.3", "--seed", "5", "--output", s(&again)]);
    let line = String::from_utf8_lossy(&out.stdout);
    assert!(line.contains("store: M = "), "{line}");
    for name in ["store.jsonl", "keys.lcfe", "cots.lcfe", "meta.json"] {
        assert_eq!(std::fs::read(f.store.join(name)).unwrap(), std::fs::read(again.join(name)).unwrap(), "{name}");
    }
    let meta = json(&f.store.join("meta.json"));
    let n = meta["summary"]["train_examples"].as_u64().unwrap() as f64;
    let m = meta["summary"]["records"].as_u64().unwrap() as f64;
    assert_eq!(m, (0.3 * n).round());
}

#[test]
fn file_provider_missing_key_names_it() {
    let f = fixture();
    let pack = f.root.join("cots.lcfe");
    std::fs::write(
        &pack,
        "{\"magic\":\"LCFE1\",\"dim\":2,\"count\":1,\"encoding\":\"text\"}\n999999\t1 0\n",
    )
    .unwrap();
    let out = ctxrec(&[
        "build-cot-store",
        "--data",
        s(&f.data),
        "--provider",
        "file",
        "--cot-pack",
        s(&pack),
        "--output",
        s(&f.root.join("fstore")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no CoT embedding for key"));
}

#[test]
fn train_evaluate_round_trip() {
    let f = fixture();
    let run = train(&f, "run", &["--alpha", "0.3"]);
    for name in ["config.json", "metrics.jsonl", "checkpoint.bin", "report.json"] {
        assert!(run.join(name).exists(), "{name}");
    }
    let config = json(&run.join("config.json"));
    assert_eq!(config["alpha"].as_f64(), Some(0.3));
    let report = json(&run.join("report.json"));
    assert_eq!(report["report"]["variant"], "full");
    assert!(report["report"]["auc"].is_number());
    assert!(report["report"].get("hit").is_none());
    assert_eq!(report["leakage_violations"], 0);
    let epochs = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count();
    assert!((1..=2).contains(&epochs));

    let eval = |name: &str, extra: &[&str]| -> Value {
        let out = f.root.join(name);
        let ckpt = run.join("checkpoint.bin");
        let mut args = vec![
            "evaluate",
            "--data",
            s(&f.data),
            "--store",
            s(&f.store),
            "--checkpoint",
            s(&ckpt),
            "--seed",
            "5",
            "--output",
            s(&out),
        ];
        args.extend_from_slice(extra);
        ok(&args);
        json(&out.join("report.json"))
    };
    let a = eval("eval_a", &[]);
    let b = eval("eval_b", &[]);
    assert_eq!(a, b);
    assert_eq!(a["auc"], report["report"]["auc"]);
    assert!(a.get("relaimpr_pct").is_none());
    let c = eval("eval_c", &["--base-auc", "0.6"]);
    let auc = c["auc"].as_f64().unwrap();
    let expected = ((auc - 0.5) / (0.6 - 0.5) - 1.0) * 100.0;
    assert!((c["relaimpr_pct"].as_f64().unwrap() - expected).abs() < 1e-9);
}

#[test]
fn variant_flag_tags_the_report() {
    let f = fixture();
    let run = train(&f, "noc", &["--variant", "no_cot"]);
    assert_eq!(json(&run.join("report.json"))["report"]["variant"], "no_cot");
}

#[test]
fn missing_checkpoint_fails() {
    let f = fixture();
    let out = ctxrec(&[
        "evaluate",
        "--data",
        s(&f.data),
        "--store",
        s(&f.store),
        "--checkpoint",
        s(&f.root.join("nope.bin")),
        "--output",
        s(&f.root.join("e")),
    ]);
    assert_ne!(code(&out), 0);
}

#[test]
fn ablation_marks_one_best_cell() {
    let f = fixture();
    let out = f.root.join("sweep");
    ok(&[
        "ablate",
        "--data",
        s(&f.data),
        "--store",
        s(&f.store),
        "--ks",
        "0,2",
        "--max-epochs",
        "1",
        "--seed",
        "5",
        "--output",
        s(&out),
    ]);
    let table = json(&out.join("ablation.json"));
    let rows = table["rows"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["cell"].as_str().unwrap()).collect();
    assert_eq!(names, ["n0", "n2", "n4_noc"]);
    assert_eq!(rows.iter().filter(|r| r["best"] == true).count(), 1);
    assert!(rows.iter().all(|r| r["metric"].is_number()));
}
