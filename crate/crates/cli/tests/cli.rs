use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nnprompt_core::synthetic::{SyntheticConfig, SyntheticFixture};
use nnprompt_core::{Datastore, RecordLm, Task, Vocab};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_nnprompt"));
    c.env_remove("NNPROMPT_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn nnprompt")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn fixture_dir() -> (tempfile::TempDir, SyntheticFixture) {
    let fx = SyntheticFixture::generate(SyntheticConfig {
        instances: 20,
        ..Default::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    fx.write_to(dir.path()).unwrap();
    (dir, fx)
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn build_store(dir: &Path) -> PathBuf {
    let out = dir.join("store.knnd");
    let o = run(&[
        "build-datastore",
        "--vocab",
        &p(dir, "vocab.txt"),
        "--corpus",
        &p(dir, "corpus.txt"),
        "--out",
        &out.to_string_lossy(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn build_reports_tokens_per_source() {
    let (dir, fx) = fixture_dir();
    let d = dir.path();
    std::fs::write(d.join("second.txt"), "sunny warm it was superb\n\nbleak it was awful\n").unwrap();
    let out = d.join("two.knnd");
    let o = run(&[
        "build-datastore",
        "--vocab",
        &p(d, "vocab.txt"),
        "--corpus",
        &p(d, "corpus.txt"),
        &p(d, "second.txt"),
        "--out",
        &out.to_string_lossy(),
        "--provenance",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "source\ttokens\tentries");
    assert!(lines[2].ends_with("\t9\t7"), "{table}");
    let store = Datastore::load(&out).unwrap();
    assert_eq!(store.len(), 207);
    assert_eq!(lines[3], "total\t".to_owned() + &(fx.corpus().token_count() + 9).to_string() + "\t207");
    let prov = store.provenance().unwrap();
    assert_eq!(prov[200].corpus_id, 1);
}

#[test]
fn eval_writes_table_shaped_report() {
    let (dir, _) = fixture_dir();
    let d = dir.path();
    let store = build_store(d);
    let o = run(&[
        "eval",
        "--task",
        &p(d, "task.json"),
        "--dataset",
        &p(d, "dataset.jsonl"),
        "--vocab",
        &p(d, "vocab.txt"),
        "--datastore",
        &store.to_string_lossy(),
        "--modes",
        "LM,LM_PMI,KNN_LM,KNN_PROMPT",
        "--k",
        "16",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let modes: Vec<&str> = v["summary"].as_array().unwrap().iter().map(|s| s["mode"].as_str().unwrap()).collect();
    assert_eq!(modes, ["LM", "LM_PMI", "KNN_LM", "KNN_PROMPT"]);
    for row in v["runs"][0]["accuracy"].as_array().unwrap() {
        let c = row["correct"].as_f64().unwrap();
        let t = row["total"].as_f64().unwrap();
        assert_eq!(row["accuracy"].as_f64().unwrap(), c / t);
    }
    assert_eq!(v["config"]["retrieval"]["k"], 16);
    assert!(v["timings"]["total_ms"].is_number());
}

#[test]
fn few_shot_defaults_to_four_seeds() {
    let (dir, _) = fixture_dir();
    let d = dir.path();
    let o = run(&[
        "eval",
        "--task",
        &p(d, "task.json"),
        "--dataset",
        &p(d, "dataset.jsonl"),
        "--vocab",
        &p(d, "vocab.txt"),
        "--modes",
        "LM,LM_PMI",
        "--shots",
        "4",
        "--train",
        &p(d, "train.jsonl"),
        "--seed",
        "10",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let seeds: Vec<u64> = v["runs"].as_array().unwrap().iter().map(|r| r["seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds, [10, 11, 12, 13]);
    assert!(v["summary"][0]["std"].is_number());
}

#[test]
fn seed_precedence_flag_config_env() {
    let (dir, _) = fixture_dir();
    let d = dir.path();
    let cfg = d.join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 50, "modes": ["LM"], "shots": 1, "seeds": null}"#).unwrap();
    let args = |extra: &[&str]| {
        let mut a: Vec<String> = [
            "eval",
            "--task",
            &p(d, "task.json"),
            "--dataset",
            &p(d, "dataset.jsonl"),
            "--vocab",
            &p(d, "vocab.txt"),
            "--train",
            &p(d, "train.jsonl"),
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        a.extend(extra.iter().map(|s| s.to_string()));
        a
    };
    let first_seed = |o: Output| -> u64 {
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        v["runs"][0]["seed"].as_u64().unwrap()
    };
    let cfg_s = cfg.to_string_lossy().into_owned();
    let env = |a: Vec<String>| bin().args(a).env("NNPROMPT_SEED", "70").output().unwrap();
    assert_eq!(first_seed(env(args(&["--config", &cfg_s, "--seed", "60"]))), 60);
    assert_eq!(first_seed(env(args(&["--config", &cfg_s]))), 50);
    assert_eq!(first_seed(env(args(&["--modes", "LM", "--shots", "1"]))), 70);
    assert_eq!(first_seed(bin().args(args(&["--modes", "LM", "--shots", "1"])).output().unwrap()), 0);
}

#[test]
fn exit_codes() {
    let (dir, _) = fixture_dir();
    let d = dir.path();
    let base = |extra: &[&str]| {
        let mut a = vec![
            "eval".to_owned(),
            "--task".into(),
            p(d, "task.json"),
            "--dataset".into(),
            p(d, "dataset.jsonl"),
            "--vocab".into(),
            p(d, "vocab.txt"),
        ];
        a.extend(extra.iter().map(|s| s.to_string()));
        bin().args(a).output().unwrap()
    };
    // usage and configuration errors
    assert_eq!(code(&run(&["eval", "--bogus"])), 1);
    assert_eq!(code(&base(&["--modes", "KNN_LM"])), 1);
    assert_eq!(code(&base(&["--modes", "NOT_A_MODE"])), 1);
    assert_eq!(code(&base(&["--lambda", "2"])), 1);
    let bad_cfg = d.join("bad.json");
    std::fs::write(&bad_cfg, r#"{"k": "many"}"#).unwrap();
    assert_eq!(code(&base(&["--config", &bad_cfg.to_string_lossy()])), 1);
    // data errors
    let junk = d.join("junk.knnd");
    std::fs::write(&junk, b"NOPE and more bytes than a header").unwrap();
    let o = base(&["--datastore", &junk.to_string_lossy(), "--modes", "KNN_LM"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad magic"));
    assert_eq!(code(&base(&["--datastore", &p(d, "missing.knnd")])), 2);
    // help is not an error
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn sweep_rows_follow_grid_order() {
    let (dir, _) = fixture_dir();
    let d = dir.path();
    let store = build_store(d);
    let common = [
        "sweep",
        "--task",
        &p(d, "task.json"),
        "--dataset",
        &p(d, "dataset.jsonl"),
        "--vocab",
        &p(d, "vocab.txt"),
        "--datastore",
        &store.to_string_lossy(),
    ]
    .map(str::to_owned);
    let go = |extra: &[&str]| {
        let o = bin().args(&common).args(extra).output().unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    let csv = go(&["--ks", "4,8", "--temperatures", "1,3", "--lambdas", "0.1,0.5"]);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "k,t,lambda,mode,accuracy");
    assert_eq!(rows.len(), 9);
    let keys: Vec<String> = rows[1..].iter().map(|r| r.split(',').take(3).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(
        keys,
        ["4,1,0.1", "4,1,0.5", "4,3,0.1", "4,3,0.5", "8,1,0.1", "8,1,0.5", "8,3,0.1", "8,3,0.5"]
    );

    // lambda 0 collapses to the base LM
    let csv = go(&["--ks", "1", "--temperatures", "1", "--lambdas", "0", "--modes", "KNN_LM"]);
    let acc: f64 = csv.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    let o = run(&[
        "eval",
        "--task",
        &p(d, "task.json"),
        "--dataset",
        &p(d, "dataset.jsonl"),
        "--vocab",
        &p(d, "vocab.txt"),
        "--modes",
        "LM",
    ]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["summary"][0]["mean"].as_f64().unwrap() - acc).abs() < 1e-6);

    let csv = go(&[]);
    assert!(csv.lines().any(|l| l.starts_with("1024,3,0.3,")));
}

#[test]
fn coverage_empty_store_and_verbalizer_only_store() {
    let (dir, fx) = fixture_dir();
    let d = dir.path();
    let args = |store: &Path| {
        run(&[
            "coverage",
            "--task",
            &p(d, "task.json"),
            "--dataset",
            &p(d, "dataset.jsonl"),
            "--vocab",
            &p(d, "vocab.txt"),
            "--datastore",
            &store.to_string_lossy(),
            "--k",
            "8",
        ])
    };
    let empty = d.join("empty.knnd");
    Datastore::empty(16).unwrap().save(&empty).unwrap();
    let o = args(&empty);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!((v["bare_rate"].as_f64(), v["fuzzy_rate"].as_f64()), (Some(0.0), Some(0.0)));

    let full = fx.datastore().unwrap();
    let great = fx.vocab.id("great").unwrap();
    let only = Datastore::new(16, full.keys().to_vec(), vec![great; full.len()], None).unwrap();
    let only_path = d.join("only.knnd");
    only.save(&only_path).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&args(&only_path).stdout).unwrap();
    assert_eq!(v["bare_rate"].as_f64(), Some(1.0));
}

#[test]
fn expand_verbalizer_round_trips_into_task() {
    let (dir, _) = fixture_dir();
    let d = dir.path();
    let out = d.join("fuzzy.json");
    let o = run(&[
        "expand-verbalizer",
        "--task",
        &p(d, "task.json"),
        "--vocab",
        &p(d, "vocab.txt"),
        "--vectors",
        &p(d, "vectors.txt"),
        "--lexicon",
        &p(d, "lexicon.tsv"),
        "--out",
        &out.to_string_lossy(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let sets: std::collections::BTreeMap<String, Vec<String>> =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let mut great = vec!["excellent", "fantastic", "great", "marvelous", "splendid", "superb", "wonderful"];
    great.sort();
    assert_eq!(sets["great"], great);

    let vocab = Vocab::load(d.join("vocab.txt")).unwrap();
    let from_files = Task::load(d.join("task.json"), &vocab).unwrap();
    let mut spec: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("task.json")).unwrap()).unwrap();
    spec["fuzzy"] = serde_json::to_value(&sets).unwrap();
    spec["word_vectors_path"] = serde_json::Value::Null;
    spec["synonym_lexicon_path"] = serde_json::Value::Null;
    std::fs::write(d.join("inline.json"), spec.to_string()).unwrap();
    let inline = Task::load(d.join("inline.json"), &vocab).unwrap();
    assert_eq!(inline.neighborhoods, from_files.neighborhoods);

    // no resources: identity neighborhoods
    let bare = d.join("bare.json");
    let mut spec2 = spec.clone();
    spec2["fuzzy"] = serde_json::Value::Null;
    std::fs::write(&bare, spec2.to_string()).unwrap();
    let o = run(&["expand-verbalizer", "--task", &bare.to_string_lossy(), "--vocab", &p(d, "vocab.txt")]);
    let sets: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(sets, serde_json::json!({"great": ["great"], "terrible": ["terrible"]}));
}

#[test]
fn record_backend_reproduces_toy_eval() {
    let (dir, _) = fixture_dir();
    let d = dir.path();
    let records = d.join("toy.nnpr");
    let o = run(&[
        "export-records",
        "--vocab",
        &p(d, "vocab.txt"),
        "--out",
        &records.to_string_lossy(),
        "--corpus",
        &p(d, "corpus.txt"),
        "--task",
        &p(d, "task.json"),
        "--dataset",
        &p(d, "dataset.jsonl"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(RecordLm::load(&records).unwrap().len() > 21);

    let toy_store = build_store(d);
    let rec_store = d.join("rec.knnd");
    let o = run(&[
        "build-datastore",
        "--vocab",
        &p(d, "vocab.txt"),
        "--corpus",
        &p(d, "corpus.txt"),
        "--out",
        &rec_store.to_string_lossy(),
        "--backend",
        "records",
        "--records",
        &records.to_string_lossy(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&toy_store).unwrap(), std::fs::read(&rec_store).unwrap());

    let eval = |extra: &[&str]| {
        let mut c = bin();
        c.args([
            "eval",
            "--task",
            &p(d, "task.json"),
            "--dataset",
            &p(d, "dataset.jsonl"),
            "--vocab",
            &p(d, "vocab.txt"),
            "--datastore",
            &rec_store.to_string_lossy(),
            "--k",
            "16",
            "--modes",
            "LM,LM_PMI,KNN_LM,KNN_FUZZY,KNN_PROMPT",
        ]);
        let o = c.args(extra).output().unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let mut v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        v.as_object_mut().unwrap().remove("timings");
        v
    };
    assert_eq!(eval(&[]), eval(&["--backend", "records", "--records", &records.to_string_lossy()]));
}
