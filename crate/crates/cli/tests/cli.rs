use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn mixsoup(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixsoup")).args(args).env_remove("MIXSOUP_CACHE").output().expect("spawn mixsoup")
}

fn ok(args: &[&str]) -> String {
    let out = mixsoup(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    ok(&[
        "synth",
        "--out",
        s(&out),
        "--train-tokens",
        "4000",
        "--heldout-tokens",
        "1000",
        "--seed-tokens",
        "3000",
        "--ood-tokens",
        "1500",
    ]);
    out
}

fn study_config(dir: &Path, data: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"
corpus = "{corpus}"
seed_corpus = "{seed}"
keys = ["source", "topic"]
k = 2
sample_count = 3
heldout_fraction = 0.2
split = {{ target_tokens = 3000 }}
{extra}
[[eval_domains]]
id = "ood"
path = "{ood}"

[proxy]
model = "tiny"
unit_budget_tokens = 512
seed_tokens = 512
batch_rows = 4
"#,
        corpus = s(&data.join("corpus.jsonl")),
        seed = s(&data.join("seed.jsonl")),
        ood = s(&data.join("ood.jsonl")),
    );
    let path = dir.join("study.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn run_toml(dir: &Path) -> toml::Table {
    std::fs::read_to_string(dir.join("run.toml")).unwrap().parse().unwrap()
}

#[test]
fn missing_corpus_names_the_path() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nope.jsonl");
    let out = mixsoup(&["partition", "--corpus", s(&missing), "--keys", "source", "--unit-tokens", "100", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn unknown_flags_fail_and_help_succeeds() {
    assert_eq!(mixsoup(&["costs", "--bogus"]).status.code(), Some(1));
    assert_eq!(mixsoup(&["--help"]).status.code(), Some(0));
}

#[test]
fn partition_manifest_has_one_row_per_key_tuple_and_is_stable() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path());
    let corpus = data.join("corpus.jsonl");
    let mut tuples = std::collections::BTreeSet::new();
    for line in std::fs::read_to_string(&corpus).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        tuples.insert((v["metadata"]["source"].to_string(), v["metadata"]["topic"].to_string()));
    }
    let manifest = |out: &Path| {
        ok(&["partition", "--corpus", s(&corpus), "--keys", "source,topic", "--unit-tokens", "1500", "--out", s(out)]);
        (std::fs::read(out.join("partitions.jsonl")).unwrap(), std::fs::read(out.join("units.jsonl")).unwrap())
    };
    let a = manifest(&tmp.path().join("a"));
    let b = manifest(&tmp.path().join("b"));
    assert_eq!(a, b);
    let rows = String::from_utf8(a.0).unwrap();
    assert_eq!(rows.lines().count(), tuples.len());
    assert!(String::from_utf8(a.1).unwrap().lines().count() > tuples.len());
}

#[test]
fn costs_match_hand_arithmetic() {
    let t: toml::Table = ok(&["costs", "--units-trained", "104", "--n", "128", "--k", "2,3"]).parse().unwrap();
    assert_eq!(t["modular_hours"].as_str(), Some("520"));
    assert_eq!(t["remaining_units"].as_integer(), Some(24));
    assert_eq!(t["incremental_hours_for_full_sweep"].as_str(), Some("120"));
    assert_eq!(t["full_sweep_modular_hours"].as_str(), Some("640"));
    let sweeps = t["full_sweeps"].as_array().unwrap();
    assert_eq!(sweeps[0]["mixtures"].as_str(), Some("8128"));
    assert_eq!(sweeps[0]["naive_unit_budgets"].as_str(), Some("16256"));
    assert_eq!(sweeps[0]["naive_hours"].as_str(), Some("81280"));
    assert_eq!(sweeps[1]["mixtures"].as_str(), Some("341376"));
    let t: toml::Table = ok(&["costs", "--units-trained", "104", "--modular-budgets", "163", "--n", "128"]).parse().unwrap();
    assert_eq!(t["modular_hours"].as_str(), Some("815"));
}

#[test]
fn costs_write_the_complexity_curve() {
    let tmp = TempDir::new().unwrap();
    let curve = tmp.path().join("c.csv");
    ok(&["costs", "--units-trained", "1", "--n", "4", "--curve", "2..4", "--curve-out", s(&curve)]);
    assert_eq!(std::fs::read_to_string(curve).unwrap(), "n,modular,naive\n2,2,2\n3,3,6\n4,4,12\n");
}

#[test]
fn study_without_seq_trains_no_mixture_models_and_resumes() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path());
    let cfg = study_config(tmp.path(), &data, "");
    let cache = tmp.path().join("cache");
    let out = tmp.path().join("out");
    let args = ["study", "--config", s(&cfg), "--out", s(&out), "--cache", s(&cache), "--jobs", "1"];
    ok(&args);
    let run = run_toml(&out);
    assert_eq!(run["seq_jobs"].as_integer(), Some(0));
    assert_eq!(run["mixtures"].as_integer(), Some(3));
    let units = run["base_units"].as_integer().unwrap();
    let first = run["trainings_this_run"].as_integer().unwrap();
    assert!(first >= 1 && first <= units + 1, "{first} trainings for {units} units");
    let mixtures = std::fs::read_to_string(out.join("mixtures.csv")).unwrap();
    assert!(mixtures.lines().skip(1).all(|l| l.split(',').nth(2) == Some("")), "{mixtures}");
    let reports: Vec<Vec<u8>> = ["mixtures.csv", "correlations.csv", "ranks.csv", "ledger.toml"]
        .iter()
        .map(|f| std::fs::read(out.join(f)).unwrap())
        .collect();

    ok(&args);
    assert_eq!(run_toml(&out)["trainings_this_run"].as_integer(), Some(0));
    let again: Vec<Vec<u8>> = ["mixtures.csv", "correlations.csv", "ranks.csv", "ledger.toml"]
        .iter()
        .map(|f| std::fs::read(out.join(f)).unwrap())
        .collect();
    assert_eq!(reports, again);

    let fresh = tmp.path().join("fresh");
    ok(&["study", "--config", s(&cfg), "--out", s(&fresh), "--cache", s(&cache), "--fresh"]);
    assert_eq!(std::fs::read(fresh.join("mixtures.csv")).unwrap(), reports[0]);
}

#[test]
fn study_with_seq_trains_each_mixture() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path());
    let cfg = study_config(tmp.path(), &data, "");
    let out = tmp.path().join("out");
    let cache = tmp.path().join("cache");
    ok(&["study", "--config", s(&cfg), "--out", s(&out), "--cache", s(&cache), "--with-seq"]);
    assert_eq!(run_toml(&out)["seq_jobs"].as_integer(), Some(3));
    let mixtures = std::fs::read_to_string(out.join("mixtures.csv")).unwrap();
    assert!(mixtures.lines().skip(1).all(|l| l.split(',').nth(2).is_some_and(|v| v.parse::<f64>().is_ok())));
    let report = ok(&["report", "--dir", s(&out)]);
    assert!(report.contains("Pearson") && report.contains("ood"));
}

#[test]
fn invalid_config_field_is_named() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path());
    let cfg = study_config(tmp.path(), &data, "top_k = \"three\"");
    let out = mixsoup(&["study", "--config", s(&cfg), "--out", s(&tmp.path().join("o")), "--cache", s(&tmp.path().join("c"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("top_k"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_merge_and_evaluate_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path());
    let cache = tmp.path().join("cache");
    let seed = tmp.path().join("seed.ckpt");
    let train = ["--tokens", "256", "--rows", "2", "--cache", s(&cache)];
    let (seed_docs, corpus) = (data.join("seed.jsonl"), data.join("corpus.jsonl"));
    let mut args = vec!["seed-train", "--corpus", s(&seed_docs), "--model", "tiny", "--out", s(&seed)];
    args.extend(train);
    ok(&args);
    let a = tmp.path().join("a.ckpt");
    let b = tmp.path().join("b.ckpt");
    for (out, stream) in [(&a, "0"), (&b, "1")] {
        let mut args = vec!["unit-train", "--seed", s(&seed), "--corpus", s(&corpus), "--out", s(out)];
        args.extend(train);
        args.extend(["--stream-seed", stream]);
        ok(&args);
    }
    let merged = tmp.path().join("m.ckpt");
    let group = format!("{},{}", s(&a), s(&b));
    ok(&["merge", "--group", &group, "--out", s(&merged)]);
    let self_merge = tmp.path().join("aa.ckpt");
    ok(&["merge", "--group", s(&a), "--group", s(&a), "--mode", "weighted", "--weights", "0.25,0.75", "--out", s(&self_merge)]);
    let eval = |m: &Path| ok(&["eval", "--model", s(m), "--eval", s(&data.join("ood.jsonl"))]);
    assert_eq!(eval(&a), eval(&self_merge));
    let table = eval(&merged);
    let ppl: f64 = table.lines().nth(1).unwrap().split_whitespace().last().unwrap().parse().unwrap();
    assert!(ppl.is_finite() && ppl > 1.0 && ppl < 258.0, "{table}");
    let bad = mixsoup(&["merge", "--group", s(&a), "--mode", "weighted", "--weights", "1,2", "--out", s(&merged)]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn decontaminate_drops_leaked_documents() {
    let tmp = TempDir::new().unwrap();
    let corpus = tmp.path().join("c.jsonl");
    let eval = tmp.path().join("e.jsonl");
    let para = "the quick brown fox jumps over the lazy dog and keeps running far away";
    std::fs::write(
        &corpus,
        format!("{{\"id\":\"a\",\"text\":\"{para}\"}}\n{{\"id\":\"b\",\"text\":\"nothing to see in this one at all, just plain words\"}}\n"),
    )
    .unwrap();
    std::fs::write(&eval, format!("{{\"id\":\"x\",\"text\":\"intro\\n\\n{para}\"}}\n")).unwrap();
    let out = tmp.path().join("clean.jsonl");
    let msg = ok(&["decontaminate", "--corpus", s(&corpus), "--eval", s(&eval), "--eval", s(&eval), "--out", s(&out), "--min-tokens", "5"]);
    assert!(msg.contains("kept 1 excluded 1"), "{msg}");
    let kept = std::fs::read_to_string(out).unwrap();
    assert!(kept.contains("\"b\"") && !kept.contains("\"a\""));
}
