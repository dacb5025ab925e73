use mixsoup::lm::{evaluate_tokens, ModelConfig};
use mixsoup::optim::*;
use mixsoup::par::ExecPolicy;
use mixsoup::tokenizer::{encode, pack_sequences, PackedBatch};
use mixsoup::Error;

const ROWS: usize = 16;

fn tiny() -> ModelConfig {
    ModelConfig::tiny().with_seed(7)
}

fn repetitive_docs() -> impl Iterator<Item = Vec<u32>> + Clone {
    let phrases = ["abcabcabc the cat sat on the mat", "xyz xyz the dog ran to the log", "one two three four five six"];
    (0..).map(move |i| encode(phrases[i % 3]))
}

fn stream(cfg: &ModelConfig) -> impl Iterator<Item = PackedBatch> {
    pack_sequences(repetitive_docs(), cfg.seq_len, ROWS)
}

fn schedule_for(budget: u64, cfg: &ModelConfig, max_lr: f64) -> Schedule {
    Schedule::for_budget(max_lr, max_lr / 10.0, 0.05, budget, (ROWS * cfg.seq_len) as u64).unwrap()
}

fn heldout_ppl(ckpt: &ModelCheckpoint) -> f64 {
    let docs: Vec<Vec<u32>> = repetitive_docs().take(60).collect();
    evaluate_tokens(&ckpt.params, "heldout", docs, ExecPolicy::default()).unwrap().perplexity
}

#[test]
fn training_reduces_heldout_perplexity() {
    let cfg = tiny();
    let start = ModelCheckpoint::fresh(&cfg).unwrap();
    let budget = 200_000;
    let settings = TrainSettings::new(budget, schedule_for(budget, &cfg, 3e-3), TrainMode::Seed).partitions(["rep"]);
    let out = train(&start, stream(&cfg), &settings).unwrap();
    let before = heldout_ppl(&start);
    let after = heldout_ppl(&out.checkpoint);
    // regression values for seed 7
    println!("heldout perplexity {before:.3} -> {after:.3}");
    assert!(after <= 0.8 * before, "{before} -> {after}");
    assert!(out.checkpoint.provenance.tokens_trained >= budget);
    assert_eq!(out.checkpoint.provenance.trained_partition_ids, vec!["rep"]);
}

#[test]
fn zero_budget_is_rejected() {
    let cfg = tiny();
    let start = ModelCheckpoint::fresh(&cfg).unwrap();
    let s = TrainSettings::new(0, schedule_for(1000, &cfg, 1e-3), TrainMode::Seed);
    assert!(matches!(train(&start, stream(&cfg), &s), Err(Error::InvalidArgument(_))));
}

#[test]
fn finite_stream_runs_out() {
    let cfg = tiny();
    let start = ModelCheckpoint::fresh(&cfg).unwrap();
    let s = TrainSettings::new(1_000_000, schedule_for(1_000_000, &cfg, 1e-3), TrainMode::Seed);
    let short = pack_sequences(repetitive_docs().take(10), cfg.seq_len, ROWS);
    assert!(matches!(train(&start, short, &s), Err(Error::StreamExhausted { .. })));
}

fn seed_model(cfg: &ModelConfig) -> ModelCheckpoint {
    let start = ModelCheckpoint::fresh(cfg).unwrap();
    let s = TrainSettings::new(20_000, schedule_for(20_000, cfg, 2e-3), TrainMode::Seed).partitions(["seed"]);
    train(&start, stream(cfg), &s).unwrap().checkpoint
}

#[test]
fn continued_training_restarts_schedule_and_keeps_moments() {
    let cfg = tiny();
    let seed = seed_model(&cfg);
    assert!(seed.adam.step > 0);
    let seed_sched = seed.provenance.schedule_used.unwrap();
    let sched = Schedule::new(2e-3, 2e-4, 0, 40).unwrap();
    let s = TrainSettings::new(10_000, sched, TrainMode::Continued).partitions(["unit"]);
    let out = train(&seed, stream(&cfg), &s).unwrap();
    assert_eq!(out.lrs[0], sched.lr_at(0).unwrap());
    assert_eq!(out.lrs[0], 2e-3);
    assert_ne!(out.lrs[0], seed_sched.lr_at(seed_sched.total_steps).unwrap());
    let prov = &out.checkpoint.provenance;
    assert_eq!(prov.seed_checkpoint_hash, seed.content_hash());
    assert_eq!(prov.trained_partition_ids, vec!["seed", "unit"]);
    assert_eq!(out.checkpoint.adam.step, seed.adam.step + out.losses.len() as u64);

    let reset = TrainSettings { reset_optimizer: true, ..s.clone() };
    let fresh_moments = train(&seed, stream(&cfg), &reset).unwrap();
    assert_ne!(fresh_moments.checkpoint.params.flat, out.checkpoint.params.flat);
}

#[test]
fn continued_mode_needs_seed_lineage() {
    let cfg = tiny();
    let start = ModelCheckpoint::fresh(&cfg).unwrap();
    let s = TrainSettings::new(1000, schedule_for(1000, &cfg, 1e-3), TrainMode::Continued);
    assert!(train(&start, stream(&cfg), &s).is_err());
}

#[test]
fn training_is_deterministic_and_accounts_tokens() {
    let cfg = tiny();
    let a = seed_model(&cfg);
    let b = seed_model(&cfg);
    assert_eq!(a.to_bytes(), b.to_bytes());
    let counted: u64 = {
        let mut c = 0;
        let steps = a.adam.step as usize;
        for batch in stream(&cfg).take(steps) {
            c += batch.unmasked_tokens();
        }
        c
    };
    assert_eq!(a.provenance.tokens_trained, counted);
}

#[test]
fn policies_train_identically() {
    let cfg = tiny();
    let start = ModelCheckpoint::fresh(&cfg).unwrap();
    let mut s = TrainSettings::new(8_000, schedule_for(8_000, &cfg, 1e-3), TrainMode::Seed);
    s.policy = ExecPolicy::Sequential;
    let a = train(&start, stream(&cfg), &s).unwrap();
    s.policy = ExecPolicy::Parallel;
    let b = train(&start, stream(&cfg), &s).unwrap();
    assert_eq!(a.checkpoint.params.flat, b.checkpoint.params.flat);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = tiny();
    let ckpt = seed_model(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seed.ckpt");
    let hash = save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.content_hash(), hash);
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back.params.flat), bits(&ckpt.params.flat));
    assert_eq!(bits(&back.adam.v), bits(&ckpt.adam.v));
}

#[test]
fn truncated_or_mismatched_checkpoints_fail() {
    let cfg = tiny();
    let ckpt = ModelCheckpoint::fresh(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&cut), Err(Error::Corrupt { .. })));
    let err = load_checkpoint_for(&path, &ModelConfig::small()).unwrap_err();
    assert!(err.to_string().contains("config mismatch"), "{err}");
    assert!(load_checkpoint_for(&path, &cfg).is_ok());
}
