//! Runs a sampled k=2 ablation over a synthetic corpus and prints how well
//! each proxy tracks fully trained mixture models.
//!
//! Usage: synthetic_study [cache_dir] [seq_size]

use std::time::Instant;

use mixsoup::lm::ModelConfig;
use mixsoup::optim::Schedule;
use mixsoup::par::ExecPolicy;
use mixsoup::registry::Registry;
use mixsoup::study::*;
use mixsoup::synth::{study_inputs, SynthConfig, OOD_DOMAIN};

const SEED_LR: f64 = 3e-3;

fn recipe(model: ModelConfig, max_lr: f64) -> TrainingRecipe {
    let mut r = TrainingRecipe::new(model, 200_000);
    r.max_lr = max_lr;
    r.min_lr = max_lr / 10.0;
    r
}

fn main() -> mixsoup::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let cache = args.get(1).cloned().unwrap_or_else(|| "target/synthetic-study".into());
    let seq_size = args.get(2).cloned().unwrap_or_else(|| "tiny".into());
    let policy = ExecPolicy::default();
    let registry = Registry::open(&cache)?;
    let t0 = Instant::now();
    let inputs = study_inputs(&SynthConfig::default())?;
    let seed_docs = &inputs.corpus.seed;
    let proxy_recipe = recipe(ModelConfig::tiny(), Schedule::DEFAULT_MAX_LR);
    let seed = train_seed_model(&registry, &recipe(ModelConfig::tiny(), SEED_LR), seed_docs, 1_000_000, policy)?;
    let proxy = ModelSetup::new(proxy_recipe, seed)?;
    let seq_model = ModelConfig::preset(&seq_size).expect("known size");
    let seq = if seq_model == proxy.recipe.model {
        None
    } else {
        let r = recipe(seq_model.clone(), Schedule::DEFAULT_MAX_LR);
        let s = train_seed_model(&registry, &recipe(seq_model, SEED_LR), seed_docs, 1_000_000, policy)?;
        Some(ModelSetup::new(r, s)?)
    };
    eprintln!("seed models ready after {:.0}s", t0.elapsed().as_secs_f64());
    let mut cfg = StudyConfig {
        partitions: inputs.partitions,
        k: 2,
        mixtures: Vec::new(),
        ood_domains: vec![inputs.ood],
        hours_per_unit: cost::parse_decimal("5")?,
        with_seq_validation: true,
        top_k: 3,
        sweep_ks: vec![2],
        allow_mixed_k: false,
    };
    cfg.mixtures = enumerate_mixtures(&cfg.partition_refs(), 2, &MixtureConstraints::default(), Some(15), 0)?;
    let ctx = StudyContext { registry: &registry, proxy: &proxy, seq: seq.as_ref(), policy, manifest: None };
    let out = run_study(&cfg, ctx)?;
    eprintln!("study done after {:.0}s, {} trainings", t0.elapsed().as_secs_f64(), out.trainings_performed);
    for r in &out.report.rows {
        println!(
            "{:<14} {:<10} seq {:>7.3} merged {:>7.3} ind {:>7.3} ind_id {}",
            r.mixture_id,
            r.domain,
            r.seq.unwrap_or(f64::NAN),
            r.merged,
            r.mean_ind,
            r.ind_id.map_or("-".into(), |v| format!("{v:.3}"))
        );
    }
    for d in [IN_DOMAIN, OOD_DOMAIN] {
        for k in ProxyKind::ALL {
            if let Some(r) = out.report.pearson(d, k) {
                let rank = out.report.rank(d, k).map(|a| a.true_rank_of_proxy_top1);
                println!("{d:<10} {:<9} pearson {r:.3} top1 true rank {rank:?}", k.as_str());
            }
        }
    }
    Ok(())
}
