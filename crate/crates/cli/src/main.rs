//! `mixsoup`: partition a corpus, train and cache unit models, merge,
//! evaluate and run mixture ablation studies.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mixsoup::corpus::{
    ingest_documents, partition_by_metadata, split_into_base_units, write_documents, write_partition_manifest,
    write_unit_manifest, BaseUnit, SplitPlan,
};
use mixsoup::decontam::{build_eval_filter, decontaminate, DEFAULT_MIN_PARAGRAPH_TOKENS, DEFAULT_TARGET_FP_RATE};
use mixsoup::lm::{evaluate_perplexity_with, ModelConfig};
use mixsoup::merge::{merge_checkpoints, MergeGroup, MergeMode, MergeSpec};
use mixsoup::optim::{load_checkpoint, save_checkpoint, ModelCheckpoint};
use mixsoup::par::ExecPolicy;
use mixsoup::registry::Registry;
use mixsoup::study::config::{run_study_file, RunOptions, StudyFile};
use mixsoup::study::cost::{complexity_curve, cost_model, parse_decimal, CostInputs};
use mixsoup::study::{train_seed_model, ModelSetup, TrainingRecipe, REPORT_FILES};
use mixsoup::synth::{generate, SynthConfig};

const CACHE_ENV: &str = "MIXSOUP_CACHE";

#[derive(Parser)]
#[command(name = "mixsoup", version, about = "Simulated data-mixture ablations through modular training and parameter averaging")]
struct Cli {
    /// Worker threads for training and evaluation (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Increase log detail (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CacheArg {
    /// Checkpoint cache root.
    #[arg(long, env = CACHE_ENV, default_value = ".mixsoup-cache")]
    cache: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-source corpus, seed set and out-of-domain set.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 120_000)]
        train_tokens: u64,
        #[arg(long, default_value_t = 12_000)]
        heldout_tokens: u64,
        #[arg(long, default_value_t = 240_000)]
        seed_tokens: u64,
        #[arg(long, default_value_t = 24_000)]
        ood_tokens: u64,
    },
    /// Group documents by metadata and split groups into base units.
    Partition {
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated metadata keys.
        #[arg(long, value_delimiter = ',', required = true)]
        keys: Vec<String>,
        #[arg(long)]
        unit_tokens: u64,
        /// Merge consecutive underfull sibling partitions before splitting.
        #[arg(long)]
        recombine: bool,
        #[arg(long, default_value_t = 0.5)]
        slack: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drop documents sharing a long paragraph with any evaluation set.
    Decontaminate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long = "eval", required = true)]
        evals: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MIN_PARAGRAPH_TOKENS)]
        min_tokens: usize,
        #[arg(long, default_value_t = DEFAULT_TARGET_FP_RATE)]
        fp_rate: f64,
        /// Also save the Bloom filter.
        #[arg(long)]
        filter_out: Option<PathBuf>,
    },
    /// Train a seed model from initialization.
    SeedTrain {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value = "desk")]
        model: String,
        #[arg(long, default_value_t = 0)]
        init_seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cache: CacheArg,
    },
    /// Continue training a seed model on one corpus file as a single unit.
    UnitTrain {
        #[arg(long)]
        seed: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cache: CacheArg,
    },
    /// Average checkpoints. Each --group is a comma-separated list.
    Merge {
        #[arg(long = "group", required = true)]
        groups: Vec<String>,
        #[arg(long, value_enum, default_value_t = Mode::Micro)]
        mode: Mode,
        /// Per-group weights for --mode weighted.
        #[arg(long, value_delimiter = ',')]
        weights: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Perplexity of a checkpoint on evaluation files.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "eval", required = true)]
        evals: Vec<PathBuf>,
    },
    /// Run a study from a TOML config and write its reports.
    Study {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cache: CacheArg,
        /// Override the training corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Override the mixture sampling seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        with_seq: bool,
        #[arg(long)]
        hours_per_unit: Option<String>,
        #[arg(long, value_enum)]
        upsample: Option<Switch>,
        /// Ignore and overwrite any progress from an earlier run.
        #[arg(long)]
        fresh: bool,
    },
    /// Print the correlation and rank tables of a report directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Exact cost ledger for a study of given size.
    Costs {
        #[arg(long, default_value = "5")]
        hours_per_unit: String,
        /// Base units trained for the proxies.
        #[arg(long)]
        units_trained: u64,
        /// Unit-budgets spent on proxy models; defaults to --units-trained.
        #[arg(long)]
        modular_budgets: Option<u64>,
        /// Unit-budgets of directly trained (SEQ) mixtures.
        #[arg(long, default_value_t = 0)]
        naive_budgets: u64,
        #[arg(long, default_value_t = 0)]
        mixtures: u64,
        /// Number of single-unit partitions in the full corpus.
        #[arg(long)]
        n: u64,
        /// k values for full-sweep figures.
        #[arg(long = "k", value_delimiter = ',')]
        ks: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the complexity curve for n in LO..=HI.
        #[arg(long, value_parser = parse_range)]
        curve: Option<(u64, u64)>,
        #[arg(long, requires = "curve")]
        curve_out: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long)]
    tokens: u64,
    #[arg(long, default_value_t = 6e-4)]
    max_lr: f64,
    #[arg(long)]
    min_lr: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    warmup_fraction: f64,
    #[arg(long, default_value_t = 16)]
    rows: usize,
    #[arg(long, default_value_t = 0)]
    stream_seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Micro,
    Macro,
    Weighted,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

fn parse_range(s: &str) -> Result<(u64, u64), String> {
    let (a, b) = s.split_once("..").ok_or("expected LO..HI")?;
    let lo = a.parse::<u64>().map_err(|e| e.to_string())?;
    let hi = b.trim_start_matches('=').parse::<u64>().map_err(|e| e.to_string())?;
    if lo > hi {
        return Err("LO exceeds HI".into());
    }
    Ok((lo, hi))
}

enum Failure {
    Usage(String),
    Core(mixsoup::Error),
}

impl From<mixsoup::Error> for Failure {
    fn from(e: mixsoup::Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn need(path: &Path, what: &str) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} not found: {}", path.display())))
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| mixsoup::Error::Io { path: dir.into(), source: e })?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Failure::Core(mixsoup::Error::Io { path: path.into(), source: e }))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> CliResult {
    w.flush().map_err(|e| Failure::Core(mixsoup::Error::Io { path: path.into(), source: e }))
}

fn recipe(model: ModelConfig, t: &TrainArgs) -> TrainingRecipe {
    let mut r = TrainingRecipe::new(model, t.tokens);
    r.max_lr = t.max_lr;
    r.min_lr = t.min_lr.unwrap_or(t.max_lr / 10.0);
    r.warmup_fraction = t.warmup_fraction;
    r.batch_rows = t.rows;
    r.stream_seed = t.stream_seed;
    r
}

fn save(ckpt: &ModelCheckpoint, out: &Path) -> CliResult {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| mixsoup::Error::Io { path: dir.into(), source: e })?;
    }
    let hash = save_checkpoint(ckpt, out)?;
    println!("{}  {}", hash, out.display());
    Ok(())
}

fn read_csv(path: &Path) -> CliResult<Vec<Vec<String>>> {
    let mut r = csv::Reader::from_path(path).map_err(mixsoup::Error::from)?;
    let mut rows = vec![r.headers().map_err(mixsoup::Error::from)?.iter().map(String::from).collect()];
    for rec in r.records() {
        rows.push(rec.map_err(mixsoup::Error::from)?.iter().map(String::from).collect());
    }
    Ok(rows)
}

fn print_table(rows: &[Vec<String>]) {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let width: Vec<usize> = (0..cols).map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.len()).max().unwrap_or(0)).collect();
    for r in rows {
        let cells: Vec<String> = r.iter().enumerate().map(|(i, s)| format!("{s:<w$}", w = width[i])).collect();
        println!("{}", cells.join("  ").trim_end());
    }
}

fn short(v: &str) -> String {
    v.parse::<f64>().map_or_else(|_| v.to_string(), |x| format!("{x:.4}"))
}

fn print_report(dir: &Path) -> CliResult {
    let corr = read_csv(&dir.join(REPORT_FILES[1]))?;
    let corr: Vec<Vec<String>> = corr.into_iter().map(|r| r.iter().map(|v| short(v)).collect()).collect();
    println!("Pearson r against SEQ");
    print_table(&corr);
    let ranks = read_csv(&dir.join(REPORT_FILES[3]))?;
    let ranks: Vec<Vec<String>> = ranks.into_iter().map(|r| r.iter().map(|v| short(v)).collect()).collect();
    println!("\nRank agreement");
    print_table(&ranks);
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let policy = match cli.jobs {
        Some(1) => ExecPolicy::Sequential,
        _ => ExecPolicy::Parallel,
    };
    #[cfg(feature = "parallel")]
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Failure::Usage("--jobs must be positive".into()));
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    match cli.command {
        Command::Synth { out, seed, train_tokens, heldout_tokens, seed_tokens, ood_tokens } => {
            let cfg = SynthConfig {
                train_tokens_per_topic: train_tokens,
                heldout_tokens_per_topic: heldout_tokens,
                seed_tokens,
                ood_tokens,
                rng_seed: seed,
                ..SynthConfig::default()
            };
            let c = generate(&cfg)?;
            for (name, set) in [("corpus.jsonl", &c.corpus), ("seed.jsonl", &c.seed), ("ood.jsonl", &c.ood)] {
                let path = out.join(name);
                let mut w = create(&path)?;
                write_documents(&mut w, set)?;
                finish(w, &path)?;
                println!("{:>8} documents  {}", set.len(), path.display());
            }
        }
        Command::Partition { corpus, keys, unit_tokens, recombine, slack, out } => {
            need(&corpus, "corpus")?;
            let docs = ingest_documents(&corpus)?;
            let parts = partition_by_metadata(&docs, &keys)?;
            let plan = SplitPlan { slack_fraction: slack, recombine_siblings: recombine, ..SplitPlan::new(unit_tokens) };
            let units: Vec<BaseUnit> = split_into_base_units(&parts, &plan)?;
            let p = out.join("partitions.jsonl");
            let mut w = create(&p)?;
            write_partition_manifest(&mut w, &parts)?;
            finish(w, &p)?;
            let u = out.join("units.jsonl");
            let mut w = create(&u)?;
            write_unit_manifest(&mut w, &units)?;
            finish(w, &u)?;
            println!("{} partitions, {} base units", parts.len(), units.len());
        }
        Command::Decontaminate { corpus, evals, out, min_tokens, fp_rate, filter_out } => {
            need(&corpus, "corpus")?;
            let mut eval_docs = Vec::new();
            for e in &evals {
                need(e, "evaluation set")?;
                eval_docs.extend(ingest_documents(e)?.documents().iter().cloned());
            }
            let eval = mixsoup::corpus::DocumentSet::from_shared(dedup_ids(eval_docs))?;
            let filter = build_eval_filter(&eval, min_tokens, fp_rate)?;
            let (kept, report) = decontaminate(&ingest_documents(&corpus)?, &filter)?;
            let mut w = create(&out)?;
            write_documents(&mut w, &kept)?;
            finish(w, &out)?;
            if let Some(f) = filter_out {
                filter.save(&f)?;
            }
            println!("kept {} excluded {}", report.kept, report.excluded);
            for id in &report.excluded_ids {
                log::info!("excluded {id}");
            }
        }
        Command::SeedTrain { corpus, train, model, init_seed, out, cache } => {
            need(&corpus, "corpus")?;
            let cfg = ModelConfig::preset(&model)
                .ok_or_else(|| Failure::Usage(format!("unknown model preset {model:?} (desk, tiny, small)")))?
                .with_seed(init_seed);
            let registry = Registry::open(&cache.cache)?;
            let docs = ingest_documents(&corpus)?;
            let ckpt = train_seed_model(&registry, &recipe(cfg, &train), &docs, train.tokens, policy)?;
            save(&ckpt, &out)?;
        }
        Command::UnitTrain { seed, corpus, train, out, cache } => {
            need(&seed, "seed checkpoint")?;
            need(&corpus, "corpus")?;
            let seed_ckpt = load_checkpoint(&seed)?;
            let docs = ingest_documents(&corpus)?;
            let name = corpus.file_stem().map_or("unit".into(), |s| s.to_string_lossy().into_owned());
            let unit = BaseUnit {
                id: format!("{name}@{}", mixsoup::registry::digest_of(&docs.ids())),
                parent_partition_id: name,
                documents: docs.documents().to_vec(),
                token_count: docs.total_token_count(),
                target_tokens: docs.total_token_count(),
            };
            let registry = Registry::open(&cache.cache)?;
            let setup = ModelSetup::new(recipe(seed_ckpt.config.clone(), &train), seed_ckpt.into())?;
            let ckpt = setup.train_units(&registry, &[&unit], train.tokens, policy)?;
            save(&ckpt, &out)?;
        }
        Command::Merge { groups, mode, weights, out } => merge(&groups, mode, &weights, &out)?,
        Command::Eval { model, evals } => {
            need(&model, "checkpoint")?;
            let ckpt = load_checkpoint(&model)?;
            let mut rows = vec![vec!["domain".to_string(), "tokens".into(), "perplexity".into()]];
            for e in &evals {
                need(e, "evaluation set")?;
                let id = e.file_stem().map_or("eval".into(), |s| s.to_string_lossy().into_owned());
                let r = evaluate_perplexity_with(&ckpt.params, &ingest_documents(e)?, &id, policy)?;
                rows.push(vec![id, r.token_count.to_string(), format!("{:.6}", r.perplexity)]);
            }
            print_table(&rows);
        }
        Command::Study { config, out, cache, corpus, seed, with_seq, hours_per_unit, upsample, fresh } => {
            need(&config, "study config")?;
            let mut file = StudyFile::load(&config)?;
            if let Some(c) = corpus {
                file.corpus = c;
            }
            if let Some(s) = seed {
                file.rng_seed = s;
            }
            if with_seq {
                file.with_seq_validation = true;
            }
            if let Some(h) = hours_per_unit {
                file.hours_per_unit = h;
            }
            if let Some(u) = upsample {
                let on = matches!(u, Switch::On);
                file.proxy.upsample = on;
                if let Some(s) = &mut file.seq {
                    s.upsample = on;
                }
            }
            for p in file.input_paths() {
                need(p, "input")?;
            }
            let registry = Registry::open(&cache.cache)?;
            let run = run_study_file(&file, &RunOptions { registry: &registry, out_dir: out.clone(), policy, resume: !fresh })?;
            println!(
                "{} mixtures over {} partitions; {} trainings this run ({} proxy jobs, {} SEQ jobs)",
                run.summary.mixtures,
                run.summary.partitions,
                run.summary.trainings_this_run,
                run.summary.proxy_jobs,
                run.summary.seq_jobs
            );
            println!(
                "modular {} h for {} unit-budgets; naive {} h for {} unit-budgets\n",
                run.outcome.cost.modular_hours,
                run.outcome.cost.modular_unit_budgets,
                run.outcome.cost.naive_hours,
                run.outcome.cost.naive_unit_budgets
            );
            print_report(&out)?;
        }
        Command::Report { dir } => {
            need(&dir, "report directory")?;
            print_report(&dir)?;
        }
        Command::Costs {
            hours_per_unit,
            units_trained,
            modular_budgets,
            naive_budgets,
            mixtures,
            n,
            ks,
            out,
            curve,
            curve_out,
        } => {
            let h = parse_decimal(&hours_per_unit).map_err(|e| Failure::Usage(format!("--hours-per-unit: {e}")))?;
            if units_trained > n {
                return Err(Failure::Usage("--units-trained exceeds --n".into()));
            }
            let ledger = cost_model(&CostInputs {
                hours_per_unit: h,
                modular_unit_budgets: modular_budgets.unwrap_or(units_trained),
                units_trained,
                mixtures_evaluated: mixtures,
                naive_unit_budgets: naive_budgets,
                partition_unit_counts: vec![1; n as usize],
                sweep_ks: ks,
            })?;
            let text = toml::to_string(&ledger).map_err(|e| Failure::Core(mixsoup::Error::InvalidArgument(e.to_string())))?;
            print!("{text}");
            if let Some(p) = out {
                let mut w = create(&p)?;
                w.write_all(text.as_bytes()).map_err(|e| mixsoup::Error::Io { path: p.clone(), source: e })?;
                finish(w, &p)?;
            }
            if let Some((lo, hi)) = curve {
                let points = complexity_curve(lo..=hi, 2)?;
                let path = curve_out.unwrap_or_else(|| PathBuf::from("complexity.csv"));
                let mut w = csv::Writer::from_path(&path).map_err(mixsoup::Error::from)?;
                w.write_record(["n", "modular", "naive"]).map_err(mixsoup::Error::from)?;
                for p in points {
                    w.write_record([p.n.to_string(), p.modular.to_string(), p.naive.to_string()]).map_err(mixsoup::Error::from)?;
                }
                w.flush().map_err(|e| mixsoup::Error::Io { path: path.clone(), source: e })?;
            }
        }
    }
    Ok(())
}

fn dedup_ids(docs: Vec<std::sync::Arc<mixsoup::corpus::Document>>) -> Vec<std::sync::Arc<mixsoup::corpus::Document>> {
    let mut seen = std::collections::HashSet::new();
    docs.into_iter().filter(|d| seen.insert(d.id.clone())).collect()
}

fn merge(groups: &[String], mode: Mode, weights: &[f64], out: &Path) -> CliResult {
    let mut loaded: Vec<Vec<ModelCheckpoint>> = Vec::new();
    for g in groups {
        let mut members = Vec::new();
        for p in g.split(',').filter(|p| !p.is_empty()) {
            let path = Path::new(p);
            need(path, "checkpoint")?;
            members.push(load_checkpoint(path)?);
        }
        if members.is_empty() {
            return Err(Failure::Usage("empty --group".into()));
        }
        loaded.push(members);
    }
    let (mode, group_weights) = match mode {
        Mode::Micro => (MergeMode::Micro, Vec::new()),
        Mode::Macro => (MergeMode::Macro, Vec::new()),
        Mode::Weighted => {
            if weights.len() != loaded.len() {
                return Err(Failure::Usage(format!("{} groups but {} --weights", loaded.len(), weights.len())));
            }
            (MergeMode::FlatWeighted, weights.to_vec())
        }
    };
    let spec = MergeSpec {
        groups: loaded.iter().enumerate().map(|(i, g)| MergeGroup::uniform(format!("g{i}"), g.iter().collect())).collect(),
        group_weights,
        mode,
    };
    save(&merge_checkpoints(&spec)?, out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Failure::Usage(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Ok(Err(Failure::Core(e))) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 3 })
        }
        Err(_) => ExitCode::from(3),
    }
}
