//! Study definitions as TOML files, and running one end to end.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    cost, enumerate_mixtures, prepare_partitions, train_seed_model, write_reports, EvalDomain, MixtureConstraints,
    MixtureVector, ModelSetup, PrepareOptions, StudyConfig, StudyContext, StudyOutcome, Study, TrainingRecipe,
};
use crate::corpus::{ingest_documents, AliasMap, DocumentSet, SplitPlan};
use crate::decontam::DecontamReport;
use crate::error::{Error, Result};
use crate::lm::ModelConfig;
use crate::optim::{AdamConfig, ModelCheckpoint, Schedule};
use crate::par::ExecPolicy;
use crate::registry::{Registry, RegistryLedger};

pub const PROGRESS_FILE: &str = "progress.jsonl";
pub const RUN_FILE: &str = "run.toml";

/// How one model size is trained: its seed run and its continued runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Preset name: `desk`, `tiny` or `small`.
    pub model: String,
    #[serde(default)]
    pub init_seed: u64,
    pub unit_budget_tokens: u64,
    pub seed_tokens: u64,
    #[serde(default = "default_max_lr")]
    pub max_lr: f64,
    #[serde(default = "default_min_lr")]
    pub min_lr: f64,
    /// Peak rate of seed training; defaults to `max_lr`.
    #[serde(default)]
    pub seed_max_lr: Option<f64>,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_rows")]
    pub batch_rows: usize,
    #[serde(default = "default_true")]
    pub upsample: bool,
    #[serde(default)]
    pub stream_seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_max_lr() -> f64 {
    Schedule::DEFAULT_MAX_LR
}

fn default_min_lr() -> f64 {
    Schedule::DEFAULT_MIN_LR
}

fn default_warmup() -> f64 {
    Schedule::CONTINUED_WARMUP_FRACTION
}

fn default_rows() -> usize {
    16
}

fn default_true() -> bool {
    true
}

fn default_heldout() -> f64 {
    0.1
}

fn default_hours() -> String {
    "5".into()
}

fn default_top_k() -> usize {
    3
}

impl ModelSection {
    pub fn model_config(&self, field: &str) -> Result<ModelConfig> {
        let cfg = ModelConfig::preset(&self.model)
            .ok_or_else(|| Error::config(format!("{field}.model"), format!("unknown preset {:?}", self.model)))?;
        Ok(cfg.with_seed(self.init_seed))
    }

    pub fn recipe(&self, field: &str) -> Result<TrainingRecipe> {
        if self.unit_budget_tokens == 0 {
            return Err(Error::config(format!("{field}.unit_budget_tokens"), "must be positive"));
        }
        if self.seed_tokens == 0 {
            return Err(Error::config(format!("{field}.seed_tokens"), "must be positive"));
        }
        if self.batch_rows == 0 {
            return Err(Error::config(format!("{field}.batch_rows"), "must be positive"));
        }
        let mut r = TrainingRecipe::new(self.model_config(field)?, self.unit_budget_tokens);
        r.max_lr = self.max_lr;
        r.min_lr = self.min_lr;
        r.warmup_fraction = self.warmup_fraction;
        r.batch_rows = self.batch_rows;
        r.upsample = self.upsample;
        r.stream_seed = self.stream_seed;
        r.adam = self.adam;
        r.schedule(self.unit_budget_tokens).map_err(|e| Error::config(field, e.to_string()))?;
        Ok(r)
    }

    pub fn seed_recipe(&self, field: &str) -> Result<TrainingRecipe> {
        let mut r = self.recipe(field)?;
        if let Some(lr) = self.seed_max_lr {
            r.max_lr = lr;
            r.min_lr = lr / 10.0;
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub id: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyFile {
    pub corpus: PathBuf,
    /// Seed training documents; defaults to the training corpus.
    #[serde(default)]
    pub seed_corpus: Option<PathBuf>,
    pub keys: Vec<String>,
    #[serde(default)]
    pub aliases: AliasMap,
    pub split: SplitPlan,
    #[serde(default = "default_heldout")]
    pub heldout_fraction: f64,
    #[serde(default = "default_true")]
    pub decontaminate: bool,
    pub k: usize,
    /// Sample this many mixtures instead of enumerating all of them.
    #[serde(default)]
    pub sample_count: Option<usize>,
    /// Explicit mixtures as lists of partition ids; replaces enumeration.
    #[serde(default)]
    pub mixtures: Vec<Vec<String>>,
    #[serde(default)]
    pub constraints: MixtureConstraints,
    #[serde(default)]
    pub allow_mixed_k: bool,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_hours")]
    pub hours_per_unit: String,
    #[serde(default)]
    pub with_seq_validation: bool,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub sweep_ks: Vec<u64>,
    #[serde(default)]
    pub eval_domains: Vec<DomainSection>,
    pub proxy: ModelSection,
    /// SEQ models at another size; defaults to the proxy section.
    #[serde(default)]
    pub seq: Option<ModelSection>,
}

impl StudyFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let named = msg.split('`').nth(1).filter(|_| msg.contains("field")).map(str::to_string);
            let at_span = e.span().and_then(|sp| {
                let line_start = text[..sp.start].rfind('\n').map_or(0, |i| i + 1);
                let line = &text[line_start..];
                let line = &line[..line.find('\n').unwrap_or(line.len())];
                line.split_once('=').map(|(k, _)| k.trim().to_string())
            });
            Error::config(named.or(at_span).unwrap_or_else(|| "<study config>".into()), msg)
        })
    }

    /// Reads a study file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut f = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        f.resolve(base);
        Ok(f)
    }

    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        if let Some(p) = &mut self.seed_corpus {
            fix(p);
        }
        for d in &mut self.eval_domains {
            fix(&mut d.path);
        }
    }

    pub fn input_paths(&self) -> Vec<&Path> {
        let mut v = vec![self.corpus.as_path()];
        v.extend(self.seed_corpus.as_deref());
        v.extend(self.eval_domains.iter().map(|d| d.path.as_path()));
        v
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k", "must be positive"));
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return Err(Error::config("heldout_fraction", "must lie in (0, 1)"));
        }
        if self.top_k == 0 {
            return Err(Error::config("top_k", "must be positive"));
        }
        if self.sample_count.is_some() && !self.mixtures.is_empty() {
            return Err(Error::config("sample_count", "cannot be combined with explicit mixtures"));
        }
        cost::parse_decimal(&self.hours_per_unit).map_err(|e| Error::config("hours_per_unit", e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub partitions: usize,
    pub base_units: usize,
    pub mixtures: usize,
    pub proxy_jobs: usize,
    pub seq_jobs: usize,
    pub trainings_this_run: u64,
    pub decontam_excluded: usize,
    pub registry: RegistryLedger,
}

pub struct RunOptions<'a> {
    pub registry: &'a Registry,
    pub out_dir: PathBuf,
    pub policy: ExecPolicy,
    /// Resume from (and record to) `out_dir/progress.jsonl`.
    pub resume: bool,
}

pub struct StudyRun {
    pub outcome: StudyOutcome,
    pub summary: RunSummary,
    pub decontam: Option<DecontamReport>,
    pub report_files: Vec<PathBuf>,
}

fn setup(
    registry: &Registry,
    section: &ModelSection,
    field: &str,
    seed_docs: &DocumentSet,
    policy: ExecPolicy,
) -> Result<ModelSetup> {
    let recipe = section.recipe(field)?;
    let seed: Arc<ModelCheckpoint> =
        train_seed_model(registry, &section.seed_recipe(field)?, seed_docs, section.seed_tokens, policy)?;
    ModelSetup::new(recipe, seed)
}

/// Corpus to report: prepare partitions, train seeds, run the study and
/// write the report files plus `run.toml`.
pub fn run_study_file(file: &StudyFile, opts: &RunOptions) -> Result<StudyRun> {
    file.validate()?;
    let corpus = ingest_documents(&file.corpus)?;
    let mut domains = Vec::new();
    for d in &file.eval_domains {
        domains.push(EvalDomain { id: d.id.clone(), docs: ingest_documents(&d.path)? });
    }
    let external: Vec<&DocumentSet> = domains.iter().map(|d| &d.docs).collect();
    let prep = PrepareOptions {
        keys: file.keys.clone(),
        aliases: file.aliases.clone(),
        split: file.split.clone(),
        heldout_fraction: file.heldout_fraction,
        rng_seed: file.rng_seed,
        decontaminate: file.decontaminate,
        ..PrepareOptions::new(Vec::new(), file.split.clone())
    };
    let prepared = prepare_partitions(&corpus, &external, &prep)?;
    let seed_docs = match &file.seed_corpus {
        Some(p) => ingest_documents(p)?,
        None => corpus.clone(),
    };
    let proxy = setup(opts.registry, &file.proxy, "proxy", &seed_docs, opts.policy)?;
    let seq = match &file.seq {
        Some(s) if file.with_seq_validation => Some(setup(opts.registry, s, "seq", &seed_docs, opts.policy)?),
        _ => None,
    };
    let mut cfg = StudyConfig {
        partitions: prepared.partitions,
        k: file.k,
        mixtures: Vec::new(),
        ood_domains: domains,
        hours_per_unit: cost::parse_decimal(&file.hours_per_unit)?,
        with_seq_validation: file.with_seq_validation,
        top_k: file.top_k,
        sweep_ks: file.sweep_ks.clone(),
        allow_mixed_k: file.allow_mixed_k,
    };
    cfg.mixtures = if file.mixtures.is_empty() {
        enumerate_mixtures(&cfg.partition_refs(), file.k, &file.constraints, file.sample_count, file.rng_seed)?
    } else {
        let ids: Vec<&str> = cfg.partitions.iter().map(|p| p.id.as_str()).collect();
        let mut out = Vec::new();
        for m in &file.mixtures {
            let mut idx = Vec::new();
            for id in m {
                let i = ids.iter().position(|p| p == id).ok_or_else(|| {
                    Error::config("mixtures", format!("unknown partition {id:?}"))
                })?;
                idx.push(i);
            }
            out.push(MixtureVector::from_indices(ids.len(), &idx).map_err(|e| Error::config("mixtures", e.to_string()))?);
        }
        out
    };
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let ctx = StudyContext {
        registry: opts.registry,
        proxy: &proxy,
        seq: seq.as_ref(),
        policy: opts.policy,
        manifest: opts.resume.then(|| opts.out_dir.join(PROGRESS_FILE)),
    };
    let outcome = Study::new(&cfg, ctx)?.run()?;
    let report_files = write_reports(&outcome, &opts.out_dir)?;
    let summary = RunSummary {
        partitions: cfg.partitions.len(),
        base_units: cfg.partitions.iter().map(|p| p.units.len()).sum(),
        mixtures: cfg.mixtures.len(),
        proxy_jobs: outcome.proxy_jobs,
        seq_jobs: outcome.seq_jobs,
        trainings_this_run: outcome.trainings_performed,
        decontam_excluded: prepared.decontam.as_ref().map_or(0, |r| r.excluded),
        registry: opts.registry.ledger_snapshot(),
    };
    let path = opts.out_dir.join(RUN_FILE);
    let text = toml::to_string(&summary).map_err(|e| Error::invalid(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(StudyRun { outcome, summary, decontam: prepared.decontam, report_files })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
corpus = "c.jsonl"
keys = ["src"]
k = 2
split = { target_tokens = 1000 }
[proxy]
model = "tiny"
unit_budget_tokens = 5000
seed_tokens = 5000
"#;

    #[test]
    fn parses_with_defaults() {
        let f = StudyFile::parse(MINIMAL).unwrap();
        assert_eq!(f.hours_per_unit, "5");
        assert_eq!(f.proxy.max_lr, Schedule::DEFAULT_MAX_LR);
        assert!(f.proxy.upsample && f.decontaminate && !f.with_seq_validation);
        assert_eq!(f.heldout_fraction, 0.1);
        f.validate().unwrap();
    }

    #[test]
    fn errors_name_the_field() {
        let err = StudyFile::parse(&MINIMAL.replace("k = 2", "k = \"two\"")).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "k"), "{err}");
        let err = StudyFile::parse(&format!("{MINIMAL}bogus = 1\n")).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "bogus"), "{err}");
        let mut f = StudyFile::parse(MINIMAL).unwrap();
        f.hours_per_unit = "five".into();
        assert!(matches!(f.validate(), Err(Error::Config { field, .. }) if field == "hours_per_unit"));
        f.proxy.model = "huge".into();
        assert!(matches!(f.proxy.recipe("proxy"), Err(Error::Config { field, .. }) if field == "proxy.model"));
    }

    #[test]
    fn relative_paths_resolve_against_the_file() {
        let mut f = StudyFile::parse(MINIMAL).unwrap();
        f.resolve(Path::new("/data/study"));
        assert_eq!(f.corpus, PathBuf::from("/data/study/c.jsonl"));
    }
}
