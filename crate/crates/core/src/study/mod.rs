//! Ablation studies: train each touched unit once through the registry,
//! score every mixture by evaluating parameter averages, optionally train
//! the full mixture for comparison, and summarize.

pub mod cost;
pub mod mixtures;
pub mod config;
mod prepare;
mod report;
pub mod stats;

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use num_rational::BigRational;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cost::{complexity_curve, cost_model, count_all, count_mixtures, CostInputs, CostLedger};
pub use mixtures::{enumerate_mixtures, MixtureConstraints, MixtureVector, PartitionRef, SourceBound};
pub use prepare::{prepare_partitions, PrepareOptions, Prepared};
pub use report::{write_reports, REPORT_FILES};
pub use stats::{macro_avg_eval, pearson, rank_agreement, RankAgreement};

use crate::corpus::{sample_training_stream, BaseUnit, Document, DocumentSet};
use crate::error::{Error, Result};
use crate::lm::{evaluate_tokens, ModelConfig, ParamSet};
use crate::merge::{macro_merge, micro_merge, uniform_average};
use crate::optim::{hex, train, AdamConfig, ModelCheckpoint, Schedule, TrainMode, TrainSettings};
use crate::par::ExecPolicy;
use crate::registry::{config_hash, digest_of, Registry, RegistryKey};
use crate::tokenizer::encode;

pub const IN_DOMAIN: &str = "in_domain";
pub const AVG_MACRO: &str = "avg_macro";

/// How every model in a study is trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecipe {
    pub model: ModelConfig,
    /// Tokens per base unit: one unit-budget.
    pub unit_budget_tokens: u64,
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_fraction: f64,
    pub batch_rows: usize,
    pub upsample: bool,
    pub stream_seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainingRecipe {
    pub fn new(model: ModelConfig, unit_budget_tokens: u64) -> Self {
        TrainingRecipe {
            model,
            unit_budget_tokens,
            max_lr: Schedule::DEFAULT_MAX_LR,
            min_lr: Schedule::DEFAULT_MIN_LR,
            warmup_fraction: Schedule::CONTINUED_WARMUP_FRACTION,
            batch_rows: 16,
            upsample: true,
            stream_seed: 0,
            adam: AdamConfig::default(),
        }
    }

    pub fn tokens_per_step(&self) -> u64 {
        (self.batch_rows * self.model.seq_len) as u64
    }

    pub fn schedule(&self, budget_tokens: u64) -> Result<Schedule> {
        Schedule::for_budget(self.max_lr, self.min_lr, self.warmup_fraction, budget_tokens, self.tokens_per_step())
    }

    fn schedule_hash(&self, budget_tokens: u64) -> Result<String> {
        Ok(digest_of(&(self.schedule(budget_tokens)?, self.adam, self.batch_rows, self.upsample)))
    }

    pub fn key(&self, job_id: &str, seed_hash: &str, budget_tokens: u64) -> Result<RegistryKey> {
        Ok(RegistryKey {
            partition_id: job_id.to_string(),
            seed_checkpoint_hash: seed_hash.to_string(),
            model_config_hash: config_hash(&self.model),
            budget_tokens,
            schedule_hash: self.schedule_hash(budget_tokens)?,
            stream_seed: self.stream_seed,
        })
    }

    fn settings(&self, budget: u64, mode: TrainMode, ids: Vec<String>, policy: ExecPolicy) -> Result<TrainSettings> {
        let mut s = TrainSettings::new(budget, self.schedule(budget)?, mode);
        s.adam = self.adam;
        s.partition_ids = ids;
        s.policy = policy;
        Ok(s)
    }
}

/// Trains (or fetches) the shared seed model on `docs` from initialization.
pub fn train_seed_model(
    registry: &Registry,
    recipe: &TrainingRecipe,
    docs: &DocumentSet,
    budget_tokens: u64,
    policy: ExecPolicy,
) -> Result<Arc<ModelCheckpoint>> {
    let mut h = Sha256::new();
    for d in docs.documents() {
        h.update(d.id.as_bytes());
        h.update([0]);
        h.update(d.text.as_bytes());
        h.update([0]);
    }
    let job_id = format!("seed:{}", hex(&h.finalize()));
    let key = recipe.key(&job_id, "init", budget_tokens)?;
    registry.get_or_train(&key, || {
        let unit = BaseUnit {
            id: "seed".into(),
            parent_partition_id: "seed".into(),
            documents: docs.documents().to_vec(),
            token_count: docs.total_token_count(),
            target_tokens: docs.total_token_count(),
        };
        let stream = sample_training_stream(&[&unit], false, recipe.stream_seed)?;
        let start = ModelCheckpoint::fresh(&recipe.model)?;
        let settings = recipe.settings(budget_tokens, TrainMode::Seed, vec!["seed".into()], policy)?;
        log::info!("seed training for {budget_tokens} tokens");
        Ok(train(&start, stream.into_batches(recipe.model.seq_len, recipe.batch_rows), &settings)?.checkpoint)
    })
}

/// A training recipe together with the seed checkpoint it continues from.
#[derive(Debug, Clone)]
pub struct ModelSetup {
    pub recipe: TrainingRecipe,
    pub seed: Arc<ModelCheckpoint>,
    pub seed_hash: String,
}

impl ModelSetup {
    pub fn new(recipe: TrainingRecipe, seed: Arc<ModelCheckpoint>) -> Result<Self> {
        if seed.config != recipe.model {
            return Err(Error::ConfigMismatch("seed checkpoint and training recipe use different models".into()));
        }
        let seed_hash = seed.content_hash();
        Ok(ModelSetup { recipe, seed, seed_hash })
    }

    /// Continued training on `units` for `budget_tokens`, memoized by the
    /// registry under the `+`-joined unit ids.
    pub fn train_units(
        &self,
        registry: &Registry,
        units: &[&BaseUnit],
        budget_tokens: u64,
        policy: ExecPolicy,
    ) -> Result<Arc<ModelCheckpoint>> {
        let ids: Vec<String> = units.iter().map(|u| u.id.clone()).collect();
        let key = self.recipe.key(&ids.join("+"), &self.seed_hash, budget_tokens)?;
        registry.get_or_train(&key, || {
            log::info!("training {} for {budget_tokens} tokens", key.partition_id);
            let stream = sample_training_stream(units, self.recipe.upsample, self.recipe.stream_seed)?;
            let settings = self.recipe.settings(budget_tokens, TrainMode::Continued, ids.clone(), policy)?;
            let batches = stream.into_batches(self.recipe.model.seq_len, self.recipe.batch_rows);
            Ok(train(&self.seed, batches, &settings)?.checkpoint)
        })
    }
}

#[derive(Debug, Clone)]
pub struct StudyPartition {
    pub id: String,
    /// Higher-level grouping used by per-source constraints.
    pub source: String,
    pub units: Vec<BaseUnit>,
    pub heldout: DocumentSet,
}

#[derive(Debug, Clone)]
pub struct EvalDomain {
    pub id: String,
    pub docs: DocumentSet,
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub partitions: Vec<StudyPartition>,
    pub k: usize,
    pub mixtures: Vec<MixtureVector>,
    pub ood_domains: Vec<EvalDomain>,
    pub hours_per_unit: BigRational,
    pub with_seq_validation: bool,
    /// Size of the proxy's top list whose median true rank is reported.
    pub top_k: usize,
    /// k values for the naive full-sweep cost figures.
    pub sweep_ks: Vec<u64>,
    /// Permit mixtures of differing popcount (no accuracy claim).
    pub allow_mixed_k: bool,
}

impl StudyConfig {
    pub fn partition_refs(&self) -> Vec<PartitionRef> {
        self.partitions.iter().map(|p| PartitionRef { id: p.id.clone(), source: p.source.clone() }).collect()
    }

    pub fn mixture_id(&self, m: &MixtureVector) -> String {
        m.indices().iter().map(|&i| self.partitions[i].id.as_str()).collect::<Vec<_>>().join("+")
    }

    pub fn domain_ids(&self) -> Vec<String> {
        std::iter::once(IN_DOMAIN.to_string()).chain(self.ood_domains.iter().map(|d| d.id.clone())).collect()
    }

    fn validate(&self) -> Result<()> {
        let n = self.partitions.len();
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.partitions {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::config("partitions", format!("duplicate partition id {:?}", p.id)));
            }
            if p.units.is_empty() {
                return Err(Error::config("partitions", format!("partition {:?} has no base units", p.id)));
            }
            if p.heldout.is_empty() {
                return Err(Error::config("partitions", format!("partition {:?} has an empty heldout set", p.id)));
            }
        }
        let mut domains = std::collections::BTreeSet::new();
        for d in &self.ood_domains {
            if !domains.insert(d.id.as_str()) {
                return Err(Error::config("eval_domains", format!("duplicate domain id {:?}", d.id)));
            }
            if d.docs.is_empty() {
                return Err(Error::config("eval_domains", format!("domain {:?} is empty", d.id)));
            }
            if d.id == IN_DOMAIN || d.id == AVG_MACRO {
                return Err(Error::config("eval_domains", format!("reserved domain id {:?}", d.id)));
            }
        }
        for m in &self.mixtures {
            if m.n() != n {
                return Err(Error::config("mixtures", format!("mixture {} is not over {n} partitions", m.bitstring())));
            }
            if m.k() == 0 || (!self.allow_mixed_k && m.k() != self.k) {
                return Err(Error::config("k", format!("mixture {} does not have k = {}", m.bitstring(), self.k)));
            }
        }
        Ok(())
    }
}

/// One report row: a mixture scored on one evaluation domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub mixture_id: String,
    pub domain: String,
    pub seq: Option<f64>,
    pub merged: f64,
    #[serde(rename = "macro")]
    pub macro_merged: f64,
    #[serde(rename = "micro")]
    pub micro_merged: f64,
    pub mean_ind: f64,
    pub ind_id: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyKind {
    Merged,
    Macro,
    Micro,
    MeanInd,
    IndId,
}

impl ProxyKind {
    pub const ALL: [ProxyKind; 5] = [ProxyKind::Merged, ProxyKind::Macro, ProxyKind::Micro, ProxyKind::MeanInd, ProxyKind::IndId];

    pub fn as_str(self) -> &'static str {
        match self {
            ProxyKind::Merged => "merged",
            ProxyKind::Macro => "macro",
            ProxyKind::Micro => "micro",
            ProxyKind::MeanInd => "mean_ind",
            ProxyKind::IndId => "ind_id",
        }
    }

    pub fn of(self, row: &ScoreRow) -> Option<f64> {
        match self {
            ProxyKind::Merged => Some(row.merged),
            ProxyKind::Macro => Some(row.macro_merged),
            ProxyKind::Micro => Some(row.micro_merged),
            ProxyKind::MeanInd => Some(row.mean_ind),
            ProxyKind::IndId => row.ind_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub domain: String,
    pub pearson: BTreeMap<ProxyKind, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub domain: String,
    pub proxy: ProxyKind,
    pub agreement: Option<RankAgreement>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProxyReport {
    pub domains: Vec<String>,
    pub rows: Vec<ScoreRow>,
    pub correlations: Vec<CorrelationRow>,
    pub ranks: Vec<RankRow>,
}

impl ProxyReport {
    pub fn pearson(&self, domain: &str, proxy: ProxyKind) -> Option<f64> {
        self.correlations.iter().find(|c| c.domain == domain).and_then(|c| c.pearson.get(&proxy).copied().flatten())
    }

    pub fn rank(&self, domain: &str, proxy: ProxyKind) -> Option<&RankAgreement> {
        self.ranks.iter().find(|r| r.domain == domain && r.proxy == proxy).and_then(|r| r.agreement.as_ref())
    }

    /// Per-mixture values on a domain (or the OOD macro average).
    pub fn series(&self, domain: &str, pick: impl Fn(&ScoreRow) -> Option<f64>) -> BTreeMap<String, f64> {
        let ood: Vec<&String> = self.domains.iter().filter(|d| d.as_str() != IN_DOMAIN).collect();
        let mut by_mix: BTreeMap<&str, Vec<&ScoreRow>> = BTreeMap::new();
        for r in &self.rows {
            by_mix.entry(&r.mixture_id).or_default().push(r);
        }
        let mut out = BTreeMap::new();
        for (m, rows) in by_mix {
            let value = if domain == AVG_MACRO {
                let vals: Option<Vec<f64>> =
                    ood.iter().map(|d| rows.iter().find(|r| &&r.domain == d).and_then(|r| pick(r))).collect();
                vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
            } else {
                rows.iter().find(|r| r.domain == domain).and_then(|r| pick(r))
            };
            if let Some(v) = value {
                out.insert(m.to_string(), v);
            }
        }
        out
    }

    fn summarize(&mut self, top_k: usize) {
        let mut domains = self.domains.clone();
        if domains.len() > 1 {
            domains.push(AVG_MACRO.to_string());
        }
        self.correlations.clear();
        self.ranks.clear();
        for d in &domains {
            let truth = self.series(d, |r| r.seq);
            let mut pearsons = BTreeMap::new();
            for kind in ProxyKind::ALL {
                let proxy = self.series(d, |r| kind.of(r));
                let paired: Vec<(f64, f64)> =
                    proxy.iter().filter_map(|(m, p)| truth.get(m).map(|t| (*p, *t))).collect();
                let (xs, ys): (Vec<f64>, Vec<f64>) = paired.into_iter().unzip();
                pearsons.insert(kind, pearson(&xs, &ys).ok());
                let agreement = if !truth.is_empty() && proxy.len() == truth.len() {
                    rank_agreement(&proxy, &truth, top_k).ok()
                } else {
                    None
                };
                self.ranks.push(RankRow { domain: d.clone(), proxy: kind, agreement });
            }
            self.correlations.push(CorrelationRow { domain: d.clone(), pearson: pearsons });
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudyOutcome {
    pub report: ProxyReport,
    pub cost: CostLedger,
    /// Trainings performed by the registry during this run.
    pub trainings_performed: u64,
    pub proxy_jobs: usize,
    pub seq_jobs: usize,
}

pub struct StudyContext<'a> {
    pub registry: &'a Registry,
    pub proxy: &'a ModelSetup,
    /// Setup for SEQ models; defaults to the proxy setup.
    pub seq: Option<&'a ModelSetup>,
    pub policy: ExecPolicy,
    /// Progress file for resuming an interrupted run.
    pub manifest: Option<PathBuf>,
}

/// Digest of a parameter vector and its architecture.
pub fn params_digest(p: &ParamSet) -> String {
    let mut h = Sha256::new();
    h.update(config_hash(&p.config).as_bytes());
    for x in &p.flat {
        h.update(x.to_le_bytes());
    }
    hex(&h.finalize())
}

type EvalKey = (String, String);

struct Evaluator {
    sets: HashMap<String, Arc<Vec<Vec<u32>>>>,
    cache: Mutex<HashMap<EvalKey, (f64, u64)>>,
    policy: ExecPolicy,
}

impl Evaluator {
    fn new(cfg: &StudyConfig, policy: ExecPolicy) -> Self {
        let enc = |docs: &DocumentSet| Arc::new(docs.documents().iter().map(|d| encode(&d.text)).collect::<Vec<_>>());
        let mut sets = HashMap::new();
        for p in &cfg.partitions {
            sets.insert(heldout_set(&p.id), enc(&p.heldout));
        }
        for d in &cfg.ood_domains {
            sets.insert(ood_set(&d.id), enc(&d.docs));
        }
        Evaluator { sets, cache: Mutex::new(HashMap::new()), policy }
    }

    /// Summed NLL and token count of a model on one evaluation set.
    fn totals(&self, params: &ParamSet, digest: &str, set: &str) -> Result<(f64, u64)> {
        let key = (digest.to_string(), set.to_string());
        if let Some(v) = self.cache.lock().unwrap().get(&key) {
            return Ok(*v);
        }
        let docs = self.sets.get(set).ok_or_else(|| Error::Missing { kind: "evaluation set", name: set.into() })?;
        let r = evaluate_tokens(params, set, docs.iter(), self.policy)?;
        let v = (r.total_nll, r.token_count);
        self.cache.lock().unwrap().insert(key, v);
        Ok(v)
    }

    /// Perplexity pooled over several sets, weighting by token count.
    fn perplexity(&self, params: &ParamSet, digest: &str, sets: &[String]) -> Result<f64> {
        let (mut nll, mut count) = (0.0, 0u64);
        for s in sets {
            let (a, b) = self.totals(params, digest, s)?;
            nll += a;
            count += b;
        }
        Ok((nll / count as f64).exp())
    }
}

fn heldout_set(partition: &str) -> String {
    format!("heldout:{partition}")
}

fn ood_set(domain: &str) -> String {
    format!("ood:{domain}")
}

struct Model {
    params: ParamSet,
    digest: String,
}

impl Model {
    fn new(params: ParamSet) -> Self {
        let digest = params_digest(&params);
        Model { params, digest }
    }
}

/// Per-domain proxy values for one mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyValues {
    pub merged: f64,
    pub macro_merged: f64,
    pub micro_merged: f64,
    pub mean_ind: f64,
    pub ind_id: Option<f64>,
}

pub struct Study<'a> {
    cfg: &'a StudyConfig,
    ctx: StudyContext<'a>,
    eval: Evaluator,
}

impl<'a> Study<'a> {
    pub fn new(cfg: &'a StudyConfig, ctx: StudyContext<'a>) -> Result<Self> {
        cfg.validate()?;
        if let Some(seq) = ctx.seq {
            if seq.recipe.unit_budget_tokens == 0 {
                return Err(Error::config("seq.unit_budget_tokens", "must be positive"));
            }
        }
        let eval = Evaluator::new(cfg, ctx.policy);
        Ok(Study { cfg, ctx, eval })
    }

    fn seq_setup(&self) -> &ModelSetup {
        self.ctx.seq.unwrap_or(self.ctx.proxy)
    }

    fn units_of(&self, i: usize) -> Vec<&BaseUnit> {
        self.cfg.partitions[i].units.iter().collect()
    }

    fn unit_model(&self, unit: &BaseUnit) -> Result<Arc<ModelCheckpoint>> {
        let t = self.ctx.proxy.recipe.unit_budget_tokens;
        self.ctx.proxy.train_units(self.ctx.registry, &[unit], t, self.ctx.policy)
    }

    /// Model trained on a whole partition for mᵢ unit-budgets; the unit
    /// model itself when the partition is a single unit.
    fn partition_model(&self, i: usize) -> Result<Arc<ModelCheckpoint>> {
        let units = self.units_of(i);
        if units.len() == 1 {
            return self.unit_model(units[0]);
        }
        let t = self.ctx.proxy.recipe.unit_budget_tokens;
        self.ctx.proxy.train_units(self.ctx.registry, &units, units.len() as u64 * t, self.ctx.policy)
    }

    fn domain_sets(&self, m: &MixtureVector, domain: &str) -> Vec<String> {
        if domain == IN_DOMAIN {
            m.indices().iter().map(|&i| heldout_set(&self.cfg.partitions[i].id)).collect()
        } else {
            vec![ood_set(domain)]
        }
    }

    fn ppl(&self, model: &Model, m: &MixtureVector, domain: &str) -> Result<f64> {
        self.eval.perplexity(&model.params, &model.digest, &self.domain_sets(m, domain))
    }

    pub fn proxy_scores(&self, m: &MixtureVector) -> Result<BTreeMap<String, ProxyValues>> {
        let comps = m.indices();
        let part_models: Vec<Arc<ModelCheckpoint>> = comps.iter().map(|&i| self.partition_model(i)).collect::<Result<_>>()?;
        let unit_groups: Vec<Vec<Arc<ModelCheckpoint>>> = comps
            .iter()
            .map(|&i| self.units_of(i).into_iter().map(|u| self.unit_model(u)).collect())
            .collect::<Result<_>>()?;
        let merged = Model::new(uniform_average(&part_models.iter().map(|c| &c.params).collect::<Vec<_>>())?);
        let groups: Vec<Vec<&ParamSet>> = unit_groups.iter().map(|g| g.iter().map(|c| &c.params).collect()).collect();
        let macro_m = Model::new(macro_merge(&groups)?);
        let micro_m = Model::new(micro_merge(&groups)?);
        let components: Vec<Model> = part_models.iter().map(|c| Model::new(c.params.clone())).collect();
        let mut out = BTreeMap::new();
        for domain in self.cfg.domain_ids() {
            let mut ind = 0.0;
            for c in &components {
                ind += self.ppl(c, m, &domain)?;
            }
            let ind_id = if domain == IN_DOMAIN {
                let mut s = 0.0;
                for (c, &i) in components.iter().zip(&comps) {
                    s += self.eval.perplexity(&c.params, &c.digest, &[heldout_set(&self.cfg.partitions[i].id)])?;
                }
                Some(s / comps.len() as f64)
            } else {
                None
            };
            out.insert(
                domain.clone(),
                ProxyValues {
                    merged: self.ppl(&merged, m, &domain)?,
                    macro_merged: self.ppl(&macro_m, m, &domain)?,
                    micro_merged: self.ppl(&micro_m, m, &domain)?,
                    mean_ind: ind / comps.len() as f64,
                    ind_id,
                },
            );
        }
        Ok(out)
    }

    fn seq_model(&self, m: &MixtureVector) -> Result<Arc<ModelCheckpoint>> {
        let setup = self.seq_setup();
        let units: Vec<&BaseUnit> = m.indices().into_iter().flat_map(|i| self.units_of(i)).collect();
        let budget = units.len() as u64 * setup.recipe.unit_budget_tokens;
        setup.train_units(self.ctx.registry, &units, budget, self.ctx.policy)
    }

    /// Trains the full mixture from the seed for Σmᵢ unit-budgets and
    /// evaluates it on every domain.
    pub fn seq_score(&self, m: &MixtureVector) -> Result<BTreeMap<String, f64>> {
        let model = Model::new(self.seq_model(m)?.params.clone());
        self.cfg.domain_ids().into_iter().map(|d| Ok((d.clone(), self.ppl(&model, m, &d)?))).collect()
    }

    fn score(&self, m: &MixtureVector) -> Result<Vec<ScoreRow>> {
        let proxies = self.proxy_scores(m)?;
        let seq = if self.cfg.with_seq_validation { Some(self.seq_score(m)?) } else { None };
        let id = self.cfg.mixture_id(m);
        Ok(self
            .cfg
            .domain_ids()
            .into_iter()
            .map(|d| {
                let p = &proxies[&d];
                ScoreRow {
                    mixture_id: id.clone(),
                    seq: seq.as_ref().map(|s| s[&d]),
                    domain: d,
                    merged: p.merged,
                    macro_merged: p.macro_merged,
                    micro_merged: p.micro_merged,
                    mean_ind: p.mean_ind,
                    ind_id: p.ind_id,
                }
            })
            .collect())
    }

    fn fingerprint(&self) -> String {
        let parts: Vec<(&str, Vec<&str>, Vec<&str>)> = self
            .cfg
            .partitions
            .iter()
            .map(|p| (p.id.as_str(), p.units.iter().map(|u| u.id.as_str()).collect(), p.heldout.ids()))
            .collect();
        let ood: Vec<(&str, Vec<&str>)> = self.cfg.ood_domains.iter().map(|d| (d.id.as_str(), d.docs.ids())).collect();
        let seq = self.cfg.with_seq_validation.then(|| (&self.seq_setup().recipe, &self.seq_setup().seed_hash));
        digest_of(&(parts, ood, &self.ctx.proxy.recipe, &self.ctx.proxy.seed_hash, seq))
    }

    fn load_progress(&self, fingerprint: &str) -> Result<HashMap<String, Vec<ScoreRow>>> {
        let Some(path) = &self.ctx.manifest else { return Ok(HashMap::new()) };
        let Ok(file) = std::fs::File::open(path) else { return Ok(HashMap::new()) };
        let mut lines = BufReader::new(file).lines();
        let header: Option<Progress> = lines.next().and_then(|l| l.ok()).and_then(|l| serde_json::from_str(&l).ok());
        if !matches!(header, Some(Progress::Header { fingerprint: ref f }) if f == fingerprint) {
            return Ok(HashMap::new());
        }
        let mut done = HashMap::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            // a torn final line from an interrupted write is ignored
            if let Ok(Progress::Mixture { mixture_id, rows }) = serde_json::from_str(&line) {
                done.insert(mixture_id, rows);
            }
        }
        Ok(done)
    }

    fn training_jobs(&self) -> (Vec<Vec<&BaseUnit>>, Vec<&MixtureVector>) {
        let mut seen = std::collections::BTreeSet::new();
        let mut jobs = Vec::new();
        for m in &self.cfg.mixtures {
            for i in m.indices() {
                for u in &self.cfg.partitions[i].units {
                    if seen.insert(u.id.clone()) {
                        jobs.push(vec![u]);
                    }
                }
                let units = self.units_of(i);
                if units.len() > 1 && seen.insert(format!("partition:{}", self.cfg.partitions[i].id)) {
                    jobs.push(units);
                }
            }
        }
        (jobs, self.cfg.mixtures.iter().collect())
    }

    pub fn cost_inputs(&self) -> CostInputs {
        let (jobs, _) = self.training_jobs();
        let units_trained = jobs.iter().filter(|j| j.len() == 1).count() as u64;
        CostInputs {
            hours_per_unit: self.cfg.hours_per_unit.clone(),
            modular_unit_budgets: jobs.iter().map(|j| j.len() as u64).sum(),
            units_trained,
            mixtures_evaluated: self.cfg.mixtures.len() as u64,
            naive_unit_budgets: self
                .cfg
                .mixtures
                .iter()
                .map(|m| m.indices().iter().map(|&i| self.cfg.partitions[i].units.len() as u64).sum::<u64>())
                .sum(),
            partition_unit_counts: self.cfg.partitions.iter().map(|p| p.units.len() as u64).collect(),
            sweep_ks: self.cfg.sweep_ks.clone(),
        }
    }

    pub fn run(&self) -> Result<StudyOutcome> {
        let before = self.ctx.registry.ledger_snapshot().trainings_performed;
        let fingerprint = self.fingerprint();
        let done = self.load_progress(&fingerprint)?;
        let pending: Vec<&MixtureVector> =
            self.cfg.mixtures.iter().filter(|m| !done.contains_key(&self.cfg.mixture_id(m))).collect();
        let (jobs, _) = self.training_jobs();
        let t = self.ctx.proxy.recipe.unit_budget_tokens;
        let needed: Vec<&Vec<&BaseUnit>> = if pending.is_empty() { Vec::new() } else { jobs.iter().collect() };
        for r in self.ctx.policy.map(&needed, |units| {
            self.ctx.proxy.train_units(self.ctx.registry, units, units.len() as u64 * t, self.ctx.policy)
        }) {
            r?;
        }
        if self.cfg.with_seq_validation {
            for r in self.ctx.policy.map(&pending, |m| self.seq_model(m)) {
                r?;
            }
        }
        let progress = self.open_progress(&fingerprint, !done.is_empty())?;
        let scored = self.ctx.policy.map(&pending, |m| {
            let rows = self.score(m)?;
            if let Some(p) = &progress {
                let line = serde_json::to_string(&Progress::Mixture { mixture_id: self.cfg.mixture_id(m), rows: rows.clone() })?;
                let mut f = p.lock().unwrap();
                writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| Error::io(self.ctx.manifest.as_ref().unwrap(), e))?;
            }
            Ok::<_, Error>((self.cfg.mixture_id(m), rows))
        });
        let mut all: HashMap<String, Vec<ScoreRow>> = done;
        for r in scored {
            let (id, rows) = r?;
            all.insert(id, rows);
        }
        let mut report = ProxyReport { domains: self.cfg.domain_ids(), ..Default::default() };
        for m in &self.cfg.mixtures {
            report.rows.extend(all.remove(&self.cfg.mixture_id(m)).unwrap_or_default());
        }
        report.summarize(self.cfg.top_k);
        Ok(StudyOutcome {
            report,
            cost: cost_model(&self.cost_inputs())?,
            trainings_performed: self.ctx.registry.ledger_snapshot().trainings_performed - before,
            proxy_jobs: jobs.len(),
            seq_jobs: if self.cfg.with_seq_validation { self.cfg.mixtures.len() } else { 0 },
        })
    }

    fn open_progress(&self, fingerprint: &str, append: bool) -> Result<Option<Mutex<std::fs::File>>> {
        let Some(path) = &self.ctx.manifest else { return Ok(None) };
        let mut f = if append {
            OpenOptions::new().append(true).open(path)
        } else {
            std::fs::File::create(path)
        }
        .map_err(|e| Error::io(path, e))?;
        if !append {
            let header = serde_json::to_string(&Progress::Header { fingerprint: fingerprint.to_string() })?;
            writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
        }
        Ok(Some(Mutex::new(f)))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Progress {
    Header { fingerprint: String },
    Mixture { mixture_id: String, rows: Vec<ScoreRow> },
}

pub fn run_study(cfg: &StudyConfig, ctx: StudyContext<'_>) -> Result<StudyOutcome> {
    Study::new(cfg, ctx)?.run()
}

/// Counts registry trainings for an exhaustive k-mixture sweep over `n`
/// single-unit partitions, with a stand-in trainer that returns the seed.
pub fn simulate_sweep(n: usize, k: usize, registry: &Registry, seed: &ModelCheckpoint) -> Result<(u64, u64)> {
    let parts: Vec<PartitionRef> = (0..n).map(|i| PartitionRef { id: format!("p{i}"), source: "sim".into() }).collect();
    let before = registry.ledger_snapshot().trainings_performed;
    let mixtures = enumerate_mixtures(&parts, k, &MixtureConstraints::default(), None, 0)?;
    let mut naive = 0u64;
    for m in &mixtures {
        for i in m.indices() {
            naive += 1;
            let key = RegistryKey {
                partition_id: parts[i].id.clone(),
                seed_checkpoint_hash: "sim".into(),
                model_config_hash: config_hash(&seed.config),
                budget_tokens: 1,
                schedule_hash: "sim".into(),
                stream_seed: 0,
            };
            registry.get_or_train(&key, || Ok(seed.clone()))?;
        }
    }
    Ok((registry.ledger_snapshot().trainings_performed - before, naive))
}

/// Documents whose text is `texts`, with ids `{prefix}{i}`.
pub fn document_set(prefix: &str, texts: impl IntoIterator<Item = String>) -> Result<DocumentSet> {
    DocumentSet::new(texts.into_iter().enumerate().map(|(i, t)| Document::new(format!("{prefix}{i}"), t)).collect())
}
