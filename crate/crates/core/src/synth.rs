//! Synthetic corpora for controlled ablations.
//!
//! Each source writes with its own disjoint alphabet. Each topic within a
//! source is an order-1 Markov chain over that alphabet plus space. Its
//! transition rows blend a source-wide table with a topic-specific one,
//! both drawn from symmetric Dirichlets. The topic concentration varies,
//! so topics differ in entropy. The out-of-domain set comes from one extra
//! topic per source that no training partition contains.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, DocumentSet, SplitPlan};
use crate::error::{Error, Result};
use crate::study::{prepare_partitions, EvalDomain, PrepareOptions, StudyPartition};

const ALPHABETS: [&[u8]; 4] = [b"abcdefghijkl", b"mnopqrstuvwx", b"ABCDEFGHIJKL", b"MNOPQRSTUVWX"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub sources: usize,
    pub topics_per_source: usize,
    /// Dirichlet concentrations, assigned to topics by a seeded shuffle.
    pub concentrations: Vec<f64>,
    /// Concentration of each source's shared table.
    pub source_concentration: f64,
    /// Weight of the shared table in every topic's transitions.
    pub shared_weight: f64,
    /// Concentration of each source's held-out topic.
    pub ood_concentrations: Vec<f64>,
    pub train_tokens_per_topic: u64,
    pub heldout_tokens_per_topic: u64,
    pub seed_tokens: u64,
    pub ood_tokens: u64,
    /// Share of each source in the out-of-domain set.
    pub ood_source_weights: Vec<f64>,
    pub doc_chars: (usize, usize),
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sources: 4,
            topics_per_source: 2,
            concentrations: vec![0.04, 0.08, 0.15, 0.25, 0.4, 0.7, 1.2, 2.0],
            source_concentration: 0.3,
            shared_weight: 0.5,
            ood_concentrations: vec![0.25, 0.5, 0.25, 0.5],
            train_tokens_per_topic: 120_000,
            heldout_tokens_per_topic: 12_000,
            seed_tokens: 240_000,
            ood_tokens: 24_000,
            ood_source_weights: vec![0.4, 0.3, 0.2, 0.1],
            doc_chars: (300, 900),
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn topics(&self) -> usize {
        self.sources * self.topics_per_source
    }

    fn validate(&self) -> Result<()> {
        if self.sources == 0 || self.sources > ALPHABETS.len() {
            return Err(Error::config("sources", format!("must lie in 1..={}", ALPHABETS.len())));
        }
        if self.topics_per_source == 0 {
            return Err(Error::config("topics_per_source", "must be positive"));
        }
        if self.concentrations.len() != self.topics() || self.concentrations.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::config("concentrations", format!("need {} positive values", self.topics())));
        }
        if !(self.source_concentration > 0.0) {
            return Err(Error::config("source_concentration", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.shared_weight) {
            return Err(Error::config("shared_weight", "must lie in [0, 1]"));
        }
        if self.ood_concentrations.len() != self.sources || self.ood_concentrations.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::config("ood_concentrations", format!("need {} positive values", self.sources)));
        }
        if self.ood_source_weights.len() != self.sources {
            return Err(Error::config("ood_source_weights", format!("need {} values", self.sources)));
        }
        if self.doc_chars.0 < 2 || self.doc_chars.0 > self.doc_chars.1 {
            return Err(Error::config("doc_chars", "need 2 <= min <= max"));
        }
        Ok(())
    }
}

/// A topic's transition table over `alphabet` followed by space.
#[derive(Debug, Clone)]
pub struct Chain {
    alphabet: Vec<u8>,
    probs: Vec<Vec<f64>>,
    rows: Vec<WeightedIndex<f64>>,
    start: WeightedIndex<f64>,
}

impl Chain {
    fn from_probs(alphabet: &[u8], probs: Vec<Vec<f64>>) -> Result<Self> {
        let rows = probs
            .iter()
            .map(|w| WeightedIndex::new(w.clone()).map_err(|e| Error::invalid(e.to_string())))
            .collect::<Result<_>>()?;
        let start = WeightedIndex::new(vec![1.0; alphabet.len()]).expect("uniform weights");
        Ok(Chain { alphabet: alphabet.to_vec(), probs, rows, start })
    }

    /// Rows drawn from a symmetric Dirichlet; space never follows space.
    pub fn random(alphabet: &[u8], concentration: f64, rng: &mut impl Rng) -> Result<Self> {
        let states = alphabet.len() + 1;
        let space = alphabet.len();
        let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
        let mut probs = Vec::with_capacity(states);
        for s in 0..states {
            let mut w: Vec<f64> = (0..states).map(|_| gamma.sample(rng) + 1e-12).collect();
            if s == space {
                w[space] = 0.0;
            }
            let total: f64 = w.iter().sum();
            probs.push(w.into_iter().map(|x| x / total).collect());
        }
        Self::from_probs(alphabet, probs)
    }

    /// Row-wise `weight·shared + (1 − weight)·self`.
    pub fn blend(&self, shared: &Chain, weight: f64) -> Result<Self> {
        if shared.alphabet != self.alphabet {
            return Err(Error::invalid("chains over different alphabets"));
        }
        let probs = self
            .probs
            .iter()
            .zip(&shared.probs)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| weight * y + (1.0 - weight) * x).collect())
            .collect();
        Self::from_probs(&self.alphabet, probs)
    }

    /// Transition probabilities, one row per state.
    pub fn row_probs(&self) -> &[Vec<f64>] {
        &self.probs
    }

    /// Text of exactly `len` characters that starts and ends with a letter
    /// and never holds two spaces in a row.
    pub fn sample_text(&self, len: usize, rng: &mut impl Rng) -> String {
        let space = self.alphabet.len();
        let mut out = Vec::with_capacity(len);
        let mut s = self.start.sample(rng);
        out.push(self.alphabet[s]);
        while out.len() < len {
            s = self.rows[s].sample(rng);
            if s == space && out.len() + 1 == len {
                s = self.start.sample(rng);
            }
            out.push(if s == space { b' ' } else { self.alphabet[s] });
        }
        String::from_utf8(out).expect("ascii")
    }
}

#[derive(Debug, Clone)]
pub struct SynthTopic {
    pub source: String,
    pub topic: String,
    pub concentration: f64,
    pub chain: Chain,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub topics: Vec<SynthTopic>,
    /// One unseen topic per source, the origin of `ood`.
    pub held_out: Vec<SynthTopic>,
    /// Training and heldout documents of every topic, tagged with
    /// `source` and `topic` metadata.
    pub corpus: DocumentSet,
    /// Fresh samples from every topic for seed training.
    pub seed: DocumentSet,
    pub ood: DocumentSet,
}

fn sample_docs(
    chain: &Chain,
    tokens: u64,
    prefix: &str,
    doc_chars: (usize, usize),
    rng: &mut impl Rng,
    out: &mut Vec<Document>,
) -> Vec<usize> {
    let mut made = 0u64;
    let mut idx = Vec::new();
    while made < tokens {
        let len = rng.random_range(doc_chars.0..=doc_chars.1);
        idx.push(out.len());
        out.push(Document::new(format!("{prefix}{:05}", idx.len() - 1), chain.sample_text(len, rng)));
        made += len as u64;
    }
    idx
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut alphas = cfg.concentrations.clone();
    alphas.shuffle(&mut rng);
    let mut topics = Vec::new();
    let mut held_out = Vec::new();
    for s in 0..cfg.sources {
        let shared = Chain::random(ALPHABETS[s], cfg.source_concentration, &mut rng)?;
        let topic = |t: usize, a: f64, rng: &mut ChaCha8Rng| -> Result<SynthTopic> {
            Ok(SynthTopic {
                source: format!("s{s}"),
                topic: format!("t{t}"),
                concentration: a,
                chain: Chain::random(ALPHABETS[s], a, rng)?.blend(&shared, cfg.shared_weight)?,
            })
        };
        for t in 0..cfg.topics_per_source {
            topics.push(topic(t, alphas[s * cfg.topics_per_source + t], &mut rng)?);
        }
        held_out.push(topic(cfg.topics_per_source, cfg.ood_concentrations[s], &mut rng)?);
    }
    let per_topic = cfg.train_tokens_per_topic + cfg.heldout_tokens_per_topic;
    let mut corpus = Vec::new();
    for t in &topics {
        let prefix = format!("{}-{}-", t.source, t.topic);
        let idx = sample_docs(&t.chain, per_topic, &prefix, cfg.doc_chars, &mut rng, &mut corpus);
        for i in idx {
            let d = std::mem::replace(&mut corpus[i], Document::new("", ""));
            corpus[i] = d.with_meta("source", &t.source).with_meta("topic", &t.topic);
        }
    }
    let mut seed = Vec::new();
    let share = cfg.seed_tokens.div_ceil(topics.len() as u64);
    for t in &topics {
        sample_docs(&t.chain, share, &format!("seed-{}-{}-", t.source, t.topic), cfg.doc_chars, &mut rng, &mut seed);
    }
    let mut ood = Vec::new();
    let total_w: f64 = cfg.ood_source_weights.iter().sum();
    for (t, w) in held_out.iter().zip(&cfg.ood_source_weights) {
        let tokens = (cfg.ood_tokens as f64 * w / total_w).ceil() as u64;
        sample_docs(&t.chain, tokens, &format!("ood-{}-{}-", t.source, t.topic), cfg.doc_chars, &mut rng, &mut ood);
    }
    Ok(SynthCorpus {
        topics,
        held_out,
        corpus: DocumentSet::new(corpus)?,
        seed: DocumentSet::new(seed)?,
        ood: DocumentSet::new(ood)?,
    })
}

/// Study partitions (one per topic, one base unit each) and the
/// out-of-domain evaluation set of a synthetic corpus.
#[derive(Debug, Clone)]
pub struct SynthStudyInputs {
    pub corpus: SynthCorpus,
    pub partitions: Vec<StudyPartition>,
    pub ood: EvalDomain,
}

pub const OOD_DOMAIN: &str = "ood_mixed";

pub fn study_inputs(cfg: &SynthConfig) -> Result<SynthStudyInputs> {
    let corpus = generate(cfg)?;
    let per_topic = cfg.train_tokens_per_topic + cfg.heldout_tokens_per_topic;
    let mut opts = PrepareOptions::new(vec!["source".into(), "topic".into()], SplitPlan::new(per_topic * 2));
    opts.heldout_fraction = cfg.heldout_tokens_per_topic as f64 / per_topic as f64;
    opts.rng_seed = cfg.rng_seed;
    let prepared = prepare_partitions(&corpus.corpus, &[&corpus.ood], &opts)?;
    let ood = EvalDomain { id: OOD_DOMAIN.into(), docs: corpus.ood.clone() };
    Ok(SynthStudyInputs { partitions: prepared.partitions, ood, corpus })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_text_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = Chain::random(ALPHABETS[0], 0.3, &mut rng).unwrap();
        for len in [2, 5, 50, 400] {
            let t = c.sample_text(len, &mut rng);
            assert_eq!(t.len(), len);
            assert!(!t.starts_with(' ') && !t.ends_with(' ') && !t.contains("  "));
            assert!(t.bytes().all(|b| b == b' ' || ALPHABETS[0].contains(&b)));
        }
    }

    #[test]
    fn blending_mixes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Chain::random(ALPHABETS[1], 0.5, &mut rng).unwrap();
        let b = Chain::random(ALPHABETS[1], 0.5, &mut rng).unwrap();
        let m = a.blend(&b, 0.25).unwrap();
        for ((ra, rb), rm) in a.row_probs().iter().zip(b.row_probs()).zip(m.row_probs()) {
            assert!((rm.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for ((x, y), z) in ra.iter().zip(rb).zip(rm) {
                assert!((z - (0.75 * x + 0.25 * y)).abs() < 1e-15);
            }
        }
        assert!(a.blend(&Chain::random(ALPHABETS[0], 0.5, &mut rng).unwrap(), 0.5).is_err());
    }

    #[test]
    fn corpus_is_deterministic_and_tagged() {
        let cfg = SynthConfig {
            train_tokens_per_topic: 3000,
            heldout_tokens_per_topic: 1000,
            seed_tokens: 4000,
            ood_tokens: 2000,
            ..SynthConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.ood, b.ood);
        assert!(a.corpus.total_token_count() >= 8 * 4000);
        for d in a.corpus.documents() {
            assert!(d.metadata.contains_key("source") && d.metadata.contains_key("topic"));
        }
        let c = generate(&SynthConfig { rng_seed: 1, ..cfg }).unwrap();
        assert_ne!(a.corpus, c.corpus);
        assert!(a.ood.documents().iter().all(|d| d.id.contains("-t2-")));
        assert_eq!(a.held_out.len(), 4);
    }
}
