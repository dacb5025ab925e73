//! Corpus to study partitions: partition, hold out, decontaminate, split.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::StudyPartition;
use crate::corpus::{holdout_split, partition_by_metadata_with_aliases, split_into_base_units, AliasMap, Document, DocumentSet, Partition, SplitPlan};
use crate::decontam::{build_eval_filter, decontaminate, DecontamReport, DEFAULT_MIN_PARAGRAPH_TOKENS, DEFAULT_TARGET_FP_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareOptions {
    /// Metadata keys that define partitions; the first names the source.
    pub keys: Vec<String>,
    #[serde(default)]
    pub aliases: AliasMap,
    pub split: SplitPlan,
    pub heldout_fraction: f64,
    pub rng_seed: u64,
    #[serde(default = "default_true")]
    pub decontaminate: bool,
    #[serde(default = "default_min_tokens")]
    pub min_paragraph_tokens: usize,
    #[serde(default = "default_fp")]
    pub target_fp_rate: f64,
}

fn default_true() -> bool {
    true
}

fn default_min_tokens() -> usize {
    DEFAULT_MIN_PARAGRAPH_TOKENS
}

fn default_fp() -> f64 {
    DEFAULT_TARGET_FP_RATE
}

impl PrepareOptions {
    pub fn new(keys: Vec<String>, split: SplitPlan) -> Self {
        PrepareOptions {
            keys,
            aliases: AliasMap::new(),
            split,
            heldout_fraction: 0.1,
            rng_seed: 0,
            decontaminate: true,
            min_paragraph_tokens: DEFAULT_MIN_PARAGRAPH_TOKENS,
            target_fp_rate: DEFAULT_TARGET_FP_RATE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub partitions: Vec<StudyPartition>,
    pub decontam: Option<DecontamReport>,
}

/// Partitions `docs`, holds out a heldout set per partition, drops training
/// documents that share a paragraph with any heldout or `external_eval`
/// set, and splits what remains into base units. Units recombined from
/// several partitions form one study partition.
pub fn prepare_partitions(docs: &DocumentSet, external_eval: &[&DocumentSet], opts: &PrepareOptions) -> Result<Prepared> {
    if opts.keys.is_empty() {
        return Err(Error::config("keys", "at least one partition key is required"));
    }
    let parts = partition_by_metadata_with_aliases(docs, &opts.keys, &opts.aliases)?;
    let mut train = Vec::new();
    let mut heldout: BTreeMap<String, (String, Vec<Arc<Document>>)> = BTreeMap::new();
    for (i, p) in parts.iter().enumerate() {
        let (tr, ho) = holdout_split(p, opts.heldout_fraction, opts.rng_seed.wrapping_add(i as u64))?;
        let source = p.key_values.get(&opts.keys[0]).cloned().unwrap_or_default();
        heldout.insert(p.id.clone(), (source, ho.documents));
        train.push(tr);
    }
    let mut report = None;
    if opts.decontaminate {
        let mut eval: Vec<Arc<Document>> = heldout.values().flat_map(|(_, d)| d.iter().cloned()).collect();
        for set in external_eval {
            eval.extend(set.documents().iter().cloned());
        }
        let eval = DocumentSet::from_shared(eval)?;
        let filter = build_eval_filter(&eval, opts.min_paragraph_tokens, opts.target_fp_rate)?;
        let mut total = DecontamReport { kept: 0, excluded: 0, excluded_ids: Vec::new() };
        let mut cleaned = Vec::new();
        for p in train {
            let (kept, r) = decontaminate(&p.document_set(), &filter)?;
            total.kept += r.kept;
            total.excluded += r.excluded;
            total.excluded_ids.extend(r.excluded_ids);
            if kept.is_empty() {
                return Err(Error::invalid(format!("partition {:?} has no training documents left after decontamination", p.id)));
            }
            cleaned.push(Partition::new(p.id, p.key_values, kept.documents().to_vec()));
        }
        train = cleaned;
        report = Some(total);
    }
    let units = split_into_base_units(&train, &opts.split)?;
    let mut grouped: Vec<StudyPartition> = Vec::new();
    for u in units {
        if let Some(g) = grouped.iter_mut().find(|g| g.id == u.parent_partition_id) {
            g.units.push(u);
            continue;
        }
        let members: Vec<&str> = u.parent_partition_id.split('+').collect();
        let mut ho = Vec::new();
        let mut source = String::new();
        for m in &members {
            let (s, d) = heldout.get(*m).ok_or_else(|| Error::Missing { kind: "partition", name: m.to_string() })?;
            if source.is_empty() {
                source = s.clone();
            }
            ho.extend(d.iter().cloned());
        }
        grouped.push(StudyPartition {
            id: u.parent_partition_id.clone(),
            source,
            heldout: DocumentSet::from_shared(ho)?,
            units: vec![u],
        });
    }
    Ok(Prepared { partitions: grouped, decontam: report })
}
