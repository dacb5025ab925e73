//! Document ingestion, metadata partitioning, base-unit splitting and
//! training streams.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tokenizer::{encode, pack_sequences, token_count, Packer};

pub const MISSING_VALUE: &str = "NA";

pub type Metadata = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub metadata: Metadata,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Document { id: id.into(), text: text.into(), metadata: Metadata::new() }
    }

    pub fn with_meta(mut self, key: &str, value: &str) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn tokens(&self) -> u64 {
        token_count(&self.text) as u64
    }
}

/// An immutable, id-unique collection of documents.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DocumentSet {
    documents: Vec<Arc<Document>>,
    total_token_count: u64,
}

impl DocumentSet {
    pub fn new(documents: Vec<Document>) -> Result<Self> {
        Self::from_shared(documents.into_iter().map(Arc::new).collect())
    }

    pub fn from_shared(documents: Vec<Arc<Document>>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(documents.len());
        for d in &documents {
            if !seen.insert(d.id.as_str()) {
                return Err(Error::DuplicateId(d.id.clone()));
            }
            if d.text.is_empty() {
                return Err(Error::invalid(format!("document {:?} has empty text", d.id)));
            }
        }
        let total_token_count = documents.iter().map(|d| d.tokens()).sum();
        Ok(DocumentSet { documents, total_token_count })
    }

    pub fn documents(&self) -> &[Arc<Document>] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn total_token_count(&self) -> u64 {
        self.total_token_count
    }

    pub fn ids(&self) -> Vec<&str> {
        self.documents.iter().map(|d| d.id.as_str()).collect()
    }

    pub fn concat(sets: &[&DocumentSet]) -> Result<Self> {
        Self::from_shared(sets.iter().flat_map(|s| s.documents.iter().cloned()).collect())
    }
}

fn parse_record(line: &str, lineno: usize) -> Result<Document> {
    let err = |message: String| Error::Parse { line: lineno, message };
    let value: Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| err("record is not an object".into()))?;
    let id = match obj.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err(err("field id must be a string".into())),
        None => return Err(err("missing field id".into())),
    };
    let text = match obj.get("text") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        Some(Value::String(_)) => return Err(err("field text is empty".into())),
        Some(_) => return Err(err("field text must be a string".into())),
        None => return Err(err("missing field text".into())),
    };
    let mut metadata = Metadata::new();
    match obj.get("metadata") {
        None | Some(Value::Null) => {}
        Some(Value::Object(m)) => {
            for (k, v) in m {
                let s = match v {
                    Value::String(s) => s.clone(),
                    Value::Null => continue,
                    other => other.to_string(),
                };
                metadata.insert(k.clone(), s);
            }
        }
        Some(_) => return Err(err("field metadata must be an object".into())),
    }
    Ok(Document { id, text, metadata })
}

/// Reads line-delimited `{id, text, metadata}` records, preserving order.
/// Blank lines are skipped.
pub fn ingest_documents(path: &Path) -> Result<DocumentSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_documents(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_documents<R: BufRead>(reader: R) -> Result<DocumentSet> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<input>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc = parse_record(&line, i + 1)?;
        if !seen.insert(doc.id.clone()) {
            return Err(Error::Parse { line: i + 1, message: format!("duplicate id {:?}", doc.id) });
        }
        docs.push(doc);
    }
    DocumentSet::new(docs)
}

pub fn write_documents<W: Write>(mut w: W, docs: &DocumentSet) -> Result<()> {
    for d in docs.documents() {
        serde_json::to_writer(&mut w, d.as_ref())?;
        w.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Partition {
    pub id: String,
    pub key_values: Metadata,
    pub documents: Vec<Arc<Document>>,
    pub token_count: u64,
}

impl Partition {
    pub(crate) fn new(id: String, key_values: Metadata, documents: Vec<Arc<Document>>) -> Self {
        let token_count = documents.iter().map(|d| d.tokens()).sum();
        Partition { id, key_values, documents, token_count }
    }

    pub fn document_set(&self) -> DocumentSet {
        DocumentSet::from_shared(self.documents.clone()).expect("partition documents are unique")
    }

    pub fn doc_ids(&self) -> Vec<String> {
        self.documents.iter().map(|d| d.id.clone()).collect()
    }
}

/// Per-key value renames applied before grouping, e.g. merging a small
/// field of study into a related one.
pub type AliasMap = BTreeMap<String, BTreeMap<String, String>>;

pub fn partition_by_metadata(docs: &DocumentSet, keys: &[String]) -> Result<Vec<Partition>> {
    partition_by_metadata_with_aliases(docs, keys, &AliasMap::new())
}

/// Groups documents by their values for `keys`. Missing or empty values
/// become `"NA"`. Partitions come back sorted by key-value tuple.
pub fn partition_by_metadata_with_aliases(docs: &DocumentSet, keys: &[String], aliases: &AliasMap) -> Result<Vec<Partition>> {
    if keys.is_empty() {
        return Err(Error::invalid("partition keys must not be empty"));
    }
    let mut groups: BTreeMap<Vec<String>, Vec<Arc<Document>>> = BTreeMap::new();
    for doc in docs.documents() {
        let tuple = keys
            .iter()
            .map(|k| {
                let raw = doc.metadata.get(k).map(String::as_str).filter(|v| !v.is_empty()).unwrap_or(MISSING_VALUE);
                aliases.get(k).and_then(|m| m.get(raw)).cloned().unwrap_or_else(|| raw.to_string())
            })
            .collect::<Vec<_>>();
        groups.entry(tuple).or_default().push(doc.clone());
    }
    Ok(groups
        .into_iter()
        .map(|(tuple, documents)| {
            let key_values = keys.iter().cloned().zip(tuple.iter().cloned()).collect();
            Partition::new(tuple.join("/"), key_values, documents)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UnitOrdering {
    ByMetadataThenId,
    #[default]
    ById,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub target_tokens: u64,
    #[serde(default)]
    pub ordering: UnitOrdering,
    #[serde(default = "default_slack")]
    pub slack_fraction: f64,
    /// Merge consecutive underfull siblings (partitions agreeing on all but
    /// the last key) before splitting.
    #[serde(default)]
    pub recombine_siblings: bool,
}

fn default_slack() -> f64 {
    0.5
}

impl SplitPlan {
    pub fn new(target_tokens: u64) -> Self {
        SplitPlan { target_tokens, ordering: UnitOrdering::ById, slack_fraction: default_slack(), recombine_siblings: false }
    }
}

#[derive(Debug, Clone)]
pub struct BaseUnit {
    pub id: String,
    pub parent_partition_id: String,
    pub documents: Vec<Arc<Document>>,
    pub token_count: u64,
    pub target_tokens: u64,
}

impl BaseUnit {
    pub fn doc_ids(&self) -> Vec<String> {
        self.documents.iter().map(|d| d.id.clone()).collect()
    }

    pub fn document_set(&self) -> DocumentSet {
        DocumentSet::from_shared(self.documents.clone()).expect("unit documents are unique")
    }
}

fn order_docs(docs: &mut [Arc<Document>], ordering: UnitOrdering) {
    match ordering {
        UnitOrdering::ById => docs.sort_by(|a, b| a.id.cmp(&b.id)),
        UnitOrdering::ByMetadataThenId => {
            docs.sort_by(|a, b| a.metadata.cmp(&b.metadata).then_with(|| a.id.cmp(&b.id)))
        }
    }
}

fn pack_units(parent: &str, mut docs: Vec<Arc<Document>>, plan: &SplitPlan) -> Vec<BaseUnit> {
    order_docs(&mut docs, plan.ordering);
    let t = plan.target_tokens;
    let mut groups: Vec<(Vec<Arc<Document>>, u64)> = Vec::new();
    let mut cur = Vec::new();
    let mut cur_tokens = 0;
    for d in docs {
        cur_tokens += d.tokens();
        cur.push(d);
        if cur_tokens >= t {
            groups.push((std::mem::take(&mut cur), cur_tokens));
            cur_tokens = 0;
        }
    }
    if !cur.is_empty() {
        let fold = (cur_tokens as f64) < plan.slack_fraction * t as f64;
        match groups.last_mut() {
            Some(last) if fold => {
                last.0.extend(cur);
                last.1 += cur_tokens;
            }
            _ => groups.push((cur, cur_tokens)),
        }
    }
    groups
        .into_iter()
        .enumerate()
        .map(|(j, (documents, token_count))| BaseUnit {
            id: format!("{parent}#{j}"),
            parent_partition_id: parent.to_string(),
            documents,
            token_count,
            target_tokens: t,
        })
        .collect()
}

fn sibling_prefix(p: &Partition) -> Vec<&String> {
    let n = p.key_values.len();
    p.key_values.values().take(n.saturating_sub(1)).collect()
}

/// Greedily packs whole documents into units of at least `target_tokens`.
pub fn split_into_base_units(partitions: &[Partition], plan: &SplitPlan) -> Result<Vec<BaseUnit>> {
    if plan.target_tokens == 0 {
        return Err(Error::invalid("split target_tokens must be positive"));
    }
    if !(0.0..=1.0).contains(&plan.slack_fraction) {
        return Err(Error::invalid("slack_fraction must lie in [0, 1]"));
    }
    if let Some(p) = partitions.iter().find(|p| p.token_count == 0) {
        return Err(Error::invalid(format!("partition {:?} is empty", p.id)));
    }
    let mut units = Vec::new();
    let mut i = 0;
    while i < partitions.len() {
        let p = &partitions[i];
        if !plan.recombine_siblings || p.token_count >= plan.target_tokens {
            units.extend(pack_units(&p.id, p.documents.clone(), plan));
            i += 1;
            continue;
        }
        // Absorb following underfull siblings until the target is met.
        let prefix = sibling_prefix(p);
        let mut ids = vec![p.id.as_str()];
        let mut docs = p.documents.clone();
        let mut tokens = p.token_count;
        let mut j = i + 1;
        while tokens < plan.target_tokens && j < partitions.len() {
            let q = &partitions[j];
            if sibling_prefix(q) != prefix || q.token_count >= plan.target_tokens {
                break;
            }
            ids.push(q.id.as_str());
            docs.extend(q.documents.iter().cloned());
            tokens += q.token_count;
            j += 1;
        }
        units.extend(pack_units(&ids.join("+"), docs, plan));
        i = j;
    }
    Ok(units)
}

/// Document-level train/heldout split, deterministic in `rng_seed`.
/// Both sides keep their original relative order.
pub fn holdout_split(partition: &Partition, fraction: f64, rng_seed: u64) -> Result<(Partition, Partition)> {
    let n = partition.documents.len();
    if n < 2 {
        return Err(Error::invalid(format!("partition {:?} needs at least 2 documents to split", partition.id)));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("heldout fraction must lie in (0, 1)"));
    }
    let heldout_n = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    let mut is_heldout = vec![false; n];
    for &i in &idx[..heldout_n] {
        is_heldout[i] = true;
    }
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (d, h) in partition.documents.iter().zip(is_heldout) {
        if h {
            held.push(d.clone());
        } else {
            train.push(d.clone());
        }
    }
    Ok((
        Partition::new(partition.id.clone(), partition.key_values.clone(), train),
        Partition::new(partition.id.clone(), partition.key_values.clone(), held),
    ))
}

/// Endless document stream over a mixture of base units.
///
/// Each draw picks a unit (uniformly when upsampling, else by token mass)
/// and yields that unit's next document, cycling through the unit in order.
pub struct TrainingStream {
    units: Vec<Vec<Arc<[u32]>>>,
    cursors: Vec<usize>,
    picker: UnitPicker,
    rng: ChaCha8Rng,
}

enum UnitPicker {
    Uniform(usize),
    Weighted(WeightedIndex<u64>),
}

pub fn sample_training_stream(mixture_units: &[&BaseUnit], upsample: bool, rng_seed: u64) -> Result<TrainingStream> {
    if mixture_units.is_empty() {
        return Err(Error::invalid("training stream needs at least one unit"));
    }
    let units: Vec<Vec<Arc<[u32]>>> = mixture_units
        .iter()
        .map(|u| u.documents.iter().map(|d| Arc::from(encode(&d.text))).collect())
        .collect();
    if let Some(u) = mixture_units.iter().find(|u| u.documents.is_empty()) {
        return Err(Error::invalid(format!("unit {:?} has no documents", u.id)));
    }
    let picker = if upsample {
        UnitPicker::Uniform(units.len())
    } else {
        let mass: Vec<u64> = mixture_units.iter().map(|u| u.token_count.max(1)).collect();
        UnitPicker::Weighted(WeightedIndex::new(mass).map_err(|e| Error::invalid(e.to_string()))?)
    };
    Ok(TrainingStream { cursors: vec![0; units.len()], units, picker, rng: ChaCha8Rng::seed_from_u64(rng_seed) })
}

impl TrainingStream {
    /// Index of the unit the next document will come from is drawn here.
    fn pick(&mut self) -> usize {
        match &self.picker {
            UnitPicker::Uniform(n) => self.rng.random_range(0..*n),
            UnitPicker::Weighted(w) => w.sample(&mut self.rng),
        }
    }

    /// Like `next`, also reporting which unit the document came from.
    pub fn next_with_unit(&mut self) -> (usize, Arc<[u32]>) {
        let u = self.pick();
        let docs = &self.units[u];
        let doc = docs[self.cursors[u] % docs.len()].clone();
        self.cursors[u] += 1;
        (u, doc)
    }

    pub fn into_batches(self, seq_len: usize, rows: usize) -> Packer<TrainingStream> {
        pack_sequences(self, seq_len, rows)
    }
}

impl Iterator for TrainingStream {
    type Item = Arc<[u32]>;

    fn next(&mut self) -> Option<Arc<[u32]>> {
        Some(self.next_with_unit().1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifestRow {
    pub partition_id: String,
    pub key_values: Metadata,
    pub doc_ids: Vec<String>,
    pub token_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitManifestRow {
    pub unit_id: String,
    pub parent_partition_id: String,
    pub doc_ids: Vec<String>,
    pub token_count: u64,
    pub target_tokens: u64,
}

fn write_jsonl<W: Write, T: Serialize>(mut w: W, rows: impl IntoIterator<Item = T>) -> Result<()> {
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}

pub fn write_partition_manifest<W: Write>(w: W, partitions: &[Partition]) -> Result<()> {
    write_jsonl(
        w,
        partitions.iter().map(|p| PartitionManifestRow {
            partition_id: p.id.clone(),
            key_values: p.key_values.clone(),
            doc_ids: p.doc_ids(),
            token_count: p.token_count,
        }),
    )
}

pub fn write_unit_manifest<W: Write>(w: W, units: &[BaseUnit]) -> Result<()> {
    write_jsonl(
        w,
        units.iter().map(|u| UnitManifestRow {
            unit_id: u.id.clone(),
            parent_partition_id: u.parent_partition_id.clone(),
            doc_ids: u.doc_ids(),
            token_count: u.token_count,
            target_tokens: u.target_tokens,
        }),
    )
}
