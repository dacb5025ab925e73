//! Mixture vectors and their enumeration under per-source constraints.

use std::collections::{BTreeMap, BTreeSet};

use num_traits::ToPrimitive;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cost::count_mixtures;
use crate::error::{Error, Result};

/// Largest candidate set enumerated explicitly; beyond it sampling falls
/// back to rejection.
pub const ENUMERATION_LIMIT: usize = 1 << 23;

/// In/exclusion bits over an ordered partition list.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MixtureVector {
    bits: Vec<bool>,
}

impl MixtureVector {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        MixtureVector { bits }
    }

    pub fn from_indices(n: usize, indices: &[usize]) -> Result<Self> {
        let mut bits = vec![false; n];
        for &i in indices {
            if i >= n {
                return Err(Error::invalid(format!("partition index {i} out of range for {n} partitions")));
            }
            if bits[i] {
                return Err(Error::invalid(format!("partition index {i} repeated in mixture")));
            }
            bits[i] = true;
        }
        Ok(MixtureVector { bits })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn n(&self) -> usize {
        self.bits.len()
    }

    pub fn k(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect()
    }

    pub fn bitstring(&self) -> String {
        self.bits.iter().map(|b| if *b { '1' } else { '0' }).collect()
    }
}

/// Partition identity as seen by the mixture sampler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionRef {
    pub id: String,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceBound {
    pub source: String,
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureConstraints {
    #[serde(default)]
    pub per_source: Vec<SourceBound>,
    /// Partition ids every mixture must include.
    #[serde(default)]
    pub required: Vec<String>,
}

struct Checker {
    source_of: Vec<usize>,
    bounds: Vec<(usize, usize)>,
    required: Vec<usize>,
}

impl Checker {
    fn new(partitions: &[PartitionRef], c: &MixtureConstraints) -> Result<Self> {
        let mut source_idx: BTreeMap<&str, usize> = BTreeMap::new();
        for b in &c.per_source {
            if b.min > b.max {
                return Err(Error::invalid(format!("source {:?}: min exceeds max", b.source)));
            }
            let next = source_idx.len();
            source_idx.entry(b.source.as_str()).or_insert(next);
        }
        if let Some(b) = c.per_source.iter().find(|b| !partitions.iter().any(|p| p.source == b.source)) {
            return Err(Error::Missing { kind: "source", name: b.source.clone() });
        }
        let source_of = partitions
            .iter()
            .map(|p| source_idx.get(p.source.as_str()).copied().unwrap_or(usize::MAX))
            .collect();
        let mut bounds = vec![(0, usize::MAX); source_idx.len()];
        for b in &c.per_source {
            bounds[source_idx[b.source.as_str()]] = (b.min, b.max);
        }
        let required = c
            .required
            .iter()
            .map(|id| {
                partitions
                    .iter()
                    .position(|p| &p.id == id)
                    .ok_or_else(|| Error::Missing { kind: "partition", name: id.clone() })
            })
            .collect::<Result<_>>()?;
        Ok(Checker { source_of, bounds, required })
    }

    fn accepts(&self, idx: &[usize]) -> bool {
        if !self.required.iter().all(|r| idx.contains(r)) {
            return false;
        }
        let mut counts = vec![0usize; self.bounds.len()];
        for &i in idx {
            if self.source_of[i] != usize::MAX {
                counts[self.source_of[i]] += 1;
            }
        }
        counts.iter().zip(&self.bounds).all(|(c, (lo, hi))| c >= lo && c <= hi)
    }
}

/// Calls `f` on every k-subset of `0..n` in lexicographic order of index
/// tuples.
fn for_each_combination(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else { return };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// All feasible mixtures in lexicographic order of their index tuples, or a
/// uniform sample of `sample_count` of them without replacement (returned in
/// the same order).
pub fn enumerate_mixtures(
    partitions: &[PartitionRef],
    k: usize,
    constraints: &MixtureConstraints,
    sample_count: Option<usize>,
    rng_seed: u64,
) -> Result<Vec<MixtureVector>> {
    let n = partitions.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("mixture size k = {k} must lie in 1..={n}")));
    }
    let checker = Checker::new(partitions, constraints)?;
    let total = count_mixtures(n as u64, k as u64)?.to_usize().unwrap_or(usize::MAX);
    if total <= ENUMERATION_LIMIT {
        let mut feasible = Vec::new();
        for_each_combination(n, k, |idx| {
            if checker.accepts(idx) {
                feasible.push(idx.to_vec());
            }
        });
        let chosen: Vec<Vec<usize>> = match sample_count {
            None => feasible,
            Some(s) if s > feasible.len() => {
                return Err(Error::invalid(format!("sample of {s} exceeds the {} feasible mixtures", feasible.len())))
            }
            Some(s) => {
                let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
                let mut picks = index::sample(&mut rng, feasible.len(), s).into_vec();
                picks.sort_unstable();
                picks.into_iter().map(|i| feasible[i].clone()).collect()
            }
        };
        return chosen.iter().map(|idx| MixtureVector::from_indices(n, idx)).collect();
    }
    let Some(s) = sample_count else {
        return Err(Error::invalid(format!("{total} candidate mixtures are too many to enumerate; give a sample count")));
    };
    if s > total {
        return Err(Error::invalid(format!("sample of {s} exceeds the {total} candidate mixtures")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    let max_draws = s.saturating_mul(10_000).max(1_000_000);
    let mut draws = 0usize;
    while seen.len() < s {
        draws += 1;
        if draws > max_draws {
            return Err(Error::invalid("constraints too tight to sample the requested mixtures"));
        }
        let mut idx: Vec<usize> = index::sample(&mut rng, n, k).into_vec();
        idx.sort_unstable();
        if checker.accepts(&idx) {
            seen.insert(idx);
        }
    }
    seen.iter().map(|idx| MixtureVector::from_indices(n, idx)).collect()
}
