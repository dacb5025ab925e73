//! Parameter averaging: weighted, macro- and micro-merged.
//!
//! Accumulation is done in `f64` over members sorted into a canonical order,
//! then rounded once to `f32`, so results do not depend on member order.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{AdamState, MergeProvenance, ModelCheckpoint, Provenance};
use crate::lm::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    FlatWeighted,
    Macro,
    Micro,
}

impl MergeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MergeMode::FlatWeighted => "flat_weighted",
            MergeMode::Macro => "macro",
            MergeMode::Micro => "micro",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MergeGroup<'a> {
    pub group_id: String,
    pub members: Vec<&'a ModelCheckpoint>,
    pub member_weights: Vec<f64>,
}

impl<'a> MergeGroup<'a> {
    pub fn uniform(group_id: impl Into<String>, members: Vec<&'a ModelCheckpoint>) -> Self {
        let member_weights = vec![1.0; members.len()];
        MergeGroup { group_id: group_id.into(), members, member_weights }
    }
}

#[derive(Debug, Clone)]
pub struct MergeSpec<'a> {
    pub groups: Vec<MergeGroup<'a>>,
    pub group_weights: Vec<f64>,
    pub mode: MergeMode,
}

fn check_weights(weights: &[f64]) -> Result<f64> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid("merge weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("merge weights are all zero"));
    }
    Ok(total)
}

fn canonical_cmp(a: (&ParamSet, f64), b: (&ParamSet, f64)) -> Ordering {
    a.0.flat
        .iter()
        .map(|x| x.to_bits())
        .cmp(b.0.flat.iter().map(|x| x.to_bits()))
        .then(a.1.to_bits().cmp(&b.1.to_bits()))
}

/// `Σ wᵢ·θᵢ / Σ wᵢ`.
pub fn weighted_average(members: &[&ParamSet], weights: &[f64]) -> Result<ParamSet> {
    if members.is_empty() {
        return Err(Error::invalid("merge needs at least one member"));
    }
    if members.len() != weights.len() {
        return Err(Error::invalid(format!("{} members but {} weights", members.len(), weights.len())));
    }
    let first = members[0];
    for m in &members[1..] {
        if m.config != first.config || m.flat.len() != first.flat.len() {
            return Err(Error::LayoutMismatch(format!(
                "cannot merge {:?} with {:?}",
                first.config.size_tag, m.config.size_tag
            )));
        }
    }
    let total = check_weights(weights)?;
    let mut order: Vec<(&ParamSet, f64)> = members.iter().copied().zip(weights.iter().copied()).collect();
    order.sort_by(|a, b| canonical_cmp(*a, *b));
    let mut acc = vec![0f64; first.flat.len()];
    for (p, w) in &order {
        if *w == 0.0 {
            continue;
        }
        for (a, x) in acc.iter_mut().zip(&p.flat) {
            *a += w * *x as f64;
        }
    }
    Ok(ParamSet { config: first.config.clone(), flat: acc.into_iter().map(|a| (a / total) as f32).collect() })
}

pub fn uniform_average(members: &[&ParamSet]) -> Result<ParamSet> {
    weighted_average(members, &vec![1.0 / members.len().max(1) as f64; members.len()])
}

/// Per-member coefficients of the merge, in group-then-member order.
pub fn coefficients(spec: &MergeSpec) -> Result<Vec<f64>> {
    if spec.groups.is_empty() || spec.groups.iter().any(|g| g.members.is_empty()) {
        return Err(Error::invalid("merge groups must be non-empty"));
    }
    let k = spec.groups.len();
    match spec.mode {
        MergeMode::Macro => Ok(spec
            .groups
            .iter()
            .flat_map(|g| std::iter::repeat_n(1.0 / (k * g.members.len()) as f64, g.members.len()))
            .collect()),
        MergeMode::Micro => {
            let n: usize = spec.groups.iter().map(|g| g.members.len()).sum();
            Ok(vec![1.0 / n as f64; n])
        }
        MergeMode::FlatWeighted => {
            if spec.group_weights.len() != k {
                return Err(Error::invalid(format!("{k} groups but {} group weights", spec.group_weights.len())));
            }
            let gt = check_weights(&spec.group_weights)?;
            let mut out = Vec::new();
            for (g, gw) in spec.groups.iter().zip(&spec.group_weights) {
                if g.member_weights.len() != g.members.len() {
                    return Err(Error::invalid(format!("group {:?}: weights do not match members", g.group_id)));
                }
                let mt = check_weights(&g.member_weights)?;
                out.extend(g.member_weights.iter().map(|w| gw / gt * w / mt));
            }
            Ok(out)
        }
    }
}

/// Uniform within each group, then uniform across group means.
pub fn macro_merge(groups: &[Vec<&ParamSet>]) -> Result<ParamSet> {
    if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
        return Err(Error::invalid("merge groups must be non-empty"));
    }
    let k = groups.len();
    let members: Vec<&ParamSet> = groups.iter().flatten().copied().collect();
    let weights: Vec<f64> = groups
        .iter()
        .flat_map(|g| std::iter::repeat_n(1.0 / (k * g.len()) as f64, g.len()))
        .collect();
    weighted_average(&members, &weights)
}

/// Uniform over the union of all group members.
pub fn micro_merge(groups: &[Vec<&ParamSet>]) -> Result<ParamSet> {
    if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
        return Err(Error::invalid("merge groups must be non-empty"));
    }
    let members: Vec<&ParamSet> = groups.iter().flatten().copied().collect();
    uniform_average(&members)
}

/// Merged checkpoint with a zeroed optimizer state and merge provenance.
pub fn merge_checkpoints(spec: &MergeSpec) -> Result<ModelCheckpoint> {
    let weights = coefficients(spec)?;
    let members: Vec<&ModelCheckpoint> = spec.groups.iter().flat_map(|g| g.members.iter().copied()).collect();
    let params: Vec<&ParamSet> = members.iter().map(|m| &m.params).collect();
    let merged = weighted_average(&params, &weights)?;
    let seed_hashes: std::collections::BTreeSet<&str> =
        members.iter().map(|m| m.provenance.seed_checkpoint_hash.as_str()).collect();
    let mut partitions: Vec<String> = members.iter().flat_map(|m| m.provenance.trained_partition_ids.iter().cloned()).collect();
    partitions.sort();
    partitions.dedup();
    let provenance = Provenance {
        seed_checkpoint_hash: if seed_hashes.len() == 1 { seed_hashes.into_iter().next().unwrap().to_string() } else { String::new() },
        trained_partition_ids: partitions,
        tokens_trained: 0,
        schedule_used: None,
        merged: Some(MergeProvenance {
            mode: spec.mode.as_str().to_string(),
            member_hashes: members.iter().map(|m| m.content_hash()).collect(),
            weights,
        }),
    };
    Ok(ModelCheckpoint {
        config: merged.config.clone(),
        adam: AdamState::new(merged.flat.len()),
        params: merged,
        provenance,
    })
}
