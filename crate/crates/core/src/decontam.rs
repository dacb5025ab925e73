//! Paragraph-level decontamination against evaluation sets with a Bloom
//! filter.

use std::collections::BTreeSet;
use std::hash::Hasher;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use siphasher::sip::SipHasher13;

use crate::corpus::{Document, DocumentSet};
use crate::error::{Error, Result};
use crate::tokenizer::token_count;

pub const DEFAULT_MIN_PARAGRAPH_TOKENS: usize = 13;
pub const DEFAULT_TARGET_FP_RATE: f64 = 1e-3;

const SEEDS: [u64; 4] = [0x6d69_7873_6f75_7031, 0x0f1e_2d3c_4b5a_6978, 0x9e37_79b9_7f4a_7c15, 0xc2b2_ae3d_27d4_eb4f];
const MAGIC: &[u8; 8] = b"MXSBLOOM";
const VERSION: u32 = 1;

/// Blank-line-delimited blocks, each trimmed with whitespace runs collapsed
/// to single spaces.
pub fn paragraphs(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                out.push(canonicalize(&cur.join("\n")));
                cur.clear();
            }
        } else {
            cur.push(line);
        }
    }
    if !cur.is_empty() {
        out.push(canonicalize(&cur.join("\n")));
    }
    out
}

pub fn canonicalize(paragraph: &str) -> String {
    paragraph.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn qualifying(text: &str, min_tokens: usize) -> impl Iterator<Item = String> {
    paragraphs(text).into_iter().filter(move |p| token_count(p) >= min_tokens)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParagraphFilter {
    bits: Vec<u64>,
    pub size_bits: u64,
    pub hash_count: u32,
    pub min_paragraph_tokens: usize,
    pub inserted_count: u64,
    pub target_fp_rate: f64,
}

/// `m = ⌈−n ln p / ln²2⌉`, `k = round(m/n · ln 2)`.
pub fn optimal_dimensions(n: u64, target_fp_rate: f64) -> (u64, u32) {
    let n = n.max(1) as f64;
    let ln2 = std::f64::consts::LN_2;
    let m = (-n * target_fp_rate.ln() / (ln2 * ln2)).ceil().max(64.0) as u64;
    let k = ((m as f64 / n) * ln2).round().max(1.0) as u32;
    (m, k)
}

impl ParagraphFilter {
    pub fn with_dimensions(size_bits: u64, hash_count: u32, min_paragraph_tokens: usize, target_fp_rate: f64) -> Result<Self> {
        if size_bits == 0 || hash_count == 0 {
            return Err(Error::invalid("bloom filter needs size_bits > 0 and hash_count >= 1"));
        }
        if !(target_fp_rate > 0.0 && target_fp_rate < 1.0) {
            return Err(Error::invalid("target_fp_rate must lie in (0, 1)"));
        }
        Ok(ParagraphFilter {
            bits: vec![0; size_bits.div_ceil(64) as usize],
            size_bits,
            hash_count,
            min_paragraph_tokens,
            inserted_count: 0,
            target_fp_rate,
        })
    }

    fn probes(&self, paragraph: &str) -> impl Iterator<Item = u64> {
        let hash = |k0: u64, k1: u64| {
            let mut h = SipHasher13::new_with_keys(k0, k1);
            h.write(paragraph.as_bytes());
            h.finish()
        };
        let h1 = hash(SEEDS[0], SEEDS[1]);
        let h2 = hash(SEEDS[2], SEEDS[3]) | 1;
        let m = self.size_bits;
        (0..self.hash_count as u64).map(move |i| h1.wrapping_add(i.wrapping_mul(h2)) % m)
    }

    /// Inserts an already canonical paragraph.
    pub fn insert(&mut self, paragraph: &str) {
        let probes: Vec<u64> = self.probes(paragraph).collect();
        for b in probes {
            self.bits[(b / 64) as usize] |= 1 << (b % 64);
        }
        self.inserted_count += 1;
    }

    pub fn contains(&self, paragraph: &str) -> bool {
        self.probes(paragraph).all(|b| self.bits[(b / 64) as usize] & (1 << (b % 64)) != 0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(80 + 8 * self.bits.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.size_bits.to_le_bytes());
        out.extend_from_slice(&self.hash_count.to_le_bytes());
        for s in SEEDS {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&(self.min_paragraph_tokens as u64).to_le_bytes());
        out.extend_from_slice(&self.inserted_count.to_le_bytes());
        out.extend_from_slice(&self.target_fp_rate.to_le_bytes());
        for w in &self.bits {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt { path: origin.to_path_buf(), reason: reason.into() };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok_or_else(|| corrupt("short header"))? != MAGIC {
            return Err(corrupt("not a bloom filter file"));
        }
        let u64_ = |r: &mut Reader| r.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap())).ok_or_else(|| corrupt("short header"));
        let version = r.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).ok_or_else(|| corrupt("short header"))?;
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let size_bits = u64_(&mut r)?;
        let hash_count = r.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).ok_or_else(|| corrupt("short header"))?;
        for s in SEEDS {
            if u64_(&mut r)? != s {
                return Err(corrupt("hash seeds differ from this build"));
            }
        }
        let min_paragraph_tokens = u64_(&mut r)? as usize;
        let inserted_count = u64_(&mut r)?;
        let target_fp_rate = f64::from_bits(u64_(&mut r)?);
        let mut f = ParagraphFilter::with_dimensions(size_bits, hash_count, min_paragraph_tokens, target_fp_rate)
            .map_err(|e| corrupt(&e.to_string()))?;
        f.inserted_count = inserted_count;
        if r.bytes.len() - r.pos != 8 * f.bits.len() {
            return Err(corrupt("bit array length mismatch"));
        }
        for w in f.bits.iter_mut() {
            *w = u64_(&mut r)?;
        }
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
}

/// Filter over every distinct qualifying paragraph of the evaluation set.
pub fn build_eval_filter(eval_docs: &DocumentSet, min_paragraph_tokens: usize, target_fp_rate: f64) -> Result<ParagraphFilter> {
    let distinct: BTreeSet<String> =
        eval_docs.documents().iter().flat_map(|d| qualifying(&d.text, min_paragraph_tokens)).collect();
    let (m, k) = optimal_dimensions(distinct.len() as u64, target_fp_rate);
    let mut f = ParagraphFilter::with_dimensions(m, k, min_paragraph_tokens, target_fp_rate)?;
    for p in &distinct {
        f.insert(p);
    }
    Ok(f)
}

pub fn is_contaminated(doc: &Document, filter: &ParagraphFilter) -> bool {
    qualifying(&doc.text, filter.min_paragraph_tokens).any(|p| filter.contains(&p))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecontamReport {
    pub kept: usize,
    pub excluded: usize,
    pub excluded_ids: Vec<String>,
}

pub fn decontaminate(docs: &DocumentSet, filter: &ParagraphFilter) -> Result<(DocumentSet, DecontamReport)> {
    let mut kept = Vec::with_capacity(docs.len());
    let mut excluded_ids = Vec::new();
    for d in docs.documents() {
        if is_contaminated(d, filter) {
            excluded_ids.push(d.id.clone());
        } else {
            kept.push(d.clone());
        }
    }
    let report = DecontamReport { kept: kept.len(), excluded: excluded_ids.len(), excluded_ids };
    Ok((DocumentSet::from_shared(kept)?, report))
}
