//! Byte-level tokenization and fixed-length sequence packing.
//!
//! Ids `0..256` are raw byte values. Two special ids follow: [`END_OF_DOC`]
//! separates packed documents and [`PAD`] fills the tail of the last row.
//! Neither can be produced by [`encode`].

pub const BYTE_VOCAB: usize = 256;
pub const END_OF_DOC: u32 = 256;
pub const PAD: u32 = 257;
pub const VOCAB_SIZE: usize = 258;

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Inverse of [`encode`]. Special ids are dropped; invalid UTF-8 (which
/// cannot arise from `encode`) is replaced lossily.
pub fn decode(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|&&id| (id as usize) < BYTE_VOCAB)
        .map(|&id| id as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Number of tokens `text` encodes to.
pub fn token_count(text: &str) -> usize {
    text.len()
}

/// A `[rows, seq_len]` block of packed token ids with its loss mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBatch {
    pub seq_len: usize,
    pub token_ids: Vec<u32>,
    pub loss_mask: Vec<u8>,
}

impl PackedBatch {
    pub fn new(seq_len: usize) -> Self {
        PackedBatch { seq_len, token_ids: Vec::new(), loss_mask: Vec::new() }
    }

    pub fn rows(&self) -> usize {
        if self.seq_len == 0 {
            0
        } else {
            self.token_ids.len() / self.seq_len
        }
    }

    pub fn row(&self, r: usize) -> (&[u32], &[u8]) {
        let span = r * self.seq_len..(r + 1) * self.seq_len;
        (&self.token_ids[span.clone()], &self.loss_mask[span])
    }

    pub fn push_row(&mut self, ids: &[u32], mask: &[u8]) {
        debug_assert_eq!(ids.len(), self.seq_len);
        debug_assert_eq!(mask.len(), self.seq_len);
        self.token_ids.extend_from_slice(ids);
        self.loss_mask.extend_from_slice(mask);
    }

    /// Count of positions with mask 1.
    pub fn unmasked_tokens(&self) -> u64 {
        self.loss_mask.iter().filter(|&&m| m == 1).count() as u64
    }
}

/// Concatenates documents with [`END_OF_DOC`] separators and cuts the result
/// into rows of exactly `seq_len`, grouped `rows_per_batch` at a time.
///
/// The final row is PAD-filled (mask 0 on PAD) and the final batch may hold
/// fewer rows.
pub struct Packer<I> {
    docs: I,
    seq_len: usize,
    rows_per_batch: usize,
    pending: Vec<u32>,
    exhausted: bool,
}

pub fn pack_sequences<I, D>(docs: I, seq_len: usize, rows_per_batch: usize) -> Packer<I::IntoIter>
where
    I: IntoIterator<Item = D>,
    D: AsRef<[u32]>,
{
    assert!(seq_len >= 2, "seq_len must be at least 2");
    assert!(rows_per_batch >= 1, "rows_per_batch must be at least 1");
    Packer {
        docs: docs.into_iter(),
        seq_len,
        rows_per_batch,
        pending: Vec::new(),
        exhausted: false,
    }
}

impl<I, D> Packer<I>
where
    I: Iterator<Item = D>,
    D: AsRef<[u32]>,
{
    fn fill(&mut self, want: usize) {
        while !self.exhausted && self.pending.len() < want {
            match self.docs.next() {
                Some(doc) => {
                    self.pending.extend_from_slice(doc.as_ref());
                    self.pending.push(END_OF_DOC);
                }
                None => self.exhausted = true,
            }
        }
    }
}

impl<I, D> Iterator for Packer<I>
where
    I: Iterator<Item = D>,
    D: AsRef<[u32]>,
{
    type Item = PackedBatch;

    fn next(&mut self) -> Option<PackedBatch> {
        let mut batch = PackedBatch::new(self.seq_len);
        let mut offset = 0;
        let mut mask = vec![1u8; self.seq_len];
        let mut ids = vec![PAD; self.seq_len];
        while batch.rows() < self.rows_per_batch {
            self.fill(offset + self.seq_len);
            let avail = self.pending.len() - offset;
            if avail == 0 {
                break;
            }
            let take = avail.min(self.seq_len);
            ids[..take].copy_from_slice(&self.pending[offset..offset + take]);
            ids[take..].fill(PAD);
            mask[..take].fill(1);
            mask[take..].fill(0);
            batch.push_row(&ids, &mask);
            offset += take;
        }
        self.pending.drain(..offset);
        if batch.rows() == 0 {
            None
        } else {
            Some(batch)
        }
    }
}
