//! Fixed-capacity FIFO dictionary of encoded keys and their identities.
//!
//! Every entry carries the sequence number of the batch that enqueued it.
//! Entries from the latest batch are *current*; everything older is *past*.
//! [`KeyDictionary::label`] splits the dictionary for one query: every
//! entry with another identity is a negative, but only current entries with
//! the query's identity are positives. Past same-identity entries are left
//! out entirely unless the past-positive ablation is switched on.

use std::io::{Read, Write};
use std::ops::Range;

use crate::error::{check_dim, invalid, Result};
use crate::records::{read_records, write_records};
use crate::types::{EmbeddingMatrix, IdentityLabel};

#[derive(Debug, Clone, PartialEq)]
pub struct KeyDictionary {
    capacity: usize,
    dim: usize,
    // ring storage, `capacity` slots
    features: Vec<f64>,
    labels: Vec<IdentityLabel>,
    batch_seqs: Vec<u64>,
    head: usize,
    len: usize,
    next_seq: u64,
}

/// Positive and negative keys for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSets {
    pub positives: EmbeddingMatrix,
    pub negatives: EmbeddingMatrix,
    /// Logical dictionary indices (0 = oldest) of the positives.
    pub positive_indices: Vec<usize>,
    pub negative_indices: Vec<usize>,
    /// Past entries sharing the query's identity that were left out.
    pub excluded_past: usize,
}

impl KeyDictionary {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(invalid("dictionary capacity and dimension must be positive"));
        }
        Ok(Self {
            capacity,
            dim,
            features: vec![0.0; capacity * dim],
            labels: vec![IdentityLabel(0); capacity],
            batch_seqs: vec![0; capacity],
            head: 0,
            len: 0,
            next_seq: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Sequence number of the most recent batch, if any.
    pub fn current_seq(&self) -> Option<u64> {
        self.next_seq.checked_sub(1).filter(|_| self.len > 0)
    }

    fn slot(&self, i: usize) -> usize {
        (self.head + i) % self.capacity
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        let s = self.slot(i);
        &self.features[s * self.dim..(s + 1) * self.dim]
    }

    pub fn label_at(&self, i: usize) -> IdentityLabel {
        self.labels[self.slot(i)]
    }

    pub fn batch_seq_at(&self, i: usize) -> u64 {
        self.batch_seqs[self.slot(i)]
    }

    pub fn is_current(&self, i: usize) -> bool {
        i < self.len && Some(self.batch_seq_at(i)) == self.current_seq()
    }

    /// Appends a batch as the new current batch, evicting the oldest entries
    /// once full. Returns the logical indices of the new entries.
    pub fn enqueue_batch(&mut self, keys: &EmbeddingMatrix, labels: &[IdentityLabel]) -> Result<Range<usize>> {
        if keys.rows() != labels.len() {
            return Err(invalid(format!("{} keys but {} labels", keys.rows(), labels.len())));
        }
        if keys.rows() > self.capacity {
            return Err(invalid(format!(
                "batch of {} exceeds dictionary capacity {}",
                keys.rows(),
                self.capacity
            )));
        }
        if keys.is_empty() {
            return Err(invalid("cannot enqueue an empty batch"));
        }
        check_dim(self.dim, keys.dim())?;
        let seq = self.next_seq;
        self.next_seq += 1;
        for (row, &label) in keys.iter_rows().zip(labels) {
            if self.len == self.capacity {
                self.head = (self.head + 1) % self.capacity;
                self.len -= 1;
            }
            let s = self.slot(self.len);
            self.features[s * self.dim..(s + 1) * self.dim].copy_from_slice(row);
            self.labels[s] = label;
            self.batch_seqs[s] = seq;
            self.len += 1;
        }
        Ok(self.len - keys.rows()..self.len)
    }

    /// Splits the dictionary into positives and negatives for the query
    /// stored at `query_entry_index`, which must be a current entry.
    pub fn label(
        &self,
        query_label: IdentityLabel,
        query_entry_index: usize,
        include_past_positives: bool,
    ) -> Result<LabeledSets> {
        if query_entry_index >= self.len {
            return Err(invalid(format!(
                "query entry {query_entry_index} out of range for {} entries",
                self.len
            )));
        }
        if !self.is_current(query_entry_index) {
            return Err(invalid(format!("query entry {query_entry_index} is not in the current batch")));
        }
        if self.label_at(query_entry_index) != query_label {
            return Err(invalid(format!(
                "query entry {query_entry_index} holds {}, not {query_label}",
                self.label_at(query_entry_index)
            )));
        }
        let current = self.current_seq();
        let mut positive_indices = Vec::new();
        let mut negative_indices = Vec::new();
        let mut excluded_past = 0;
        for i in 0..self.len {
            if i == query_entry_index {
                continue;
            }
            if self.label_at(i) != query_label {
                negative_indices.push(i);
            } else if include_past_positives || Some(self.batch_seq_at(i)) == current {
                positive_indices.push(i);
            } else {
                excluded_past += 1;
            }
        }
        Ok(LabeledSets {
            positives: self.gather(&positive_indices),
            negatives: self.gather(&negative_indices),
            positive_indices,
            negative_indices,
            excluded_past,
        })
    }

    /// Copies the given logical entries into a matrix.
    pub fn gather(&self, indices: &[usize]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.feature(i));
        }
        EmbeddingMatrix::from_raw(indices.len(), self.dim, data)
    }

    /// All entries, oldest first.
    pub fn features(&self) -> EmbeddingMatrix {
        self.gather(&(0..self.len).collect::<Vec<_>>())
    }

    pub fn labels(&self) -> Vec<IdentityLabel> {
        (0..self.len).map(|i| self.label_at(i)).collect()
    }

    /// Writes the `MRID` snapshot; features are narrowed to `f32`.
    pub fn write_snapshot(&self, w: impl Write) -> Result<()> {
        write_records(
            w,
            self.dim,
            self.len,
            (0..self.len).map(|i| (self.feature(i), self.label_at(i), self.batch_seq_at(i))),
        )
    }

    /// Rebuilds a dictionary from a snapshot. Batch sequence numbers are kept,
    /// so the newest batch in the file is current again.
    pub fn read_snapshot(r: impl Read, capacity: usize) -> Result<Self> {
        let rec = read_records(r)?;
        if rec.len() > capacity {
            return Err(invalid(format!("snapshot holds {} entries, capacity {capacity}", rec.len())));
        }
        let mut dict = Self::new(capacity, rec.dim)?;
        for (i, (&label, &seq)) in rec.labels.iter().zip(&rec.batch_seqs).enumerate() {
            dict.features[i * rec.dim..(i + 1) * rec.dim].copy_from_slice(&rec.features[i * rec.dim..(i + 1) * rec.dim]);
            dict.labels[i] = label;
            dict.batch_seqs[i] = seq;
        }
        dict.len = rec.len();
        dict.next_seq = rec.batch_seqs.iter().max().map_or(0, |m| m + 1);
        Ok(dict)
    }
}
