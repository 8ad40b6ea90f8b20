//! Little-endian labeled-feature record files.
//!
//! Layout: magic `MRID`, `u32 dim`, `u32 count`, then `count` records of
//! `dim × f32` features, `u32` label and `u64` batch sequence number. Used
//! for key dictionary snapshots and synthetic dataset dumps.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::types::IdentityLabel;

pub const RECORD_MAGIC: &[u8; 4] = b"MRID";

/// Decoded contents of a record file.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordSet {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<IdentityLabel>,
    pub batch_seqs: Vec<u64>,
}

impl RecordSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn write_records<'a, W, I>(mut w: W, dim: usize, count: usize, records: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a [f64], IdentityLabel, u64)>,
{
    let dim32 = u32::try_from(dim).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
    let count32 = u32::try_from(count).map_err(|_| Error::Format("record count exceeds u32".into()))?;
    w.write_all(RECORD_MAGIC)?;
    w.write_all(&dim32.to_le_bytes())?;
    w.write_all(&count32.to_le_bytes())?;
    let mut written = 0usize;
    for (row, label, seq) in records {
        if row.len() != dim {
            return Err(Error::Format(format!("record of width {} in a {dim}-dim file", row.len())));
        }
        for &v in row {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.write_all(&label.0.to_le_bytes())?;
        w.write_all(&seq.to_le_bytes())?;
        written += 1;
    }
    if written != count {
        return Err(Error::Format(format!("header promised {count} records, wrote {written}")));
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated record file".into()),
        _ => e.into(),
    })?;
    Ok(buf)
}

pub fn read_records(mut r: impl Read) -> Result<RecordSet> {
    let magic: [u8; 4] = read_array(&mut r)?;
    if &magic != RECORD_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let dim = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let count = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let mut features = Vec::with_capacity(dim.saturating_mul(count).min(1 << 24));
    let mut labels = Vec::with_capacity(count.min(1 << 20));
    let mut batch_seqs = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        for _ in 0..dim {
            let v = f32::from_le_bytes(read_array(&mut r)?);
            if !v.is_finite() {
                return Err(Error::Format("non-finite feature value".into()));
            }
            features.push(f64::from(v));
        }
        labels.push(IdentityLabel(u32::from_le_bytes(read_array(&mut r)?)));
        batch_seqs.push(u64::from_le_bytes(read_array(&mut r)?));
    }
    Ok(RecordSet { dim, features, labels, batch_seqs })
}
