//! Gaussian-cluster identity datasets.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::records::{read_records, write_records};
use crate::types::{EmbeddingMatrix, IdentityLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_ids: usize,
    pub samples_per_id: usize,
    pub input_dim: usize,
    /// Identity centers are uniform in `[−center_scale, center_scale]^dim`.
    pub center_scale: f64,
    /// Per-sample isotropic Gaussian noise.
    pub noise_sigma: f64,
    /// Extra columns of pure noise appended after the `input_dim` identity
    /// columns; they carry no identity information.
    pub nuisance_dims: usize,
    pub nuisance_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_ids: 64,
            samples_per_id: 32,
            input_dim: 16,
            center_scale: 1.0,
            noise_sigma: 0.5,
            nuisance_dims: 0,
            nuisance_sigma: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 2 || self.samples_per_id < 2 {
            return Err(invalid("synthetic data needs at least 2 identities with 2 samples each"));
        }
        if self.input_dim == 0 {
            return Err(invalid("input_dim must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid("noise_sigma must be finite and non-negative"));
        }
        if !(self.nuisance_sigma >= 0.0 && self.nuisance_sigma.is_finite()) {
            return Err(invalid("nuisance_sigma must be finite and non-negative"));
        }
        if !(self.center_scale >= 0.0 && self.center_scale.is_finite()) {
            return Err(invalid("center_scale must be finite and non-negative"));
        }
        Ok(())
    }

    /// Width of a generated sample.
    pub fn total_dim(&self) -> usize {
        self.input_dim + self.nuisance_dims
    }
}

/// Labeled inputs, identity-major (all samples of identity 0 first).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: EmbeddingMatrix,
    pub labels: Vec<IdentityLabel>,
    pub num_ids: usize,
}

impl Dataset {
    pub fn new(inputs: EmbeddingMatrix, labels: Vec<IdentityLabel>, num_ids: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(invalid("dataset inputs and labels differ in length"));
        }
        if let Some(l) = labels.iter().find(|l| l.index() >= num_ids) {
            return Err(invalid(format!("{l} out of range for {num_ids} identities")));
        }
        Ok(Self { inputs, labels, num_ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Row indices of each identity, in row order.
    pub fn rows_by_identity(&self) -> Vec<Vec<usize>> {
        let mut by_id = vec![Vec::new(); self.num_ids];
        for (i, l) in self.labels.iter().enumerate() {
            by_id[l.index()].push(i);
        }
        by_id
    }

    /// Moves the last `held_out_per_id` samples of every identity into a
    /// second dataset.
    pub fn split_per_identity(&self, held_out_per_id: usize) -> Result<(Dataset, Dataset)> {
        let mut keep = Vec::new();
        let mut held = Vec::new();
        for rows in self.rows_by_identity() {
            if rows.len() <= held_out_per_id {
                return Err(invalid(format!(
                    "cannot hold out {held_out_per_id} of an identity with {} samples",
                    rows.len()
                )));
            }
            let cut = rows.len() - held_out_per_id;
            keep.extend_from_slice(&rows[..cut]);
            held.extend_from_slice(&rows[cut..]);
        }
        keep.sort_unstable();
        held.sort_unstable();
        let part = |idx: &[usize]| Dataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_ids: self.num_ids,
        };
        Ok((part(&keep), part(&held)))
    }

    /// Writes the `MRID` record layout with batch sequence 0.
    pub fn write_to(&self, w: impl Write) -> Result<()> {
        write_records(
            w,
            self.inputs.dim(),
            self.len(),
            self.inputs.iter_rows().zip(&self.labels).map(|(r, &l)| (r, l, 0u64)),
        )
    }

    /// Reads a dump; the identity count is one past the largest label.
    pub fn read_from(r: impl Read) -> Result<Self> {
        let rec = read_records(r)?;
        let num_ids = rec.labels.iter().map(|l| l.index() + 1).max().unwrap_or(0);
        let rows = rec.len();
        Self::new(EmbeddingMatrix::new(rows, rec.dim, rec.features)?, rec.labels, num_ids)
    }
}

/// Draws one center per identity, then `samples_per_id` noisy copies of it.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = cfg.input_dim;
    let centers: Vec<f64> = (0..cfg.num_ids * dim)
        .map(|_| if cfg.center_scale > 0.0 { rng.random_range(-cfg.center_scale..=cfg.center_scale) } else { 0.0 })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| invalid(e.to_string()))?;
    let nuisance = Normal::new(0.0, cfg.nuisance_sigma).map_err(|e| invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(cfg.num_ids * cfg.samples_per_id * cfg.total_dim());
    let mut labels = Vec::with_capacity(cfg.num_ids * cfg.samples_per_id);
    for id in 0..cfg.num_ids {
        let c = &centers[id * dim..(id + 1) * dim];
        for _ in 0..cfg.samples_per_id {
            data.extend(c.iter().map(|v| v + noise.sample(&mut rng)));
            data.extend((0..cfg.nuisance_dims).map(|_| nuisance.sample(&mut rng)));
            labels.push(IdentityLabel(id as u32));
        }
    }
    Dataset::new(EmbeddingMatrix::new(labels.len(), cfg.total_dim(), data)?, labels, cfg.num_ids)
}
