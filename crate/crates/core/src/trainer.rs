//! Momentum-dictionary training loop.
//!
//! One step:
//! 1. encode the batch with the main encoder (queries) and the EMA encoder (keys);
//! 2. enqueue the keys and their identities into the dictionary;
//! 3. label the dictionary for every query and evaluate the metric loss;
//! 4. backpropagate through the main encoder only;
//! 5. SGD with momentum and weight decay;
//! 6. move the EMA encoder toward the main encoder.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    infonce_loss_grad, npair_loss_grad, ranked_list_loss_grad, triplet_loss_grad, InfoNceConfig, InfoNceVariant,
    LossAndGrad, RankedListConfig, TripletConfig, TripletMining,
};
use crate::dictionary::{KeyDictionary, LabeledSets};
use crate::encoder::{ema_update, id_cross_entropy, EncoderArch, EncoderParams, MomentumConfig};
use crate::error::{invalid, Error, Result};
use crate::he_loss::{he_loss_gradient, he_loss_per_query};
use crate::synth::Dataset;
use crate::types::{EmbeddingMatrix, GroupedBatch, Metric};

/// Named sub-streams of the experiment seed.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SAMPLER: u64 = 3;
    pub const NOISE: u64 = 4;
}

/// Independent generator for one named stream of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    stream_rng(seed, stream).next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    He,
    TriAll,
    TriHard,
    NPair,
    RankedList,
    InfoNce { variant: InfoNceVariant, hard_mining: bool },
}

impl LossKind {
    pub const NAMES: &'static [&'static str] = &[
        "he",
        "tri_all",
        "tri_hard",
        "npair",
        "ranked_list",
        "infonce",
        "infonce_hard",
        "infonce_in",
        "infonce_in_hard",
        "infonce_out",
        "infonce_out_hard",
    ];
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let info = |variant, hard_mining| LossKind::InfoNce { variant, hard_mining };
        Ok(match s {
            "he" => LossKind::He,
            "tri_all" => LossKind::TriAll,
            "tri_hard" => LossKind::TriHard,
            "npair" => LossKind::NPair,
            "ranked_list" => LossKind::RankedList,
            "infonce" => info(InfoNceVariant::Single, false),
            "infonce_hard" => info(InfoNceVariant::Single, true),
            "infonce_in" => info(InfoNceVariant::MultiIn, false),
            "infonce_in_hard" => info(InfoNceVariant::MultiIn, true),
            "infonce_out" => info(InfoNceVariant::MultiOut, false),
            "infonce_out_hard" => info(InfoNceVariant::MultiOut, true),
            other => return Err(invalid(format!("unknown loss '{other}'"))),
        })
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LossKind::He => "he",
            LossKind::TriAll => "tri_all",
            LossKind::TriHard => "tri_hard",
            LossKind::NPair => "npair",
            LossKind::RankedList => "ranked_list",
            LossKind::InfoNce { variant, hard_mining } => match (variant, hard_mining) {
                (InfoNceVariant::Single, false) => "infonce",
                (InfoNceVariant::Single, true) => "infonce_hard",
                (InfoNceVariant::MultiIn, false) => "infonce_in",
                (InfoNceVariant::MultiIn, true) => "infonce_in_hard",
                (InfoNceVariant::MultiOut, false) => "infonce_out",
                (InfoNceVariant::MultiOut, true) => "infonce_out_hard",
            },
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub groups: usize,
    pub per_group: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub sgd_momentum: f64,
    pub dict_capacity: usize,
    pub ema_momentum: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub include_past_positives: bool,
    pub metric: Metric,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    /// Adds the identity cross-entropy term to the metric loss.
    pub id_loss: bool,
    /// Weight decay on biases as well as weights.
    pub decay_biases: bool,
    pub triplet_margin: f64,
    pub ranked_alpha: f64,
    pub ranked_beta: f64,
    pub infonce_temperature: f64,
    /// Mined negatives for N-pair and hard-mined InfoNCE.
    pub hard_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            groups: 16,
            per_group: 16,
            base_lr: 0.01,
            weight_decay: 0.0005,
            sgd_momentum: 0.9,
            dict_capacity: 1024,
            ema_momentum: 0.997,
            seed: 0,
            loss: LossKind::He,
            include_past_positives: false,
            metric: Metric::Euclidean,
            hidden_dims: vec![64],
            embed_dim: 32,
            id_loss: true,
            decay_biases: false,
            triplet_margin: 0.3,
            ranked_alpha: 1.2,
            ranked_beta: 0.4,
            infonce_temperature: 0.07,
            hard_count: 15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups < 2 || self.per_group < 2 {
            return Err(invalid("batches need at least 2 groups of 2"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(invalid("base_lr must be positive"));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(invalid("weight_decay must be >= 0 and sgd_momentum in [0, 1)"));
        }
        MomentumConfig::new(self.ema_momentum)?;
        if self.dict_capacity < self.batch_size() {
            return Err(invalid(format!(
                "dictionary capacity {} is smaller than the batch of {}",
                self.dict_capacity,
                self.batch_size()
            )));
        }
        if self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(invalid("layer widths must be positive"));
        }
        if let LossKind::InfoNce { variant: InfoNceVariant::Single, .. } = self.loss {
            if self.per_group != 2 && !self.include_past_positives {
                return Err(invalid("single-positive InfoNCE needs per_group = 2"));
            }
            if self.include_past_positives {
                return Err(invalid("single-positive InfoNCE cannot use past positives"));
            }
        }
        self.triplet_config().margin.ge(&0.0).then_some(()).ok_or_else(|| invalid("margin must be >= 0"))?;
        if !(self.ranked_alpha > self.ranked_beta && self.ranked_beta >= 0.0) {
            return Err(invalid("ranked list needs alpha > beta >= 0"));
        }
        if self.infonce_temperature.is_nan() || self.infonce_temperature <= 0.0 || self.hard_count == 0 {
            return Err(invalid("InfoNCE needs temperature > 0 and hard_count >= 1"));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.groups * self.per_group
    }

    /// Full batches per epoch; the remainder is dropped.
    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len / self.batch_size()
    }

    fn triplet_config(&self) -> TripletConfig {
        let mining = if self.loss == LossKind::TriAll { TripletMining::All } else { TripletMining::Hard };
        TripletConfig { margin: self.triplet_margin, mining }
    }
}

/// Constant `base_lr` for the first half, then a cosine decay that reaches
/// zero at `step == total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let half = total_steps as f64 / 2.0;
    let s = step.min(total_steps) as f64;
    if s < half {
        base_lr
    } else {
        base_lr * 0.5 * (1.0 + (std::f64::consts::PI * (s - half) / half).cos())
    }
}

/// Reference learning rate for a dataset of `size` samples: grows with
/// `log(size)`, anchored at 0 for 4·10³ samples and 0.02 for 3·10⁵.
pub fn optimal_lr_for_size(size: f64) -> Result<f64> {
    const LOW: f64 = 4e3;
    const HIGH: f64 = 3e5;
    if size.is_nan() || size <= LOW || !size.is_finite() {
        return Err(Error::OutOfDomain { what: "optimal_lr_for_size (needs size > 4000)", value: size });
    }
    Ok(0.02 * (size.ln() - LOW.ln()) / (HIGH.ln() - LOW.ln()))
}

/// Draws `groups` distinct identities and `per_group` distinct samples of each.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    groups: usize,
    per_group: usize,
    rng: &mut R,
) -> Result<GroupedBatch> {
    let by_id = dataset.rows_by_identity();
    let eligible: Vec<usize> = (0..by_id.len()).filter(|&i| by_id[i].len() >= per_group).collect();
    if eligible.len() < groups {
        return Err(invalid(format!(
            "need {groups} identities with {per_group} samples, dataset has {}",
            eligible.len()
        )));
    }
    let mut rows = Vec::with_capacity(groups * per_group);
    for pick in sample(rng, eligible.len(), groups) {
        let id_rows = &by_id[eligible[pick]];
        rows.extend(sample(rng, id_rows.len(), per_group).into_iter().map(|j| id_rows[j]));
    }
    let labels = rows.iter().map(|&r| dataset.labels[r]).collect();
    GroupedBatch::new(dataset.inputs.select_rows(&rows), labels, groups, per_group)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_biases: bool,
}

/// `v ← μ·v + g + λ·θ`, `θ ← θ − lr·v`, elementwise. Decay applies to
/// weights only unless `decay_biases` is set.
pub fn sgd_update(
    params: &mut EncoderParams,
    velocity: &mut EncoderParams,
    grads: &EncoderParams,
    lr: f64,
    cfg: SgdConfig,
) -> Result<()> {
    if !params.same_shape(velocity) || !params.same_shape(grads) {
        return Err(invalid("SGD tensors differ in shape"));
    }
    for (((is_weight, theta), (_, v)), (_, g)) in params.tensors_mut().zip(velocity.tensors_mut()).zip(grads.tensors()) {
        let decay = if is_weight || cfg.decay_biases { cfg.weight_decay } else { 0.0 };
        for i in 0..theta.len() {
            v[i] = cfg.momentum * v[i] + g[i] + decay * theta[i];
            theta[i] -= lr * v[i];
        }
    }
    Ok(())
}

/// Value and query gradient of the configured metric loss for one query.
/// N-pair mines `min(hard_count, |negatives|)` negatives.
pub fn metric_loss(
    cfg: &TrainConfig,
    q: &[f64],
    pos: &EmbeddingMatrix,
    neg: &EmbeddingMatrix,
) -> Result<LossAndGrad> {
    match cfg.loss {
        LossKind::He => {
            let g = he_loss_gradient(q, pos, neg, cfg.metric)?;
            Ok(LossAndGrad { loss: g.boundary.loss, query_grad: g.query })
        }
        LossKind::TriAll | LossKind::TriHard => triplet_loss_grad(q, pos, neg, &cfg.triplet_config(), cfg.metric),
        LossKind::NPair => npair_loss_grad(q, pos, neg, cfg.hard_count.min(neg.rows())),
        LossKind::RankedList => {
            let rl = RankedListConfig { alpha: cfg.ranked_alpha, beta: cfg.ranked_beta };
            ranked_list_loss_grad(q, pos, neg, &rl, cfg.metric)
        }
        LossKind::InfoNce { variant, hard_mining } => {
            let ic = InfoNceConfig { temperature: cfg.infonce_temperature, variant, hard_mining, hard_count: cfg.hard_count };
            infonce_loss_grad(q, pos, neg, &ic)
        }
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean HE loss over the batch's queries (reported for every loss kind).
    pub loss_he: f64,
    pub loss_id: f64,
    pub grad_norm: f64,
    /// Mean value of the configured metric loss.
    pub loss_metric: f64,
    /// Queries whose metric term was dropped this step.
    pub skipped_queries: usize,
}

impl StepMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

struct QueryTerm {
    he: f64,
    metric: LossAndGrad,
    skipped: bool,
}

pub struct Trainer {
    cfg: TrainConfig,
    pub main: EncoderParams,
    pub ema: EncoderParams,
    velocity: EncoderParams,
    pub dict: KeyDictionary,
    sampler_rng: ChaCha8Rng,
    step: usize,
    steps_per_epoch: usize,
    total_steps: usize,
}

impl Trainer {
    /// Fresh state: initialized main encoder, an identical EMA copy and an
    /// empty dictionary.
    pub fn new(cfg: TrainConfig, input_dim: usize, num_ids: usize, dataset_len: usize) -> Result<Self> {
        cfg.validate()?;
        let arch = EncoderArch { input_dim, hidden: cfg.hidden_dims.clone(), embed_dim: cfg.embed_dim, num_ids };
        let main = EncoderParams::init(&arch, &mut stream_rng(cfg.seed, streams::INIT))?;
        let steps_per_epoch = cfg.steps_per_epoch(dataset_len);
        if steps_per_epoch == 0 {
            return Err(invalid(format!("dataset of {dataset_len} rows is smaller than one batch")));
        }
        Ok(Self {
            ema: main.clone(),
            velocity: main.zeros_like(),
            dict: KeyDictionary::new(cfg.dict_capacity, cfg.embed_dim)?,
            sampler_rng: stream_rng(cfg.seed, streams::SAMPLER),
            total_steps: steps_per_epoch * cfg.epochs,
            steps_per_epoch,
            step: 0,
            main,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn sample(&mut self, dataset: &Dataset) -> Result<GroupedBatch> {
        sample_batch(dataset, self.cfg.groups, self.cfg.per_group, &mut self.sampler_rng)
    }

    /// One full step at the scheduled learning rate.
    pub fn train_step(&mut self, batch: &GroupedBatch) -> Result<StepMetrics> {
        let lr = lr_schedule(self.step, self.total_steps, self.cfg.base_lr);
        self.train_step_with_lr(batch, lr)
    }

    pub fn train_step_with_lr(&mut self, batch: &GroupedBatch, lr: f64) -> Result<StepMetrics> {
        let metrics = self.update_main(batch, lr)?;
        ema_update(&mut self.ema, &self.main, MomentumConfig::new(self.cfg.ema_momentum)?)?;
        Ok(metrics)
    }

    /// Stages 1–5 of a step: everything except the EMA update.
    pub(crate) fn update_main(&mut self, batch: &GroupedBatch, lr: f64) -> Result<StepMetrics> {
        let pass = self.main.forward(batch.features())?;
        let keys = self.ema.encode(batch.features())?;
        let entries = self.dict.enqueue_batch(&keys, batch.labels())?;

        let b = batch.len();
        let queries = &pass.embeddings;
        let terms: Vec<QueryTerm> = (0..b)
            .into_par_iter()
            .map(|i| {
                let sets = self.dict.label(batch.labels()[i], entries.start + i, self.cfg.include_past_positives)?;
                self.query_term(queries.row(i), &sets, i)
            })
            .collect::<Result<_>>()?;

        let inv_b = 1.0 / b as f64;
        let mut grad_emb = EmbeddingMatrix::zeros(b, queries.dim());
        let (mut loss_he, mut loss_metric, mut skipped) = (0.0, 0.0, 0usize);
        for (i, t) in terms.iter().enumerate() {
            loss_he += t.he;
            loss_metric += t.metric.loss;
            skipped += usize::from(t.skipped);
            grad_emb.row_mut(i).iter_mut().zip(&t.metric.query_grad).for_each(|(g, v)| *g = v * inv_b);
        }

        let mut loss_id = 0.0;
        let grad_logits = if self.cfg.id_loss {
            let mut gl = EmbeddingMatrix::zeros(b, self.main.num_ids());
            for i in 0..b {
                let (l, g) = id_cross_entropy(pass.logits.row(i), batch.labels()[i])?;
                loss_id += l;
                gl.row_mut(i).iter_mut().zip(g).for_each(|(a, v)| *a = v * inv_b);
            }
            loss_id *= inv_b;
            Some(gl)
        } else {
            None
        };

        let grads = self.main.backward(&pass, &grad_emb, grad_logits.as_ref())?;
        let sgd = SgdConfig {
            momentum: self.cfg.sgd_momentum,
            weight_decay: self.cfg.weight_decay,
            decay_biases: self.cfg.decay_biases,
        };
        sgd_update(&mut self.main, &mut self.velocity, &grads, lr, sgd)?;
        if self.main.tensors().any(|(_, t)| t.iter().any(|v| !v.is_finite())) {
            return Err(invalid(format!("parameters diverged at step {}", self.step)));
        }

        let metrics = StepMetrics {
            step: self.step,
            epoch: self.step / self.steps_per_epoch,
            lr,
            loss_he: loss_he * inv_b,
            loss_id,
            grad_norm: grads.l2_norm(),
            loss_metric: loss_metric * inv_b,
            skipped_queries: skipped,
        };
        self.step += 1;
        Ok(metrics)
    }

    fn query_term(&self, q: &[f64], sets: &LabeledSets, i: usize) -> Result<QueryTerm> {
        let zero = || LossAndGrad { loss: 0.0, query_grad: vec![0.0; q.len()] };
        if sets.positives.is_empty() || sets.negatives.is_empty() {
            return Ok(QueryTerm { he: 0.0, metric: zero(), skipped: true });
        }
        let he = he_loss_per_query(q, &sets.positives, &sets.negatives, self.cfg.metric)?.loss;
        match metric_loss(&self.cfg, q, &sets.positives, &sets.negatives) {
            Ok(m) => Ok(QueryTerm { he, metric: m, skipped: false }),
            Err(Error::DegenerateGeometry { .. }) => {
                // retry once with the query nudged by uniform noise of 1e-8
                let mut rng = stream_rng(self.cfg.seed ^ (self.step as u64).rotate_left(20) ^ i as u64, streams::NOISE);
                let nudged: Vec<f64> = q.iter().map(|v| v + rng.random_range(-1e-8..1e-8)).collect();
                match metric_loss(&self.cfg, &nudged, &sets.positives, &sets.negatives) {
                    Ok(m) => Ok(QueryTerm { he, metric: m, skipped: false }),
                    Err(Error::DegenerateGeometry { .. }) => {
                        warn!("step {}: query {i} coincides with a hard key; metric term skipped", self.step);
                        Ok(QueryTerm { he, metric: zero(), skipped: true })
                    }
                    Err(e) => Err(e),
                }
            }
            Err(e) => Err(e),
        }
    }

    /// Trains for the configured number of epochs, calling `on_step` after
    /// every step.
    pub fn run(&mut self, dataset: &Dataset, mut on_step: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        if dataset.inputs.dim() != self.main.input_dim() {
            return Err(invalid("dataset width differs from the encoder input"));
        }
        let mut all = Vec::with_capacity(self.total_steps);
        while self.step < self.total_steps {
            let batch = self.sample(dataset)?;
            let m = self.train_step(&batch)?;
            on_step(&m);
            all.push(m);
        }
        Ok(all)
    }
}
