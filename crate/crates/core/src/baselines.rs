//! Comparison losses: triplet (all / hard mining), N-pair, Ranked List and
//! InfoNCE with its two multi-positive forms.
//!
//! Each loss has a scalar entry point over precomputed distances or
//! similarities and a `*_grad` entry point over embeddings that also returns
//! the gradient with respect to the query. Keys are treated as constants.

use serde::{Deserialize, Serialize};

use crate::distance::{degenerate, dot};
use crate::error::{check_dim, invalid, Result};
use crate::types::{EmbeddingMatrix, Metric};

/// Loss value and its gradient with respect to the query embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub loss: f64,
    pub query_grad: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletMining {
    /// Mean distance over the whole set.
    All,
    /// Farthest positive, nearest negative.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
    pub mining: TripletMining,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self { margin: 0.3, mining: TripletMining::Hard }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedListConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for RankedListConfig {
    fn default() -> Self {
        Self { alpha: 1.2, beta: 0.4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoNceVariant {
    /// One positive: `−log(e^{q·p/τ} / Σ_k e^{q·k/τ})`.
    Single,
    /// Positives summed inside the log.
    MultiIn,
    /// Per-positive log terms summed outside.
    MultiOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfoNceConfig {
    pub temperature: f64,
    pub variant: InfoNceVariant,
    pub hard_mining: bool,
    pub hard_count: usize,
}

impl Default for InfoNceConfig {
    fn default() -> Self {
        Self { temperature: 0.07, variant: InfoNceVariant::MultiOut, hard_mining: false, hard_count: 15 }
    }
}

pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn non_empty(m: &EmbeddingMatrix, what: &str) -> Result<()> {
    if m.is_empty() {
        Err(invalid(format!("{what} set is empty")))
    } else {
        Ok(())
    }
}

fn distances(query: &[f64], keys: &EmbeddingMatrix, metric: Metric) -> Result<Vec<f64>> {
    if !keys.is_empty() {
        check_dim(keys.dim(), query.len())?;
    }
    keys.iter_rows().map(|k| metric.distance(query, k)).collect()
}

fn similarities(query: &[f64], keys: &EmbeddingMatrix) -> Result<Vec<f64>> {
    if !keys.is_empty() {
        check_dim(keys.dim(), query.len())?;
    }
    Ok(keys.iter_rows().map(|k| dot(query, k)).collect())
}

/// First index of the maximum (or minimum with `max = false`).
fn arg_extreme(v: &[f64], max: bool) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if (max && x > v[best]) || (!max && x < v[best]) {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest values, ties broken by lower index.
fn top_k(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(y, v)| *y += a * v);
}

// ---------------------------------------------------------------- triplet

/// Indices of the representatives chosen by hard mining: the farthest
/// positive and the nearest negative (first index on ties).
pub fn triplet_hard_representatives(pos: &[f64], neg: &[f64]) -> Result<(usize, usize)> {
    if pos.is_empty() || neg.is_empty() {
        return Err(invalid("triplet loss needs positives and negatives"));
    }
    Ok((arg_extreme(pos, true), arg_extreme(neg, false)))
}

/// `max(d̄_p − d̄_n + margin, 0)` over representative distances.
pub fn triplet_from_distances(pos: &[f64], neg: &[f64], cfg: &TripletConfig) -> Result<f64> {
    if cfg.margin < 0.0 {
        return Err(invalid("triplet margin must be non-negative"));
    }
    let (ip, in_) = triplet_hard_representatives(pos, neg)?;
    let (dp, dn) = match cfg.mining {
        TripletMining::Hard => (pos[ip], neg[in_]),
        TripletMining::All => (
            pos.iter().sum::<f64>() / pos.len() as f64,
            neg.iter().sum::<f64>() / neg.len() as f64,
        ),
    };
    Ok((dp - dn + cfg.margin).max(0.0))
}

pub fn triplet_loss(
    query: &[f64],
    positives: &EmbeddingMatrix,
    negatives: &EmbeddingMatrix,
    cfg: &TripletConfig,
    metric: Metric,
) -> Result<f64> {
    non_empty(positives, "positive")?;
    non_empty(negatives, "negative")?;
    triplet_from_distances(&distances(query, positives, metric)?, &distances(query, negatives, metric)?, cfg)
}

pub fn triplet_loss_grad(
    query: &[f64],
    positives: &EmbeddingMatrix,
    negatives: &EmbeddingMatrix,
    cfg: &TripletConfig,
    metric: Metric,
) -> Result<LossAndGrad> {
    non_empty(positives, "positive")?;
    non_empty(negatives, "negative")?;
    let pd = distances(query, positives, metric)?;
    let nd = distances(query, negatives, metric)?;
    let loss = triplet_from_distances(&pd, &nd, cfg)?;
    let mut grad = vec![0.0; query.len()];
    if loss > 0.0 {
        let (ip, in_) = triplet_hard_representatives(&pd, &nd)?;
        let (pset, nset): (Vec<usize>, Vec<usize>) = match cfg.mining {
            TripletMining::Hard => (vec![ip], vec![in_]),
            TripletMining::All => ((0..pd.len()).collect(), (0..nd.len()).collect()),
        };
        let wp = 1.0 / pset.len() as f64;
        let wn = 1.0 / nset.len() as f64;
        for i in pset {
            let (g, _) = metric.distance_grads(query, positives.row(i), pd[i]).ok_or_else(|| degenerate(i))?;
            axpy(&mut grad, wp, &g);
        }
        for i in nset {
            let (g, _) = metric.distance_grads(query, negatives.row(i), nd[i]).ok_or_else(|| degenerate(i))?;
            axpy(&mut grad, -wn, &g);
        }
    }
    Ok(LossAndGrad { loss, query_grad: grad })
}

// ---------------------------------------------------------------- N-pair

/// `log(1 + Σ_n exp(s_n − s_p))` with `s_p` the least similar positive and
/// the sum over the `hard_count` most similar negatives.
pub fn npair_from_similarities(pos_sims: &[f64], neg_sims: &[f64], hard_count: usize) -> Result<f64> {
    let (ip, mined) = npair_mine(pos_sims, neg_sims, hard_count)?;
    let sp = pos_sims[ip];
    Ok(softplus(log_sum_exp(mined.iter().map(|&n| neg_sims[n] - sp))))
}

fn npair_mine(pos_sims: &[f64], neg_sims: &[f64], hard_count: usize) -> Result<(usize, Vec<usize>)> {
    if pos_sims.is_empty() {
        return Err(invalid("N-pair loss needs at least one positive"));
    }
    if hard_count == 0 || neg_sims.len() < hard_count {
        return Err(invalid(format!(
            "N-pair loss needs {hard_count} negatives, got {}",
            neg_sims.len()
        )));
    }
    Ok((arg_extreme(pos_sims, false), top_k(neg_sims, hard_count)))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn npair_loss(
    query: &[f64],
    positives: &EmbeddingMatrix,
    negatives: &EmbeddingMatrix,
    hard_count: usize,
) -> Result<f64> {
    npair_from_similarities(&similarities(query, positives)?, &similarities(query, negatives)?, hard_count)
}

pub fn npair_loss_grad(
    query: &[f64],
    positives: &EmbeddingMatrix,
    negatives: &EmbeddingMatrix,
    hard_count: usize,
) -> Result<LossAndGrad> {
    let ps = similarities(query, positives)?;
    let ns = similarities(query, negatives)?;
    let (ip, mined) = npair_mine(&ps, &ns, hard_count)?;
    let sp = ps[ip];
    let lse = log_sum_exp(mined.iter().map(|&n| ns[n] - sp));
    let loss = softplus(lse);
    // d/dq = Σ_n w_n (e_n − e_p),  w_n = exp(s_n − s_p) / (1 + Σ exp(·))
    let denom_log = softplus(lse);
    let mut grad = vec![0.0; query.len()];
    let p = positives.row(ip);
    for &n in &mined {
        let w = (ns[n] - sp - denom_log).exp();
        let row = negatives.row(n);
        grad.iter_mut().zip(row.iter().zip(p)).for_each(|(g, (a, b))| *g += w * (a - b));
    }
    Ok(LossAndGrad { loss, query_grad: grad })
}

// ---------------------------------------------------------------- Ranked List

/// Hinge on positives beyond `α − β` plus hinge on negatives inside `α`,
/// each averaged over its set.
pub fn ranked_list_from_distances(pos: &[f64], neg: &[f64], cfg: &RankedListConfig) -> Result<f64> {
    validate_ranked(cfg)?;
    let pos_margin = cfg.alpha - cfg.beta;
    Ok(mean_hinge(pos.iter().map(|d| d - pos_margin)) + mean_hinge(neg.iter().map(|d| cfg.alpha - d)))
}

fn validate_ranked(cfg: &RankedListConfig) -> Result<()> {
    if !(cfg.alpha > cfg.beta && cfg.beta >= 0.0) {
        return Err(invalid("ranked list config needs alpha > beta >= 0"));
    }
    Ok(())
}

/// Hinge averaged over the whole set, so non-violators count as zeros.
fn mean_hinge(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = xs.fold((0.0, 0usize), |(s, c), x| (s + x.max(0.0), c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

pub fn ranked_list_loss(
    query: &[f64],
    positives: &EmbeddingMatrix,
    negatives: &EmbeddingMatrix,
    cfg: &RankedListConfig,
    metric: Metric,
) -> Result<f64> {
    ranked_list_from_distances(&distances(query, positives, metric)?, &distances(query, negatives, metric)?, cfg)
}

pub fn ranked_list_loss_grad(
    query: &[f64],
    positives: &EmbeddingMatrix,
    negatives: &EmbeddingMatrix,
    cfg: &RankedListConfig,
    metric: Metric,
) -> Result<LossAndGrad> {
    let pd = distances(query, positives, metric)?;
    let nd = distances(query, negatives, metric)?;
    let loss = ranked_list_from_distances(&pd, &nd, cfg)?;
    let mut grad = vec![0.0; query.len()];
    let hard_p: Vec<usize> = (0..pd.len()).filter(|&i| pd[i] > cfg.alpha - cfg.beta).collect();
    let hard_n: Vec<usize> = (0..nd.len()).filter(|&i| nd[i] < cfg.alpha).collect();
    for &i in &hard_p {
        let (g, _) = metric.distance_grads(query, positives.row(i), pd[i]).ok_or_else(|| degenerate(i))?;
        axpy(&mut grad, 1.0 / pd.len() as f64, &g);
    }
    for &i in &hard_n {
        let (g, _) = metric.distance_grads(query, negatives.row(i), nd[i]).ok_or_else(|| degenerate(i))?;
        axpy(&mut grad, -1.0 / nd.len() as f64, &g);
    }
    Ok(LossAndGrad { loss, query_grad: grad })
}

// ---------------------------------------------------------------- InfoNCE

/// InfoNCE over dot-product similarities. The key set is the positives plus
/// the negatives, after optional hard mining of the negatives.
pub fn infonce_from_similarities(pos_sims: &[f64], neg_sims: &[f64], cfg: &InfoNceConfig) -> Result<f64> {
    let mined = infonce_mine(pos_sims, neg_sims, cfg)?;
    let tau = cfg.temperature;
    let logits = || pos_sims.iter().chain(mined.iter().map(|&i| &neg_sims[i])).map(|s| s / tau);
    let lse_all = log_sum_exp(logits());
    Ok(match cfg.variant {
        InfoNceVariant::Single => lse_all - pos_sims[0] / tau,
        InfoNceVariant::MultiIn => lse_all - log_sum_exp(pos_sims.iter().map(|s| s / tau)),
        InfoNceVariant::MultiOut => pos_sims.iter().map(|s| lse_all - s / tau).sum(),
    })
}

fn infonce_mine(pos_sims: &[f64], neg_sims: &[f64], cfg: &InfoNceConfig) -> Result<Vec<usize>> {
    if cfg.temperature.is_nan() || cfg.temperature <= 0.0 {
        return Err(invalid("InfoNCE temperature must be positive"));
    }
    if cfg.hard_count == 0 {
        return Err(invalid("InfoNCE hard_count must be at least 1"));
    }
    match cfg.variant {
        InfoNceVariant::Single if pos_sims.len() != 1 => {
            return Err(invalid(format!("single-positive InfoNCE got {} positives", pos_sims.len())))
        }
        _ if pos_sims.is_empty() => return Err(invalid("InfoNCE needs at least one positive")),
        _ => {}
    }
    Ok(if cfg.hard_mining {
        top_k(neg_sims, cfg.hard_count)
    } else {
        (0..neg_sims.len()).collect()
    })
}

pub fn infonce_loss(
    query: &[f64],
    positives: &EmbeddingMatrix,
    negatives: &EmbeddingMatrix,
    cfg: &InfoNceConfig,
) -> Result<f64> {
    infonce_from_similarities(&similarities(query, positives)?, &similarities(query, negatives)?, cfg)
}

pub fn infonce_loss_grad(
    query: &[f64],
    positives: &EmbeddingMatrix,
    negatives: &EmbeddingMatrix,
    cfg: &InfoNceConfig,
) -> Result<LossAndGrad> {
    let ps = similarities(query, positives)?;
    let ns = similarities(query, negatives)?;
    let loss = infonce_from_similarities(&ps, &ns, cfg)?;
    let mined = infonce_mine(&ps, &ns, cfg)?;
    let tau = cfg.temperature;
    let lse_all = log_sum_exp(ps.iter().chain(mined.iter().map(|&i| &ns[i])).map(|s| s / tau));

    // expected key under the softmax over all keys
    let mut expected = vec![0.0; query.len()];
    for (i, s) in ps.iter().enumerate() {
        axpy(&mut expected, (s / tau - lse_all).exp(), positives.row(i));
    }
    for &i in &mined {
        axpy(&mut expected, (ns[i] / tau - lse_all).exp(), negatives.row(i));
    }
    let mut grad = vec![0.0; query.len()];
    match cfg.variant {
        InfoNceVariant::Single => {
            axpy(&mut grad, 1.0, &expected);
            axpy(&mut grad, -1.0, positives.row(0));
        }
        InfoNceVariant::MultiIn => {
            axpy(&mut grad, 1.0, &expected);
            let lse_pos = log_sum_exp(ps.iter().map(|s| s / tau));
            for (i, s) in ps.iter().enumerate() {
                axpy(&mut grad, -(s / tau - lse_pos).exp(), positives.row(i));
            }
        }
        InfoNceVariant::MultiOut => {
            axpy(&mut grad, ps.len() as f64, &expected);
            for i in 0..ps.len() {
                axpy(&mut grad, -1.0, positives.row(i));
            }
        }
    }
    grad.iter_mut().for_each(|g| *g /= tau);
    Ok(LossAndGrad { loss, query_grad: grad })
}
