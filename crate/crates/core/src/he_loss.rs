//! Hard-distance elastic (HE) loss.
//!
//! For a query with positive distances `d_p` and negative distances `d_n`,
//! the loss at boundary `t` is
//!
//! ```text
//! L(t) = Σ_p max(d_p − t, 0) + Σ_n max(t − d_n, 0)
//! ```
//!
//! `L` is convex and piecewise linear in `t` with slope `−N_hp(t) + N_hn(t)`,
//! so the minimizer sits where the number of hard positives equals the
//! number of hard negatives. [`find_optimal_boundary`] locates it with a
//! single merge-style walk over the two sorted distance lists.

use rayon::prelude::*;

use crate::distance::{degenerate, pairwise_distances};
use crate::error::{check_dim, invalid, Error, Result};
use crate::types::{DistanceList, EmbeddingMatrix, Metric};

/// Optimal boundary for one query and the samples that cross it.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryResult {
    pub t_star: f64,
    pub loss: f64,
    /// Sample indices of positives on the negative side of `t_star`.
    pub hard_positive_indices: Vec<usize>,
    /// Sample indices of negatives on the positive side of `t_star`.
    pub hard_negative_indices: Vec<usize>,
    /// Number of walk steps taken; always equals the positive count.
    pub iterations: usize,
}

/// `L(t)` evaluated directly.
pub fn he_loss_at(t: f64, pos_dists: &DistanceList, neg_dists: &DistanceList) -> Result<f64> {
    if !t.is_finite() {
        return Err(invalid(format!("boundary must be finite, got {t}")));
    }
    let pos: f64 = pos_dists.values().iter().map(|d| (d - t).max(0.0)).sum();
    let neg: f64 = neg_dists.values().iter().map(|d| (t - d).max(0.0)).sum();
    Ok(pos + neg)
}

/// Minimizes `L(t)` over all real `t`.
///
/// Both lists must be sorted ascending. The walk starts with every positive
/// counted as hard and no hard negatives, then repeatedly moves the boundary
/// to the next smallest unvisited distance: visiting a positive removes one
/// hard positive, visiting a negative adds one hard negative. It stops as
/// soon as the two counts meet, which takes exactly `|P|` steps. A list that
/// runs out reads as `+∞`, so the walk stays defined when `|N| < |P|`.
///
/// The hard sets are the samples the walk leaves on the wrong side. Without
/// ties, a walk ending on a positive gives `{p : d_p > t*}` and
/// `{n : d_n < t*}`; a walk ending on a negative puts `t*` at that
/// negative's distance and counts it hard with zero loss. Either way the two
/// sets have the same size.
pub fn find_optimal_boundary(pos_dists: &DistanceList, neg_dists: &DistanceList) -> Result<BoundaryResult> {
    if pos_dists.is_empty() {
        return Err(invalid("boundary search needs at least one positive"));
    }
    if neg_dists.is_empty() {
        return Err(Error::NoNegatives);
    }
    if !pos_dists.check_sorted() || !neg_dists.check_sorted() {
        return Err(invalid("boundary search needs distances sorted ascending"));
    }
    let p = pos_dists.values();
    let n = neg_dists.values();
    let at = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(f64::INFINITY);

    let mut n_hp = p.len();
    let mut n_hn = 0usize;
    let mut p_cur = p[0];
    let mut n_cur = n[0];
    let mut t;
    let mut iterations = 0usize;
    loop {
        iterations += 1;
        if p_cur <= n_cur {
            t = p_cur;
            n_hp -= 1;
            p_cur = at(p, p.len() - n_hp);
        } else {
            t = n_cur;
            n_hn += 1;
            n_cur = at(n, n_hn);
        }
        if n_hp == n_hn {
            break;
        }
    }
    debug_assert!(t.is_finite());

    let first_hard_pos = p.len() - n_hp;
    let loss = p[first_hard_pos..].iter().map(|d| d - t).sum::<f64>()
        + n[..n_hn].iter().map(|d| t - d).sum::<f64>();
    Ok(BoundaryResult {
        t_star: t,
        loss,
        hard_positive_indices: pos_dists.sample_indices()[first_hard_pos..].to_vec(),
        hard_negative_indices: neg_dists.sample_indices()[..n_hn].to_vec(),
        iterations,
    })
}

/// Sorted distance lists from `query` to both sample sets.
pub fn sorted_distances(
    query: &[f64],
    positives: &EmbeddingMatrix,
    negatives: &EmbeddingMatrix,
    metric: Metric,
) -> Result<(DistanceList, DistanceList)> {
    let pos = pairwise_distances(query, positives, metric)?.sorted();
    let neg = pairwise_distances(query, negatives, metric)?.sorted();
    Ok((pos, neg))
}

/// HE loss of a single query against its labeled positive and negative keys.
pub fn he_loss_per_query(
    query: &[f64],
    positives: &EmbeddingMatrix,
    negatives: &EmbeddingMatrix,
    metric: Metric,
) -> Result<BoundaryResult> {
    let (pos, neg) = sorted_distances(query, positives, negatives, metric)?;
    find_optimal_boundary(&pos, &neg)
}

/// Mean per-query HE loss. Per-query terms are evaluated in parallel and
/// summed in query order.
pub fn he_loss_batch(
    queries: &EmbeddingMatrix,
    positive_sets: &[EmbeddingMatrix],
    negative_sets: &[EmbeddingMatrix],
    metric: Metric,
) -> Result<f64> {
    if positive_sets.len() != queries.rows() || negative_sets.len() != queries.rows() {
        return Err(invalid("need one positive and one negative set per query"));
    }
    if queries.is_empty() {
        return Err(invalid("empty query batch"));
    }
    let losses: Vec<f64> = (0..queries.rows())
        .into_par_iter()
        .map(|i| he_loss_per_query(queries.row(i), &positive_sets[i], &negative_sets[i], metric).map(|r| r.loss))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / queries.rows() as f64)
}

/// Subgradients of one query's HE loss with `t*` held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct HeGradient {
    pub boundary: BoundaryResult,
    pub query: Vec<f64>,
    /// `(index into positives, gradient)` for each hard positive.
    pub positives: Vec<(usize, Vec<f64>)>,
    /// `(index into negatives, gradient)` for each hard negative.
    pub negatives: Vec<(usize, Vec<f64>)>,
}

/// Loss and subgradients for one query.
///
/// `t*` is treated as a constant: the loss slope in `t` is `−N_hp + N_hn`,
/// which is zero at the optimum. Samples outside the hard sets get no
/// gradient. A hard sample at zero distance yields
/// [`Error::DegenerateGeometry`] instead of a NaN.
pub fn he_loss_gradient(
    query: &[f64],
    positives: &EmbeddingMatrix,
    negatives: &EmbeddingMatrix,
    metric: Metric,
) -> Result<HeGradient> {
    check_dim(positives.dim(), query.len())?;
    let (pos, neg) = sorted_distances(query, positives, negatives, metric)?;
    let boundary = find_optimal_boundary(&pos, &neg)?;

    let mut grad_q = vec![0.0; query.len()];
    let mut grad_p = Vec::with_capacity(boundary.hard_positive_indices.len());
    let mut grad_n = Vec::with_capacity(boundary.hard_negative_indices.len());
    let hard_pos_dists = &pos.values()[pos.len() - boundary.hard_positive_indices.len()..];
    for (&i, &d) in boundary.hard_positive_indices.iter().zip(hard_pos_dists) {
        let (gq, gk) = metric
            .distance_grads(query, positives.row(i), d)
            .ok_or_else(|| degenerate(i))?;
        grad_q.iter_mut().zip(&gq).for_each(|(g, v)| *g += v);
        grad_p.push((i, gk));
    }
    let hard_neg_dists = &neg.values()[..boundary.hard_negative_indices.len()];
    for (&i, &d) in boundary.hard_negative_indices.iter().zip(hard_neg_dists) {
        let (gq, gk) = metric
            .distance_grads(query, negatives.row(i), d)
            .ok_or_else(|| degenerate(i))?;
        grad_q.iter_mut().zip(&gq).for_each(|(g, v)| *g -= v);
        grad_n.push((i, gk.into_iter().map(|v| -v).collect()));
    }
    Ok(HeGradient { boundary, query: grad_q, positives: grad_p, negatives: grad_n })
}
