//! Retrieval evaluation: gallery ranking, average precision, mAP and CMC.

use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::pairwise_distances;
use crate::error::{check_dim, invalid, Result};
use crate::types::{EmbeddingMatrix, IdentityLabel, Metric};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub per_query_ap: Vec<f64>,
    pub map: f64,
    pub rank1: f64,
    pub cmc: Vec<f64>,
    /// Query rows that contributed, parallel to `per_query_ap`.
    pub evaluated_queries: Vec<usize>,
    /// 1-based rank of the first correct match, parallel to `per_query_ap`.
    pub first_hit_rank: Vec<usize>,
    pub skipped_queries: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalOptions {
    pub metric: Metric,
    /// Queries and gallery are the same rows; drop gallery row `i` when
    /// ranking for query `i`.
    pub exclude_self: bool,
}

/// Gallery indices by ascending distance, ties by ascending index.
pub fn rank_gallery(query: &[f64], gallery: &EmbeddingMatrix, metric: Metric) -> Result<Vec<usize>> {
    let mut d = pairwise_distances(query, gallery, metric)?;
    d.sort();
    Ok(d.sample_indices().to_vec())
}

/// Uninterpolated AP: mean of precision@k over the ranks k of relevant
/// items. `relevance` is indexed by gallery index. Returns `None` when the
/// ranking holds no relevant item.
pub fn average_precision(ranking: &[usize], relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &g) in ranking.iter().enumerate() {
        if relevance[g] {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

struct QueryOutcome {
    ap: f64,
    first_hit: usize,
}

pub fn evaluate(
    queries: &EmbeddingMatrix,
    query_labels: &[IdentityLabel],
    gallery: &EmbeddingMatrix,
    gallery_labels: &[IdentityLabel],
    opts: &EvalOptions,
) -> Result<RetrievalResult> {
    if queries.rows() != query_labels.len() || gallery.rows() != gallery_labels.len() {
        return Err(invalid("features and labels differ in length"));
    }
    if queries.is_empty() || gallery.is_empty() {
        return Err(invalid("evaluation needs queries and a gallery"));
    }
    check_dim(gallery.dim(), queries.dim())?;
    if opts.exclude_self && queries.rows() != gallery.rows() {
        return Err(invalid("self-match exclusion needs queries and gallery to be the same rows"));
    }
    let depth = gallery.rows() - usize::from(opts.exclude_self);
    if depth == 0 {
        return Err(invalid("gallery is empty after self-match exclusion"));
    }

    let outcomes: Vec<Option<QueryOutcome>> = (0..queries.rows())
        .into_par_iter()
        .map(|qi| -> Result<Option<QueryOutcome>> {
            let mut ranking = rank_gallery(queries.row(qi), gallery, opts.metric)?;
            if opts.exclude_self {
                ranking.retain(|&g| g != qi);
            }
            let relevance: Vec<bool> = gallery_labels.iter().map(|&l| l == query_labels[qi]).collect();
            Ok(average_precision(&ranking, &relevance).map(|ap| QueryOutcome {
                ap,
                first_hit: ranking.iter().position(|&g| relevance[g]).expect("AP implies a hit") + 1,
            }))
        })
        .collect::<Result<_>>()?;

    let mut per_query_ap = Vec::new();
    let mut evaluated_queries = Vec::new();
    let mut first_hit_rank = Vec::new();
    let mut skipped_queries = Vec::new();
    let mut hit_counts = vec![0usize; depth];
    for (qi, o) in outcomes.into_iter().enumerate() {
        match o {
            Some(o) => {
                per_query_ap.push(o.ap);
                evaluated_queries.push(qi);
                first_hit_rank.push(o.first_hit);
                hit_counts[o.first_hit - 1] += 1;
            }
            None => skipped_queries.push(qi),
        }
    }
    if !skipped_queries.is_empty() {
        warn!("{} queries have no matching identity in the gallery and were skipped", skipped_queries.len());
    }
    if per_query_ap.is_empty() {
        return Err(invalid("no query has a match in the gallery"));
    }
    let n = per_query_ap.len() as f64;
    let mut cmc = Vec::with_capacity(depth);
    let mut acc = 0usize;
    for c in hit_counts {
        acc += c;
        cmc.push(acc as f64 / n);
    }
    Ok(RetrievalResult {
        map: per_query_ap.iter().sum::<f64>() / n,
        rank1: cmc[0],
        cmc,
        per_query_ap,
        evaluated_queries,
        first_hit_rank,
        skipped_queries,
    })
}

impl RetrievalResult {
    /// `{map, rank1, cmc}` summary.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({ "map": self.map, "rank1": self.rank1, "cmc": self.cmc })
    }

    /// One line per evaluated query: `query,ap,first_hit_rank`.
    pub fn write_per_query_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "query,ap,first_hit_rank")?;
        for ((q, ap), r) in self.evaluated_queries.iter().zip(&self.per_query_ap).zip(&self.first_hit_rank) {
            writeln!(w, "{q},{ap},{r}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(v: &[u32]) -> Vec<IdentityLabel> {
        v.iter().map(|&l| IdentityLabel(l)).collect()
    }

    /// precision@k at each relevant position, O(n²).
    fn ap_oracle(ranking: &[usize], relevance: &[bool]) -> Option<f64> {
        let rel: Vec<usize> = (0..ranking.len()).filter(|&k| relevance[ranking[k]]).collect();
        if rel.is_empty() {
            return None;
        }
        let mut total = 0.0;
        for &k in &rel {
            let hits = (0..=k).filter(|&j| relevance[ranking[j]]).count();
            total += hits as f64 / (k + 1) as f64;
        }
        Some(total / rel.len() as f64)
    }

    #[test]
    fn ranking_examples() {
        let g = EmbeddingMatrix::from_rows(&[[1.0, 1.0]]).unwrap();
        assert_eq!(rank_gallery(&[0.0, 0.0], &g, Metric::Euclidean).unwrap(), vec![0]);
        let g = EmbeddingMatrix::from_rows(&[[3.0, 0.0], [1.0, 1.0], [0.5, -0.5]]).unwrap();
        assert_eq!(rank_gallery(&[1.0, 1.0], &g, Metric::Euclidean).unwrap()[0], 1);
        assert!(rank_gallery(&[1.0], &g, Metric::Euclidean).is_err());
    }

    #[test]
    fn ranking_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let g = EmbeddingMatrix::new(100, 4, (0..400).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut pairs: Vec<(f64, usize)> =
            g.iter_rows().enumerate().map(|(i, r)| (crate::euclidean_distance(&q, r).unwrap(), i)).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let expected: Vec<usize> = pairs.into_iter().map(|p| p.1).collect();
        assert_eq!(rank_gallery(&q, &g, Metric::Euclidean).unwrap(), expected);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0, 1, 2], &[true, true, false]), Some(1.0));
        assert_eq!(average_precision(&[0, 1], &[false, true]), Some(0.5));
        assert_eq!(average_precision(&[0, 1], &[false, false]), None);
    }

    #[test]
    fn ap_matches_oracle_on_random_rankings() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..500 {
            let n = rng.random_range(1..60);
            let rel: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
            let mut ranking: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                ranking.swap(i, rng.random_range(0..=i));
            }
            match (average_precision(&ranking, &rel), ap_oracle(&ranking, &rel)) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn perfect_clusters_score_one() {
        let g = EmbeddingMatrix::from_rows(&[[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0], [-5.0, 3.0], [-5.0, 3.1]]).unwrap();
        let l = labels(&[0, 0, 1, 1, 2, 2]);
        let r = evaluate(&g, &l, &g, &l, &EvalOptions { exclude_self: true, ..Default::default() }).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.rank1, 1.0);
        assert_eq!(r.cmc.len(), 5);
        assert_eq!(*r.cmc.last().unwrap(), 1.0);
    }

    #[test]
    fn map_is_mean_of_two_queries() {
        let q = EmbeddingMatrix::from_rows(&[[0.0], [10.0]]).unwrap();
        let g = EmbeddingMatrix::from_rows(&[[0.1], [9.0], [12.0]]).unwrap();
        let r = evaluate(&q, &labels(&[0, 1]), &g, &labels(&[0, 0, 1]), &EvalOptions::default()).unwrap();
        // query 0: ranking [0,1,2], relevant {0,1} → AP 1
        // query 1: ranking [1,2,0], relevant {2} → AP 1/2
        assert_eq!(r.per_query_ap, vec![1.0, 0.5]);
        assert_eq!(r.map, 0.75);
        assert_eq!(r.cmc, vec![0.5, 1.0, 1.0]);
    }

    #[test]
    fn missing_ids_are_skipped() {
        let q = EmbeddingMatrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let g = EmbeddingMatrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let r = evaluate(&q, &labels(&[0, 7]), &g, &labels(&[0, 1]), &EvalOptions::default()).unwrap();
        assert_eq!(r.skipped_queries, vec![1]);
        assert_eq!(r.per_query_ap.len(), 1);
    }

    #[test]
    fn random_embeddings_are_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let n = 600;
        let g = EmbeddingMatrix::new(n, 8, (0..n * 8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let l: Vec<IdentityLabel> = (0..n).map(|_| IdentityLabel(rng.random_range(0..50))).collect();
        let r = evaluate(&g, &l, &g, &l, &EvalOptions { exclude_self: true, ..Default::default() }).unwrap();
        // chance AP with ~11 relevant among 599 is a few percent
        assert!(r.map < 0.15, "map {}", r.map);
        assert!(r.map > 0.0);
    }

    #[test]
    fn per_query_csv() {
        let g = EmbeddingMatrix::from_rows(&[[0.0], [0.1], [5.0], [5.1]]).unwrap();
        let l = labels(&[0, 0, 1, 1]);
        let r = evaluate(&g, &l, &g, &l, &EvalOptions { exclude_self: true, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        r.write_per_query_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("query,ap,first_hit_rank\n0,1,1\n"));
        let json = r.summary_json();
        assert_eq!(json["map"], 1.0);
    }
}
