//! Distance kernels between feature vectors.

use rayon::prelude::*;

use crate::error::{check_dim, invalid, Error, Result};
use crate::types::{DistanceList, EmbeddingMatrix, Metric};

/// `‖a − b‖₂`.
pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    Ok(euclid(a, b))
}

/// `−(a/‖a‖)·(b/‖b‖)`, in `[−1, 1]`.
pub fn negative_cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(invalid("negative cosine similarity of a zero-norm vector"));
    }
    Ok(-(dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

impl Metric {
    /// Non-negative dissimilarity as stored in a [`DistanceList`]. For
    /// `NegCosine` this is `1 − cos`, a constant offset of the negative
    /// cosine similarity.
    pub fn distance(self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            Metric::Euclidean => euclidean_distance(a, b),
            Metric::NegCosine => negative_cosine_similarity(a, b).map(|s| 1.0 + s),
        }
    }

    /// Gradients of [`Metric::distance`] with respect to `a` and `b`, given the
    /// already computed distance `d`. Fails when the Euclidean gradient is
    /// undefined (`a == b`).
    pub(crate) fn distance_grads(self, a: &[f64], b: &[f64], d: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        match self {
            Metric::Euclidean => {
                if d == 0.0 {
                    return None;
                }
                let ga: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y) / d).collect();
                let gb = ga.iter().map(|v| -v).collect();
                Some((ga, gb))
            }
            Metric::NegCosine => {
                let (na, nb) = (norm(a), norm(b));
                if na == 0.0 || nb == 0.0 {
                    return None;
                }
                let cos = dot(a, b) / (na * nb);
                // d/da (−â·b̂) = −(b̂ − cos·â)/‖a‖
                let ga = a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| -(y / nb - cos * x / na) / na)
                    .collect();
                let gb = a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| -(x / na - cos * y / nb) / nb)
                    .collect();
                Some((ga, gb))
            }
        }
    }
}

/// Distances from `query` to every row of `keys`, unsorted, with sample
/// indices `0..keys.rows()`.
pub fn pairwise_distances(query: &[f64], keys: &EmbeddingMatrix, metric: Metric) -> Result<DistanceList> {
    if keys.is_empty() {
        return Ok(DistanceList::default());
    }
    check_dim(keys.dim(), query.len())?;
    let values = match metric {
        Metric::Euclidean => keys.iter_rows().map(|k| euclid(query, k)).collect(),
        Metric::NegCosine => keys
            .iter_rows()
            .map(|k| metric.distance(query, k))
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(DistanceList::from_raw(values, (0..keys.rows()).collect()))
}

/// Full `queries.rows() × keys.rows()` distance matrix, row-major, computed
/// in parallel over query rows. Agrees exactly with [`pairwise_distances`].
pub fn distance_matrix(queries: &EmbeddingMatrix, keys: &EmbeddingMatrix, metric: Metric) -> Result<Vec<f64>> {
    if queries.is_empty() || keys.is_empty() {
        return Ok(Vec::new());
    }
    check_dim(keys.dim(), queries.dim())?;
    let rows: Vec<Vec<f64>> = (0..queries.rows())
        .into_par_iter()
        .map(|i| pairwise_distances(queries.row(i), keys, metric).map(|d| d.values().to_vec()))
        .collect::<Result<_>>()?;
    Ok(rows.concat())
}

pub(crate) fn degenerate(index: usize) -> Error {
    Error::DegenerateGeometry { index }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()
    }

    #[test]
    fn euclidean_examples() {
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(matches!(
            euclidean_distance(&[0.0], &[0.0, 1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn euclidean_matches_coordinate_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = random_vec(&mut rng, 16);
            let b = random_vec(&mut rng, 16);
            let mut ss = 0.0;
            for i in 0..16 {
                ss += (a[i] - b[i]).powi(2);
            }
            assert!((euclidean_distance(&a, &b).unwrap() - ss.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_cosine_examples() {
        assert_eq!(negative_cosine_similarity(&[1.0, 0.0], &[2.0, 0.0]).unwrap(), -1.0);
        assert_eq!(negative_cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(negative_cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 1.0);
        assert!(negative_cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn pairwise_examples() {
        let keys = EmbeddingMatrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let d = pairwise_distances(&[0.0, 0.0], &keys, Metric::Euclidean).unwrap();
        assert_eq!(d.values(), &[1.0, 1.0]);
        assert_eq!(d.sample_indices(), &[0, 1]);
        assert!(!d.is_sorted());
        assert!(pairwise_distances(&[0.0], &EmbeddingMatrix::empty(2), Metric::Euclidean)
            .unwrap()
            .is_empty());
        assert!(pairwise_distances(&[0.0], &keys, Metric::Euclidean).is_err());
    }

    #[test]
    fn pairwise_matches_scalar_loop_on_8192_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dim = 8;
        let keys = EmbeddingMatrix::new(8192, dim, random_vec(&mut rng, 8192 * dim)).unwrap();
        let q = random_vec(&mut rng, dim);
        let d = pairwise_distances(&q, &keys, Metric::Euclidean).unwrap();
        for (i, k) in keys.iter_rows().enumerate() {
            assert_eq!(d.values()[i], euclidean_distance(&q, k).unwrap());
        }
    }

    #[test]
    fn batched_kernel_agrees_with_per_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = EmbeddingMatrix::new(7, 4, random_vec(&mut rng, 28)).unwrap();
        let k = EmbeddingMatrix::new(13, 4, random_vec(&mut rng, 52)).unwrap();
        for metric in [Metric::Euclidean, Metric::NegCosine] {
            let m = distance_matrix(&q, &k, metric).unwrap();
            for i in 0..7 {
                let row = pairwise_distances(q.row(i), &k, metric).unwrap();
                for j in 0..13 {
                    assert!((m[i * 13 + j] - row.values()[j]).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn distance_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for metric in [Metric::Euclidean, Metric::NegCosine] {
            let a = random_vec(&mut rng, 5);
            let b = random_vec(&mut rng, 5);
            let d = metric.distance(&a, &b).unwrap();
            let (ga, gb) = metric.distance_grads(&a, &b, d).unwrap();
            let h = 1e-6;
            for i in 0..5 {
                let mut ap = a.clone();
                let mut am = a.clone();
                ap[i] += h;
                am[i] -= h;
                let fd = (metric.distance(&ap, &b).unwrap() - metric.distance(&am, &b).unwrap()) / (2.0 * h);
                assert!((fd - ga[i]).abs() < 1e-7, "{metric} a[{i}]");
                let mut bp = b.clone();
                let mut bm = b.clone();
                bp[i] += h;
                bm[i] -= h;
                let fd = (metric.distance(&a, &bp).unwrap() - metric.distance(&a, &bm).unwrap()) / (2.0 * h);
                assert!((fd - gb[i]).abs() < 1e-7, "{metric} b[{i}]");
            }
        }
    }

    fn vec3() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, 3)
    }

    proptest! {
        #[test]
        fn euclidean_is_a_metric(a in vec3(), b in vec3(), c in vec3()) {
            let ab = euclidean_distance(&a, &b).unwrap();
            let ba = euclidean_distance(&b, &a).unwrap();
            let bc = euclidean_distance(&b, &c).unwrap();
            let ac = euclidean_distance(&a, &c).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, ba);
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert_eq!(euclidean_distance(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn pairwise_entry_equals_scalar(q in vec3(), rows in prop::collection::vec(vec3(), 1..20)) {
            let keys = EmbeddingMatrix::from_rows(&rows).unwrap();
            let d = pairwise_distances(&q, &keys, Metric::Euclidean).unwrap();
            for (i, k) in rows.iter().enumerate() {
                prop_assert_eq!(d.values()[i], euclidean_distance(&q, k).unwrap());
            }
        }
    }
}
