use heml_core::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dists(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..10.0, 1..max)
}

fn boundary(pos: &[f64], neg: &[f64]) -> BoundaryResult {
    find_optimal_boundary(
        &DistanceList::new(pos.to_vec()).unwrap().sorted(),
        &DistanceList::new(neg.to_vec()).unwrap().sorted(),
    )
    .unwrap()
}

fn matrix(rows: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    EmbeddingMatrix::new(rows, dim, (0..rows * dim).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn walk_takes_one_step_per_positive(pos in dists(40), neg in dists(200)) {
        let res = boundary(&pos, &neg);
        prop_assert_eq!(res.iterations, pos.len());
        prop_assert_eq!(res.hard_positive_indices.len(), res.hard_negative_indices.len());
        prop_assert!(res.loss >= 0.0);
    }

    #[test]
    fn slope_counts_hard_samples(pos in dists(30), neg in dists(60), t in 0.0f64..10.0) {
        let h = 1e-7;
        prop_assume!(pos.iter().chain(&neg).all(|d| (d - t).abs() > 1e-5));
        let (p, n) = (DistanceList::new(pos.clone()).unwrap(), DistanceList::new(neg.clone()).unwrap());
        let slope = (he_loss_at(t + h, &p, &n).unwrap() - he_loss_at(t - h, &p, &n).unwrap()) / (2.0 * h);
        let n_hp = pos.iter().filter(|&&d| d > t).count() as f64;
        let n_hn = neg.iter().filter(|&&d| d < t).count() as f64;
        prop_assert!((slope - (n_hn - n_hp)).abs() < 1e-4, "slope {} vs {}", slope, n_hn - n_hp);
        prop_assert_eq!(slope.round(), n_hn - n_hp);
    }

    #[test]
    fn boundary_scales_with_embeddings(seed in any::<u64>(), c in 0.01f64..100.0) {
        let q = matrix(1, 5, seed);
        let pos = matrix(6, 5, seed ^ 1);
        let neg = matrix(40, 5, seed ^ 2);
        let a = he_loss_per_query(q.row(0), &pos, &neg, Metric::Euclidean).unwrap();
        let b = he_loss_per_query(
            q.scaled(c).unwrap().row(0),
            &pos.scaled(c).unwrap(),
            &neg.scaled(c).unwrap(),
            Metric::Euclidean,
        )
        .unwrap();
        prop_assert!((b.t_star - c * a.t_star).abs() <= 1e-9 * (c * a.t_star).abs().max(1e-12));
        prop_assert!((b.loss - c * a.loss).abs() <= 1e-9 * (c * a.loss).abs().max(1e-12));
    }

    #[test]
    fn key_order_does_not_matter(seed in any::<u64>()) {
        let q = matrix(1, 4, seed);
        let pos = matrix(5, 4, seed ^ 3);
        let neg = matrix(30, 4, seed ^ 4);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..neg.rows()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let shuffled = neg.select_rows(&perm);
        let a = he_loss_per_query(q.row(0), &pos, &neg, Metric::Euclidean).unwrap();
        let b = he_loss_per_query(q.row(0), &pos, &shuffled, Metric::Euclidean).unwrap();
        prop_assert_eq!(a.t_star, b.t_star);
        prop_assert_eq!(a.loss, b.loss);
        let mut mapped: Vec<usize> = b.hard_negative_indices.iter().map(|&i| perm[i]).collect();
        let mut orig = a.hard_negative_indices.clone();
        mapped.sort_unstable();
        orig.sort_unstable();
        prop_assert_eq!(mapped, orig);
        let ga = he_loss_gradient(q.row(0), &pos, &neg, Metric::Euclidean).unwrap();
        let gb = he_loss_gradient(q.row(0), &pos, &shuffled, Metric::Euclidean).unwrap();
        for (x, y) in ga.query.iter().zip(&gb.query) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn map_survives_rotation_and_translation(seed in any::<u64>(), angle in 0.0f64..std::f64::consts::TAU, dx in -5.0f64..5.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = 30;
        let emb = matrix(n, 2, seed);
        let labels: Vec<IdentityLabel> = (0..n).map(|_| IdentityLabel(r.random_range(0..4))).collect();
        let (s, c) = angle.sin_cos();
        let moved: Vec<[f64; 2]> = emb.iter_rows().map(|v| [c * v[0] - s * v[1] + dx, s * v[0] + c * v[1] - dx]).collect();
        let moved = EmbeddingMatrix::from_rows(&moved).unwrap();
        let opts = EvalOptions { exclude_self: true, ..Default::default() };
        let a = evaluate(&emb, &labels, &emb, &labels, &opts);
        let b = evaluate(&moved, &labels, &moved, &labels, &opts);
        if let (Ok(a), Ok(b)) = (a, b) {
            prop_assert!((a.map - b.map).abs() <= 1e-9);
            prop_assert!(a.cmc.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(a.rank1, a.cmc[0]);
            prop_assert!((a.cmc[a.cmc.len() - 1] - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn separability_dial() {
    let mut maps = Vec::new();
    for sigma in [0.01, 0.1, 0.3, 1.0, 10.0] {
        let d = generate(&SynthConfig { num_ids: 16, samples_per_id: 8, input_dim: 8, noise_sigma: sigma, seed: 3, ..Default::default() })
            .unwrap();
        let r = evaluate(&d.inputs, &d.labels, &d.inputs, &d.labels, &EvalOptions { exclude_self: true, ..Default::default() })
            .unwrap();
        maps.push(r.map);
    }
    assert!(maps.windows(2).all(|w| w[1] <= w[0]), "{maps:?}");
    assert!(maps[0] > 0.999, "{maps:?}");
    // chance level is about 7/127 for 16 identities of 8
    assert!(maps[4] < 0.15, "{maps:?}");
}

#[test]
fn labeled_set_sizes_in_a_full_dictionary() {
    let (c, n, b) = (4usize, 3usize, 5usize);
    let batch = c * n;
    let mut dict = KeyDictionary::new(b * batch, 2).unwrap();
    let mut last = 0..0;
    for step in 0..b + 3 {
        // the same C identities in every batch
        let labels: Vec<IdentityLabel> = (0..batch).map(|i| IdentityLabel((i / n) as u32)).collect();
        last = dict.enqueue_batch(&matrix(batch, 2, step as u64), &labels).unwrap();
    }
    for q in last {
        let label = dict.label_at(q);
        let sets = dict.label(label, q, false).unwrap();
        assert_eq!(sets.positives.rows(), n - 1);
        assert_eq!(sets.negatives.rows(), b * batch - b * n);
        assert_eq!(sets.excluded_past, (b - 1) * n);
        // same answer regardless of which queries were labeled before
        assert_eq!(dict.label(label, q, false).unwrap(), sets);
    }
}

#[test]
fn lr_schedule_is_non_increasing_and_continuous() {
    for total in [2usize, 7, 100, 1001] {
        let lrs: Vec<f64> = (0..=total).map(|s| lr_schedule(s, total, 0.02)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        // the cosine half has slope at most base·π/T, so no step may drop more
        let max_drop = lrs.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
        assert!(max_drop <= 0.02 * std::f64::consts::PI / total as f64 + 1e-15, "T={total} drop {max_drop}");
        assert_eq!(lr_schedule(total / 2, total, 0.02), 0.02);
        assert_eq!(lrs[total], 0.0);
    }
}
