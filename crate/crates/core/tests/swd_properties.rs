use fmuda_core::swd::{exact_w2_1d, sample_projections, swd2};
use fmuda_core::{EmbeddingBatch, ProjectionSet};
use proptest::prelude::*;

fn batch(points: &[f64], dim: usize) -> EmbeddingBatch {
    EmbeddingBatch::new(points.to_vec(), dim, "t").unwrap()
}

/// Minimum mean squared gap over every pairing of two equal-size lists.
fn brute_force_w2(a: &[f64], b: &[f64]) -> f64 {
    fn permute(rest: &mut Vec<usize>, k: usize, a: &[f64], b: &[f64], best: &mut f64) {
        if k == rest.len() {
            let c = rest.iter().enumerate().map(|(i, &j)| (a[i] - b[j]).powi(2)).sum::<f64>() / a.len() as f64;
            *best = best.min(c);
            return;
        }
        for i in k..rest.len() {
            rest.swap(k, i);
            permute(rest, k + 1, a, b, best);
            rest.swap(k, i);
        }
    }
    let mut best = f64::INFINITY;
    permute(&mut (0..b.len()).collect(), 0, a, b, &mut best);
    best
}

fn cloud(rows: usize, dim: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-5.0f64..5.0, rows * dim)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetric_and_non_negative(a in cloud(6, 3), b in cloud(6, 3), seed in any::<u64>()) {
        let p = sample_projections(8, 3, seed).unwrap();
        let ab = swd2(&batch(&a, 3), &batch(&b, 3), &p).unwrap();
        let ba = swd2(&batch(&b, 3), &batch(&a, 3), &p).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
    }

    #[test]
    fn shared_translation_changes_nothing(
        a in cloud(5, 2),
        b in cloud(7, 2),
        shift in proptest::collection::vec(-10.0f64..10.0, 2),
        seed in any::<u64>(),
    ) {
        let p = sample_projections(6, 2, seed).unwrap();
        let moved = |pts: &[f64]| pts.chunks(2).flat_map(|r| [r[0] + shift[0], r[1] + shift[1]]).collect::<Vec<_>>();
        let before = swd2(&batch(&a, 2), &batch(&b, 2), &p).unwrap();
        let after = swd2(&batch(&moved(&a), 2), &batch(&moved(&b), 2), &p).unwrap();
        prop_assert!((before - after).abs() <= 1e-9 * (1.0 + before));
    }

    #[test]
    fn sorted_matching_is_the_optimal_pairing(a in cloud(5, 2), b in cloud(5, 2), seed in any::<u64>()) {
        let p = sample_projections(4, 2, seed).unwrap();
        let mut oracle = 0.0;
        for l in 0..p.count() {
            let dir = p.direction(l);
            let proj = |pts: &[f64]| pts.chunks(2).map(|r| r[0] * dir[0] + r[1] * dir[1]).collect::<Vec<f64>>();
            oracle += brute_force_w2(&proj(&a), &proj(&b));
        }
        oracle /= p.count() as f64;
        let est = swd2(&batch(&a, 2), &batch(&b, 2), &p).unwrap();
        prop_assert!((est - oracle).abs() <= 1e-9 * (1.0 + oracle), "{est} vs {oracle}");
    }

    #[test]
    fn exact_1d_agrees_with_brute_force(mut a in proptest::collection::vec(-3.0f64..3.0, 6),
                                        mut b in proptest::collection::vec(-3.0f64..3.0, 6)) {
        let oracle = brute_force_w2(&a, &b);
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert!((exact_w2_1d(&a, &b).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn unit_direction_in_one_dimension_is_exact(a in cloud(6, 1), b in cloud(6, 1)) {
        let p = ProjectionSet::from_directions(1, &[vec![1.0]]).unwrap();
        let mut sa = a.clone();
        let mut sb = b.clone();
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        let est = swd2(&batch(&a, 1), &batch(&b, 1), &p).unwrap();
        prop_assert!((est - exact_w2_1d(&sa, &sb).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn more_projections_reduce_estimator_spread() {
    let mut r = fmuda_core::rng::rng(3);
    use rand::Rng;
    let a: Vec<f64> = (0..40 * 4).map(|_| r.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..40 * 4).map(|i| r.gen_range(-1.0..1.0) * if i % 4 == 0 { 3.0 } else { 0.5 }).collect();
    let spread = |count: usize| {
        let vals: Vec<f64> =
            (0..60).map(|s| swd2(&batch(&a, 4), &batch(&b, 4), &sample_projections(count, 4, s).unwrap()).unwrap()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64
    };
    let (v1, v10, v100) = (spread(1), spread(10), spread(100));
    assert!(v10 < v1 && v100 < v10, "{v1} {v10} {v100}");
}
