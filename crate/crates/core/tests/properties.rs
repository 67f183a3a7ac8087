use std::collections::BTreeSet;

use fmuda_core::adapt::{train_source, TrainPlan};
use fmuda_core::ensemble::{aggregate, CountMode, EnsembleWeights, ProbabilityModel, TieBreak};
use fmuda_core::metrics::{dice, mixture_ce_sums};
use fmuda_core::synthdata::{generate_domains, LabelMap};
use fmuda_core::{DomainShift, NetConfig, Raster, Result, SegModel, Tape, Tensor};
use proptest::prelude::*;

/// A model that ignores its input.
struct Fixed(Tensor);

impl ProbabilityModel for Fixed {
    fn class_probs(&self, _: &Raster) -> Result<Tensor> {
        Ok(self.0.clone())
    }
}

fn normalise(raw: &[f64], classes: usize) -> Tensor {
    let plane = raw.len() / classes;
    let mut data = raw.to_vec();
    for s in 0..plane {
        let z: f64 = (0..classes).map(|k| raw[k * plane + s]).sum();
        for k in 0..classes {
            data[k * plane + s] /= z;
        }
    }
    Tensor::new(vec![classes, plane], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(logits in proptest::collection::vec(-30.0f64..30.0, 2 * 3 * 5)) {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2, 3, 5], logits).unwrap(), false);
        let p = t.softmax(x);
        let v = t.value(p).data();
        for b in 0..2 {
            for s in 0..5 {
                let sum: f64 = (0..3).map(|k| v[b * 15 + k * 5 + s]).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dice_is_symmetric_and_matches_set_formula(
        a in proptest::collection::vec(0u8..3, 20),
        b in proptest::collection::vec(0u8..3, 20),
        fg in 0u8..3,
    ) {
        let pa = LabelMap::new(vec![4, 5], a.clone()).unwrap();
        let pb = LabelMap::new(vec![4, 5], b.clone()).unwrap();
        let x: BTreeSet<usize> = (0..20).filter(|&i| a[i] == fg).collect();
        let y: BTreeSet<usize> = (0..20).filter(|&i| b[i] == fg).collect();
        let oracle = if x.is_empty() && y.is_empty() {
            1.0
        } else {
            2.0 * x.intersection(&y).count() as f64 / (x.len() + y.len()) as f64
        };
        let d = dice(&pa, &pb, fg).unwrap();
        prop_assert_eq!(d, dice(&pb, &pa, fg).unwrap());
        prop_assert!((d - oracle).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn mixture_loss_never_exceeds_weighted_loss(
        raw in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 2 * 6), 1..5),
        w in proptest::collection::vec(0.0f64..1.0, 5),
        labels in proptest::collection::vec(0u8..2, 6),
    ) {
        let probs: Vec<Tensor> = raw.iter().map(|r| normalise(r, 2)).collect();
        let total: f64 = w[..probs.len()].iter().sum::<f64>() + 1e-9;
        let weights: Vec<f64> = w[..probs.len()].iter().map(|x| (x + 1e-9 / probs.len() as f64) / total).collect();
        let (mix, weighted) = mixture_ce_sums(&weights, &probs, &labels).unwrap();
        prop_assert!(mix <= weighted + 1e-9, "{mix} > {weighted}");
    }

    #[test]
    fn aggregation_is_a_distribution(
        raw in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 3 * 4), 1..4),
        counts in proptest::collection::vec(0u64..1000, 4),
    ) {
        let models: Vec<Fixed> = raw.iter().map(|r| Fixed(normalise(r, 3))).collect();
        let w = EnsembleWeights::from_counts(counts[..models.len()].to_vec(), 0.5, CountMode::PerPixel, [0; 32]).unwrap();
        prop_assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let image = Raster::new(1, vec![2, 2], vec![0.0; 4]).unwrap();
        let agg = aggregate(&models, &w.weights, &image, TieBreak::new(0)).unwrap();
        for s in 0..4 {
            let col: Vec<f64> = (0..3).map(|k| agg.probs.data()[k * 4 + s]).collect();
            prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let best = agg.mask.data()[s] as usize;
            prop_assert!(col.iter().all(|&p| p <= col[best]));
        }
    }
}

#[test]
fn training_is_reproducible_bit_for_bit() {
    let shifts =
        [DomainShift::IDENTITY, DomainShift { intensity_gain: 0.7, noise_sigma: 0.05, seed: 4, ..DomainShift::IDENTITY }];
    let domains = generate_domains(2, 4, &[8, 8], 2, &shifts).unwrap();
    let target = domains[1].unlabeled_copy();
    let cfg = NetConfig { depth: 1, base_width: 4, latent_dim: 4, ..NetConfig::default() };
    let plan = TrainPlan {
        epochs_pretrain: 2,
        epochs_adapt: 2,
        swd_projections: 8,
        sites_per_image: 8,
        seed: 9,
        ..TrainPlan::default()
    };
    let go = || train_source(SegModel::new(cfg, 1).unwrap(), &domains[0], &target, &plan, None).unwrap();
    let (p1, a1) = go();
    let (p2, a2) = go();
    assert_eq!(p1, p2);
    assert_eq!(a1, a2);
    assert_eq!(a1.target_labels_read, 0);
    assert!(a1.steps.iter().all(|s| s.total.is_finite()));
}

/// With every kernel mirror-symmetric along the last axis, mirroring the
/// input along that axis mirrors the logits.
#[test]
fn mirrored_input_gives_mirrored_logits_for_symmetric_kernels() {
    for skip in [false, true] {
        let cfg = NetConfig { skip_connections: skip, ..NetConfig::default() };
        let mut model = SegModel::new(cfg, 8).unwrap();
        for p in 0..model.params().len() {
            let t = model.params_mut().value_mut(p);
            if t.shape().len() != 4 {
                continue;
            }
            let k = t.shape()[3];
            let d = t.data_mut();
            for row in d.chunks_mut(k) {
                for j in 0..k / 2 {
                    let m = 0.5 * (row[j] + row[k - 1 - j]);
                    row[j] = m;
                    row[k - 1 - j] = m;
                }
            }
        }
        let (h, w) = (16, 16);
        let data: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
        let mirror = |v: &[f64], planes: usize| -> Vec<f64> {
            let mut out = v.to_vec();
            for p in 0..planes {
                for y in 0..h {
                    for x in 0..w {
                        out[p * h * w + y * w + x] = v[p * h * w + y * w + (w - 1 - x)];
                    }
                }
            }
            out
        };
        let img = Raster::new(1, vec![h, w], data.clone()).unwrap();
        let flipped = Raster::new(1, vec![h, w], mirror(&data, 1)).unwrap();
        let a = model.predict_logits([&img]).unwrap();
        let b = model.predict_logits([&flipped]).unwrap();
        let a_mirrored = mirror(a.data(), 2);
        for (x, y) in a_mirrored.iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-10, "skip={skip}: {x} vs {y}");
        }
    }
}

proptest! {
    #[test]
    fn scaling_counts_leaves_weights_unchanged(counts in proptest::collection::vec(0u64..10_000, 1..6), k in 1u64..1000) {
        let a = EnsembleWeights::from_counts(counts.clone(), 0.3, CountMode::PerPixel, [0; 32]).unwrap();
        let b = EnsembleWeights::from_counts(counts.iter().map(|c| c * k).collect(), 0.3, CountMode::PerPixel, [0; 32]).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            prop_assert!((x - y).abs() < 1e-15);
        }
    }
}
