//! Confidence-weighted pixel-wise aggregation of per-source models, plus the
//! majority-vote and plain-average baselines.
//!
//! A model's raw count is the number of target pixels where its largest class
//! probability exceeds the threshold `lambda`; weights are the counts
//! normalised to sum to one. When no model is ever confident the weights fall
//! back to uniform and the result is flagged.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::adapt::AdaptedModel;
use crate::error::{Error, Result};
use crate::metrics::dice;
use crate::rng::derived_rng;
use crate::segnet::SegModel;
use crate::synthdata::{image_set_fingerprint, LabelMap, Raster};
use crate::tensor::Tensor;

/// Anything that maps an image to per-pixel class probabilities `[classes, spatial..]`.
pub trait ProbabilityModel {
    fn class_probs(&self, image: &Raster) -> Result<Tensor>;
}

impl ProbabilityModel for SegModel {
    fn class_probs(&self, image: &Raster) -> Result<Tensor> {
        let p = self.predict_probs([image])?;
        let shape = p.shape()[1..].to_vec();
        p.reshape(shape)
    }
}

impl ProbabilityModel for AdaptedModel {
    fn class_probs(&self, image: &Raster) -> Result<Tensor> {
        self.model.class_probs(image)
    }
}

impl<T: ProbabilityModel + ?Sized> ProbabilityModel for &T {
    fn class_probs(&self, image: &Raster) -> Result<Tensor> {
        (**self).class_probs(image)
    }
}

/// How confident predictions are tallied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CountMode {
    /// One count per target pixel whose max probability exceeds lambda.
    #[default]
    PerPixel,
    /// One count per target image whose mean per-pixel max probability exceeds lambda.
    PerImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleWeights {
    pub raw_counts: Vec<u64>,
    pub weights: Vec<f64>,
    pub lambda_conf: f64,
    pub mode: CountMode,
    /// Set when every raw count was zero and uniform weights were used.
    pub uniform_fallback: bool,
    /// Fingerprint of the target images the counts were taken on.
    pub target_fingerprint: [u8; 32],
}

impl EnsembleWeights {
    pub fn from_counts(raw_counts: Vec<u64>, lambda_conf: f64, mode: CountMode, target_fingerprint: [u8; 32]) -> Result<Self> {
        if raw_counts.is_empty() {
            return Err(Error::Empty("model list"));
        }
        let total: u64 = raw_counts.iter().sum();
        let (weights, uniform_fallback) = if total == 0 {
            (vec![1.0 / raw_counts.len() as f64; raw_counts.len()], true)
        } else {
            (raw_counts.iter().map(|&c| c as f64 / total as f64).collect(), false)
        };
        Ok(Self { raw_counts, weights, lambda_conf, mode, uniform_fallback, target_fingerprint })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda < 1.0 {
        Ok(())
    } else {
        Err(Error::arg("lambda_conf", "must lie in (0, 1)"))
    }
}

fn split_probs(p: &Tensor) -> (usize, usize) {
    let c = p.shape()[0];
    (c, p.len() / c)
}

/// Largest class probability at every pixel.
fn max_probs(p: &Tensor) -> impl Iterator<Item = f64> + '_ {
    let (c, plane) = split_probs(p);
    (0..plane).map(move |s| (0..c).map(|k| p.data()[k * plane + s]).fold(f64::NEG_INFINITY, f64::max))
}

/// Raw confidence count of one model over the target images.
pub fn confident_count<M: ProbabilityModel>(model: &M, target_images: &[Raster], lambda: f64, mode: CountMode) -> Result<u64> {
    check_lambda(lambda)?;
    if target_images.is_empty() {
        return Err(Error::Empty("target image set"));
    }
    let mut count = 0u64;
    for img in target_images {
        let p = model.class_probs(img)?;
        match mode {
            CountMode::PerPixel => count += max_probs(&p).filter(|&m| m > lambda).count() as u64,
            CountMode::PerImage => {
                let (_, plane) = split_probs(&p);
                let mean = max_probs(&p).sum::<f64>() / plane as f64;
                count += u64::from(mean > lambda);
            }
        }
    }
    Ok(count)
}

pub fn compute_weights<M: ProbabilityModel>(
    models: &[M],
    target_images: &[Raster],
    lambda: f64,
    mode: CountMode,
) -> Result<EnsembleWeights> {
    if models.is_empty() {
        return Err(Error::Empty("model list"));
    }
    let counts = models.iter().map(|m| confident_count(m, target_images, lambda, mode)).collect::<Result<Vec<_>>>()?;
    EnsembleWeights::from_counts(counts, lambda, mode, image_set_fingerprint(target_images))
}

/// Extends existing weights with one new model. Only the new model's count is
/// computed; the others are carried over and everything is renormalised.
pub fn add_source<M: ProbabilityModel>(
    existing: &EnsembleWeights,
    new_model: &M,
    target_images: &[Raster],
) -> Result<EnsembleWeights> {
    if image_set_fingerprint(target_images) != existing.target_fingerprint {
        return Err(Error::TargetMismatch);
    }
    let count = confident_count(new_model, target_images, existing.lambda_conf, existing.mode)?;
    let mut counts = existing.raw_counts.clone();
    counts.push(count);
    EnsembleWeights::from_counts(counts, existing.lambda_conf, existing.mode, existing.target_fingerprint)
}

/// Seeded rule for resolving exact ties in an argmax or a vote.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TieBreak {
    pub seed: u64,
}

impl TieBreak {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// Uniform choice among `tied` (non-empty), reproducible per pixel.
    fn pick(&self, pixel: usize, tied: &[u8]) -> u8 {
        if tied.len() == 1 {
            return tied[0];
        }
        let mut r = derived_rng(self.seed, "tie", pixel as u64);
        tied[r.gen_range(0..tied.len())]
    }
}

/// Argmax over the class axis of `[classes, spatial..]` probabilities.
pub fn argmax_mask(probs: &Tensor, ties: TieBreak) -> Result<LabelMap> {
    let (c, plane) = split_probs(probs);
    let d = probs.data();
    let mut tied = Vec::with_capacity(c);
    let labels = (0..plane)
        .map(|s| {
            let best = (0..c).map(|k| d[k * plane + s]).fold(f64::NEG_INFINITY, f64::max);
            tied.clear();
            tied.extend((0..c).filter(|&k| d[k * plane + s] == best).map(|k| k as u8));
            ties.pick(s, &tied)
        })
        .collect();
    LabelMap::new(probs.shape()[1..].to_vec(), labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedPrediction {
    /// `[classes, spatial..]`, a convex combination of the model distributions.
    pub probs: Tensor,
    pub mask: LabelMap,
}

/// `sum_k w_k * p_k` at every pixel, then argmax.
pub fn aggregate<M: ProbabilityModel>(
    models: &[M],
    weights: &[f64],
    image: &Raster,
    ties: TieBreak,
) -> Result<AggregatedPrediction> {
    if models.is_empty() {
        return Err(Error::Empty("model list"));
    }
    if weights.len() != models.len() {
        return Err(Error::DimMismatch { what: "ensemble weights", expected: models.len(), got: weights.len() });
    }
    let mut acc: Option<Tensor> = None;
    for (m, &w) in models.iter().zip(weights) {
        let p = m.class_probs(image)?;
        match acc.as_mut() {
            None => acc = Some(p.map(|v| w * v)),
            Some(a) => {
                if a.shape() != p.shape() {
                    return Err(Error::shape("aggregate", a.shape(), p.shape()));
                }
                a.data_mut().iter_mut().zip(p.data()).for_each(|(x, y)| *x += w * y);
            }
        }
    }
    let probs = acc.expect("non-empty");
    let mask = argmax_mask(&probs, ties)?;
    Ok(AggregatedPrediction { probs, mask })
}

/// Uniform-weight aggregation.
pub fn average_vote<M: ProbabilityModel>(models: &[M], image: &Raster, ties: TieBreak) -> Result<AggregatedPrediction> {
    let w = vec![1.0 / models.len().max(1) as f64; models.len()];
    aggregate(models, &w, image, ties)
}

/// Per-pixel majority of the models' argmax labels; tied counts are broken by
/// a seeded uniform choice among the tied labels.
pub fn popular_vote<M: ProbabilityModel>(models: &[M], image: &Raster, ties: TieBreak) -> Result<LabelMap> {
    if models.is_empty() {
        return Err(Error::Empty("model list"));
    }
    let masks = models.iter().map(|m| argmax_mask(&m.class_probs(image)?, ties)).collect::<Result<Vec<_>>>()?;
    let dims = masks[0].dims().to_vec();
    if masks.iter().any(|m| m.dims() != dims.as_slice()) {
        return Err(Error::shape("popular_vote", &dims, masks.iter().find(|m| m.dims() != dims.as_slice()).unwrap().dims()));
    }
    let classes = masks.iter().flat_map(|m| m.data().iter()).copied().max().unwrap_or(0) as usize + 1;
    let mut votes = vec![0usize; classes];
    let mut tied = Vec::new();
    let labels = (0..masks[0].data().len())
        .map(|s| {
            votes.fill(0);
            for m in &masks {
                votes[m.data()[s] as usize] += 1;
            }
            let top = *votes.iter().max().expect("classes >= 1");
            tied.clear();
            tied.extend((0..classes).filter(|&k| votes[k] == top).map(|k| k as u8));
            ties.pick(s, &tied)
        })
        .collect();
    LabelMap::new(dims, labels)
}

/// Label-using weight search for oracle evaluation only: start from each
/// model's target Dice, then coordinate ascent on the aggregated Dice.
pub fn oracle_dice_weights<M: ProbabilityModel>(
    models: &[M],
    target_images: &[Raster],
    target_masks: &[LabelMap],
    foreground: u8,
    ties: TieBreak,
) -> Result<Vec<f64>> {
    if models.is_empty() || target_images.is_empty() {
        return Err(Error::Empty("oracle weight inputs"));
    }
    if target_images.len() != target_masks.len() {
        return Err(Error::DimMismatch { what: "target masks", expected: target_images.len(), got: target_masks.len() });
    }
    let probs: Vec<Vec<Tensor>> =
        models.iter().map(|m| target_images.iter().map(|img| m.class_probs(img)).collect()).collect::<Result<_>>()?;
    let score = |w: &[f64]| -> Result<f64> {
        let mut total = 0.0;
        for (i, truth) in target_masks.iter().enumerate() {
            let mut acc = probs[0][i].map(|v| v * w[0]);
            for k in 1..models.len() {
                acc.data_mut().iter_mut().zip(probs[k][i].data()).for_each(|(a, b)| *a += w[k] * b);
            }
            total += dice(&argmax_mask(&acc, ties)?, truth, foreground)?;
        }
        Ok(total / target_masks.len() as f64)
    };
    let normalise = |w: &mut [f64]| {
        let s: f64 = w.iter().sum();
        if s > 0.0 {
            w.iter_mut().for_each(|x| *x /= s);
        } else {
            let n = w.len() as f64;
            w.iter_mut().for_each(|x| *x = 1.0 / n);
        }
    };
    let mut w = Vec::with_capacity(models.len());
    for k in 0..models.len() {
        let mut d = 0.0;
        for (i, truth) in target_masks.iter().enumerate() {
            d += dice(&argmax_mask(&probs[k][i], ties)?, truth, foreground)?;
        }
        w.push(d);
    }
    normalise(&mut w);
    let mut best = score(&w)?;
    for _ in 0..3 {
        for k in 0..w.len() {
            for factor in [0.0, 0.5, 2.0] {
                let mut cand = w.clone();
                cand[k] *= factor;
                normalise(&mut cand);
                let s = score(&cand)?;
                if s > best {
                    best = s;
                    w = cand;
                }
            }
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Returns fixed probabilities regardless of input.
    struct Fixed(Tensor);

    impl ProbabilityModel for Fixed {
        fn class_probs(&self, _: &Raster) -> Result<Tensor> {
            Ok(self.0.clone())
        }
    }

    fn fixed(p: &[[f64; 2]]) -> Fixed {
        let n = p.len();
        let mut data = vec![0.0; 2 * n];
        for (s, q) in p.iter().enumerate() {
            data[s] = q[0];
            data[n + s] = q[1];
        }
        Fixed(Tensor::new(vec![2, n], data).unwrap())
    }

    /// A model confident (0.9) on the first `k` of `n` pixels and undecided elsewhere.
    fn confident_on(k: usize, n: usize) -> Fixed {
        fixed(&(0..n).map(|s| if s < k { [0.9, 0.1] } else { [0.5, 0.5] }).collect::<Vec<_>>())
    }

    fn target(n: usize) -> Vec<Raster> {
        vec![Raster::new(1, vec![n], vec![0.0; n]).unwrap()]
    }

    #[test]
    fn single_model_gets_all_weight() {
        let w = compute_weights(&[confident_on(3, 10)], &target(10), 0.6, CountMode::PerPixel).unwrap();
        assert_eq!(w.weights, vec![1.0]);
    }

    #[test]
    fn counts_thirty_and_ten() {
        let models = [confident_on(30, 50), confident_on(10, 50)];
        let w = compute_weights(&models, &target(50), 0.6, CountMode::PerPixel).unwrap();
        assert_eq!(w.raw_counts, vec![30, 10]);
        assert_eq!(w.weights, vec![0.75, 0.25]);
        let w3 = add_source(&w, &confident_on(40, 50), &target(50)).unwrap();
        assert_eq!(w3.raw_counts, vec![30, 10, 40]);
        assert_eq!(w3.weights, vec![0.375, 0.125, 0.5]);
    }

    #[test]
    fn never_confident_falls_back_to_uniform() {
        let models = [confident_on(30, 50), confident_on(10, 50)];
        let w = compute_weights(&models, &target(50), 0.999, CountMode::PerPixel).unwrap();
        assert_eq!(w.weights, vec![0.5, 0.5]);
        assert!(w.uniform_fallback);
    }

    #[test]
    fn zero_count_newcomer_keeps_ratios() {
        let models = [confident_on(30, 50), confident_on(10, 50)];
        let w = compute_weights(&models, &target(50), 0.6, CountMode::PerPixel).unwrap();
        let w3 = add_source(&w, &confident_on(0, 50), &target(50)).unwrap();
        assert_eq!(w3.weights, vec![0.75, 0.25, 0.0]);
        let dup = add_source(&w, &confident_on(30, 50), &target(50)).unwrap();
        assert_eq!(dup.raw_counts[2], w.raw_counts[0]);
    }

    #[test]
    fn add_source_rejects_other_target() {
        let w = compute_weights(&[confident_on(3, 10)], &target(10), 0.6, CountMode::PerPixel).unwrap();
        let other = vec![Raster::new(1, vec![10], vec![1.0; 10]).unwrap()];
        assert_eq!(add_source(&w, &confident_on(3, 10), &other), Err(Error::TargetMismatch));
    }

    #[test]
    fn per_image_mode_counts_images() {
        let imgs = [target(4), target(4)].concat();
        let c = confident_count(&confident_on(3, 4), &imgs, 0.7, CountMode::PerImage).unwrap();
        // mean max prob = (3 * 0.9 + 0.5) / 4 = 0.8 > 0.7 on both images
        assert_eq!(c, 2);
    }

    #[test]
    fn empty_target_rejected() {
        assert!(compute_weights(&[confident_on(1, 2)], &[], 0.5, CountMode::PerPixel).is_err());
    }

    #[test]
    fn hand_weighted_mixture() {
        let models = [fixed(&[[0.9, 0.1]]), fixed(&[[0.1, 0.9]])];
        let img = &target(1)[0];
        let a = aggregate(&models, &[0.75, 0.25], img, TieBreak::new(0)).unwrap();
        assert!((a.probs.data()[0] - 0.7).abs() < 1e-15);
        assert!((a.probs.data()[1] - 0.3).abs() < 1e-15);
        assert_eq!(a.mask.data(), &[0]);

        let one_hot = aggregate(&models, &[0.0, 1.0], img, TieBreak::new(0)).unwrap();
        assert_eq!(one_hot.probs, models[1].0);

        let av = average_vote(&models, img, TieBreak::new(5)).unwrap();
        assert_eq!(av.probs.data(), &[0.5, 0.5]);
        let again = average_vote(&models, img, TieBreak::new(5)).unwrap();
        assert_eq!(av.mask, again.mask);
    }

    #[test]
    fn identical_models_reproduce_single_prediction() {
        let m = fixed(&[[0.3, 0.7], [0.8, 0.2]]);
        let models = [&m, &m, &m];
        let a = aggregate(&models, &[0.2, 0.3, 0.5], &target(2)[0], TieBreak::new(0)).unwrap();
        for (x, y) in a.probs.data().iter().zip(m.0.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn majority_vote() {
        let zero = fixed(&[[0.8, 0.2]]);
        let one = fixed(&[[0.2, 0.8]]);
        let img = &target(1)[0];
        assert_eq!(popular_vote(&[&zero, &zero, &one], img, TieBreak::new(1)).unwrap().data(), &[0]);
        assert_eq!(popular_vote(&[&one, &one, &one], img, TieBreak::new(1)).unwrap().data(), &[1]);
        let tie = popular_vote(&[&zero, &one], img, TieBreak::new(3)).unwrap();
        assert_eq!(tie, popular_vote(&[&zero, &one], img, TieBreak::new(3)).unwrap());
        let picks: Vec<u8> = (0..32).map(|s| popular_vote(&[&zero, &one], img, TieBreak::new(s)).unwrap().data()[0]).collect();
        assert!(picks.contains(&0) && picks.contains(&1));
    }

    #[test]
    fn oracle_weights_prefer_the_accurate_model() {
        let good = fixed(&[[0.9, 0.1], [0.1, 0.9]]);
        let bad = fixed(&[[0.1, 0.9], [0.9, 0.1]]);
        let truth = LabelMap::new(vec![2], vec![0, 1]).unwrap();
        let imgs = target(2);
        let w = oracle_dice_weights(&[&good, &bad], &imgs, &[truth], 1, TieBreak::new(0)).unwrap();
        assert!(w[0] > w[1]);
    }
}
