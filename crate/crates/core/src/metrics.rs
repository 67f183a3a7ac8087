//! Dice overlap, cross-entropy evaluation and per-source diagnostics of the
//! multi-source target-error bound
//! `e_T <= sum_k w_k (e_Sk + W(T, S_k) + sqrt(2 ln(1/xi) / zeta) (1/sqrt(N_k) + 1/sqrt(M)) + e_Ck)`.

use alloc::string::String;
use alloc::vec::Vec;

use crate::adapt::{train_erm, TrainPlan};
use crate::ensemble::ProbabilityModel;
use crate::error::{Error, Result};
use crate::segnet::{NetConfig, SegModel};
use crate::swd::{swd2, ProjectionSet};
use crate::synthdata::{DomainDataset, LabelMap, Raster};
use crate::tensor::Tensor;

/// `2 |X ∩ Y| / (|X| + |Y|)` for the `foreground` class; 1.0 when both are empty.
pub fn dice(pred: &LabelMap, truth: &LabelMap, foreground: u8) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape("dice", pred.dims(), truth.dims()));
    }
    let (mut inter, mut np, mut nt) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let (a, b) = (p == foreground, t == foreground);
        np += a as usize;
        nt += b as usize;
        inter += (a && b) as usize;
    }
    if np + nt == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + nt) as f64)
}

/// Mean per-image Dice.
pub fn mean_dice(preds: &[LabelMap], truths: &[LabelMap], foreground: u8) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::DimMismatch { what: "mask lists", expected: truths.len(), got: preds.len() });
    }
    if preds.is_empty() {
        return Err(Error::Empty("mask list"));
    }
    let mut s = 0.0;
    for (p, t) in preds.iter().zip(truths) {
        s += dice(p, t, foreground)?;
    }
    Ok(s / preds.len() as f64)
}

fn check_probs_labels(probs: &Tensor, labels: &[u8]) -> Result<(usize, usize)> {
    let c = probs.shape()[0];
    let plane = probs.len() / c;
    if plane != labels.len() {
        return Err(Error::shape("cross-entropy", probs.shape(), &[labels.len()]));
    }
    if let Some(pixel) = labels.iter().position(|&l| l as usize >= c) {
        return Err(Error::LabelOutOfRange { pixel, label: labels[pixel], classes: c });
    }
    Ok((c, plane))
}

/// Summed `-ln p[y]` over pixels of `[classes, spatial..]` probabilities.
pub fn ce_sum(probs: &Tensor, labels: &[u8]) -> Result<f64> {
    let (_, plane) = check_probs_labels(probs, labels)?;
    Ok((0..plane).map(|s| -libm::log(probs.data()[labels[s] as usize * plane + s])).sum())
}

/// Pixel sums of the mixture cross-entropy `-ln sum_k w_k p_k[y]` and of the
/// weighted per-model cross-entropies `sum_k w_k (-ln p_k[y])`.
pub fn mixture_ce_sums(weights: &[f64], probs: &[Tensor], labels: &[u8]) -> Result<(f64, f64)> {
    if weights.len() != probs.len() || probs.is_empty() {
        return Err(Error::DimMismatch { what: "mixture components", expected: weights.len(), got: probs.len() });
    }
    let (_, plane) = check_probs_labels(&probs[0], labels)?;
    for p in probs {
        if p.shape() != probs[0].shape() {
            return Err(Error::shape("mixture", probs[0].shape(), p.shape()));
        }
    }
    let (mut mix, mut weighted) = (0.0, 0.0);
    for s in 0..plane {
        let off = labels[s] as usize * plane + s;
        let mut q = 0.0;
        for (w, p) in weights.iter().zip(probs) {
            q += w * p.data()[off];
            if *w > 0.0 {
                weighted += w * -libm::log(p.data()[off]);
            }
        }
        mix -= libm::log(q);
    }
    Ok((mix, weighted))
}

/// Mean pixel cross-entropy of a model over labelled images.
pub fn model_ce<M: ProbabilityModel>(model: &M, images: &[Raster], masks: &[LabelMap]) -> Result<f64> {
    if images.len() != masks.len() || images.is_empty() {
        return Err(Error::DimMismatch { what: "labelled images", expected: images.len(), got: masks.len() });
    }
    let (mut total, mut count) = (0.0, 0usize);
    for (img, m) in images.iter().zip(masks) {
        total += ce_sum(&model.class_probs(img)?, m.data())?;
        count += m.data().len();
    }
    Ok(total / count as f64)
}

/// Mean pixel cross-entropy of the weighted mixture, and the weighted mean of
/// the per-model cross-entropies over the same pixels.
pub fn ensemble_ce<M: ProbabilityModel>(
    models: &[M],
    weights: &[f64],
    images: &[Raster],
    masks: &[LabelMap],
) -> Result<(f64, f64)> {
    if images.len() != masks.len() || images.is_empty() {
        return Err(Error::DimMismatch { what: "labelled images", expected: images.len(), got: masks.len() });
    }
    let (mut mix, mut weighted, mut count) = (0.0, 0.0, 0usize);
    for (img, m) in images.iter().zip(masks) {
        let probs = models.iter().map(|md| md.class_probs(img)).collect::<Result<Vec<_>>>()?;
        let (a, b) = mixture_ce_sums(weights, &probs, m.data())?;
        mix += a;
        weighted += b;
        count += m.data().len();
    }
    Ok((mix / count as f64, weighted / count as f64))
}

/// `sqrt(2 ln(1/xi) / zeta) * (sqrt(1/n) + sqrt(1/m))` for `0 < xi <= 1`, `0 < zeta < sqrt 2`.
pub fn complexity_term(xi: f64, zeta: f64, n: usize, m: usize) -> Result<f64> {
    if !(xi > 0.0 && xi <= 1.0) {
        return Err(Error::arg("xi", "must lie in (0, 1]"));
    }
    if !(zeta > 0.0 && zeta < core::f64::consts::SQRT_2) {
        return Err(Error::arg("zeta", "must lie in (0, sqrt 2)"));
    }
    if n == 0 || m == 0 {
        return Err(Error::arg("sample counts", "must be positive"));
    }
    let scale = libm::sqrt(2.0 * libm::log(1.0 / xi) / zeta);
    Ok(scale * (libm::sqrt(1.0 / n as f64) + libm::sqrt(1.0 / m as f64)))
}

/// Measured inputs of one source's bound terms.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceTerms {
    pub source_id: String,
    /// Cross-entropy of the adapted model on its own labelled source.
    pub source_error: f64,
    /// Sliced estimate of the latent-space distance to the target.
    pub swd: f64,
    pub source_samples: usize,
    pub target_samples: usize,
    /// Joint-training error term; only measurable with target labels.
    pub joint_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub source_id: String,
    pub weight: f64,
    pub source_error: f64,
    pub swd: f64,
    pub complexity: f64,
    pub joint_error: Option<f64>,
}

impl BoundRow {
    /// `e_S + W + complexity + e_C`, when `e_C` is known.
    pub fn total(&self) -> Option<f64> {
        self.joint_error.map(|e| self.source_error + self.swd + self.complexity + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundTable {
    pub xi: f64,
    pub zeta: f64,
    pub rows: Vec<BoundRow>,
}

impl BoundTable {
    /// `sum_k w_k (e_Sk + W_k + complexity_k + e_Ck)`; `None` unless every `e_Ck` was measured.
    pub fn right_hand_side(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.total().map(|t| r.weight * t)).sum()
    }
}

pub fn bound_terms(terms: &[SourceTerms], weights: &[f64], xi: f64, zeta: f64) -> Result<BoundTable> {
    if terms.len() != weights.len() {
        return Err(Error::DimMismatch { what: "bound weights", expected: terms.len(), got: weights.len() });
    }
    let rows = terms
        .iter()
        .zip(weights)
        .map(|(t, &w)| {
            if t.source_error < 0.0 || t.swd < 0.0 {
                return Err(Error::arg("terms", "errors and distances must be non-negative"));
            }
            Ok(BoundRow {
                source_id: t.source_id.clone(),
                weight: w,
                source_error: t.source_error,
                swd: t.swd,
                complexity: complexity_term(xi, zeta, t.source_samples, t.target_samples)?,
                joint_error: t.joint_error,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundTable { xi, zeta, rows })
}

/// Measures a source's error and latent distance to the target. Runs where
/// the source data lives; the target side needs only images.
#[allow(clippy::too_many_arguments)]
pub fn measure_source_terms(
    model: &SegModel,
    source_id: &str,
    source_images: &[Raster],
    source_masks: &[LabelMap],
    target_images: &[Raster],
    proj: &ProjectionSet,
    sites_per_image: usize,
    seed: u64,
) -> Result<SourceTerms> {
    let source_error = model_ce(model, source_images, source_masks)?;
    let es = model.embed(source_images, sites_per_image, crate::rng::derive_seed(seed, "bound-source", 0), source_id)?;
    let et = model.embed(target_images, sites_per_image, crate::rng::derive_seed(seed, "bound-target", 0), "target")?;
    Ok(SourceTerms {
        source_id: source_id.into(),
        source_error,
        swd: swd2(&es, &et, proj)?,
        source_samples: es.rows(),
        target_samples: et.rows(),
        joint_error: None,
    })
}

/// Joint-error terms `e_Ck = e_Sk(h*) + e_T(h*)` of one model `h*` trained by
/// empirical risk minimisation on every labelled set at once. Needs target
/// labels, so it belongs to oracle evaluation only.
pub fn joint_error_terms(
    net: NetConfig,
    plan: &TrainPlan,
    sources: &[&DomainDataset],
    labeled_target: &DomainDataset,
) -> Result<Vec<f64>> {
    let mut sets: Vec<&DomainDataset> = sources.to_vec();
    sets.push(labeled_target);
    let mut joint = SegModel::new(net, crate::rng::derive_seed(plan.seed, "joint-init", 0))?;
    train_erm(&mut joint, &sets, plan.epochs_pretrain, plan, "joint")?;
    let e_t = model_ce(&joint, labeled_target.images(), labeled_target.masks()?)?;
    sources.iter().map(|s| Ok(model_ce(&joint, s.images(), s.masks()?)? + e_t)).collect()
}

/// Target Dice of every aggregation mode; absent outside oracle evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnsembleDice {
    pub fmuda: Option<f64>,
    pub popular_vote: Option<f64>,
    pub average_vote: Option<f64>,
    pub best_single: Option<f64>,
}

/// Everything a run reports.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub seed: u64,
    pub target_id: String,
    pub aggregation: String,
    pub oracle_mode: bool,
    pub source_ids: Vec<String>,
    /// Target Dice of each adapted model (oracle mode only).
    pub per_model_dice: Vec<Option<f64>>,
    pub ensemble: EnsembleDice,
    pub raw_counts: Vec<u64>,
    pub weights: Vec<f64>,
    pub lambda_conf: f64,
    pub uniform_fallback: bool,
    pub bound: Option<BoundTable>,
    /// Measured target cross-entropy of the aggregated model (oracle mode only).
    pub target_ce: Option<f64>,
    pub target_label_reads_during_training: usize,
    /// Flattened configuration snapshot.
    pub config: Vec<(String, String)>,
    pub timestamp: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn mask(bits: &[u8]) -> LabelMap {
        LabelMap::new(vec![bits.len()], bits.to_vec()).unwrap()
    }

    #[test]
    fn dice_cases() {
        let a = mask(&[1, 1, 0, 0]);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice(&a, &mask(&[0, 0, 1, 1]), 1).unwrap(), 0.0);
        // |pred| = 4, |truth| = 6, overlap 3
        let pred = mask(&[1, 1, 1, 1, 0, 0, 0, 0, 0]);
        let truth = mask(&[0, 1, 1, 1, 1, 1, 1, 0, 0]);
        assert!((dice(&pred, &truth, 1).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(dice(&mask(&[0, 0]), &mask(&[0, 0]), 1).unwrap(), 1.0);
        assert!(dice(&mask(&[0]), &mask(&[0, 0]), 1).is_err());
    }

    #[test]
    fn complexity_examples() {
        assert_eq!(complexity_term(1.0, 1.0, 10, 10).unwrap(), 0.0);
        let v = complexity_term(libm::exp(-1.0), 1.0, 100, 100).unwrap();
        assert!((v - 0.2 * core::f64::consts::SQRT_2).abs() < 1e-12);
        assert!((v - 0.2828).abs() < 1e-4);
        assert!(complexity_term(0.0, 1.0, 1, 1).is_err());
        assert!(complexity_term(0.5, 1.5, 1, 1).is_err());
    }

    #[test]
    fn bound_rhs_needs_every_joint_term() {
        let t = |e: Option<f64>| SourceTerms {
            source_id: "s".into(),
            source_error: 0.1,
            swd: 0.2,
            source_samples: 100,
            target_samples: 100,
            joint_error: e,
        };
        let table = bound_terms(&[t(Some(0.3)), t(None)], &[0.5, 0.5], 1.0, 1.0).unwrap();
        assert_eq!(table.right_hand_side(), None);
        let table = bound_terms(&[t(Some(0.3)), t(Some(0.1))], &[0.5, 0.5], 1.0, 1.0).unwrap();
        assert!((table.right_hand_side().unwrap() - (0.5 * 0.6 + 0.5 * 0.4)).abs() < 1e-15);
    }

    #[test]
    fn mixture_is_no_worse_than_components() {
        let p1 = Tensor::new(vec![2, 2], vec![0.9, 0.2, 0.1, 0.8]).unwrap();
        let p2 = Tensor::new(vec![2, 2], vec![0.3, 0.6, 0.7, 0.4]).unwrap();
        let (mix, weighted) = mixture_ce_sums(&[0.25, 0.75], &[p1, p2], &[0, 1]).unwrap();
        assert!(mix <= weighted);
    }
}
