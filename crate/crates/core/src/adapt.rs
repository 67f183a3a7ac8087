//! Source pretraining by empirical risk minimisation and single-source
//! adaptation towards an unlabelled target.
//!
//! Adaptation minimises `ce(source batch) + gamma * swd2(g(source), g(target))`
//! over all network parameters, starting from the pretrained weights. Fresh
//! projection directions are drawn at every step.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{self, derive_seed};
use crate::segnet::{ce_loss, sample_sites, SegModel};
use crate::swd::{sample_projections, swd2_on_tape};
use crate::synthdata::{stack_images, DomainDataset, Raster};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainPlan {
    pub epochs_pretrain: usize,
    pub epochs_adapt: usize,
    pub batch_size: usize,
    /// Weight of the alignment term.
    pub gamma: f64,
    /// Number of projection directions per alignment step.
    pub swd_projections: usize,
    /// Confidence threshold used by the ensemble weights.
    pub lambda_conf: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Latent sites drawn per image for the alignment term.
    pub sites_per_image: usize,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            epochs_pretrain: 30,
            epochs_adapt: 30,
            batch_size: 4,
            gamma: 1.0,
            swd_projections: 50,
            lambda_conf: 0.3,
            seed: 0,
            adam: AdamConfig::default(),
            sites_per_image: 64,
        }
    }
}

impl TrainPlan {
    /// Epoch counts may be zero (the phase is skipped); everything else must be positive.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size", "must be at least 1"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::arg("gamma", "must be a non-negative number"));
        }
        if self.swd_projections == 0 {
            return Err(Error::arg("swd_projections", "must be at least 1"));
        }
        if !(self.lambda_conf > 0.0 && self.lambda_conf < 1.0) {
            return Err(Error::arg("lambda_conf", "must lie in (0, 1)"));
        }
        if self.sites_per_image == 0 {
            return Err(Error::arg("sites_per_image", "must be at least 1"));
        }
        self.adam.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub ce: f64,
    pub swd: f64,
    pub total: f64,
}

/// Per-epoch means of the step records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub swd: f64,
    pub total: f64,
    /// Filled only when an evaluation monitor was supplied.
    pub target_dice: Option<f64>,
}

/// Evaluation hook run after every epoch; never consulted by the optimiser.
pub type Monitor<'a> = &'a (dyn Fn(&SegModel) -> Result<f64> + Sync);

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel {
    pub model: SegModel,
    pub source_id: String,
    pub pretrain_history: Vec<EpochRecord>,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// Target mask reads observed while adapting. Always zero.
    pub target_labels_read: usize,
}

fn epoch_mean(records: &[StepRecord], epoch: usize, target_dice: Option<f64>) -> EpochRecord {
    let n = records.len().max(1) as f64;
    EpochRecord {
        epoch,
        ce: records.iter().map(|r| r.ce).sum::<f64>() / n,
        swd: records.iter().map(|r| r.swd).sum::<f64>() / n,
        total: records.iter().map(|r| r.total).sum::<f64>() / n,
        target_dice,
    }
}

fn check_compatible(model: &SegModel, ds: &DomainDataset) -> Result<()> {
    let cfg = model.config();
    if ds.channels() != cfg.in_channels || ds.dims().len() != cfg.spatial_rank {
        return Err(Error::DomainMismatch {
            domain: ds.domain_id().into(),
            reason: alloc::format!("{} channel(s) over {:?} do not fit the network", ds.channels(), ds.dims()),
        });
    }
    if ds.num_classes() != cfg.num_classes {
        return Err(Error::DomainMismatch {
            domain: ds.domain_id().into(),
            reason: alloc::format!("{} classes, network has {}", ds.num_classes(), cfg.num_classes),
        });
    }
    Ok(())
}

/// Empirical risk minimisation over the pooled samples of `sets`.
pub fn train_erm(
    model: &mut SegModel,
    sets: &[&DomainDataset],
    epochs: usize,
    plan: &TrainPlan,
    stream: &str,
) -> Result<Vec<EpochRecord>> {
    plan.validate()?;
    if sets.is_empty() {
        return Err(Error::Empty("training set list"));
    }
    for ds in sets {
        if !ds.is_labeled() {
            return Err(Error::Unlabeled(ds.domain_id().into()));
        }
        check_compatible(model, ds)?;
    }
    let pool: Vec<(usize, usize)> = sets.iter().enumerate().flat_map(|(k, ds)| (0..ds.len()).map(move |i| (k, i))).collect();
    let mut r = rng::derived_rng(plan.seed, stream, 0);
    let mut adam = AdamState::new(plan.adam, model.params())?;
    let mut history = Vec::with_capacity(epochs);
    let mut step = 0;
    for epoch in 0..epochs {
        let mut order = pool.clone();
        order.shuffle(&mut r);
        let mut records = Vec::new();
        for chunk in order.chunks(plan.batch_size) {
            let images: Vec<&Raster> = chunk.iter().map(|&(k, i)| &sets[k].images()[i]).collect();
            let mut labels = Vec::new();
            for &(k, i) in chunk {
                labels.extend_from_slice(sets[k].mask(i)?.data());
            }
            let mut tape = Tape::new();
            let b = model.bind(&mut tape);
            let x = tape.leaf(stack_images(images)?, false);
            let logits = model.forward(&mut tape, &b, x)?;
            let loss = ce_loss(&mut tape, logits, &labels)?;
            tape.backward_into(loss, model.params_mut())?;
            adam.step(model.params_mut())?;
            let ce = tape.value(loss).item()?;
            records.push(StepRecord { step, ce, swd: 0.0, total: ce });
            step += 1;
        }
        history.push(epoch_mean(&records, epoch, None));
    }
    Ok(history)
}

/// Trains `model` on the labelled source alone.
pub fn pretrain(model: &mut SegModel, source: &DomainDataset, plan: &TrainPlan) -> Result<Vec<EpochRecord>> {
    train_erm(model, &[source], plan.epochs_pretrain, plan, "pretrain")
}

/// Adapts a pretrained model towards the target images. Target masks, if the
/// dataset carries any, are never read.
pub fn adapt(
    model: SegModel,
    source: &DomainDataset,
    target: &DomainDataset,
    plan: &TrainPlan,
    monitor: Option<Monitor<'_>>,
) -> Result<AdaptedModel> {
    plan.validate()?;
    if !source.is_labeled() {
        return Err(Error::Unlabeled(source.domain_id().into()));
    }
    check_compatible(&model, source)?;
    check_compatible(&model, target)?;
    if source.dims() != target.dims() {
        return Err(Error::DomainMismatch {
            domain: target.domain_id().into(),
            reason: alloc::format!("spatial shape {:?} differs from source {:?}", target.dims(), source.dims()),
        });
    }
    let reads_before = target.label_reads();
    let mut model = model;
    let latent_dim = model.config().latent_dim;
    let mut r = rng::derived_rng(plan.seed, "adapt", 0);
    let mut adam = AdamState::new(plan.adam, model.params())?;
    let mut target_order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(plan.epochs_adapt);
    let mut steps = Vec::new();
    let mut step = 0usize;
    for epoch in 0..plan.epochs_adapt {
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.shuffle(&mut r);
        let mut records = Vec::new();
        for chunk in order.chunks(plan.batch_size) {
            let mut tgt = Vec::with_capacity(plan.batch_size);
            while tgt.len() < plan.batch_size {
                if target_order.is_empty() {
                    target_order = (0..target.len()).collect();
                    target_order.shuffle(&mut r);
                }
                tgt.push(target_order.pop().expect("refilled"));
            }
            let mut labels = Vec::new();
            for &i in chunk {
                labels.extend_from_slice(source.mask(i)?.data());
            }
            let mut tape = Tape::new();
            let b = model.bind(&mut tape);
            let xs = tape.leaf(stack_images(chunk.iter().map(|&i| &source.images()[i]))?, false);
            let xt = tape.leaf(stack_images(tgt.iter().map(|&i| &target.images()[i]))?, false);
            let enc_s = model.encode(&mut tape, &b, xs)?;
            let logits = model.classify(&mut tape, &b, &enc_s)?;
            let ce = ce_loss(&mut tape, logits, &labels)?;
            let enc_t = model.encode(&mut tape, &b, xt)?;

            let latent_sites: usize = tape.value(enc_s.latent).shape()[2..].iter().product();
            let rows_s = sample_sites(&mut r, chunk.len(), latent_sites, plan.sites_per_image)?;
            let rows_t = sample_sites(&mut r, tgt.len(), latent_sites, plan.sites_per_image)?;
            let emb_s = tape.gather_sites(enc_s.latent, &rows_s)?;
            let emb_t = tape.gather_sites(enc_t.latent, &rows_t)?;
            let proj = sample_projections(plan.swd_projections, latent_dim, derive_seed(plan.seed, "projections", step as u64))?;
            let swd = swd2_on_tape(&mut tape, emb_s, emb_t, &proj)?;
            let weighted = tape.scale(swd, plan.gamma);
            let total = tape.add(ce, weighted)?;
            tape.backward_into(total, model.params_mut())?;
            adam.step(model.params_mut())?;
            let rec =
                StepRecord { step, ce: tape.value(ce).item()?, swd: tape.value(swd).item()?, total: tape.value(total).item()? };
            records.push(rec);
            steps.push(rec);
            step += 1;
        }
        let dice = monitor.map(|m| m(&model)).transpose()?;
        history.push(epoch_mean(&records, epoch, dice));
    }
    Ok(AdaptedModel {
        model,
        source_id: source.domain_id().into(),
        pretrain_history: Vec::new(),
        history,
        steps,
        target_labels_read: target.label_reads() - reads_before,
    })
}

/// Pretrains a fresh copy of `model` on the source and adapts it to the target.
pub fn train_source(
    model: SegModel,
    source: &DomainDataset,
    target: &DomainDataset,
    plan: &TrainPlan,
    monitor: Option<Monitor<'_>>,
) -> Result<(SegModel, AdaptedModel)> {
    let mut model = model;
    let pre = pretrain(&mut model, source, plan)?;
    let pretrained = model.clone();
    let mut adapted = adapt(model, source, target, plan, monitor)?;
    adapted.pretrain_history = pre;
    Ok((pretrained, adapted))
}
