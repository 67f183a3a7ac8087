//! End-to-end stages over files: dataset generation, federated runs,
//! evaluation against target masks, and parameter sweeps.

use std::path::{Path, PathBuf};

use fmuda_core::adapt::adapt;
use fmuda_core::ensemble::{self, CountMode, ProbabilityModel, TieBreak};
use fmuda_core::fednode::{audit_check, node_plan, AuditReport, Federation, Scheduler};
use fmuda_core::metrics::{self, bound_terms, EnsembleDice, MetricsReport};
use fmuda_core::synthdata::generate_domains;
use fmuda_core::{DomainDataset, LabelMap, Raster, SegModel};

use crate::checkpoint;
use crate::config::{Aggregation, GenConfig, RunConfig};
use crate::error::{self, Error, Result, Tag};
use crate::export;
use crate::manifest::{DataRoot, DomainEntry, Manifest};
use crate::ndr;
use crate::report;
use crate::sched::Threaded;

pub const FOREGROUND: u8 = 1;

/// Per-domain line of a generation summary.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSummary {
    pub id: String,
    pub images: usize,
    pub mean_intensity: f64,
    pub foreground_fraction: f64,
}

/// Writes NDR images and masks for every configured domain plus a manifest.
pub fn generate(cfg: &GenConfig, out: &Path, force: bool) -> Result<Vec<DomainSummary>> {
    if out.exists() {
        let non_empty = std::fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::invalid("cli", format!("{} exists and is not empty (use --force to overwrite)", out.display())));
        }
    }
    if cfg.domains.is_empty() {
        return Err(Error::invalid("synthdata", "at least one domain is required"));
    }
    if cfg.seed > i64::MAX as u64 {
        return Err(Error::invalid("config", "seed must not exceed 2^63 - 1"));
    }
    let shifts = cfg.shifts();
    let domains = generate_domains(cfg.seed, cfg.images_per_domain, &cfg.dims, cfg.num_classes, &shifts).tag("synthdata")?;
    let mut entries = Vec::new();
    let mut summary = Vec::new();
    for (k, ds) in domains.iter().enumerate() {
        let id = ds.domain_id().to_string();
        let mut entry = DomainEntry { id: id.clone(), images: Vec::new(), masks: Vec::new(), shift: Some(cfg.domains[k]) };
        let (mut sum, mut fg, mut px) = (0.0, 0usize, 0usize);
        for (i, img) in ds.images().iter().enumerate() {
            let rel = format!("{id}/image_{i:03}.ndr");
            ndr::write_raster(&out.join(&rel), img)?;
            entry.images.push(rel);
            let mask = ds.mask(i).tag("synthdata")?;
            let rel = format!("{id}/mask_{i:03}.ndr");
            ndr::write_mask(&out.join(&rel), mask)?;
            entry.masks.push(rel);
            sum += img.data().iter().sum::<f64>();
            px += img.data().len();
            fg += mask.data().iter().filter(|&&l| l == FOREGROUND).count();
        }
        summary.push(DomainSummary {
            id,
            images: ds.len(),
            mean_intensity: sum / px as f64,
            foreground_fraction: fg as f64 / px as f64,
        });
        entries.push(entry);
    }
    let first = &domains[0];
    Manifest {
        seed: cfg.seed,
        num_classes: cfg.num_classes,
        channels: first.channels(),
        dims: cfg.dims.clone(),
        domains: entries,
    }
    .save(&out.join("manifest.toml"))?;
    Ok(summary)
}

pub fn predict_mask<M: ProbabilityModel>(model: &M, image: &Raster, ties: TieBreak) -> Result<LabelMap> {
    ensemble::argmax_mask(&model.class_probs(image).tag("segnet")?, ties).tag("ensemble")
}

pub fn model_dice<M: ProbabilityModel>(model: &M, images: &[Raster], masks: &[LabelMap], ties: TieBreak) -> Result<f64> {
    let preds = images.iter().map(|i| predict_mask(model, i, ties)).collect::<Result<Vec<_>>>()?;
    metrics::mean_dice(&preds, masks, FOREGROUND).tag("metrics")
}

/// Ensemble masks of the target under one aggregation mode. `Suda` uses the
/// single model with the largest weight.
pub fn ensemble_masks<M: ProbabilityModel>(
    models: &[M],
    weights: &[f64],
    images: &[Raster],
    mode: Aggregation,
    ties: TieBreak,
) -> Result<Vec<LabelMap>> {
    images
        .iter()
        .map(|img| match mode {
            Aggregation::Fmuda => Ok(ensemble::aggregate(models, weights, img, ties).tag("ensemble")?.mask),
            Aggregation::Av => Ok(ensemble::average_vote(models, img, ties).tag("ensemble")?.mask),
            Aggregation::Pv => ensemble::popular_vote(models, img, ties).tag("ensemble"),
            Aggregation::Suda => {
                let best = (0..weights.len()).fold(0, |b, k| if weights[k] > weights[b] { k } else { b });
                predict_mask(&models[best], img, ties)
            }
        })
        .collect()
}

/// Target scores of a trained ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per_model: Vec<f64>,
    pub fmuda: f64,
    pub popular_vote: f64,
    pub average_vote: f64,
    pub best_single: f64,
    /// Mean pixel cross-entropy of the weighted mixture on the target.
    pub target_ce: f64,
    /// Weighted mean of the per-model target cross-entropies.
    pub weighted_model_ce: f64,
}

impl Evaluation {
    pub fn dice(&self, mode: Aggregation) -> f64 {
        match mode {
            Aggregation::Fmuda => self.fmuda,
            Aggregation::Pv => self.popular_vote,
            Aggregation::Av => self.average_vote,
            Aggregation::Suda => self.best_single,
        }
    }

    pub fn as_report(&self, mode: Aggregation) -> EnsembleDice {
        if mode == Aggregation::Suda {
            return EnsembleDice { best_single: Some(self.best_single), ..EnsembleDice::default() };
        }
        EnsembleDice {
            fmuda: Some(self.fmuda),
            popular_vote: Some(self.popular_vote),
            average_vote: Some(self.average_vote),
            best_single: Some(self.best_single),
        }
    }
}

pub fn evaluate<M: ProbabilityModel>(
    models: &[M],
    weights: &[f64],
    images: &[Raster],
    masks: &[LabelMap],
    ties: TieBreak,
) -> Result<Evaluation> {
    let per_model = models.iter().map(|m| model_dice(m, images, masks, ties)).collect::<Result<Vec<_>>>()?;
    let score = |mode| -> Result<f64> {
        let preds = ensemble_masks(models, weights, images, mode, ties)?;
        metrics::mean_dice(&preds, masks, FOREGROUND).tag("metrics")
    };
    let (target_ce, weighted_model_ce) = metrics::ensemble_ce(models, weights, images, masks).tag("metrics")?;
    Ok(Evaluation {
        best_single: per_model.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        per_model,
        fmuda: score(Aggregation::Fmuda)?,
        popular_vote: score(Aggregation::Pv)?,
        average_vote: score(Aggregation::Av)?,
        target_ce,
        weighted_model_ce,
    })
}

pub fn checkpoint_path(out: &Path, id: &str, stage: &str) -> PathBuf {
    out.join("checkpoints").join(format!("{id}.{stage}.ckpt"))
}

fn unix_time() -> String {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs().to_string()).unwrap_or_default()
}

/// Resolves the source list: configured ones, or every other domain.
pub fn source_ids(cfg: &RunConfig, manifest: &Manifest) -> Result<Vec<String>> {
    if manifest.domain(&cfg.target).is_none() {
        return Err(Error::invalid("synthdata", format!("manifest has no target domain `{}`", cfg.target)));
    }
    let ids: Vec<String> = if cfg.sources.is_empty() {
        manifest.domain_ids().into_iter().filter(|d| *d != cfg.target).map(String::from).collect()
    } else {
        cfg.sources.clone()
    };
    if ids.is_empty() {
        return Err(Error::invalid("fednode", "no source domains besides the target"));
    }
    for id in &ids {
        if manifest.domain(id).is_none() {
            return Err(Error::invalid("synthdata", format!("manifest has no domain `{id}`")));
        }
    }
    Ok(ids)
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub report_path: PathBuf,
    pub audit: AuditReport,
    pub trained: Vec<String>,
    pub adopted: Vec<String>,
    /// Target mask files opened during the run.
    pub target_mask_files_read: usize,
    pub evaluation: Option<Evaluation>,
}

/// Trains the federation described by `cfg` and writes checkpoints, curves,
/// predictions, the audit log and the report to `cfg.output`.
///
/// With `add_sources`, the configured sources must already have adapted
/// checkpoints in the output directory; they are reused untouched and only
/// the added domains are trained.
pub fn run(cfg: &RunConfig, add_sources: &[String]) -> Result<RunOutcome> {
    cfg.validate()?;
    let root = DataRoot::open(&cfg.manifest)?;
    let prior = source_ids(cfg, &root.manifest)?;
    let (prior, fresh): (Vec<String>, Vec<String>) = if add_sources.is_empty() {
        (Vec::new(), prior)
    } else {
        for id in add_sources {
            if prior.contains(id) || *id == cfg.target || root.manifest.domain(id).is_none() {
                return Err(Error::invalid("cli", format!("cannot add `{id}`: unknown, already a source, or the target")));
            }
        }
        (prior, add_sources.to_vec())
    };
    let mut effective = cfg.clone();
    effective.sources = prior.iter().chain(&fresh).cloned().collect();
    let cfg = &effective;
    let net = cfg.net_config();
    let plan = cfg.plan();
    let target = root.load_domain(&cfg.target, cfg.oracle_mode)?;
    let load = |ids: &[String]| ids.iter().map(|id| root.load_domain(id, true)).collect::<Result<Vec<_>>>();
    let prior_sets = load(&prior)?;
    let fresh_sets = load(&fresh)?;
    let out = &cfg.output;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let reads_before = target.label_reads();
    let mut fed = Federation::new(net, plan, &target).tag("fednode")?.with_count_mode(cfg.count_mode.into());
    for ds in &prior_sets {
        let model = checkpoint::load_model(&checkpoint_path(out, ds.domain_id(), "adapted"), net)?;
        fed.adopt_source(ds, model).tag("fednode")?;
    }
    let workers = if cfg.workers == 0 { fresh_sets.len() } else { cfg.workers };
    let fresh_refs: Vec<&DomainDataset> = fresh_sets.iter().collect();
    fed.add_sources(&fresh_refs, &Threaded::new(workers), None).tag("fednode")?;
    let target_label_reads = target.label_reads() - reads_before;

    for node in fed.nodes() {
        let id = &node.id.name;
        checkpoint::save_model(&checkpoint_path(out, id, "pretrained"), &node.pretrained)?;
        checkpoint::save_model(&checkpoint_path(out, id, "adapted"), &node.adapted.model)?;
        error::write(&out.join("curves").join(format!("{id}.steps.csv")), export::steps_csv(&node.adapted.steps))?;
        error::write(
            &out.join("curves").join(format!("{id}.epochs.csv")),
            export::epochs_csv(&node.adapted.pretrain_history, &node.adapted.history),
        )?;
    }

    error::write(&out.join("audit.log"), export::audit_lines(fed.log()))?;
    let audit = audit_check(fed.log());
    if let Some(f) = &audit.failure {
        return Err(Error::invalid(
            "fednode",
            format!(
                "audit failed at record {}: {} -> {} ({}): {}",
                f.index,
                f.message.from,
                f.message.to,
                f.message.kind.as_str(),
                f.reason
            ),
        ));
    }

    let weights = fed.weights().expect("at least one source").clone();
    let ties = TieBreak::new(cfg.seed);
    let models = fed.models();
    let masks_out = ensemble_masks(models, &weights.weights, fed.target_images(), cfg.aggregation, ties)?;
    for (i, m) in masks_out.iter().enumerate() {
        ndr::write_mask(&out.join("predictions").join(format!("{}_{i:03}.ndr", cfg.target)), m)?;
    }

    let source_ids: Vec<String> = fed.source_names().into_iter().map(String::from).collect();
    let mut terms = fed.source_terms().to_vec();
    let mut evaluation = None;
    if cfg.oracle_mode {
        let masks = target.masks().tag("synthdata")?;
        let ev = evaluate(models, &weights.weights, fed.target_images(), masks, ties)?;
        let all_sets: Vec<&DomainDataset> = prior_sets.iter().chain(&fresh_sets).collect();
        let by_name: Vec<&DomainDataset> = source_ids
            .iter()
            .map(|id| *all_sets.iter().find(|d| d.domain_id() == id).expect("every source was loaded"))
            .collect();
        let joint = metrics::joint_error_terms(net, &plan, &by_name, &target).tag("metrics")?;
        for (t, e) in terms.iter_mut().zip(joint) {
            t.joint_error = Some(e);
        }
        evaluation = Some(ev);
    }
    let bound = bound_terms(&terms, &weights.weights, cfg.xi, cfg.zeta).tag("metrics")?;

    if cfg.export_embeddings {
        let mut batches = Vec::new();
        let all: Vec<&DomainDataset> = prior_sets.iter().chain(&fresh_sets).collect();
        for (k, id) in source_ids.iter().enumerate() {
            let ds = all.iter().find(|d| d.domain_id() == id).expect("loaded");
            let seed = fmuda_core::rng::derive_seed(cfg.seed, "export", k as u64);
            batches.push(models[k].embed(ds.images(), plan.sites_per_image, seed, id).tag("segnet")?);
            batches.push(
                models[k]
                    .embed(fed.target_images(), plan.sites_per_image, seed, &format!("{}@{id}", cfg.target))
                    .tag("segnet")?,
            );
        }
        error::write(&out.join("embeddings.csv"), export::embeddings_csv(&batches))?;
    }

    let report = MetricsReport {
        seed: cfg.seed,
        target_id: cfg.target.clone(),
        aggregation: cfg.aggregation.to_string(),
        oracle_mode: cfg.oracle_mode,
        per_model_dice: match &evaluation {
            Some(ev) => ev.per_model.iter().map(|&d| Some(d)).collect(),
            None => vec![None; source_ids.len()],
        },
        source_ids,
        ensemble: evaluation.as_ref().map(|e| e.as_report(cfg.aggregation)).unwrap_or_default(),
        raw_counts: weights.raw_counts.clone(),
        weights: weights.weights.clone(),
        lambda_conf: weights.lambda_conf,
        uniform_fallback: weights.uniform_fallback,
        bound: Some(bound),
        target_ce: evaluation.as_ref().map(|e| e.target_ce),
        target_label_reads_during_training: target_label_reads,
        config: cfg.snapshot(),
        timestamp: Some(unix_time()),
    };
    let report_path = out.join("report.txt");
    report::emit_report(&report, &report_path)?;
    cfg.save(&out.join("run.toml"))?;
    Ok(RunOutcome {
        report,
        report_path,
        audit,
        trained: fresh,
        adopted: prior,
        target_mask_files_read: root.mask_files_read(&cfg.target),
        evaluation,
    })
}

fn load_stage(cfg: &RunConfig, ids: &[String], stage: &str) -> Result<Vec<SegModel>> {
    ids.iter().map(|id| checkpoint::load_model(&checkpoint_path(&cfg.output, id, stage), cfg.net_config())).collect()
}

/// Scores the adapted checkpoints of a finished run against the target masks
/// and writes `eval_<mode>.txt`.
pub fn eval(cfg: &RunConfig, mode: Aggregation) -> Result<(MetricsReport, Evaluation)> {
    cfg.validate()?;
    let root = DataRoot::open(&cfg.manifest)?;
    let ids = source_ids(cfg, &root.manifest)?;
    let models = load_stage(cfg, &ids, "adapted")?;
    let target = root.load_domain(&cfg.target, true)?;
    let cmode: CountMode = cfg.count_mode.into();
    let weights = ensemble::compute_weights(&models, target.images(), cfg.train.lambda_conf, cmode).tag("ensemble")?;
    let ev = evaluate(&models, &weights.weights, target.images(), target.masks().tag("synthdata")?, TieBreak::new(cfg.seed))?;
    let report = MetricsReport {
        seed: cfg.seed,
        target_id: cfg.target.clone(),
        aggregation: mode.to_string(),
        oracle_mode: true,
        source_ids: ids,
        per_model_dice: ev.per_model.iter().map(|&d| Some(d)).collect(),
        ensemble: ev.as_report(mode),
        raw_counts: weights.raw_counts.clone(),
        weights: weights.weights.clone(),
        lambda_conf: weights.lambda_conf,
        uniform_fallback: weights.uniform_fallback,
        bound: None,
        target_ce: Some(ev.target_ce),
        target_label_reads_during_training: 0,
        config: cfg.snapshot(),
        timestamp: Some(unix_time()),
    };
    report::emit_report(&report, &cfg.output.join(format!("eval_{mode}.txt")))?;
    Ok((report, ev))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// Confidence threshold; re-weights the trained models.
    Lambda,
    /// Projection count; re-adapts from the pretrained models.
    Projections,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Projections => "L",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lambda" => Some(SweepParam::Lambda),
            "L" | "l" => Some(SweepParam::Projections),
            _ => None,
        }
    }

    /// Rejects an empty or out-of-range value list before any work starts.
    pub fn check(self, values: &[f64]) -> Result<()> {
        if values.is_empty() {
            return Err(Error::invalid("cli", "sweep needs at least one value"));
        }
        for &v in values {
            let ok = match self {
                SweepParam::Lambda => v > 0.0 && v < 1.0,
                SweepParam::Projections => v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64,
            };
            if !ok {
                let want = match self {
                    SweepParam::Lambda => "in (0, 1)",
                    SweepParam::Projections => "a positive integer",
                };
                return Err(Error::invalid("cli", format!("{} value {v} must be {want}", self.name())));
            }
        }
        Ok(())
    }
}

/// FMUDA target Dice of models re-weighted with each threshold.
pub fn lambda_sweep<M: ProbabilityModel>(
    models: &[M],
    images: &[Raster],
    masks: &[LabelMap],
    values: &[f64],
    mode: CountMode,
    ties: TieBreak,
) -> Result<Vec<(f64, f64)>> {
    SweepParam::Lambda.check(values)?;
    values
        .iter()
        .map(|&lambda| {
            let w = ensemble::compute_weights(models, images, lambda, mode).tag("ensemble")?;
            let preds = ensemble_masks(models, &w.weights, images, Aggregation::Fmuda, ties)?;
            Ok((lambda, metrics::mean_dice(&preds, masks, FOREGROUND).tag("metrics")?))
        })
        .collect()
}

/// FMUDA target Dice after re-adapting every pretrained source with each
/// projection count. Each node uses the same seeds as in the original run.
#[allow(clippy::too_many_arguments)]
pub fn projection_sweep<S: Scheduler>(
    pretrained: &[SegModel],
    sources: &[&DomainDataset],
    target: &DomainDataset,
    masks: &[LabelMap],
    plan: &fmuda_core::adapt::TrainPlan,
    values: &[f64],
    mode: CountMode,
    scheduler: &S,
) -> Result<Vec<(f64, f64)>> {
    SweepParam::Projections.check(values)?;
    let unlabeled = target.unlabeled_copy();
    let ties = TieBreak::new(plan.seed);
    values
        .iter()
        .map(|&l| {
            let base = fmuda_core::adapt::TrainPlan { swd_projections: l as usize, ..*plan };
            let jobs: Vec<_> = pretrained
                .iter()
                .zip(sources)
                .map(|(m, ds)| {
                    let p = node_plan(&base, ds.domain_id());
                    let t = &unlabeled;
                    move || adapt(m.clone(), ds, t, &p, None).map(|a| a.model)
                })
                .collect();
            let models = scheduler.run(jobs).into_iter().collect::<fmuda_core::Result<Vec<_>>>().tag("adapt")?;
            let w = ensemble::compute_weights(&models, unlabeled.images(), plan.lambda_conf, mode).tag("ensemble")?;
            let preds = ensemble_masks(&models, &w.weights, unlabeled.images(), Aggregation::Fmuda, ties)?;
            Ok((l, metrics::mean_dice(&preds, masks, FOREGROUND).tag("metrics")?))
        })
        .collect()
}

/// Runs a sweep over a finished run's checkpoints and writes
/// `sweep_<param>.csv` to the output directory.
pub fn sweep(cfg: &RunConfig, param: SweepParam, values: &[f64]) -> Result<(PathBuf, Vec<(f64, f64)>)> {
    param.check(values)?;
    cfg.validate()?;
    let root = DataRoot::open(&cfg.manifest)?;
    let ids = source_ids(cfg, &root.manifest)?;
    let target = root.load_domain(&cfg.target, true)?;
    let masks = target.masks().tag("synthdata")?;
    let mode: CountMode = cfg.count_mode.into();
    let ties = TieBreak::new(cfg.seed);
    let rows = match param {
        SweepParam::Lambda => {
            let models = load_stage(cfg, &ids, "adapted")?;
            lambda_sweep(&models, target.images(), masks, values, mode, ties)?
        }
        SweepParam::Projections => {
            let pretrained = load_stage(cfg, &ids, "pretrained")?;
            let sets = ids.iter().map(|id| root.load_domain(id, true)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&DomainDataset> = sets.iter().collect();
            let workers = if cfg.workers == 0 { refs.len() } else { cfg.workers };
            projection_sweep(&pretrained, &refs, &target, masks, &cfg.plan(), values, mode, &Threaded::new(workers))?
        }
    };
    let path = cfg.output.join(format!("sweep_{}.csv", param.name()));
    error::write(&path, export::sweep_csv(param.name(), &cfg.target, &rows))?;
    Ok((path, rows))
}
