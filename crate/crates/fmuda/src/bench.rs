//! The synthetic three-domain benchmark, run in memory: a dimmed target
//! `d0`, a clean source `d1` and a heavily corrupted source `d2`.

use fmuda_core::ensemble::{CountMode, EnsembleWeights, TieBreak};
use fmuda_core::fednode::{audit_check, run_msuda, AuditReport, MsudaRun};
use fmuda_core::metrics::{bound_terms, joint_error_terms, BoundTable};
use fmuda_core::synthdata::generate_domains;
use fmuda_core::{DomainDataset, LabelMap, SegModel};

use crate::config::{GenConfig, RunConfig};
use crate::error::{Result, Tag};
use crate::pipeline::{self, Evaluation};
use crate::sched::Threaded;

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub data: GenConfig,
    pub run: RunConfig,
}

impl Default for Benchmark {
    fn default() -> Self {
        Self { data: GenConfig::default(), run: RunConfig::benchmark() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceOutcome {
    pub id: String,
    /// Target Dice of the model before and after adaptation.
    pub pre_dice: f64,
    pub post_dice: f64,
    /// Mean SWD over the first and last adaptation epochs.
    pub first_epoch_swd: f64,
    pub last_epoch_swd: f64,
}

#[derive(Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub sources: Vec<SourceOutcome>,
    pub evaluation: Evaluation,
    pub weights: EnsembleWeights,
    pub audit: AuditReport,
    pub target_label_reads: usize,
    pub bound: BoundTable,
    pub domains: Vec<DomainDataset>,
    pub run: MsudaRun,
}

impl SeedOutcome {
    pub fn target(&self) -> &DomainDataset {
        &self.domains[0]
    }

    pub fn sources(&self) -> Vec<&DomainDataset> {
        self.domains[1..].iter().collect()
    }

    pub fn pretrained(&self) -> Vec<SegModel> {
        self.run.federation.nodes().iter().map(|n| n.pretrained.clone()).collect()
    }

    pub fn target_masks(&self) -> Vec<LabelMap> {
        self.target().masks().expect("benchmark target is labelled").to_vec()
    }
}

impl Benchmark {
    /// Data and training both keyed to `seed`.
    pub fn domains(&self, seed: u64) -> Result<Vec<DomainDataset>> {
        let data = GenConfig { seed, ..self.data.clone() };
        generate_domains(seed, data.images_per_domain, &data.dims, data.num_classes, &data.shifts()).tag("synthdata")
    }

    pub fn run_seed(&self, seed: u64) -> Result<SeedOutcome> {
        let domains = self.domains(seed)?;
        let (target, sources) = domains.split_first().expect("benchmark has domains");
        let refs: Vec<&DomainDataset> = sources.iter().collect();
        let cfg = RunConfig { seed, ..self.run.clone() };
        let plan = cfg.plan();
        let mode: CountMode = cfg.count_mode.into();
        let run = run_msuda(&refs, target, cfg.net_config(), plan, &Threaded::new(refs.len()), mode).tag("fednode")?;
        let target_label_reads = run.target_label_reads;
        let audit = audit_check(run.federation.log());

        // Everything below is oracle evaluation and reads the target masks.
        let masks = target.masks().tag("synthdata")?;
        let ties = TieBreak::new(seed);
        let fed = &run.federation;
        let weights = run.weights().clone();
        let evaluation = pipeline::evaluate(fed.models(), &weights.weights, target.images(), masks, ties)?;
        let mut outcomes = Vec::new();
        for node in fed.nodes() {
            let h = &node.adapted.history;
            outcomes.push(SourceOutcome {
                id: node.id.name.clone(),
                pre_dice: pipeline::model_dice(&node.pretrained, target.images(), masks, ties)?,
                post_dice: pipeline::model_dice(&node.adapted.model, target.images(), masks, ties)?,
                first_epoch_swd: h.first().map_or(f64::NAN, |e| e.swd),
                last_epoch_swd: h.last().map_or(f64::NAN, |e| e.swd),
            });
        }
        let mut terms = fed.source_terms().to_vec();
        let joint = joint_error_terms(cfg.net_config(), &plan, &refs, target).tag("metrics")?;
        for (t, e) in terms.iter_mut().zip(joint) {
            t.joint_error = Some(e);
        }
        let bound = bound_terms(&terms, &weights.weights, cfg.xi, cfg.zeta).tag("metrics")?;
        Ok(SeedOutcome { seed, sources: outcomes, evaluation, weights, audit, target_label_reads, bound, domains, run })
    }

    pub fn lambda_sweep(&self, o: &SeedOutcome, values: &[f64]) -> Result<Vec<(f64, f64)>> {
        pipeline::lambda_sweep(
            o.run.federation.models(),
            o.target().images(),
            &o.target_masks(),
            values,
            self.run.count_mode.into(),
            TieBreak::new(o.seed),
        )
    }

    pub fn projection_sweep(&self, o: &SeedOutcome, values: &[f64]) -> Result<Vec<(f64, f64)>> {
        let sources = o.sources();
        pipeline::projection_sweep(
            &o.pretrained(),
            &sources,
            o.target(),
            &o.target_masks(),
            o.run.federation.plan(),
            values,
            self.run.count_mode.into(),
            &Threaded::new(sources.len()),
        )
    }
}
