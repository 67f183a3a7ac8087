//! In-process federation: one node per labelled source plus a target node.
//!
//! Nodes never hold references to each other's datasets. The target hands its
//! images (never its masks) to every source over the [`Bus`]; each source
//! pretrains and adapts its own model and returns a model snapshot plus its
//! bound measurements to the target, which computes the ensemble weights.
//! Every transfer is appended to an [`AuditLog`].

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::adapt::{train_source, AdaptedModel, Monitor, TrainPlan};
use crate::ensemble::{self, CountMode, EnsembleWeights};
use crate::error::{Error, Result};
use crate::metrics::{measure_source_terms, SourceTerms};
use crate::rng::derive_seed;
use crate::segnet::{NetConfig, SegModel};
use crate::swd::sample_projections;
use crate::synthdata::{DomainDataset, Raster};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Source,
    Target,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Source => "source",
            NodeKind::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "source" => Some(NodeKind::Source),
            "target" => Some(NodeKind::Target),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NodeId {
    pub name: String,
    pub kind: NodeKind,
}

impl NodeId {
    pub fn source(name: impl Into<String>) -> Self {
        Self { name: name.into(), kind: NodeKind::Source }
    }

    pub fn target(name: impl Into<String>) -> Self {
        Self { name: name.into(), kind: NodeKind::Target }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.name, self.kind.as_str())
    }
}

/// What a message carries. Labelled data has no kind and cannot be sent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PayloadKind {
    ModelParams,
    UnlabeledImages,
    Weights,
    Prediction,
    Metrics,
}

impl PayloadKind {
    pub const ALL: [PayloadKind; 5] = [
        PayloadKind::ModelParams,
        PayloadKind::UnlabeledImages,
        PayloadKind::Weights,
        PayloadKind::Prediction,
        PayloadKind::Metrics,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PayloadKind::ModelParams => "model_params",
            PayloadKind::UnlabeledImages => "unlabeled_images",
            PayloadKind::Weights => "weights",
            PayloadKind::Prediction => "prediction",
            PayloadKind::Metrics => "metrics",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub from: NodeId,
    pub to: NodeId,
    pub kind: PayloadKind,
    pub byte_size: u64,
}

/// Append-only record of every transfer in a run.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AuditLog {
    records: Vec<Message>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a log from exported records, e.g. for offline checking.
    pub fn from_records(records: Vec<Message>) -> Self {
        Self { records }
    }

    pub fn append(&mut self, m: Message) {
        self.records.push(m);
    }

    pub fn records(&self) -> &[Message] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Why a single message breaks the locality rules, if it does.
pub fn violation(m: &Message) -> Option<&'static str> {
    let data = matches!(m.kind, PayloadKind::UnlabeledImages | PayloadKind::Prediction);
    if m.kind == PayloadKind::UnlabeledImages && m.from.kind != NodeKind::Target {
        return Some("unlabeled images may only originate from the target node");
    }
    if data && m.from.kind == NodeKind::Source && m.to.kind == NodeKind::Source {
        return Some("data never flows between source nodes");
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditFailure {
    pub index: usize,
    pub message: Message,
    pub reason: &'static str,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditReport {
    pub checked: usize,
    pub source_to_source: usize,
    pub failure: Option<AuditFailure>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

/// Checks every record; reports the first violation.
pub fn audit_check(log: &AuditLog) -> AuditReport {
    let source_to_source =
        log.records.iter().filter(|m| m.from.kind == NodeKind::Source && m.to.kind == NodeKind::Source).count();
    let failure = log
        .records
        .iter()
        .enumerate()
        .find_map(|(index, m)| violation(m).map(|reason| AuditFailure { index, message: m.clone(), reason }));
    AuditReport { checked: log.len(), source_to_source, failure }
}

/// Payloads the bus can carry.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    ModelParams(SegModel),
    UnlabeledImages(Vec<Raster>),
    Weights(Vec<f64>),
    Prediction(Tensor),
    Metrics(SourceTerms),
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::ModelParams(_) => PayloadKind::ModelParams,
            Payload::UnlabeledImages(_) => PayloadKind::UnlabeledImages,
            Payload::Weights(_) => PayloadKind::Weights,
            Payload::Prediction(_) => PayloadKind::Prediction,
            Payload::Metrics(_) => PayloadKind::Metrics,
        }
    }

    /// Size of the numeric content in bytes.
    pub fn byte_size(&self) -> u64 {
        let n = match self {
            Payload::ModelParams(m) => m.params().total_len() * 8,
            Payload::UnlabeledImages(imgs) => imgs.iter().map(|i| i.data().len() * 8).sum(),
            Payload::Weights(w) => w.len() * 8,
            Payload::Prediction(t) => t.len() * 8,
            Payload::Metrics(t) => 5 * 8 + t.source_id.len(),
        };
        n as u64
    }
}

/// The only channel between nodes. Refuses transfers that break the
/// locality rules and logs everything it delivers.
#[derive(Debug, Default)]
pub struct Bus {
    nodes: Vec<NodeId>,
    log: AuditLog,
}

impl Bus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, node: NodeId) -> Result<()> {
        if self.nodes.iter().any(|n| n.name == node.name) {
            return Err(Error::arg("node", format!("name `{}` is already registered", node.name)));
        }
        self.nodes.push(node);
        Ok(())
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn send(&mut self, from: &NodeId, to: &NodeId, payload: Payload) -> Result<Payload> {
        for n in [from, to] {
            if !self.nodes.contains(n) {
                return Err(Error::arg("node", format!("`{n}` is not registered")));
            }
        }
        let m = Message { from: from.clone(), to: to.clone(), kind: payload.kind(), byte_size: payload.byte_size() };
        if let Some(reason) = violation(&m) {
            return Err(Error::PolicyViolation {
                index: self.log.len(),
                from: from.to_string(),
                to: to.to_string(),
                kind: m.kind.as_str(),
                reason,
            });
        }
        self.log.append(m);
        Ok(payload)
    }

    pub fn log(&self) -> &AuditLog {
        &self.log
    }
}

/// Runs independent jobs, in parallel or not. Results come back in job order.
pub trait Scheduler {
    fn run<T, F>(&self, jobs: Vec<F>) -> Vec<T>
    where
        T: Send,
        F: FnOnce() -> T + Send;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Scheduler for Sequential {
    fn run<T, F>(&self, jobs: Vec<F>) -> Vec<T>
    where
        T: Send,
        F: FnOnce() -> T + Send,
    {
        jobs.into_iter().map(|j| j()).collect()
    }
}

/// Artifacts a source node keeps locally.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceNode {
    pub id: NodeId,
    pub pretrained: SegModel,
    pub adapted: AdaptedModel,
    pub terms: SourceTerms,
}

/// Seed of a node's private streams: depends on its name, not its position.
pub fn node_seed(master: u64, name: &str) -> u64 {
    derive_seed(master, &format!("node/{name}"), 0)
}

/// The plan a node trains with: the federation plan keyed to the node's seed.
pub fn node_plan(plan: &TrainPlan, name: &str) -> TrainPlan {
    TrainPlan { seed: node_seed(plan.seed, name), ..*plan }
}

/// Pretrains and adapts one source node against the received target images.
pub fn train_node(
    source: &DomainDataset,
    target_id: &str,
    target_images: Vec<Raster>,
    net: &NetConfig,
    plan: &TrainPlan,
    monitor: Option<Monitor<'_>>,
) -> Result<SourceNode> {
    let node_plan = node_plan(plan, source.domain_id());
    let target = DomainDataset::new(target_id, target_images, None, source.num_classes())?;
    let model = SegModel::new(*net, derive_seed(node_plan.seed, "init", 0))?;
    let (pretrained, adapted) = train_source(model, source, &target, &node_plan, monitor)?;
    let terms = measure_node(&adapted.model, source, target.images(), plan)?;
    Ok(SourceNode { id: NodeId::source(source.domain_id()), pretrained, adapted, terms })
}

/// Bound measurements a source node reports for its adapted model.
pub fn measure_node(model: &SegModel, source: &DomainDataset, target_images: &[Raster], plan: &TrainPlan) -> Result<SourceTerms> {
    let seed = node_seed(plan.seed, source.domain_id());
    let proj = sample_projections(plan.swd_projections, model.config().latent_dim, derive_seed(seed, "bound-projections", 0))?;
    measure_source_terms(
        model,
        source.domain_id(),
        source.images(),
        source.masks()?,
        target_images,
        &proj,
        plan.sites_per_image,
        seed,
    )
}

/// Federation state held at the target node, plus the node-local artifacts of
/// every source trained here, for inspection.
#[derive(Debug)]
pub struct Federation {
    net: NetConfig,
    plan: TrainPlan,
    mode: CountMode,
    target: NodeId,
    target_images: Vec<Raster>,
    num_classes: usize,
    bus: Bus,
    nodes: Vec<SourceNode>,
    /// Model snapshots as received by the target.
    received: Vec<SegModel>,
    received_terms: Vec<SourceTerms>,
    weights: Option<EnsembleWeights>,
    adopted: Vec<NodeId>,
}

impl Federation {
    /// Sets up the target node. Only the target's images are kept.
    pub fn new(net: NetConfig, plan: TrainPlan, target: &DomainDataset) -> Result<Self> {
        net.validate()?;
        plan.validate()?;
        let mut shape = alloc::vec![1, target.channels()];
        shape.extend_from_slice(target.dims());
        net.check_input(&shape)?;
        if target.num_classes() != net.num_classes {
            return Err(Error::DomainMismatch {
                domain: target.domain_id().into(),
                reason: format!("{} classes, network has {}", target.num_classes(), net.num_classes),
            });
        }
        let id = NodeId::target(target.domain_id());
        let mut bus = Bus::new();
        bus.register(id.clone())?;
        Ok(Self {
            net,
            plan,
            mode: CountMode::default(),
            target: id,
            target_images: target.unlabeled_copy().images().to_vec(),
            num_classes: target.num_classes(),
            bus,
            nodes: Vec::new(),
            received: Vec::new(),
            received_terms: Vec::new(),
            weights: None,
            adopted: Vec::new(),
        })
    }

    pub fn with_count_mode(mut self, mode: CountMode) -> Self {
        self.mode = mode;
        self
    }

    fn check_source(&self, ds: &DomainDataset) -> Result<()> {
        let reason = if !ds.is_labeled() {
            Some(String::from("source domains must be labelled"))
        } else if ds.num_classes() != self.num_classes {
            Some(format!("{} classes, target has {}", ds.num_classes(), self.num_classes))
        } else if ds.dims() != self.target_images[0].dims() || ds.channels() != self.target_images[0].channels() {
            Some(format!(
                "{} channel(s) over {:?}, target has {} over {:?}",
                ds.channels(),
                ds.dims(),
                self.target_images[0].channels(),
                self.target_images[0].dims()
            ))
        } else {
            None
        };
        match reason {
            Some(reason) => Err(Error::DomainMismatch { domain: ds.domain_id().into(), reason }),
            None => Ok(()),
        }
    }

    /// Trains the given new sources (concurrently under `scheduler`) and folds
    /// them into the ensemble. Existing nodes are not retrained.
    pub fn add_sources<S: Scheduler>(
        &mut self,
        sources: &[&DomainDataset],
        scheduler: &S,
        monitor: Option<Monitor<'_>>,
    ) -> Result<()> {
        if sources.is_empty() {
            return Err(Error::Empty("source list"));
        }
        for (i, ds) in sources.iter().enumerate() {
            self.check_source(ds)?;
            if sources[..i].iter().any(|o| o.domain_id() == ds.domain_id())
                || self.bus.nodes().iter().any(|n| n.name == ds.domain_id())
            {
                return Err(Error::arg("sources", format!("duplicate domain `{}`", ds.domain_id())));
            }
        }
        let ids: Vec<NodeId> = sources.iter().map(|ds| NodeId::source(ds.domain_id())).collect();
        for id in &ids {
            self.bus.register(id.clone())?;
        }

        let mut deliveries = Vec::with_capacity(ids.len());
        for id in &ids {
            match self.bus.send(&self.target, id, Payload::UnlabeledImages(self.target_images.clone()))? {
                Payload::UnlabeledImages(imgs) => deliveries.push(imgs),
                _ => unreachable!("bus delivers what was sent"),
            }
        }

        let (net, plan, target_name) = (self.net, self.plan, self.target.name.as_str());
        let jobs: Vec<_> = sources
            .iter()
            .zip(deliveries)
            .map(|(ds, imgs)| move || train_node(ds, target_name, imgs, &net, &plan, monitor))
            .collect();
        let trained = scheduler.run(jobs).into_iter().collect::<Result<Vec<_>>>()?;

        for node in trained {
            self.receive(&node.id, node.adapted.model.clone(), node.terms.clone())?;
            self.nodes.push(node);
        }
        Ok(())
    }

    /// Re-admits a source whose adapted model was trained earlier. The source
    /// node re-measures its terms and delivers the snapshot; no training runs.
    pub fn adopt_source(&mut self, source: &DomainDataset, model: SegModel) -> Result<()> {
        self.check_source(source)?;
        if model.config() != &self.net {
            return Err(Error::DomainMismatch {
                domain: source.domain_id().into(),
                reason: String::from("checkpoint was trained with a different network configuration"),
            });
        }
        let id = NodeId::source(source.domain_id());
        self.bus.register(id.clone())?;
        let imgs = match self.bus.send(&self.target, &id, Payload::UnlabeledImages(self.target_images.clone()))? {
            Payload::UnlabeledImages(imgs) => imgs,
            _ => unreachable!("bus delivers what was sent"),
        };
        let terms = measure_node(&model, source, &imgs, &self.plan)?;
        self.receive(&id, model, terms)?;
        self.adopted.push(id);
        Ok(())
    }

    fn receive(&mut self, from: &NodeId, model: SegModel, terms: SourceTerms) -> Result<()> {
        let model = match self.bus.send(from, &self.target, Payload::ModelParams(model))? {
            Payload::ModelParams(m) => m,
            _ => unreachable!("bus delivers what was sent"),
        };
        let terms = match self.bus.send(from, &self.target, Payload::Metrics(terms))? {
            Payload::Metrics(t) => t,
            _ => unreachable!("bus delivers what was sent"),
        };
        self.weights = Some(match &self.weights {
            None => ensemble::compute_weights(&[&model], &self.target_images, self.plan.lambda_conf, self.mode)?,
            Some(w) => ensemble::add_source(w, &model, &self.target_images)?,
        });
        self.received.push(model);
        self.received_terms.push(terms);
        Ok(())
    }

    /// Names of all sources in ensemble order.
    pub fn source_names(&self) -> Vec<&str> {
        self.bus.nodes().iter().filter(|n| n.kind == NodeKind::Source).map(|n| n.name.as_str()).collect()
    }

    /// Sources re-admitted from earlier training rather than trained here.
    pub fn adopted(&self) -> &[NodeId] {
        &self.adopted
    }

    pub fn target(&self) -> &NodeId {
        &self.target
    }

    pub fn target_images(&self) -> &[Raster] {
        &self.target_images
    }

    pub fn nodes(&self) -> &[SourceNode] {
        &self.nodes
    }

    pub fn models(&self) -> &[SegModel] {
        &self.received
    }

    pub fn source_terms(&self) -> &[SourceTerms] {
        &self.received_terms
    }

    pub fn weights(&self) -> Option<&EnsembleWeights> {
        self.weights.as_ref()
    }

    pub fn log(&self) -> &AuditLog {
        self.bus.log()
    }

    pub fn net(&self) -> &NetConfig {
        &self.net
    }

    pub fn plan(&self) -> &TrainPlan {
        &self.plan
    }
}

/// Result of a full federated run.
#[derive(Debug)]
pub struct MsudaRun {
    pub federation: Federation,
    /// Target mask reads observed during the run.
    pub target_label_reads: usize,
}

impl MsudaRun {
    pub fn weights(&self) -> &EnsembleWeights {
        self.federation.weights().expect("a run has at least one source")
    }
}

/// Trains every source against the target and computes the ensemble weights.
pub fn run_msuda<S: Scheduler>(
    sources: &[&DomainDataset],
    target: &DomainDataset,
    net: NetConfig,
    plan: TrainPlan,
    scheduler: &S,
    mode: CountMode,
) -> Result<MsudaRun> {
    let before = target.label_reads();
    let mut federation = Federation::new(net, plan, target)?.with_count_mode(mode);
    if sources.iter().any(|s| s.domain_id() == target.domain_id()) {
        return Err(Error::arg("sources", "the target domain cannot also be a source"));
    }
    federation.add_sources(sources, scheduler, None)?;
    Ok(MsudaRun { federation, target_label_reads: target.label_reads() - before })
}
