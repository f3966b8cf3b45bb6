//! Staged training: autoencoder pre-training, classifier pre-training,
//! unpaired adversarial-cooperative training and paired retargeting training.

mod checkpoint;
mod plan;
mod steps;

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{checkpoint, read_checkpoint, restore, CHECKPOINT_VERSION};
pub use plan::{Stage, StageId, StagePlan};
pub use steps::{
    autoencoder_step, classifier_step, paired_autoencoder_step, paired_classifier_step, Accuracies, Batch, QuadBatch,
    StepContext, StepOutcome,
};

use crate::dataset::{build_pairs, Corpus, LabelMap, QuadrupleIndex, SkeletonTopology};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, Objective, Term};
use crate::network::{init_parameters, AdamConfig, Group, NetworkConfig, ParameterSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    /// Seed of parameter initialization.
    pub init_seed: u64,
    /// Seed of pair enumeration and per-epoch shuffling.
    pub data_seed: u64,
    /// Quadruples drawn per paired epoch; each is also used with roles swapped.
    /// `None` uses every quadruple.
    pub pairs_per_epoch: Option<usize>,
    /// Classifier steps after each autoencoder step in adversarial stages.
    pub classifier_steps: usize,
    /// Compare every group bitwise around each step and record which changed.
    pub audit_freeze: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            init_seed: 0,
            data_seed: 0,
            pairs_per_epoch: None,
            classifier_steps: 1,
            audit_freeze: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Mean of every logged quantity over one epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub stage: String,
    pub epoch: usize,
    pub autoencoder: BTreeMap<Term, f64>,
    pub autoencoder_total: Option<f64>,
    pub classifiers: BTreeMap<Term, f64>,
    pub classifiers_total: Option<f64>,
    pub accuracies: Option<Accuracies>,
    pub steps: usize,
}

/// Which part of the model a step optimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Autoencoder,
    Classifiers,
}

impl StepKind {
    pub fn groups(self) -> &'static [Group] {
        match self {
            StepKind::Autoencoder => &[Group::Autoencoder],
            StepKind::Classifiers => &[Group::Motion, Group::Privacy, Group::Quality],
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: String,
    pub epoch: usize,
    pub step: u64,
    pub kind: StepKind,
    pub objective: Objective,
    pub terms: BTreeMap<Term, f64>,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracies: Option<Accuracies>,
    /// Groups whose tensors changed, when auditing.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub changed: Option<Vec<Group>>,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParameterSet,
    pub labels: LabelMap,
    pub plan: StagePlan,
    /// Position of the current stage in `plan`.
    pub stage_index: usize,
    /// Completed epochs of the current stage.
    pub epoch: usize,
    /// Optimization steps taken over the whole run.
    pub step: u64,
    pub rng_seed: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochSummary>,
}

impl TrainState {
    pub fn new(network: &NetworkConfig, labels: LabelMap, plan: StagePlan, cfg: &TrainConfig) -> Result<Self> {
        plan.validate()?;
        if network.y_action != labels.actions.len() || network.y_actor != labels.actors.len() {
            return Err(Error::InvalidConfig(format!(
                "network expects {} actions and {} actors, corpus has {} and {}",
                network.y_action,
                network.y_actor,
                labels.actions.len(),
                labels.actors.len()
            )));
        }
        Ok(Self {
            params: init_parameters(network, cfg.init_seed)?,
            labels,
            plan,
            stage_index: 0,
            epoch: 0,
            step: 0,
            rng_seed: cfg.data_seed,
            rng: ChaCha8Rng::seed_from_u64(cfg.data_seed),
            history: Vec::new(),
        })
    }

    pub fn current_stage(&self) -> Option<Stage> {
        self.plan.stages.get(self.stage_index).copied()
    }

    pub fn is_finished(&self) -> bool {
        self.stage_index >= self.plan.stages.len()
    }
}

/// Training corpus with its quadruples.
pub struct TrainData<'a> {
    pub corpus: &'a Corpus,
    pub pairs: Vec<QuadrupleIndex>,
    pub topology: &'a SkeletonTopology,
}

impl<'a> TrainData<'a> {
    /// Builds quadruples from the corpus; a corpus without any leaves `pairs`
    /// empty and paired stages then fail with `NoValidPairs`.
    pub fn new(corpus: &'a Corpus, topology: &'a SkeletonTopology, seed: u64) -> Result<Self> {
        let pairs = match build_pairs(&corpus.index, seed) {
            Ok(p) => p,
            Err(Error::NoValidPairs) => Vec::new(),
            Err(e) => return Err(e),
        };
        Ok(Self { corpus, pairs, topology })
    }

    fn batch(&self, indices: &[usize], labels: &LabelMap) -> Result<Batch> {
        let mut actions = Vec::with_capacity(indices.len());
        let mut actors = Vec::with_capacity(indices.len());
        for &i in indices {
            let meta = &self.corpus.index.entries[i].meta;
            actions.push(labels.action_class(meta.action)?);
            actors.push(labels.actor_class(meta.actor)?);
        }
        Ok(Batch {
            x: self.corpus.batch(indices)?,
            actions,
            actors,
        })
    }

    fn quad_batch(&self, quads: &[QuadrupleIndex], labels: &LabelMap) -> Result<QuadBatch> {
        let member = |f: fn(&QuadrupleIndex) -> usize| -> Result<Batch> {
            let idx: Vec<usize> = quads.iter().map(f).collect();
            self.batch(&idx, labels)
        };
        Ok(QuadBatch {
            ap: member(|q| q.ap)?,
            a2p: member(|q| q.a2p)?,
            ap2: member(|q| q.ap2)?,
            a2p2: member(|q| q.a2p2)?,
        })
    }
}

/// Splits into chunks of `size`, dropping a trailing chunk of one element
/// (batch statistics need two samples).
fn chunks<T: Clone>(items: &[T], size: usize) -> Vec<Vec<T>> {
    items
        .chunks(size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

/// Sink for per-step log records.
pub type StepObserver<'o> = dyn FnMut(&StepRecord) + 'o;

/// Runs stages of a plan against one training corpus.
pub struct Trainer<'a, 'o> {
    pub data: &'a TrainData<'a>,
    pub config: &'a TrainConfig,
    log: Option<&'o mut dyn Write>,
    observer: Option<&'o mut StepObserver<'o>>,
}

impl<'a, 'o> Trainer<'a, 'o> {
    pub fn new(data: &'a TrainData<'a>, config: &'a TrainConfig) -> Self {
        Self {
            data,
            config,
            log: None,
            observer: None,
        }
    }

    /// Writes one JSON object per step to `sink`.
    pub fn with_log(mut self, sink: &'o mut dyn Write) -> Self {
        self.log = Some(sink);
        self
    }

    pub fn with_observer(mut self, observer: &'o mut StepObserver<'o>) -> Self {
        self.observer = Some(observer);
        self
    }

    fn record(&mut self, rec: StepRecord) -> Result<()> {
        if let Some(sink) = self.log.as_deref_mut() {
            let line = serde_json::to_string(&rec).map_err(|e| Error::Config(e.to_string()))?;
            writeln!(sink, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        if let Some(obs) = self.observer.as_deref_mut() {
            obs(&rec);
        }
        Ok(())
    }

    fn unpaired_batches(&self, state: &mut TrainState) -> Result<Vec<Vec<usize>>> {
        let n = self.data.corpus.len();
        if n < 2 {
            return Err(Error::DataExhausted(format!("{} training sequences", n)));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut state.rng);
        Ok(chunks(&order, self.config.batch_size))
    }

    fn epoch_quads(&self, state: &mut TrainState) -> Result<Vec<QuadrupleIndex>> {
        if self.data.pairs.is_empty() {
            return Err(Error::NoValidPairs);
        }
        let mut quads = self.data.pairs.clone();
        quads.shuffle(&mut state.rng);
        if let Some(cap) = self.config.pairs_per_epoch {
            quads.truncate(cap.max(1));
        }
        Ok(quads)
    }

    /// Members of the epoch's quadruples, each reconstructed independently.
    fn paired_member_batches(&self, state: &mut TrainState) -> Result<Vec<Vec<usize>>> {
        let quads = self.epoch_quads(state)?;
        let members: Vec<usize> = quads.iter().flat_map(|q| q.members()).collect();
        Ok(chunks(&members, self.config.batch_size))
    }

    /// Every drawn quadruple followed by its role swap.
    fn oriented_quad_batches(&self, state: &mut TrainState) -> Result<Vec<Vec<QuadrupleIndex>>> {
        let quads = self.epoch_quads(state)?;
        let oriented: Vec<QuadrupleIndex> = quads.iter().flat_map(|q| [*q, q.swapped()]).collect();
        Ok(chunks(&oriented, self.config.batch_size))
    }

    fn audited<F>(&mut self, state: &mut TrainState, kind: StepKind, objective: Objective, f: F) -> Result<StepOutcome>
    where
        F: FnOnce(&mut ParameterSet, &StepContext) -> Result<StepOutcome>,
    {
        let stage = state.current_stage().expect("running stage");
        let label = stage.label();
        let snapshots = self
            .config
            .audit_freeze
            .then(|| Group::ALL.map(|g| (g, state.params.snapshot(g))));
        state.step += 1;
        let ctx = StepContext {
            weights: &self.config.weights,
            adam: &self.config.adam,
            topology: self.data.topology,
            stage: &label,
            step: state.step,
        };
        let outcome = f(&mut state.params, &ctx)?;
        let changed = snapshots.map(|snaps| {
            snaps
                .iter()
                .filter(|(g, s)| !state.params.matches_snapshot(*g, s))
                .map(|(g, _)| *g)
                .collect()
        });
        self.record(StepRecord {
            stage: label,
            epoch: state.epoch,
            step: state.step,
            kind,
            objective,
            terms: outcome.terms.clone(),
            total: outcome.total,
            accuracies: outcome.accuracies.clone(),
            changed,
        })?;
        Ok(outcome)
    }

    /// Runs one epoch of the current stage.
    pub fn run_epoch(&mut self, state: &mut TrainState) -> Result<EpochSummary> {
        let stage = state
            .current_stage()
            .ok_or_else(|| Error::DataExhausted("the stage plan is complete".into()))?;
        let mut acc = EpochAccumulator::default();
        let labels = state.labels.clone();
        match (stage.id, stage.paired_data) {
            (StageId::PretrainAe | StageId::PretrainCls | StageId::Unpaired, paired) => {
                let batches = if paired {
                    self.paired_member_batches(state)?
                } else {
                    self.unpaired_batches(state)?
                };
                for idx in batches {
                    let batch = self.data.batch(&idx, &labels)?;
                    if stage.id != StageId::PretrainCls {
                        let objective = if stage.id == StageId::Unpaired {
                            Objective::Unpaired
                        } else {
                            Objective::Autoencoder
                        };
                        let out = self.audited(state, StepKind::Autoencoder, objective, |p, ctx| {
                            autoencoder_step(p, &batch, objective, ctx)
                        })?;
                        acc.add_autoencoder(&out);
                    }
                    if stage.id != StageId::PretrainAe {
                        for _ in 0..self.config.classifier_steps {
                            let out = self.audited(state, StepKind::Classifiers, Objective::Classifiers, |p, ctx| {
                                classifier_step(p, &batch, ctx)
                            })?;
                            acc.add_classifiers(&out);
                        }
                    }
                }
            }
            (StageId::Paired, _) => {
                for quads in self.oriented_quad_batches(state)? {
                    let qb = self.data.quad_batch(&quads, &labels)?;
                    let out = self.audited(state, StepKind::Autoencoder, Objective::Paired, |p, ctx| {
                        paired_autoencoder_step(p, &qb, ctx)
                    })?;
                    acc.add_autoencoder(&out);
                    for _ in 0..self.config.classifier_steps {
                        let out = self.audited(state, StepKind::Classifiers, Objective::Classifiers, |p, ctx| {
                            paired_classifier_step(p, &qb, ctx)
                        })?;
                        acc.add_classifiers(&out);
                    }
                }
            }
        }
        state.epoch += 1;
        let summary = acc.finish(stage.label(), state.epoch);
        state.history.push(summary.clone());
        Ok(summary)
    }

    /// Runs the remaining epochs of the current stage and advances to the next.
    /// `on_epoch` sees the state after every epoch, e.g. to checkpoint it.
    pub fn run_stage(
        &mut self,
        state: &mut TrainState,
        on_epoch: &mut dyn FnMut(&TrainState) -> Result<()>,
    ) -> Result<()> {
        let stage = state
            .current_stage()
            .ok_or_else(|| Error::DataExhausted("the stage plan is complete".into()))?;
        while state.epoch < stage.epochs {
            self.run_epoch(state)?;
            on_epoch(state)?;
        }
        state.stage_index += 1;
        state.epoch = 0;
        Ok(())
    }

    /// Runs every remaining stage. `on_stage_end` sees the state after each stage.
    pub fn run_plan(
        &mut self,
        state: &mut TrainState,
        on_epoch: &mut dyn FnMut(&TrainState) -> Result<()>,
        on_stage_end: &mut dyn FnMut(&TrainState, &Stage) -> Result<()>,
    ) -> Result<()> {
        while let Some(stage) = state.current_stage() {
            self.run_stage(state, on_epoch)?;
            on_stage_end(state, &stage)?;
        }
        Ok(())
    }

    fn run_expected(&mut self, state: &mut TrainState, id: StageId) -> Result<()> {
        match state.current_stage() {
            Some(s) if s.id == id => self.run_stage(state, &mut |_| Ok(())),
            Some(s) => Err(Error::Config(format!("plan is positioned at {}, not {id}", s.id))),
            None => Err(Error::DataExhausted("the stage plan is complete".into())),
        }
    }

    pub fn run_pretrain_ae(&mut self, state: &mut TrainState) -> Result<()> {
        self.run_expected(state, StageId::PretrainAe)
    }

    pub fn run_pretrain_classifiers(&mut self, state: &mut TrainState) -> Result<()> {
        self.run_expected(state, StageId::PretrainCls)
    }

    pub fn run_unpaired(&mut self, state: &mut TrainState) -> Result<()> {
        self.run_expected(state, StageId::Unpaired)
    }

    pub fn run_paired(&mut self, state: &mut TrainState) -> Result<()> {
        self.run_expected(state, StageId::Paired)
    }
}

#[derive(Default)]
struct EpochAccumulator {
    ae: BTreeMap<Term, f64>,
    ae_total: f64,
    ae_steps: usize,
    cls: BTreeMap<Term, f64>,
    cls_total: f64,
    cls_steps: usize,
    acc: Accuracies,
}

impl EpochAccumulator {
    fn add_autoencoder(&mut self, out: &StepOutcome) {
        for (k, v) in &out.terms {
            *self.ae.entry(*k).or_insert(0.0) += v;
        }
        self.ae_total += out.total;
        self.ae_steps += 1;
    }

    fn add_classifiers(&mut self, out: &StepOutcome) {
        for (k, v) in &out.terms {
            *self.cls.entry(*k).or_insert(0.0) += v;
        }
        self.cls_total += out.total;
        self.cls_steps += 1;
        if let Some(a) = &out.accuracies {
            self.acc.m_on_motion += a.m_on_motion;
            self.acc.m_on_privacy += a.m_on_privacy;
            self.acc.p_on_motion += a.p_on_motion;
            self.acc.p_on_privacy += a.p_on_privacy;
            self.acc.qc_real += a.qc_real;
            self.acc.qc_fake += a.qc_fake;
        }
    }

    fn finish(self, stage: String, epoch: usize) -> EpochSummary {
        let mean = |m: BTreeMap<Term, f64>, n: usize| m.into_iter().map(|(k, v)| (k, v / n as f64)).collect();
        let n = self.cls_steps.max(1) as f64;
        EpochSummary {
            stage,
            epoch,
            autoencoder_total: (self.ae_steps > 0).then(|| self.ae_total / self.ae_steps as f64),
            autoencoder: mean(self.ae, self.ae_steps.max(1)),
            classifiers_total: (self.cls_steps > 0).then(|| self.cls_total / n),
            classifiers: mean(self.cls, self.cls_steps.max(1)),
            accuracies: (self.cls_steps > 0).then(|| Accuracies {
                m_on_motion: self.acc.m_on_motion / n,
                m_on_privacy: self.acc.m_on_privacy / n,
                p_on_motion: self.acc.p_on_motion / n,
                p_on_privacy: self.acc.p_on_privacy / n,
                qc_real: self.acc.qc_real / n,
                qc_fake: self.acc.qc_fake / n,
            }),
            steps: self.ae_steps + self.cls_steps,
        }
    }
}
