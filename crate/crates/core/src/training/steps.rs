//! Single optimization steps of the autoencoder and of the classifiers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::dataset::SkeletonTopology;
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights, Objective, QuadEmbeddings, Term};
use crate::network::{
    adam_step, classifier, decoder, encoder, quality_controller, update_running_stats, AdamConfig, Bound, Component,
    Group, ParameterSet,
};
use crate::tensor::Tensor;

/// Sequences with dense class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, T, J, 3]`.
    pub x: Tensor,
    pub actions: Vec<usize>,
    pub actors: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn concat(parts: &[&Batch]) -> Result<Batch> {
        let xs: Vec<&Tensor> = parts.iter().map(|b| &b.x).collect();
        let rows: Vec<Tensor> = xs
            .iter()
            .flat_map(|x| (0..x.shape()[0]).map(move |i| x.rows(i, 1)))
            .map(|r| {
                let shape = r.shape()[1..].to_vec();
                r.reshape(&shape)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = rows.iter().collect();
        Ok(Batch {
            x: Tensor::stack(&refs)?,
            actions: parts.iter().flat_map(|b| b.actions.iter().copied()).collect(),
            actors: parts.iter().flat_map(|b| b.actors.iter().copied()).collect(),
        })
    }
}

/// Aligned members of a batch of quadruples.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadBatch {
    pub ap: Batch,
    pub a2p: Batch,
    pub ap2: Batch,
    pub a2p2: Batch,
}

/// Accuracy of each classifier on each embedding, measured on a step's batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub m_on_motion: f64,
    pub m_on_privacy: f64,
    pub p_on_motion: f64,
    pub p_on_privacy: f64,
    /// Mean quality-controller score on real and generated sequences.
    pub qc_real: f64,
    pub qc_fake: f64,
}

/// Outcome of one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub terms: BTreeMap<Term, f64>,
    pub total: f64,
    pub accuracies: Option<Accuracies>,
}

fn value(tape: &Tape, v: Var) -> f64 {
    tape.value(v).item()
}

fn argmax_accuracy(probs: &Tensor, start: usize, count: usize, labels: &[usize]) -> f64 {
    let y = probs.shape()[1];
    let hits = (0..count)
        .filter(|&i| {
            let row = &probs.data()[(start + i) * y..(start + i + 1) * y];
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
            best.0 == labels[i]
        })
        .count();
    hits as f64 / count.max(1) as f64
}

fn check_finite(terms: &BTreeMap<Term, f64>, total: f64, stage: &str, step: u64) -> Result<()> {
    if let Some((t, _)) = terms.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Divergence {
            stage: stage.into(),
            step,
            term: t.name().into(),
        });
    }
    if !total.is_finite() {
        return Err(Error::Divergence {
            stage: stage.into(),
            step,
            term: "total".into(),
        });
    }
    Ok(())
}

/// Collects the gradients of a group's leaves by parameter name.
fn group_grads(b: &Bound, grads: &crate::autograd::Gradients, group: Group) -> BTreeMap<String, Tensor> {
    b.group_vars(group)
        .into_iter()
        .filter_map(|(name, v)| grads.get(v).map(|g| (name, g.clone())))
        .collect()
}

/// Per-step context shared by both kinds of steps.
pub struct StepContext<'a> {
    pub weights: &'a LossWeights,
    pub adam: &'a AdamConfig,
    pub topology: &'a SkeletonTopology,
    pub stage: &'a str,
    pub step: u64,
}

/// Classifier outputs on `[motion; privacy]` embeddings stacked along the batch.
struct Heads {
    m: Var,
    p: Var,
}

fn heads(b: &Bound, motion: Var, privacy: Var) -> Result<Heads> {
    let emb = b.tape.concat(motion, privacy, 0)?;
    Ok(Heads {
        m: classifier(b, Component::MotionClassifier, emb)?,
        p: classifier(b, Component::PrivacyClassifier, emb)?,
    })
}

fn rows(tape: &Tape, v: Var, start: usize, count: usize) -> Result<Var> {
    tape.slice(v, 0, start, count)
}

/// Cooperative and adversarial terms for one batch of sequences.
fn embedding_terms(
    b: &Bound,
    motion: Var,
    privacy: Var,
    score_fake: Var,
    batch: &Batch,
    terms: &mut BTreeMap<Term, Var>,
) -> Result<()> {
    let t = b.tape;
    let n = batch.len();
    let h = heads(b, motion, privacy)?;
    let (m_motion, m_privacy) = (rows(t, h.m, 0, n)?, rows(t, h.m, n, n)?);
    let (p_motion, p_privacy) = (rows(t, h.p, 0, n)?, rows(t, h.p, n, n)?);
    terms.insert(
        Term::Coop,
        losses::cooperative(t, m_motion, p_privacy, &batch.actions, &batch.actors)?,
    );
    terms.insert(
        Term::Adv,
        losses::adversarial(t, m_privacy, p_motion, score_fake, &batch.actions, &batch.actors)?,
    );
    Ok(())
}

fn finish_autoencoder_step(
    params: &mut ParameterSet,
    tape: &Tape,
    b: Bound,
    terms: BTreeMap<Term, Var>,
    objective: Objective,
    ctx: &StepContext,
) -> Result<StepOutcome> {
    let total = losses::weighted_total(tape, &terms, ctx.weights, objective)?;
    let values: BTreeMap<Term, f64> = terms.iter().map(|(k, v)| (*k, value(tape, *v))).collect();
    let total_value = value(tape, total);
    check_finite(&values, total_value, ctx.stage, ctx.step)?;
    let grads = tape.backward(total)?;
    let g = group_grads(&b, &grads, Group::Autoencoder);
    drop(b);
    adam_step(params, Group::Autoencoder, &g, ctx.adam)?;
    Ok(StepOutcome {
        terms: values,
        total: total_value,
        accuracies: None,
    })
}

/// One autoencoder step on unpaired sequences. `objective` is either
/// reconstruction only or the full unpaired objective; classifiers and the
/// quality controller stay frozen.
pub fn autoencoder_step(
    params: &mut ParameterSet,
    batch: &Batch,
    objective: Objective,
    ctx: &StepContext,
) -> Result<StepOutcome> {
    if !matches!(objective, Objective::Autoencoder | Objective::Unpaired) {
        return Err(Error::Config(format!("{objective:?} is not an unpaired autoencoder objective")));
    }
    let snapshot = params.clone();
    let tape = Tape::new();
    let b = Bound::new(&tape, &snapshot, &[Group::Autoencoder]);
    let x = tape.constant(batch.x.clone());
    let motion = encoder(&b, Component::MotionEncoder, x)?;
    let privacy = encoder(&b, Component::PrivacyEncoder, x)?;
    let y = decoder(&b, motion, privacy)?;
    let mut terms = BTreeMap::new();
    terms.insert(Term::Rec, losses::reconstruction(&tape, x, y)?);
    terms.insert(Term::Smooth, losses::smooth(&tape, x, y)?);
    if objective == Objective::Unpaired {
        let score_fake = quality_controller(&b, y)?;
        embedding_terms(&b, motion, privacy, score_fake, batch, &mut terms)?;
    }
    finish_autoencoder_step(params, &tape, b, terms, objective, ctx)
}

/// One autoencoder step on quadruples: the unpaired objective on the anchors
/// plus cross-reconstruction, end-effector, triplet and latent terms.
pub fn paired_autoencoder_step(params: &mut ParameterSet, quads: &QuadBatch, ctx: &StepContext) -> Result<StepOutcome> {
    let snapshot = params.clone();
    let tape = Tape::new();
    let b = Bound::new(&tape, &snapshot, &[Group::Autoencoder]);
    let n = quads.ap.len();
    let all = Batch::concat(&[&quads.ap, &quads.a2p, &quads.ap2, &quads.a2p2])?;
    let x = tape.constant(all.x);
    let motion = encoder(&b, Component::MotionEncoder, x)?;
    let privacy = encoder(&b, Component::PrivacyEncoder, x)?;
    let member = |v: Var, k: usize| rows(&tape, v, k * n, n);
    let (m_ap, p_ap) = (member(motion, 0)?, member(privacy, 0)?);
    let emb = QuadEmbeddings {
        ap: (m_ap, p_ap),
        a2p: (member(motion, 1)?, member(privacy, 1)?),
        ap2: (member(motion, 2)?, member(privacy, 2)?),
    };
    let p_a2p2 = member(privacy, 3)?;
    let dec_m = tape.concat(m_ap, m_ap, 0)?;
    let dec_p = tape.concat(p_ap, p_a2p2, 0)?;
    let decoded = decoder(&b, dec_m, dec_p)?;
    let recon = rows(&tape, decoded, 0, n)?;
    let cross = rows(&tape, decoded, n, n)?;
    let s_ap = member(x, 0)?;
    let s_ap2 = member(x, 2)?;
    let mut terms = BTreeMap::new();
    terms.insert(Term::Rec, losses::reconstruction(&tape, s_ap, recon)?);
    terms.insert(Term::Smooth, losses::smooth(&tape, s_ap, recon)?);
    let score_fake = quality_controller(&b, cross)?;
    embedding_terms(&b, m_ap, p_ap, score_fake, &quads.ap, &mut terms)?;
    terms.insert(Term::Cross, losses::cross_reconstruction(&tape, cross, s_ap2)?);
    terms.insert(Term::Ee, losses::end_effector(&tape, s_ap, cross, ctx.topology)?);
    terms.insert(Term::Trip, losses::triplet(&tape, &emb, ctx.weights.gamma)?);
    terms.insert(Term::Latent, losses::latent_consistency(&tape, &emb)?);
    finish_autoencoder_step(params, &tape, b, terms, Objective::Paired, ctx)
}

/// One joint step of `M`, `P` and `Q` with the autoencoder frozen. `M` and
/// `P` learn from both embeddings of `batch`; `Q` separates `real` from
/// `fake`, where `fake` is produced from the batch by `make_fake`.
fn classifier_step_inner(
    params: &mut ParameterSet,
    batch: &Batch,
    real: &Tensor,
    make_fake: impl FnOnce(&Bound, Var, Var) -> Result<Var>,
    ctx: &StepContext,
) -> Result<StepOutcome> {
    let trained = [Group::Motion, Group::Privacy, Group::Quality];
    let snapshot = params.clone();
    let tape = Tape::new();
    let b = Bound::new(&tape, &snapshot, &trained);
    let n = batch.len();
    let x = tape.constant(batch.x.clone());
    let motion = encoder(&b, Component::MotionEncoder, x)?;
    let privacy = encoder(&b, Component::PrivacyEncoder, x)?;
    let fake = make_fake(&b, motion, privacy)?;
    let h = heads(&b, motion, privacy)?;
    let l_m = losses::classifier_loss(&tape, rows(&tape, h.m, 0, n)?, rows(&tape, h.m, n, n)?, &batch.actions)?;
    let l_p = losses::classifier_loss(&tape, rows(&tape, h.p, 0, n)?, rows(&tape, h.p, n, n)?, &batch.actors)?;
    let real_v = tape.constant(real.clone());
    let both = tape.concat(real_v, fake, 0)?;
    let scores = quality_controller(&b, both)?;
    let k = real.shape()[0];
    let (q_real, q_fake) = (rows(&tape, scores, 0, k)?, rows(&tape, scores, k, k)?);
    let l_qc = losses::quality_controller(&tape, q_real, q_fake)?;
    let terms: BTreeMap<Term, Var> = [(Term::M, l_m), (Term::P, l_p), (Term::Qc, l_qc)].into_iter().collect();
    let total = losses::weighted_total(&tape, &terms, ctx.weights, Objective::Classifiers)?;
    let values: BTreeMap<Term, f64> = terms.iter().map(|(k, v)| (*k, value(&tape, *v))).collect();
    let total_value = value(&tape, total);
    check_finite(&values, total_value, ctx.stage, ctx.step)?;
    let (pm, pp) = (tape.value(h.m), tape.value(h.p));
    let accuracies = Accuracies {
        m_on_motion: argmax_accuracy(&pm, 0, n, &batch.actions),
        m_on_privacy: argmax_accuracy(&pm, n, n, &batch.actions),
        p_on_motion: argmax_accuracy(&pp, 0, n, &batch.actors),
        p_on_privacy: argmax_accuracy(&pp, n, n, &batch.actors),
        qc_real: tape.value(q_real).mean(),
        qc_fake: tape.value(q_fake).mean(),
    };
    let grads = tape.backward(total)?;
    let per_group: Vec<(Group, BTreeMap<String, Tensor>)> =
        trained.iter().map(|&g| (g, group_grads(&b, &grads, g))).collect();
    let stats = b.take_bn_stats();
    drop(b);
    for (g, gr) in per_group {
        adam_step(params, g, &gr, ctx.adam)?;
    }
    update_running_stats(params, &stats)?;
    Ok(StepOutcome {
        terms: values,
        total: total_value,
        accuracies: Some(accuracies),
    })
}

/// Classifier step where `Q` compares sequences with their reconstructions.
pub fn classifier_step(params: &mut ParameterSet, batch: &Batch, ctx: &StepContext) -> Result<StepOutcome> {
    classifier_step_inner(params, batch, &batch.x, |b, m, p| decoder(b, m, p), ctx)
}

/// Classifier step on quadruples: `M` and `P` see every member, `Q` compares
/// anchors with their cross-reconstructions.
pub fn paired_classifier_step(params: &mut ParameterSet, quads: &QuadBatch, ctx: &StepContext) -> Result<StepOutcome> {
    let n = quads.ap.len();
    let all = Batch::concat(&[&quads.ap, &quads.a2p, &quads.ap2, &quads.a2p2])?;
    classifier_step_inner(
        params,
        &all,
        &quads.ap.x,
        |b, m, p| {
            let t = b.tape;
            let m_ap = rows(t, m, 0, n)?;
            let p_a2p2 = rows(t, p, 3 * n, n)?;
            decoder(b, m_ap, p_a2p2)
        },
        ctx,
    )
}
