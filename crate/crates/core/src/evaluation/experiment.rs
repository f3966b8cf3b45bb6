//! End-to-end experiment: train the staged plan, anonymize the held-out split
//! under both dummy policies and score the outputs.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classifier::{train_classifier, ClassifierConfig, SequenceClassifier, Target};
use super::metrics::{mse, report_k, top_k_accuracy};
use super::{
    attack, embed_corpus, evaluate_outputs, EvaluationSummary, ProbeBaseline, Silhouettes, SweepRow,
};
use crate::anonymizer::{anonymize_all, default_constant_dummy, dummy_pool, AnonymizationManifest, DummyPolicy};
use crate::dataset::{batch_of, build_pairs, Corpus, LabelMap, QuadrupleIndex, SkeletonSequence, SkeletonTopology, Split};
use crate::error::{Error, Result};
use crate::losses;
use crate::network::{decode_batch, encode_batch, NetworkConfig, ParameterSet};
use crate::tensor::Tensor;
use crate::training::{StageId, StagePlan, TrainConfig, TrainData, TrainState, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Class counts are taken from the corpus.
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub plan: StagePlan,
    pub probes: ClassifierConfig,
    pub random_dummy_seed: u64,
    /// Identifier of the constant dummy; `None` picks the default.
    pub constant_dummy: Option<String>,
    /// Seed of held-out quadruple enumeration.
    pub eval_pair_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            plan: StagePlan::default(),
            probes: ClassifierConfig::default(),
            random_dummy_seed: 7,
            constant_dummy: None,
            eval_pair_seed: 1,
        }
    }
}

impl ExperimentConfig {
    /// Single-core configuration: reduced network, batch size and schedule.
    pub fn desk() -> Self {
        Self {
            network: NetworkConfig::desk(0, 0),
            train: TrainConfig {
                batch_size: 8,
                ..TrainConfig::default()
            },
            plan: StagePlan::scaled(),
            ..Self::default()
        }
    }
}

const SHUFFLE_ROUNDS: usize = 100;

/// Offline attacker and action classifier trained on original recordings.
#[derive(Clone, Debug, PartialEq)]
pub struct Probes {
    pub attacker: SequenceClassifier,
    pub action: SequenceClassifier,
    pub baseline: ProbeBaseline,
}

impl Probes {
    /// Trains both probes on `train` and measures them on `heldout`.
    pub fn train(train: &Corpus, heldout: &Corpus, cfg: &ClassifierConfig) -> Result<Self> {
        let attacker = train_classifier(&train.sequences, Target::Actor, cfg)?;
        let action = train_classifier(&train.sequences, Target::Action, cfg)?;
        let refs: Vec<&SkeletonSequence> = heldout.sequences.iter().collect();
        let actors: Vec<u32> = heldout.sequences.iter().map(|s| s.meta.actor).collect();
        let actions: Vec<u32> = heldout.sequences.iter().map(|s| s.meta.action).collect();
        let (attacker_top1, attacker_topk) = attack(&attacker, &refs, &actors)?;
        let (action_top1, _) = attack(&action, &refs, &actions)?;

        // Scoring against permuted labels; averaged since one permutation of a
        // small split is noisy.
        let mut shuffled = actors
            .iter()
            .map(|&a| attacker.class_of(a))
            .collect::<Result<Vec<_>>>()?;
        let probs = attacker.predict(&refs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5151);
        let mut shuffled_label_top1 = 0.0;
        for _ in 0..SHUFFLE_ROUNDS {
            shuffled.shuffle(&mut rng);
            shuffled_label_top1 += top_k_accuracy(&probs, &shuffled, 1)? / SHUFFLE_ROUNDS as f64;
        }
        let baseline = ProbeBaseline {
            attacker_top1,
            attacker_topk,
            k: report_k(attacker.classes.len()),
            action_top1,
            shuffled_label_top1,
            chance: 1.0 / attacker.classes.len() as f64,
        };
        Ok(Self {
            attacker,
            action,
            baseline,
        })
    }
}

/// Outputs of one anonymization policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutputs {
    pub policy: String,
    pub manifest: AnonymizationManifest,
    pub outputs: Vec<SkeletonSequence>,
}

pub struct ExperimentResult {
    pub state: TrainState,
    pub summary: EvaluationSummary,
    pub outputs: Vec<PolicyOutputs>,
    pub silhouettes: Silhouettes,
    /// Held-out `MSE(s, D(E_M(s), E_P(s)))`.
    pub heldout_reconstruction: f64,
    /// Held-out cross-reconstruction MSE entering the paired stage.
    pub cross_before_paired: Option<f64>,
    pub cross_after: f64,
    pub heldout_triplet: f64,
}

fn quad_members(corpus: &Corpus, pairs: &[QuadrupleIndex], f: fn(&QuadrupleIndex) -> usize) -> Result<Tensor> {
    batch_of(pairs.iter().map(|q| &corpus.sequences[f(q)]))
}

/// Mean of `MSE(D(E_M(ap), E_P(a'p')), s_ap')` over quadruples and their role swaps.
pub fn cross_reconstruction_mse(params: &ParameterSet, corpus: &Corpus, pairs: &[QuadrupleIndex]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::NoValidPairs);
    }
    let oriented: Vec<QuadrupleIndex> = pairs.iter().flat_map(|q| [*q, q.swapped()]).collect();
    let mut total = 0.0;
    for chunk in oriented.chunks(32) {
        let src = encode_batch(params, &quad_members(corpus, chunk, |q| q.ap)?)?;
        let dummy = encode_batch(params, &quad_members(corpus, chunk, |q| q.a2p2)?)?;
        let y = decode_batch(params, &src.motion, &dummy.privacy)?;
        let target = quad_members(corpus, chunk, |q| q.ap2)?;
        total += mse(y.data(), target.data())? * chunk.len() as f64;
    }
    Ok(total / oriented.len() as f64)
}

/// Mean `MSE(s, D(E(s)))` over a corpus.
pub fn reconstruction_mse(params: &ParameterSet, corpus: &Corpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::InsufficientData("empty corpus".into()));
    }
    let mut total = 0.0;
    for chunk in corpus.sequences.chunks(32) {
        let x = batch_of(chunk)?;
        let e = encode_batch(params, &x)?;
        let y = decode_batch(params, &e.motion, &e.privacy)?;
        total += mse(y.data(), x.data())? * chunk.len() as f64;
    }
    Ok(total / corpus.len() as f64)
}

/// Triplet loss over quadruples of `corpus`.
pub fn heldout_triplet(params: &ParameterSet, corpus: &Corpus, pairs: &[QuadrupleIndex], gamma: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::NoValidPairs);
    }
    let e = |f: fn(&QuadrupleIndex) -> usize| encode_batch(params, &quad_members(corpus, pairs, f)?);
    let (ap, a2p, ap2) = (e(|q| q.ap)?, e(|q| q.a2p)?, e(|q| q.ap2)?);
    losses::eval::triplet_loss(
        (&ap.motion, &ap.privacy),
        (&a2p.motion, &a2p.privacy),
        (&ap2.motion, &ap2.privacy),
        gamma,
    )
}

/// Trains the plan on the train split of `corpus` and evaluates on its eval split.
pub fn run_experiment(
    corpus: &Corpus,
    topology: &SkeletonTopology,
    cfg: &ExperimentConfig,
    probes: &Probes,
    log: Option<&mut dyn Write>,
) -> Result<ExperimentResult> {
    cfg.train.validate()?;
    let train = corpus.subset(Split::Train);
    let heldout = corpus.subset(Split::Eval);
    if heldout.is_empty() {
        return Err(Error::InsufficientData("the eval split is empty".into()));
    }
    let labels = LabelMap::from_index(&corpus.index);
    let mut network = cfg.network.clone();
    network.y_action = labels.actions.len();
    network.y_actor = labels.actors.len();
    let data = TrainData::new(&train, topology, cfg.train.data_seed)?;
    let mut state = TrainState::new(&network, labels, cfg.plan.clone(), &cfg.train)?;
    let eval_pairs = build_pairs(&heldout.index, cfg.eval_pair_seed)?;

    let mut cross_before = None;
    {
        let mut trainer = Trainer::new(&data, &cfg.train);
        if let Some(sink) = log {
            trainer = trainer.with_log(sink);
        }
        while let Some(stage) = state.current_stage() {
            if stage.id == StageId::Paired && cross_before.is_none() {
                cross_before = Some(cross_reconstruction_mse(&state.params, &heldout, &eval_pairs)?);
            }
            trainer.run_stage(&mut state, &mut |_| Ok(()))?;
        }
    }
    let params = &state.params;

    let train_actors: BTreeSet<u32> = train.index.actors();
    let constant = match &cfg.constant_dummy {
        Some(id) => id.clone(),
        None => default_constant_dummy(&heldout.index, &train_actors)?,
    };
    let policies = [
        ("constant", DummyPolicy::constant(constant, heldout.clone())?),
        (
            "random",
            DummyPolicy::random(cfg.random_dummy_seed, dummy_pool(&heldout, &train_actors))?,
        ),
    ];
    let mut outputs = Vec::new();
    let mut reports = Vec::new();
    for (name, policy) in &policies {
        let out = anonymize_all(params, &heldout.sequences, policy)?;
        let manifest = AnonymizationManifest::build(&heldout.sequences, &out)?;
        reports.push(evaluate_outputs(name, &heldout, &manifest, &out, &probes.attacker, &probes.action)?);
        outputs.push(PolicyOutputs {
            policy: name.to_string(),
            manifest,
            outputs: out,
        });
    }

    Ok(ExperimentResult {
        silhouettes: embed_corpus(params, &heldout)?.silhouettes()?,
        heldout_reconstruction: reconstruction_mse(params, &heldout)?,
        cross_before_paired: cross_before,
        cross_after: cross_reconstruction_mse(params, &heldout, &eval_pairs)?,
        heldout_triplet: heldout_triplet(params, &heldout, &eval_pairs, cfg.train.weights.gamma)?,
        summary: EvaluationSummary {
            baseline: probes.baseline.clone(),
            reports,
        },
        outputs,
        state,
    })
}

/// Runs the experiment once per `alpha_emb` and tabulates both policies.
pub fn tradeoff_sweep(
    corpus: &Corpus,
    topology: &SkeletonTopology,
    cfg: &ExperimentConfig,
    probes: &Probes,
    alphas: &[f64],
) -> Result<(Vec<SweepRow>, Vec<ExperimentResult>)> {
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for &alpha in alphas {
        let mut c = cfg.clone();
        c.train.weights.alpha_emb = alpha;
        let r = run_experiment(corpus, topology, &c, probes, None)?;
        rows.extend(sweep_rows(alpha, &r.summary));
        results.push(r);
    }
    Ok((rows, results))
}

/// Table rows of one evaluated model.
pub fn sweep_rows(alpha: f64, summary: &EvaluationSummary) -> Vec<SweepRow> {
    summary
        .reports
        .iter()
        .map(|r| SweepRow {
            alpha_emb: alpha,
            policy: r.policy.clone(),
            mse: r.utility_mse,
            reid_top1: r.reid_top1,
            reid_topk: r.reid_topk,
            k: r.k,
        })
        .collect()
}
