//! Motion utility and re-identification risk of anonymized corpora, embedding
//! diagnostics, the trade-off sweep and frame rendering.

mod classifier;
mod experiment;
mod metrics;
mod render;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use classifier::{rotate_yaw, train_classifier, ClassifierConfig, SequenceClassifier, Target};
pub use experiment::{
    cross_reconstruction_mse, heldout_triplet, reconstruction_mse, run_experiment, tradeoff_sweep, ExperimentConfig,
    ExperimentResult, PolicyOutputs, Probes, sweep_rows,
};
pub use metrics::{mse, rank_of, report_k, silhouette, spearman, top_k_accuracy};
pub use render::{evenly_spaced, render_frame, render_frames, Bounds};

use crate::anonymizer::AnonymizationManifest;
use crate::dataset::{batch_of, Corpus, SkeletonSequence};
use crate::error::{Error, Result};
use crate::network::{encode_batch, ParameterSet};

/// How the utility target of an output was chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// The dummy actor's own recording of the input action.
    Retarget,
    /// No such recording exists; the original input is used.
    Original,
}

/// Utility target of each manifest record: index into `originals` and kind.
pub fn utility_targets(originals: &Corpus, manifest: &AnonymizationManifest) -> Result<Vec<(usize, TargetKind)>> {
    let entries = &originals.index.entries;
    manifest
        .records
        .iter()
        .map(|r| {
            let original = originals
                .index
                .find(&r.original)
                .ok_or_else(|| Error::ManifestMismatch(format!("{} is not in the original corpus", r.original)))?;
            let same_view = entries.iter().position(|e| {
                (e.meta.actor, e.meta.action, e.meta.camera) == (r.dummy_actor, r.action, r.camera)
            });
            let any_view = || entries.iter().position(|e| (e.meta.actor, e.meta.action) == (r.dummy_actor, r.action));
            Ok(match same_view.or_else(any_view) {
                Some(i) => (i, TargetKind::Retarget),
                None => (original, TargetKind::Original),
            })
        })
        .collect()
}

/// Mean over sequences of the per-sequence MSE between aligned corpora.
pub fn utility_mse(targets: &[&SkeletonSequence], outputs: &[SkeletonSequence]) -> Result<f64> {
    if targets.len() != outputs.len() || targets.is_empty() {
        return Err(Error::ManifestMismatch(format!(
            "{} targets for {} outputs",
            targets.len(),
            outputs.len()
        )));
    }
    let per = targets
        .iter()
        .zip(outputs)
        .map(|(t, o)| mse(t.data(), o.data()).map_err(|e| Error::ManifestMismatch(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Top-1 and top-k accuracy of `model` against true label ids.
pub fn attack(model: &SequenceClassifier, seqs: &[&SkeletonSequence], labels: &[u32]) -> Result<(f64, f64)> {
    let classes = labels.iter().map(|&l| model.class_of(l)).collect::<Result<Vec<_>>>()?;
    let probs = model.predict(seqs)?;
    let k = report_k(model.classes.len());
    Ok((top_k_accuracy(&probs, &classes, 1)?, top_k_accuracy(&probs, &classes, k)?))
}

/// Per-sequence evaluation record; every report number recomputes from these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub original: String,
    pub actor: u32,
    pub action: u32,
    pub dummy: String,
    pub dummy_actor: u32,
    /// Identifier of the utility target.
    pub target: String,
    pub target_kind: TargetKind,
    pub mse_target: f64,
    pub mse_original: f64,
    /// Rank of the true actor among the attacker's scores, 1-based.
    pub actor_rank: usize,
    pub predicted_actor: u32,
    pub predicted_action: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassBreakdown {
    pub count: usize,
    pub reid_top1: f64,
    pub action_top1: f64,
    pub utility_mse: f64,
}

/// Utility and privacy of one anonymized corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    /// Mean MSE against the retarget target, falling back to the original.
    pub utility_mse: f64,
    /// Mean MSE against the original input.
    pub utility_mse_original: f64,
    /// Records whose target is a real retarget recording.
    pub retarget_targets: usize,
    pub reid_top1: f64,
    /// Top-k re-identification with `k` = [`EvalReport::k`].
    pub reid_topk: f64,
    pub k: usize,
    pub action_top1: f64,
    pub per_actor: BTreeMap<u32, ClassBreakdown>,
    pub per_action: BTreeMap<u32, ClassBreakdown>,
    pub records: Vec<SequenceRecord>,
}

impl EvalReport {
    /// Aggregates per-sequence records.
    pub fn from_records(policy: impl Into<String>, k: usize, records: Vec<SequenceRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InsufficientData("no records to report".into()));
        }
        let n = records.len() as f64;
        let frac = |f: &dyn Fn(&SequenceRecord) -> bool| records.iter().filter(|r| f(r)).count() as f64 / n;
        let breakdown = |key: &dyn Fn(&SequenceRecord) -> u32| {
            let mut groups: BTreeMap<u32, Vec<&SequenceRecord>> = BTreeMap::new();
            for r in &records {
                groups.entry(key(r)).or_default().push(r);
            }
            groups
                .into_iter()
                .map(|(id, rs)| {
                    let m = rs.len() as f64;
                    (
                        id,
                        ClassBreakdown {
                            count: rs.len(),
                            reid_top1: rs.iter().filter(|r| r.actor_rank == 1).count() as f64 / m,
                            action_top1: rs.iter().filter(|r| r.predicted_action == r.action).count() as f64 / m,
                            utility_mse: rs.iter().map(|r| r.mse_target).sum::<f64>() / m,
                        },
                    )
                })
                .collect()
        };
        Ok(Self {
            policy: policy.into(),
            utility_mse: records.iter().map(|r| r.mse_target).sum::<f64>() / n,
            utility_mse_original: records.iter().map(|r| r.mse_original).sum::<f64>() / n,
            retarget_targets: records.iter().filter(|r| r.target_kind == TargetKind::Retarget).count(),
            reid_top1: frac(&|r| r.actor_rank == 1),
            reid_topk: frac(&|r| r.actor_rank <= k),
            k,
            action_top1: frac(&|r| r.predicted_action == r.action),
            per_actor: breakdown(&|r| r.actor),
            per_action: breakdown(&|r| r.action),
            records,
        })
    }

    /// Recomputes every aggregate from the records and compares.
    pub fn is_consistent(&self) -> bool {
        match Self::from_records(self.policy.clone(), self.k, self.records.clone()) {
            Ok(r) => r == *self,
            Err(_) => false,
        }
    }
}

/// Scores anonymized outputs with the attacker and the action classifier.
pub fn evaluate_outputs(
    policy: &str,
    originals: &Corpus,
    manifest: &AnonymizationManifest,
    outputs: &[SkeletonSequence],
    attacker: &SequenceClassifier,
    action_model: &SequenceClassifier,
) -> Result<EvalReport> {
    if manifest.records.len() != outputs.len() {
        return Err(Error::ManifestMismatch(format!(
            "manifest lists {} outputs, {} given",
            manifest.records.len(),
            outputs.len()
        )));
    }
    let targets = utility_targets(originals, manifest)?;
    let refs: Vec<&SkeletonSequence> = outputs.iter().collect();
    let actor_probs = attacker.predict(&refs)?;
    let action_probs = action_model.predict(&refs)?;
    let (ya, yc) = (attacker.classes.len(), action_model.classes.len());
    let argmax = |row: &[f64]| {
        row.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0
    };
    let mut records = Vec::with_capacity(outputs.len());
    for (i, ((r, out), &(t, kind))) in manifest.records.iter().zip(outputs).zip(&targets).enumerate() {
        let original = originals.find(&r.original).expect("checked by utility_targets");
        let a_row = &actor_probs.data()[i * ya..(i + 1) * ya];
        let c_row = &action_probs.data()[i * yc..(i + 1) * yc];
        let to_mismatch = |e: Error| Error::ManifestMismatch(format!("{}: {e}", r.original));
        records.push(SequenceRecord {
            original: r.original.clone(),
            actor: r.actor,
            action: r.action,
            dummy: r.dummy.clone(),
            dummy_actor: r.dummy_actor,
            target: originals.index.entries[t].identifier(),
            target_kind: kind,
            mse_target: mse(originals.sequences[t].data(), out.data()).map_err(to_mismatch)?,
            mse_original: mse(original.data(), out.data()).map_err(to_mismatch)?,
            actor_rank: rank_of(a_row, attacker.class_of(r.actor)?),
            predicted_actor: attacker.classes[argmax(a_row)],
            predicted_action: action_model.classes[argmax(c_row)],
        });
    }
    EvalReport::from_records(policy, report_k(ya), records)
}

/// Baseline accuracies of the offline probes on held-out originals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeBaseline {
    pub attacker_top1: f64,
    pub attacker_topk: f64,
    pub k: usize,
    pub action_top1: f64,
    /// Attacker accuracy after shuffling actor labels, a harness sanity check.
    pub shuffled_label_top1: f64,
    pub chance: f64,
}

/// Everything `evaluate` reports for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub baseline: ProbeBaseline,
    pub reports: Vec<EvalReport>,
}

/// One row of the trade-off table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha_emb: f64,
    pub policy: String,
    pub mse: f64,
    pub reid_top1: f64,
    pub reid_topk: f64,
    pub k: usize,
}

/// CSV with columns `alpha_emb,policy,mse,reid_top1,reid_top{k}`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let k = rows.first().map_or(5, |r| r.k);
    let mut out = format!("alpha_emb,policy,mse,reid_top1,reid_top{k}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.alpha_emb, r.policy, r.mse, r.reid_top1, r.reid_topk);
    }
    out
}

/// Flattened motion and privacy embeddings of every sequence, one row each.
pub struct EmbeddingTable {
    pub actions: Vec<u32>,
    pub actors: Vec<u32>,
    pub motion: Vec<Vec<f64>>,
    pub privacy: Vec<Vec<f64>>,
}

pub fn embed_corpus(params: &ParameterSet, corpus: &Corpus) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable {
        actions: corpus.index.entries.iter().map(|e| e.meta.action).collect(),
        actors: corpus.index.entries.iter().map(|e| e.meta.actor).collect(),
        motion: Vec::with_capacity(corpus.len()),
        privacy: Vec::with_capacity(corpus.len()),
    };
    for chunk in corpus.sequences.chunks(32) {
        let e = encode_batch(params, &batch_of(chunk)?)?;
        let (m, p) = (e.motion.shape()[1..].iter().product::<usize>(), e.privacy.shape()[1..].iter().product::<usize>());
        table.motion.extend(e.motion.data().chunks(m).map(<[f64]>::to_vec));
        table.privacy.extend(e.privacy.data().chunks(p).map(<[f64]>::to_vec));
    }
    Ok(table)
}

impl EmbeddingTable {
    /// Tab-separated: `action actor m0 .. p0 ..`, with a header line.
    pub fn to_tsv(&self) -> String {
        let (m, p) = (
            self.motion.first().map_or(0, Vec::len),
            self.privacy.first().map_or(0, Vec::len),
        );
        let mut out = String::from("action\tactor");
        for i in 0..m {
            let _ = write!(out, "\tm{i}");
        }
        for i in 0..p {
            let _ = write!(out, "\tp{i}");
        }
        out.push('\n');
        for r in 0..self.actions.len() {
            let _ = write!(out, "{}\t{}", self.actions[r], self.actors[r]);
            for v in self.motion[r].iter().chain(&self.privacy[r]) {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Silhouettes of both embeddings grouped by action and by actor.
    pub fn silhouettes(&self) -> Result<Silhouettes> {
        let dense = |ids: &[u32]| {
            let mut u: Vec<u32> = ids.to_vec();
            u.sort_unstable();
            u.dedup();
            ids.iter().map(|i| u.binary_search(i).expect("present")).collect::<Vec<_>>()
        };
        let (by_action, by_actor) = (dense(&self.actions), dense(&self.actors));
        Ok(Silhouettes {
            motion_by_action: silhouette(&self.motion, &by_action)?,
            motion_by_actor: silhouette(&self.motion, &by_actor)?,
            privacy_by_action: silhouette(&self.privacy, &by_action)?,
            privacy_by_actor: silhouette(&self.privacy, &by_actor)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Silhouettes {
    pub motion_by_action: f64,
    pub motion_by_actor: f64,
    pub privacy_by_action: f64,
    pub privacy_by_actor: f64,
}

/// Writes the embedding table of `corpus` to `path`.
pub fn export_embeddings(params: &ParameterSet, corpus: &Corpus, path: &Path) -> Result<EmbeddingTable> {
    let table = embed_corpus(params, corpus)?;
    std::fs::write(path, table.to_tsv()).map_err(|e| Error::io(path, e))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anonymizer::AnonymizedRecord;
    use crate::dataset::{generate_synthetic, PreprocessConfig, SkeletonTopology};

    fn corpus() -> Corpus {
        let topo = SkeletonTopology::kinect_v2();
        Corpus::load(&generate_synthetic(2, 2, 1, 5).unwrap(), &topo, &PreprocessConfig::default()).unwrap()
    }

    fn record(c: &Corpus, i: usize, dummy_actor: u32) -> AnonymizedRecord {
        let m = c.index.entries[i].meta;
        AnonymizedRecord {
            original: m.name(),
            output: format!("{}.skeleton", m.name()),
            action: m.action,
            actor: m.actor,
            camera: m.camera,
            dummy: String::new(),
            dummy_actor,
        }
    }

    #[test]
    fn target_is_dummy_recording_of_same_action() {
        let c = corpus();
        let i = c.index.entries.iter().position(|e| e.meta.actor == 1 && e.meta.action == 2).unwrap();
        let m = AnonymizationManifest {
            records: vec![record(&c, i, 2), record(&c, i, 9)],
        };
        let t = utility_targets(&c, &m).unwrap();
        let e = &c.index.entries[t[0].0].meta;
        assert_eq!((e.actor, e.action, t[0].1), (2, 2, TargetKind::Retarget));
        assert_eq!(t[1], (i, TargetKind::Original));
        let mut bad = m.clone();
        bad.records[0].original = "S001C001P009R001A001".into();
        assert!(matches!(utility_targets(&c, &bad), Err(Error::ManifestMismatch(_))));
    }

    #[test]
    fn utility_mse_zero_and_unit_offset() {
        let c = corpus();
        let refs: Vec<&SkeletonSequence> = c.sequences.iter().collect();
        assert_eq!(utility_mse(&refs, &c.sequences).unwrap(), 0.0);
        let shifted: Vec<SkeletonSequence> = c
            .sequences
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.data_mut().iter_mut().for_each(|v| *v += 1.0);
                s
            })
            .collect();
        assert!((utility_mse(&refs, &shifted).unwrap() - 1.0).abs() < 1e-12);
        assert!(utility_mse(&refs[..1], &shifted).is_err());
    }

    #[test]
    fn report_recomputes_from_records() {
        let rec = |rank, action, predicted_action| SequenceRecord {
            original: "x".into(),
            actor: 1,
            action,
            dummy: "d".into(),
            dummy_actor: 2,
            target: "t".into(),
            target_kind: TargetKind::Retarget,
            mse_target: 0.5,
            mse_original: 1.0,
            actor_rank: rank,
            predicted_actor: 1,
            predicted_action,
        };
        let r = EvalReport::from_records("constant", 2, vec![rec(1, 1, 1), rec(2, 1, 2), rec(3, 2, 2)]).unwrap();
        assert!((r.reid_top1 - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.reid_topk - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.action_top1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(r.reid_top1 <= r.reid_topk);
        assert_eq!(r.per_action[&1].count, 2);
        assert!(r.is_consistent());
        let mut tampered = r.clone();
        tampered.reid_top1 = 0.0;
        assert!(!tampered.is_consistent());
    }

    #[test]
    fn sweep_csv_has_header_and_rows() {
        let rows = vec![SweepRow {
            alpha_emb: 10.0,
            policy: "constant".into(),
            mse: 0.01,
            reid_top1: 0.25,
            reid_topk: 0.5,
            k: 2,
        }];
        assert_eq!(sweep_csv(&rows), "alpha_emb,policy,mse,reid_top1,reid_top2\n10,constant,0.01,0.25,0.5\n");
    }
}
