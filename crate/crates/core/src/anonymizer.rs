//! Anonymization by retargeting: decode the input's motion embedding with the
//! privacy embedding of a dummy recording.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{batch_of, mix_seed, write_ntu_file, Anonymization, Corpus, CorpusIndex, SkeletonSequence};
use crate::error::{Error, Result};
use crate::network::{decode_batch, encode_batch, ParameterSet};
use crate::tensor::Tensor;

/// Sequences encoded or decoded per network call.
const CHUNK: usize = 32;

/// Marker stored as the actor id of anonymized outputs.
pub const ANONYMIZED_ACTOR: u32 = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DummyMode {
    /// Every input uses the recording with this identifier.
    Constant { reference: String },
    /// Each input draws from the pool, excluding recordings of its own actor.
    Random { seed: u64 },
}

/// How the dummy recording is chosen for each input.
#[derive(Clone, Debug, PartialEq)]
pub struct DummyPolicy {
    pub mode: DummyMode,
    pub pool: Corpus,
}

fn identifier_hash(identifier: &str) -> u64 {
    let d = Sha256::digest(identifier.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl DummyPolicy {
    pub fn constant(reference: impl Into<String>, pool: Corpus) -> Result<Self> {
        let reference = reference.into();
        if pool.is_empty() {
            return Err(Error::EmptyDummyPool);
        }
        if pool.index.find(&reference).is_none() {
            return Err(Error::Config(format!("constant dummy {reference} is not in the pool")));
        }
        Ok(Self {
            mode: DummyMode::Constant { reference },
            pool,
        })
    }

    pub fn random(seed: u64, pool: Corpus) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::EmptyDummyPool);
        }
        Ok(Self {
            mode: DummyMode::Random { seed },
            pool,
        })
    }

    /// Pool position of the dummy used for `input`.
    pub fn select(&self, input: &SkeletonSequence) -> Result<usize> {
        match &self.mode {
            DummyMode::Constant { reference } => self.pool.index.find(reference).ok_or(Error::EmptyDummyPool),
            DummyMode::Random { seed } => {
                let eligible: Vec<usize> = (0..self.pool.len())
                    .filter(|&i| self.pool.index.entries[i].meta.actor != input.meta.actor)
                    .collect();
                if eligible.is_empty() {
                    return Err(Error::EmptyDummyPool);
                }
                let h = mix_seed(*seed, &[identifier_hash(&input.identifier())]);
                Ok(eligible[(h % eligible.len() as u64) as usize])
            }
        }
    }
}

/// Default constant dummy: the lexicographically first recording of an actor
/// the attacker never saw, else the first recording overall.
pub fn default_constant_dummy(eval: &CorpusIndex, attack_actors: &BTreeSet<u32>) -> Result<String> {
    let ids = |unseen: bool| {
        eval.entries
            .iter()
            .filter(move |e| !unseen || !attack_actors.contains(&e.meta.actor))
            .map(|e| e.identifier())
            .min()
    };
    ids(true).or_else(|| ids(false)).ok_or(Error::EmptyDummyPool)
}

/// Random-dummy pool: recordings in `corpus` of actors listed in `actors`.
pub fn dummy_pool(corpus: &Corpus, actors: &BTreeSet<u32>) -> Corpus {
    let (entries, sequences) = corpus
        .index
        .entries
        .iter()
        .zip(&corpus.sequences)
        .filter(|(e, _)| actors.contains(&e.meta.actor))
        .map(|(e, s)| (e.clone(), s.clone()))
        .unzip();
    Corpus {
        index: CorpusIndex { entries },
        sequences,
    }
}

fn chunked_rows(t: &Tensor) -> Vec<Tensor> {
    (0..t.shape()[0]).map(|i| t.rows(i, 1)).collect()
}

/// Anonymizes every input. Outputs keep the input's action and camera, carry
/// [`ANONYMIZED_ACTOR`] as actor id and record the dummy used.
pub fn anonymize_all(params: &ParameterSet, inputs: &[SkeletonSequence], policy: &DummyPolicy) -> Result<Vec<SkeletonSequence>> {
    let cfg = &params.config;
    for s in inputs.iter().chain(&policy.pool.sequences) {
        s.validate_normalized(cfg.joints, cfg.frames)?;
    }
    let picks = inputs.iter().map(|s| policy.select(s)).collect::<Result<Vec<_>>>()?;

    let used: BTreeSet<usize> = picks.iter().copied().collect();
    let used: Vec<usize> = used.into_iter().collect();
    let mut privacy: BTreeMap<usize, Tensor> = BTreeMap::new();
    for chunk in used.chunks(CHUNK) {
        let e = encode_batch(params, &batch_of(chunk.iter().map(|&i| &policy.pool.sequences[i]))?)?;
        for (&i, p) in chunk.iter().zip(chunked_rows(&e.privacy)) {
            privacy.insert(i, p);
        }
    }

    let mut out = Vec::with_capacity(inputs.len());
    for (seqs, picks) in inputs.chunks(CHUNK).zip(picks.chunks(CHUNK)) {
        let e = encode_batch(params, &batch_of(seqs)?)?;
        let p: Vec<&Tensor> = picks.iter().map(|i| &privacy[i]).collect();
        let y = decode_batch(params, &e.motion, &Tensor::concat_rows(&p)?)?;
        for ((input, &pick), row) in seqs.iter().zip(picks).zip(chunked_rows(&y)) {
            let shape = row.shape()[1..].to_vec();
            let mut meta = input.meta;
            meta.actor = ANONYMIZED_ACTOR;
            let mut s = SkeletonSequence::from_tensor(&row.reshape(&shape)?, meta)?;
            let dummy = &policy.pool.index.entries[pick];
            s.anonymization = Some(Anonymization {
                dummy: dummy.identifier(),
                dummy_actor: dummy.meta.actor,
            });
            if !s.is_finite() {
                return Err(Error::shape(format!("non-finite output for {}", input.identifier())));
            }
            out.push(s);
        }
    }
    Ok(out)
}

/// Anonymizes one sequence: `D(E_M(input), E_P(dummy))`.
pub fn anonymize(params: &ParameterSet, input: &SkeletonSequence, policy: &DummyPolicy) -> Result<SkeletonSequence> {
    let mut out = anonymize_all(params, std::slice::from_ref(input), policy)?;
    Ok(out.remove(0))
}

/// One line of the anonymization manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnonymizedRecord {
    pub original: String,
    /// Output file name relative to the manifest.
    pub output: String,
    pub action: u32,
    /// Actor of the original recording, the label a re-identification attack targets.
    pub actor: u32,
    pub camera: u32,
    pub dummy: String,
    pub dummy_actor: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnonymizationManifest {
    pub records: Vec<AnonymizedRecord>,
}

pub const MANIFEST_FILE: &str = "anonymized.tsv";
const MANIFEST_HEADER: &str = "# original\toutput\taction\tactor\tcamera\tdummy\tdummy_actor";

impl AnonymizationManifest {
    pub fn build(inputs: &[SkeletonSequence], outputs: &[SkeletonSequence]) -> Result<Self> {
        if inputs.len() != outputs.len() {
            return Err(Error::ManifestMismatch(format!(
                "{} inputs but {} outputs",
                inputs.len(),
                outputs.len()
            )));
        }
        let records = inputs
            .iter()
            .zip(outputs)
            .map(|(i, o)| {
                let a = o
                    .anonymization
                    .as_ref()
                    .ok_or_else(|| Error::ManifestMismatch(format!("{} was not anonymized", i.identifier())))?;
                Ok(AnonymizedRecord {
                    original: i.identifier(),
                    output: format!("{}.skeleton", i.identifier()),
                    action: i.meta.action,
                    actor: i.meta.actor,
                    camera: i.meta.camera,
                    dummy: a.dummy.clone(),
                    dummy_actor: a.dummy_actor,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { records })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n");
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.original, r.output, r.action, r.actor, r.camera, r.dummy, r.dummy_actor
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::ManifestMismatch(format!("line {}: {what}", n + 1));
            let c: Vec<&str> = line.split('\t').collect();
            if c.len() != 7 {
                return Err(bad("expected 7 tab-separated columns"));
            }
            let num = |s: &str| s.parse::<u32>().map_err(|_| bad("non-numeric id"));
            records.push(AnonymizedRecord {
                original: c[0].into(),
                output: c[1].into(),
                action: num(c[2])?,
                actor: num(c[3])?,
                camera: num(c[4])?,
                dummy: c[5].into(),
                dummy_actor: num(c[6])?,
            });
        }
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Distinct dummies used.
    pub fn dummies(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.dummy.as_str()).collect()
    }
}

/// Anonymizes every input, writes one NTU-layout file per output plus the
/// manifest into `out_dir`, and returns the manifest path with the outputs.
pub fn anonymize_corpus(
    params: &ParameterSet,
    inputs: &Corpus,
    policy: &DummyPolicy,
    out_dir: &Path,
) -> Result<(PathBuf, AnonymizationManifest, Vec<SkeletonSequence>)> {
    let outputs = anonymize_all(params, &inputs.sequences, policy)?;
    let manifest = AnonymizationManifest::build(&inputs.sequences, &outputs)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (r, s) in manifest.records.iter().zip(&outputs) {
        write_ntu_file(s, &out_dir.join(&r.output))?;
    }
    let path = out_dir.join(MANIFEST_FILE);
    manifest.write(&path)?;
    Ok((path, manifest, outputs))
}
