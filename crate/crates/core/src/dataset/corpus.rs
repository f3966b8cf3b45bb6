use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::denoise::{denoise, DenoiseConfig};
use super::ntu::parse_ntu_file;
use super::sequence::{normalize_length, SequenceMeta, SkeletonSequence, FRAMES};
use super::synthetic::{parse_synthetic_source, synthesize_sequence, synthetic_cells, synthetic_source};
use super::topology::SkeletonTopology;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    /// Camera 1 is held out for evaluation; cameras 2 and 3 train. Other views are unused.
    pub fn for_camera(camera: u32) -> Option<Split> {
        match camera {
            1 => Some(Split::Eval),
            2 | 3 => Some(Split::Train),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(Error::ManifestMismatch(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    /// File path, or `synthetic://<seed>/<name>` for generated recordings.
    pub source: String,
    pub meta: SequenceMeta,
    pub split: Split,
}

impl CorpusEntry {
    pub fn identifier(&self) -> String {
        self.meta.name()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub entries: Vec<CorpusEntry>,
}

impl CorpusIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn subset(&self, split: Split) -> CorpusIndex {
        CorpusIndex {
            entries: self.entries.iter().filter(|e| e.split == split).cloned().collect(),
        }
    }

    pub fn actors(&self) -> BTreeSet<u32> {
        self.entries.iter().map(|e| e.meta.actor).collect()
    }

    pub fn actions(&self) -> BTreeSet<u32> {
        self.entries.iter().map(|e| e.meta.action).collect()
    }

    pub fn find(&self, identifier: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.identifier() == identifier)
    }

    /// Checks the camera split and the actor/action/camera ranges.
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if Split::for_camera(e.meta.camera) != Some(e.split) {
                return Err(Error::ManifestMismatch(format!(
                    "{} on camera {} is assigned to {}",
                    e.source, e.meta.camera, e.split
                )));
            }
            if e.meta.actor == 0 || e.meta.action == 0 {
                return Err(Error::ManifestMismatch(format!("{} has a zero actor or action id", e.source)));
            }
        }
        Ok(())
    }

    /// Tab-separated `source actor action camera split`, one record per line.
    pub fn to_manifest_string(&self) -> String {
        let mut out = String::from("# source\tactor\taction\tcamera\tsplit\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.source, e.meta.actor, e.meta.action, e.meta.camera, e.split
            ));
        }
        out
    }

    pub fn parse_manifest(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = |what: &str| Error::ManifestMismatch(format!("line {}: {what}", n + 1));
            if cols.len() != 5 {
                return Err(bad("expected 5 tab-separated columns"));
            }
            let num = |s: &str| s.parse::<u32>().map_err(|_| bad("non-numeric id"));
            let (actor, action, camera) = (num(cols[1])?, num(cols[2])?, num(cols[3])?);
            let source = cols[0].to_string();
            let meta = match parse_synthetic_source(&source) {
                Some((_, m)) => m,
                None => SequenceMeta::parse_name(&source).ok_or_else(|| bad("source name lacks SsssCcccPpppRrrrAaaa"))?,
            };
            if (meta.actor, meta.action, meta.camera) != (actor, action, camera) {
                return Err(bad("ids disagree with the source name"));
            }
            entries.push(CorpusEntry {
                source,
                meta,
                split: cols[4].parse()?,
            });
        }
        Ok(Self { entries })
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_manifest_string()).map_err(|e| Error::io(path, e))
    }

    pub fn read_manifest(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_manifest(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub frames: usize,
    pub denoise: DenoiseConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            frames: FRAMES,
            denoise: DenoiseConfig::default(),
        }
    }
}

/// Denoise, trim or pad to the target length, and move the first-frame root to the origin.
pub fn preprocess(raw: &SkeletonSequence, topology: &SkeletonTopology, cfg: &PreprocessConfig) -> Result<SkeletonSequence> {
    let clean = denoise(raw, &cfg.denoise)?;
    let seq = normalize_length(&clean, cfg.frames)?.root_centered(topology.root());
    seq.validate_normalized(topology.joints(), cfg.frames)?;
    Ok(seq)
}

/// Reads or regenerates the raw recording behind an entry.
pub fn load_raw(entry: &CorpusEntry, topology: &SkeletonTopology) -> Result<SkeletonSequence> {
    match parse_synthetic_source(&entry.source) {
        Some((seed, meta)) => Ok(synthesize_sequence(seed, meta, topology)),
        None => parse_ntu_file(Path::new(&entry.source), topology),
    }
}

/// Indexes every `(actor, action, camera)` cell of a synthetic corpus.
/// Cameras outside the train/eval views are not indexed.
pub fn generate_synthetic(actors: u32, actions: u32, cameras: u32, seed: u64) -> Result<CorpusIndex> {
    let entries = synthetic_cells(actors, actions, cameras)?
        .into_iter()
        .filter_map(|meta| {
            Split::for_camera(meta.camera).map(|split| CorpusEntry {
                source: synthetic_source(seed, &meta),
                meta,
                split,
            })
        })
        .collect();
    Ok(CorpusIndex { entries })
}

/// Sorted actor and action ids mapped to dense class indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub actors: Vec<u32>,
    pub actions: Vec<u32>,
}

impl LabelMap {
    pub fn from_index(index: &CorpusIndex) -> Self {
        Self {
            actors: index.actors().into_iter().collect(),
            actions: index.actions().into_iter().collect(),
        }
    }

    pub fn actor_class(&self, actor: u32) -> Result<usize> {
        self.actors
            .binary_search(&actor)
            .map_err(|_| Error::LabelMismatch(format!("actor {actor} is not a known class")))
    }

    pub fn action_class(&self, action: u32) -> Result<usize> {
        self.actions
            .binary_search(&action)
            .map_err(|_| Error::LabelMismatch(format!("action {action} is not a known class")))
    }
}

/// Preprocessed sequences aligned with their index entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub index: CorpusIndex,
    pub sequences: Vec<SkeletonSequence>,
}

impl Corpus {
    pub fn load(index: &CorpusIndex, topology: &SkeletonTopology, cfg: &PreprocessConfig) -> Result<Self> {
        let sequences = index
            .entries
            .iter()
            .map(|e| preprocess(&load_raw(e, topology)?, topology, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            index: index.clone(),
            sequences,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn subset(&self, split: Split) -> Corpus {
        let (entries, sequences) = self
            .index
            .entries
            .iter()
            .zip(&self.sequences)
            .filter(|(e, _)| e.split == split)
            .map(|(e, s)| (e.clone(), s.clone()))
            .unzip();
        Corpus {
            index: CorpusIndex { entries },
            sequences,
        }
    }

    pub fn find(&self, identifier: &str) -> Option<&SkeletonSequence> {
        self.index.find(identifier).map(|i| &self.sequences[i])
    }

    /// Stacks the selected sequences into a `[N, T, J, 3]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        batch_of(indices.iter().map(|&i| &self.sequences[i]))
    }
}

/// Stacks sequences into a `[N, T, J, 3]` tensor.
pub fn batch_of<'a>(seqs: impl IntoIterator<Item = &'a SkeletonSequence>) -> Result<Tensor> {
    let tensors: Vec<Tensor> = seqs.into_iter().map(|s| s.to_tensor()).collect();
    let refs: Vec<&Tensor> = tensors.iter().collect();
    Tensor::stack(&refs)
}

/// Outcome counts of a directory scan.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub files_seen: usize,
    pub kept: usize,
    pub kept_train: usize,
    pub kept_eval: usize,
    pub multi_actor_dropped: usize,
    pub malformed_dropped: usize,
    pub denoise_rejected: usize,
    pub unused_camera_dropped: usize,
    /// Dropped file and reason, in scan order.
    pub dropped: BTreeMap<String, String>,
}

/// Finds `.skeleton` files under `dir`, drops unusable ones and indexes the rest.
pub fn scan_directory(
    dir: &Path,
    topology: &SkeletonTopology,
    cfg: &PreprocessConfig,
) -> Result<(CorpusIndex, PreprocessSummary)> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut files: Vec<PathBuf> = WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|x| x == "skeleton"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::NoInputFiles(dir.to_path_buf()));
    }
    let mut summary = PreprocessSummary {
        files_seen: files.len(),
        ..Default::default()
    };
    let mut entries = Vec::new();
    for path in files {
        let key = path.to_string_lossy().into_owned();
        let raw = match parse_ntu_file(&path, topology) {
            Ok(r) => r,
            Err(e @ Error::MultiActorFile { .. }) => {
                summary.multi_actor_dropped += 1;
                summary.dropped.insert(key, e.to_string());
                continue;
            }
            Err(e @ Error::MalformedFile { .. }) => {
                summary.malformed_dropped += 1;
                summary.dropped.insert(key, e.to_string());
                continue;
            }
            Err(e) => return Err(e),
        };
        let Some(split) = Split::for_camera(raw.meta.camera) else {
            summary.unused_camera_dropped += 1;
            summary.dropped.insert(key, format!("camera {} is not used", raw.meta.camera));
            continue;
        };
        if let Err(e) = preprocess(&raw, topology, cfg) {
            summary.denoise_rejected += 1;
            summary.dropped.insert(key, e.to_string());
            continue;
        }
        match split {
            Split::Train => summary.kept_train += 1,
            Split::Eval => summary.kept_eval += 1,
        }
        summary.kept += 1;
        entries.push(CorpusEntry {
            source: key,
            meta: raw.meta,
            split,
        });
    }
    Ok((CorpusIndex { entries }, summary))
}
