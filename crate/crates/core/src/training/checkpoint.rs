//! Binary checkpoints: a JSON header describing every tensor, raw little-endian
//! f64 payload and a SHA-256 trailer over everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EpochSummary, StagePlan, TrainState};
use crate::dataset::LabelMap;
use crate::error::{Error, Result};
use crate::network::{AdamMoments, Group, NetworkConfig, ParameterSet};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PMRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: Kind,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    network: NetworkConfig,
    labels: LabelMap,
    plan: StagePlan,
    stage_index: usize,
    epoch: usize,
    step: u64,
    rng_seed: u64,
    rng_word_pos: u128,
    history: Vec<EpochSummary>,
    group_steps: BTreeMap<Group, u64>,
    tensors: Vec<Entry>,
}

/// Serializes a training state.
pub fn checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let p = &state.params;
    let mut tensors = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    let mut push = |name: &str, kind: Kind, shape: &[usize], data: &[f64]| {
        tensors.push(Entry {
            name: name.to_string(),
            kind,
            shape: shape.to_vec(),
            offset: payload.len(),
        });
        payload.extend_from_slice(data);
    };
    for (name, t) in &p.params {
        push(name, Kind::Param, t.shape(), t.data());
    }
    for (name, t) in &p.buffers {
        push(name, Kind::Buffer, t.shape(), t.data());
    }
    for (name, m) in &p.moments {
        push(name, Kind::AdamM, &[m.m.len()], &m.m);
        push(name, Kind::AdamV, &[m.v.len()], &m.v);
    }
    let header = Header {
        network: p.config.clone(),
        labels: state.labels.clone(),
        plan: state.plan.clone(),
        stage_index: state.stage_index,
        epoch: state.epoch,
        step: state.step,
        rng_seed: state.rng_seed,
        rng_word_pos: state.rng.get_word_pos(),
        history: state.history.clone(),
        group_steps: p.steps.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 12 + json.len() + payload.len() * 8 + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Restores a training state. With `expected` set, a checkpoint written for a
/// different network configuration is rejected.
pub fn restore(bytes: &[u8], expected: Option<&NetworkConfig>) -> Result<TrainState> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN {
        return Err(corrupt("file is truncated"));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch(format!(
            "file has format {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let data_start = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("header length exceeds file"))?;
    let header: Header =
        serde_json::from_slice(&body[20..data_start]).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let raw = &body[data_start..];
    if raw.len() % 8 != 0 {
        return Err(corrupt("payload is not a whole number of values"));
    }
    let payload: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if let Some(cfg) = expected {
        if *cfg != header.network {
            return Err(Error::VersionMismatch("network configuration differs from the checkpoint".into()));
        }
    }

    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    let mut moments: BTreeMap<String, AdamMoments> = BTreeMap::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let data = e
            .offset
            .checked_add(n)
            .and_then(|end| payload.get(e.offset..end))
            .ok_or_else(|| corrupt("tensor extends past payload"))?
            .to_vec();
        match e.kind {
            Kind::Param => {
                params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
            }
            Kind::Buffer => {
                buffers.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
            }
            Kind::AdamM => {
                moments
                    .entry(e.name.clone())
                    .or_insert_with(|| AdamMoments { m: Vec::new(), v: Vec::new() })
                    .m = data
            }
            Kind::AdamV => {
                moments
                    .entry(e.name.clone())
                    .or_insert_with(|| AdamMoments { m: Vec::new(), v: Vec::new() })
                    .v = data
            }
        }
    }
    let params = ParameterSet {
        config: header.network,
        params,
        buffers,
        moments,
        steps: header.group_steps,
    };
    params.validate().map_err(|e| Error::VersionMismatch(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(header.rng_seed);
    rng.set_word_pos(header.rng_word_pos);
    Ok(TrainState {
        params,
        labels: header.labels,
        plan: header.plan,
        stage_index: header.stage_index,
        epoch: header.epoch,
        step: header.step,
        rng_seed: header.rng_seed,
        rng,
        history: header.history,
    })
}

/// Reads and restores a checkpoint file.
pub fn read_checkpoint(path: &Path, expected: Option<&NetworkConfig>) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    restore(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_parameters;
    use crate::training::{EpochSummary, TrainConfig};
    use rand::Rng;

    fn state() -> TrainState {
        let cfg = NetworkConfig::desk(3, 2);
        let labels = LabelMap {
            actors: vec![1, 2],
            actions: vec![1, 2, 3],
        };
        let mut s = TrainState::new(&cfg, labels, StagePlan::scaled(), &TrainConfig::default()).unwrap();
        s.params = init_parameters(&cfg, 5).unwrap();
        s.params.moments.insert(
            "qc.fc1.bias".into(),
            AdamMoments {
                m: vec![0.5],
                v: vec![0.25],
            },
        );
        s.params.steps.insert(Group::Quality, 3);
        s.stage_index = 2;
        s.epoch = 1;
        s.step = 17;
        let _: u64 = s.rng.random();
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let mut s = state();
        let bytes = checkpoint(&s).unwrap();
        let mut back = restore(&bytes, Some(&s.params.config)).unwrap();
        assert_eq!(back.params, s.params);
        assert_eq!((back.stage_index, back.epoch, back.step), (2, 1, 17));
        let a: u64 = s.rng.random();
        let b: u64 = back.rng.random();
        assert_eq!(a, b);
        s.rng = back.rng.clone();
        assert_eq!(back, s);
    }

    #[test]
    fn header_floats_survive_to_the_last_bit() {
        let mut s = state();
        s.history.push(EpochSummary {
            stage: "paired".into(),
            epoch: 1,
            autoencoder_total: Some(0.18375846463480638),
            ..Default::default()
        });
        let bytes = checkpoint(&s).unwrap();
        let back = restore(&bytes, None).unwrap();
        assert_eq!(back.history[0].autoencoder_total.unwrap().to_bits(), 0.18375846463480638f64.to_bits());
        assert_eq!(checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn flipped_byte_is_detected() {
        let mut bytes = checkpoint(&state()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(restore(&bytes, None), Err(Error::CorruptCheckpoint(_))));
        let short = &bytes[..bytes.len() / 3];
        assert!(matches!(restore(short, None), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn other_network_is_rejected() {
        let bytes = checkpoint(&state()).unwrap();
        let other = NetworkConfig::desk(4, 2);
        assert!(matches!(restore(&bytes, Some(&other)), Err(Error::VersionMismatch(_))));
    }

    #[test]
    fn future_format_is_rejected() {
        let mut bytes = checkpoint(&state()).unwrap();
        bytes[8] = 9;
        let body_len = bytes.len() - DIGEST_LEN;
        let digest = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest);
        assert!(matches!(restore(&bytes, None), Err(Error::VersionMismatch(_))));
    }
}
