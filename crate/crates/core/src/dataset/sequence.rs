use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::topology::{norm, SkeletonTopology};

/// Joint count of the only shipped layout.
pub const JOINTS: usize = 25;
/// Frame count every sequence is trimmed or padded to.
pub const FRAMES: usize = 75;

/// Recording metadata as encoded in NTU file names (`SsssCcccPpppRrrrAaaa`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub setup: u32,
    pub camera: u32,
    pub actor: u32,
    pub replication: u32,
    pub action: u32,
}

impl SequenceMeta {
    /// Canonical NTU-style identifier, e.g. `S001C002P003R001A010`.
    pub fn name(&self) -> String {
        format!(
            "S{:03}C{:03}P{:03}R{:03}A{:03}",
            self.setup, self.camera, self.actor, self.replication, self.action
        )
    }

    /// Parses an identifier or file name whose stem is `SsssCcccPpppRrrrAaaa`.
    pub fn parse_name(name: &str) -> Option<Self> {
        let stem = name.rsplit(['/', '\\']).next()?;
        let stem = stem.split('.').next()?;
        let bytes = stem.as_bytes();
        if bytes.len() < 20 {
            return None;
        }
        let field = |pos: usize, tag: u8| -> Option<u32> {
            if bytes[pos] != tag {
                return None;
            }
            let digits = &stem[pos + 1..pos + 4];
            if !digits.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            digits.parse().ok()
        };
        Some(Self {
            setup: field(0, b'S')?,
            camera: field(4, b'C')?,
            actor: field(8, b'P')?,
            replication: field(12, b'R')?,
            action: field(16, b'A')?,
        })
    }
}

/// Provenance of a decoded sequence produced by anonymization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anonymization {
    /// Identifier of the dummy whose privacy embedding was used.
    pub dummy: String,
    pub dummy_actor: u32,
}

/// A skeleton recording: `frames x joints x 3` coordinates in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    joints: usize,
    /// Frame-major `[T][J][xyz]`.
    data: Vec<f64>,
    pub meta: SequenceMeta,
    /// Frames in the recording before trimming or padding.
    pub source_frame_count: usize,
    pub anonymization: Option<Anonymization>,
}

impl SkeletonSequence {
    pub fn new(joints: usize, data: Vec<f64>, meta: SequenceMeta) -> Result<Self> {
        if joints == 0 || data.len() % (joints * 3) != 0 {
            return Err(Error::shape(format!(
                "{} coordinates do not form whole frames of {joints} joints",
                data.len()
            )));
        }
        let frames = data.len() / (joints * 3);
        Ok(Self {
            joints,
            data,
            meta,
            source_frame_count: frames,
            anonymization: None,
        })
    }

    pub fn from_frames(frames: &[Vec<[f64; 3]>], meta: SequenceMeta) -> Result<Self> {
        let joints = frames.first().map(|f| f.len()).unwrap_or(0);
        if frames.iter().any(|f| f.len() != joints) {
            return Err(Error::shape("frames with differing joint counts"));
        }
        let data = frames.iter().flatten().flat_map(|p| p.iter().copied()).collect();
        Self::new(joints.max(1), data, meta)
    }

    /// Builds a sequence from a `[T, J, 3]` tensor.
    pub fn from_tensor(t: &Tensor, meta: SequenceMeta) -> Result<Self> {
        match t.shape() {
            [_, j, 3] => Self::new(*j, t.data().to_vec(), meta),
            other => Err(Error::shape(format!("expected [T, J, 3], got {other:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.frames(), self.joints, 3], self.data.clone()).expect("consistent layout")
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn frames(&self) -> usize {
        self.data.len() / (self.joints * 3)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn position(&self, frame: usize, joint: usize) -> [f64; 3] {
        let k = (frame * self.joints + joint) * 3;
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    pub fn set_position(&mut self, frame: usize, joint: usize, p: [f64; 3]) {
        let k = (frame * self.joints + joint) * 3;
        self.data[k..k + 3].copy_from_slice(&p);
    }

    pub fn frame(&self, frame: usize) -> &[f64] {
        let w = self.joints * 3;
        &self.data[frame * w..(frame + 1) * w]
    }

    pub fn identifier(&self) -> String {
        self.meta.name()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Checks the post-normalization invariants.
    pub fn validate_normalized(&self, joints: usize, frames: usize) -> Result<()> {
        if self.joints != joints || self.frames() != frames {
            return Err(Error::shape(format!(
                "expected {joints} joints x {frames} frames, got {} x {}",
                self.joints,
                self.frames()
            )));
        }
        if !self.is_finite() {
            return Err(Error::shape("non-finite coordinates"));
        }
        Ok(())
    }

    /// Translates every frame so the root joint of the first frame sits at the origin.
    pub fn root_centered(mut self, root: usize) -> Self {
        if self.frames() == 0 {
            return self;
        }
        let origin = self.position(0, root);
        for p in self.data.chunks_mut(3) {
            for (v, o) in p.iter_mut().zip(origin) {
                *v -= o;
            }
        }
        self
    }

    /// Bone lengths averaged over frames, in `topology.bones()` order.
    pub fn mean_bone_lengths(&self, topology: &SkeletonTopology) -> Vec<f64> {
        let bones = topology.bones();
        let mut out = vec![0.0; bones.len()];
        let frames = self.frames().max(1) as f64;
        for t in 0..self.frames() {
            for (k, &(p, c)) in bones.iter().enumerate() {
                let a = self.position(t, p);
                let b = self.position(t, c);
                out[k] += norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]]) / frames;
            }
        }
        out
    }
}

/// Truncates to the first `target` frames, or repeats the final frame up to `target`.
pub fn normalize_length(seq: &SkeletonSequence, target: usize) -> Result<SkeletonSequence> {
    if seq.frames() == 0 || target == 0 {
        return Err(Error::shape(format!(
            "cannot normalize {} frames to {target}",
            seq.frames()
        )));
    }
    let w = seq.joints * 3;
    let mut data = Vec::with_capacity(target * w);
    let keep = seq.frames().min(target);
    data.extend_from_slice(&seq.data[..keep * w]);
    let last = seq.frame(seq.frames() - 1).to_vec();
    while data.len() < target * w {
        data.extend_from_slice(&last);
    }
    Ok(SkeletonSequence {
        joints: seq.joints,
        data,
        meta: seq.meta,
        source_frame_count: seq.source_frame_count,
        anonymization: seq.anonymization.clone(),
    })
}
