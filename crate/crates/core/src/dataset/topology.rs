use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Joint order of the 25-joint Kinect v2 layout used by NTU RGB+D.
pub const KINECT_V2_JOINTS: [&str; 25] = [
    "SpineBase",
    "SpineMid",
    "Neck",
    "Head",
    "ShoulderLeft",
    "ElbowLeft",
    "WristLeft",
    "HandLeft",
    "ShoulderRight",
    "ElbowRight",
    "WristRight",
    "HandRight",
    "HipLeft",
    "KneeLeft",
    "AnkleLeft",
    "FootLeft",
    "HipRight",
    "KneeRight",
    "AnkleRight",
    "FootRight",
    "SpineShoulder",
    "HandTipLeft",
    "ThumbLeft",
    "HandTipRight",
    "ThumbRight",
];

const KINECT_V2_PARENTS: [usize; 25] = [
    0, 0, 20, 2, 20, 4, 5, 6, 20, 8, 9, 10, 0, 12, 13, 14, 0, 16, 17, 18, 1, 7, 7, 11, 11,
];

/// Rest pose offsets from each joint's parent, in meters: y up, actor facing -z.
const KINECT_V2_REST: [[f64; 3]; 25] = [
    [0.0, 0.0, 0.0],
    [0.0, 0.28, 0.0],
    [0.0, 0.08, 0.0],
    [0.0, 0.14, 0.0],
    [-0.17, -0.03, 0.0],
    [0.0, -0.27, 0.0],
    [0.0, -0.25, 0.0],
    [0.0, -0.07, 0.0],
    [0.17, -0.03, 0.0],
    [0.0, -0.27, 0.0],
    [0.0, -0.25, 0.0],
    [0.0, -0.07, 0.0],
    [-0.08, -0.05, 0.0],
    [0.0, -0.42, 0.0],
    [0.0, -0.40, 0.0],
    [0.0, -0.05, -0.10],
    [0.08, -0.05, 0.0],
    [0.0, -0.42, 0.0],
    [0.0, -0.40, 0.0],
    [0.0, -0.05, -0.10],
    [0.0, 0.22, 0.0],
    [0.0, -0.08, 0.0],
    [0.03, -0.04, 0.0],
    [0.0, -0.08, 0.0],
    [-0.03, -0.04, 0.0],
];

/// Head, both feet and both hand tips.
const KINECT_V2_END_EFFECTORS: [usize; 5] = [3, 15, 19, 21, 23];

/// Kinematic tree of a skeleton layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonTopology {
    /// Parent joint index; the root is its own parent.
    pub parent: Vec<usize>,
    pub end_effectors: Vec<usize>,
    /// Summed rest bone length from the root to each end-effector, meters.
    pub chain_length: BTreeMap<usize, f64>,
    /// Rest offset of each joint from its parent, meters.
    pub rest_offsets: Vec<[f64; 3]>,
}

impl SkeletonTopology {
    pub fn kinect_v2() -> Self {
        let parent = KINECT_V2_PARENTS.to_vec();
        let rest_offsets = KINECT_V2_REST.to_vec();
        let mut chain_length = BTreeMap::new();
        for &e in &KINECT_V2_END_EFFECTORS {
            let mut len = 0.0;
            let mut j = e;
            while parent[j] != j {
                len += norm(rest_offsets[j]);
                j = parent[j];
            }
            chain_length.insert(e, len);
        }
        let topo = Self {
            parent,
            end_effectors: KINECT_V2_END_EFFECTORS.to_vec(),
            chain_length,
            rest_offsets,
        };
        debug_assert!(topo.validate().is_ok());
        topo
    }

    pub fn joints(&self) -> usize {
        self.parent.len()
    }

    pub fn root(&self) -> usize {
        self.parent
            .iter()
            .enumerate()
            .find(|(i, &p)| *i == p)
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    /// Bones as `(parent, child)` pairs, in joint order.
    pub fn bones(&self) -> Vec<(usize, usize)> {
        self.parent
            .iter()
            .enumerate()
            .filter(|(j, &p)| *j != p)
            .map(|(j, &p)| (p, j))
            .collect()
    }

    pub fn is_leaf(&self, joint: usize) -> bool {
        !self.parent.iter().enumerate().any(|(j, &p)| p == joint && j != joint)
    }

    /// Joints ordered so that every parent precedes its children.
    pub fn topological_order(&self) -> Vec<usize> {
        let mut order = vec![self.root()];
        let mut k = 0;
        while k < order.len() {
            let j = order[k];
            for (c, &p) in self.parent.iter().enumerate() {
                if p == j && c != j {
                    order.push(c);
                }
            }
            k += 1;
        }
        order
    }

    pub fn chain_length_of(&self, e: usize) -> Result<f64> {
        self.chain_length
            .get(&e)
            .copied()
            .ok_or(Error::MissingChainLength(e))
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.parent.len();
        let roots = self.parent.iter().enumerate().filter(|(i, &p)| *i == p).count();
        if roots != 1 || self.parent.iter().any(|&p| p >= j) {
            return Err(Error::Config("topology must be a single-rooted tree".into()));
        }
        if self.topological_order().len() != j {
            return Err(Error::Config("topology contains a cycle or detached joints".into()));
        }
        if self.rest_offsets.len() != j {
            return Err(Error::Config("rest offsets must cover every joint".into()));
        }
        for &e in &self.end_effectors {
            if e >= j || !self.is_leaf(e) {
                return Err(Error::Config(format!("end-effector {e} is not a leaf")));
            }
            if self.chain_length_of(e)? <= 0.0 {
                return Err(Error::Config(format!("end-effector {e} has no chain length")));
            }
        }
        Ok(())
    }
}

pub(crate) fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}
