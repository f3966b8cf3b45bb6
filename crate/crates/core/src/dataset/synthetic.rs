//! Procedural skeleton corpus: forward kinematics over the rest pose with
//! parametric joint-angle trajectories per action and a fixed body and style
//! profile per actor.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

use super::sequence::{SequenceMeta, SkeletonSequence, FRAMES};
use super::topology::SkeletonTopology;

/// Number of distinct parametric motions; further action ids reuse them as variants.
pub const BASE_ACTIONS: u32 = 6;

const SENSOR_NOISE_STD: f64 = 0.003;
const CAMERA_DISTANCE: f64 = 3.0;

/// Mixes identifiers into a seed (splitmix64 finalizer).
pub(crate) fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h = h.wrapping_add(p.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Body and movement style of one synthetic actor.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorProfile {
    /// Global bone-length scale.
    pub scale: f64,
    /// Per-bone multiplicative jitter around `scale`.
    pub bone_jitter: Vec<f64>,
    pub amplitude: f64,
    pub phase: f64,
    pub tempo: f64,
    pub sway_amplitude: f64,
    pub sway_frequency: f64,
}

impl ActorProfile {
    /// Profile of 1-based `actor`; depends only on `(seed, actor)`.
    pub fn new(seed: u64, actor: u32, joints: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, &[1, actor as u64]));
        let k = actor.saturating_sub(1) as i32;
        Self {
            scale: 0.88 * 1.08f64.powi(k),
            bone_jitter: (0..joints).map(|_| rng.random_range(0.99..=1.01)).collect(),
            amplitude: rng.random_range(0.85..=1.15),
            phase: rng.random_range(-0.05..=0.05),
            tempo: rng.random_range(0.94..=1.06),
            sway_amplitude: rng.random_range(0.005..=0.02),
            sway_frequency: rng.random_range(0.5..=1.5),
        }
    }

    pub fn bone_scale(&self, joint: usize) -> f64 {
        self.scale * self.bone_jitter[joint]
    }
}

/// Yaw of the sensor around the actor for 1-based `camera`, in radians.
pub fn camera_yaw(camera: u32) -> f64 {
    let step = match camera {
        0 | 1 => return 0.0,
        c => c / 2,
    };
    let deg = if step == 1 { 25.0 } else { 25.0 + 20.0 * (step - 1) as f64 };
    let sign = if camera % 2 == 0 { 1.0 } else { -1.0 };
    sign * deg.to_radians()
}

type Mat3 = [[f64; 3]; 3];

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn apply(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Rises from 0 to 1 and back over `u` in [0, 1].
fn bump(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    (PI * u).sin().powi(2)
}

/// Local joint rotations and a root offset for one frame.
struct Pose {
    local: Vec<Mat3>,
    root: [f64; 3],
}

// Joint indices used by the motions.
const SPINE_MID: usize = 1;
const SHOULDER_L: usize = 4;
const ELBOW_L: usize = 5;
const SHOULDER_R: usize = 8;
const ELBOW_R: usize = 9;
const HIP_L: usize = 12;
const KNEE_L: usize = 13;
const HIP_R: usize = 16;
const KNEE_R: usize = 17;

/// Mirrors a right-side joint to the left side.
fn side(joint: usize, left: bool) -> usize {
    if !left {
        return joint;
    }
    match joint {
        SHOULDER_R => SHOULDER_L,
        ELBOW_R => ELBOW_L,
        HIP_R => HIP_L,
        KNEE_R => KNEE_L,
        j => j,
    }
}

fn pose(action: u32, u: f64, amp: f64, joints: usize) -> Pose {
    let base = (action.saturating_sub(1)) % BASE_ACTIONS;
    let variant = (action.saturating_sub(1)) / BASE_ACTIONS;
    let left = variant % 2 == 1;
    // Further variants move faster and smaller.
    let speed = 1.0 + (variant / 2) as f64;
    let amp = amp / (1.0 + 0.25 * (variant / 2) as f64);
    let mirror = if left { -1.0 } else { 1.0 };
    let b = bump(u);
    let osc = (2.0 * PI * speed * 2.0 * u).sin();
    let mut p = Pose {
        local: vec![IDENTITY; joints],
        root: [0.0; 3],
    };
    match base {
        // Arm raise sideways.
        0 => p.local[side(SHOULDER_R, left)] = rot_z(mirror * amp * 2.4 * bump(u * speed)),
        // Squat.
        1 => {
            let d = amp * bump(u * speed);
            for (hip, knee) in [(HIP_L, KNEE_L), (HIP_R, KNEE_R)] {
                p.local[hip] = rot_x(1.3 * d);
                p.local[knee] = rot_x(-2.2 * d);
            }
            p.local[SPINE_MID] = rot_x(-0.4 * d);
            p.root = [0.0, -0.35 * d, 0.08 * d];
        }
        // Wave.
        2 => {
            p.local[side(SHOULDER_R, left)] = rot_z(mirror * amp * 2.0 * b);
            p.local[side(ELBOW_R, left)] = rot_z(mirror * (0.9 * b + amp * 0.6 * b * osc));
        }
        // Forward kick.
        3 => {
            p.local[side(HIP_R, left)] = rot_x(amp * 1.4 * bump(u * speed));
            p.local[side(KNEE_R, left)] = rot_x(-amp * 0.6 * bump(u * speed));
            p.local[side(SHOULDER_R, !left)] = rot_x(-0.4 * amp * b);
        }
        // Bow.
        4 => {
            p.local[SPINE_MID] = rot_x(-amp * 1.1 * bump(u * speed));
            p.root = [0.0, 0.0, 0.05 * b];
        }
        // Punches.
        _ => {
            let jab = (osc.max(0.0)) * b;
            p.local[side(SHOULDER_R, left)] = rot_x(amp * (0.9 * b + 0.6 * jab));
            p.local[side(ELBOW_R, left)] = rot_x(amp * 1.6 * (b - jab).max(0.0));
        }
    }
    p
}

fn forward_kinematics(topology: &SkeletonTopology, profile: &ActorProfile, pose: &Pose) -> Vec<[f64; 3]> {
    let n = topology.joints();
    let mut global = vec![IDENTITY; n];
    let mut pos = vec![[0.0; 3]; n];
    for j in topology.topological_order() {
        let parent = topology.parent[j];
        if parent == j {
            global[j] = pose.local[j];
            pos[j] = pose.root;
            continue;
        }
        let offset = topology.rest_offsets[j].map(|v| v * profile.bone_scale(j));
        let d = apply(&global[parent], offset);
        pos[j] = [0, 1, 2].map(|k| pos[parent][k] + d[k]);
        global[j] = matmul(&global[parent], &pose.local[j]);
    }
    pos
}

/// Generates the raw recording of one `(actor, action, camera)` cell.
/// Length varies with the actor's tempo, so callers still normalize it.
pub fn synthesize_sequence(
    seed: u64,
    meta: SequenceMeta,
    topology: &SkeletonTopology,
) -> SkeletonSequence {
    let joints = topology.joints();
    let profile = ActorProfile::new(seed, meta.actor, joints);
    let cell = mix(
        seed,
        &[
            2,
            meta.actor as u64,
            meta.action as u64,
            meta.camera as u64,
            meta.setup as u64,
            meta.replication as u64,
        ],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cell);
    // Small per-recording variation on top of the actor's style.
    let amp = profile.amplitude * rng.random_range(0.97..=1.03);
    let phase = profile.phase + rng.random_range(-0.01..=0.01);
    let frames = (FRAMES as f64 * profile.tempo).round() as usize;
    let yaw = rot_y(camera_yaw(meta.camera));
    let noise = Normal::new(0.0, SENSOR_NOISE_STD).expect("valid std");
    let mut data = Vec::with_capacity(frames * joints * 3);
    for t in 0..frames {
        let u = t as f64 / (frames - 1) as f64 + phase;
        let mut p = pose(meta.action, u, amp, joints);
        let sway = profile.sway_amplitude * (2.0 * PI * profile.sway_frequency * u).sin();
        p.root[0] += sway;
        for x in forward_kinematics(topology, &profile, &p) {
            let v = apply(&yaw, x);
            data.push(v[0] + noise.sample(&mut rng));
            data.push(v[1] + noise.sample(&mut rng));
            data.push(v[2] + CAMERA_DISTANCE + noise.sample(&mut rng));
        }
    }
    SkeletonSequence::new(joints, data, meta).expect("whole frames")
}

/// Source string of a synthetic recording as stored in manifests.
pub fn synthetic_source(seed: u64, meta: &SequenceMeta) -> String {
    format!("synthetic://{seed}/{}", meta.name())
}

/// Inverse of [`synthetic_source`].
pub fn parse_synthetic_source(source: &str) -> Option<(u64, SequenceMeta)> {
    let rest = source.strip_prefix("synthetic://")?;
    let (seed, name) = rest.split_once('/')?;
    Some((seed.parse().ok()?, SequenceMeta::parse_name(name)?))
}

/// Metadata of every cell of a synthetic corpus, in actor, action, camera order.
pub fn synthetic_cells(actors: u32, actions: u32, cameras: u32) -> Result<Vec<SequenceMeta>> {
    if actors < 2 || actions < 2 || cameras < 1 {
        return Err(Error::InvalidConfig(format!(
            "synthetic corpus needs at least 2 actors, 2 actions and 1 camera, got {actors}/{actions}/{cameras}"
        )));
    }
    let mut cells = Vec::new();
    for actor in 1..=actors {
        for action in 1..=actions {
            for camera in 1..=cameras {
                cells.push(SequenceMeta {
                    setup: 1,
                    camera,
                    actor,
                    replication: 1,
                    action,
                });
            }
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(actor: u32, action: u32, camera: u32) -> SequenceMeta {
        SequenceMeta {
            setup: 1,
            camera,
            actor,
            replication: 1,
            action,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let topo = SkeletonTopology::kinect_v2();
        let a = synthesize_sequence(7, meta(2, 3, 2), &topo);
        let b = synthesize_sequence(7, meta(2, 3, 2), &topo);
        assert_eq!(a, b);
        assert_ne!(a, synthesize_sequence(8, meta(2, 3, 2), &topo));
    }

    #[test]
    fn rest_pose_reproduces_topology_lengths() {
        let topo = SkeletonTopology::kinect_v2();
        let profile = ActorProfile::new(0, 1, 25);
        let rest = Pose {
            local: vec![IDENTITY; 25],
            root: [0.0; 3],
        };
        let pos = forward_kinematics(&topo, &profile, &rest);
        for (p, c) in topo.bones() {
            let d = super::super::topology::norm([0, 1, 2].map(|k| pos[c][k] - pos[p][k]));
            let want = super::super::topology::norm(topo.rest_offsets[c]) * profile.bone_scale(c);
            assert!((d - want).abs() < 1e-12);
        }
    }

    #[test]
    fn motions_preserve_bone_lengths() {
        let topo = SkeletonTopology::kinect_v2();
        let profile = ActorProfile::new(3, 2, 25);
        for action in 1..=12 {
            for &u in &[0.1, 0.5, 0.8] {
                let pos = forward_kinematics(&topo, &profile, &pose(action, u, 1.0, 25));
                for (p, c) in topo.bones() {
                    let d = super::super::topology::norm([0, 1, 2].map(|k| pos[c][k] - pos[p][k]));
                    let want = super::super::topology::norm(topo.rest_offsets[c]) * profile.bone_scale(c);
                    assert!((d - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn source_round_trip() {
        let m = meta(4, 6, 3);
        let s = synthetic_source(42, &m);
        assert_eq!(s, "synthetic://42/S001C003P004R001A006");
        assert_eq!(parse_synthetic_source(&s), Some((42, m)));
        assert_eq!(parse_synthetic_source("/data/S001C003P004R001A006.skeleton"), None);
    }

    #[test]
    fn camera_yaws_are_distinct() {
        let yaws: Vec<f64> = (1..=5).map(camera_yaw).collect();
        assert_eq!(yaws[0], 0.0);
        assert!((yaws[1] - 25f64.to_radians()).abs() < 1e-12);
        assert!((yaws[2] + 25f64.to_radians()).abs() < 1e-12);
        assert!((yaws[3] - 45f64.to_radians()).abs() < 1e-12);
        assert!((yaws[4] + 45f64.to_radians()).abs() < 1e-12);
    }

    #[test]
    fn too_few_actors_is_invalid() {
        assert!(synthetic_cells(1, 6, 3).is_err());
        assert_eq!(synthetic_cells(4, 6, 3).unwrap().len(), 72);
    }
}
