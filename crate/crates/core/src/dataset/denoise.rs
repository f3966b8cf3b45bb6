use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::sequence::SkeletonSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiseConfig {
    /// Inter-frame displacement of one joint above which it counts as an outlier, meters.
    pub max_jump: f64,
    /// Largest tolerated fraction of frames containing a repaired joint.
    pub max_affected_fraction: f64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            max_jump: 0.5,
            max_affected_fraction: 0.2,
        }
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Repairs isolated non-finite or jumping joints by linear interpolation
/// between the nearest valid frames of the same joint. Rejects the sequence
/// when too many frames are affected or a joint is never valid.
pub fn denoise(seq: &SkeletonSequence, cfg: &DenoiseConfig) -> Result<SkeletonSequence> {
    let (frames, joints) = (seq.frames(), seq.joints());
    let mut bad = vec![false; frames * joints];
    for j in 0..joints {
        let mut last_good: Option<[f64; 3]> = None;
        for t in 0..frames {
            let p = seq.position(t, j);
            let finite = p.iter().all(|v| v.is_finite());
            let jumped = finite && last_good.is_some_and(|q| dist(p, q) > cfg.max_jump);
            if !finite || jumped {
                bad[t * joints + j] = true;
            } else {
                last_good = Some(p);
            }
        }
    }
    let affected = (0..frames)
        .filter(|t| bad[t * joints..(t + 1) * joints].iter().any(|&b| b))
        .count();
    if affected == 0 {
        return Ok(seq.clone());
    }
    let fraction = affected as f64 / frames as f64;
    if fraction > cfg.max_affected_fraction {
        return Err(Error::Rejected(format!(
            "{affected} of {frames} frames corrupt ({:.0}% > {:.0}%)",
            fraction * 100.0,
            cfg.max_affected_fraction * 100.0
        )));
    }
    let mut out = seq.clone();
    for j in 0..joints {
        let valid: Vec<usize> = (0..frames).filter(|&t| !bad[t * joints + j]).collect();
        if valid.is_empty() {
            return Err(Error::Rejected(format!("joint {j} is never tracked")));
        }
        for t in 0..frames {
            if !bad[t * joints + j] {
                continue;
            }
            let next = valid.partition_point(|&v| v < t);
            let before = next.checked_sub(1).map(|k| valid[k]);
            let after = valid.get(next).copied();
            let p = match (before, after) {
                (Some(a), Some(b)) => {
                    let w = (t - a) as f64 / (b - a) as f64;
                    let (pa, pb) = (seq.position(a, j), seq.position(b, j));
                    [0, 1, 2].map(|k| pa[k] + w * (pb[k] - pa[k]))
                }
                (Some(a), None) => seq.position(a, j),
                (None, Some(b)) => seq.position(b, j),
                (None, None) => unreachable!("valid is non-empty"),
            };
            out.set_position(t, j, p);
        }
    }
    Ok(out)
}
