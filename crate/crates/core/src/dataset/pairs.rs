use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::corpus::{Corpus, CorpusIndex};
use super::sequence::SkeletonSequence;

/// Positions of the four members of a 2x2 grid within a corpus index.
/// `ap` is the anchor; `a2p` shares its actor, `ap2` shares its action.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuadrupleIndex {
    pub ap: usize,
    pub a2p: usize,
    pub ap2: usize,
    pub a2p2: usize,
}

impl QuadrupleIndex {
    /// The same grid anchored at the opposite corner.
    pub fn swapped(&self) -> Self {
        Self {
            ap: self.a2p2,
            a2p: self.ap2,
            ap2: self.a2p,
            a2p2: self.ap,
        }
    }

    pub fn members(&self) -> [usize; 4] {
        [self.ap, self.a2p, self.ap2, self.a2p2]
    }

    pub fn resolve(&self, corpus: &Corpus) -> Result<PairedQuadruple> {
        let get = |i: usize| {
            corpus.sequences.get(i).cloned().ok_or(Error::IndexOutOfRange {
                index: i,
                len: corpus.len(),
            })
        };
        Ok(PairedQuadruple {
            ap: get(self.ap)?,
            a2p: get(self.a2p)?,
            ap2: get(self.ap2)?,
            a2p2: get(self.a2p2)?,
        })
    }
}

/// Two actors performing the same two actions under one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedQuadruple {
    pub ap: SkeletonSequence,
    pub a2p: SkeletonSequence,
    pub ap2: SkeletonSequence,
    pub a2p2: SkeletonSequence,
}

impl PairedQuadruple {
    pub fn validate(&self) -> Result<()> {
        check_grid([&self.ap.meta, &self.a2p.meta, &self.ap2.meta, &self.a2p2.meta].map(|m| (m.action, m.actor, m.camera)))
    }
}

/// `(action, actor, camera)` of the anchor, same-actor, same-action and opposite members.
fn check_grid(m: [(u32, u32, u32); 4]) -> Result<()> {
    let [(a, p, c), (a2, p_, c1), (a_, p2, c2), (a2_, p2_, c3)] = m;
    let ok = c == c1 && c == c2 && c == c3 && a != a2 && p != p2 && a_ == a && a2_ == a2 && p_ == p && p2_ == p2;
    if ok {
        Ok(())
    } else {
        Err(Error::LabelMismatch(format!("{m:?} is not a 2x2 actor/action grid under one camera")))
    }
}

pub fn validate_quadruple(index: &CorpusIndex, q: &QuadrupleIndex) -> Result<()> {
    let meta = |i: usize| {
        index.entries.get(i).map(|e| (e.meta.action, e.meta.actor, e.meta.camera)).ok_or(Error::IndexOutOfRange {
            index: i,
            len: index.len(),
        })
    };
    check_grid([meta(q.ap)?, meta(q.a2p)?, meta(q.ap2)?, meta(q.a2p2)?])
}

/// Every 2x2 grid under a shared camera, anchored at the smallest `(action, actor)`
/// cell, in an order shuffled by `rng_seed`. Repeated recordings of a cell use the
/// first one in index order.
pub fn build_pairs(index: &CorpusIndex, rng_seed: u64) -> Result<Vec<QuadrupleIndex>> {
    // camera -> (action, actor) -> first entry
    let mut cells: BTreeMap<u32, BTreeMap<(u32, u32), usize>> = BTreeMap::new();
    for (i, e) in index.entries.iter().enumerate() {
        cells
            .entry(e.meta.camera)
            .or_default()
            .entry((e.meta.action, e.meta.actor))
            .or_insert(i);
    }
    let mut out = Vec::new();
    for grid in cells.values() {
        let actions: Vec<u32> = grid.keys().map(|k| k.0).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let actors: Vec<u32> = grid.keys().map(|k| k.1).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        for (i, &a) in actions.iter().enumerate() {
            for &a2 in &actions[i + 1..] {
                for (j, &p) in actors.iter().enumerate() {
                    for &p2 in &actors[j + 1..] {
                        let cell = |a, p| grid.get(&(a, p)).copied();
                        if let (Some(ap), Some(a2p), Some(ap2), Some(a2p2)) =
                            (cell(a, p), cell(a2, p), cell(a, p2), cell(a2, p2))
                        {
                            out.push(QuadrupleIndex { ap, a2p, ap2, a2p2 });
                        }
                    }
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::NoValidPairs);
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    Ok(out)
}
