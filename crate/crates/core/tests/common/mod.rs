//! Shared helpers for integration tests: plain-loop loss oracles, a central
//! finite-difference gradient checker and small fixtures.

#![allow(dead_code)]

use pmr_core::autograd::{Tape, Var};
use pmr_core::dataset::{generate_synthetic, Corpus, LabelMap, PreprocessConfig, SkeletonTopology};
use pmr_core::network::NetworkConfig;
use pmr_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Row-wise softmax of a `[N, Y]` tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let y = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(y) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for v in row.iter_mut() {
            *v = (*v - m).exp() / s;
        }
    }
    out
}

pub mod oracle {
    //! Each loss written out as nested loops over raw coordinates.

    use super::*;

    const EPS: f64 = 1e-7;

    fn at(t: &Tensor, n: usize, f: usize, j: usize, c: usize) -> f64 {
        let s = t.shape();
        t.data()[((n * s[1] + f) * s[2] + j) * s[3] + c]
    }

    pub fn mse(a: &Tensor, b: &Tensor) -> f64 {
        let mut acc = 0.0;
        for i in 0..a.len() {
            let d = a.data()[i] - b.data()[i];
            acc += d * d;
        }
        acc / a.len() as f64
    }

    pub fn smooth(s: &Tensor, s_hat: &Tensor) -> f64 {
        let [n, t, j, _] = s.shape()[..] else { panic!("rank 4") };
        let mut total = 0.0;
        for b in 0..n {
            let mut sum = 0.0;
            for k in 0..j {
                let (mut e, mut e_hat) = (0.0, 0.0);
                for f in 0..t - 1 {
                    for c in 0..3 {
                        let d = at(s, b, f + 1, k, c) - at(s, b, f, k, c);
                        let dh = at(s_hat, b, f + 1, k, c) - at(s_hat, b, f, k, c);
                        e += d * d;
                        e_hat += dh * dh;
                    }
                }
                sum += (e_hat - e).abs();
            }
            total += sum.sqrt() / (j * t) as f64;
        }
        total / n as f64
    }

    fn ce(probs: &Tensor, labels: &[usize]) -> Vec<f64> {
        let y = probs.shape()[1];
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(probs.data()[i * y + l].max(EPS)).ln())
            .collect()
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn classifier(from_motion: &Tensor, from_privacy: &Tensor, labels: &[usize]) -> f64 {
        mean(&ce(from_motion, labels)) + mean(&ce(from_privacy, labels))
    }

    pub fn quality(real: &[f64], fake: &[f64]) -> f64 {
        let clamp = |q: f64| q.min(1.0 - EPS);
        let v: Vec<f64> = real
            .iter()
            .zip(fake)
            .map(|(&r, &f)| clamp(r).max(EPS).ln() + (1.0 - clamp(f)).max(EPS).ln())
            .collect();
        mean(&v)
    }

    pub fn cooperative(m_on_motion: &Tensor, p_on_privacy: &Tensor, actions: &[usize], actors: &[usize]) -> f64 {
        mean(&ce(m_on_motion, actions)) + mean(&ce(p_on_privacy, actors))
    }

    pub fn adversarial(
        m_on_privacy: &Tensor,
        p_on_motion: &Tensor,
        fake: &[f64],
        actions: &[usize],
        actors: &[usize],
    ) -> f64 {
        let cap_a = (m_on_privacy.shape()[1] as f64).ln();
        let cap_p = (p_on_motion.shape()[1] as f64).ln();
        let (ca, cp) = (ce(m_on_privacy, actions), ce(p_on_motion, actors));
        let v: Vec<f64> = (0..fake.len())
            .map(|i| {
                let q = fake[i].min(1.0 - EPS);
                -(ca[i].min(cap_a) + cp[i].min(cap_p) + (1.0 - q).max(EPS).ln())
            })
            .collect();
        mean(&v)
    }

    fn sq_dist(a: &Tensor, b: &Tensor, i: usize) -> f64 {
        let w = a.len() / a.shape()[0];
        (0..w).map(|k| (a.data()[i * w + k] - b.data()[i * w + k]).powi(2)).sum()
    }

    /// Embeddings as `(motion, privacy)` of anchor, same-actor and same-action members.
    pub fn triplet(ap: (&Tensor, &Tensor), a2p: (&Tensor, &Tensor), ap2: (&Tensor, &Tensor), gamma: f64) -> f64 {
        let n = ap.0.shape()[0];
        let v: Vec<f64> = (0..n)
            .map(|i| {
                let motion = (sq_dist(ap.0, ap2.0, i) - sq_dist(ap.0, a2p.0, i) + gamma).max(0.0);
                let privacy = (sq_dist(ap.1, a2p.1, i) - sq_dist(ap.1, ap2.1, i) + gamma).max(0.0);
                motion + privacy
            })
            .collect();
        mean(&v)
    }

    pub fn latent(ap: (&Tensor, &Tensor), a2p: (&Tensor, &Tensor), ap2: (&Tensor, &Tensor)) -> f64 {
        mse(ap.0, ap2.0) + mse(ap.1, a2p.1)
    }

    pub fn end_effector(s: &Tensor, s_hat: &Tensor, topo: &SkeletonTopology) -> f64 {
        let [n, t, _, _] = s.shape()[..] else { panic!("rank 4") };
        let mut total = 0.0;
        for b in 0..n {
            for &e in &topo.end_effectors {
                let h = topo.chain_length[&e];
                let mut acc = 0.0;
                for f in 0..t - 1 {
                    for c in 0..3 {
                        let v = at(s, b, f + 1, e, c) - at(s, b, f, e, c);
                        let vh = at(s_hat, b, f + 1, e, c) - at(s_hat, b, f, e, c);
                        acc += ((v - vh) / h).powi(2);
                    }
                }
                total += acc / (t - 1) as f64;
            }
        }
        total / n as f64
    }
}

/// Two-joint chain whose only end-effector (joint 1) sits at chain length `h`.
pub fn two_joint_topology(h: f64) -> SkeletonTopology {
    SkeletonTopology {
        parent: vec![0, 0],
        end_effectors: vec![1],
        chain_length: [(1, h)].into_iter().collect(),
        rest_offsets: vec![[0.0; 3], [0.0, h, 0.0]],
    }
}

/// Norm-wise relative error `|a - n| / max(|a|, |n|)` of analytic against
/// central-difference gradients, maximized over the inputs. `f` builds the
/// loss from the inputs registered on `tape` in order.
pub fn gradient_error(inputs: &[Tensor], step: f64, f: impl Fn(&Tape, &[Var]) -> Var) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let eval = |xs: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars);
        tape.value(out).item()
    };
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut xs = inputs.to_vec();
        let mut numeric = vec![0.0; inputs[i].len()];
        for (k, g) in numeric.iter_mut().enumerate() {
            let x0 = inputs[i].data()[k];
            xs[i].data_mut()[k] = x0 + step;
            let up = eval(&xs);
            xs[i].data_mut()[k] = x0 - step;
            let down = eval(&xs);
            xs[i].data_mut()[k] = x0;
            *g = (up - down) / (2.0 * step);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = analytic.norm().max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

/// Synthetic corpus of 3 actors and 2 actions with a network small enough to
/// train a full plan in seconds.
pub struct Fixture {
    pub corpus: Corpus,
    pub topology: SkeletonTopology,
    pub network: NetworkConfig,
    pub labels: LabelMap,
}

pub fn fixture() -> Fixture {
    let topology = SkeletonTopology::kinect_v2();
    let index = generate_synthetic(3, 2, 3, 5).unwrap();
    let corpus = Corpus::load(&index, &topology, &PreprocessConfig::default()).unwrap();
    let labels = LabelMap::from_index(&index);
    let mut network = NetworkConfig::desk(labels.actions.len(), labels.actors.len());
    network.encoder_channels = vec![75, 8, 12, 16, 16];
    network.decoder_channels = vec![32, 24, 16, 12, 75];
    network.classifier_channels = vec![16, 16, 16, 32];
    network.classifier_dense = vec![32, 32, 32];
    Fixture {
        corpus,
        topology,
        network,
        labels,
    }
}
