//! Loss terms as differentiable tape operations, with plain-tensor wrappers.
//!
//! Every term is averaged over the batch. Sequences are `[N, T, J, 3]`,
//! embeddings `[N, C, L]` and class probabilities `[N, Y]`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::dataset::SkeletonTopology;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha_rec: f64,
    pub alpha_cross: f64,
    pub alpha_ee: f64,
    pub alpha_trip: f64,
    pub alpha_smooth: f64,
    pub alpha_latent: f64,
    pub alpha_emb: f64,
    /// Triplet margin.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_rec: 2.0,
            alpha_cross: 0.1,
            alpha_ee: 1.0,
            alpha_trip: 1.0,
            alpha_smooth: 3.0,
            alpha_latent: 10.0,
            alpha_emb: 10.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let alphas = [
            self.alpha_rec,
            self.alpha_cross,
            self.alpha_ee,
            self.alpha_trip,
            self.alpha_smooth,
            self.alpha_latent,
            self.alpha_emb,
        ];
        if alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Config("triplet margin must be positive".into()));
        }
        Ok(())
    }
}

/// Names of the individual loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Rec,
    Smooth,
    Coop,
    Adv,
    Cross,
    Ee,
    Trip,
    Latent,
    /// Action classifier loss over both embeddings.
    M,
    /// Actor classifier loss over both embeddings.
    P,
    /// Quality controller log-likelihood; maximized by the controller.
    Qc,
}

impl Term {
    pub fn name(self) -> &'static str {
        match self {
            Term::Rec => "rec",
            Term::Smooth => "smooth",
            Term::Coop => "coop",
            Term::Adv => "adv",
            Term::Cross => "cross",
            Term::Ee => "ee",
            Term::Trip => "trip",
            Term::Latent => "latent",
            Term::M => "m",
            Term::P => "p",
            Term::Qc => "qc",
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which weighted combination of terms an optimization step minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Reconstruction pre-training.
    Autoencoder,
    /// Autoencoder step of unpaired training.
    Unpaired,
    /// Autoencoder step of paired training.
    Paired,
    /// Joint step of both embedding classifiers and the quality controller.
    Classifiers,
}

impl Objective {
    /// Coefficient of every term the objective requires.
    pub fn coefficients(self, w: &LossWeights) -> Vec<(Term, f64)> {
        let ae = vec![(Term::Rec, w.alpha_rec), (Term::Smooth, w.alpha_smooth)];
        let unpaired = || {
            let mut v = ae.clone();
            v.extend([(Term::Coop, w.alpha_emb), (Term::Adv, w.alpha_emb)]);
            v
        };
        match self {
            Objective::Autoencoder => ae.clone(),
            Objective::Unpaired => unpaired(),
            Objective::Paired => {
                let mut v = unpaired();
                v.extend([
                    (Term::Cross, w.alpha_cross),
                    (Term::Ee, w.alpha_ee),
                    (Term::Trip, w.alpha_trip),
                    (Term::Latent, w.alpha_latent),
                ]);
                v
            }
            Objective::Classifiers => vec![(Term::M, 1.0), (Term::P, 1.0), (Term::Qc, -1.0)],
        }
    }
}

/// Scalar value of every active term plus the weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: BTreeMap<Term, f64>,
    pub total: f64,
}

/// Weighted sum of the terms the objective requires.
pub fn total_losses(terms: &BTreeMap<Term, f64>, weights: &LossWeights, objective: Objective) -> Result<LossReport> {
    let mut total = 0.0;
    let mut used = BTreeMap::new();
    for (term, c) in objective.coefficients(weights) {
        let v = *terms.get(&term).ok_or_else(|| Error::MissingTerm(term.name().into()))?;
        total += c * v;
        used.insert(term, v);
    }
    Ok(LossReport { terms: used, total })
}

/// The same weighted sum built on a tape so it can be differentiated.
/// Terms with a zero coefficient are left out of the graph.
pub fn weighted_total(tape: &Tape, terms: &BTreeMap<Term, Var>, weights: &LossWeights, objective: Objective) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (term, c) in objective.coefficients(weights) {
        let v = *terms.get(&term).ok_or_else(|| Error::MissingTerm(term.name().into()))?;
        if c == 0.0 {
            continue;
        }
        let scaled = tape.scale(v, c);
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::shape(format!("{what}: {sa:?} vs {sb:?}")));
    }
    Ok(())
}

fn batch_mean(tape: &Tape, per_sample: Var) -> Var {
    tape.mean(per_sample)
}

/// Mean of squared differences over every element.
pub fn mse(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, a, b, "mse")?;
    let d = tape.sub(a, b)?;
    Ok(tape.mean(tape.square(d)))
}

pub fn reconstruction(tape: &Tape, s: Var, s_hat: Var) -> Result<Var> {
    mse(tape, s_hat, s)
}

pub fn cross_reconstruction(tape: &Tape, generated: Var, target: Var) -> Result<Var> {
    mse(tape, generated, target)
}

fn check_sequence(tape: &Tape, s: Var, s_hat: Var, what: &str) -> Result<(usize, usize, usize)> {
    same_shape(tape, s, s_hat, what)?;
    match tape.shape(s)[..] {
        [n, t, j, 3] if t >= 2 => Ok((n, t, j)),
        ref other => Err(Error::shape(format!("{what} expects [N, T>=2, J, 3], got {other:?}"))),
    }
}

/// Squared frame-to-frame displacement summed over frames and coordinates: `[N, J]`.
fn displacement_energy(tape: &Tape, s: Var, frames: usize) -> Result<Var> {
    let d = velocity(tape, s, frames)?;
    tape.sum_axes(tape.square(d), &[1, 3])
}

/// First difference along time: `[N, T-1, J, 3]`.
fn velocity(tape: &Tape, s: Var, frames: usize) -> Result<Var> {
    let next = tape.slice(s, 1, 1, frames - 1)?;
    let prev = tape.slice(s, 1, 0, frames - 1)?;
    tape.sub(next, prev)
}

/// Per sample `sqrt(sum_j |E_hat_j - E_j|) / (J * T)`, where `E_j` sums the
/// squared displacement of joint `j` over the `T - 1` frame transitions.
pub fn smooth(tape: &Tape, s: Var, s_hat: Var) -> Result<Var> {
    let (_, t, j) = check_sequence(tape, s, s_hat, "smooth loss")?;
    let e_hat = displacement_energy(tape, s_hat, t)?;
    let e = displacement_energy(tape, s, t)?;
    let per_joint = tape.abs(tape.sub(e_hat, e)?);
    let per_sample = tape.sqrt(tape.sum_axes(per_joint, &[1])?);
    Ok(batch_mean(tape, tape.scale(per_sample, 1.0 / (j * t) as f64)))
}

/// Per-sample `-ln(max(p[label], eps))`: `[N]`.
pub fn cross_entropy_per_sample(tape: &Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let picked = tape.gather(probs, labels)?;
    Ok(tape.neg(tape.clamped_log(picked, PROB_EPS)))
}

pub fn cross_entropy(tape: &Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    Ok(batch_mean(tape, cross_entropy_per_sample(tape, probs, labels)?))
}

/// `CE(head(E_M(s)), y) + CE(head(E_P(s)), y)`; used for both `L_M` and `L_P`.
pub fn classifier_loss(tape: &Tape, probs_from_motion: Var, probs_from_privacy: Var, labels: &[usize]) -> Result<Var> {
    let a = cross_entropy(tape, probs_from_motion, labels)?;
    let b = cross_entropy(tape, probs_from_privacy, labels)?;
    tape.add(a, b)
}

fn clamp_prob(tape: &Tape, q: Var) -> Var {
    // Lower clamp happens inside the log; the upper clamp keeps 1 - q >= eps.
    tape.clamp_max(q, 1.0 - PROB_EPS)
}

/// `ln Q(real) + ln(1 - Q(fake))`, batch-averaged.
pub fn quality_controller(tape: &Tape, score_real: Var, score_fake: Var) -> Result<Var> {
    let real = tape.clamped_log(clamp_prob(tape, score_real), PROB_EPS);
    let fake = log_one_minus(tape, score_fake);
    Ok(batch_mean(tape, tape.add(real, fake)?))
}

fn log_one_minus(tape: &Tape, q: Var) -> Var {
    let one_minus = tape.add_scalar(tape.neg(clamp_prob(tape, q)), 1.0);
    tape.clamped_log(one_minus, PROB_EPS)
}

/// `CE(M(E_M(s)), a) + CE(P(E_P(s)), p)`.
pub fn cooperative(tape: &Tape, m_on_motion: Var, p_on_privacy: Var, actions: &[usize], actors: &[usize]) -> Result<Var> {
    let a = cross_entropy(tape, m_on_motion, actions)?;
    let b = cross_entropy(tape, p_on_privacy, actors)?;
    tape.add(a, b)
}

/// Cross-entropy of a uniform prediction over `classes`, the cap of each
/// adversarial term: confusing a classifier beyond chance earns nothing.
pub fn chance_cross_entropy(classes: usize) -> f64 {
    (classes.max(1) as f64).ln()
}

/// `-min(CE(M(E_P(s)), a), ln Y_a) - min(CE(P(E_M(s)), p), ln Y_p) - ln(1 - Q(s_hat))`.
pub fn adversarial(
    tape: &Tape,
    m_on_privacy: Var,
    p_on_motion: Var,
    score_fake: Var,
    actions: &[usize],
    actors: &[usize],
) -> Result<Var> {
    let cap_a = chance_cross_entropy(tape.shape(m_on_privacy)[1]);
    let cap_p = chance_cross_entropy(tape.shape(p_on_motion)[1]);
    let ce_a = tape.clamp_max(cross_entropy_per_sample(tape, m_on_privacy, actions)?, cap_a);
    let ce_p = tape.clamp_max(cross_entropy_per_sample(tape, p_on_motion, actors)?, cap_p);
    let fake = log_one_minus(tape, score_fake);
    let sum = tape.add(tape.add(ce_a, ce_p)?, fake)?;
    Ok(batch_mean(tape, tape.neg(sum)))
}

/// Per-sample squared Euclidean distance between flattened maps: `[N]`.
fn sq_dist(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, a, b, "embedding distance")?;
    let shape = tape.shape(a);
    let n = *shape.first().ok_or_else(|| Error::shape("embedding without batch axis"))?;
    let flat = tape.reshape(tape.sub(a, b)?, &[n, shape[1..].iter().product()])?;
    tape.sum_axes(tape.square(flat), &[1])
}

fn hinge(tape: &Tape, anchor: Var, positive: Var, negative: Var, gamma: f64) -> Result<Var> {
    let dp = sq_dist(tape, anchor, positive)?;
    let dn = sq_dist(tape, anchor, negative)?;
    Ok(tape.relu(tape.add_scalar(tape.sub(dp, dn)?, gamma)))
}

/// Embeddings of the four members of a batch of quadruples.
#[derive(Clone, Copy, Debug)]
pub struct QuadEmbeddings {
    /// Anchor `(a, p)`.
    pub ap: (Var, Var),
    /// Same actor, other action `(a', p)`.
    pub a2p: (Var, Var),
    /// Same action, other actor `(a, p')`.
    pub ap2: (Var, Var),
}

/// Motion anchor pulled toward the same action by another actor and away from
/// the same actor's other action; privacy anchor the other way round.
pub fn triplet(tape: &Tape, e: &QuadEmbeddings, gamma: f64) -> Result<Var> {
    let motion = hinge(tape, e.ap.0, e.ap2.0, e.a2p.0, gamma)?;
    let privacy = hinge(tape, e.ap.1, e.a2p.1, e.ap2.1, gamma)?;
    Ok(batch_mean(tape, tape.add(motion, privacy)?))
}

/// `MSE(E_M(ap), E_M(ap')) + MSE(E_P(ap), E_P(a'p))`.
pub fn latent_consistency(tape: &Tape, e: &QuadEmbeddings) -> Result<Var> {
    let m = mse(tape, e.ap.0, e.ap2.0)?;
    let p = mse(tape, e.ap.1, e.a2p.1)?;
    tape.add(m, p)
}

/// Per sample `sum_e mean_t |v_e(t) - v_hat_e(t)|^2 / h_e^2`.
pub fn end_effector(tape: &Tape, s: Var, s_hat: Var, topology: &SkeletonTopology) -> Result<Var> {
    let (n, t, j) = check_sequence(tape, s, s_hat, "end-effector loss")?;
    if j != topology.joints() {
        return Err(Error::shape(format!("{j} joints for a {}-joint topology", topology.joints())));
    }
    let dv = tape.sub(velocity(tape, s, t)?, velocity(tape, s_hat, t)?)?;
    let mut total: Option<Var> = None;
    for &e in &topology.end_effectors {
        let h = topology.chain_length_of(e)?;
        let ve = tape.slice(dv, 2, e, 1)?;
        let per_sample = tape.sum_axes(tape.square(ve), &[1, 2, 3])?;
        let term = tape.scale(per_sample, 1.0 / ((t - 1) as f64 * h * h));
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let total = total.unwrap_or_else(|| tape.constant(Tensor::zeros(&[n])));
    Ok(batch_mean(tape, total))
}

fn eval1(a: &Tensor, b: &Tensor, f: impl FnOnce(&Tape, Var, Var) -> Result<Var>) -> Result<f64> {
    let tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = f(&tape, va, vb)?;
    let v = tape.value(out).item();
    Ok(v)
}

/// Tensor-level wrappers returning plain scalars.
pub mod eval {
    use super::*;

    pub fn reconstruction_loss(s: &Tensor, s_hat: &Tensor) -> Result<f64> {
        eval1(s, s_hat, reconstruction)
    }

    pub fn cross_reconstruction_loss(generated: &Tensor, target: &Tensor) -> Result<f64> {
        eval1(generated, target, cross_reconstruction)
    }

    pub fn smooth_loss(s: &Tensor, s_hat: &Tensor) -> Result<f64> {
        eval1(s, s_hat, smooth)
    }

    pub fn classifier_losses(from_motion: &Tensor, from_privacy: &Tensor, labels: &[usize]) -> Result<f64> {
        eval1(from_motion, from_privacy, |t, a, b| classifier_loss(t, a, b, labels))
    }

    pub fn quality_controller_loss(real: &Tensor, fake: &Tensor) -> Result<f64> {
        eval1(real, fake, quality_controller)
    }

    pub fn cooperative_loss(m_on_motion: &Tensor, p_on_privacy: &Tensor, actions: &[usize], actors: &[usize]) -> Result<f64> {
        eval1(m_on_motion, p_on_privacy, |t, a, b| cooperative(t, a, b, actions, actors))
    }

    pub fn adversarial_loss(
        m_on_privacy: &Tensor,
        p_on_motion: &Tensor,
        score_fake: &Tensor,
        actions: &[usize],
        actors: &[usize],
    ) -> Result<f64> {
        let tape = Tape::new();
        let (a, b, q) = (
            tape.constant(m_on_privacy.clone()),
            tape.constant(p_on_motion.clone()),
            tape.constant(score_fake.clone()),
        );
        let out = adversarial(&tape, a, b, q, actions, actors)?;
        let v = tape.value(out).item();
        Ok(v)
    }

    /// Embeddings as `(motion, privacy)` for the anchor, same-actor and same-action members.
    pub fn triplet_loss(ap: (&Tensor, &Tensor), a2p: (&Tensor, &Tensor), ap2: (&Tensor, &Tensor), gamma: f64) -> Result<f64> {
        let tape = Tape::new();
        let c = |t: &Tensor| tape.constant(t.clone());
        let e = QuadEmbeddings {
            ap: (c(ap.0), c(ap.1)),
            a2p: (c(a2p.0), c(a2p.1)),
            ap2: (c(ap2.0), c(ap2.1)),
        };
        let out = triplet(&tape, &e, gamma)?;
        let v = tape.value(out).item();
        Ok(v)
    }

    pub fn latent_consistency_loss(ap: (&Tensor, &Tensor), a2p: (&Tensor, &Tensor), ap2: (&Tensor, &Tensor)) -> Result<f64> {
        let tape = Tape::new();
        let c = |t: &Tensor| tape.constant(t.clone());
        let e = QuadEmbeddings {
            ap: (c(ap.0), c(ap.1)),
            a2p: (c(a2p.0), c(a2p.1)),
            ap2: (c(ap2.0), c(ap2.1)),
        };
        let out = latent_consistency(&tape, &e)?;
        let v = tape.value(out).item();
        Ok(v)
    }

    pub fn end_effector_loss(s: &Tensor, s_hat: &Tensor, topology: &SkeletonTopology) -> Result<f64> {
        eval1(s, s_hat, |t, a, b| end_effector(t, a, b, topology))
    }
}
