mod common;

use std::collections::BTreeMap;

use common::{gradient_error, oracle, softmax_rows, tensor, two_joint_topology, uniform};
use pmr_core::autograd::{Tape, Var};
use pmr_core::losses::eval::*;
use pmr_core::losses::{self, total_losses, LossWeights, Objective, QuadEmbeddings, Term, PROB_EPS};
use pmr_core::Tensor;
use proptest::prelude::*;

const ABS: f64 = 1e-8;
const GRAD_STEP: f64 = 1e-3;
const GRAD_TOL: f64 = 1e-4;

fn close(a: f64, b: f64) {
    assert!((a - b).abs() <= ABS, "{a} vs {b}");
}

fn seq(t: usize, j: usize, xs: &[&[f64]]) -> Tensor {
    // One x trajectory per joint; y and z stay zero.
    let mut data = vec![0.0; t * j * 3];
    for (k, x) in xs.iter().enumerate() {
        for f in 0..t {
            data[(f * j + k) * 3] = x[f];
        }
    }
    tensor(&[1, t, j, 3], &data)
}

fn one_hot(n: usize, y: usize, labels: &[usize]) -> Tensor {
    Tensor::from_fn(&[n, y], |i| if labels[i / y] == i % y { 1.0 } else { 0.0 })
}

fn probs(n: usize, y: usize, seed: u64) -> Tensor {
    softmax_rows(&uniform(&[n, y], -2.0, 2.0, seed))
}

fn scores(values: &[f64]) -> Tensor {
    tensor(&[values.len()], values)
}

// Scalar oracles on toy tensors.

#[test]
fn reconstruction_matches_oracle() {
    let a = uniform(&[2, 2, 2, 3], -1.0, 1.0, 1);
    let b = uniform(&[2, 2, 2, 3], -1.0, 1.0, 2);
    close(reconstruction_loss(&a, &b).unwrap(), oracle::mse(&a, &b));
    close(cross_reconstruction_loss(&a, &b).unwrap(), oracle::mse(&a, &b));
    let z = Tensor::zeros(&[1, 2, 2, 3]);
    let o = Tensor::full(&[1, 2, 2, 3], 1.0);
    assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
    assert_eq!(reconstruction_loss(&z, &o).unwrap(), 1.0);
    assert_eq!(cross_reconstruction_loss(&b, &b).unwrap(), 0.0);
    assert_eq!(cross_reconstruction_loss(&o, &z).unwrap(), 1.0);
}

#[test]
fn smooth_matches_hand_value_and_oracle() {
    let s = seq(3, 2, &[&[0.0, 1.0, 3.0], &[0.0, 0.0, 0.0]]);
    let s_hat = seq(3, 2, &[&[5.0, 5.0, 5.0], &[0.0, 2.0, 2.0]]);
    // |0 - 5| + |4 - 0| = 9; sqrt(9) / (2 * 3).
    close(smooth_loss(&s, &s_hat).unwrap(), 0.5);

    let a = uniform(&[3, 4, 2, 3], -1.0, 1.0, 3);
    let b = uniform(&[3, 4, 2, 3], -1.0, 1.0, 4);
    close(smooth_loss(&a, &b).unwrap(), oracle::smooth(&a, &b));
    assert_eq!(smooth_loss(&a, &a).unwrap(), 0.0);
    let still = Tensor::full(&[1, 3, 2, 3], 0.3);
    let still_offset = Tensor::full(&[1, 3, 2, 3], -7.0);
    assert_eq!(smooth_loss(&still, &still_offset).unwrap(), 0.0);
}

#[test]
fn classifier_losses_match_oracle() {
    let labels = [0, 2, 1];
    let (m, p) = (probs(3, 3, 5), probs(3, 3, 6));
    close(classifier_losses(&m, &p, &labels).unwrap(), oracle::classifier(&m, &p, &labels));
    let hand = -(m.data()[0].ln() + m.data()[5].ln() + m.data()[7].ln()) / 3.0
        - (p.data()[0].ln() + p.data()[5].ln() + p.data()[7].ln()) / 3.0;
    close(classifier_losses(&m, &p, &labels).unwrap(), hand);

    let hot = one_hot(3, 3, &labels);
    assert!(classifier_losses(&hot, &hot, &labels).unwrap().abs() <= ABS);
    let flat5 = Tensor::full(&[3, 5], 0.2);
    close(classifier_losses(&flat5, &flat5, &labels).unwrap(), 2.0 * 5f64.ln());
    assert!(classifier_losses(&m, &p, &[0, 3, 1]).is_err());
}

#[test]
fn quality_controller_matches_oracle() {
    close(
        quality_controller_loss(&scores(&[0.9]), &scores(&[0.2])).unwrap(),
        0.9f64.ln() + 0.8f64.ln(),
    );
    close(quality_controller_loss(&scores(&[0.5]), &scores(&[0.5])).unwrap(), 2.0 * 0.5f64.ln());
    let optimum = quality_controller_loss(&scores(&[1.0 - PROB_EPS]), &scores(&[PROB_EPS])).unwrap();
    assert!(optimum.abs() < 1e-6, "{optimum}");
    let (r, f) = ([0.3, 0.99, 1.0, 0.05], [0.6, 0.0, 1.0, 0.5]);
    close(quality_controller_loss(&scores(&r), &scores(&f)).unwrap(), oracle::quality(&r, &f));
}

#[test]
fn cooperative_matches_oracle() {
    let (actions, actors) = ([1, 0], [2, 3]);
    let (m, p) = (probs(2, 3, 7), probs(2, 4, 8));
    close(
        cooperative_loss(&m, &p, &actions, &actors).unwrap(),
        oracle::cooperative(&m, &p, &actions, &actors),
    );
    let (hm, hp) = (one_hot(2, 3, &actions), one_hot(2, 4, &actors));
    assert!(cooperative_loss(&hm, &hp, &actions, &actors).unwrap().abs() <= ABS);
    let (um, up) = (Tensor::full(&[2, 3], 1.0 / 3.0), Tensor::full(&[2, 4], 0.25));
    close(cooperative_loss(&um, &up, &actions, &actors).unwrap(), 3f64.ln() + 4f64.ln());
}

#[test]
fn adversarial_matches_oracle() {
    let (actions, actors) = ([1, 0, 2], [3, 0, 1]);
    let (um, up) = (Tensor::full(&[3, 3], 1.0 / 3.0), Tensor::full(&[3, 4], 0.25));
    let fake = [1.0 - PROB_EPS; 3];
    close(
        adversarial_loss(&um, &up, &scores(&fake), &actions, &actors).unwrap(),
        -(3f64.ln()) - 4f64.ln() - PROB_EPS.ln(),
    );
    let (hm, hp) = (one_hot(3, 3, &actions), one_hot(3, 4, &actors));
    let q = [0.2, 0.7, 0.4];
    let only_q = adversarial_loss(&hm, &hp, &scores(&q), &actions, &actors).unwrap();
    let expected = -(0.8f64.ln() + 0.3f64.ln() + 0.6f64.ln()) / 3.0;
    assert!((only_q - expected).abs() < 1e-6, "{only_q} vs {expected}");

    let (m, p) = (probs(3, 3, 9), probs(3, 4, 10));
    close(
        adversarial_loss(&m, &p, &scores(&q), &actions, &actors).unwrap(),
        oracle::adversarial(&m, &p, &q, &actions, &actors),
    );
    // A confidently wrong head earns no more than a uniform one.
    let wrong = one_hot(3, 3, &[0, 1, 0]);
    close(
        adversarial_loss(&wrong, &up, &scores(&q), &actions, &actors).unwrap(),
        adversarial_loss(&um, &up, &scores(&q), &actions, &actors).unwrap(),
    );
}

fn emb(xs: &[[f64; 2]]) -> Tensor {
    let data: Vec<f64> = xs.iter().flatten().copied().collect();
    tensor(&[xs.len(), 2], &data)
}

#[test]
fn triplet_matches_hand_value_and_oracle() {
    let (ap_m, ap2_m, a2p_m) = (emb(&[[0.0, 0.0]]), emb(&[[1.0, 0.0]]), emb(&[[0.0, 2.0]]));
    let (ap_p, a2p_p, ap2_p) = (emb(&[[1.0, 1.0]]), emb(&[[1.0, 2.0]]), emb(&[[1.0, 1.5]]));
    // Motion: max(0, 1 - 4 + 1) = 0. Privacy: max(0, 1 - 0.25 + 1) = 1.75.
    let v = triplet_loss((&ap_m, &ap_p), (&a2p_m, &a2p_p), (&ap2_m, &ap2_p), 1.0).unwrap();
    close(v, 1.75);

    let e: Vec<Tensor> = (0..6).map(|i| uniform(&[3, 2, 4], -1.0, 1.0, 20 + i)).collect();
    let (ap, a2p, ap2) = ((&e[0], &e[1]), (&e[2], &e[3]), (&e[4], &e[5]));
    close(triplet_loss(ap, a2p, ap2, 0.7).unwrap(), oracle::triplet(ap, a2p, ap2, 0.7));

    // Positive identical to the anchor and negative beyond the margin.
    let far = emb(&[[3.0, 0.0]]);
    let z = emb(&[[0.0, 0.0]]);
    assert_eq!(triplet_loss((&z, &z), (&far, &z), (&z, &far), 1.0).unwrap(), 0.0);
    // Positive equal to negative: both hinges sit at the margin.
    let x = emb(&[[0.4, -0.2]]);
    assert_eq!(triplet_loss((&z, &z), (&x, &x), (&x, &x), 1.5).unwrap(), 3.0);
}

#[test]
fn latent_consistency_matches_oracle() {
    let e: Vec<Tensor> = (0..6).map(|i| uniform(&[2, 3, 5], -1.0, 1.0, 40 + i)).collect();
    let (ap, a2p, ap2) = ((&e[0], &e[1]), (&e[2], &e[3]), (&e[4], &e[5]));
    close(latent_consistency_loss(ap, a2p, ap2).unwrap(), oracle::latent(ap, a2p, ap2));
    let same = (&e[0], &e[1]);
    assert_eq!(latent_consistency_loss(same, same, same).unwrap(), 0.0);
    let shifted = Tensor::from_fn(e[1].shape(), |i| e[1].data()[i] + 1.0);
    assert_eq!(
        latent_consistency_loss((&e[0], &e[1]), (&e[2], &shifted), (&e[0], &e[3])).unwrap(),
        1.0
    );
}

#[test]
fn end_effector_matches_hand_value_and_oracle() {
    let topo = two_joint_topology(2.0);
    let s = seq(3, 2, &[&[0.0; 3], &[0.0, 1.0, 3.0]]);
    let still = seq(3, 2, &[&[0.0; 3], &[4.0; 3]]);
    // Velocities 1 and 2 against zero, scaled by 1/2: (0.25 + 1) / 2.
    close(end_effector_loss(&s, &still, &topo).unwrap(), 0.625);
    assert_eq!(end_effector_loss(&s, &s, &topo).unwrap(), 0.0);
    assert_eq!(end_effector_loss(&still, &seq(3, 2, &[&[1.0; 3], &[-2.0; 3]]), &topo).unwrap(), 0.0);

    let a = uniform(&[2, 4, 2, 3], -1.0, 1.0, 50);
    let b = uniform(&[2, 4, 2, 3], -1.0, 1.0, 51);
    close(end_effector_loss(&a, &b, &topo).unwrap(), oracle::end_effector(&a, &b, &topo));
}

#[test]
fn weighted_totals_follow_the_objectives() {
    let w = LossWeights::default();
    let ones: BTreeMap<Term, f64> = [
        Term::Rec,
        Term::Smooth,
        Term::Coop,
        Term::Adv,
        Term::Cross,
        Term::Ee,
        Term::Trip,
        Term::Latent,
    ]
    .into_iter()
    .map(|t| (t, 1.0))
    .collect();
    close(total_losses(&ones, &w, Objective::Paired).unwrap().total, 37.1);
    close(total_losses(&ones, &w, Objective::Unpaired).unwrap().total, 25.0);
    close(total_losses(&ones, &w, Objective::Autoencoder).unwrap().total, 5.0);
    let zeros: BTreeMap<Term, f64> = ones.keys().map(|t| (*t, 0.0)).collect();
    assert_eq!(total_losses(&zeros, &w, Objective::Paired).unwrap().total, 0.0);
    let ablated = LossWeights { alpha_emb: 0.0, ..w.clone() };
    assert_eq!(
        total_losses(&ones, &ablated, Objective::Unpaired).unwrap().total,
        total_losses(&ones, &ablated, Objective::Autoencoder).unwrap().total
    );
    let mut partial = ones.clone();
    partial.remove(&Term::Latent);
    assert!(total_losses(&partial, &w, Objective::Paired).is_err());
}

// Gradients against central finite differences.

fn check(name: &str, inputs: &[Tensor], f: impl Fn(&Tape, &[Var]) -> Var) {
    let err = gradient_error(inputs, GRAD_STEP, f);
    assert!(err < GRAD_TOL, "{name}: relative gradient error {err:e}");
}

fn seqs(n: usize, seed: u64) -> Vec<Tensor> {
    (0..n).map(|i| uniform(&[2, 4, 2, 3], -1.0, 1.0, seed + i as u64)).collect()
}

#[test]
fn reconstruction_gradients() {
    check("rec", &seqs(2, 100), |t, v| losses::reconstruction(t, v[0], v[1]).unwrap());
    check("cross", &seqs(2, 110), |t, v| losses::cross_reconstruction(t, v[0], v[1]).unwrap());
}

#[test]
fn smooth_gradients() {
    check("smooth", &seqs(2, 120), |t, v| losses::smooth(t, v[0], v[1]).unwrap());
}

#[test]
fn end_effector_gradients() {
    let topo = two_joint_topology(1.3);
    check("ee", &seqs(2, 130), |t, v| losses::end_effector(t, v[0], v[1], &topo).unwrap());
}

#[test]
fn classifier_gradients() {
    let logits = vec![uniform(&[3, 4], -2.0, 2.0, 140), uniform(&[3, 4], -2.0, 2.0, 141)];
    let labels = [3, 0, 1];
    check("classifier", &logits, |t, v| {
        let (a, b) = (t.softmax(v[0]).unwrap(), t.softmax(v[1]).unwrap());
        losses::classifier_loss(t, a, b, &labels).unwrap()
    });
}

#[test]
fn quality_controller_gradients() {
    let logits = vec![uniform(&[4], -2.0, 2.0, 150), uniform(&[4], -2.0, 2.0, 151)];
    check("qc", &logits, |t, v| {
        losses::quality_controller(t, t.sigmoid(v[0]), t.sigmoid(v[1])).unwrap()
    });
}

#[test]
fn cooperative_gradients() {
    let logits = vec![uniform(&[3, 3], -2.0, 2.0, 160), uniform(&[3, 5], -2.0, 2.0, 161)];
    check("coop", &logits, |t, v| {
        let (a, b) = (t.softmax(v[0]).unwrap(), t.softmax(v[1]).unwrap());
        losses::cooperative(t, a, b, &[0, 2, 1], &[4, 0, 3]).unwrap()
    });
}

#[test]
fn adversarial_gradients() {
    // Labels chosen so some samples sit below the chance cap and some above.
    let logits = vec![
        uniform(&[4, 3], -2.0, 2.0, 170),
        uniform(&[4, 5], -2.0, 2.0, 171),
        uniform(&[4], -2.0, 2.0, 172),
    ];
    check("adv", &logits, |t, v| {
        let (a, b) = (t.softmax(v[0]).unwrap(), t.softmax(v[1]).unwrap());
        losses::adversarial(t, a, b, t.sigmoid(v[2]), &[0, 1, 2, 0], &[4, 3, 2, 1]).unwrap()
    });
}

fn quad(v: &[Var]) -> QuadEmbeddings {
    QuadEmbeddings {
        ap: (v[0], v[1]),
        a2p: (v[2], v[3]),
        ap2: (v[4], v[5]),
    }
}

#[test]
fn triplet_gradients() {
    let e: Vec<Tensor> = (0..6).map(|i| uniform(&[3, 2, 3], -0.6, 0.6, 180 + i)).collect();
    check("trip", &e, |t, v| losses::triplet(t, &quad(v), 1.0).unwrap());
}

#[test]
fn latent_gradients() {
    let e: Vec<Tensor> = (0..6).map(|i| uniform(&[3, 2, 3], -1.0, 1.0, 190 + i)).collect();
    check("latent", &e, |t, v| losses::latent_consistency(t, &quad(v)).unwrap());
}

// Properties over random inputs.

fn seq_pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..3, 2usize..5, 1usize..4).prop_flat_map(|(n, t, j)| {
        let len = n * t * j * 3;
        (
            prop::collection::vec(-2.0f64..2.0, len),
            prop::collection::vec(-2.0f64..2.0, len),
        )
            .prop_map(move |(a, b)| (tensor(&[n, t, j, 3], &a), tensor(&[n, t, j, 3], &b)))
    })
}

fn prob_rows(n: usize, y: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, n * y).prop_map(move |v| softmax_rows(&tensor(&[n, y], &v)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sequence_losses_are_non_negative((a, b) in seq_pair()) {
        let topo = pmr_core::dataset::SkeletonTopology {
            parent: (0..a.shape()[2]).map(|j| j.saturating_sub(1)).collect(),
            end_effectors: vec![a.shape()[2] - 1],
            chain_length: [(a.shape()[2] - 1, 0.8)].into_iter().collect(),
            rest_offsets: vec![[0.0, 0.8, 0.0]; a.shape()[2]],
        };
        prop_assert!(reconstruction_loss(&a, &b).unwrap() >= 0.0);
        prop_assert!(cross_reconstruction_loss(&a, &b).unwrap() >= 0.0);
        prop_assert!(smooth_loss(&a, &b).unwrap() >= 0.0);
        prop_assert!(end_effector_loss(&a, &b, &topo).unwrap() >= 0.0);
    }

    #[test]
    fn reconstruction_is_symmetric((a, b) in seq_pair()) {
        prop_assert_eq!(reconstruction_loss(&a, &b).unwrap(), reconstruction_loss(&b, &a).unwrap());
        prop_assert_eq!(cross_reconstruction_loss(&a, &b).unwrap(), cross_reconstruction_loss(&b, &a).unwrap());
    }

    #[test]
    fn smooth_ignores_constant_offsets((a, b) in seq_pair(), dx in -5.0f64..5.0, dz in -5.0f64..5.0) {
        let shifted = Tensor::from_fn(a.shape(), |i| match i % 3 {
            0 => a.data()[i] + dx,
            2 => a.data()[i] + dz,
            _ => a.data()[i],
        });
        let base = smooth_loss(&a, &b).unwrap();
        prop_assert!((smooth_loss(&shifted, &b).unwrap() - base).abs() < 1e-9);
        prop_assert!((smooth_loss(&b, &shifted).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn classification_losses_are_non_negative(
        m in prob_rows(3, 4),
        p in prob_rows(3, 4),
        labels in prop::collection::vec(0usize..4, 3),
    ) {
        prop_assert!(classifier_losses(&m, &p, &labels).unwrap() >= 0.0);
        prop_assert!(cooperative_loss(&m, &p, &labels, &labels).unwrap() >= 0.0);
    }

    #[test]
    fn embedding_losses_are_non_negative(
        e in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 8), 6),
        gamma in 0.1f64..3.0,
    ) {
        let t: Vec<Tensor> = e.iter().map(|v| tensor(&[2, 4], v)).collect();
        let (ap, a2p, ap2) = ((&t[0], &t[1]), (&t[2], &t[3]), (&t[4], &t[5]));
        let trip = triplet_loss(ap, a2p, ap2, gamma).unwrap();
        prop_assert!(trip >= 0.0);
        prop_assert!((trip - oracle::triplet(ap, a2p, ap2, gamma)).abs() < 1e-9);
        prop_assert!(latent_consistency_loss(ap, a2p, ap2).unwrap() >= 0.0);
    }
}
