//! Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero
//! if any fails. Criteria 4 to 8 train five desk-scale models on the synthetic
//! corpus and take roughly half an hour on one core.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use common::{fixture, gradient_error, oracle, softmax_rows, tensor, two_joint_topology, uniform};
use pmr_core::autograd::{Tape, Var};
use pmr_core::dataset::{
    generate_synthetic, normalize_length, parse_ntu_str, to_ntu_string, Corpus, PreprocessConfig, SequenceMeta,
    SkeletonSequence, SkeletonTopology, Split,
};
use pmr_core::evaluation::{run_experiment, spearman, ExperimentConfig, ExperimentResult, Probes};
use pmr_core::losses::{self, eval::*, QuadEmbeddings, PROB_EPS};
use pmr_core::network::Group;
use pmr_core::training::{checkpoint, StagePlan, StepRecord, TrainConfig, TrainData, TrainState, Trainer};
use pmr_core::Tensor;

const MAIN_ALPHA: f64 = 10.0;
const SWEEP: [f64; 4] = [0.0, 1.0, 10.0, 40.0];
const CORPUS_SEED: u64 = 7;

struct Verdict {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn verdict(id: usize, name: &'static str, checks: &[(bool, String)]) -> Verdict {
    let passed = checks.iter().all(|(ok, _)| *ok);
    let detail = checks
        .iter()
        .map(|(ok, d)| if *ok { d.clone() } else { format!("{d} [violated]") })
        .collect::<Vec<_>>()
        .join("; ");
    let v = Verdict {
        id,
        name,
        passed,
        detail,
    };
    report(&v);
    v
}

fn report(v: &Verdict) {
    let status = if v.passed { "PASS" } else { "FAIL" };
    println!("criterion {} {status}: {} ({})", v.id, v.name, v.detail);
}

// Criterion 1: scalar oracles and zero cases.

fn loss_oracles() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut diff = |a: f64, b: f64| worst = worst.max((a - b).abs());
    let (s, s_hat) = (uniform(&[2, 4, 2, 3], -1.0, 1.0, 1), uniform(&[2, 4, 2, 3], -1.0, 1.0, 2));
    let topo = two_joint_topology(2.0);
    diff(reconstruction_loss(&s, &s_hat).unwrap(), oracle::mse(&s, &s_hat));
    diff(cross_reconstruction_loss(&s, &s_hat).unwrap(), oracle::mse(&s, &s_hat));
    diff(smooth_loss(&s, &s_hat).unwrap(), oracle::smooth(&s, &s_hat));
    diff(end_effector_loss(&s, &s_hat, &topo).unwrap(), oracle::end_effector(&s, &s_hat, &topo));

    let probs = |n, y, seed| softmax_rows(&uniform(&[n, y], -2.0, 2.0, seed));
    let (actions, actors) = ([0, 2, 1], [1, 3, 0]);
    let (m_m, m_p, p_m, p_p) = (probs(3, 3, 3), probs(3, 3, 4), probs(3, 4, 5), probs(3, 4, 6));
    diff(classifier_losses(&m_m, &m_p, &actions).unwrap(), oracle::classifier(&m_m, &m_p, &actions));
    diff(classifier_losses(&p_m, &p_p, &actors).unwrap(), oracle::classifier(&p_m, &p_p, &actors));
    diff(
        cooperative_loss(&m_m, &p_p, &actions, &actors).unwrap(),
        oracle::cooperative(&m_m, &p_p, &actions, &actors),
    );
    let (real, fake) = ([0.9, 0.4, 0.7], [0.2, 0.5, 0.05]);
    diff(
        quality_controller_loss(&tensor(&[3], &real), &tensor(&[3], &fake)).unwrap(),
        oracle::quality(&real, &fake),
    );
    diff(
        adversarial_loss(&m_p, &p_m, &tensor(&[3], &fake), &actions, &actors).unwrap(),
        oracle::adversarial(&m_p, &p_m, &fake, &actions, &actors),
    );
    let e: Vec<Tensor> = (0..6).map(|i| uniform(&[3, 2, 4], -1.0, 1.0, 10 + i)).collect();
    let (ap, a2p, ap2) = ((&e[0], &e[1]), (&e[2], &e[3]), (&e[4], &e[5]));
    diff(triplet_loss(ap, a2p, ap2, 1.0).unwrap(), oracle::triplet(ap, a2p, ap2, 1.0));
    diff(latent_consistency_loss(ap, a2p, ap2).unwrap(), oracle::latent(ap, a2p, ap2));

    // Hand-computed toy values.
    let x_track = |xs: [[f64; 3]; 2]| {
        let data: Vec<f64> = (0..3).flat_map(|f| (0..2).flat_map(move |j| [xs[j][f], 0.0, 0.0])).collect();
        tensor(&[1, 3, 2, 3], &data)
    };
    let moving = x_track([[0.0, 1.0, 3.0], [0.0; 3]]);
    diff(smooth_loss(&moving, &x_track([[5.0; 3], [0.0, 2.0, 2.0]])).unwrap(), 0.5);
    diff(end_effector_loss(&x_track([[0.0; 3], [0.0, 1.0, 3.0]]), &x_track([[0.0; 3], [4.0; 3]]), &topo).unwrap(), 0.625);
    let v2 = |x: f64, y: f64| tensor(&[1, 2], &[x, y]);
    diff(
        triplet_loss((&v2(0.0, 0.0), &v2(1.0, 1.0)), (&v2(0.0, 2.0), &v2(1.0, 2.0)), (&v2(1.0, 0.0), &v2(1.0, 1.5)), 1.0)
            .unwrap(),
        1.75,
    );
    diff(
        quality_controller_loss(&tensor(&[1], &[0.9]), &tensor(&[1], &[0.2])).unwrap(),
        0.9f64.ln() + 0.8f64.ln(),
    );
    let flat = |n, y| Tensor::full(&[n, y], 1.0 / y as f64);
    diff(classifier_losses(&flat(3, 5), &flat(3, 5), &actions).unwrap(), 2.0 * 5f64.ln());
    diff(
        adversarial_loss(&flat(3, 3), &flat(3, 4), &Tensor::full(&[3], 1.0 - PROB_EPS), &actions, &actors).unwrap(),
        -(3f64.ln()) - 4f64.ln() - PROB_EPS.ln(),
    );

    let zero = Tensor::zeros(&[1, 3, 2, 3]);
    let ones = Tensor::full(&[1, 3, 2, 3], 1.0);
    let same = (&e[0], &e[1]);
    let z2 = v2(0.0, 0.0);
    let zero_cases = [
        reconstruction_loss(&s, &s).unwrap() == 0.0,
        reconstruction_loss(&zero, &ones).unwrap() == 1.0,
        cross_reconstruction_loss(&s_hat, &s_hat).unwrap() == 0.0,
        cross_reconstruction_loss(&ones, &zero).unwrap() == 1.0,
        smooth_loss(&s, &s).unwrap() == 0.0,
        smooth_loss(&zero, &Tensor::full(&[1, 3, 2, 3], -4.0)).unwrap() == 0.0,
        end_effector_loss(&s, &s, &topo).unwrap() == 0.0,
        end_effector_loss(&zero, &ones, &topo).unwrap() == 0.0,
        latent_consistency_loss(same, same, same).unwrap() == 0.0,
        triplet_loss((&z2, &z2), (&v2(3.0, 0.0), &z2), (&z2, &v2(3.0, 0.0)), 1.0).unwrap() == 0.0,
        triplet_loss((&z2, &z2), (&v2(1.0, 1.0), &v2(1.0, 1.0)), (&v2(1.0, 1.0), &v2(1.0, 1.0)), 1.0).unwrap() == 2.0,
    ];
    let exact = zero_cases.iter().filter(|&&ok| ok).count();
    verdict(
        1,
        "loss oracle suite",
        &[
            (worst <= 1e-8, format!("max |loss - oracle| {worst:.1e} <= 1e-8")),
            (exact == zero_cases.len(), format!("{exact}/{} exact cases hold", zero_cases.len())),
        ],
    )
}

// Criterion 2: analytic against central finite-difference gradients.

fn gradient_suite() -> Verdict {
    type Build = Box<dyn Fn(&Tape, &[Var]) -> Var>;
    let seqs = |seed: u64| vec![uniform(&[2, 4, 2, 3], -1.0, 1.0, seed), uniform(&[2, 4, 2, 3], -1.0, 1.0, seed + 1)];
    let embs = |seed: u64| (0..6).map(|i| uniform(&[3, 2, 3], -0.6, 0.6, seed + i)).collect::<Vec<_>>();
    let logits = |shapes: &[&[usize]], seed: u64| {
        shapes.iter().enumerate().map(|(i, s)| uniform(s, -2.0, 2.0, seed + i as u64)).collect::<Vec<_>>()
    };
    let quad = |v: &[Var]| QuadEmbeddings {
        ap: (v[0], v[1]),
        a2p: (v[2], v[3]),
        ap2: (v[4], v[5]),
    };
    let topo = two_joint_topology(1.3);
    let cases: Vec<(&str, Vec<Tensor>, Build)> = vec![
        ("rec", seqs(100), Box::new(|t, v| losses::reconstruction(t, v[0], v[1]).unwrap())),
        ("smooth", seqs(110), Box::new(|t, v| losses::smooth(t, v[0], v[1]).unwrap())),
        (
            "coop",
            logits(&[&[3, 3], &[3, 4]], 120),
            Box::new(|t, v| {
                losses::cooperative(t, t.softmax(v[0]).unwrap(), t.softmax(v[1]).unwrap(), &[0, 2, 1], &[3, 0, 1]).unwrap()
            }),
        ),
        (
            "adv",
            logits(&[&[4, 3], &[4, 4], &[4]], 130),
            Box::new(|t, v| {
                let (m, p) = (t.softmax(v[0]).unwrap(), t.softmax(v[1]).unwrap());
                losses::adversarial(t, m, p, t.sigmoid(v[2]), &[0, 1, 2, 0], &[3, 2, 1, 0]).unwrap()
            }),
        ),
        ("cross", seqs(140), Box::new(|t, v| losses::cross_reconstruction(t, v[0], v[1]).unwrap())),
        ("ee", seqs(150), Box::new(move |t, v| losses::end_effector(t, v[0], v[1], &topo).unwrap())),
        ("trip", embs(160), Box::new(move |t, v| losses::triplet(t, &quad(v), 1.0).unwrap())),
        ("latent", embs(170), Box::new(move |t, v| losses::latent_consistency(t, &quad(v)).unwrap())),
        (
            "m",
            logits(&[&[3, 3], &[3, 3]], 180),
            Box::new(|t, v| {
                losses::classifier_loss(t, t.softmax(v[0]).unwrap(), t.softmax(v[1]).unwrap(), &[2, 0, 1]).unwrap()
            }),
        ),
        (
            "p",
            logits(&[&[3, 4], &[3, 4]], 190),
            Box::new(|t, v| {
                losses::classifier_loss(t, t.softmax(v[0]).unwrap(), t.softmax(v[1]).unwrap(), &[3, 1, 0]).unwrap()
            }),
        ),
        (
            "qc",
            logits(&[&[4], &[4]], 200),
            Box::new(|t, v| losses::quality_controller(t, t.sigmoid(v[0]), t.sigmoid(v[1])).unwrap()),
        ),
    ];
    let checks: Vec<(bool, String)> = cases
        .iter()
        .map(|(name, inputs, f)| {
            let err = gradient_error(inputs, 1e-3, f);
            (err < 1e-4, format!("{name} {err:.1e}"))
        })
        .collect();
    verdict(2, "gradient suite, relative error < 1e-4 at step 1e-3", &checks)
}

// Criterion 3: bitwise freeze audit over a 2-epoch miniature plan.

fn freeze_audit() -> Verdict {
    let fx = fixture();
    let cfg = TrainConfig {
        batch_size: 4,
        audit_freeze: true,
        ..TrainConfig::default()
    };
    let plan = StagePlan::with_epochs([2; 6]);
    let mut state = TrainState::new(&fx.network, fx.labels.clone(), plan.clone(), &cfg).unwrap();
    let train = fx.corpus.subset(Split::Train);
    let data = TrainData::new(&train, &fx.topology, cfg.data_seed).unwrap();
    let mut records: Vec<StepRecord> = Vec::new();
    {
        let mut observe = |r: &StepRecord| records.push(r.clone());
        Trainer::new(&data, &cfg)
            .with_observer(&mut observe)
            .run_plan(&mut state, &mut |_| Ok(()), &mut |_, _| Ok(()))
            .unwrap();
    }
    let exact = records
        .iter()
        .filter(|r| {
            let changed: BTreeSet<Group> = r.changed.iter().flatten().copied().collect();
            changed == r.kind.groups().iter().copied().collect()
        })
        .count();
    let mut order: Vec<&str> = Vec::new();
    for r in &records {
        if order.last() != Some(&r.stage.as_str()) {
            order.push(&r.stage);
        }
    }
    let expected: Vec<String> = plan.stages.iter().map(|s| s.label()).collect();
    verdict(
        3,
        "freeze/stage audit",
        &[
            (exact == records.len(), format!("{exact}/{} steps changed exactly their groups", records.len())),
            (order == expected, "stages ran in plan order".into()),
        ],
    )
}

// Criteria 4 to 8: desk-scale experiments.

struct Desk {
    corpus: Corpus,
    topology: SkeletonTopology,
    cfg: ExperimentConfig,
}

impl Desk {
    fn new() -> Self {
        let topology = SkeletonTopology::kinect_v2();
        let index = generate_synthetic(4, 6, 3, CORPUS_SEED).unwrap();
        let corpus = Corpus::load(&index, &topology, &PreprocessConfig::default()).unwrap();
        Self {
            corpus,
            topology,
            cfg: ExperimentConfig::desk(),
        }
    }

    fn probes(&self) -> Probes {
        let t = Instant::now();
        let p = Probes::train(&self.corpus.subset(Split::Train), &self.corpus.subset(Split::Eval), &self.cfg.probes)
            .unwrap();
        eprintln!("  probes trained in {:.0}s", t.elapsed().as_secs_f64());
        p
    }

    fn run(&self, alpha: f64, probes: &Probes) -> ExperimentResult {
        let t = Instant::now();
        let mut cfg = self.cfg.clone();
        cfg.train.weights.alpha_emb = alpha;
        let r = run_experiment(&self.corpus, &self.topology, &cfg, probes, None).unwrap();
        eprintln!("  alpha_emb {alpha}: trained and evaluated in {:.0}s", t.elapsed().as_secs_f64());
        r
    }
}

fn utility(r: &ExperimentResult) -> Verdict {
    let before = r.cross_before_paired.unwrap_or(f64::NAN);
    let drop = 1.0 - r.cross_after / before;
    verdict(
        4,
        "desk-scale utility",
        &[
            (
                r.heldout_reconstruction < 0.05,
                format!("held-out reconstruction MSE {:.5} < 0.05", r.heldout_reconstruction),
            ),
            (
                drop >= 0.5,
                format!("cross-reconstruction {before:.5} -> {:.5}, drop {:.0}% >= 50%", r.cross_after, 100.0 * drop),
            ),
        ],
    )
}

fn privacy(r: &ExperimentResult) -> Verdict {
    let b = &r.summary.baseline;
    let mut checks = vec![(
        b.attacker_top1 >= 0.9,
        format!("attacker on originals {:.3} >= 0.9", b.attacker_top1),
    )];
    for rep in &r.summary.reports {
        checks.push((
            rep.reid_top1 <= b.chance + 0.15,
            format!("{} re-id {:.3} <= {:.3}", rep.policy, rep.reid_top1, b.chance + 0.15),
        ));
        checks.push((
            rep.action_top1 >= 0.8,
            format!("{} action {:.3} >= 0.8", rep.policy, rep.action_top1),
        ));
    }
    verdict(5, "desk-scale privacy", &checks)
}

fn separation(r: &ExperimentResult, gamma: f64) -> Verdict {
    let s = &r.silhouettes;
    verdict(
        6,
        "embedding separation",
        &[
            (
                s.motion_by_action > s.motion_by_actor,
                format!("motion by action {:.3} > by actor {:.3}", s.motion_by_action, s.motion_by_actor),
            ),
            (
                s.privacy_by_actor > s.privacy_by_action,
                format!("privacy by actor {:.3} > by action {:.3}", s.privacy_by_actor, s.privacy_by_action),
            ),
            (
                r.heldout_triplet < 0.1 * gamma,
                format!("held-out triplet {:.4} < {:.2}", r.heldout_triplet, 0.1 * gamma),
            ),
        ],
    )
}

fn tradeoff(results: &[(f64, &ExperimentResult)]) -> Verdict {
    let alphas: Vec<f64> = results.iter().map(|(a, _)| *a).collect();
    let policies: Vec<String> = results[0].1.summary.reports.iter().map(|r| r.policy.clone()).collect();
    let checks: Vec<(bool, String)> = policies
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let reid: Vec<f64> = results.iter().map(|(_, r)| r.summary.reports[i].reid_top1).collect();
            let rho = spearman(&alphas, &reid).unwrap();
            let shown: Vec<String> = reid.iter().map(|v| format!("{v:.3}")).collect();
            (rho <= 0.0, format!("{name} re-id [{}] rho {rho:.2} <= 0", shown.join(", ")))
        })
        .collect();
    verdict(7, "trade-off monotonicity over alpha_emb {0, 1, 10, 40}", &checks)
}

fn same_bits(a: &[SkeletonSequence], b: &[SkeletonSequence]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.meta == y.meta && x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits())
        })
}

fn determinism(a: &ExperimentResult, b: &ExperimentResult, probes_equal: bool) -> Verdict {
    let ckpt = checkpoint(&a.state).unwrap() == checkpoint(&b.state).unwrap();
    let outputs = a.outputs.len() == b.outputs.len()
        && a.outputs
            .iter()
            .zip(&b.outputs)
            .all(|(x, y)| x.manifest == y.manifest && same_bits(&x.outputs, &y.outputs));
    let reports = serde_json::to_string(&a.summary).unwrap() == serde_json::to_string(&b.summary).unwrap();
    verdict(
        8,
        "pipeline determinism",
        &[
            (ckpt, "checkpoints bit-identical".into()),
            (outputs, "anonymized corpora bit-identical".into()),
            (reports, "evaluation reports identical".into()),
            (probes_equal, "probes identical".into()),
        ],
    )
}

// Criterion 9: NTU layout round trip and length normalization.

fn ntu_text(frames: usize) -> String {
    let mut text = format!("{frames}\n");
    for f in 0..frames {
        text.push_str("1\n72057594037931101 0 1 1 1 1 0 0.02 -0.1 2\n25\n");
        for j in 0..25 {
            let (x, y, z) = (0.1 * j as f64 - 1.2 + 0.013 * f as f64, 0.7 - 0.05 * j as f64, 3.1 + 1e-3 * f as f64);
            text.push_str(&format!("{x} {y} {z} 250.1 190.7 950.2 520.3 0.1 0.2 0.3 0.9 2\n"));
        }
    }
    text
}

fn conformance() -> Verdict {
    let topo = SkeletonTopology::kinect_v2();
    let path = Path::new("S001C002P003R001A010.skeleton");
    let first = parse_ntu_str(&ntu_text(4), path, &topo).unwrap();
    let second = parse_ntu_str(&to_ntu_string(&first), path, &topo).unwrap();
    let lossless = same_bits(std::slice::from_ref(&first), std::slice::from_ref(&second))
        && to_ntu_string(&second) == to_ntu_string(&first);
    let meta_ok = first.meta
        == SequenceMeta {
            setup: 1,
            camera: 2,
            actor: 3,
            replication: 1,
            action: 10,
        };

    let seq = |frames: usize| {
        let data: Vec<f64> = (0..frames * 25 * 3).map(|i| (i / 75) as f64 + (i % 75) as f64 * 1e-3).collect();
        SkeletonSequence::new(25, data, SequenceMeta::default()).unwrap()
    };
    let long = seq(100);
    let cut = normalize_length(&long, 75).unwrap();
    let cut_ok = cut.frames() == 75 && (0..75).all(|f| cut.frame(f) == long.frame(f));
    let short = seq(50);
    let padded = normalize_length(&short, 75).unwrap();
    let pad_ok = padded.frames() == 75
        && (0..50).all(|f| padded.frame(f) == short.frame(f))
        && (50..75).all(|f| padded.frame(f) == short.frame(49));
    let exact = seq(75);
    let same_ok = normalize_length(&exact, 75).unwrap() == exact;
    verdict(
        9,
        "dataset conformance",
        &[
            (lossless && meta_ok, "NTU parse -> serialize -> parse lossless for XYZ".into()),
            (cut_ok, "100 frames keep frames 1..75".into()),
            (pad_ok, "50 frames repeat frame 50 up to 75".into()),
            (same_ok, "75 frames unchanged".into()),
        ],
    )
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut verdicts = vec![loss_oracles(), gradient_suite(), freeze_audit(), conformance()];

    let desk = Desk::new();
    let probes = desk.probes();
    let main = desk.run(MAIN_ALPHA, &probes);
    verdicts.push(utility(&main));
    verdicts.push(privacy(&main));
    verdicts.push(separation(&main, desk.cfg.train.weights.gamma));

    let others: Vec<(f64, ExperimentResult)> = SWEEP
        .iter()
        .filter(|&&a| a != MAIN_ALPHA)
        .map(|&a| (a, desk.run(a, &probes)))
        .collect();
    let mut grid: Vec<(f64, &ExperimentResult)> = others.iter().map(|(a, r)| (*a, r)).collect();
    grid.push((MAIN_ALPHA, &main));
    grid.sort_by(|x, y| x.0.total_cmp(&y.0));
    verdicts.push(tradeoff(&grid));

    let probes_again = desk.probes();
    let repeat = desk.run(MAIN_ALPHA, &probes_again);
    verdicts.push(determinism(&main, &repeat, probes_again == probes));

    verdicts.sort_by_key(|v| v.id);
    println!();
    println!("acceptance summary ({:.0}s)", started.elapsed().as_secs_f64());
    for v in &verdicts {
        report(v);
    }
    if verdicts.iter().all(|v| v.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
