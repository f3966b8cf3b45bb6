//! Compact temporal-convolutional sequence classifier used as the offline
//! re-identification attacker and as the action-utility probe. It shares no
//! parameters or code paths with the retargeting model.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::dataset::SkeletonSequence;
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::tensor::Tensor;

/// Which label a classifier predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Actor,
    Action,
}

impl Target {
    pub fn label_of(self, seq: &SkeletonSequence) -> u32 {
        match self {
            Target::Actor => seq.meta.actor,
            Target::Action => seq.meta.action,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    /// Output channels of the three temporal convolutions.
    pub channels: [usize; 3],
    pub kernel: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Training sequences are rotated about the vertical axis by a uniform
    /// angle in `[-yaw, yaw]` degrees.
    pub yaw_augment_deg: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            channels: [64, 64, 128],
            kernel: 5,
            epochs: 200,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
            yaw_augment_deg: 45.0,
        }
    }
}

/// A trained classifier over `[T, J, 3]` sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceClassifier {
    pub target: Target,
    /// Label id of each output class, ascending.
    pub classes: Vec<u32>,
    pub config: ClassifierConfig,
    params: BTreeMap<String, Tensor>,
    joints: usize,
}

/// Rotates a sequence about the vertical (y) axis through the origin.
pub fn rotate_yaw(seq: &SkeletonSequence, radians: f64) -> SkeletonSequence {
    let (s, c) = radians.sin_cos();
    let mut out = seq.clone();
    for p in out.data_mut().chunks_mut(3) {
        let (x, z) = (p[0], p[2]);
        p[0] = c * x + s * z;
        p[2] = -s * x + c * z;
    }
    out
}

fn init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

impl SequenceClassifier {
    fn new(target: Target, classes: Vec<u32>, joints: usize, config: ClassifierConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = BTreeMap::new();
        let mut c_in = joints * 3;
        for (i, &c) in config.channels.iter().enumerate() {
            let fan = c_in * config.kernel;
            params.insert(format!("conv{i}.weight"), init(&mut rng, &[c, c_in, 1, config.kernel], fan));
            params.insert(format!("conv{i}.bias"), init(&mut rng, &[c], fan));
            c_in = c;
        }
        params.insert("fc.weight".into(), init(&mut rng, &[classes.len(), c_in], c_in));
        params.insert("fc.bias".into(), init(&mut rng, &[classes.len()], c_in));
        Self {
            target,
            classes,
            config,
            params,
            joints,
        }
    }

    fn forward(&self, tape: &Tape, vars: &BTreeMap<String, Var>, batch: &Tensor) -> Result<Var> {
        let [n, t, j, c] = *batch.shape() else {
            return Err(Error::shape(format!("classifier input {:?}", batch.shape())));
        };
        if j != self.joints || c != 3 {
            return Err(Error::shape(format!("classifier built for {} joints, got {j}", self.joints)));
        }
        let x = tape.constant(batch.clone());
        let x = tape.reshape(x, &[n, t, j * 3])?;
        let mut h = tape.reshape(tape.permute(x, &[0, 2, 1])?, &[n, j * 3, 1, t])?;
        let pad = self.config.kernel / 2;
        for i in 0..self.config.channels.len() {
            h = tape.conv2d(h, vars[&format!("conv{i}.weight")], 0, pad)?;
            h = tape.relu(tape.channel_bias(h, vars[&format!("conv{i}.bias")])?);
            if i + 1 < self.config.channels.len() {
                h = tape.max_pool(h, 1, 2)?;
            }
        }
        let shape = tape.shape(h);
        let len = shape[3];
        let pooled = tape.scale(tape.sum_axes(h, &[2, 3])?, 1.0 / len as f64);
        let logits = tape.linear(pooled, vars["fc.weight"], vars["fc.bias"])?;
        tape.softmax(logits)
    }

    /// Class probabilities `[N, classes]`.
    pub fn predict(&self, seqs: &[&SkeletonSequence]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(64) {
            let tape = Tape::new();
            let vars = self.params.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect();
            let batch = crate::dataset::batch_of(chunk.iter().copied())?;
            let y = self.forward(&tape, &vars, &batch)?;
            rows.push((*tape.value(y)).clone());
        }
        if rows.is_empty() {
            return Ok(Tensor::zeros(&[0, self.classes.len()]));
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        Tensor::concat_rows(&refs)
    }

    /// Class position of a label id.
    pub fn class_of(&self, label: u32) -> Result<usize> {
        self.classes
            .binary_search(&label)
            .map_err(|_| Error::LabelMismatch(format!("label {label} is not among the classifier's classes")))
    }
}

/// Trains a classifier for `target` on `train`.
pub fn train_classifier(train: &[SkeletonSequence], target: Target, config: &ClassifierConfig) -> Result<SequenceClassifier> {
    let mut classes: Vec<u32> = train.iter().map(|s| target.label_of(s)).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} distinct {target:?} labels, need at least 2",
            classes.len()
        )));
    }
    let joints = train[0].joints();
    let mut model = SequenceClassifier::new(target, classes, joints, config.clone());
    let labels = train
        .iter()
        .map(|s| model.class_of(target.label_of(s)))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xA5A5_5A5A);
    let mut moments: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut step = 0i32;
    let yaw = config.yaw_augment_deg.to_radians();
    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for idx in order.chunks(config.batch_size.max(1)) {
            let augmented: Vec<SkeletonSequence> = idx
                .iter()
                .map(|&i| {
                    let a = if yaw > 0.0 { rng.random_range(-yaw..=yaw) } else { 0.0 };
                    rotate_yaw(&train[i], a)
                })
                .collect();
            let batch = crate::dataset::batch_of(&augmented)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let tape = Tape::new();
            let vars: BTreeMap<String, Var> =
                model.params.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect();
            let probs = model.forward(&tape, &vars, &batch)?;
            let loss = cross_entropy(&tape, probs, &y)?;
            if !tape.value(loss).item().is_finite() {
                return Err(Error::Divergence {
                    stage: format!("{target:?} classifier"),
                    step: step as u64,
                    term: "cross_entropy".into(),
                });
            }
            let grads = tape.backward(loss)?;
            step += 1;
            let (c1, c2) = (1.0 - b1.powi(step), 1.0 - b2.powi(step));
            for (name, v) in &vars {
                let Some(g) = grads.get(*v) else { continue };
                let w = model.params.get_mut(name).expect("same keys");
                let (m, s) = moments
                    .entry(name.clone())
                    .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                for (k, wk) in w.data_mut().iter_mut().enumerate() {
                    let gk = g.data()[k];
                    m[k] = b1 * m[k] + (1.0 - b1) * gk;
                    s[k] = b2 * s[k] + (1.0 - b2) * gk * gk;
                    *wk -= config.lr * (m[k] / c1) / ((s[k] / c2).sqrt() + eps);
                }
            }
        }
    }
    Ok(model)
}
