use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};

use crate::autograd::{BatchStats, Tape, Var};
use crate::dataset::SkeletonSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::{NetworkConfig, COORDS};
use super::params::{Component, Group, ParameterSet};

/// Parameters of a [`ParameterSet`] placed on a tape. Groups listed as
/// trainable become gradient leaves; every other group is bound as constants.
pub struct Bound<'a> {
    pub tape: &'a Tape,
    params: &'a ParameterSet,
    vars: BTreeMap<String, Var>,
    trainable: BTreeSet<Group>,
    bn_stats: RefCell<Vec<(String, BatchStats)>>,
}

impl<'a> Bound<'a> {
    pub fn new(tape: &'a Tape, params: &'a ParameterSet, trainable: &[Group]) -> Self {
        let trainable: BTreeSet<Group> = trainable.iter().copied().collect();
        let vars = params
            .params
            .iter()
            .map(|(name, t)| {
                let train = Group::of_name(name).is_some_and(|g| trainable.contains(&g));
                let v = if train { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        Self {
            tape,
            params,
            vars,
            trainable,
            bn_stats: RefCell::new(Vec::new()),
        }
    }

    /// Everything bound as constants, with batch norm in inference mode.
    pub fn frozen(tape: &'a Tape, params: &'a ParameterSet) -> Self {
        Self::new(tape, params, &[])
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.params.config
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("no parameter `{name}`")))
    }

    /// Trainable leaves of a group, by name.
    pub fn group_vars(&self, group: Group) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(n, _)| Group::of_name(n) == Some(group))
            .map(|(n, v)| (n.clone(), *v))
            .collect()
    }

    pub fn is_trainable(&self, group: Group) -> bool {
        self.trainable.contains(&group)
    }

    /// Batch statistics observed by training-mode batch norms, by layer name.
    pub fn take_bn_stats(&self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.bn_stats.borrow_mut())
    }

    fn p(&self, comp: Component, rest: &str) -> Result<Var> {
        self.var(&format!("{}.{rest}", comp.prefix()))
    }
}

/// `ConvTranspose` with stride 1 and size-preserving padding, expressed as a
/// convolution by the flipped, transposed kernel. Input `[N, C, H, W]`,
/// kernel `[C, O, kh, kw]`.
fn conv_transpose_same(tape: &Tape, x: Var, w: Var) -> Result<Var> {
    let k = tape.flip_transpose_kernel(w)?;
    let shape = tape.shape(k);
    tape.conv2d(x, k, shape[2] / 2, shape[3] / 2)
}

/// `[N, T, J, 3]` sequences to a `[N, C_e, L_e]` embedding.
pub fn encoder(b: &Bound, comp: Component, x: Var) -> Result<Var> {
    let cfg = b.config();
    let t = b.tape;
    let shape = t.shape(x);
    if shape.len() != 4 || shape[1..] != [cfg.frames, cfg.joints, COORDS] {
        return Err(Error::shape(format!(
            "encoder expects [N, {}, {}, {COORDS}], got {shape:?}",
            cfg.frames, cfg.joints
        )));
    }
    let n = shape[0];
    let mut h = x;
    for i in 0..cfg.encoder_channels.len() - 1 {
        h = t.reflect_pad(h, 1, 1)?;
        h = t.conv2d(h, b.p(comp, &format!("conv{i}.weight"))?, 0, 0)?;
        h = t.channel_bias(h, b.p(comp, &format!("conv{i}.bias"))?)?;
        h = t.leaky_relu(h, cfg.leaky_slope);
        h = t.max_pool(h, 2, 1)?;
    }
    let ce = cfg.embedding_channels();
    let (sh, sw) = cfg.encoder_spatial();
    let flat = t.reshape(h, &[n * ce, sh * sw])?;
    let e = t.linear(flat, b.p(comp, "proj.weight")?, b.p(comp, "proj.bias")?)?;
    t.reshape(e, &[n, ce, cfg.embedding_length])
}

/// Two `[N, C_e, L_e]` embeddings to `[N, T, J, 3]` sequences.
pub fn decoder(b: &Bound, motion: Var, privacy: Var) -> Result<Var> {
    let cfg = b.config();
    let t = b.tape;
    let want = [cfg.embedding_channels(), cfg.embedding_length];
    let (sm, sp) = (t.shape(motion), t.shape(privacy));
    if sm.len() != 3 || sm[1..] != want || sp != sm {
        return Err(Error::shape(format!("decoder expects two [N, {want:?}] embeddings, got {sm:?} and {sp:?}")));
    }
    let n = sm[0];
    let c2 = 2 * want[0];
    let z = t.concat(motion, privacy, 1)?;
    let z = t.reshape(z, &[n * c2, want[1]])?;
    let z = t.linear(z, b.var("dec.proj.weight")?, b.var("dec.proj.bias")?)?;
    let (sh, sw) = cfg.encoder_spatial();
    let mut h = t.reshape(z, &[n, c2, sh, sw])?;
    let blocks = cfg.decoder_channels.len() - 1;
    for i in 0..blocks {
        let rows = t.shape(h)[2];
        h = t.resize_nearest(h, rows * 2, sw)?;
        h = conv_transpose_same(t, h, b.var(&format!("dec.deconv{i}.weight"))?)?;
        h = t.channel_bias(h, b.var(&format!("dec.deconv{i}.bias"))?)?;
        if i + 1 < blocks {
            h = t.leaky_relu(h, cfg.leaky_slope);
        }
    }
    t.slice(h, 2, 0, cfg.joints)
}

/// A `[N, C_e, L_e]` embedding to `[N, Y]` class probabilities.
pub fn classifier(b: &Bound, comp: Component, emb: Var) -> Result<Var> {
    let cfg = b.config();
    let t = b.tape;
    let shape = t.shape(emb);
    let want = [cfg.embedding_channels(), cfg.embedding_length];
    if shape.len() != 3 || shape[1..] != want {
        return Err(Error::shape(format!("classifier expects [N, {want:?}], got {shape:?}")));
    }
    let (n, l) = (shape[0], shape[2]);
    let batch_stats = b.is_trainable(comp.group());
    let mut h = emb;
    for (i, w) in cfg.classifier_channels.windows(2).enumerate() {
        let x4 = t.reshape(h, &[n, w[0], 1, l])?;
        let y = conv_transpose_same(t, x4, b.p(comp, &format!("deconv{i}.weight"))?)?;
        let y = t.reshape(y, &[n, w[1], l])?;
        let layer = format!("{}.bn{i}", comp.prefix());
        let (gamma, beta) = (b.p(comp, &format!("bn{i}.gamma"))?, b.p(comp, &format!("bn{i}.beta"))?);
        let y = if batch_stats && n > 1 {
            let (y, stats) = t.batch_norm(y, gamma, beta, None, cfg.bn_eps)?;
            if let Some(s) = stats {
                b.bn_stats.borrow_mut().push((layer, s));
            }
            y
        } else {
            let rm = b.params.get(&format!("{layer}.running_mean"))?;
            let rv = b.params.get(&format!("{layer}.running_var"))?;
            t.batch_norm(y, gamma, beta, Some((rm.data(), rv.data())), cfg.bn_eps)?.0
        };
        h = t.relu(y);
    }
    let pooled = t.scale(t.sum_axes(h, &[2])?, 1.0 / l as f64);
    let mut z = pooled;
    let layers = cfg.classifier_dense.len();
    for i in 0..layers {
        z = t.linear(z, b.p(comp, &format!("fc{i}.weight"))?, b.p(comp, &format!("fc{i}.bias"))?)?;
        if i + 1 < layers {
            z = t.relu(z);
        }
    }
    t.softmax(z)
}

/// `[N, T, J, 3]` sequences to `[N]` probabilities of being real recordings.
pub fn quality_controller(b: &Bound, x: Var) -> Result<Var> {
    let cfg = b.config();
    let t = b.tape;
    let shape = t.shape(x);
    if shape.len() != 4 || shape[1..] != [cfg.frames, cfg.joints, COORDS] {
        return Err(Error::shape(format!(
            "quality controller expects [N, {}, {}, {COORDS}], got {shape:?}",
            cfg.frames, cfg.joints
        )));
    }
    let n = shape[0];
    let mut h = t.reshape(x, &[n, cfg.frames, 1, cfg.joints * COORDS])?;
    for (i, &len) in cfg.qc_lengths.iter().enumerate() {
        h = conv_transpose_same(t, h, b.var(&format!("qc.deconv{i}.weight"))?)?;
        h = t.channel_bias(h, b.var(&format!("qc.deconv{i}.bias"))?)?;
        h = t.leaky_relu(h, cfg.leaky_slope);
        h = t.resize_nearest(h, 1, len)?;
        h = t.reflect_pad(h, 0, 1)?;
    }
    let flat = t.reshape(h, &[n, cfg.qc_flat()])?;
    let z = t.linear(flat, b.var("qc.fc0.weight")?, b.var("qc.fc0.bias")?)?;
    let z = t.relu(z);
    let z = t.linear(z, b.var("qc.fc1.weight")?, b.var("qc.fc1.bias")?)?;
    let z = t.sigmoid(z);
    t.reshape(z, &[n])
}

/// Motion and privacy embeddings, each `[C_e, L_e]` per sequence or
/// `[N, C_e, L_e]` per batch.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPair {
    pub motion: Tensor,
    pub privacy: Tensor,
}

impl EmbeddingPair {
    pub fn is_finite(&self) -> bool {
        self.motion.is_finite() && self.privacy.is_finite()
    }
}

/// Which embedding classifier to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Motion,
    Privacy,
}

impl Head {
    pub fn component(self) -> Component {
        match self {
            Head::Motion => Component::MotionClassifier,
            Head::Privacy => Component::PrivacyClassifier,
        }
    }
}

fn run<T>(params: &ParameterSet, f: impl FnOnce(&Bound) -> Result<T>) -> Result<T> {
    let tape = Tape::new();
    let b = Bound::frozen(&tape, params);
    f(&b)
}

/// Embeds a `[N, T, J, 3]` batch with both encoders.
pub fn encode_batch(params: &ParameterSet, batch: &Tensor) -> Result<EmbeddingPair> {
    run(params, |b| {
        let x = b.tape.constant(batch.clone());
        let m = encoder(b, Component::MotionEncoder, x)?;
        let p = encoder(b, Component::PrivacyEncoder, x)?;
        Ok(EmbeddingPair {
            motion: (*b.tape.value(m)).clone(),
            privacy: (*b.tape.value(p)).clone(),
        })
    })
}

/// Decodes `[N, C_e, L_e]` embeddings to a `[N, T, J, 3]` batch.
pub fn decode_batch(params: &ParameterSet, motion: &Tensor, privacy: &Tensor) -> Result<Tensor> {
    run(params, |b| {
        let m = b.tape.constant(motion.clone());
        let p = b.tape.constant(privacy.clone());
        let y = decoder(b, m, p)?;
        Ok((*b.tape.value(y)).clone())
    })
}

/// Class probabilities `[N, Y]` for a `[N, C_e, L_e]` batch.
pub fn classify_batch(params: &ParameterSet, head: Head, emb: &Tensor) -> Result<Tensor> {
    run(params, |b| {
        let e = b.tape.constant(emb.clone());
        let y = classifier(b, head.component(), e)?;
        Ok((*b.tape.value(y)).clone())
    })
}

/// Real-recording scores `[N]` for a `[N, T, J, 3]` batch.
pub fn discriminate_batch(params: &ParameterSet, batch: &Tensor) -> Result<Tensor> {
    run(params, |b| {
        let x = b.tape.constant(batch.clone());
        let y = quality_controller(b, x)?;
        Ok((*b.tape.value(y)).clone())
    })
}

fn single(seq: &SkeletonSequence, cfg: &NetworkConfig) -> Result<Tensor> {
    seq.validate_normalized(cfg.joints, cfg.frames)?;
    let t = seq.to_tensor();
    let shape = [1, cfg.frames, cfg.joints, COORDS];
    t.reshape(&shape)
}

fn drop_batch(t: Tensor) -> Result<Tensor> {
    let shape = t.shape()[1..].to_vec();
    t.reshape(&shape)
}

/// Embeddings of one normalized sequence, each `[C_e, L_e]`.
pub fn encode(params: &ParameterSet, seq: &SkeletonSequence) -> Result<EmbeddingPair> {
    let e = encode_batch(params, &single(seq, &params.config)?)?;
    Ok(EmbeddingPair {
        motion: drop_batch(e.motion)?,
        privacy: drop_batch(e.privacy)?,
    })
}

/// Decodes one `[C_e, L_e]` embedding pair into a sequence with unset metadata.
pub fn decode(params: &ParameterSet, motion: &Tensor, privacy: &Tensor) -> Result<SkeletonSequence> {
    let add_batch = |t: &Tensor| {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.clone().reshape(&shape)
    };
    let out = decode_batch(params, &add_batch(motion)?, &add_batch(privacy)?)?;
    SkeletonSequence::from_tensor(&drop_batch(out)?, Default::default())
}

/// Class probabilities for one `[C_e, L_e]` embedding.
pub fn classify(params: &ParameterSet, head: Head, emb: &Tensor) -> Result<Vec<f64>> {
    let mut shape = vec![1];
    shape.extend_from_slice(emb.shape());
    Ok(classify_batch(params, head, &emb.clone().reshape(&shape)?)?.into_data())
}

/// Probability that one sequence is a real recording.
pub fn discriminate(params: &ParameterSet, seq: &SkeletonSequence) -> Result<f64> {
    Ok(discriminate_batch(params, &single(seq, &params.config)?)?.data()[0])
}
