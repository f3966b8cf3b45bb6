use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::NetworkConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Component {
    MotionEncoder,
    PrivacyEncoder,
    Decoder,
    MotionClassifier,
    PrivacyClassifier,
    QualityController,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::MotionEncoder,
        Component::PrivacyEncoder,
        Component::Decoder,
        Component::MotionClassifier,
        Component::PrivacyClassifier,
        Component::QualityController,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Component::MotionEncoder => "enc_m",
            Component::PrivacyEncoder => "enc_p",
            Component::Decoder => "dec",
            Component::MotionClassifier => "cls_m",
            Component::PrivacyClassifier => "cls_p",
            Component::QualityController => "qc",
        }
    }

    pub fn group(self) -> Group {
        match self {
            Component::MotionEncoder | Component::PrivacyEncoder | Component::Decoder => Group::Autoencoder,
            Component::MotionClassifier => Group::Motion,
            Component::PrivacyClassifier => Group::Privacy,
            Component::QualityController => Group::Quality,
        }
    }

    pub fn of_name(name: &str) -> Option<Component> {
        let prefix = name.split('.').next()?;
        Component::ALL.into_iter().find(|c| c.prefix() == prefix)
    }
}

/// Parameter groups that are optimized and frozen together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    /// Both encoders and the decoder.
    Autoencoder,
    /// Action classifier `M`.
    Motion,
    /// Actor classifier `P`.
    Privacy,
    /// Real/fake quality controller `Q`.
    Quality,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Autoencoder, Group::Motion, Group::Privacy, Group::Quality];

    pub fn of_name(name: &str) -> Option<Group> {
        Component::of_name(name).map(Component::group)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Autoencoder => "autoencoder",
            Group::Motion => "motion_classifier",
            Group::Privacy => "privacy_classifier",
            Group::Quality => "quality_controller",
        })
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Every named tensor of the model plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    pub config: NetworkConfig,
    /// Trainable tensors keyed `component.layer.kind`.
    pub params: BTreeMap<String, Tensor>,
    /// Non-trainable state such as batch-norm running statistics.
    pub buffers: BTreeMap<String, Tensor>,
    pub moments: BTreeMap<String, AdamMoments>,
    /// Optimizer steps taken per group.
    pub steps: BTreeMap<Group, u64>,
}

impl ParameterSet {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| Error::InvalidConfig(format!("no parameter `{name}`")))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn group_parameter_count(&self, group: Group) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| Group::of_name(n) == Some(group))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Copies of every parameter and buffer of a group, for freeze audits.
    pub fn snapshot(&self, group: Group) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .chain(&self.buffers)
            .filter(|(n, _)| Group::of_name(n) == Some(group))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }

    /// Whether the group's parameters and buffers equal `snap` bitwise.
    pub fn matches_snapshot(&self, group: Group, snap: &BTreeMap<String, Tensor>) -> bool {
        let now = self.snapshot(group);
        now.len() == snap.len()
            && now
                .iter()
                .zip(snap)
                .all(|((a, ta), (b, tb))| a == b && ta.bitwise_eq(tb))
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for name in self.params.keys().chain(self.buffers.keys()) {
            if Group::of_name(name).is_none() {
                return Err(Error::InvalidConfig(format!("`{name}` belongs to no component group")));
            }
        }
        Ok(())
    }
}

struct Init<'a> {
    rng: ChaCha8Rng,
    params: &'a mut BTreeMap<String, Tensor>,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.params.insert(name, t);
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64) {
        self.params.insert(name, Tensor::full(shape, value));
    }
}

/// Names and shapes of every tensor of the model, with the fan-in used to scale
/// its initialization (`None` for batch-norm affine terms).
pub fn parameter_layout(cfg: &NetworkConfig) -> Vec<(String, Vec<usize>, Option<usize>)> {
    let mut out = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, fan_in: Option<usize>| out.push((name, shape, fan_in));
    let (sh, sw) = cfg.encoder_spatial();
    let le = cfg.embedding_length;
    for comp in [Component::MotionEncoder, Component::PrivacyEncoder] {
        let p = comp.prefix();
        for (i, w) in cfg.encoder_channels.windows(2).enumerate() {
            add(format!("{p}.conv{i}.weight"), vec![w[1], w[0], 3, 3], Some(w[0] * 9));
            add(format!("{p}.conv{i}.bias"), vec![w[1]], Some(w[0] * 9));
        }
        add(format!("{p}.proj.weight"), vec![le, sh * sw], Some(sh * sw));
        add(format!("{p}.proj.bias"), vec![le], Some(sh * sw));
    }
    add("dec.proj.weight".into(), vec![sh * sw, le], Some(le));
    add("dec.proj.bias".into(), vec![sh * sw], Some(le));
    for (i, w) in cfg.decoder_channels.windows(2).enumerate() {
        add(format!("dec.deconv{i}.weight"), vec![w[0], w[1], 3, 3], Some(w[0] * 9));
        add(format!("dec.deconv{i}.bias"), vec![w[1]], Some(w[0] * 9));
    }
    for (comp, y) in [
        (Component::MotionClassifier, cfg.y_action),
        (Component::PrivacyClassifier, cfg.y_actor),
    ] {
        let p = comp.prefix();
        for (i, w) in cfg.classifier_channels.windows(2).enumerate() {
            add(format!("{p}.deconv{i}.weight"), vec![w[0], w[1], 1, 3], Some(w[0] * 3));
            add(format!("{p}.bn{i}.gamma"), vec![w[1]], None);
            add(format!("{p}.bn{i}.beta"), vec![w[1]], None);
        }
        let mut widths = cfg.classifier_dense.clone();
        widths.push(y);
        for (i, w) in widths.windows(2).enumerate() {
            add(format!("{p}.fc{i}.weight"), vec![w[1], w[0]], Some(w[0]));
            add(format!("{p}.fc{i}.bias"), vec![w[1]], Some(w[0]));
        }
    }
    for (i, w) in cfg.qc_channels.windows(2).enumerate() {
        add(format!("qc.deconv{i}.weight"), vec![w[0], w[1], 1, 3], Some(w[0] * 3));
        add(format!("qc.deconv{i}.bias"), vec![w[1]], Some(w[0] * 3));
    }
    add("qc.fc0.weight".into(), vec![cfg.qc_hidden, cfg.qc_flat()], Some(cfg.qc_flat()));
    add("qc.fc0.bias".into(), vec![cfg.qc_hidden], Some(cfg.qc_flat()));
    add("qc.fc1.weight".into(), vec![1, cfg.qc_hidden], Some(cfg.qc_hidden));
    add("qc.fc1.bias".into(), vec![1], Some(cfg.qc_hidden));
    out
}

/// Uniform `±1/sqrt(fan_in)` weights drawn in name order from a seeded stream;
/// batch-norm scale 1, shift 0, running mean 0 and variance 1.
pub fn init_parameters(config: &NetworkConfig, rng_seed: u64) -> Result<ParameterSet> {
    config.validate()?;
    let mut params = BTreeMap::new();
    let mut layout = parameter_layout(config);
    layout.sort_by(|a, b| a.0.cmp(&b.0));
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(rng_seed),
        params: &mut params,
    };
    let mut buffers = BTreeMap::new();
    for (name, shape, fan_in) in layout {
        match fan_in {
            Some(f) => init.uniform(name, &shape, f),
            None if name.ends_with(".gamma") => {
                let stem = name.trim_end_matches(".gamma");
                buffers.insert(format!("{stem}.running_mean"), Tensor::zeros(&shape));
                buffers.insert(format!("{stem}.running_var"), Tensor::full(&shape, 1.0));
                init.constant(name, &shape, 1.0);
            }
            None => init.constant(name, &shape, 0.0),
        }
    }
    let set = ParameterSet {
        config: config.clone(),
        params,
        buffers,
        moments: BTreeMap::new(),
        steps: BTreeMap::new(),
    };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initialization_is_deterministic() {
        let cfg = NetworkConfig::desk(6, 4);
        let a = init_parameters(&cfg, 11).unwrap();
        let b = init_parameters(&cfg, 11).unwrap();
        assert_eq!(a, b);
        let c = init_parameters(&cfg, 12).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn every_tensor_has_a_group() {
        let p = init_parameters(&NetworkConfig::desk(6, 4), 0).unwrap();
        let total: usize = Group::ALL.iter().map(|&g| p.group_parameter_count(g)).sum();
        assert_eq!(total, p.parameter_count());
        for g in Group::ALL {
            assert!(p.group_parameter_count(g) > 0);
        }
    }

    #[test]
    fn default_parameter_count_matches_layer_algebra() {
        let p = init_parameters(&NetworkConfig::default(), 0).unwrap();
        let conv = |i: usize, o: usize, k: usize| i * o * k + o;
        let encoder = conv(75, 12, 9) + conv(12, 24, 9) + conv(24, 32, 9) + conv(32, 256, 9) + (6 * 32 + 32);
        let decoder = (32 * 6 + 6) + conv(512, 256, 9) + conv(256, 128, 9) + conv(128, 96, 9) + conv(96, 75, 9);
        let cls_body = (256 * 128 * 3 + 2 * 128) + (128 * 256 * 3 + 2 * 256) + (256 * 512 * 3 + 2 * 512);
        let dense = |y: usize| (512 * 1024 + 1024) + (1024 * 512 + 512) + (512 * y + y);
        let qc = conv(75, 64, 3) + conv(64, 32, 3) + conv(32, 16, 3) + conv(16, 8, 3) + (80 * 32 + 32) + (32 + 1);
        let expected = 2 * encoder + decoder + (cls_body + dense(60)) + (cls_body + dense(40)) + qc;
        assert_eq!(p.parameter_count(), expected);
        assert_eq!(expected, 5_194_430);
    }
}
