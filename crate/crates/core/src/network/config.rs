use serde::{Deserialize, Serialize};

use crate::dataset::{FRAMES, JOINTS};
use crate::error::{Error, Result};

/// Layer widths and fixed shape constants of every component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub frames: usize,
    pub joints: usize,
    /// Input width followed by the output width of each encoder block.
    pub encoder_channels: Vec<usize>,
    /// Embedding length `L_e`.
    pub embedding_length: usize,
    /// Concatenated embedding width followed by the output width of each decoder block.
    pub decoder_channels: Vec<usize>,
    /// Embedding width followed by the output width of each transposed 1-D block.
    pub classifier_channels: Vec<usize>,
    /// Dense widths after pooling; the last layer maps to the class count.
    pub classifier_dense: Vec<usize>,
    pub qc_channels: Vec<usize>,
    /// Length each quality-controller block resizes to before reflection padding.
    pub qc_lengths: Vec<usize>,
    pub qc_hidden: usize,
    pub y_action: usize,
    pub y_actor: usize,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            frames: FRAMES,
            joints: JOINTS,
            encoder_channels: vec![FRAMES, 12, 24, 32, 256],
            embedding_length: 32,
            decoder_channels: vec![512, 256, 128, 96, FRAMES],
            classifier_channels: vec![256, 128, 256, 512],
            classifier_dense: vec![512, 1024, 512],
            qc_channels: vec![FRAMES, 64, 32, 16, 8],
            qc_lengths: vec![37, 19, 10, 8],
            qc_hidden: 32,
            y_action: 60,
            y_actor: 40,
            leaky_slope: 0.2,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

/// Spatial axes of the skeleton plane: joints and coordinates.
pub const COORDS: usize = 3;

impl NetworkConfig {
    /// Reduced widths that train in seconds per epoch on one CPU core.
    pub fn desk(y_action: usize, y_actor: usize) -> Self {
        Self {
            encoder_channels: vec![FRAMES, 12, 24, 32, 64],
            decoder_channels: vec![128, 64, 32, 24, FRAMES],
            classifier_channels: vec![64, 32, 64, 128],
            classifier_dense: vec![128, 256, 128],
            y_action,
            y_actor,
            ..Self::default()
        }
    }

    pub fn embedding_channels(&self) -> usize {
        *self.encoder_channels.last().unwrap_or(&0)
    }

    /// Joint extent after every encoder block.
    pub fn encoder_joint_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.joints];
        for _ in 1..self.encoder_channels.len() {
            let j = *sizes.last().unwrap();
            sizes.push(j.div_ceil(2));
        }
        sizes
    }

    /// Flattened spatial size of the last encoder feature map.
    pub fn encoder_spatial(&self) -> (usize, usize) {
        (*self.encoder_joint_sizes().last().unwrap(), COORDS)
    }

    /// Joint extent produced by the decoder before cropping.
    pub fn decoder_joints(&self) -> usize {
        let (h, _) = self.encoder_spatial();
        h << (self.decoder_channels.len() - 1)
    }

    /// Length of the quality-controller feature map after its last block.
    pub fn qc_flat(&self) -> usize {
        self.qc_channels.last().unwrap_or(&0) * (self.qc_lengths.last().unwrap_or(&0) + 2)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.frames == 0 || self.joints < 2 {
            return fail(format!("frames {} and joints {} must be positive", self.frames, self.joints));
        }
        if self.encoder_channels.len() < 2 || self.encoder_channels[0] != self.frames {
            return fail(format!("encoder must start at {} channels", self.frames));
        }
        if self.embedding_length == 0 {
            return fail("embedding length must be positive".into());
        }
        let ce = self.embedding_channels();
        if self.decoder_channels.len() < 2 || self.decoder_channels[0] != 2 * ce {
            return fail(format!(
                "decoder input {} must equal twice the embedding width {ce}",
                self.decoder_channels.first().unwrap_or(&0)
            ));
        }
        if *self.decoder_channels.last().unwrap() != self.frames {
            return fail(format!("decoder must end at {} channels", self.frames));
        }
        if self.decoder_joints() < self.joints {
            return fail(format!(
                "decoder produces {} joints, fewer than {}",
                self.decoder_joints(),
                self.joints
            ));
        }
        if self.classifier_channels.len() < 2 || self.classifier_channels[0] != ce {
            return fail(format!("classifier must start at the embedding width {ce}"));
        }
        if self.classifier_dense.is_empty() || self.classifier_dense[0] != *self.classifier_channels.last().unwrap() {
            return fail("classifier dense input must equal its last channel width".into());
        }
        if self.qc_channels.len() < 2 || self.qc_channels[0] != self.frames {
            return fail(format!("quality controller must start at {} channels", self.frames));
        }
        if self.qc_lengths.len() != self.qc_channels.len() - 1 || self.qc_lengths.iter().any(|&l| l < 2) {
            return fail("quality controller needs one resize length of at least 2 per block".into());
        }
        if self.qc_hidden == 0 {
            return fail("quality controller hidden width must be positive".into());
        }
        if self.y_action < 2 || self.y_actor < 2 {
            return fail(format!(
                "need at least 2 action and 2 actor classes, got {} and {}",
                self.y_action, self.y_actor
            ));
        }
        if [&self.encoder_channels, &self.decoder_channels, &self.classifier_channels, &self.classifier_dense, &self.qc_channels]
            .iter()
            .any(|v| v.contains(&0))
        {
            return fail("channel widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return fail("batch norm momentum must be in [0, 1) and eps positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes_resolve() {
        let cfg = NetworkConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.encoder_joint_sizes(), vec![25, 13, 7, 4, 2]);
        assert_eq!(cfg.encoder_spatial(), (2, 3));
        assert_eq!(cfg.decoder_joints(), 32);
        // 8 channels at length 8 + 2 reflected samples.
        assert_eq!(cfg.qc_flat(), 80);
        NetworkConfig::desk(6, 4).validate().unwrap();
    }

    #[test]
    fn decoder_input_must_be_twice_embedding() {
        let mut cfg = NetworkConfig::default();
        cfg.decoder_channels[0] = 256;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }
}
