//! Encoders, decoder, embedding classifiers and quality controller.
//!
//! Sequences enter as `[N, T, J, 3]`: frames occupy the channel axis and the
//! joint and coordinate axes form the spatial plane.

mod config;
mod model;
mod optim;
mod params;

pub use config::{NetworkConfig, COORDS};
pub use model::{
    classifier, classify, classify_batch, decode, decode_batch, decoder, discriminate, discriminate_batch, encode,
    encode_batch, encoder, quality_controller, Bound, EmbeddingPair, Head,
};
pub use optim::{adam_step, AdamConfig};
pub use params::{init_parameters, parameter_layout, AdamMoments, Component, Group, ParameterSet};

use crate::autograd::BatchStats;
use crate::error::Result;

/// Folds observed batch statistics into the running estimates:
/// `running = (1 - momentum) * running + momentum * batch`.
pub fn update_running_stats(params: &mut ParameterSet, stats: &[(String, BatchStats)]) -> Result<()> {
    let momentum = params.config.bn_momentum;
    for (layer, s) in stats {
        for (suffix, values) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let name = format!("{layer}.{suffix}");
            let buf = params
                .buffers
                .get_mut(&name)
                .ok_or_else(|| crate::Error::InvalidConfig(format!("no buffer `{name}`")))?;
            for (r, v) in buf.data_mut().iter_mut().zip(values) {
                *r = (1.0 - momentum) * *r + momentum * v;
            }
        }
    }
    Ok(())
}
