use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::{AdamMoments, Group, ParameterSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `group`.
/// Parameters without a gradient entry are treated as having zero gradient.
pub fn adam_step(params: &mut ParameterSet, group: Group, grads: &BTreeMap<String, Tensor>, cfg: &AdamConfig) -> Result<()> {
    if let Some(name) = grads.keys().find(|n| Group::of_name(n) != Some(group)) {
        return Err(Error::InvalidConfig(format!("gradient for `{name}` outside group {group}")));
    }
    let step = params.steps.entry(group).or_insert(0);
    *step += 1;
    let t = *step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let names: Vec<String> = params
        .params
        .keys()
        .filter(|n| Group::of_name(n) == Some(group))
        .cloned()
        .collect();
    for name in names {
        let value = params.params.get_mut(&name).expect("listed above");
        let len = value.len();
        let mom = params.moments.entry(name.clone()).or_insert_with(|| AdamMoments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        });
        let grad = grads.get(&name);
        if let Some(g) = grad {
            if g.shape() != value.shape() {
                return Err(Error::shape(format!("gradient of `{name}` has shape {:?}", g.shape())));
            }
        }
        for (k, w) in value.data_mut().iter_mut().enumerate() {
            let g = grad.map_or(0.0, |g| g.data()[k]);
            mom.m[k] = cfg.beta1 * mom.m[k] + (1.0 - cfg.beta1) * g;
            mom.v[k] = cfg.beta2 * mom.v[k] + (1.0 - cfg.beta2) * g * g;
            let mh = mom.m[k] / c1;
            let vh = mom.v[k] / c2;
            *w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
