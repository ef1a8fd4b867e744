//! AdamW with per-group learning rates, step decay and global-norm clipping.

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::config::{param_group, OptimConfig};
use crate::error::{bail, Result};
use crate::math;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Learning-rate multiplier for `epoch` (0-based) under step decay.
pub fn step_decay(config: &OptimConfig, epoch: usize) -> f64 {
    if config.lr_step == 0 {
        return 1.0;
    }
    math::powf(config.lr_gamma, (epoch / config.lr_step) as f64)
}

/// Scales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping. `max_norm = 0` only measures.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let sq: f64 = grads.values().flat_map(|t| t.data()).map(|v| v * v).sum();
    let norm = math::sqrt(sq);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for t in grads.values_mut() {
            t.scale_assign(s);
        }
    }
    norm
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: OptimConfig,
    /// Updates applied so far.
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update at `lr_scale` times each group's base rate. Frozen parameters
    /// and parameters without a gradient are left alone.
    pub fn update(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr_scale: f64) -> Result<()> {
        for (name, g) in grads {
            match store.entry(name) {
                None => bail!(MissingParam, "{name}"),
                Some(p) if p.value().shape() != g.shape() => {
                    bail!(Shape, "gradient of `{name}` is {:?}, parameter is {:?}", g.shape(), p.value().shape())
                }
                Some(_) => {}
            }
            if !g.is_finite() {
                bail!(Validation, "gradient of `{name}` is not finite");
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - math::powf(c.beta1, t);
        let bc2 = 1.0 - math::powf(c.beta2, t);
        for (name, p) in store.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if !p.trainable {
                continue;
            }
            let lr = c.base_lr(param_group(name)) * lr_scale;
            let st = self.moments.entry(String::from(name)).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
            });
            let w = p.value_mut().data_mut();
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for i in 0..w.len() {
                let gi = g.data()[i];
                w[i] -= lr * c.weight_decay * w[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                w[i] -= lr * (m[i] / bc1) / (math::sqrt(v[i] / bc2) + c.eps);
            }
        }
        Ok(())
    }
}
