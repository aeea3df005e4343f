use std::collections::BTreeMap;

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ParameterStore;
use crate::tensor::Tensor;

/// AdamW moments, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

/// Linear warmup from 0 to `base_lr`, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.total_steps;
    let warm = cfg.warmup_steps().min(total);
    if total == 0 {
        return 0.0;
    }
    let step = step.min(total);
    if step < warm {
        cfg.base_lr * step as f64 / warm as f64
    } else if total == warm {
        cfg.base_lr
    } else {
        cfg.base_lr * (total - step) as f64 / (total - warm) as f64
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// One decoupled-weight-decay Adam update at learning rate `lr`.
/// Parameters without a gradient entry only decay.
pub fn adamw_step(
    params: &mut ParameterStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (name, p) in params.iter_mut() {
        let shape = p.shape().to_vec();
        let mut data = p.data().to_vec();
        if cfg.weight_decay > 0.0 {
            let keep = 1.0 - lr * cfg.weight_decay;
            data.iter_mut().for_each(|x| *x *= keep);
        }
        if let Some(g) = grads.get(name) {
            if g.numel() != data.len() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("gradient for {name} has {} values, parameter {}", g.numel(), data.len()),
                ));
            }
            let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; data.len()]);
            let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; data.len()]);
            for i in 0..data.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
            }
        }
        *p = Tensor::new(shape, data)?;
    }
    Ok(())
}
