use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            poly_power: 0.9,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr >= 0.0 && (0.0..1.0).contains(&self.momentum) && self.weight_decay >= 0.0 && self.poly_power > 0.0;
        if !ok || !self.base_lr.is_finite() || !self.weight_decay.is_finite() {
            return Err(Error::ConfigInvalid(
                "optimizer: need base_lr >= 0, momentum in [0, 1), weight_decay >= 0, poly_power > 0".into(),
            ));
        }
        Ok(())
    }
}

/// `base_lr · (1 − step/max_steps)^power`; steps past the end clamp to 0.
pub fn poly_lr(step: usize, max_steps: usize, base_lr: f64, power: f64) -> f64 {
    if max_steps == 0 {
        return base_lr;
    }
    let frac = 1.0 - (step.min(max_steps) as f64 / max_steps as f64);
    base_lr * frac.powf(power)
}

/// SGD with momentum and decoupled decay flags:
/// `buf ← m·buf + (g + wd·p)`, `p ← p − lr·buf`, where `wd` is zero for
/// parameters whose `decay` flag is off. Parameters without a gradient are
/// left untouched.
pub fn sgd_step(store: &mut ParamStore, grads: &Gradients, lr: f64, cfg: &OptimizerConfig) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let Some(g) = grads.param(id) else {
            continue;
        };
        let p = store.param_mut(id);
        if g.len() != p.value.numel() {
            return Err(Error::shape("sgd_step", format!("{}: {} grads for {} values", p.name, g.len(), p.value.numel())));
        }
        let wd = if p.decay { cfg.weight_decay as f32 } else { 0.0 };
        let (m, lr) = (cfg.momentum as f32, lr as f32);
        let buf = p.momentum_buffer.get_or_insert_with(|| vec![0.0; g.len()]);
        for ((b, v), &gi) in buf.iter_mut().zip(p.value.data_mut()).zip(g) {
            *b = m * *b + gi + wd * *v;
            *v -= lr * *b;
        }
    }
    Ok(())
}
