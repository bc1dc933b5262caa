//! AdamW with decoupled weight decay.

use ndarray::{Array2, Zip};

use crate::model::{Grads, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config("AdamW betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "AdamW needs eps > 0 and weight_decay ≥ 0".into(),
            ));
        }
        Ok(())
    }
}

/// First and second moments per parameter, created on first update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    moments: Vec<Option<(Array2<f64>, Array2<f64>)>>,
}

/// One update of every trainable parameter.
///
/// `p ← p·(1 − lr·λ)`, then `p ← p − lr·m̂/(√v̂ + ε)` with bias-corrected moments.
/// A trainable parameter without a gradient slot is updated with a zero
/// gradient. Nothing is modified when any gradient is non-finite.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &Grads,
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> Result<()> {
    for (id, g) in grads.iter() {
        let p = params.get(id);
        if p.trainable && g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                param: p.name.clone(),
            });
        }
    }
    if state.moments.len() < params.len() {
        state.moments.resize(params.len(), None);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (id, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let shape = p.value.raw_dim();
        let (m, v) = state.moments[id.index()]
            .get_or_insert_with(|| (Array2::zeros(shape), Array2::zeros(shape)));
        let g = grads.get(id);
        if decay != 1.0 {
            p.value.mapv_inplace(|x| x * decay);
        }
        let (b1, b2, lr, eps) = (cfg.beta1, cfg.beta2, cfg.lr, cfg.eps);
        let update = |w: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
        };
        match g {
            Some(g) => Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| update(w, m, v, g)),
            None => Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .for_each(|w, m, v| update(w, m, v, 0.0)),
        }
    }
    Ok(())
}
