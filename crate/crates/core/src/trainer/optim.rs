//! Loss, learning-rate schedule, and Adam.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::HeatmapStack;
use crate::numerics::{Scalar, Tensor};
use crate::params::ParamStore;

pub const BCE_CLAMP: f64 = 1e-7;
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(pred: &HeatmapStack, target: &HeatmapStack) -> Result<f64> {
    if pred.data.shape() != target.data.shape() {
        return Err(Error::shape("bce", pred.data.shape(), target.data.shape()));
    }
    let n = pred.data.numel() as f64;
    let total: f64 = pred
        .data
        .data()
        .iter()
        .zip(target.data.data())
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / n)
}

/// Triangular wave: `low` at step 0, `high` half a period later.
pub fn cyclic_lr(step: u64, low: f64, high: f64, period: u64) -> f64 {
    let period = period.max(2);
    let half = period as f64 / 2.0;
    let pos = (step % period) as f64;
    let frac = if pos <= half { pos / half } else { (period as f64 - pos) / half };
    low + (high - low) * frac
}

/// Moments for one parameter. `step` counts the updates it has received.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot<T> {
    pub step: u64,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub slots: BTreeMap<String, AdamSlot<T>>,
}

impl<T> Default for AdamState<T> {
    fn default() -> Self {
        AdamState {
            slots: BTreeMap::new(),
        }
    }
}

/// One Adam update of every parameter that has a gradient. Nothing is
/// modified if any gradient is non-finite.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if let Some(name) = grads.iter().find(|(_, g)| !g.all_finite()).map(|(n, _)| n) {
        return Err(Error::Numeric(format!("gradient of `{name}`")));
    }
    for (name, g) in grads {
        let p = store
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam", p.shape(), g.shape()));
        }
        let slot = state.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
            step: 0,
            m: Tensor::zeros(g.shape()),
            v: Tensor::zeros(g.shape()),
        });
        slot.step += 1;
        let c1 = 1.0 - BETA1.powi(slot.step as i32);
        let c2 = 1.0 - BETA2.powi(slot.step as i32);
        let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            let g = g.to_f64().unwrap_or(0.0);
            let mn = BETA1 * m.to_f64().unwrap_or(0.0) + (1.0 - BETA1) * g;
            let vn = BETA2 * v.to_f64().unwrap_or(0.0) + (1.0 - BETA2) * g * g;
            *m = T::c(mn);
            *v = T::c(vn);
            let upd = lr * (mn / c1) / ((vn / c2).sqrt() + ADAM_EPS);
            *w = T::c(w.to_f64().unwrap_or(0.0) - upd);
        }
    }
    Ok(())
}
