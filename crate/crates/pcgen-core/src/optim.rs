//! First-order optimization: Adam, cosine learning-rate annealing, and
//! global-norm gradient clipping.
//!
//! The optimizer is storage-agnostic: it updates named `&mut [f32]` slots and
//! keeps per-name moment state internally, so the parameter container decides
//! layout and freezing policy. Update arithmetic runs in f64 per element and
//! stores back f32.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f32, lr_min: f32) -> Result<f32> {
    if total_steps == 0 {
        return Err(Error::invalid("cosine_lr", "total_steps must be >= 1"));
    }
    if step > total_steps {
        return Err(Error::invalid(
            "cosine_lr",
            "step must satisfy 0 <= step <= total_steps",
        ));
    }
    if !(lr_max >= lr_min && lr_min >= 0.0) {
        return Err(Error::invalid("cosine_lr", "need lr_max >= lr_min >= 0"));
    }
    let phase = core::f64::consts::PI * step as f64 / total_steps as f64;
    let lr = lr_min as f64 + 0.5 * (lr_max as f64 - lr_min as f64) * (1.0 + math::cos64(phase));
    Ok(lr as f32)
}

/// Scales every gradient in place so the joint Euclidean norm is at most
/// `max_norm`. Returns the norm before clipping. Gradients already within the
/// bound are left bitwise untouched.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f32>>, max_norm: f32) -> Result<f32> {
    if !(max_norm > 0.0) {
        return Err(Error::invalid("clip_global_norm", "max_norm must be > 0"));
    }
    let mut sq = 0.0f64;
    for (name, g) in grads.iter() {
        for &x in g.iter() {
            if !x.is_finite() {
                return Err(Error::invalid(
                    "clip_global_norm",
                    alloc::format!("non-finite gradient in '{name}'"),
                ));
            }
            sq += (x as f64) * (x as f64);
        }
    }
    let norm = math::sqrt64(sq);
    if norm > max_norm as f64 {
        let scale = max_norm as f64 / norm;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x = (*x as f64 * scale) as f32;
            }
        }
    }
    Ok(norm as f32)
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct SlotState {
    step: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Adam with bias correction. State is keyed by slot name and sized lazily on
/// first update, so freezing or regrouping parameters between phases needs no
/// optimizer surgery: a slot that stops receiving updates simply stops
/// advancing.
pub struct Adam {
    cfg: AdamConfig,
    slots: BTreeMap<String, SlotState>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            slots: BTreeMap::new(),
        }
    }

    /// One Adam update of `param` by `grad` at learning rate `lr`.
    pub fn apply(&mut self, name: &str, param: &mut [f32], grad: &[f32], lr: f32) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::invalid(
                "adam",
                alloc::format!(
                    "slot '{name}': param has {} elements, grad has {}",
                    param.len(),
                    grad.len()
                ),
            ));
        }
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::invalid("adam", "learning rate must be finite and >= 0"));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::invalid(
                "adam",
                alloc::format!("slot '{name}': non-finite gradient"),
            ));
        }
        let slot = self
            .slots
            .entry(name.to_string())
            .or_insert_with(|| SlotState {
                step: 0,
                m: vec![0.0; param.len()],
                v: vec![0.0; param.len()],
            });
        if slot.m.len() != param.len() {
            return Err(Error::invalid(
                "adam",
                alloc::format!("slot '{name}' changed size between steps"),
            ));
        }
        slot.step += 1;
        let b1 = self.cfg.beta1 as f64;
        let b2 = self.cfg.beta2 as f64;
        let eps = self.cfg.eps as f64;
        let lr = lr as f64;
        let m_corr = 1.0 - math::pow64(b1, slot.step as f64);
        let v_corr = 1.0 - math::pow64(b2, slot.step as f64);
        for i in 0..param.len() {
            let g = grad[i] as f64;
            let m = b1 * slot.m[i] as f64 + (1.0 - b1) * g;
            let v = b2 * slot.v[i] as f64 + (1.0 - b2) * g * g;
            slot.m[i] = m as f32;
            slot.v[i] = v as f32;
            let m_hat = m / m_corr;
            let v_hat = v / v_corr;
            param[i] = (param[i] as f64 - lr * m_hat / (math::sqrt64(v_hat) + eps)) as f32;
        }
        Ok(())
    }

    /// Step count of a slot (0 if it never received an update).
    pub fn slot_steps(&self, name: &str) -> u64 {
        self.slots.get(name).map_or(0, |s| s.step)
    }

    /// Snapshots every slot for checkpointing.
    pub fn export_slots(&self) -> Vec<(String, SlotDump)> {
        self.slots
            .iter()
            .map(|(name, s)| {
                (
                    name.clone(),
                    SlotDump {
                        step: s.step,
                        m: s.m.clone(),
                        v: s.v.clone(),
                    },
                )
            })
            .collect()
    }

    /// Replaces all optimizer state with a snapshot. Restoring the snapshot
    /// taken at a step makes subsequent updates bitwise equal to an
    /// uninterrupted run.
    pub fn import_slots(&mut self, slots: Vec<(String, SlotDump)>) -> Result<()> {
        let mut fresh = BTreeMap::new();
        for (name, dump) in slots {
            if dump.m.len() != dump.v.len() {
                return Err(Error::invalid(
                    "adam",
                    alloc::format!(
                        "slot '{name}': m has {} elements, v has {}",
                        dump.m.len(),
                        dump.v.len()
                    ),
                ));
            }
            if fresh
                .insert(
                    name.clone(),
                    SlotState {
                        step: dump.step,
                        m: dump.m,
                        v: dump.v,
                    },
                )
                .is_some()
            {
                return Err(Error::invalid(
                    "adam",
                    alloc::format!("duplicate slot '{name}' in snapshot"),
                ));
            }
        }
        self.slots = fresh;
        Ok(())
    }
}

/// Snapshot of one slot's moment vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotDump {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}
