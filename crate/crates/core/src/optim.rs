//! Named parameters with Adam moment buffers.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub value: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
}

/// Trainable tensors by name, the unit of checkpointing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    slots: BTreeMap<String, ParamSlot>,
    step: u64,
    pub adam: AdamConfig,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts (or replaces) a parameter with fresh zero moments.
    pub fn insert(&mut self, name: &str, value: Tensor) {
        let zeros = Tensor::zeros(value.shape());
        self.slots.insert(
            name.to_string(),
            ParamSlot {
                value,
                first_moment: zeros.clone(),
                second_moment: zeros,
            },
        );
    }

    /// Inserts a parameter together with existing moment buffers.
    pub fn insert_slot(&mut self, name: &str, slot: ParamSlot) -> Result<()> {
        for m in [&slot.first_moment, &slot.second_moment] {
            if m.shape() != slot.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "insert_slot",
                    lhs: slot.value.shape().to_vec(),
                    rhs: m.shape().to_vec(),
                });
            }
        }
        self.slots.insert(name.to_string(), slot);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.slots
            .get(name)
            .map(|s| &s.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.slots
            .get_mut(name)
            .map(|s| &mut s.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn slot(&self, name: &str) -> Option<&ParamSlot> {
        self.slots.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamSlot)> {
        self.slots.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<&str> {
        self.slots.keys().map(String::as_str).collect()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn parameter_count(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// One Adam update with bias correction. Parameters absent from `grads`
    /// keep their values and moments.
    pub fn adam_update(&mut self, grads: &BTreeMap<String, Tensor>, learning_rate: f64) -> Result<()> {
        for (name, g) in grads {
            let slot = self
                .slots
                .get(name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if slot.value.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_update",
                    lhs: slot.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.adam;
        let t = self.step as f64;
        let bias1 = 1.0 - libm::pow(beta1, t);
        let bias2 = 1.0 - libm::pow(beta2, t);
        for (name, g) in grads {
            let slot = self.slots.get_mut(name).expect("checked above");
            let m = slot.first_moment.data_mut();
            for (mv, gv) in m.iter_mut().zip(g.data()) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
            }
            let v = slot.second_moment.data_mut();
            for (vv, gv) in v.iter_mut().zip(g.data()) {
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            }
            let m = slot.first_moment.data();
            let v = slot.second_moment.data();
            let w = slot.value.data_mut();
            for ((wv, mv), vv) in w.iter_mut().zip(m).zip(v) {
                let m_hat = mv / bias1;
                let v_hat = vv / bias2;
                *wv -= learning_rate * m_hat / (libm::sqrt(v_hat) + epsilon);
            }
        }
        Ok(())
    }
}
