//! Optimizers and the exponential-moving-average weight copy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Algorithm {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Algorithm {
    pub fn adam() -> Self {
        Algorithm::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn sgd(momentum: f64) -> Self {
        Algorithm::SgdMomentum { momentum }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer state bound to one [`ParamStore`]. Moment buffers are allocated
/// for non-frozen parameters only.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub algorithm: Algorithm,
    pub lr: f64,
    step: u64,
    state: BTreeMap<ParamId, Moments>,
}

impl Optimizer {
    pub fn new(store: &ParamStore, algorithm: Algorithm, lr: f64) -> Self {
        let state = store
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(id, p)| {
                let n = p.value.numel();
                let second = match algorithm {
                    Algorithm::Adam { .. } => vec![0.0; n],
                    Algorithm::SgdMomentum { .. } => Vec::new(),
                };
                (id, Moments { first: vec![0.0; n], second })
            })
            .collect();
        Self { algorithm, lr, step: 0, state }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn has_state_for(&self, id: ParamId) -> bool {
        self.state.contains_key(&id)
    }

    pub fn state_len(&self) -> usize {
        self.state.len()
    }

    /// Applies one update to every non-frozen parameter that holds a gradient,
    /// then clears all gradients. Frozen parameters are never written.
    ///
    /// Calling this when no trainable parameter carries a gradient (no
    /// backward since the last step) is a contract error.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let any_grad = store.iter().any(|(_, p)| !p.frozen && p.grad.is_some());
        if !any_grad {
            return Err(Error::contract("optimizer step without gradients on any trainable parameter"));
        }
        self.step += 1;
        let t = self.step as i32;
        for id in store.ids() {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let Some(grad) = p.grad.take() else { continue };
            let m = self
                .state
                .get_mut(&id)
                .ok_or_else(|| Error::contract(format!("no optimizer state for {}", p.name)))?;
            if m.first.len() != grad.numel() {
                return Err(Error::contract(format!("optimizer state shape drift for {}", p.name)));
            }
            let theta = p.value.data_mut();
            match self.algorithm {
                Algorithm::SgdMomentum { momentum } => {
                    for ((th, g), v) in theta.iter_mut().zip(grad.data()).zip(&mut m.first) {
                        *v = momentum * *v + g;
                        *th -= self.lr * *v;
                    }
                }
                Algorithm::Adam { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    for (i, (th, g)) in theta.iter_mut().zip(grad.data()).enumerate() {
                        m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * g;
                        m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * g * g;
                        let mhat = m.first[i] / bc1;
                        let vhat = m.second[i] / bc2;
                        *th -= self.lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        store.zero_grads();
        Ok(())
    }
}

/// Exponential moving average of a store's non-frozen parameters.
///
/// The shadow is a full clone of the student store, so the same [`ParamId`]s
/// address it and any model can run forward passes against it. Every shadow
/// parameter is marked frozen: nothing ever computes gradients for it.
#[derive(Clone, Debug)]
pub struct Ema {
    pub decay: f64,
    shadow: ParamStore,
    tracked: Vec<ParamId>,
}

impl Ema {
    pub fn new(student: &ParamStore, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay {decay} outside [0, 1]")));
        }
        let mut shadow = student.clone();
        shadow.zero_grads();
        let tracked = student.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
        for id in shadow.ids() {
            shadow.get_mut(id).frozen = true;
        }
        Ok(Self { decay, shadow, tracked })
    }

    pub fn params(&self) -> &ParamStore {
        &self.shadow
    }

    /// `θ_ema ← α·θ_ema + (1 − α)·θ_student` for every tracked parameter.
    pub fn update(&mut self, student: &ParamStore) -> Result<()> {
        let a = self.decay;
        for &id in &self.tracked {
            let src = student.get(id);
            let dst = self.shadow.get_mut(id);
            if src.value.shape() != dst.value.shape() || src.name != dst.name {
                return Err(Error::contract(format!(
                    "EMA shadow {} {:?} drifted from student {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            for (e, s) in dst.value.data_mut().iter_mut().zip(src.value.data()) {
                *e = a * *e + (1.0 - a) * s;
            }
        }
        Ok(())
    }
}

pub fn ema_update(ema: &mut Ema, store: &ParamStore) -> Result<()> {
    ema.update(store)
}

pub fn optimizer_step(store: &mut ParamStore, opt: &mut Optimizer) -> Result<()> {
    opt.step(store)
}
