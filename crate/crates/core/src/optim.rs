//! First-order optimizers with per-parameter state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::OptimError;
use crate::graph::ParamMap;
use crate::tensor::Tensor;

pub const MOMENTUM: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
pub const ADAGRAD_EPSILON: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    Sgd,
    Adagrad,
    Momentum,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] =
        [OptimizerKind::Adam, OptimizerKind::Sgd, OptimizerKind::Adagrad, OptimizerKind::Momentum];

    /// Auxiliary tensors kept per parameter.
    pub fn slots(self) -> usize {
        match self {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Momentum | OptimizerKind::Adagrad => 1,
            OptimizerKind::Adam => 2,
        }
    }

    /// Memory multiplier applied to parameter bytes: weights plus slots.
    pub fn state_multiplier(self) -> f64 {
        (1 + self.slots()) as f64
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::Momentum => "momentum",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            OptimizerKind::Adam => 0,
            OptimizerKind::Sgd => 1,
            OptimizerKind::Adagrad => 2,
            OptimizerKind::Momentum => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown optimizer `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    kind: OptimizerKind,
    learning_rate: f64,
    slots: BTreeMap<String, Vec<Tensor>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self, OptimError> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(OptimError::BadLearningRate(learning_rate));
        }
        Ok(Self { kind, learning_rate, slots: BTreeMap::new(), step: 0 })
    }

    pub(crate) fn from_parts(
        kind: OptimizerKind,
        learning_rate: f64,
        slots: BTreeMap<String, Vec<Tensor>>,
        step: u64,
    ) -> Result<Self, OptimError> {
        let mut s = Self::new(kind, learning_rate)?;
        s.slots = slots;
        s.step = step;
        Ok(s)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn step_counter(&self) -> u64 {
        self.step
    }

    pub fn slots(&self) -> &BTreeMap<String, Vec<Tensor>> {
        &self.slots
    }

    /// One update of every parameter. Validates all gradients before touching
    /// any state, so a failed call leaves parameters and state unchanged.
    pub fn apply_update(&mut self, params: &mut ParamMap, grads: &ParamMap) -> Result<(), OptimError> {
        for (name, p) in params.iter() {
            let g = grads.get(name).ok_or_else(|| OptimError::MissingGradient(name.clone()))?;
            if g.shape() != p.shape() {
                return Err(OptimError::ShapeMismatch {
                    name: name.clone(),
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(OptimError::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let lr = self.learning_rate;
        let kind = self.kind;
        for (name, p) in params.iter_mut() {
            let g = grads[name].data();
            let slots =
                self.slots.entry(name.clone()).or_insert_with(|| vec![Tensor::zeros(p.shape().to_vec()); kind.slots()]);
            let w = p.data_mut();
            match kind {
                OptimizerKind::Sgd => {
                    for (wi, gi) in w.iter_mut().zip(g) {
                        *wi -= lr * gi;
                    }
                }
                OptimizerKind::Momentum => {
                    let v = slots[0].data_mut();
                    for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                        *vi = MOMENTUM * *vi + gi;
                        *wi -= lr * *vi;
                    }
                }
                OptimizerKind::Adagrad => {
                    let acc = slots[0].data_mut();
                    for ((wi, gi), ai) in w.iter_mut().zip(g).zip(acc.iter_mut()) {
                        *ai += gi * gi;
                        *wi -= lr * gi / (ai.sqrt() + ADAGRAD_EPSILON);
                    }
                }
                OptimizerKind::Adam => {
                    let (first, second) = slots.split_at_mut(1);
                    let m = first[0].data_mut();
                    let v = second[0].data_mut();
                    let c1 = 1.0 - ADAM_BETA1.powf(t);
                    let c2 = 1.0 - ADAM_BETA2.powf(t);
                    for (((wi, gi), mi), vi) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *wi -= lr * mhat / (vhat.sqrt() + ADAM_EPSILON);
                    }
                }
            }
        }
        Ok(())
    }
}
