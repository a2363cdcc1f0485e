use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::TunerError;
use crate::graph::Activation;
use crate::optim::OptimizerKind;
use crate::seed_key;
use crate::seeding::derive_rng;

/// Axes of the hyperparameter grid. Numeric axes are ordered so that index
/// gaps measure distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSpace {
    pub batch_sizes: Vec<usize>,
    pub optimizers: Vec<OptimizerKind>,
    pub learning_rates: Vec<f64>,
    pub activations: Vec<Activation>,
}

impl Default for ConfigSpace {
    fn default() -> Self {
        Self::standard()
    }
}

impl ConfigSpace {
    /// The 11 x 4 x 6 x 4 grid.
    pub fn standard() -> Self {
        Self {
            batch_sizes: (20..=70).step_by(5).collect(),
            optimizers: vec![OptimizerKind::Adam, OptimizerKind::Sgd, OptimizerKind::Adagrad, OptimizerKind::Momentum],
            learning_rates: vec![1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1],
            activations: Activation::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<(), TunerError> {
        if self.batch_sizes.is_empty()
            || self.optimizers.is_empty()
            || self.learning_rates.is_empty()
            || self.activations.is_empty()
        {
            return Err(TunerError::InvalidParameters("every space axis needs at least one value".into()));
        }
        if self.batch_sizes.contains(&0) {
            return Err(TunerError::InvalidParameters("batch sizes must be positive".into()));
        }
        if self.learning_rates.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return Err(TunerError::InvalidParameters("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.batch_sizes.len() * self.optimizers.len() * self.learning_rates.len() * self.activations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Config by stable index; activation varies fastest, batch size slowest.
    pub fn config(&self, config_id: usize) -> Option<HyperparamConfig> {
        if config_id >= self.len() {
            return None;
        }
        let (na, nl, no) = (self.activations.len(), self.learning_rates.len(), self.optimizers.len());
        let mut rest = config_id;
        let activation = rest % na;
        rest /= na;
        let learning_rate = rest % nl;
        rest /= nl;
        let optimizer = rest % no;
        let batch = rest / no;
        Some(HyperparamConfig {
            config_id,
            index: ConfigIndex { batch, optimizer, learning_rate, activation },
            batch_size: self.batch_sizes[batch],
            optimizer: self.optimizers[optimizer],
            learning_rate: self.learning_rates[learning_rate],
            activation: self.activations[activation],
        })
    }

    pub fn all(&self) -> Vec<HyperparamConfig> {
        (0..self.len()).filter_map(|i| self.config(i)).collect()
    }

    /// `n` distinct configs drawn without replacement, in draw order.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<HyperparamConfig>, TunerError> {
        sample_configs(self, n, seed)
    }
}

/// Position of a config along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfigIndex {
    pub batch: usize,
    pub optimizer: usize,
    pub learning_rate: usize,
    pub activation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparamConfig {
    pub config_id: usize,
    pub index: ConfigIndex,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub activation: Activation,
}

impl HyperparamConfig {
    /// Compact label such as `b40/adagrad/lr0.01/relu`.
    pub fn label(&self) -> String {
        format!("b{}/{}/lr{}/{}", self.batch_size, self.optimizer.name(), self.learning_rate, self.activation.name())
    }
}

pub fn sample_configs(space: &ConfigSpace, n: usize, seed: u64) -> Result<Vec<HyperparamConfig>, TunerError> {
    let available = space.len();
    if n > available {
        return Err(TunerError::SampleTooLarge { requested: n, available });
    }
    let mut rng = derive_rng(&seed_key!["sample-configs", seed]);
    Ok(index::sample(&mut rng, available, n).into_iter().filter_map(|i| space.config(i)).collect())
}
