use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::hyperband::{Executor, GroupRun};
use super::packopt::PackGroup;
use super::space::HyperparamConfig;
use crate::data::{synth_dataset, DataStore, Dataset};
use crate::error::{PackError, TunerError};
use crate::graph::{ComputationGraph, MlpSpec};
use crate::optim::OptimizerState;
use crate::pack::{model_profile_for, ModelHandle, PackedModel};
use crate::seed_key;
use crate::seeding::derive_u64;
use crate::sim::{
    check_fit, estimate_memory, packed_run_ms, steps_for, DeviceProfile, ModelProfile, SimJob, SimMember,
};

/// Samples per simulated epoch.
pub const SIM_EPOCH_SAMPLES: usize = 10_000;

/// Deterministic stand-in for a validation curve: each config has a seeded
/// floor and approaches it at a rate set by its learning-rate index.
pub fn stub_loss(config: &HyperparamConfig, epochs: f64, seed: u64) -> f64 {
    let u = derive_u64(&seed_key!["stub-loss", seed, config.config_id]) as f64 / u64::MAX as f64;
    let floor = 0.1 + 0.9 * u;
    let rate = 0.05 * (1 + config.index.learning_rate) as f64;
    floor + (2.3 - floor) * (-rate * epochs).exp()
}

fn oom(group: &PackGroup, err: crate::error::SimError) -> TunerError {
    TunerError::ExecutorOom(format!("group {:?}: {err}", group.ids()))
}

/// Simulator-backed executor: time from the cost model, losses from
/// [`stub_loss`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimExecutor {
    pub device: DeviceProfile,
    pub model: ModelProfile,
    pub samples: usize,
    pub loss_seed: u64,
}

impl SimExecutor {
    pub fn new(device: DeviceProfile, model: ModelProfile, loss_seed: u64) -> Self {
        Self { device, model, samples: SIM_EPOCH_SAMPLES, loss_seed }
    }

    fn member(&self, config: &HyperparamConfig) -> SimMember {
        SimMember {
            profile: self.model.with_optimizer_multiplier(config.optimizer.state_multiplier()),
            batch_size: config.batch_size,
            data: "train".into(),
            preprocess: true,
        }
    }
}

impl Executor for SimExecutor {
    fn run_group(&mut self, group: &PackGroup, epochs: f64) -> Result<GroupRun, TunerError> {
        let jobs: Vec<SimJob> = group
            .members
            .iter()
            .map(|c| SimJob { member: self.member(c), steps: steps_for(self.samples, c.batch_size, epochs) })
            .collect();
        let demands: Vec<u64> = jobs.iter().map(|j| j.member.memory()).collect();
        check_fit(&demands, self.device.memory_capacity).map_err(|e| oom(group, e))?;
        let elapsed_ms = self.device.switch_overhead + packed_run_ms(&self.device, &jobs)?;
        let losses = group.members.iter().map(|c| stub_loss(c, epochs, self.loss_seed)).collect();
        Ok(GroupRun { losses, elapsed_ms })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EngineMode {
    /// Group members train as one [`PackedModel`].
    Packed,
    /// Group members train one after the other.
    Sequential,
}

/// Real-engine executor training MLPs on an in-memory dataset and scoring
/// them on a held-out split. Reported time comes from the cost model so runs
/// stay reproducible.
pub struct EngineExecutor {
    store: DataStore,
    train_id: String,
    train_len: usize,
    validation: Dataset,
    spec: MlpSpec,
    init_seed: u64,
    mode: EngineMode,
    device: DeviceProfile,
}

impl EngineExecutor {
    pub fn new(
        train: Dataset,
        validation: Dataset,
        hidden: Vec<usize>,
        init_seed: u64,
        mode: EngineMode,
        device: DeviceProfile,
    ) -> Self {
        let spec = MlpSpec {
            input_dim: train.dim(),
            hidden,
            classes: train.class_count() as usize,
            activation: crate::graph::Activation::Relu,
        };
        let train_len = train.len();
        let mut store = DataStore::new();
        let train_id = store.insert(train);
        Self { store, train_id, train_len, validation, spec, init_seed, mode, device }
    }

    /// Gaussian-blob data with 10% held out for validation.
    pub fn synthetic(
        samples: usize,
        dim: usize,
        classes: u32,
        seed: u64,
        hidden: Vec<usize>,
        mode: EngineMode,
        device: DeviceProfile,
    ) -> Result<Self, TunerError> {
        let full = synth_dataset(samples, dim, classes, seed).map_err(PackError::from)?;
        let (train, validation) = full.split_validation(0.1, seed).map_err(PackError::from)?;
        Ok(Self::new(train, validation, hidden, seed, mode, device))
    }

    pub fn mode(&self) -> EngineMode {
        self.mode
    }

    /// Footprint of the engine MLP with weights only; packing contexts apply
    /// each config's optimizer multiplier on top.
    pub fn model_profile(&self) -> Result<ModelProfile, TunerError> {
        let mut graph = ComputationGraph::mlp("profile", &self.spec).map_err(PackError::from)?;
        graph.initialize(self.init_seed);
        let optimizer = OptimizerState::new(crate::optim::OptimizerKind::Sgd, 0.1).map_err(PackError::from)?;
        let handle = ModelHandle::new(graph, optimizer, 1, 1, self.train_id.clone(), self.train_len)?;
        Ok(model_profile_for(&handle).with_optimizer_multiplier(1.0))
    }

    fn handle(&self, config: &HyperparamConfig, epochs: f64) -> Result<ModelHandle, PackError> {
        let spec = MlpSpec { activation: config.activation, ..self.spec.clone() };
        let mut graph = ComputationGraph::mlp(format!("cfg{:04}", config.config_id), &spec)?;
        graph.initialize(self.init_seed);
        let optimizer = OptimizerState::new(config.optimizer, config.learning_rate)?;
        let batch = config.batch_size.min(self.train_len);
        let steps = steps_for(self.train_len, batch, epochs);
        ModelHandle::new(graph, optimizer, batch, steps, self.train_id.clone(), self.train_len)
    }

    fn score(&self, handle: &ModelHandle) -> Result<f64, PackError> {
        handle.evaluate(self.validation.features(), self.validation.labels())
    }

    fn train_packed(&self, handles: Vec<ModelHandle>) -> Result<BTreeMap<String, f64>, PackError> {
        let mut scores = BTreeMap::new();
        let mut packed = PackedModel::pack(handles)?;
        packed.dedup_inputs()?;
        loop {
            let active = packed.members().iter().filter(|m| !m.finished()).count();
            if active == 0 {
                break;
            }
            let out = packed.packed_step(&self.store)?;
            if out.finished.len() < active {
                // Finished members leave the pack so the rest stop paying for them.
                for id in out.finished {
                    let ck = packed.free(&id)?;
                    scores.insert(id, self.score(&ck.restore()?)?);
                }
            }
        }
        for h in packed.into_handles()? {
            scores.insert(h.model_id().to_string(), self.score(&h)?);
        }
        Ok(scores)
    }

    fn train_sequential(&self, handles: Vec<ModelHandle>) -> Result<BTreeMap<String, f64>, PackError> {
        handles
            .into_iter()
            .map(|mut h| {
                h.train_to_target(&self.store)?;
                Ok((h.model_id().to_string(), self.score(&h)?))
            })
            .collect()
    }
}

impl Executor for EngineExecutor {
    fn run_group(&mut self, group: &PackGroup, epochs: f64) -> Result<GroupRun, TunerError> {
        let handles = group
            .members
            .iter()
            .map(|c| self.handle(c, epochs))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| TunerError::Executor(e.to_string()))?;
        let jobs: Vec<SimJob> = handles
            .iter()
            .map(|h| SimJob {
                member: SimMember {
                    profile: model_profile_for(h),
                    batch_size: h.batch_size,
                    data: h.dataset.clone(),
                    preprocess: false,
                },
                steps: h.target_steps,
            })
            .collect();
        let demands: Vec<u64> = jobs.iter().map(|j| estimate_memory(&j.member.profile, j.member.batch_size)).collect();
        check_fit(&demands, self.device.memory_capacity).map_err(|e| oom(group, e))?;
        let ids: Vec<String> = handles.iter().map(|h| h.model_id().to_string()).collect();
        let (scores, elapsed_ms) = match self.mode {
            EngineMode::Packed => {
                let t = self.device.switch_overhead + packed_run_ms(&self.device, &jobs)?;
                (self.train_packed(handles), t)
            }
            EngineMode::Sequential => {
                let t = jobs
                    .iter()
                    .map(|j| self.device.switch_overhead + j.steps as f64 * j.member.solo_step_ms(&self.device))
                    .sum();
                (self.train_sequential(handles), t)
            }
        };
        let scores = scores.map_err(|e| TunerError::Executor(e.to_string()))?;
        Ok(GroupRun { losses: ids.iter().map(|id| scores[id]).collect(), elapsed_ms })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::profile;
    use crate::tuner::space::ConfigSpace;

    fn device() -> DeviceProfile {
        profile::builtin("mlp3").unwrap().device().unwrap().clone()
    }

    #[test]
    fn stub_loss_ignores_grouping_and_decreases() {
        let c = ConfigSpace::standard().config(123).unwrap();
        assert_eq!(stub_loss(&c, 3.0, 1), stub_loss(&c, 3.0, 1));
        assert!(stub_loss(&c, 9.0, 1) < stub_loss(&c, 3.0, 1));
    }

    #[test]
    fn engine_losses_match_between_modes() {
        let space = ConfigSpace::standard();
        let group =
            PackGroup { members: vec![space.config(5).unwrap(), space.config(300).unwrap()], memory: 0, centroid: 5 };
        let mut packed = EngineExecutor::synthetic(200, 4, 3, 1, vec![8, 8], EngineMode::Packed, device()).unwrap();
        let mut seq = EngineExecutor::synthetic(200, 4, 3, 1, vec![8, 8], EngineMode::Sequential, device()).unwrap();
        let a = packed.run_group(&group, 2.0).unwrap();
        let b = seq.run_group(&group, 2.0).unwrap();
        for (x, y) in a.losses.iter().zip(&b.losses) {
            assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
        }
        assert!(a.elapsed_ms < b.elapsed_ms);
    }

    #[test]
    fn executor_reports_oom() {
        let mut dev = device();
        dev.memory_capacity = 1;
        let file = profile::builtin("mlp3").unwrap();
        let mut exec = SimExecutor::new(dev, file.model().unwrap().clone(), 0);
        let group = PackGroup { members: vec![ConfigSpace::standard().config(0).unwrap()], memory: 0, centroid: 0 };
        assert!(matches!(exec.run_group(&group, 1.0), Err(TunerError::ExecutorOom(_))));
    }
}
