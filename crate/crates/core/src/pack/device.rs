use std::collections::BTreeMap;

use super::checkpoint::Checkpoint;
use super::handle::ModelHandle;
use crate::error::{PackError, SimError};
use crate::sim::{check_fit, estimate_memory, DeviceProfile, ModelProfile};

/// Nominal engine cost per multiply-accumulate, used only to give engine
/// models a simulator profile.
const MS_PER_MAC: f64 = 1e-6;

/// Memory/compute profile of an engine model: f64 parameters, optimizer
/// slots per kind, and forward plus backward activations per sample.
pub fn model_profile_for(handle: &ModelHandle) -> ModelProfile {
    let graph = &handle.graph;
    let widths = graph.widths().expect("validated graph");
    let activation_values: usize = widths.iter().sum();
    let macs: usize = graph.param_shapes().values().filter(|s| s.len() == 2).map(|s| s[0] * s[1]).sum();
    ModelProfile {
        name: handle.model_id().to_string(),
        parameter_bytes: (graph.parameter_count() * 8) as u64,
        activation_bytes_per_sample: (activation_values * 8 * 2) as u64,
        compute_ms_per_sample: 3.0 * macs as f64 * MS_PER_MAC,
        optimizer_state_multiplier: handle.optimizer.kind().state_multiplier(),
        context_bytes: 0,
    }
}

/// What to place on a device.
#[derive(Debug, Clone)]
pub enum LoadSource {
    Handle(ModelHandle),
    Checkpoint(Checkpoint),
}

/// A single device with memory accounting of resident models.
#[derive(Debug, Clone)]
pub struct Device {
    profile: DeviceProfile,
    residents: BTreeMap<String, u64>,
}

impl Device {
    pub fn new(profile: DeviceProfile) -> Result<Self, SimError> {
        profile.validate()?;
        Ok(Self { profile, residents: BTreeMap::new() })
    }

    pub fn profile(&self) -> &DeviceProfile {
        &self.profile
    }

    pub fn used(&self) -> u64 {
        self.residents.values().sum()
    }

    pub fn available(&self) -> u64 {
        self.profile.memory_capacity - self.used()
    }

    pub fn residents(&self) -> &BTreeMap<String, u64> {
        &self.residents
    }

    pub fn is_resident(&self, model_id: &str) -> bool {
        self.residents.contains_key(model_id)
    }

    /// Places a model on the device. On OOM nothing is registered.
    pub fn load(&mut self, source: LoadSource) -> Result<ModelHandle, PackError> {
        let handle = match source {
            LoadSource::Handle(h) => h,
            LoadSource::Checkpoint(ck) => ck.restore()?,
        };
        let id = handle.model_id().to_string();
        if self.is_resident(&id) {
            return Err(PackError::DuplicateModel(id));
        }
        let demand = estimate_memory(&model_profile_for(&handle), handle.batch_size);
        let mut demands: Vec<u64> = self.residents.values().copied().collect();
        demands.push(demand);
        check_fit(&demands, self.profile.memory_capacity)?;
        self.residents.insert(id, demand);
        Ok(handle)
    }

    /// Releases a model's memory and returns its checkpoint.
    pub fn free(&mut self, handle: &ModelHandle) -> Result<Checkpoint, PackError> {
        self.release(handle.model_id())?;
        Ok(Checkpoint::capture(handle))
    }

    /// Releases memory held by `model_id` and returns the freed bytes.
    pub fn release(&mut self, model_id: &str) -> Result<u64, PackError> {
        self.residents.remove(model_id).ok_or_else(|| PackError::UnknownModel(model_id.to_string()))
    }
}
