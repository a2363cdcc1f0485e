use serde::{Deserialize, Serialize};

use super::space::HyperparamConfig;
use crate::sim::{packed_step_ms, shared_input_groups, DeviceProfile, ModelProfile, SimMember};

/// Scale applied to the normalized step-time gap so it reads in the same
/// units as the index metrics.
pub const TRAIN_TIME_SCALE: f64 = 10.0;

/// Simulator context for the step-time metric: every config is the same
/// architecture reading one shared stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTimeModel {
    pub device: DeviceProfile,
    pub model: ModelProfile,
}

impl TrainTimeModel {
    pub fn member(&self, config: &HyperparamConfig) -> SimMember {
        SimMember {
            profile: self.model.with_optimizer_multiplier(config.optimizer.state_multiplier()),
            batch_size: config.batch_size,
            data: "shared".into(),
            preprocess: true,
        }
    }

    /// Packed over sequential single-step time for the pair.
    fn ratio(&self, a: &HyperparamConfig, b: &HyperparamConfig) -> f64 {
        let members = [self.member(a), self.member(b)];
        let seq: f64 = members.iter().map(|m| m.solo_step_ms(&self.device)).sum();
        let groups = shared_input_groups(&members);
        let pack = packed_step_ms(&self.device, &members, &groups).expect("groups cover members");
        pack / seq
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Metric {
    /// Index gaps on numeric axes plus 0/1 per categorical axis.
    IndexSum,
    /// Root of the summed squares of the same per-axis terms.
    Euclid,
    /// How far a pair's packed step-time ratio departs from the mean of the
    /// self-pairs.
    TrainTime(TrainTimeModel),
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::IndexSum => "indexsum",
            Metric::Euclid => "euclid",
            Metric::TrainTime(_) => "traintime",
        }
    }
}

fn axis_terms(a: &HyperparamConfig, b: &HyperparamConfig) -> [f64; 4] {
    let gap = |x: usize, y: usize| x.abs_diff(y) as f64;
    let flag = |same: bool| if same { 0.0 } else { 1.0 };
    [
        gap(a.index.batch, b.index.batch),
        flag(a.index.optimizer == b.index.optimizer),
        gap(a.index.learning_rate, b.index.learning_rate),
        flag(a.index.activation == b.index.activation),
    ]
}

pub fn config_distance(a: &HyperparamConfig, b: &HyperparamConfig, metric: &Metric) -> f64 {
    match metric {
        Metric::IndexSum => axis_terms(a, b).iter().sum(),
        Metric::Euclid => axis_terms(a, b).iter().map(|t| t * t).sum::<f64>().sqrt(),
        Metric::TrainTime(model) => {
            if a.config_id == b.config_id {
                return 0.0;
            }
            let cross = model.ratio(a, b);
            let own = (model.ratio(a, a) + model.ratio(b, b)) / 2.0;
            TRAIN_TIME_SCALE * (cross - own).abs()
        }
    }
}
