//! Hyperband and pack-aware Hyperband over a discrete hyperparameter grid.

mod distance;
mod executor;
mod hyperband;
mod packopt;
mod space;

pub use distance::{config_distance, Metric, TrainTimeModel, TRAIN_TIME_SCALE};
pub use executor::{stub_loss, EngineExecutor, EngineMode, SimExecutor, SIM_EPOCH_SAMPLES};
pub use hyperband::{
    bracket_sample, bracket_schedule, hyperband, packed_hyperband, read_audit, write_audit, AuditEvent, AuditRecord,
    BestConfig, BracketPlan, Executor, GroupRun, HyperbandParams, Rung, TuneOutcome,
};
pub use packopt::{
    pack_opt_batchsize, pack_opt_knn, pack_opt_random, pack_opt_singletons, PackContext, PackGroup, Strategy,
    DEFAULT_RANDOM_GROUP, DEFAULT_THRESHOLD,
};
pub use space::{sample_configs, ConfigIndex, ConfigSpace, HyperparamConfig};
