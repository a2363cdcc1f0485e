//! Python bindings: tensors, packed MLP training, the device simulator and
//! pack-aware Hyperband.

use std::collections::BTreeMap;

use packtrain_core::data::{synth_dataset, DataStore};
use packtrain_core::experiment::ExperimentSpec;
use packtrain_core::graph::{Activation, ComputationGraph, MlpSpec};
use packtrain_core::optim::{OptimizerKind, OptimizerState};
use packtrain_core::pack::{ModelHandle, PackedModel};
use packtrain_core::sim::{self, profile, SimMember};
use packtrain_core::tuner::{
    self, ConfigSpace, HyperbandParams, Metric, PackContext, SimExecutor, Strategy, TrainTimeModel,
    DEFAULT_RANDOM_GROUP,
};
use packtrain_core::{ExperimentError, SimError, Tensor};
use pyo3::exceptions::{PyMemoryError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn sim_err(e: SimError) -> PyErr {
    match e {
        SimError::OutOfMemory { .. } => PyMemoryError::new_err(e.to_string()),
        other => value_err(other),
    }
}

#[pyclass(name = "Tensor", module = "packtrain", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTensor(Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Tensor::new(shape, data).map(Self).map_err(value_err)
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self(Tensor::zeros(shape))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    /// Largest elementwise gap, or None when shapes differ.
    fn max_abs_diff(&self, other: &PyTensor) -> Option<f64> {
        self.0.max_abs_diff(&other.0)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

/// One MLP to train: architecture plus training traits.
#[pyclass(name = "ModelSpec", module = "packtrain", get_all, set_all, from_py_object)]
#[derive(Clone)]
struct PyModelSpec {
    model_id: String,
    hidden: Vec<usize>,
    activation: String,
    optimizer: String,
    learning_rate: f64,
    batch_size: usize,
    steps: u64,
    init_seed: u64,
}

#[pymethods]
impl PyModelSpec {
    #[new]
    #[pyo3(signature = (model_id, batch_size, steps, hidden=vec![8], activation="relu".to_string(), optimizer="sgd".to_string(), learning_rate=0.05, init_seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        model_id: String,
        batch_size: usize,
        steps: u64,
        hidden: Vec<usize>,
        activation: String,
        optimizer: String,
        learning_rate: f64,
        init_seed: u64,
    ) -> Self {
        Self { model_id, hidden, activation, optimizer, learning_rate, batch_size, steps, init_seed }
    }

    fn __repr__(&self) -> String {
        format!("ModelSpec({:?}, batch_size={}, steps={})", self.model_id, self.batch_size, self.steps)
    }
}

type Params = BTreeMap<String, BTreeMap<String, PyTensor>>;

fn build_handle(spec: &PyModelSpec, dim: usize, classes: u32, dataset: &str, len: usize) -> PyResult<ModelHandle> {
    let activation: Activation = spec.activation.parse().map_err(value_err)?;
    let kind: OptimizerKind = spec.optimizer.parse().map_err(value_err)?;
    let mlp = MlpSpec { input_dim: dim, hidden: spec.hidden.clone(), classes: classes as usize, activation };
    let mut graph = ComputationGraph::mlp(spec.model_id.clone(), &mlp).map_err(value_err)?;
    graph.initialize(spec.init_seed);
    let optimizer = OptimizerState::new(kind, spec.learning_rate).map_err(value_err)?;
    ModelHandle::new(graph, optimizer, spec.batch_size, spec.steps, dataset, len).map_err(value_err)
}

fn wrap(params: &packtrain_core::graph::ParamMap) -> BTreeMap<String, PyTensor> {
    params.iter().map(|(k, v)| (k.clone(), PyTensor(v.clone()))).collect()
}

/// Trains every model on a synthetic Gaussian-blob dataset, either packed
/// into one fused graph or one after the other, and returns the final
/// parameters per model.
#[pyfunction]
#[pyo3(signature = (models, samples=200, dim=4, classes=3, data_seed=0, packed=true))]
fn train(
    py: Python<'_>,
    models: Vec<PyModelSpec>,
    samples: usize,
    dim: usize,
    classes: u32,
    data_seed: u64,
    packed: bool,
) -> PyResult<Params> {
    let mut store = DataStore::new();
    let dataset = store.insert(synth_dataset(samples, dim, classes, data_seed).map_err(value_err)?);
    let handles =
        models.iter().map(|m| build_handle(m, dim, classes, &dataset, samples)).collect::<PyResult<Vec<_>>>()?;
    py.detach(|| {
        if packed {
            let mut pack = PackedModel::pack(handles).map_err(value_err)?;
            pack.dedup_inputs().map_err(value_err)?;
            pack.train_to_completion(&store).map_err(value_err)?;
            let ids: Vec<String> = pack.members().iter().map(|m| m.model_id().to_string()).collect();
            ids.into_iter().map(|id| Ok((id.clone(), wrap(&pack.member_parameters(&id).map_err(value_err)?)))).collect()
        } else {
            handles
                .into_iter()
                .map(|mut h| {
                    h.train_to_target(&store).map_err(value_err)?;
                    Ok((h.model_id().to_string(), wrap(h.graph.parameters())))
                })
                .collect()
        }
    })
}

#[pyfunction]
fn builtin_profiles() -> Vec<&'static str> {
    profile::BUILTIN.iter().map(|(name, _)| *name).collect()
}

fn builtin(name: &str) -> PyResult<profile::ProfileFile> {
    profile::resolve(name).map_err(value_err)
}

/// Simulated per-step times for `members` copies of a profile's model.
/// Raises MemoryError when they do not fit the device together.
#[pyfunction]
#[pyo3(signature = (profile_name, members, batch_size, shared_data=true))]
fn step_time(
    profile_name: &str,
    members: usize,
    batch_size: usize,
    shared_data: bool,
) -> PyResult<BTreeMap<&'static str, f64>> {
    let file = builtin(profile_name)?;
    let device = file.device().map_err(value_err)?;
    let model = file.model().map_err(value_err)?;
    let ms: Vec<SimMember> = (0..members)
        .map(|i| SimMember {
            profile: model.clone(),
            batch_size,
            data: if shared_data { "shared".into() } else { format!("data{i}") },
            preprocess: true,
        })
        .collect();
    sim::check_fit_members(&ms, device).map_err(sim_err)?;
    let r = sim::estimate_step_time(device, &ms, &sim::shared_input_groups(&ms)).map_err(sim_err)?;
    Ok(BTreeMap::from([("t_seq_ms", r.t_seq), ("t_pack_ms", r.t_pack), ("impv", r.impv)]))
}

/// Switching overhead of running models with these epoch times one after
/// the other on the profile's device.
#[pyfunction]
fn switching_overhead(profile_name: &str, epoch_times_ms: Vec<f64>) -> PyResult<BTreeMap<&'static str, f64>> {
    let file = builtin(profile_name)?;
    let r = sim::switching_overhead(file.device().map_err(value_err)?, &epoch_times_ms).map_err(sim_err)?;
    Ok(BTreeMap::from([("te_seq_ms", r.te_seq), ("swoh_ms", r.swoh)]))
}

fn context(profile_name: &str) -> PyResult<PackContext> {
    let file = builtin(profile_name)?;
    Ok(PackContext {
        device: file.device().map_err(value_err)?.clone(),
        model: file.model().map_err(value_err)?.clone(),
    })
}

fn metric(name: &str, ctx: &PackContext) -> PyResult<Metric> {
    match name {
        "indexsum" => Ok(Metric::IndexSum),
        "euclid" => Ok(Metric::Euclid),
        "traintime" => Ok(Metric::TrainTime(TrainTimeModel { device: ctx.device.clone(), model: ctx.model.clone() })),
        other => Err(value_err(format!("unknown metric `{other}`"))),
    }
}

fn standard_config(id: usize) -> PyResult<tuner::HyperparamConfig> {
    ConfigSpace::standard().config(id).ok_or_else(|| value_err(format!("config id {id} out of range")))
}

/// Distance between two configs of the standard search space, by id.
#[pyfunction]
#[pyo3(signature = (a, b, metric="indexsum", profile_name="mlp3"))]
fn config_distance(a: usize, b: usize, metric: &str, profile_name: &str) -> PyResult<f64> {
    let m = self::metric(metric, &context(profile_name)?)?;
    Ok(tuner::config_distance(&standard_config(a)?, &standard_config(b)?, &m))
}

/// Describes one config of the standard search space.
#[pyfunction]
fn describe_config(config_id: usize) -> PyResult<BTreeMap<&'static str, String>> {
    let c = standard_config(config_id)?;
    Ok(BTreeMap::from([
        ("batch_size", c.batch_size.to_string()),
        ("optimizer", c.optimizer.name().to_string()),
        ("learning_rate", c.learning_rate.to_string()),
        ("activation", c.activation.name().to_string()),
    ]))
}

/// Brackets as (s, n, r) tuples.
#[pyfunction]
fn bracket_schedule(max_epochs: u64, eta: u64) -> PyResult<Vec<(u32, usize, f64)>> {
    let plans = tuner::bracket_schedule(&HyperbandParams { max_epochs, eta }).map_err(value_err)?;
    Ok(plans.iter().map(|b| (b.s, b.n, b.r)).collect())
}

#[pyclass(name = "TuneResult", module = "packtrain", frozen, get_all)]
struct PyTuneResult {
    strategy: String,
    best_config_id: Option<usize>,
    best_loss: Option<f64>,
    total_ms: f64,
    epochs_charged: f64,
    failed_brackets: usize,
}

#[pymethods]
impl PyTuneResult {
    fn __repr__(&self) -> String {
        format!(
            "TuneResult(strategy={:?}, best_config_id={:?}, total_ms={})",
            self.strategy, self.best_config_id, self.total_ms
        )
    }
}

/// Runs pack-aware Hyperband on the simulator over the standard space.
/// `threshold=None` uses the most permissive profitable kNN threshold.
#[pyfunction]
#[pyo3(signature = (strategy, profile_name="mlp3", max_epochs=81, eta=3, seed=0, threshold=None, metric="indexsum", group_size=DEFAULT_RANDOM_GROUP))]
#[allow(clippy::too_many_arguments)]
fn tune(
    py: Python<'_>,
    strategy: &str,
    profile_name: &str,
    max_epochs: u64,
    eta: u64,
    seed: u64,
    threshold: Option<f64>,
    metric: &str,
    group_size: usize,
) -> PyResult<PyTuneResult> {
    let ctx = context(profile_name)?;
    let space = ConfigSpace::standard();
    let m = self::metric(metric, &ctx)?;
    let strategy = match strategy {
        "original" => Strategy::Original,
        "batchsize" => Strategy::BatchSize,
        "random" => Strategy::Random { m: group_size },
        "knn" => {
            let threshold = threshold.unwrap_or_else(|| ctx.profitable_threshold(&space.all(), &m));
            Strategy::Knn { threshold, metric: m }
        }
        other => return Err(value_err(format!("unknown strategy `{other}`"))),
    };
    let params = HyperbandParams { max_epochs, eta };
    let out = py
        .detach(|| {
            let mut exec = SimExecutor::new(ctx.device.clone(), ctx.model.clone(), seed);
            tuner::packed_hyperband(&params, &space, &strategy, &ctx, &mut exec, seed)
        })
        .map_err(value_err)?;
    Ok(PyTuneResult {
        strategy: out.strategy,
        best_config_id: out.best.as_ref().map(|b| b.config.config_id),
        best_loss: out.best.as_ref().map(|b| b.loss),
        total_ms: out.total_ms,
        epochs_charged: out.epochs_charged,
        failed_brackets: out.failed_brackets,
    })
}

/// Runs a TOML experiment spec and returns the rendered report. A spec that
/// sets `out` also writes the file.
#[pyfunction]
fn run_experiment(py: Python<'_>, spec: &str) -> PyResult<String> {
    let spec = ExperimentSpec::parse(spec).map_err(value_err)?;
    py.detach(|| spec.execute()).map_err(|e| match e {
        ExperimentError::OutOfMemory(_) => PyMemoryError::new_err(e.to_string()),
        other => value_err(other),
    })
}

#[pymodule]
fn packtrain(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModelSpec>()?;
    m.add_class::<PyTuneResult>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(builtin_profiles, m)?)?;
    m.add_function(wrap_pyfunction!(step_time, m)?)?;
    m.add_function(wrap_pyfunction!(switching_overhead, m)?)?;
    m.add_function(wrap_pyfunction!(config_distance, m)?)?;
    m.add_function(wrap_pyfunction!(describe_config, m)?)?;
    m.add_function(wrap_pyfunction!(bracket_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(tune, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
