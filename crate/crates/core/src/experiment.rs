//! Declarative experiments: profiling matrices, tuning campaigns and
//! simulator what-ifs read from a TOML file and rendered as [`Report`]s.
//!
//! ```toml
//! mode = "simulate"
//! device = "mlp3"
//! seed = 7
//!
//! [[simulate.plans]]
//! name = "pair"
//! members = [{ batch = 32 }, { batch = 32 }]
//! ```

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ExperimentError, SimError, TunerError};
use crate::graph::Activation;
use crate::optim::OptimizerKind;
use crate::report::{Cell, Report, ReportFormat};
use crate::sim::profile::{self, ProfileFile};
use crate::sim::{
    check_fit_members, epoch_time_ms, estimate_step_time, shared_input_groups, switching_overhead, DeviceProfile,
    ModelProfile, SimMember,
};
use crate::tuner::{
    hyperband, packed_hyperband, AuditEvent, AuditRecord, ConfigSpace, EngineExecutor, EngineMode, Executor,
    HyperbandParams, Metric, PackContext, SimExecutor, Strategy, TrainTimeModel, TuneOutcome, DEFAULT_RANDOM_GROUP,
    DEFAULT_THRESHOLD,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Profile,
    Tune,
    Simulate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub mode: Mode,
    /// Builtin profile name or path to a profile file.
    pub device: String,
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub format: ReportFormat,
    #[serde(default)]
    pub profile: Option<ProfileSection>,
    #[serde(default)]
    pub tune: Option<TuneSection>,
    #[serde(default)]
    pub simulate: Option<SimulateSection>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_samples() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    /// Model profiles; empty means the device file's own model.
    #[serde(default)]
    pub models: Vec<String>,
    #[serde(default = "default_member_counts")]
    pub member_counts: Vec<usize>,
    #[serde(default = "default_batch_sizes")]
    pub batch_sizes: Vec<usize>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Sweep every factor combination instead of the all-shared case only.
    #[serde(default)]
    pub ablation: bool,
}

fn default_member_counts() -> Vec<usize> {
    vec![1, 2, 3, 4]
}

fn default_batch_sizes() -> Vec<usize> {
    vec![32]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Sim,
    Engine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThresholdSpec {
    Value(f64),
    Word(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSpec {
    #[serde(default)]
    pub batch_sizes: Option<Vec<usize>>,
    #[serde(default)]
    pub optimizers: Option<Vec<String>>,
    #[serde(default)]
    pub learning_rates: Option<Vec<f64>>,
    #[serde(default)]
    pub activations: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    #[serde(default = "default_engine_samples")]
    pub samples: usize,
    #[serde(default = "default_engine_dim")]
    pub dim: usize,
    #[serde(default = "default_engine_classes")]
    pub classes: u32,
    #[serde(default = "default_engine_hidden")]
    pub hidden: Vec<usize>,
}

fn default_engine_samples() -> usize {
    600
}
fn default_engine_dim() -> usize {
    6
}
fn default_engine_classes() -> u32 {
    3
}
fn default_engine_hidden() -> Vec<usize> {
    vec![8, 8]
}

impl Default for EngineSection {
    fn default() -> Self {
        Self {
            samples: default_engine_samples(),
            dim: default_engine_dim(),
            classes: default_engine_classes(),
            hidden: default_engine_hidden(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneSection {
    #[serde(default)]
    pub backend: Backend,
    /// Model profile for the simulator backend; defaults to the device file's.
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: u64,
    #[serde(default = "default_eta")]
    pub eta: u64,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<String>,
    #[serde(default = "default_metric")]
    pub metric: String,
    /// A distance or `"auto"`: the widest distance at which every pair of
    /// the space still gains from packing.
    #[serde(default)]
    pub threshold: Option<ThresholdSpec>,
    #[serde(default = "default_random_m")]
    pub random_m: usize,
    #[serde(default)]
    pub space: Option<SpaceSpec>,
    #[serde(default)]
    pub engine: Option<EngineSection>,
    /// NDJSON audit log of every strategy's run.
    #[serde(default)]
    pub audit: Option<PathBuf>,
}

fn default_max_epochs() -> u64 {
    81
}
fn default_eta() -> u64 {
    3
}
fn default_strategies() -> Vec<String> {
    ["original", "batchsize", "random", "knn"].map(String::from).to_vec()
}
fn default_metric() -> String {
    "indexsum".into()
}
fn default_random_m() -> usize {
    DEFAULT_RANDOM_GROUP
}

impl Default for TuneSection {
    fn default() -> Self {
        Self {
            backend: Backend::Sim,
            model: None,
            max_epochs: default_max_epochs(),
            eta: default_eta(),
            strategies: default_strategies(),
            metric: default_metric(),
            threshold: None,
            random_m: default_random_m(),
            space: None,
            engine: None,
            audit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub plans: Vec<PlanSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSpec {
    pub name: String,
    pub members: Vec<MemberSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSpec {
    #[serde(default)]
    pub model: Option<String>,
    pub batch: usize,
    #[serde(default = "default_data")]
    pub data: String,
    #[serde(default = "default_true")]
    pub preprocess: bool,
    #[serde(default)]
    pub optimizer: Option<String>,
}

fn default_data() -> String {
    "shared".into()
}
fn default_true() -> bool {
    true
}

/// Command-line values that replace spec fields.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub device: Option<String>,
    pub out: Option<PathBuf>,
    pub strategy: Option<String>,
    pub metric: Option<String>,
    pub threshold: Option<f64>,
}

fn field_error(path: &str, inner: &str) -> ExperimentError {
    let named = ["missing field `", "unknown field `"]
        .iter()
        .find_map(|p| inner.split(p).nth(1).and_then(|rest| rest.split('`').next()));
    let field = match (path, named) {
        (".", Some(name)) | ("", Some(name)) => name.to_string(),
        (p, Some(name)) if p == name || p.ends_with(&format!(".{name}")) => p.to_string(),
        (p, Some(name)) => format!("{p}.{name}"),
        (".", None) | ("", None) => "<document>".to_string(),
        (p, None) => p.to_string(),
    };
    ExperimentError::spec(field, inner)
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let value: toml::Value = toml::from_str(text).map_err(|e| ExperimentError::spec("<document>", e.message()))?;
        serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            field_error(&path, &e.into_inner().to_string())
        })
    }

    /// Reads a spec file; relative paths inside it resolve against its
    /// directory.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::spec("--spec", format!("cannot read {}: {e}", path.display())))?;
        let mut spec = Self::parse(&text)?;
        spec.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(spec)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(d) = &o.device {
            self.device = d.clone();
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        if o.strategy.is_some() || o.metric.is_some() || o.threshold.is_some() {
            let tune = self.tune.get_or_insert_with(TuneSection::default);
            if let Some(s) = &o.strategy {
                tune.strategies = vec![s.clone()];
            }
            if let Some(m) = &o.metric {
                tune.metric = m.clone();
            }
            if let Some(t) = o.threshold {
                tune.threshold = Some(ThresholdSpec::Value(t));
            }
        }
    }

    fn resolve(&self, field: &str, name_or_path: &str) -> Result<ProfileFile, ExperimentError> {
        let found = match profile::builtin(name_or_path) {
            Err(SimError::UnknownProfile(_)) => profile::load(self.base_dir.join(name_or_path)),
            other => other,
        };
        found.map_err(|e| ExperimentError::spec(field, e))
    }

    pub fn device_profile(&self) -> Result<DeviceProfile, ExperimentError> {
        let file = self.resolve("device", &self.device)?;
        file.device.ok_or_else(|| ExperimentError::spec("device", "profile has no device coefficients"))
    }

    fn model_profile(&self, field: &str, name: Option<&str>) -> Result<ModelProfile, ExperimentError> {
        let (field, file) = match name {
            Some(n) => (field, self.resolve(field, n)?),
            None => ("device", self.resolve("device", &self.device)?),
        };
        file.model.ok_or_else(|| ExperimentError::spec(field, "profile has no model coefficients"))
    }

    pub fn run(&self) -> Result<Report, ExperimentError> {
        match self.mode {
            Mode::Profile => run_profile(self),
            Mode::Tune => run_tune(self),
            Mode::Simulate => run_simulate(self),
        }
    }

    /// Runs the experiment and writes the report to `out`, or returns it
    /// rendered when no path is set.
    pub fn execute(&self) -> Result<String, ExperimentError> {
        let text = self.run()?.render(self.format);
        if let Some(out) = &self.out {
            let path = self.base_dir.join(out);
            std::fs::write(&path, &text)
                .map_err(|e| ExperimentError::spec("out", format!("cannot write {}: {e}", path.display())))?;
        }
        Ok(text)
    }
}

const METRIC_COLUMNS: [&str; 9] =
    ["memory_bytes", "oom", "t_seq_ms", "t_pack_ms", "impv", "te_seq_ms", "te_models_ms", "swoh_ms", "deficit_bytes"];

/// Memory, step time and switching overhead of one packing plan.
fn plan_cells(device: &DeviceProfile, members: &[SimMember], samples: usize) -> Result<Vec<Cell>, ExperimentError> {
    let memory: u64 = members.iter().map(SimMember::memory).sum();
    let fit = check_fit_members(members, device);
    let groups = shared_input_groups(members);
    let step = estimate_step_time(device, members, &groups).map_err(|e| ExperimentError::Io(e.to_string()))?;
    let epochs: Vec<f64> = members.iter().map(|m| epoch_time_ms(device, m, samples)).collect();
    let sw = switching_overhead(device, &epochs).map_err(|e| ExperimentError::Io(e.to_string()))?;
    let te_models: f64 = sw.te_models.iter().sum();
    let (oom, deficit) = match fit {
        Ok(_) => (false, None),
        Err(SimError::OutOfMemory { deficit, .. }) => (true, Some(deficit)),
        Err(e) => return Err(ExperimentError::Io(e.to_string())),
    };
    let packed = |v: f64| if oom { Cell::Empty } else { Cell::Float(v) };
    Ok(vec![
        memory.into(),
        oom.into(),
        step.t_seq.into(),
        packed(step.t_pack),
        packed(step.impv),
        sw.te_seq.into(),
        te_models.into(),
        sw.swoh.into(),
        deficit.into(),
    ])
}

fn check_positive(field: &str, values: &[usize]) -> Result<(), ExperimentError> {
    if values.is_empty() || values.contains(&0) {
        return Err(ExperimentError::spec(field, "must be a non-empty list of positive integers"));
    }
    Ok(())
}

/// One row of the factor grid.
#[derive(Debug, Clone, Copy)]
struct Factors {
    same_model: bool,
    same_data: bool,
    preprocess: bool,
    same_optimizer: bool,
    same_batch: bool,
}

impl Factors {
    const BASELINE: Factors =
        Factors { same_model: true, same_data: true, preprocess: true, same_optimizer: true, same_batch: true };

    fn grid(two_models: bool) -> Vec<Factors> {
        let mut out = Vec::new();
        for bits in 0u8..32 {
            let f = Factors {
                same_model: bits & 1 == 0,
                same_data: bits & 2 == 0,
                preprocess: bits & 4 == 0,
                same_optimizer: bits & 8 == 0,
                same_batch: bits & 16 == 0,
            };
            if f.same_model || two_models {
                out.push(f);
            }
        }
        out
    }

    /// Member `i` of the pack. Odd members take the "different" side of each
    /// factor.
    fn member(&self, i: usize, models: &[ModelProfile], base: usize, batch: usize) -> SimMember {
        let odd = i % 2 == 1;
        let mut profile =
            if odd && !self.same_model { models[(base + 1) % models.len()].clone() } else { models[base].clone() };
        if odd && !self.same_optimizer {
            let m = if profile.optimizer_state_multiplier == 1.0 { 3.0 } else { 1.0 };
            profile = profile.with_optimizer_multiplier(m);
        }
        SimMember {
            profile,
            batch_size: if odd && !self.same_batch { (batch / 2).max(1) } else { batch },
            data: if self.same_data { "shared".into() } else { format!("stream{i}") },
            preprocess: self.preprocess,
        }
    }
}

/// Pack-versus-sequential sweep over model count, batch size and the
/// sharing factors, one row per combination. OOM rows are flagged and the
/// sweep continues.
pub fn run_profile(spec: &ExperimentSpec) -> Result<Report, ExperimentError> {
    let device = spec.device_profile()?;
    let section = spec.profile.clone().ok_or_else(|| ExperimentError::spec("profile", "section is required"))?;
    check_positive("profile.member_counts", &section.member_counts)?;
    check_positive("profile.batch_sizes", &section.batch_sizes)?;
    if section.samples == 0 {
        return Err(ExperimentError::spec("profile.samples", "must be positive"));
    }
    let models = if section.models.is_empty() {
        vec![spec.model_profile("profile.models", None)?]
    } else {
        section.models.iter().map(|m| spec.model_profile("profile.models", Some(m))).collect::<Result<Vec<_>, _>>()?
    };
    let mut columns = vec![
        "case",
        "model",
        "members",
        "batch",
        "same_model",
        "same_data",
        "preprocess",
        "same_optimizer",
        "same_batch",
    ];
    columns.extend(METRIC_COLUMNS);
    let mut report = Report::new(columns);
    let mut case = 0usize;
    for (base, model) in models.iter().enumerate() {
        for &n in &section.member_counts {
            for &batch in &section.batch_sizes {
                let grid =
                    if n == 1 || !section.ablation { vec![Factors::BASELINE] } else { Factors::grid(models.len() > 1) };
                for f in grid {
                    let members: Vec<SimMember> = (0..n).map(|i| f.member(i, &models, base, batch)).collect();
                    let mut row: Vec<Cell> = vec![
                        case.into(),
                        model.name.as_str().into(),
                        n.into(),
                        batch.into(),
                        f.same_model.into(),
                        f.same_data.into(),
                        f.preprocess.into(),
                        f.same_optimizer.into(),
                        f.same_batch.into(),
                    ];
                    row.extend(plan_cells(&device, &members, section.samples)?);
                    report.push(row);
                    case += 1;
                }
            }
        }
    }
    Ok(report)
}

/// Device what-if over the listed plans. An empty plan list yields a
/// header-only report.
pub fn run_simulate(spec: &ExperimentSpec) -> Result<Report, ExperimentError> {
    let device = spec.device_profile()?;
    let section = spec.simulate.clone().unwrap_or(SimulateSection { samples: default_samples(), plans: Vec::new() });
    if section.samples == 0 {
        return Err(ExperimentError::spec("simulate.samples", "must be positive"));
    }
    let mut columns = vec!["plan", "members"];
    columns.extend(METRIC_COLUMNS);
    let mut report = Report::new(columns);
    let mut cache: BTreeMap<Option<String>, ModelProfile> = BTreeMap::new();
    for (p, plan) in section.plans.iter().enumerate() {
        if plan.members.is_empty() {
            return Err(ExperimentError::spec(format!("simulate.plans[{p}].members"), "must not be empty"));
        }
        let mut members = Vec::new();
        for (i, m) in plan.members.iter().enumerate() {
            let field = format!("simulate.plans[{p}].members[{i}]");
            if m.batch == 0 {
                return Err(ExperimentError::spec(format!("{field}.batch"), "must be positive"));
            }
            let mut profile = match cache.get(&m.model) {
                Some(p) => p.clone(),
                None => {
                    let p = spec.model_profile(&format!("{field}.model"), m.model.as_deref())?;
                    cache.insert(m.model.clone(), p.clone());
                    p
                }
            };
            if let Some(opt) = &m.optimizer {
                let kind: OptimizerKind =
                    opt.parse().map_err(|e: String| ExperimentError::spec(format!("{field}.optimizer"), e))?;
                profile = profile.with_optimizer_multiplier(kind.state_multiplier());
            }
            members.push(SimMember { profile, batch_size: m.batch, data: m.data.clone(), preprocess: m.preprocess });
        }
        let mut row: Vec<Cell> = vec![plan.name.as_str().into(), members.len().into()];
        row.extend(plan_cells(&device, &members, section.samples)?);
        report.push(row);
    }
    Ok(report)
}

fn parse_list<T>(
    field: &str,
    values: &[String],
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<Vec<T>, ExperimentError> {
    values.iter().map(|v| parse(v).map_err(|e| ExperimentError::spec(field, e))).collect()
}

fn build_space(spec: Option<&SpaceSpec>) -> Result<ConfigSpace, ExperimentError> {
    let mut space = ConfigSpace::standard();
    if let Some(s) = spec {
        if let Some(b) = &s.batch_sizes {
            check_positive("tune.space.batch_sizes", b)?;
            space.batch_sizes = b.clone();
        }
        if let Some(o) = &s.optimizers {
            space.optimizers = parse_list("tune.space.optimizers", o, str::parse::<OptimizerKind>)?;
        }
        if let Some(lr) = &s.learning_rates {
            space.learning_rates = lr.clone();
        }
        if let Some(a) = &s.activations {
            space.activations = parse_list("tune.space.activations", a, str::parse::<Activation>)?;
        }
    }
    space.validate().map_err(|e| ExperimentError::spec("tune.space", e))?;
    Ok(space)
}

fn parse_metric(name: &str, device: &DeviceProfile, model: &ModelProfile) -> Result<Metric, ExperimentError> {
    match name {
        "indexsum" => Ok(Metric::IndexSum),
        "euclid" => Ok(Metric::Euclid),
        "traintime" => Ok(Metric::TrainTime(TrainTimeModel { device: device.clone(), model: model.clone() })),
        other => Err(ExperimentError::spec("tune.metric", format!("unknown metric `{other}`"))),
    }
}

fn parse_strategy(
    name: &str,
    section: &TuneSection,
    metric: &Metric,
    ctx: &PackContext,
    space: &ConfigSpace,
) -> Result<Strategy, ExperimentError> {
    match name {
        "original" => Ok(Strategy::Original),
        "batchsize" => Ok(Strategy::BatchSize),
        "random" => {
            if section.random_m == 0 {
                return Err(ExperimentError::spec("tune.random_m", "must be positive"));
            }
            Ok(Strategy::Random { m: section.random_m })
        }
        "knn" => {
            let threshold = match &section.threshold {
                None => DEFAULT_THRESHOLD,
                Some(ThresholdSpec::Value(t)) if t.is_finite() && *t >= 0.0 => *t,
                Some(ThresholdSpec::Word(w)) if w == "auto" => ctx.profitable_threshold(&space.all(), metric),
                Some(_) => {
                    return Err(ExperimentError::spec("tune.threshold", "expected a non-negative number or \"auto\""))
                }
            };
            Ok(Strategy::Knn { threshold, metric: metric.clone() })
        }
        other => Err(ExperimentError::spec("tune.strategies", format!("unknown strategy `{other}`"))),
    }
}

#[derive(Serialize)]
struct TaggedRecord<'a> {
    strategy: &'a str,
    #[serde(flatten)]
    record: &'a AuditRecord,
}

const TUNE_COLUMNS: [&str; 12] = [
    "strategy",
    "status",
    "total_ms",
    "speedup",
    "best_config_id",
    "best_config",
    "best_loss",
    "epochs_charged",
    "groups",
    "oom_fallbacks",
    "failed_brackets",
    "threshold",
];

/// All requested strategies over one sampled config stream, one row each.
/// A strategy that fails is reported in its row; the others still run.
pub fn run_tune(spec: &ExperimentSpec) -> Result<Report, ExperimentError> {
    let device = spec.device_profile()?;
    let section = spec.tune.clone().unwrap_or_default();
    let params = HyperbandParams { max_epochs: section.max_epochs, eta: section.eta };
    params.validate().map_err(|e| {
        let field = if section.eta < 2 { "tune.eta" } else { "tune.max_epochs" };
        ExperimentError::spec(field, e)
    })?;
    if section.strategies.is_empty() {
        return Err(ExperimentError::spec("tune.strategies", "must not be empty"));
    }
    let space = build_space(section.space.as_ref())?;
    let engine = section.engine.clone().unwrap_or_default();
    let make_engine = |mode: EngineMode| {
        EngineExecutor::synthetic(
            engine.samples,
            engine.dim,
            engine.classes,
            spec.seed,
            engine.hidden.clone(),
            mode,
            device.clone(),
        )
        .map_err(|e| ExperimentError::spec("tune.engine", e))
    };
    let model = match section.backend {
        Backend::Sim => spec.model_profile("tune.model", section.model.as_deref())?,
        Backend::Engine => {
            make_engine(EngineMode::Packed)?.model_profile().map_err(|e| ExperimentError::spec("tune.engine", e))?
        }
    };
    let ctx = PackContext { device: device.clone(), model: model.clone() };
    for c in space.all() {
        let demand = ctx.demand(&c);
        if demand > device.memory_capacity {
            return Err(ExperimentError::OutOfMemory(
                TunerError::ConfigTooLarge { config_id: c.config_id, demand, capacity: device.memory_capacity }
                    .to_string(),
            ));
        }
    }
    let metric = parse_metric(&section.metric, &device, &model)?;
    let strategies = section
        .strategies
        .iter()
        .map(|s| parse_strategy(s, &section, &metric, &ctx, &space))
        .collect::<Result<Vec<_>, _>>()?;

    let mut outcomes: Vec<(Strategy, Result<TuneOutcome, TunerError>)> = Vec::new();
    for strategy in strategies {
        let mut executor: Box<dyn Executor> = match section.backend {
            Backend::Sim => Box::new(SimExecutor::new(device.clone(), model.clone(), spec.seed)),
            Backend::Engine if strategy == Strategy::Original => Box::new(make_engine(EngineMode::Sequential)?),
            Backend::Engine => Box::new(make_engine(EngineMode::Packed)?),
        };
        let outcome = match &strategy {
            Strategy::Original => hyperband(&params, &space, executor.as_mut(), spec.seed),
            s => packed_hyperband(&params, &space, s, &ctx, executor.as_mut(), spec.seed),
        };
        outcomes.push((strategy, outcome));
    }

    if let Some(path) = &section.audit {
        let path = spec.base_dir.join(path);
        let mut text = Vec::new();
        for (_, outcome) in &outcomes {
            if let Ok(o) = outcome {
                for record in &o.audit {
                    serde_json::to_writer(&mut text, &TaggedRecord { strategy: &o.strategy, record })
                        .expect("records serialize");
                    text.push(b'\n');
                }
            }
        }
        std::fs::File::create(&path)
            .and_then(|mut f| f.write_all(&text))
            .map_err(|e| ExperimentError::spec("tune.audit", format!("cannot write {}: {e}", path.display())))?;
    }

    let baseline = outcomes.iter().find_map(|(s, o)| match (s, o) {
        (Strategy::Original, Ok(o)) => Some(o.total_ms),
        _ => None,
    });
    let mut report = Report::new(TUNE_COLUMNS.to_vec());
    for (strategy, outcome) in &outcomes {
        let threshold: Cell = match strategy {
            Strategy::Knn { threshold, .. } => (*threshold).into(),
            _ => Cell::Empty,
        };
        let row: Vec<Cell> = match outcome {
            Ok(o) => {
                let count = |e: AuditEvent| o.audit.iter().filter(|r| r.event == e).count();
                vec![
                    strategy.name().into(),
                    "ok".into(),
                    o.total_ms.into(),
                    baseline.map(|b| b / o.total_ms).into(),
                    o.best.as_ref().map(|b| b.config.config_id).into(),
                    o.best.as_ref().map(|b| b.config.label()).into(),
                    o.best.as_ref().map(|b| b.loss).into(),
                    o.epochs_charged.into(),
                    count(AuditEvent::Group).into(),
                    count(AuditEvent::OomFallback).into(),
                    o.failed_brackets.into(),
                    threshold,
                ]
            }
            Err(e) => {
                let mut row = vec![strategy.name().into(), format!("error: {e}").into()];
                row.extend(std::iter::repeat_n(Cell::Empty, TUNE_COLUMNS.len() - 3));
                row.push(threshold);
                row
            }
        };
        report.push(row);
    }
    Ok(report)
}
