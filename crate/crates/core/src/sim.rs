//! Single-device memory accounting and an additive step-time cost model.
//!
//! Step time of one model in isolation is
//! `t_fix + b * (t_tx + t_pre) + b * compute`. A packed step pays `t_fix`
//! once, transfers each shared input stream once at that stream's largest
//! batch, and serializes member compute scaled by the contention factor.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub memory_capacity: u64,
    /// Fixed per-step overhead, ms.
    pub t_fix: f64,
    /// Host-to-device transfer per sample, ms.
    pub t_tx: f64,
    /// Preprocessing per sample, ms.
    pub t_pre: f64,
    pub contention_factor: f64,
    /// Cost of one model swap, ms.
    pub switch_overhead: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub name: String,
    pub parameter_bytes: u64,
    pub activation_bytes_per_sample: u64,
    pub compute_ms_per_sample: f64,
    pub optimizer_state_multiplier: f64,
    /// Per-model framework context resident on the device.
    pub context_bytes: u64,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<(), SimError> {
        let coeffs = [self.t_fix, self.t_tx, self.t_pre, self.switch_overhead];
        if self.memory_capacity == 0 {
            return Err(SimError::Invalid("memory_capacity must be positive".into()));
        }
        if coeffs.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SimError::Invalid("device time coefficients must be non-negative".into()));
        }
        if !(self.contention_factor.is_finite() && self.contention_factor >= 1.0) {
            return Err(SimError::Invalid("contention_factor must be >= 1".into()));
        }
        Ok(())
    }
}

impl ModelProfile {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.compute_ms_per_sample.is_finite() && self.compute_ms_per_sample >= 0.0) {
            return Err(SimError::Invalid(format!("{}: compute_ms_per_sample must be non-negative", self.name)));
        }
        if !(self.optimizer_state_multiplier.is_finite() && self.optimizer_state_multiplier >= 0.0) {
            return Err(SimError::Invalid(format!("{}: optimizer_state_multiplier must be non-negative", self.name)));
        }
        Ok(())
    }

    pub fn with_optimizer_multiplier(&self, multiplier: f64) -> Self {
        Self { optimizer_state_multiplier: multiplier, ..self.clone() }
    }
}

/// Device bytes needed to train `model` at `batch_size`.
pub fn estimate_memory(model: &ModelProfile, batch_size: usize) -> u64 {
    let state = (model.parameter_bytes as f64 * model.optimizer_state_multiplier).round() as u64;
    state + model.activation_bytes_per_sample * batch_size as u64 + model.context_bytes
}

/// Ok with the total demand when it fits, otherwise the deficit.
pub fn check_fit(demands: &[u64], capacity: u64) -> Result<u64, SimError> {
    let demand: u64 = demands.iter().sum();
    if demand <= capacity {
        Ok(demand)
    } else {
        Err(SimError::OutOfMemory { demand, capacity, deficit: demand - capacity })
    }
}

/// One model in a simulated pack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMember {
    pub profile: ModelProfile,
    pub batch_size: usize,
    /// Name of the input stream; members with equal streams may share input.
    pub data: String,
    pub preprocess: bool,
}

impl SimMember {
    pub fn memory(&self) -> u64 {
        estimate_memory(&self.profile, self.batch_size)
    }

    fn per_sample_io(&self, device: &DeviceProfile) -> f64 {
        device.t_tx + if self.preprocess { device.t_pre } else { 0.0 }
    }

    /// Step time trained alone.
    pub fn solo_step_ms(&self, device: &DeviceProfile) -> f64 {
        let b = self.batch_size as f64;
        device.t_fix + b * self.per_sample_io(device) + b * self.profile.compute_ms_per_sample
    }
}

pub fn check_fit_members(members: &[SimMember], device: &DeviceProfile) -> Result<u64, SimError> {
    let demands: Vec<u64> = members.iter().map(SimMember::memory).collect();
    check_fit(&demands, device.memory_capacity)
}

/// Groups members that read the same stream with the same preprocessing.
pub fn shared_input_groups(members: &[SimMember]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<(&str, bool), Vec<usize>> = BTreeMap::new();
    for (i, m) in members.iter().enumerate() {
        groups.entry((m.data.as_str(), m.preprocess)).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by_key(|g| g[0]);
    out
}

/// Every member in its own group.
pub fn isolated_groups(members: &[SimMember]) -> Vec<Vec<usize>> {
    (0..members.len()).map(|i| vec![i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTimeReport {
    pub t_seq: f64,
    pub t_pack: f64,
    pub impv: f64,
}

impl StepTimeReport {
    pub fn new(t_seq: f64, t_pack: f64) -> Self {
        Self { t_seq, t_pack, impv: improvement(t_seq, t_pack) }
    }
}

/// Relative single-step saving of packed over sequential execution.
pub fn improvement(t_seq: f64, t_pack: f64) -> f64 {
    (t_seq - t_pack) / t_seq
}

pub fn sequential_step_ms(device: &DeviceProfile, members: &[SimMember]) -> f64 {
    members.iter().map(|m| m.solo_step_ms(device)).sum()
}

/// Packed step time. `groups` must partition `0..members.len()`; a group's
/// stream is transferred once at its largest member batch. Contention only
/// applies when more than one model shares the device.
pub fn packed_step_ms(device: &DeviceProfile, members: &[SimMember], groups: &[Vec<usize>]) -> Result<f64, SimError> {
    if members.is_empty() {
        return Err(SimError::Invalid("no members".into()));
    }
    let mut seen = vec![false; members.len()];
    for g in groups {
        if g.is_empty() {
            return Err(SimError::Invalid("empty input group".into()));
        }
        for &i in g {
            if i >= members.len() || std::mem::replace(&mut seen[i], true) {
                return Err(SimError::Invalid(format!("input groups do not partition members (index {i})")));
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(SimError::Invalid("input groups do not cover every member".into()));
    }
    let io: f64 = groups
        .iter()
        .map(|g| {
            let driver = g.iter().map(|&i| members[i].batch_size).max().expect("non-empty") as f64;
            let per_sample = g.iter().map(|&i| members[i].per_sample_io(device)).fold(0.0, f64::max);
            driver * per_sample
        })
        .sum();
    let compute: f64 = members.iter().map(|m| m.batch_size as f64 * m.profile.compute_ms_per_sample).sum();
    let c = if members.len() > 1 { device.contention_factor } else { 1.0 };
    Ok(device.t_fix + io + c * compute)
}

pub fn estimate_step_time(
    device: &DeviceProfile,
    members: &[SimMember],
    groups: &[Vec<usize>],
) -> Result<StepTimeReport, SimError> {
    let t_pack = packed_step_ms(device, members, groups)?;
    Ok(StepTimeReport::new(sequential_step_ms(device, members), t_pack))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchReport {
    /// Epoch time of training all models back to back on one device.
    pub te_seq: f64,
    /// Epoch time of each model trained on its own.
    pub te_models: Vec<f64>,
    pub swoh: f64,
}

/// Switching overhead of training `epoch_times.len()` models one after the
/// other: the sequential run adds one context swap between neighbours.
pub fn switching_overhead(device: &DeviceProfile, epoch_times: &[f64]) -> Result<SwitchReport, SimError> {
    if epoch_times.is_empty() {
        return Err(SimError::Invalid("switching overhead needs at least one model".into()));
    }
    let swaps = (epoch_times.len() - 1) as f64;
    let te_seq = epoch_times.iter().sum::<f64>() + swaps * device.switch_overhead;
    let swoh = swoh_from_fields(te_seq, epoch_times);
    Ok(SwitchReport { te_seq, te_models: epoch_times.to_vec(), swoh })
}

pub fn swoh_from_fields(te_seq: f64, te_models: &[f64]) -> f64 {
    te_seq - te_models.iter().sum::<f64>()
}

/// Steps needed to consume `epochs` passes over `samples` at `batch_size`,
/// counting a trailing partial batch as a step.
pub fn steps_for(samples: usize, batch_size: usize, epochs: f64) -> u64 {
    let per_epoch = samples.div_ceil(batch_size) as f64;
    ((per_epoch * epochs).ceil() as u64).max(1)
}

pub fn epoch_time_ms(device: &DeviceProfile, member: &SimMember, samples: usize) -> f64 {
    steps_for(samples, member.batch_size, 1.0) as f64 * member.solo_step_ms(device)
}

/// A member of a simulated packed run with its step budget.
#[derive(Debug, Clone, PartialEq)]
pub struct SimJob {
    pub member: SimMember,
    pub steps: u64,
}

/// Wall time of training `jobs` packed together until each finishes its
/// steps. Finished members leave the pack, so the run proceeds in phases;
/// input groups are recomputed per phase.
pub fn packed_run_ms(device: &DeviceProfile, jobs: &[SimJob]) -> Result<f64, SimError> {
    let mut remaining: Vec<(usize, u64)> = jobs.iter().enumerate().map(|(i, j)| (i, j.steps)).collect();
    let mut total = 0.0;
    while !remaining.is_empty() {
        let phase = remaining.iter().map(|&(_, s)| s).min().expect("non-empty");
        let members: Vec<SimMember> = remaining.iter().map(|&(i, _)| jobs[i].member.clone()).collect();
        let groups = shared_input_groups(&members);
        total += phase as f64 * packed_step_ms(device, &members, &groups)?;
        remaining.iter_mut().for_each(|(_, s)| *s -= phase);
        remaining.retain(|&(_, s)| s > 0);
    }
    Ok(total)
}

pub mod profile {
    //! `key = value` profile files.

    use std::collections::BTreeMap;
    use std::path::Path;

    use super::{DeviceProfile, ModelProfile};
    use crate::error::SimError;

    pub const BUILTIN: [(&str, &str); 4] = [
        ("mlp3", include_str!("../profiles/mlp3.profile")),
        ("mobilenet", include_str!("../profiles/mobilenet.profile")),
        ("resnet50", include_str!("../profiles/resnet50.profile")),
        ("densenet121", include_str!("../profiles/densenet121.profile")),
    ];

    /// Device and model coefficients read from one file. Either half may be
    /// absent.
    #[derive(Debug, Clone, PartialEq)]
    pub struct ProfileFile {
        pub device: Option<DeviceProfile>,
        pub model: Option<ModelProfile>,
    }

    impl ProfileFile {
        pub fn device(&self) -> Result<&DeviceProfile, SimError> {
            self.device.as_ref().ok_or_else(|| SimError::MissingKey("memory_capacity".into()))
        }

        pub fn model(&self) -> Result<&ModelProfile, SimError> {
            self.model.as_ref().ok_or_else(|| SimError::MissingKey("name".into()))
        }
    }

    const DEVICE_KEYS: [&str; 6] =
        ["memory_capacity", "t_fix", "t_tx", "t_pre", "contention_factor", "switch_overhead"];
    const MODEL_KEYS: [&str; 6] = [
        "name",
        "parameter_bytes",
        "activation_bytes_per_sample",
        "compute_ms_per_sample",
        "optimizer_state_multiplier",
        "context_bytes",
    ];

    pub fn parse(text: &str) -> Result<ProfileFile, SimError> {
        let mut kv: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SimError::Profile { line: i + 1, reason: "expected key = value".into() })?;
            let k = k.trim();
            if !DEVICE_KEYS.contains(&k) && !MODEL_KEYS.contains(&k) {
                return Err(SimError::Profile { line: i + 1, reason: format!("unknown key `{k}`") });
            }
            if kv.insert(k, (i + 1, v.trim())).is_some() {
                return Err(SimError::Profile { line: i + 1, reason: format!("duplicate key `{k}`") });
            }
        }
        let num = |k: &str| -> Result<f64, SimError> {
            let (line, v) = kv.get(k).ok_or_else(|| SimError::MissingKey(k.to_string()))?;
            v.parse().map_err(|_| SimError::Profile { line: *line, reason: format!("`{k}` is not a number") })
        };
        let int = |k: &str| -> Result<u64, SimError> {
            let (line, v) = kv.get(k).ok_or_else(|| SimError::MissingKey(k.to_string()))?;
            v.parse().map_err(|_| SimError::Profile { line: *line, reason: format!("`{k}` is not an integer") })
        };
        let device = if DEVICE_KEYS.iter().any(|k| kv.contains_key(k)) {
            let d = DeviceProfile {
                memory_capacity: int("memory_capacity")?,
                t_fix: num("t_fix")?,
                t_tx: num("t_tx")?,
                t_pre: num("t_pre")?,
                contention_factor: num("contention_factor")?,
                switch_overhead: num("switch_overhead")?,
            };
            d.validate()?;
            Some(d)
        } else {
            None
        };
        let model = if MODEL_KEYS.iter().any(|k| kv.contains_key(k)) {
            let m = ModelProfile {
                name: kv.get("name").ok_or_else(|| SimError::MissingKey("name".into()))?.1.to_string(),
                parameter_bytes: int("parameter_bytes")?,
                activation_bytes_per_sample: int("activation_bytes_per_sample")?,
                compute_ms_per_sample: num("compute_ms_per_sample")?,
                optimizer_state_multiplier: num("optimizer_state_multiplier")?,
                context_bytes: kv.get("context_bytes").map_or(Ok(0), |_| int("context_bytes"))?,
            };
            m.validate()?;
            Some(m)
        } else {
            None
        };
        Ok(ProfileFile { device, model })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ProfileFile, SimError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Invalid(format!("cannot read {}: {e}", path.display())))?;
        parse(&text)
    }

    /// One of the shipped calibrated profiles: `mlp3`, `mobilenet`,
    /// `resnet50`, `densenet121`.
    pub fn builtin(name: &str) -> Result<ProfileFile, SimError> {
        let text = BUILTIN
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| SimError::UnknownProfile(name.to_string()))?;
        parse(text)
    }

    /// Resolves a builtin name first, then a file path.
    pub fn resolve(name_or_path: &str) -> Result<ProfileFile, SimError> {
        match builtin(name_or_path) {
            Ok(p) => Ok(p),
            Err(SimError::UnknownProfile(_)) => load(name_or_path),
            Err(e) => Err(e),
        }
    }

    pub fn to_text(device: Option<&DeviceProfile>, model: Option<&ModelProfile>) -> String {
        let mut out = String::new();
        if let Some(d) = device {
            out += &format!(
                "memory_capacity = {}\nt_fix = {:?}\nt_tx = {:?}\nt_pre = {:?}\ncontention_factor = {:?}\nswitch_overhead = {:?}\n",
                d.memory_capacity, d.t_fix, d.t_tx, d.t_pre, d.contention_factor, d.switch_overhead
            );
        }
        if let Some(m) = model {
            out += &format!(
                "name = {}\nparameter_bytes = {}\nactivation_bytes_per_sample = {}\ncompute_ms_per_sample = {:?}\noptimizer_state_multiplier = {:?}\ncontext_bytes = {}\n",
                m.name,
                m.parameter_bytes,
                m.activation_bytes_per_sample,
                m.compute_ms_per_sample,
                m.optimizer_state_multiplier,
                m.context_bytes
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn device(c: f64) -> DeviceProfile {
        DeviceProfile {
            memory_capacity: 100,
            t_fix: 50.0,
            t_tx: 4.0,
            t_pre: 6.0,
            contention_factor: c,
            switch_overhead: 11_000.0,
        }
    }

    fn model(compute: f64) -> ModelProfile {
        ModelProfile {
            name: "m".into(),
            parameter_bytes: 1_000_000,
            activation_bytes_per_sample: 0,
            compute_ms_per_sample: compute,
            optimizer_state_multiplier: 3.0,
            context_bytes: 0,
        }
    }

    fn member(compute: f64, batch: usize, data: &str) -> SimMember {
        SimMember { profile: model(compute), batch_size: batch, data: data.into(), preprocess: true }
    }

    #[test]
    fn two_identical_members_by_hand() {
        // per-member transfer + preprocess = 1 * (4 + 6) = 10 ms, compute 40 ms
        let d = device(1.0);
        let ms = vec![member(40.0, 1, "a"), member(40.0, 1, "a")];
        let r = estimate_step_time(&d, &ms, &shared_input_groups(&ms)).unwrap();
        assert_eq!(r.t_seq, 200.0);
        assert_eq!(r.t_pack, 140.0);
        assert!((r.impv - 0.30).abs() < 1e-15);
    }

    #[test]
    fn singleton_has_zero_improvement() {
        let d = device(1.3);
        let ms = vec![member(40.0, 7, "a")];
        let r = estimate_step_time(&d, &ms, &shared_input_groups(&ms)).unwrap();
        assert_eq!(r.impv, 0.0);
    }

    #[test]
    fn mismatched_batches_on_different_data_can_lose() {
        // seq = 2*50 + 101*10 + 101*40 = 5150; pack = 50 + 1010 + 1.1*4040 = 5504
        let d = device(1.1);
        let ms = vec![member(40.0, 1, "a"), member(40.0, 100, "b")];
        let r = estimate_step_time(&d, &ms, &shared_input_groups(&ms)).unwrap();
        assert_eq!(r.t_seq, 5150.0);
        assert!((r.t_pack - 5504.0).abs() < 1e-9);
        assert!(r.impv < 0.0);
    }

    #[test]
    fn memory_formula() {
        let m = model(1.0);
        assert_eq!(estimate_memory(&m, 1), 3_000_000);
        assert_eq!(estimate_memory(&m, 64), 3_000_000);
        let m = ModelProfile { activation_bytes_per_sample: 10, context_bytes: 5, ..m };
        assert_eq!(
            estimate_memory(&m, 8) - estimate_memory(&m, 0),
            2 * (estimate_memory(&m, 4) - estimate_memory(&m, 0))
        );
    }

    #[test]
    fn check_fit_threshold() {
        assert_eq!(check_fit(&[60, 39], 100).unwrap(), 99);
        match check_fit(&[60, 41], 100) {
            Err(SimError::OutOfMemory { deficit, .. }) => assert_eq!(deficit, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn switching_overhead_counts_swaps() {
        let d = device(1.0);
        assert_eq!(switching_overhead(&d, &[61_000.0]).unwrap().swoh, 0.0);
        let r = switching_overhead(&d, &[61_000.0, 61_000.0]).unwrap();
        assert_eq!(r.swoh, 11_000.0);
        assert_eq!(r.te_seq, 133_000.0);
    }

    #[test]
    fn bad_groups_are_rejected() {
        let d = device(1.0);
        let ms = vec![member(1.0, 1, "a"), member(1.0, 1, "a")];
        assert!(packed_step_ms(&d, &ms, &[vec![0]]).is_err());
        assert!(packed_step_ms(&d, &ms, &[vec![0, 1], vec![1]]).is_err());
    }

    #[test]
    fn phased_run_drops_finished_members() {
        let d = device(1.0);
        let jobs =
            vec![SimJob { member: member(1.0, 10, "a"), steps: 2 }, SimJob { member: member(1.0, 5, "a"), steps: 4 }];
        let both = packed_step_ms(&d, &[jobs[0].member.clone(), jobs[1].member.clone()], &[vec![0, 1]]).unwrap();
        let alone = jobs[1].member.solo_step_ms(&d);
        assert!((packed_run_ms(&d, &jobs).unwrap() - (2.0 * both + 2.0 * alone)).abs() < 1e-9);
    }

    #[test]
    fn profile_round_trip_and_errors() {
        let text = profile::to_text(Some(&device(1.1)), Some(&model(2.5)));
        let parsed = profile::parse(&text).unwrap();
        assert_eq!(parsed.device.unwrap(), device(1.1));
        assert_eq!(parsed.model.unwrap(), model(2.5));
        assert!(matches!(profile::parse("t_fix = 1\nbogus = 2\n"), Err(SimError::Profile { line: 2, .. })));
        assert!(matches!(profile::parse("t_fix = 1\n"), Err(SimError::MissingKey(_))));
        assert!(matches!(profile::parse("memory_capacity = x\n"), Err(SimError::Profile { line: 1, .. })));
    }

    #[test]
    fn builtin_profiles_parse() {
        for (name, _) in profile::BUILTIN {
            let p = profile::builtin(name).unwrap();
            assert!(p.device.is_some() && p.model.is_some(), "{name}");
        }
    }
}
