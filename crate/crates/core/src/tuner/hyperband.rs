use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::packopt::{PackContext, PackGroup, Strategy};
use super::space::{ConfigSpace, HyperparamConfig};
use crate::error::TunerError;
use crate::seed_key;
use crate::seeding::{derive_rng, derive_u64};

/// Trains configs and reports their intermediate losses.
pub trait Executor {
    /// Trains every member of `group` from scratch for `epochs` epochs as one
    /// pack and returns validation losses in member order.
    fn run_group(&mut self, group: &PackGroup, epochs: f64) -> Result<GroupRun, TunerError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRun {
    pub losses: Vec<f64>,
    /// Wall or simulated time spent on the group.
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperbandParams {
    /// Largest per-config budget, in epochs.
    pub max_epochs: u64,
    pub eta: u64,
}

impl HyperbandParams {
    pub fn validate(&self) -> Result<(), TunerError> {
        if self.max_epochs < 1 {
            return Err(TunerError::InvalidParameters("R must be >= 1".into()));
        }
        if self.eta < 2 {
            return Err(TunerError::InvalidParameters("eta must be >= 2".into()));
        }
        Ok(())
    }

    /// `floor(log_eta(R))`, computed without floating point.
    pub fn s_max(&self) -> u32 {
        let mut s = 0;
        let mut power = self.eta;
        while power <= self.max_epochs {
            s += 1;
            power = power.saturating_mul(self.eta);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rung {
    pub configs: usize,
    pub epochs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BracketPlan {
    pub s: u32,
    pub n: usize,
    pub r: f64,
    pub rungs: Vec<Rung>,
}

impl BracketPlan {
    /// Epochs charged if every rung runs in full.
    pub fn budget(&self) -> f64 {
        self.rungs.iter().map(|r| r.configs as f64 * r.epochs).sum()
    }
}

pub fn bracket_schedule(params: &HyperbandParams) -> Result<Vec<BracketPlan>, TunerError> {
    params.validate()?;
    let s_max = params.s_max();
    let eta = params.eta as usize;
    Ok((0..=s_max)
        .rev()
        .map(|s| {
            let eta_s = eta.pow(s);
            let n = ((s_max as usize + 1) * eta_s).div_ceil(s as usize + 1);
            let r = params.max_epochs as f64 / eta_s as f64;
            let mut rungs = Vec::new();
            let mut configs = n;
            for i in 0..=s {
                rungs.push(Rung { configs, epochs: r * eta.pow(i) as f64 });
                configs /= eta;
            }
            BracketPlan { s, n, r, rungs }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuditEvent {
    /// One config finished a rung.
    Train,
    /// One group finished; carries the group's time.
    Group,
    /// A pack did not fit and was rerun as singletons.
    OomFallback,
    /// The executor failed; the rest of the bracket was skipped.
    Error,
}

/// One line of the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub event: AuditEvent,
    pub bracket: u32,
    pub rung: usize,
    pub group: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<usize>,
    pub epochs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    pub elapsed_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl AuditRecord {
    fn new(event: AuditEvent, bracket: u32, rung: usize, group: usize, epochs: f64) -> Self {
        Self {
            event,
            bracket,
            rung,
            group,
            config_id: None,
            members: Vec::new(),
            epochs,
            loss: None,
            elapsed_ms: 0.0,
            message: None,
        }
    }
}

pub fn write_audit(records: &[AuditRecord], mut out: impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_audit(input: impl BufRead) -> std::io::Result<Vec<AuditRecord>> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| serde_json::from_str(&l?).map_err(std::io::Error::other))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestConfig {
    pub config: HyperparamConfig,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    pub strategy: String,
    pub best: Option<BestConfig>,
    pub total_ms: f64,
    pub epochs_charged: f64,
    pub failed_brackets: usize,
    pub audit: Vec<AuditRecord>,
}

/// Plain Hyperband: every config trained on its own.
pub fn hyperband(
    params: &HyperbandParams,
    space: &ConfigSpace,
    executor: &mut dyn Executor,
    seed: u64,
) -> Result<TuneOutcome, TunerError> {
    let singletons = |configs: &[HyperparamConfig], _: u32, _: usize| {
        Ok(configs.iter().map(|c| PackGroup { members: vec![c.clone()], memory: 0, centroid: c.config_id }).collect())
    };
    run(params, space, executor, seed, "original", &singletons)
}

/// Hyperband whose rungs execute `strategy`'s packs. Sampling and halving
/// are identical to [`hyperband`] for the same seed.
pub fn packed_hyperband(
    params: &HyperbandParams,
    space: &ConfigSpace,
    strategy: &Strategy,
    ctx: &PackContext,
    executor: &mut dyn Executor,
    seed: u64,
) -> Result<TuneOutcome, TunerError> {
    let grouping = |configs: &[HyperparamConfig], s: u32, rung: usize| {
        let mut rng = derive_rng(&seed_key!["pack-opt", seed, u64::from(s), rung]);
        strategy.pack(configs, ctx, &mut rng)
    };
    run(params, space, executor, seed, strategy.name(), &grouping)
}

type Grouping<'a> = dyn Fn(&[HyperparamConfig], u32, usize) -> Result<Vec<PackGroup>, TunerError> + 'a;

/// Configs sampled for bracket `s`; shared by every strategy.
pub fn bracket_sample(space: &ConfigSpace, n: usize, seed: u64, s: u32) -> Result<Vec<HyperparamConfig>, TunerError> {
    space.sample(n.min(space.len()), derive_u64(&seed_key!["hyperband-sample", seed, u64::from(s)]))
}

fn run(
    params: &HyperbandParams,
    space: &ConfigSpace,
    executor: &mut dyn Executor,
    seed: u64,
    strategy: &str,
    grouping: &Grouping<'_>,
) -> Result<TuneOutcome, TunerError> {
    space.validate()?;
    let schedule = bracket_schedule(params)?;
    let mut audit = Vec::new();
    let mut total_ms = 0.0;
    let mut failed_brackets = 0;
    for plan in &schedule {
        let mut survivors = bracket_sample(space, plan.n, seed, plan.s)?;
        'rungs: for (i, rung) in plan.rungs.iter().enumerate() {
            let groups = match grouping(&survivors, plan.s, i) {
                Ok(g) => g,
                Err(e) => {
                    let mut rec = AuditRecord::new(AuditEvent::Error, plan.s, i, 0, rung.epochs);
                    rec.message = Some(e.to_string());
                    audit.push(rec);
                    failed_brackets += 1;
                    break 'rungs;
                }
            };
            let mut losses: BTreeMap<usize, f64> = BTreeMap::new();
            for (g, group) in groups.iter().enumerate() {
                let attempt = match executor.run_group(group, rung.epochs) {
                    Err(TunerError::ExecutorOom(msg)) if group.members.len() > 1 => {
                        let mut rec = AuditRecord::new(AuditEvent::OomFallback, plan.s, i, g, rung.epochs);
                        rec.members = group.ids();
                        rec.message = Some(msg);
                        audit.push(rec);
                        group
                            .members
                            .iter()
                            .map(|c| {
                                let single = PackGroup { members: vec![c.clone()], memory: 0, centroid: c.config_id };
                                executor.run_group(&single, rung.epochs).map(|run| (single, run))
                            })
                            .collect::<Result<Vec<_>, _>>()
                    }
                    other => other.map(|run| vec![(group.clone(), run)]),
                };
                let runs = match attempt {
                    Ok(runs) => runs,
                    Err(e) => {
                        let mut rec = AuditRecord::new(AuditEvent::Error, plan.s, i, g, rung.epochs);
                        rec.members = group.ids();
                        rec.message = Some(e.to_string());
                        audit.push(rec);
                        failed_brackets += 1;
                        break 'rungs;
                    }
                };
                for (unit, run) in runs {
                    if run.losses.len() != unit.members.len() {
                        return Err(TunerError::Executor(format!(
                            "executor returned {} losses for {} configs",
                            run.losses.len(),
                            unit.members.len()
                        )));
                    }
                    total_ms += run.elapsed_ms;
                    let mut rec = AuditRecord::new(AuditEvent::Group, plan.s, i, g, rung.epochs);
                    rec.members = unit.ids();
                    rec.elapsed_ms = run.elapsed_ms;
                    audit.push(rec);
                    for (c, &loss) in unit.members.iter().zip(&run.losses) {
                        let mut rec = AuditRecord::new(AuditEvent::Train, plan.s, i, g, rung.epochs);
                        rec.config_id = Some(c.config_id);
                        rec.loss = Some(loss);
                        audit.push(rec);
                        losses.insert(c.config_id, loss);
                    }
                }
            }
            let keep = survivors.len() / params.eta as usize;
            survivors.sort_by(|a, b| {
                losses[&a.config_id].total_cmp(&losses[&b.config_id]).then(a.config_id.cmp(&b.config_id))
            });
            survivors.truncate(keep);
            if survivors.is_empty() {
                break;
            }
        }
    }
    let epochs_charged = audit.iter().filter(|r| r.event == AuditEvent::Train).map(|r| r.epochs).sum();
    let best = audit
        .iter()
        .filter(|r| r.event == AuditEvent::Train)
        .filter_map(|r| Some((r.loss?, r.config_id?)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(loss, id)| BestConfig { config: space.config(id).expect("sampled from space"), loss });
    Ok(TuneOutcome { strategy: strategy.to_string(), best, total_ms, epochs_charged, failed_brackets, audit })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_for_81_and_3() {
        let params = HyperbandParams { max_epochs: 81, eta: 3 };
        assert_eq!(params.s_max(), 4);
        let plan = bracket_schedule(&params).unwrap();
        let nr: Vec<(u32, usize, f64)> = plan.iter().map(|b| (b.s, b.n, b.r)).collect();
        assert_eq!(nr, vec![(4, 81, 1.0), (3, 34, 3.0), (2, 15, 9.0), (1, 8, 27.0), (0, 5, 81.0)]);
        let chain: Vec<usize> = plan[0].rungs.iter().map(|r| r.configs).collect();
        assert_eq!(chain, vec![81, 27, 9, 3, 1]);
        let epochs: Vec<f64> = plan[0].rungs.iter().map(|r| r.epochs).collect();
        assert_eq!(epochs, vec![1.0, 3.0, 9.0, 27.0, 81.0]);
    }

    #[test]
    fn s_max_edges() {
        assert_eq!(HyperbandParams { max_epochs: 1, eta: 3 }.s_max(), 0);
        assert_eq!(HyperbandParams { max_epochs: 80, eta: 3 }.s_max(), 3);
        assert_eq!(HyperbandParams { max_epochs: 4, eta: 2 }.s_max(), 2);
        assert!(bracket_schedule(&HyperbandParams { max_epochs: 0, eta: 3 }).is_err());
        assert!(bracket_schedule(&HyperbandParams { max_epochs: 9, eta: 1 }).is_err());
    }

    #[test]
    fn audit_round_trips() {
        let mut rec = AuditRecord::new(AuditEvent::Train, 4, 1, 2, 3.0);
        rec.config_id = Some(17);
        rec.loss = Some(0.25);
        let mut buf = Vec::new();
        write_audit(std::slice::from_ref(&rec), &mut buf).unwrap();
        assert_eq!(read_audit(buf.as_slice()).unwrap(), vec![rec]);
    }
}
