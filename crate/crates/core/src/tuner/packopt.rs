use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::distance::{config_distance, Metric};
use super::space::HyperparamConfig;
use crate::error::TunerError;
use crate::sim::{
    check_fit, estimate_memory, estimate_step_time, shared_input_groups, DeviceProfile, ModelProfile, SimMember,
};

pub const DEFAULT_THRESHOLD: f64 = 6.0;
pub const DEFAULT_RANDOM_GROUP: usize = 8;

/// Memory side of packing: every config is one architecture whose optimizer
/// and batch size set its footprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackContext {
    pub device: DeviceProfile,
    pub model: ModelProfile,
}

impl PackContext {
    pub fn demand(&self, config: &HyperparamConfig) -> u64 {
        let profile = self.model.with_optimizer_multiplier(config.optimizer.state_multiplier());
        estimate_memory(&profile, config.batch_size)
    }

    pub fn fits(&self, configs: &[&HyperparamConfig]) -> bool {
        let demands: Vec<u64> = configs.iter().map(|c| self.demand(c)).collect();
        check_fit(&demands, self.device.memory_capacity).is_ok()
    }

    fn check_each(&self, configs: &[HyperparamConfig]) -> Result<(), TunerError> {
        for c in configs {
            let demand = self.demand(c);
            if demand > self.device.memory_capacity {
                return Err(TunerError::ConfigTooLarge {
                    config_id: c.config_id,
                    demand,
                    capacity: self.device.memory_capacity,
                });
            }
        }
        Ok(())
    }

    fn sim_member(&self, config: &HyperparamConfig) -> SimMember {
        SimMember {
            profile: self.model.with_optimizer_multiplier(config.optimizer.state_multiplier()),
            batch_size: config.batch_size,
            data: "train".into(),
            preprocess: true,
        }
    }

    /// Single-step improvement of packing `a` with `b` on one shared stream.
    pub fn pair_improvement(&self, a: &HyperparamConfig, b: &HyperparamConfig) -> f64 {
        let members = [self.sim_member(a), self.sim_member(b)];
        estimate_step_time(&self.device, &members, &shared_input_groups(&members)).expect("two members").impv
    }

    /// Largest distance `d` such that every pair of `configs` at most `d`
    /// apart still gains from packing. Returns the largest pair distance when
    /// every pair gains.
    pub fn profitable_threshold(&self, configs: &[HyperparamConfig], metric: &Metric) -> f64 {
        let mut pairs: Vec<(f64, bool)> = Vec::new();
        for (i, a) in configs.iter().enumerate() {
            for b in &configs[i + 1..] {
                pairs.push((config_distance(a, b, metric), self.pair_improvement(a, b) > 0.0));
            }
        }
        let worst = pairs.iter().filter(|p| !p.1).map(|p| p.0).fold(f64::INFINITY, f64::min);
        pairs.iter().map(|p| p.0).filter(|&d| d < worst).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackGroup {
    pub members: Vec<HyperparamConfig>,
    pub memory: u64,
    /// Config the group was grown from.
    pub centroid: usize,
}

impl PackGroup {
    fn new(members: Vec<HyperparamConfig>, ctx: &PackContext) -> Self {
        let memory = members.iter().map(|c| ctx.demand(c)).sum();
        let centroid = members[0].config_id;
        Self { members, memory, centroid }
    }

    pub fn ids(&self) -> Vec<usize> {
        self.members.iter().map(|c| c.config_id).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Strategy {
    /// Every config trained alone.
    Original,
    /// Only equal batch sizes share a pack, filled until memory runs out.
    BatchSize,
    /// Consecutive draws from a shuffle, at most `m` per pack.
    Random { m: usize },
    /// Nearest neighbours of a random centroid within `threshold`.
    Knn { threshold: f64, metric: Metric },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Original => "original",
            Strategy::BatchSize => "batchsize",
            Strategy::Random { .. } => "random",
            Strategy::Knn { .. } => "knn",
        }
    }

    pub fn pack(
        &self,
        configs: &[HyperparamConfig],
        ctx: &PackContext,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<PackGroup>, TunerError> {
        match self {
            Strategy::Original => pack_opt_singletons(configs, ctx),
            Strategy::BatchSize => pack_opt_batchsize(configs, ctx),
            Strategy::Random { m } => pack_opt_random(configs, *m, ctx, rng),
            Strategy::Knn { threshold, metric } => pack_opt_knn(configs, ctx, *threshold, metric, rng),
        }
    }
}

pub fn pack_opt_singletons(configs: &[HyperparamConfig], ctx: &PackContext) -> Result<Vec<PackGroup>, TunerError> {
    ctx.check_each(configs)?;
    Ok(configs.iter().map(|c| PackGroup::new(vec![c.clone()], ctx)).collect())
}

pub fn pack_opt_knn(
    configs: &[HyperparamConfig],
    ctx: &PackContext,
    threshold: f64,
    metric: &Metric,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PackGroup>, TunerError> {
    ctx.check_each(configs)?;
    let mut unassigned: Vec<&HyperparamConfig> = configs.iter().collect();
    unassigned.sort_by_key(|c| c.config_id);
    let mut groups = Vec::new();
    while !unassigned.is_empty() {
        let centroid = unassigned.remove(rng.random_range(0..unassigned.len()));
        let mut near: Vec<(f64, usize)> = unassigned
            .iter()
            .enumerate()
            .map(|(k, c)| (config_distance(centroid, c, metric), k))
            .filter(|&(d, _)| d <= threshold)
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(unassigned[a.1].config_id.cmp(&unassigned[b.1].config_id)));
        let mut members = vec![centroid];
        let mut taken = Vec::new();
        for (_, k) in near {
            members.push(unassigned[k]);
            if ctx.fits(&members) {
                taken.push(k);
            } else {
                members.pop();
            }
        }
        taken.sort_unstable_by(|a, b| b.cmp(a));
        for k in taken {
            unassigned.remove(k);
        }
        groups.push(PackGroup::new(members.into_iter().cloned().collect(), ctx));
    }
    Ok(groups)
}

pub fn pack_opt_random(
    configs: &[HyperparamConfig],
    m: usize,
    ctx: &PackContext,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PackGroup>, TunerError> {
    if m == 0 {
        return Err(TunerError::InvalidParameters("random pack size m must be >= 1".into()));
    }
    ctx.check_each(configs)?;
    let mut order: Vec<&HyperparamConfig> = configs.iter().collect();
    order.sort_by_key(|c| c.config_id);
    order.shuffle(rng);
    let mut groups = Vec::new();
    let mut current: Vec<&HyperparamConfig> = Vec::new();
    for c in order {
        current.push(c);
        if current.len() > m || !ctx.fits(&current) {
            current.pop();
            groups.push(PackGroup::new(current.drain(..).cloned().collect(), ctx));
            current.push(c);
        }
    }
    if !current.is_empty() {
        groups.push(PackGroup::new(current.into_iter().cloned().collect(), ctx));
    }
    Ok(groups)
}

pub fn pack_opt_batchsize(configs: &[HyperparamConfig], ctx: &PackContext) -> Result<Vec<PackGroup>, TunerError> {
    ctx.check_each(configs)?;
    let mut by_batch: BTreeMap<usize, Vec<&HyperparamConfig>> = BTreeMap::new();
    for c in configs {
        by_batch.entry(c.batch_size).or_default().push(c);
    }
    let mut groups = Vec::new();
    for mut same in by_batch.into_values() {
        same.sort_by_key(|c| c.config_id);
        let mut current: Vec<&HyperparamConfig> = Vec::new();
        for c in same {
            current.push(c);
            if !ctx.fits(&current) {
                current.pop();
                groups.push(PackGroup::new(current.drain(..).cloned().collect(), ctx));
                current.push(c);
            }
        }
        groups.push(PackGroup::new(current.into_iter().cloned().collect(), ctx));
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed_key;
    use crate::seeding::derive_rng;
    use crate::sim::profile;
    use crate::tuner::space::ConfigSpace;

    fn ctx(capacity: u64) -> PackContext {
        let file = profile::builtin("mlp3").unwrap();
        let mut device = file.device().unwrap().clone();
        device.memory_capacity = capacity;
        PackContext { device, model: file.model().unwrap().clone() }
    }

    fn rng() -> ChaCha8Rng {
        derive_rng(&seed_key!["packopt-test"])
    }

    fn partition_ok(configs: &[HyperparamConfig], groups: &[PackGroup], ctx: &PackContext) {
        let mut ids: Vec<usize> = groups.iter().flat_map(PackGroup::ids).collect();
        ids.sort_unstable();
        let mut want: Vec<usize> = configs.iter().map(|c| c.config_id).collect();
        want.sort_unstable();
        assert_eq!(ids, want);
        for g in groups {
            assert!(!g.members.is_empty());
            assert!(g.memory <= ctx.device.memory_capacity);
        }
    }

    #[test]
    fn knn_threshold_zero_gives_singletons() {
        let c = ctx(u64::MAX / 4);
        let configs = ConfigSpace::standard().sample(40, 3).unwrap();
        let groups = pack_opt_knn(&configs, &c, 0.0, &Metric::IndexSum, &mut rng()).unwrap();
        assert_eq!(groups.len(), 40);
        partition_ok(&configs, &groups, &c);
    }

    #[test]
    fn one_model_capacity_forces_singletons() {
        let space = ConfigSpace::standard();
        let configs = space.sample(30, 4).unwrap();
        let big = configs.iter().map(|cfg| ctx(0).demand(cfg)).max().unwrap();
        let c = ctx(big);
        for groups in [
            pack_opt_knn(&configs, &c, 100.0, &Metric::IndexSum, &mut rng()).unwrap(),
            pack_opt_random(&configs, 50, &c, &mut rng()).unwrap(),
        ] {
            partition_ok(&configs, &groups, &c);
            assert!(groups.iter().all(|g| g.members.len() == 1 || g.memory <= big));
        }
    }

    #[test]
    fn learning_rate_neighbours_pack_together() {
        let space = ConfigSpace::standard();
        let base = space.config(0).unwrap();
        let configs: Vec<HyperparamConfig> = space
            .all()
            .into_iter()
            .filter(|c| c.index.batch == base.index.batch && c.index.optimizer == base.index.optimizer)
            .filter(|c| c.index.activation == base.index.activation && c.index.learning_rate < 4)
            .collect();
        assert_eq!(configs.len(), 4);
        let c = ctx(u64::MAX / 4);
        let groups = pack_opt_knn(&configs, &c, 3.0, &Metric::IndexSum, &mut rng()).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].members.len(), 4);
    }

    #[test]
    fn batchsize_strategy_partitions_by_batch() {
        let space = ConfigSpace::standard();
        let configs = space.sample(60, 5).unwrap();
        let c = ctx(16 << 30);
        let groups = pack_opt_batchsize(&configs, &c).unwrap();
        partition_ok(&configs, &groups, &c);
        for g in &groups {
            assert!(g.members.iter().all(|m| m.batch_size == g.members[0].batch_size));
        }
        let distinct: Vec<HyperparamConfig> = space
            .all()
            .into_iter()
            .filter(|cfg| cfg.index.optimizer == 0 && cfg.index.learning_rate == 0 && cfg.index.activation == 0)
            .collect();
        assert_eq!(pack_opt_batchsize(&distinct, &c).unwrap().len(), 11);
    }

    #[test]
    fn random_with_m_one_is_singletons() {
        let configs = ConfigSpace::standard().sample(25, 6).unwrap();
        let c = ctx(u64::MAX / 4);
        let groups = pack_opt_random(&configs, 1, &c, &mut rng()).unwrap();
        assert_eq!(groups.len(), 25);
        let groups = pack_opt_random(&configs, 4, &c, &mut rng()).unwrap();
        partition_ok(&configs, &groups, &c);
        assert!(groups.iter().all(|g| g.members.len() <= 4));
    }

    #[test]
    fn profitable_threshold_tracks_pair_gains() {
        let space = ConfigSpace::standard();
        let configs: Vec<HyperparamConfig> = space.all().into_iter().step_by(7).collect();
        let mut c = ctx(16 << 30);
        let all = c.profitable_threshold(&configs, &Metric::IndexSum);
        assert_eq!(all, 17.0);
        c.device.contention_factor = 3.0;
        let tight = c.profitable_threshold(&configs, &Metric::IndexSum);
        assert!(tight < all);
        for (i, a) in configs.iter().enumerate() {
            for b in &configs[i + 1..] {
                if config_distance(a, b, &Metric::IndexSum) <= tight {
                    assert!(c.pair_improvement(a, b) > 0.0);
                }
            }
        }
    }

    #[test]
    fn oversized_config_is_named() {
        let configs = ConfigSpace::standard().sample(3, 1).unwrap();
        let c = ctx(10);
        let err = pack_opt_knn(&configs, &c, 6.0, &Metric::IndexSum, &mut rng()).unwrap_err();
        assert!(
            matches!(err, TunerError::ConfigTooLarge { config_id, .. } if config_id == configs.iter().map(|c| c.config_id).next().unwrap())
        );
    }
}
