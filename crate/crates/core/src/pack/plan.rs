use crate::error::PackError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanMember {
    pub model_id: String,
    pub batch_size: usize,
    /// Samples left in this member's current epoch.
    pub remaining_samples: usize,
}

/// A run of packed steps sharing one driver member.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Phase {
    pub driver: String,
    pub driver_batch: usize,
    pub steps: u64,
}

/// Splits the rest of an epoch into phases. Each phase is driven by the
/// unfinished member with the largest batch (ties to the smaller model id)
/// and lasts until that member has consumed its epoch; every other member
/// consumes its own batch per step meanwhile.
pub fn make_epoch_plan(members: &[PlanMember]) -> Result<Vec<Phase>, PackError> {
    if members.is_empty() {
        return Err(PackError::Empty);
    }
    if let Some(m) = members.iter().find(|m| m.batch_size == 0) {
        return Err(PackError::InvalidHandle { model_id: m.model_id.clone(), reason: "zero batch size".into() });
    }
    let mut remaining: Vec<usize> = members.iter().map(|m| m.remaining_samples).collect();
    let mut phases = Vec::new();
    loop {
        let driver = (0..members.len()).filter(|&i| remaining[i] > 0).max_by(|&a, &b| {
            members[a]
                .batch_size
                .cmp(&members[b].batch_size)
                .then_with(|| members[b].model_id.cmp(&members[a].model_id))
        });
        let Some(d) = driver else { break };
        let steps = remaining[d].div_ceil(members[d].batch_size);
        for (i, m) in members.iter().enumerate() {
            remaining[i] -= remaining[i].min(steps * m.batch_size);
        }
        phases.push(Phase {
            driver: members[d].model_id.clone(),
            driver_batch: members[d].batch_size,
            steps: steps as u64,
        });
    }
    Ok(phases)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(id: &str, b: usize, n: usize) -> PlanMember {
        PlanMember { model_id: id.into(), batch_size: b, remaining_samples: n }
    }

    #[test]
    fn single_member_is_one_phase() {
        let plan = make_epoch_plan(&[m("a", 100, 10_000)]).unwrap();
        assert_eq!(plan, vec![Phase { driver: "a".into(), driver_batch: 100, steps: 100 }]);
    }

    #[test]
    fn drivers_descend_by_batch() {
        let plan = make_epoch_plan(&[m("m20", 20, 10_000), m("m50", 50, 10_000), m("m100", 100, 10_000)]).unwrap();
        let summary: Vec<(&str, u64)> = plan.iter().map(|p| (p.driver.as_str(), p.steps)).collect();
        assert_eq!(summary, vec![("m100", 100), ("m50", 100), ("m20", 300)]);
        let per_member: Vec<u64> = [20u64, 50, 100]
            .iter()
            .map(|&b| {
                plan.iter()
                    .map(|p| p.steps)
                    .scan(0u64, |used, s| {
                        let take = (10_000 - *used).min(s * b);
                        *used += take;
                        Some(take)
                    })
                    .sum::<u64>()
                    / b
            })
            .collect();
        assert_eq!(per_member, vec![500, 200, 100]);
    }

    #[test]
    fn ties_break_on_model_id() {
        let plan = make_epoch_plan(&[m("b", 10, 100), m("a", 10, 100)]).unwrap();
        assert_eq!(plan[0].driver, "a");
        assert_eq!(plan.len(), 1);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(make_epoch_plan(&[]), Err(PackError::Empty)));
    }
}
