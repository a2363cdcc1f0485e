mod common;

use common::max_param_diff;
use packtrain::data::{synth_dataset, DataStore};
use packtrain::graph::{Activation, ComputationGraph, MlpSpec};
use packtrain::optim::{OptimizerKind, OptimizerState};
use packtrain::pack::{make_epoch_plan, Checkpoint, ModelHandle, PackedModel, PlanMember};
use proptest::prelude::*;

fn handle(
    id: &str,
    kind: OptimizerKind,
    batch: usize,
    target: u64,
    ds: &str,
    len: usize,
    act: Activation,
) -> ModelHandle {
    let spec = MlpSpec { input_dim: 4, hidden: vec![5], classes: 3, activation: act };
    let mut g = ComputationGraph::mlp(id, &spec).unwrap();
    g.initialize(3);
    ModelHandle::new(g, OptimizerState::new(kind, 0.05).unwrap(), batch, target, ds, len).unwrap()
}

fn store(n: usize, seed: u64) -> (DataStore, String) {
    let mut s = DataStore::new();
    let id = s.insert(synth_dataset(n, 4, 3, seed).unwrap());
    (s, id)
}

fn member_strategy() -> impl Strategy<Value = Vec<(usize, usize, u64)>> {
    // (optimizer index, batch size, target steps)
    prop::collection::vec((0usize..4, 1usize..24, 1u64..30), 1..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn packed_training_matches_standalone(members in member_strategy(), seed in 0u64..1000, dedup in any::<bool>()) {
        let (s, ds) = store(96, seed);
        let handles: Vec<ModelHandle> = members
            .iter()
            .enumerate()
            .map(|(i, &(k, b, t))| handle(&format!("m{i}"), OptimizerKind::ALL[k], b, t, &ds, 96, Activation::ALL[i % 4]))
            .collect();
        let refs: Vec<ModelHandle> = handles
            .iter()
            .map(|h| {
                let mut h = h.clone();
                h.train_to_target(&s).unwrap();
                h
            })
            .collect();
        let mut packed = PackedModel::pack(handles).unwrap();
        if dedup {
            packed.dedup_inputs().unwrap();
        }
        while packed.members().iter().any(|m| !m.finished()) {
            let before: Vec<(u64, bool)> = packed.members().iter().map(|m| (m.progress.steps_done, m.finished())).collect();
            packed.packed_step(&s).unwrap();
            for (m, (steps, done)) in packed.members().iter().zip(before) {
                prop_assert_eq!(m.progress.steps_done, steps + u64::from(!done));
            }
            let active: Vec<usize> = packed.members().iter().filter(|m| !m.finished()).map(|m| m.batch_size).collect();
            if let Some(&max) = active.iter().max() {
                prop_assert_eq!(packed.driver_batch(), max);
            }
        }
        for r in &refs {
            let diff = max_param_diff(&packed.member_parameters(r.model_id()).unwrap(), r.graph.parameters());
            prop_assert!(diff <= 1e-9, "{} diff {}", r.model_id(), diff);
        }
    }

    #[test]
    fn full_epoch_covers_every_sample_once(batches in prop::collection::vec(1usize..40, 1..5), n in 40usize..200) {
        let (s, ds) = store(n, 1);
        let handles: Vec<ModelHandle> = batches
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let steps = n.div_ceil(b) as u64;
                handle(&format!("m{i}"), OptimizerKind::Sgd, b, steps, &ds, n, Activation::Relu)
            })
            .collect();
        let plan_members: Vec<PlanMember> = handles
            .iter()
            .map(|h| PlanMember { model_id: h.model_id().into(), batch_size: h.batch_size, remaining_samples: n })
            .collect();
        let phases = make_epoch_plan(&plan_members).unwrap();
        let planned: u64 = phases.iter().map(|p| p.steps).sum();
        let mut packed = PackedModel::pack(handles).unwrap();
        let taken = packed.train_to_completion(&s).unwrap();
        prop_assert_eq!(taken, planned);
        for w in phases.windows(2) {
            prop_assert!(w[0].driver_batch >= w[1].driver_batch);
        }
        for m in packed.members() {
            prop_assert!(m.progress.epoch_fully_covered(), "{}", m.model_id());
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(kind in 0usize..4, batch in 1usize..20, steps in 0u64..12) {
        let (s, ds) = store(60, 2);
        let mut h = handle("c", OptimizerKind::ALL[kind], batch, 12, &ds, 60, Activation::Tanh);
        for _ in 0..steps {
            h.train_step(&s).unwrap();
        }
        let ck = Checkpoint::capture(&h);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.restore().unwrap(), h);
    }
}
