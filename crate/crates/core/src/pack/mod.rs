//! Packing: fusing several models into one differentiable graph that trains
//! every member in lockstep while preserving each member's standalone
//! trajectory.
//!
//! Every member reads its next samples from its own cursor in its own epoch
//! order. Physical inputs are padded to the driver batch (the largest batch
//! among unfinished members) and padded rows are masked out of the loss, so
//! padding never reaches any gradient. Members with the same dataset, epoch,
//! cursor and batch size form an input group; after [`PackedModel::dedup_inputs`]
//! a group reads one physical input.

mod checkpoint;
mod device;
mod handle;
mod plan;

use std::collections::BTreeMap;

pub use checkpoint::Checkpoint;
pub use device::{model_profile_for, Device, LoadSource};
pub use handle::{ModelHandle, ProgressCursor};
pub use plan::{make_epoch_plan, Phase, PlanMember};

use crate::data::{Batch, BatchSource};
use crate::error::PackError;
use crate::graph::{ComputationGraph, Feed, Heads, InputPort, Node, ParamMap, PortKind};
use crate::tensor::Tensor;

/// Members that read one physical input tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputGroup {
    pub members: Vec<String>,
    pub dataset: String,
    pub epoch: u64,
    pub position: usize,
    pub batch_len: usize,
}

/// Where a member's rows sit inside the driver batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slice {
    pub offset: usize,
    pub length: usize,
}

/// Result of one synchronized step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub losses: BTreeMap<String, f64>,
    pub driver_batch: usize,
    /// Physical input tensors read this step.
    pub physical_inputs: usize,
    /// Members that reached their step budget on this step.
    pub finished: Vec<String>,
    /// Members that consumed the last samples of their epoch on this step.
    pub epoch_completed: Vec<String>,
    /// The driver batch or input grouping changes for the next step.
    pub replan: bool,
}

#[derive(Debug)]
pub struct PackedModel {
    members: Vec<ModelHandle>,
    fused: ComputationGraph,
    groups: Vec<InputGroup>,
    /// Member partition the fused graph's shared ports were built for.
    built_for: Vec<Vec<String>>,
    dedup: bool,
}

fn prefixed(id: &str, name: &str) -> String {
    format!("{id}/{name}")
}

fn group_port(k: usize, name: &str) -> String {
    format!("input{k}/{name}")
}

/// Fuses member structures into one graph. Member parameters are moved in
/// under `model_id/` prefixes; `groups`, when given, rewrites grouped members
/// onto shared ports.
fn build_fused(members: &mut [ModelHandle], groups: Option<&[InputGroup]>) -> Result<ComputationGraph, PackError> {
    let mut ports: Vec<InputPort> = Vec::new();
    let mut nodes: Vec<Node> = Vec::new();
    let mut outputs = BTreeMap::new();
    let mut shapes = BTreeMap::new();
    let mut params = ParamMap::new();
    let mut concat = Vec::new();
    for m in members.iter_mut() {
        let id = m.model_id().to_string();
        let offset = nodes.len();
        for p in m.graph.input_ports() {
            ports.push(InputPort { name: prefixed(&id, &p.name), ..p.clone() });
        }
        ports.push(InputPort {
            name: prefixed(&id, "mask"),
            kind: PortKind::Mask,
            width: 1,
            binding: Some(m.dataset.clone()),
        });
        for node in m.graph.nodes() {
            nodes.push(match node {
                Node::Input { port } => Node::Input { port: prefixed(&id, port) },
                Node::Affine { input, weight, bias, owner, layer } => Node::Affine {
                    input: input + offset,
                    weight: prefixed(&id, weight),
                    bias: prefixed(&id, bias),
                    owner: owner.clone(),
                    layer: *layer,
                },
                Node::Activation { input, kind } => Node::Activation { input: input + offset, kind: *kind },
                Node::Concat { inputs } => Node::Concat { inputs: inputs.iter().map(|i| i + offset).collect() },
                Node::SoftmaxCrossEntropy { head, logits, labels, .. } => Node::SoftmaxCrossEntropy {
                    head: prefixed(&id, head),
                    logits: logits + offset,
                    labels: prefixed(&id, labels),
                    mask: Some(prefixed(&id, "mask")),
                },
            });
        }
        for (name, &idx) in m.graph.outputs() {
            outputs.insert(prefixed(&id, name), idx + offset);
        }
        if let Some(&first) = m.graph.outputs().values().next() {
            concat.push(first + offset);
        }
        for (name, shape) in m.graph.param_shapes() {
            if shapes.insert(prefixed(&id, name), shape.clone()).is_some() {
                return Err(PackError::DuplicateModel(id.clone()));
            }
        }
        for (name, t) in m.graph.take_parameters() {
            params.insert(prefixed(&id, &name), t);
        }
    }
    if !concat.is_empty() {
        nodes.push(Node::Concat { inputs: concat });
        outputs.insert("packed".to_string(), nodes.len() - 1);
    }
    let mut fused = ComputationGraph::from_parts("packed".into(), ports, nodes, outputs, shapes, params)?;
    if let Some(groups) = groups {
        let mut rename = BTreeMap::new();
        for (k, g) in groups.iter().enumerate() {
            if g.members.len() < 2 {
                continue;
            }
            for id in &g.members {
                let m = members.iter().find(|m| m.model_id() == id).expect("group member");
                for p in m.graph.input_ports() {
                    rename.insert(prefixed(id, &p.name), group_port(k, &p.name));
                }
                rename.insert(prefixed(id, "mask"), group_port(k, "mask"));
            }
        }
        fused.rename_ports(&rename)?;
    }
    Ok(fused)
}

impl PackedModel {
    /// Fuses `handles` into one packed model. Parameters are moved out of the
    /// handles; [`PackedModel::member_parameters`] reads them back.
    pub fn pack(handles: Vec<ModelHandle>) -> Result<Self, PackError> {
        if handles.is_empty() {
            return Err(PackError::Empty);
        }
        let mut seen = std::collections::BTreeSet::new();
        for h in &handles {
            if !seen.insert(h.model_id().to_string()) {
                return Err(PackError::DuplicateModel(h.model_id().to_string()));
            }
        }
        let mut members = handles;
        let fused = build_fused(&mut members, None)?;
        let mut packed = Self { members, fused, groups: Vec::new(), built_for: Vec::new(), dedup: false };
        packed.groups = packed.compute_groups();
        Ok(packed)
    }

    /// Rewrites the fused graph so each input group reads one physical input.
    /// Grouping is maintained on later steps.
    pub fn dedup_inputs(&mut self) -> Result<(), PackError> {
        self.dedup = true;
        self.rebuild()
    }

    pub fn is_deduplicated(&self) -> bool {
        self.dedup
    }

    /// Hands fused parameters back to the member graphs.
    fn scatter_parameters(&mut self) -> Result<(), PackError> {
        let mut params = self.fused.take_parameters();
        for m in &mut self.members {
            let id = m.model_id().to_string();
            let own = m
                .graph
                .param_shapes()
                .keys()
                .map(|name| {
                    let t = params.remove(&prefixed(&id, name)).ok_or_else(|| PackError::InvalidHandle {
                        model_id: id.clone(),
                        reason: format!("lost parameter `{name}`"),
                    })?;
                    Ok((name.clone(), t))
                })
                .collect::<Result<ParamMap, PackError>>()?;
            m.graph.set_parameters(own)?;
        }
        Ok(())
    }

    /// Recomputes input groups and fuses the member graphs again.
    fn gather(&mut self) -> Result<(), PackError> {
        self.groups = self.compute_groups();
        let groups = self.dedup.then(|| self.groups.clone());
        self.built_for = partition(&self.groups);
        self.fused = build_fused(&mut self.members, groups.as_deref())?;
        Ok(())
    }

    fn rebuild(&mut self) -> Result<(), PackError> {
        self.scatter_parameters()?;
        self.gather()
    }

    /// Groups unfinished members by `(dataset, epoch, cursor, next batch
    /// length, input ports)`, in member order.
    fn compute_groups(&self) -> Vec<InputGroup> {
        let mut groups: Vec<(InputGroup, Vec<InputPort>)> = Vec::new();
        for m in self.members.iter().filter(|m| !m.finished()) {
            let mut cursor = m.progress.clone();
            cursor.roll_if_exhausted();
            let key = InputGroup {
                members: Vec::new(),
                dataset: m.dataset.clone(),
                epoch: cursor.epoch,
                position: cursor.position,
                batch_len: m.next_batch_len(),
            };
            let ports = m.graph.input_ports().to_vec();
            match groups.iter_mut().find(|(g, p)| {
                g.dataset == key.dataset
                    && g.epoch == key.epoch
                    && g.position == key.position
                    && g.batch_len == key.batch_len
                    && *p == ports
            }) {
                Some((g, _)) => g.members.push(m.model_id().to_string()),
                None => groups.push((InputGroup { members: vec![m.model_id().to_string()], ..key }, ports)),
            }
        }
        groups.into_iter().map(|(g, _)| g).collect()
    }

    pub fn members(&self) -> &[ModelHandle] {
        &self.members
    }

    pub fn member(&self, model_id: &str) -> Option<&ModelHandle> {
        self.members.iter().find(|m| m.model_id() == model_id)
    }

    pub fn fused_graph(&self) -> &ComputationGraph {
        &self.fused
    }

    pub fn input_groups(&self) -> &[InputGroup] {
        &self.groups
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Largest batch size among unfinished members, or 0 when all are done.
    pub fn driver_batch(&self) -> usize {
        self.members.iter().filter(|m| !m.finished()).map(|m| m.batch_size).max().unwrap_or(0)
    }

    /// Per-member `(offset, length)` inside the driver batch; finished members
    /// get a zero-length slice.
    pub fn pad_slice_plan(&self) -> BTreeMap<String, Slice> {
        self.members
            .iter()
            .map(|m| {
                let length = if m.finished() { 0 } else { m.batch_size };
                (m.model_id().to_string(), Slice { offset: 0, length })
            })
            .collect()
    }

    /// A member's parameters under their original names.
    pub fn member_parameters(&self, model_id: &str) -> Result<ParamMap, PackError> {
        let m = self.member(model_id).ok_or_else(|| PackError::UnknownModel(model_id.to_string()))?;
        Ok(m.graph
            .param_shapes()
            .keys()
            .map(|name| (name.clone(), self.fused.parameters()[&prefixed(model_id, name)].clone()))
            .collect())
    }

    /// Adds a member to a running pack (for instance after another member
    /// was freed).
    pub fn add(&mut self, handle: ModelHandle) -> Result<(), PackError> {
        if self.member(handle.model_id()).is_some() {
            return Err(PackError::DuplicateModel(handle.model_id().to_string()));
        }
        self.scatter_parameters()?;
        self.members.push(handle);
        self.gather()
    }

    /// Removes a member and returns its live handle with parameters restored.
    pub fn release(&mut self, model_id: &str) -> Result<ModelHandle, PackError> {
        let idx = self
            .members
            .iter()
            .position(|m| m.model_id() == model_id)
            .ok_or_else(|| PackError::UnknownModel(model_id.to_string()))?;
        self.scatter_parameters()?;
        let handle = self.members.remove(idx);
        self.gather()?;
        Ok(handle)
    }

    /// Dissolves the pack and returns every member with its parameters.
    pub fn into_handles(mut self) -> Result<Vec<ModelHandle>, PackError> {
        self.scatter_parameters()?;
        Ok(self.members)
    }

    /// Frees a member and returns its checkpoint.
    pub fn free(&mut self, model_id: &str) -> Result<Checkpoint, PackError> {
        Ok(Checkpoint::capture(&self.release(model_id)?))
    }

    /// Phases that finish the current epoch of every unfinished member.
    pub fn epoch_plan(&self) -> Result<Vec<Phase>, PackError> {
        let members: Vec<PlanMember> = self
            .members
            .iter()
            .filter(|m| !m.finished())
            .map(|m| {
                let mut cursor = m.progress.clone();
                cursor.roll_if_exhausted();
                let left_in_epoch = cursor.dataset_len() - cursor.position;
                PlanMember {
                    model_id: m.model_id().to_string(),
                    batch_size: m.batch_size,
                    remaining_samples: left_in_epoch,
                }
            })
            .collect();
        make_epoch_plan(&members)
    }

    /// One synchronized step: every unfinished member trains on its own next
    /// batch and its optimizer advances exactly once.
    pub fn packed_step(&mut self, source: &dyn BatchSource) -> Result<StepOutcome, PackError> {
        let active: Vec<usize> = (0..self.members.len()).filter(|&i| !self.members[i].finished()).collect();
        if active.is_empty() {
            return Err(PackError::NothingToTrain);
        }
        for &i in &active {
            self.members[i].progress.roll_if_exhausted();
        }
        self.groups = self.compute_groups();
        if self.dedup && partition(&self.groups) != self.built_for {
            self.rebuild()?;
        }
        let driver = self.driver_batch();

        // Fetch one batch per physical input.
        let mut batches: BTreeMap<String, Batch> = BTreeMap::new();
        let mut feed = Feed::new();
        let mut physical = 0;
        let fetch_units: Vec<(Vec<String>, Option<usize>)> = if self.dedup {
            self.groups
                .iter()
                .enumerate()
                .map(|(k, g)| (g.members.clone(), (g.members.len() > 1).then_some(k)))
                .collect()
        } else {
            active.iter().map(|&i| (vec![self.members[i].model_id().to_string()], None)).collect()
        };
        for (ids, shared) in &fetch_units {
            let m = self.member(&ids[0]).expect("active member");
            let batch = source.fetch(&m.dataset, m.progress.epoch, m.progress.position, m.next_batch_len())?;
            physical += 1;
            let (x, y) = m.port_names();
            let (fx, fy, fm) = match shared {
                Some(k) => (group_port(*k, &x), group_port(*k, &y), group_port(*k, "mask")),
                None => (prefixed(&ids[0], &x), prefixed(&ids[0], &y), prefixed(&ids[0], "mask")),
            };
            let (features, labels, mask) = pad(&batch, driver);
            feed.insert(fx, features);
            feed.insert(fy, labels);
            feed.insert(fm, mask);
            for id in ids {
                batches.insert(id.clone(), batch.clone());
            }
        }
        // Finished members still sit in the graph; feed them inert rows.
        for m in self.members.iter().filter(|m| m.finished()) {
            let id = m.model_id();
            for p in m.graph.input_ports() {
                feed.insert(prefixed(id, &p.name), Tensor::zeros(vec![driver, p.width]));
            }
            feed.insert(prefixed(id, "mask"), Tensor::zeros(vec![driver, 1]));
        }

        let (out, grads) = self.fused.backward(&feed, Heads::All)?;

        let mut losses = BTreeMap::new();
        let mut finished = Vec::new();
        let mut epoch_completed = Vec::new();
        for &i in &active {
            let id = self.members[i].model_id().to_string();
            let names: Vec<String> = self.members[i].graph.param_shapes().keys().cloned().collect();
            let mut own = ParamMap::new();
            let mut own_grads = ParamMap::new();
            for name in &names {
                let key = prefixed(&id, name);
                own.insert(name.clone(), self.fused.parameters_mut().remove(&key).expect("member parameter"));
                own_grads.insert(name.clone(), grads[&key].clone());
            }
            let result = self.members[i].optimizer.apply_update(&mut own, &own_grads);
            for (name, t) in own {
                self.fused.parameters_mut().insert(prefixed(&id, &name), t);
            }
            result?;
            let m = &mut self.members[i];
            m.progress.record(&batches[&id]);
            losses.insert(id.clone(), out.losses[&prefixed(&id, &m.loss_head())]);
            if m.finished() {
                finished.push(id.clone());
            }
            if m.progress.epoch_exhausted() {
                epoch_completed.push(id);
            }
        }
        let replan = self.driver_batch() != driver || partition(&self.compute_groups()) != partition(&self.groups);
        self.groups = self.compute_groups();
        Ok(StepOutcome { losses, driver_batch: driver, physical_inputs: physical, finished, epoch_completed, replan })
    }

    /// Steps until every member reaches its budget; returns the step count.
    pub fn train_to_completion(&mut self, source: &dyn BatchSource) -> Result<u64, PackError> {
        let mut steps = 0;
        while self.members.iter().any(|m| !m.finished()) {
            self.packed_step(source)?;
            steps += 1;
        }
        Ok(steps)
    }
}

fn partition(groups: &[InputGroup]) -> Vec<Vec<String>> {
    groups.iter().map(|g| g.members.clone()).collect()
}

/// Pads a batch to `driver` rows; the mask marks live rows.
fn pad(batch: &Batch, driver: usize) -> (Tensor, Tensor, Tensor) {
    let rows = batch.indices.len();
    let d = batch.features.cols();
    let mut x = batch.features.data().to_vec();
    x.resize(driver * d, 0.0);
    let mut y: Vec<f64> = batch.labels.iter().map(|&l| f64::from(l)).collect();
    y.resize(driver, 0.0);
    let mut mask = vec![1.0; rows];
    mask.resize(driver, 0.0);
    (
        Tensor::new(vec![driver, d], x).expect("padded features"),
        Tensor::new(vec![driver, 1], y).expect("padded labels"),
        Tensor::new(vec![driver, 1], mask).expect("mask"),
    )
}
