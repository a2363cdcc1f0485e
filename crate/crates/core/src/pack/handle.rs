use serde::{Deserialize, Serialize};

use crate::data::{Batch, BatchSource};
use crate::error::PackError;
use crate::graph::{labels_tensor, ComputationGraph, Feed, Heads, PortKind};
use crate::optim::OptimizerState;

/// Per-model data progress within its own epoch order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgressCursor {
    pub steps_done: u64,
    pub epoch: u64,
    /// Samples consumed so far in the current epoch (a prefix of the order).
    pub position: usize,
    /// Use count per dataset sample index during the current epoch.
    pub samples_used: Vec<u32>,
}

impl ProgressCursor {
    pub fn new(dataset_len: usize) -> Self {
        Self { steps_done: 0, epoch: 0, position: 0, samples_used: vec![0; dataset_len] }
    }

    pub fn dataset_len(&self) -> usize {
        self.samples_used.len()
    }

    pub fn epoch_exhausted(&self) -> bool {
        self.position >= self.dataset_len()
    }

    /// True when every sample of the current epoch was used exactly once.
    pub fn epoch_fully_covered(&self) -> bool {
        self.samples_used.iter().all(|&c| c == 1)
    }

    /// Fraction of the current epoch consumed.
    pub fn epoch_progress(&self) -> f64 {
        self.position as f64 / self.dataset_len() as f64
    }

    pub(crate) fn roll_if_exhausted(&mut self) {
        if self.epoch_exhausted() {
            self.epoch += 1;
            self.position = 0;
            self.samples_used.iter_mut().for_each(|c| *c = 0);
        }
    }

    pub(crate) fn record(&mut self, batch: &Batch) {
        for &i in &batch.indices {
            self.samples_used[i] += 1;
        }
        self.position += batch.indices.len();
        self.steps_done += 1;
    }
}

/// A trainable model with its training traits: graph, optimizer, batch size
/// and step budget, bound to one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelHandle {
    pub graph: ComputationGraph,
    pub optimizer: OptimizerState,
    pub batch_size: usize,
    pub target_steps: u64,
    pub dataset: String,
    pub progress: ProgressCursor,
}

impl ModelHandle {
    /// The graph must expose one feature port, one label port and a single
    /// loss head, and carry initialized parameters.
    pub fn new(
        mut graph: ComputationGraph,
        optimizer: OptimizerState,
        batch_size: usize,
        target_steps: u64,
        dataset: impl Into<String>,
        dataset_len: usize,
    ) -> Result<Self, PackError> {
        let dataset = dataset.into();
        let invalid = |reason: String| PackError::InvalidHandle { model_id: graph.model_id().to_string(), reason };
        if batch_size == 0 || batch_size > dataset_len {
            return Err(invalid(format!("batch size {batch_size} must be in 1..={dataset_len}")));
        }
        if target_steps == 0 {
            return Err(invalid("target_steps must be >= 1".into()));
        }
        let features = graph.input_ports().iter().filter(|p| p.kind == PortKind::Features).count();
        let labels = graph.input_ports().iter().filter(|p| p.kind == PortKind::Labels).count();
        let masks = graph.input_ports().iter().filter(|p| p.kind == PortKind::Mask).count();
        if features != 1 || labels != 1 || masks != 0 || graph.loss_heads().len() != 1 {
            return Err(invalid("expected exactly one feature port, one label port and one loss head".into()));
        }
        if graph.parameters().len() != graph.param_shapes().len() {
            return Err(invalid("parameters are not initialized".into()));
        }
        graph.set_binding(&dataset);
        Ok(Self { graph, optimizer, batch_size, target_steps, dataset, progress: ProgressCursor::new(dataset_len) })
    }

    pub fn model_id(&self) -> &str {
        self.graph.model_id()
    }

    pub fn finished(&self) -> bool {
        self.progress.steps_done >= self.target_steps
    }

    pub(crate) fn port_names(&self) -> (String, String) {
        let find =
            |kind| self.graph.input_ports().iter().find(|p| p.kind == kind).map(|p| p.name.clone()).expect("validated");
        (find(PortKind::Features), find(PortKind::Labels))
    }

    pub(crate) fn loss_head(&self) -> String {
        self.graph.loss_heads()[0].to_string()
    }

    /// Rows this model reads on its next step (a short final batch closes
    /// each epoch).
    pub fn next_batch_len(&self) -> usize {
        let remaining = if self.progress.epoch_exhausted() {
            self.progress.dataset_len()
        } else {
            self.progress.dataset_len() - self.progress.position
        };
        self.batch_size.min(remaining)
    }

    /// One standalone training step on this model's next batch.
    pub fn train_step(&mut self, source: &dyn BatchSource) -> Result<f64, PackError> {
        if self.finished() {
            return Err(PackError::NothingToTrain);
        }
        self.progress.roll_if_exhausted();
        let b = self.next_batch_len();
        let batch = source.fetch(&self.dataset, self.progress.epoch, self.progress.position, b)?;
        let (x, y) = self.port_names();
        let feed = Feed::from([(x, batch.features.clone()), (y, labels_tensor(&batch.labels))]);
        let (out, grads) = self.graph.backward(&feed, Heads::All)?;
        self.optimizer.apply_update(self.graph.parameters_mut(), &grads)?;
        self.progress.record(&batch);
        Ok(out.losses[&self.loss_head()])
    }

    /// Trains until the step budget is spent; returns the last loss.
    pub fn train_to_target(&mut self, source: &dyn BatchSource) -> Result<Option<f64>, PackError> {
        let mut last = None;
        while !self.finished() {
            last = Some(self.train_step(source)?);
        }
        Ok(last)
    }

    /// Mean loss over a whole dataset without touching any state.
    pub fn evaluate(&self, features: &crate::tensor::Tensor, labels: &[u32]) -> Result<f64, PackError> {
        let (x, y) = self.port_names();
        let feed = Feed::from([(x, features.clone()), (y, labels_tensor(labels))]);
        let out = self.graph.forward(&feed)?;
        Ok(out.losses[&self.loss_head()])
    }
}
