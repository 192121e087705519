use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::block::ConvBlock;
use super::rcm::{ModulatorInit, RcmConvLayer};
use super::BackboneSpec;
use crate::error::{Error, Result};
use crate::tasks::{AdaptationMode, HeadKind, TaskSpec};
use crate::tensor::{BatchNorm, BatchStats, Graph, Mode, ParamStore, Scalar, Tensor, Var};

/// Graph nodes produced by one backbone layer. `stats` holds the batch
/// statistics of a train-mode batch norm, not yet applied.
pub struct LayerOutput<T> {
    pub pre_bn: Var,
    pub out: Var,
    pub stats: Option<(BatchNorm, BatchStats<T>)>,
}

/// A task's own parameters in one layer, grouped by role.
#[derive(Clone, Debug, Default)]
pub(crate) struct ParamGroups {
    pub conv: Vec<String>,
    pub bn: Vec<String>,
    pub adapter: Vec<String>,
    pub modulator: Vec<String>,
}

impl ParamGroups {
    pub fn all(&self) -> Vec<String> {
        let mut v = self.conv.clone();
        v.extend(self.bn.iter().cloned());
        v.extend(self.adapter.iter().cloned());
        v.extend(self.modulator.iter().cloned());
        v
    }

    pub fn extend(&mut self, other: ParamGroups) {
        self.conv.extend(other.conv);
        self.bn.extend(other.bn);
        self.adapter.extend(other.adapter);
        self.modulator.extend(other.modulator);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Form {
    /// Ordinary convolutions.
    Plain,
    /// Filter banks with per-task modulators.
    Reparameterized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum BackboneLayer {
    Plain(ConvBlock),
    Rcm(RcmConvLayer),
}

impl BackboneLayer {
    pub fn name(&self) -> &str {
        match self {
            BackboneLayer::Plain(b) => &b.name,
            BackboneLayer::Rcm(r) => &r.name,
        }
    }

    /// The convolution weight every task reads.
    pub fn shared_weight(&self) -> &str {
        match self {
            BackboneLayer::Plain(b) => &b.shared.weight,
            BackboneLayer::Rcm(r) => &r.bank,
        }
    }

    fn learnable_names(&self) -> Vec<String> {
        match self {
            BackboneLayer::Plain(b) => b.learnable_names(),
            BackboneLayer::Rcm(r) => r.learnable_names(),
        }
    }

    fn param_groups(&self, task: &str) -> Result<ParamGroups> {
        match self {
            BackboneLayer::Plain(b) => b.param_groups(task),
            BackboneLayer::Rcm(r) => r.param_groups(task),
        }
    }
}

/// A task's output layer: a 1×1 convolution with bias, applied per pixel
/// (dense) or after global average pooling (classification).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub kind: HeadKind,
    pub weight: String,
    pub bias: String,
}

impl Head {
    pub fn names(&self) -> [String; 2] {
        [self.weight.clone(), self.bias.clone()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub spec: TaskSpec,
    pub mode: AdaptationMode,
    pub head: Head,
}

/// Structure of a network without its tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub arch: BackboneSpec,
    pub form: Form,
    pub nff: bool,
    pub seed: u64,
    pub layers: Vec<BackboneLayer>,
    pub tasks: Vec<TaskEntry>,
}

/// Graph handles of one layer's pre-normalization response and output.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    pub pre_bn: Var,
    pub out: Var,
}

/// Batch statistics gathered in a train-mode forward, applied afterwards.
pub type StatUpdates<T> = Vec<(BatchNorm, BatchStats<T>)>;

pub struct ForwardTrace<T> {
    pub output: Var,
    pub layers: Vec<LayerTrace>,
    /// Batch statistics of every batch norm that ran in train mode.
    pub stats: StatUpdates<T>,
}

/// A multi-task network: a backbone shared (in the sense of its mode) by
/// every registered task plus one head per task.
#[derive(Clone, Debug)]
pub struct Network<T> {
    pub layout: Layout,
    pub store: ParamStore<T>,
}

/// FNV-1a, used to derive stable per-task seeds.
fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl<T: Scalar> Network<T> {
    /// Plain backbone with He-normal weights drawn from `seed`.
    pub fn new(arch: BackboneSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(arch.layers.len());
        for (i, spec) in arch.layers.iter().enumerate() {
            layers.push(BackboneLayer::Plain(ConvBlock::register(
                &mut store,
                format!("layer{i}"),
                *spec,
                &mut rng,
            )?));
        }
        Ok(Self {
            layout: Layout {
                arch,
                form: Form::Plain,
                nff: false,
                seed,
                layers,
                tasks: Vec::new(),
            },
            store,
        })
    }

    pub(crate) fn from_parts(layout: Layout, store: ParamStore<T>) -> Self {
        Self { layout, store }
    }

    pub fn form(&self) -> Form {
        self.layout.form
    }

    pub fn layers(&self) -> &[BackboneLayer] {
        &self.layout.layers
    }

    pub fn tasks(&self) -> &[TaskEntry] {
        &self.layout.tasks
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.layout.tasks.iter().map(|t| t.spec.id.clone()).collect()
    }

    pub fn task(&self, id: &str) -> Result<&TaskEntry> {
        self.layout
            .tasks
            .iter()
            .find(|t| t.spec.id == id)
            .ok_or_else(|| Error::UnknownTask(id.to_string()))
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layout
            .layers
            .iter()
            .position(|l| l.name() == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// Add a task, allocating its head and its per-layer state for `mode`.
    /// Existing tasks are untouched. `init` only matters for RCM tasks.
    pub fn register_task(&mut self, spec: TaskSpec, mode: AdaptationMode, init: &ModulatorInit) -> Result<()> {
        spec.validate()?;
        if self.task(&spec.id).is_ok() {
            return Err(Error::DuplicateTask(spec.id.clone()));
        }
        if mode.needs_filter_bank() && self.layout.form != Form::Reparameterized {
            return Err(Error::invalid(
                "rcm tasks need a reparameterized backbone; decompose the network first",
            ));
        }
        // Stage everything on copies so a failure leaves the network as it was.
        let mut store = self.store.clone();
        let mut layers = self.layout.layers.clone();
        for layer in &mut layers {
            match layer {
                BackboneLayer::Plain(b) => b.add_task(&mut store, &spec.id, mode)?,
                BackboneLayer::Rcm(r) => r.add_task(&mut store, &spec.id, mode, init)?,
            }
        }
        let c = self.layout.arch.out_channels();
        let outputs = spec.head.outputs();
        let mut rng = ChaCha8Rng::seed_from_u64(self.layout.seed ^ stable_hash(&spec.id));
        let head = Head {
            kind: spec.head,
            weight: format!("head.{}.weight", spec.id),
            bias: format!("head.{}.bias", spec.id),
        };
        store.insert(
            &head.weight,
            Tensor::randn([outputs, c, 1, 1], (1.0 / c as f64).sqrt(), &mut rng),
            true,
        )?;
        store.insert(&head.bias, Tensor::zeros([outputs]), true)?;
        self.store = store;
        self.layout.layers = layers;
        self.layout.tasks.push(TaskEntry { spec, mode, head });
        Ok(())
    }

    /// Run `task` on `x` (NCHW). Batch statistics of train-mode batch norms
    /// are returned in the trace, not applied. With `train_shared`, shared
    /// batch norms of a plain backbone also run in `mode`; otherwise they
    /// always use their running statistics.
    pub fn forward(
        &self,
        graph: &mut Graph<T>,
        task: &str,
        x: Var,
        mode: Mode,
        train_shared: bool,
    ) -> Result<ForwardTrace<T>> {
        let entry = self.task(task)?;
        let in_h = graph.value(x).dims4("network input")?.2;
        let (layers, stats) = self.backbone(graph, Some(task), x, mode, train_shared)?;
        let h = layers.last().map_or(x, |l| l.out);
        let w = graph.param(&self.store, &entry.head.weight)?;
        let b = graph.param(&self.store, &entry.head.bias)?;
        let output = match entry.head.kind {
            HeadKind::Dense { .. } => {
                let y = graph.conv2d(h, w, Some(b), 1, 0)?;
                let out_h = graph.value(y).shape()[2];
                if out_h == in_h {
                    y
                } else if out_h > 0 && in_h % out_h == 0 {
                    graph.upsample_nearest(y, in_h / out_h)?
                } else {
                    return Err(Error::shape(
                        "dense head",
                        format!("backbone output height {out_h} does not divide input height {in_h}"),
                    ));
                }
            }
            HeadKind::Classify { .. } => {
                let pooled = graph.global_avg_pool(h)?;
                graph.conv2d(pooled, w, Some(b), 1, 0)?
            }
        };
        Ok(ForwardTrace { output, layers, stats })
    }

    /// Backbone only. `task == None` runs the shared path: shared weights and
    /// batch norms of a plain backbone, the template modulator of a
    /// reparameterized one.
    pub fn backbone(
        &self,
        graph: &mut Graph<T>,
        task: Option<&str>,
        x: Var,
        mode: Mode,
        train_shared: bool,
    ) -> Result<(Vec<LayerTrace>, StatUpdates<T>)> {
        let mut h = x;
        let mut layers = Vec::with_capacity(self.layout.layers.len());
        let mut stats = Vec::new();
        for layer in &self.layout.layers {
            let out = match layer {
                BackboneLayer::Plain(b) => b.forward(graph, &self.store, h, task, mode, train_shared)?,
                BackboneLayer::Rcm(r) => r.forward(graph, &self.store, h, task, mode)?,
            };
            layers.push(LayerTrace {
                pre_bn: out.pre_bn,
                out: out.out,
            });
            stats.extend(out.stats);
            h = out.out;
        }
        Ok((layers, stats))
    }

    /// Eval-mode prediction.
    pub fn predict(&self, task: &str, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::for_params([]);
        let x = g.input(input.clone())?;
        let trace = self.forward(&mut g, task, x, Mode::Eval, false)?;
        Ok(g.value(trace.output).clone())
    }

    /// Eval-mode outputs of every layer followed by the head output.
    pub fn layer_outputs(&self, task: &str, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::for_params([]);
        let x = g.input(input.clone())?;
        let trace = self.forward(&mut g, task, x, Mode::Eval, false)?;
        let mut out: Vec<Tensor<T>> = trace.layers.iter().map(|l| g.value(l.out).clone()).collect();
        out.push(g.value(trace.output).clone());
        Ok(out)
    }

    /// Fold batch statistics into running statistics.
    pub fn apply_stats(&mut self, stats: &[(BatchNorm, BatchStats<T>)]) -> Result<()> {
        for (bn, s) in stats {
            bn.update_running(&mut self.store, s)?;
        }
        Ok(())
    }

    pub(crate) fn task_groups(&self, task: &str) -> Result<ParamGroups> {
        let mut g = ParamGroups::default();
        for l in &self.layout.layers {
            g.extend(l.param_groups(task)?);
        }
        Ok(g)
    }

    /// Parameters that pretraining updates alongside the head: the shared
    /// convolutions and batch norms of a plain backbone.
    pub fn shared_learnable(&self) -> Vec<String> {
        self.layout
            .layers
            .iter()
            .filter_map(|l| match l {
                BackboneLayer::Plain(b) => Some(b.shared_learnable()),
                BackboneLayer::Rcm(_) => None,
            })
            .flatten()
            .collect()
    }

    /// Reset trainable flags from the layout: weights, biases, modulators,
    /// adapters, heads and batch-norm affine terms are trainable; running
    /// statistics, templates and the basis are not; filter banks are locked.
    pub fn apply_param_roles(&mut self) -> Result<()> {
        let names: Vec<String> = self.store.iter().map(|p| p.name.clone()).collect();
        for n in &names {
            if !self.store.by_name(n)?.locked() {
                self.store.set_trainable(n, false)?;
            }
        }
        let mut learnable = Vec::new();
        for l in &self.layout.layers {
            learnable.extend(l.learnable_names());
            if let BackboneLayer::Rcm(r) = l {
                self.store.lock(&r.bank)?;
            }
        }
        for t in &self.layout.tasks {
            learnable.extend(t.head.names());
        }
        for n in learnable {
            self.store.set_trainable(&n, true)?;
        }
        Ok(())
    }

    pub fn state_hash(&self) -> String {
        self.store.state_hash()
    }

    /// Hash of one task's parameters, head included.
    pub fn task_hash(&self, task: &str) -> Result<String> {
        let mut sub = ParamStore::new();
        let entry = self.task(task)?;
        for n in self.task_groups(task)?.all().into_iter().chain(entry.head.names()) {
            sub.insert(&n, self.store.value(&n)?.clone(), false)?;
        }
        for l in &self.layout.layers {
            let bn = match l {
                BackboneLayer::Plain(b) => b.tasks.get(task).and_then(|s| s.bn.as_ref()),
                BackboneLayer::Rcm(r) => r.tasks.get(task).and_then(|s| s.bn.as_ref()),
            };
            for n in bn.map(|bn| bn.buffer_names()).into_iter().flatten() {
                sub.insert(&n, self.store.value(&n)?.clone(), false)?;
            }
        }
        Ok(sub.state_hash())
    }
}
