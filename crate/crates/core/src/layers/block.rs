use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adapter::{ResidualAdapter, Topology};
use super::network::{LayerOutput, ParamGroups};
use super::ConvSpec;
use crate::error::{Error, Result};
use crate::tasks::AdaptationMode;
use crate::tensor::{BatchNorm, Graph, Mode, ParamStore, Scalar, Tensor, Var};

/// Names of one convolution's weight and optional bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    pub weight: String,
    pub bias: Option<String>,
}

impl ConvParams {
    fn names(&self) -> Vec<String> {
        let mut v = vec![self.weight.clone()];
        v.extend(self.bias.clone());
        v
    }

    fn duplicate<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<Self> {
        let weight = format!("{prefix}.conv.weight");
        store.insert(&weight, store.value(&self.weight)?.clone(), true)?;
        let bias = match &self.bias {
            Some(b) => {
                let name = format!("{prefix}.conv.bias");
                store.insert(&name, store.value(b)?.clone(), true)?;
                Some(name)
            }
            None => None,
        };
        Ok(Self { weight, bias })
    }
}

/// What one task owns inside a plain block.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlainTaskLayer {
    pub conv: Option<ConvParams>,
    pub bn: Option<BatchNorm>,
    pub adapter: Option<ResidualAdapter>,
}

/// A convolution with optional bias, batch norm and ReLU, shared by all
/// tasks, plus whatever each task keeps privately for this layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub name: String,
    pub spec: ConvSpec,
    pub shared: ConvParams,
    pub shared_bn: Option<BatchNorm>,
    pub tasks: BTreeMap<String, PlainTaskLayer>,
}

impl ConvBlock {
    /// He-normal weights, zero bias, identity batch norm.
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: String,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let std = (2.0 / spec.fan_in() as f64).sqrt();
        let weight = format!("{name}.shared.weight");
        store.insert(
            &weight,
            Tensor::randn([spec.c_out, spec.c_in, spec.kernel, spec.kernel], std, rng),
            true,
        )?;
        let bias = if spec.bias {
            let b = format!("{name}.shared.bias");
            store.insert(&b, Tensor::zeros([spec.c_out]), true)?;
            Some(b)
        } else {
            None
        };
        let shared_bn = if spec.batch_norm {
            Some(BatchNorm::register(store, format!("{name}.shared.bn"), spec.c_out)?)
        } else {
            None
        };
        Ok(Self {
            name,
            spec,
            shared: ConvParams { weight, bias },
            shared_bn,
            tasks: BTreeMap::new(),
        })
    }

    fn task_prefix(&self, task: &str) -> String {
        format!("{}.task.{task}", self.name)
    }

    /// Allocate the task's private state for `mode`.
    pub fn add_task<T: Scalar>(&mut self, store: &mut ParamStore<T>, task: &str, mode: AdaptationMode) -> Result<()> {
        if self.tasks.contains_key(task) {
            return Err(Error::DuplicateTask(task.to_string()));
        }
        let prefix = self.task_prefix(task);
        let mut state = PlainTaskLayer::default();
        if mode.has_task_conv() {
            state.conv = Some(self.shared.duplicate(store, &prefix)?);
        }
        if mode.has_task_bn() {
            if let Some(bn) = &self.shared_bn {
                state.bn = Some(bn.duplicate(store, format!("{prefix}.bn"))?);
            }
        }
        match mode {
            AdaptationMode::SeriesRA => {
                state.adapter = Some(ResidualAdapter::register(store, &prefix, &self.spec, Topology::Series)?);
            }
            AdaptationMode::ParallelRA => {
                state.adapter = Some(ResidualAdapter::register(
                    store,
                    &prefix,
                    &self.spec,
                    Topology::Parallel,
                )?);
            }
            AdaptationMode::RCM => {
                return Err(Error::invalid(
                    "rcm tasks need a reparameterized backbone; decompose the network first",
                ));
            }
            _ => {}
        }
        self.tasks.insert(task.to_string(), state);
        Ok(())
    }

    /// Convolution (own or shared), optional adapter merge, batch norm and
    /// activation. `None` runs the shared path; shared batch norms follow
    /// `mode` only with `train_shared`.
    pub fn forward<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        task: Option<&str>,
        mode: Mode,
        train_shared: bool,
    ) -> Result<LayerOutput<T>> {
        let shared_only = PlainTaskLayer::default();
        let state = match task {
            Some(t) => self.tasks.get(t).ok_or_else(|| Error::UnknownTask(t.to_string()))?,
            None => &shared_only,
        };
        let conv = state.conv.as_ref().unwrap_or(&self.shared);
        let w = graph.param(store, &conv.weight)?;
        let b = conv.bias.as_ref().map(|b| graph.param(store, b)).transpose()?;
        let mut z = graph.conv2d(x, w, b, self.spec.stride, self.spec.padding())?;
        if let Some(adapter) = &state.adapter {
            z = adapter.apply(graph, store, x, z, self.spec.stride)?;
        }
        let pre_bn = z;
        let mut stats = None;
        if let Some(bn) = &state.bn {
            let (y, s) = bn.forward(graph, store, z, mode)?;
            z = y;
            stats = s.map(|s| (bn.clone(), s));
        } else if let Some(bn) = &self.shared_bn {
            let bn_mode = if train_shared { mode } else { Mode::Eval };
            let (y, s) = bn.forward(graph, store, z, bn_mode)?;
            z = y;
            stats = s.map(|s| (bn.clone(), s));
        }
        let out = if self.spec.relu { graph.relu(z)? } else { z };
        Ok(LayerOutput { pre_bn, out, stats })
    }

    pub(crate) fn param_groups(&self, task: &str) -> Result<ParamGroups> {
        let state = self
            .tasks
            .get(task)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))?;
        let mut g = ParamGroups::default();
        if let Some(c) = &state.conv {
            g.conv.extend(c.names());
        }
        if let Some(bn) = &state.bn {
            g.bn.extend(bn.param_names());
        }
        if let Some(a) = &state.adapter {
            g.adapter.push(a.weight.clone());
        }
        Ok(g)
    }

    /// Shared parameters a pretraining run updates.
    pub(crate) fn shared_learnable(&self) -> Vec<String> {
        let mut v = self.shared.names();
        if let Some(bn) = &self.shared_bn {
            v.extend(bn.param_names());
        }
        v
    }

    /// Whether `task` computes this layer with the shared weights.
    pub fn uses_shared_conv(&self, task: &str) -> Result<bool> {
        let state = self
            .tasks
            .get(task)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))?;
        Ok(state.conv.is_none())
    }

    pub(crate) fn learnable_names(&self) -> Vec<String> {
        let mut v = self.shared_learnable();
        for t in self.tasks.keys() {
            let g = self.param_groups(t).expect("task present");
            v.extend(g.all());
        }
        v
    }
}
