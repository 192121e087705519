use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::network::{LayerOutput, ParamGroups};
use super::{nff_effective_weight, ConvSpec};
use crate::error::{Error, Result};
use crate::tasks::AdaptationMode;
use crate::tensor::{BatchNorm, Graph, Mode, ParamStore, Scalar, Tensor, Var};

/// Starting point of a new task's 1×1 modulator, shaped `[c_out, rank]`.
#[derive(Clone, Debug, PartialEq)]
pub enum ModulatorInit {
    /// Rectangular identity.
    Identity,
    /// A copy of the layer's stored basis (the response eigenvectors after
    /// response initialization).
    Basis,
    Given(Tensor<f64>),
}

/// Parameter names of a task's modulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Modulator {
    Linear {
        w: String,
    },
    /// Rows are `g_i · v_i / ‖v_i‖`.
    Nff {
        v: String,
        g: String,
    },
}

impl Modulator {
    pub fn names(&self) -> Vec<String> {
        match self {
            Modulator::Linear { w } => vec![w.clone()],
            Modulator::Nff { v, g } => vec![v.clone(), g.clone()],
        }
    }
}

/// What one task owns in a reparameterized layer. `None` fields fall back
/// to the layer's shared templates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RcmTaskLayer {
    pub modulator: Option<Modulator>,
    pub bias: Option<String>,
    pub bn: Option<BatchNorm>,
}

/// A k×k convolution factored into a locked filter bank `W_s` of `rank`
/// filters and a per-task 1×1 modulator with bias, followed by batch norm
/// and the activation of the original layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RcmConvLayer {
    pub name: String,
    pub spec: ConvSpec,
    pub rank: usize,
    pub nff: bool,
    /// `[rank, c_in, k, k]`, locked.
    pub bank: String,
    /// `[c_out, rank]` template modulator.
    pub basis: String,
    /// `[c_out]` template bias.
    pub bias: String,
    pub bn: Option<BatchNorm>,
    pub tasks: BTreeMap<String, RcmTaskLayer>,
}

impl RcmConvLayer {
    /// Register the shared state. The bank is locked immediately; the
    /// template batch norm starts at identity.
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: String,
        spec: ConvSpec,
        nff: bool,
        bank: Tensor<T>,
        basis: Tensor<T>,
        bias: Tensor<T>,
    ) -> Result<Self> {
        let k = spec.kernel;
        let rank = bank.shape().first().copied().unwrap_or(0);
        if rank == 0 || rank > spec.c_out || bank.shape() != [rank, spec.c_in, k, k] {
            return Err(Error::shape(
                "rcm",
                format!(
                    "filter bank {:?} does not fit {}→{} k={k}",
                    bank.shape(),
                    spec.c_in,
                    spec.c_out
                ),
            ));
        }
        if basis.shape() != [spec.c_out, rank] {
            return Err(Error::shape(
                "rcm",
                format!("basis {:?}, want [{}, {rank}]", basis.shape(), spec.c_out),
            ));
        }
        if bias.shape() != [spec.c_out] {
            return Err(Error::shape(
                "rcm",
                format!("bias {:?}, want [{}]", bias.shape(), spec.c_out),
            ));
        }
        let bank_name = format!("{name}.bank.weight");
        store.insert(&bank_name, bank, false)?;
        store.lock(&bank_name)?;
        let basis_name = format!("{name}.bank.basis");
        store.insert(&basis_name, basis, false)?;
        let bias_name = format!("{name}.bank.bias");
        store.insert(&bias_name, bias, false)?;
        let bn = if spec.batch_norm {
            let bn = BatchNorm::register(store, format!("{name}.bank.bn"), spec.c_out)?;
            for p in bn.param_names() {
                store.set_trainable(&p, false)?;
            }
            Some(bn)
        } else {
            None
        };
        Ok(Self {
            name,
            spec,
            rank,
            nff,
            bank: bank_name,
            basis: basis_name,
            bias: bias_name,
            bn,
            tasks: BTreeMap::new(),
        })
    }

    fn task_prefix(&self, task: &str) -> String {
        format!("{}.task.{task}", self.name)
    }

    fn state(&self, task: &str) -> Result<&RcmTaskLayer> {
        self.tasks.get(task).ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    fn init_matrix<T: Scalar>(&self, store: &ParamStore<T>, init: &ModulatorInit) -> Result<Tensor<T>> {
        let (c_out, r) = (self.spec.c_out, self.rank);
        match init {
            ModulatorInit::Identity => {
                let mut m = Tensor::zeros([c_out, r]);
                for i in 0..r.min(c_out) {
                    m.data_mut()[i * r + i] = T::one();
                }
                Ok(m)
            }
            ModulatorInit::Basis => Ok(store.value(&self.basis)?.clone()),
            ModulatorInit::Given(t) => {
                if t.shape() != [c_out, r] {
                    return Err(Error::shape(
                        "modulator",
                        format!("given {:?}, want [{c_out}, {r}]", t.shape()),
                    ));
                }
                Ok(t.cast())
            }
        }
    }

    /// Allocate a task's modulator (and bias and batch norm) from `init`.
    pub fn add_task_modulator<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        task: &str,
        init: &ModulatorInit,
    ) -> Result<()> {
        self.add_task(store, task, AdaptationMode::RCM, init)
    }

    /// Register a task. Only modes that keep the filter bank frozen apply:
    /// RCM owns a modulator, bias and batch norm; task-specific BN owns a
    /// batch norm over the template path; a frozen encoder owns nothing.
    pub fn add_task<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        task: &str,
        mode: AdaptationMode,
        init: &ModulatorInit,
    ) -> Result<()> {
        if self.tasks.contains_key(task) {
            return Err(Error::DuplicateTask(task.to_string()));
        }
        let prefix = self.task_prefix(task);
        let mut state = RcmTaskLayer::default();
        match mode {
            AdaptationMode::RCM => {
                let m = self.init_matrix(store, init)?;
                let modulator = if self.nff {
                    let r = self.rank;
                    let norms: Vec<T> = (0..self.spec.c_out)
                        .map(|i| m.data()[i * r..(i + 1) * r].iter().map(|&x| x * x).sum::<T>().sqrt())
                        .collect();
                    if let Some(i) = norms.iter().position(|&n| n <= T::zero()) {
                        return Err(Error::Degenerate(format!("modulator init row {i} has zero norm")));
                    }
                    let v = format!("{prefix}.mod.v");
                    let g = format!("{prefix}.mod.g");
                    store.insert(&v, m, true)?;
                    store.insert(&g, Tensor::new([self.spec.c_out], norms)?, true)?;
                    Modulator::Nff { v, g }
                } else {
                    let w = format!("{prefix}.mod.w");
                    store.insert(&w, m, true)?;
                    Modulator::Linear { w }
                };
                let bias = format!("{prefix}.mod.bias");
                store.insert(&bias, store.value(&self.bias)?.clone(), true)?;
                state.modulator = Some(modulator);
                state.bias = Some(bias);
                state.bn = self.task_bn(store, &prefix)?;
            }
            AdaptationMode::TaskSpecificBN => state.bn = self.task_bn(store, &prefix)?,
            AdaptationMode::FreezeEncoder => {}
            other => {
                return Err(Error::invalid(format!(
                    "mode `{other}` is not available on a reparameterized backbone"
                )))
            }
        }
        self.tasks.insert(task.to_string(), state);
        Ok(())
    }

    fn task_bn<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<Option<BatchNorm>> {
        let Some(template) = &self.bn else { return Ok(None) };
        Ok(Some(template.duplicate(store, format!("{prefix}.bn"))?))
    }

    /// Effective `[c_out, rank]` modulator of a task.
    pub fn effective_modulator<T: Scalar>(&self, store: &ParamStore<T>, task: &str) -> Result<Tensor<T>> {
        match &self.state(task)?.modulator {
            None => Ok(store.value(&self.basis)?.clone()),
            Some(Modulator::Linear { w }) => Ok(store.value(w)?.clone()),
            Some(Modulator::Nff { v, g }) => {
                let v = store.value(v)?;
                let g = store.value(g)?;
                let r = self.rank;
                let mut out = Vec::with_capacity(v.len());
                for i in 0..self.spec.c_out {
                    let row = Tensor::new([r], v.data()[i * r..(i + 1) * r].to_vec())?;
                    out.extend(nff_effective_weight(&row, g.data()[i])?.into_data());
                }
                Tensor::new([self.spec.c_out, r], out)
            }
        }
    }

    /// Replace a task's `(v, g)` modulator by its folded weight. A no-op on
    /// a linear modulator. Returns the folded weight.
    pub fn fold_nff<T: Scalar>(&mut self, store: &mut ParamStore<T>, task: &str) -> Result<Tensor<T>> {
        let w = self.effective_modulator(store, task)?;
        let prefix = self.task_prefix(task);
        let state = self.tasks.get_mut(task).expect("checked above");
        match &state.modulator {
            Some(Modulator::Nff { v, g }) => {
                let trainable = store.by_name(v)?.trainable();
                store.remove(v)?;
                store.remove(g)?;
                let name = format!("{prefix}.mod.w");
                store.insert(&name, w.clone(), trainable)?;
                state.modulator = Some(Modulator::Linear { w: name });
                Ok(w)
            }
            Some(Modulator::Linear { .. }) => Ok(w),
            None => Err(Error::invalid(format!(
                "task `{task}` has no modulator in layer {}",
                self.name
            ))),
        }
    }

    /// `bank` convolution, task modulator plus bias, then the task's batch
    /// norm (or the template's in eval mode) and the activation. `None`
    /// runs the template path.
    pub fn forward<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        task: Option<&str>,
        mode: Mode,
    ) -> Result<LayerOutput<T>> {
        let template = RcmTaskLayer::default();
        let state = match task {
            Some(t) => self.state(t)?,
            None => &template,
        };
        let bank = graph.param(store, &self.bank)?;
        let responses = graph.conv2d(x, bank, None, self.spec.stride, self.spec.padding())?;
        let m = match &state.modulator {
            None => graph.param(store, &self.basis)?,
            Some(Modulator::Linear { w }) => graph.param(store, w)?,
            Some(Modulator::Nff { v, g }) => {
                let v = graph.param(store, v)?;
                let g = graph.param(store, g)?;
                graph.weight_norm(v, g)?
            }
        };
        let m = graph.reshape(m, &[self.spec.c_out, self.rank, 1, 1])?;
        let bias = graph.param(store, state.bias.as_ref().unwrap_or(&self.bias))?;
        let mut z = graph.conv2d(responses, m, Some(bias), 1, 0)?;
        let pre_bn = z;
        let mut stats = None;
        if let Some(bn) = &state.bn {
            let (y, s) = bn.forward(graph, store, z, mode)?;
            z = y;
            stats = s.map(|s| (bn.clone(), s));
        } else if let Some(bn) = &self.bn {
            z = bn.forward(graph, store, z, Mode::Eval)?.0;
        }
        let out = if self.spec.relu { graph.relu(z)? } else { z };
        Ok(LayerOutput { pre_bn, out, stats })
    }

    pub(crate) fn param_groups(&self, task: &str) -> Result<ParamGroups> {
        let state = self.state(task)?;
        let mut g = ParamGroups::default();
        if let Some(m) = &state.modulator {
            g.modulator.extend(m.names());
        }
        g.modulator.extend(state.bias.clone());
        if let Some(bn) = &state.bn {
            g.bn.extend(bn.param_names());
        }
        Ok(g)
    }

    pub(crate) fn learnable_names(&self) -> Vec<String> {
        self.tasks
            .keys()
            .flat_map(|t| self.param_groups(t).expect("task present").all())
            .collect()
    }
}
