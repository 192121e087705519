//! Task registry helpers, mode-dependent trainable sets, training loops and
//! parameter accounting.

mod spec;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use spec::*;

use crate::analysis::task_metric;
use crate::data::{stack_images, targets, MultiTaskSample, Targets};
use crate::error::{Error, Result};
use crate::layers::{BackboneLayer, BackboneSpec, ModulatorInit, Network};
use crate::tensor::{poly_lr, Graph, Mode, Scalar, Sgd, Tensor, Var};

/// Register `spec` on `net` in `mode`.
pub fn register_task<T: Scalar>(
    net: &mut Network<T>,
    spec: TaskSpec,
    mode: AdaptationMode,
    init: &ModulatorInit,
) -> Result<()> {
    net.register_task(spec, mode, init)
}

/// Names a task trains in `mode`:
///
/// | mode | set |
/// |---|---|
/// | freeze | head |
/// | bn-only | head, batch norms |
/// | conv-only | head, convolutions |
/// | single | head, convolutions, batch norms |
/// | rcm | head, batch norms, modulators and their biases |
/// | series-ra, parallel-ra | head, batch norms, adapters |
///
/// `mode` must be the mode the task was registered with. Filter banks never
/// appear.
pub fn trainable_parameters<T: Scalar>(net: &Network<T>, task: &str, mode: AdaptationMode) -> Result<BTreeSet<String>> {
    let entry = net.task(task)?;
    if entry.mode != mode {
        return Err(Error::invalid(format!(
            "task `{task}` is registered as `{}`, not `{mode}`",
            entry.mode
        )));
    }
    let g = net.task_groups(task)?;
    let mut set: BTreeSet<String> = entry.head.names().into_iter().collect();
    let (conv, bn, adapter, modulator) = match mode {
        AdaptationMode::FreezeEncoder => (false, false, false, false),
        AdaptationMode::TaskSpecificBN => (false, true, false, false),
        AdaptationMode::TaskSpecificConv => (true, false, false, false),
        AdaptationMode::SingleTask => (true, true, false, false),
        AdaptationMode::RCM => (false, true, false, true),
        AdaptationMode::SeriesRA | AdaptationMode::ParallelRA => (false, true, true, false),
    };
    for (on, names) in [
        (conv, g.conv),
        (bn, g.bn),
        (adapter, g.adapter),
        (modulator, g.modulator),
    ] {
        if on {
            set.extend(names);
        }
    }
    for l in net.layers() {
        if let BackboneLayer::Rcm(r) = l {
            if set.contains(&r.bank) {
                return Err(Error::invalid(format!("filter bank `{}` would be trained", r.bank)));
            }
        }
    }
    Ok(set)
}

/// Weighted loss of a task's head output.
pub fn task_loss<T: Scalar>(graph: &mut Graph<T>, spec: &TaskSpec, output: Var, target: &Targets<T>) -> Result<Var> {
    let raw = match (spec.loss, target) {
        (LossKind::WeightedBce { pos_weight, neg_weight }, Targets::Binary(t)) => {
            graph.bce_with_logits(output, t, T::c(pos_weight), T::c(neg_weight), None)?
        }
        (LossKind::CrossEntropy, Targets::Classes(labels)) => graph.cross_entropy(output, labels)?,
        (LossKind::L1, Targets::Regression { values, mask }) => graph.l1(output, values, mask.clone())?,
        (loss, _) => {
            return Err(Error::invalid(format!(
                "loss {loss:?} does not fit the labels of task `{}`",
                spec.id
            )))
        }
    };
    graph.scale(raw, T::c(spec.loss_weight))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean weighted loss over the epoch's minibatches.
    pub loss: f64,
    /// Metric on the training minibatches, weighted by batch size.
    pub metric: f64,
}

fn run_training<T: Scalar>(
    net: &mut Network<T>,
    task: &str,
    names: &BTreeSet<String>,
    train_shared: bool,
    data: &[MultiTaskSample],
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    let spec = net.task(task)?.spec.clone();
    if data.iter().any(|s| s.labels.is_none()) {
        return Err(Error::invalid(format!("training data for `{task}` lacks labels")));
    }
    let ids = names
        .iter()
        .filter(|n| net.store.by_name(n).map(|p| p.trainable()).unwrap_or(false))
        .map(|n| net.store.id(n))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = Sgd::<T>::new(config.momentum, config.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let per_epoch = data.len().div_ceil(config.batch_size);
    let max_iter = per_epoch * config.epochs;
    let mut iter = 0;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut metric_sum) = (0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&MultiTaskSample> = chunk.iter().map(|&i| &data[i]).collect();
            let x = stack_images::<T>(&batch)?;
            let tgt = targets::<T>(spec.target, &batch)?;
            let mut g = Graph::for_params(ids.iter().copied());
            let xv = g.input(x)?;
            let trace = net.forward(&mut g, task, xv, Mode::Train, train_shared)?;
            let loss = task_loss(&mut g, &spec, trace.output, &tgt)?;
            let loss_value = g.value(loss).data()[0].f64();
            if !loss_value.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            metric_sum += task_metric(&spec, g.value(trace.output), &tgt)? * batch.len() as f64;
            loss_sum += loss_value;
            net.store.zero_grads();
            g.backward(loss, &mut net.store)?;
            let lr = poly_lr(config.base_lr, iter, max_iter, config.poly_power)?;
            opt.step(&mut net.store, names.iter().map(String::as_str), lr)?;
            net.apply_stats(&trace.stats)?;
            iter += 1;
        }
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / per_epoch as f64,
            metric: metric_sum / data.len() as f64,
        });
    }
    net.store.zero_grads();
    Ok(history)
}

/// Train one task's own parameters with SGD, momentum, weight decay and a
/// poly schedule. Other tasks are not touched.
pub fn train_task<T: Scalar>(
    net: &mut Network<T>,
    task: &str,
    data: &[MultiTaskSample],
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    let mode = net.task(task)?.mode;
    let names = trainable_parameters(net, task, mode)?;
    run_training(net, task, &names, false, data, config)
}

/// Train the shared backbone of a plain network together with `task`'s
/// head, running the shared batch norms on batch statistics. This is the
/// pretraining step; every task relying on shared weights sees the change.
pub fn pretrain<T: Scalar>(
    net: &mut Network<T>,
    task: &str,
    data: &[MultiTaskSample],
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    let entry = net.task(task)?;
    if entry.mode != AdaptationMode::FreezeEncoder {
        return Err(Error::invalid(
            "pretraining runs through a task registered in freeze mode",
        ));
    }
    let mut names: BTreeSet<String> = entry.head.names().into_iter().collect();
    let shared = net.shared_learnable();
    if shared.is_empty() {
        return Err(Error::invalid("network has no shared trainable backbone"));
    }
    names.extend(shared);
    run_training(net, task, &names, true, data, config)
}

/// Eval-mode outputs of `task` over `data`, concatenated on the batch axis.
pub fn predict_all<T: Scalar>(
    net: &Network<T>,
    task: &str,
    data: &[MultiTaskSample],
    batch: usize,
) -> Result<Tensor<T>> {
    if data.is_empty() || batch == 0 {
        return Err(Error::invalid("prediction needs samples and a positive batch size"));
    }
    let mut shape = Vec::new();
    let mut values = Vec::new();
    for chunk in data.chunks(batch) {
        let refs: Vec<&MultiTaskSample> = chunk.iter().collect();
        let y = net.predict(task, &stack_images::<T>(&refs)?)?;
        if shape.is_empty() {
            shape = y.shape().to_vec();
            shape[0] = 0;
        }
        shape[0] += y.shape()[0];
        values.extend_from_slice(y.data());
    }
    Tensor::new(shape, values)
}

/// Metric of `task` on `data` in eval mode.
pub fn evaluate<T: Scalar>(net: &Network<T>, task: &str, data: &[MultiTaskSample]) -> Result<f64> {
    let spec = &net.task(task)?.spec;
    let out = predict_all(net, task, data, 16)?;
    let refs: Vec<&MultiTaskSample> = data.iter().collect();
    task_metric(spec, &out, &targets::<T>(spec.target, &refs)?)
}

// ---------------------------------------------------------------- counts

/// Parameter counts split into convolution weights, biases and batch-norm
/// affine terms. Running statistics and heads are excluded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breakdown {
    pub weights: usize,
    pub bias: usize,
    pub bn: usize,
}

impl Breakdown {
    pub fn total(&self) -> usize {
        self.weights + self.bias + self.bn
    }

    fn add(&mut self, o: Breakdown) {
        self.weights += o.weights;
        self.bias += o.bias;
        self.bn += o.bn;
    }

    fn times(self, p: usize) -> Breakdown {
        Breakdown {
            weights: self.weights * p,
            bias: self.bias * p,
            bn: self.bn * p,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub mode: AdaptationMode,
    pub tasks: usize,
    pub shared: Breakdown,
    pub per_task: Breakdown,
    pub total: Breakdown,
}

/// Backbone parameters for `p` tasks in `mode`. RCM modulators are counted
/// in their deployed (folded) form, one `c_out × c_out` matrix per layer at
/// full rank.
pub fn parameter_count(arch: &BackboneSpec, p: usize, mode: AdaptationMode) -> Result<ParamCount> {
    arch.validate()?;
    if p == 0 {
        return Err(Error::invalid("parameter count needs at least one task"));
    }
    let mut shared = Breakdown::default();
    let mut per_task = Breakdown::default();
    for l in &arch.layers {
        let conv = Breakdown {
            weights: l.weight_count(),
            bias: if l.bias { l.c_out } else { 0 },
            bn: 0,
        };
        let bn = Breakdown {
            bn: if l.batch_norm { 2 * l.c_out } else { 0 },
            ..Breakdown::default()
        };
        let (s, t) = match mode {
            AdaptationMode::FreezeEncoder => ([conv, bn], vec![]),
            AdaptationMode::TaskSpecificBN => ([conv, Breakdown::default()], vec![bn]),
            AdaptationMode::TaskSpecificConv => ([Breakdown::default(), bn], vec![conv]),
            AdaptationMode::SingleTask => ([Breakdown::default(); 2], vec![conv, bn]),
            AdaptationMode::RCM => (
                [
                    Breakdown {
                        weights: l.weight_count(),
                        ..Breakdown::default()
                    },
                    Breakdown::default(),
                ],
                vec![
                    Breakdown {
                        weights: l.c_out * l.c_out,
                        bias: l.c_out,
                        bn: 0,
                    },
                    bn,
                ],
            ),
            AdaptationMode::SeriesRA | AdaptationMode::ParallelRA => {
                let width = if mode == AdaptationMode::SeriesRA {
                    l.c_out
                } else {
                    l.c_in
                };
                (
                    [conv, Breakdown::default()],
                    vec![
                        Breakdown {
                            weights: l.c_out * width,
                            ..Breakdown::default()
                        },
                        bn,
                    ],
                )
            }
        };
        for b in s {
            shared.add(b);
        }
        for b in t {
            per_task.add(b);
        }
    }
    let mut total = shared;
    total.add(per_task.times(p));
    Ok(ParamCount {
        mode,
        tasks: p,
        shared,
        per_task,
        total,
    })
}
