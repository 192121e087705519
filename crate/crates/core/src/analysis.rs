//! Evaluation metrics, the average relative drop against single-task
//! baselines, and representational similarity analysis of per-task
//! gradients on shared weights.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{targets, MultiTaskSample, Targets};
use crate::error::{Error, Result};
use crate::layers::{BackboneLayer, Network};
use crate::tasks::{task_loss, Direction, MetricKind, TaskSpec};
use crate::tensor::{Graph, Mode, Scalar, Tensor};

// ---------------------------------------------------------------- metrics

/// Mean intersection-over-union over the classes present in `label`.
pub fn miou(pred: &[usize], label: &[usize], classes: usize) -> Result<f64> {
    if pred.len() != label.len() {
        return Err(Error::shape(
            "miou",
            format!("{} predictions for {} labels", pred.len(), label.len()),
        ));
    }
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    let mut present = vec![false; classes];
    for (&p, &l) in pred.iter().zip(label) {
        if l >= classes || p >= classes {
            return Err(Error::invalid(format!(
                "class index out of range ({p} or {l} ≥ {classes})"
            )));
        }
        present[l] = true;
        if p == l {
            inter[l] += 1;
            union[l] += 1;
        } else {
            union[l] += 1;
            union[p] += 1;
        }
    }
    let ious: Vec<f64> = (0..classes)
        .filter(|&c| present[c])
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    if ious.is_empty() {
        return Err(Error::invalid("mIoU of an empty label set"));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Mean angle in degrees between predicted and target 2-vectors at the
/// masked positions. Both fields are `[n, 2, H, W]`; a zero prediction
/// counts as 90°.
pub fn mean_angular_error<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, mask: &[bool]) -> Result<f64> {
    if pred.shape() != target.shape() || pred.ndim() != 4 || pred.shape()[1] != 2 || mask.len() != pred.len() {
        return Err(Error::shape(
            "mean_err",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let (n, _, h, w) = pred.dims4("mean_err")?;
    let hw = h * w;
    let (p, t) = (pred.data(), target.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for b in 0..n {
        for i in 0..hw {
            let (ix, iy) = (b * 2 * hw + i, b * 2 * hw + hw + i);
            if !mask[ix] {
                continue;
            }
            let (px, py, tx, ty) = (p[ix].f64(), p[iy].f64(), t[ix].f64(), t[iy].f64());
            let (pn, tn) = (px.hypot(py), tx.hypot(ty));
            let angle = if pn == 0.0 || tn == 0.0 {
                90.0
            } else {
                ((px * tx + py * ty) / (pn * tn)).clamp(-1.0, 1.0).acos().to_degrees()
            };
            total += angle;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("mean angular error over an empty mask"));
    }
    Ok(total / count as f64)
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape(
            "rmse",
            format!("{} vs {} values", pred.len(), target.len()),
        ));
    }
    let se: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((se / pred.len() as f64).sqrt())
}

/// F1 of a binary map with zero-pixel tolerance. Two empty maps score 1.
pub fn f1_score(pred: &[bool], label: &[bool]) -> Result<f64> {
    if pred.len() != label.len() {
        return Err(Error::shape("f1", format!("{} vs {}", pred.len(), label.len())));
    }
    let tp = pred.iter().zip(label).filter(|(p, l)| **p && **l).count();
    let fp = pred.iter().zip(label).filter(|(p, l)| **p && !**l).count();
    let fn_ = pred.iter().zip(label).filter(|(p, l)| !**p && **l).count();
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

pub fn accuracy(pred: &[usize], label: &[usize]) -> Result<f64> {
    if pred.len() != label.len() || pred.is_empty() {
        return Err(Error::shape("accuracy", format!("{} vs {}", pred.len(), label.len())));
    }
    Ok(pred.iter().zip(label).filter(|(p, l)| p == l).count() as f64 / pred.len() as f64)
}

/// Channel argmax of `[n, c, h, w]`, first maximum wins.
pub fn argmax_channels<T: Scalar>(x: &Tensor<T>) -> Result<Vec<usize>> {
    let (n, c, h, w) = x.dims4("argmax")?;
    let hw = h * w;
    let d = x.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for i in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if d[(b * c + k) * hw + i] > d[(b * c + best) * hw + i] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Score raw head outputs of `spec`'s task against its targets. Binary maps
/// are thresholded at probability 0.5 (logit 0). Scores are fractions in
/// `[0, 1]` except the angular error (degrees) and RMSE (label units).
pub fn task_metric<T: Scalar>(spec: &TaskSpec, output: &Tensor<T>, target: &Targets<T>) -> Result<f64> {
    let binarize = |t: &Tensor<T>| t.data().iter().map(|&v| v >= T::zero()).collect::<Vec<bool>>();
    match (spec.metric, target) {
        (MetricKind::Miou, Targets::Classes(labels)) => miou(&argmax_channels(output)?, labels, spec.head.outputs()),
        (MetricKind::Miou, Targets::Binary(labels)) => {
            if output.shape() != labels.shape() {
                return Err(Error::shape(
                    "miou",
                    format!("{:?} vs {:?}", output.shape(), labels.shape()),
                ));
            }
            let p: Vec<usize> = binarize(output).into_iter().map(usize::from).collect();
            let l: Vec<usize> = labels.data().iter().map(|&v| usize::from(v > T::c(0.5))).collect();
            miou(&p, &l, 2)
        }
        (MetricKind::F1Edge, Targets::Binary(labels)) => {
            if output.shape() != labels.shape() {
                return Err(Error::shape(
                    "f1",
                    format!("{:?} vs {:?}", output.shape(), labels.shape()),
                ));
            }
            let l: Vec<bool> = labels.data().iter().map(|&v| v > T::c(0.5)).collect();
            f1_score(&binarize(output), &l)
        }
        (MetricKind::MeanErr, Targets::Regression { values, mask }) => {
            let all;
            let mask = match mask {
                Some(m) => m.as_slice(),
                None => {
                    all = vec![true; values.len()];
                    &all
                }
            };
            mean_angular_error(output, values, mask)
        }
        (MetricKind::Rmse, Targets::Regression { values, mask }) => {
            if output.shape() != values.shape() {
                return Err(Error::shape(
                    "rmse",
                    format!("{:?} vs {:?}", output.shape(), values.shape()),
                ));
            }
            let keep = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
            let p: Vec<f64> = (0..output.len())
                .filter(|&i| keep(i))
                .map(|i| output.data()[i].f64())
                .collect();
            let t: Vec<f64> = (0..output.len())
                .filter(|&i| keep(i))
                .map(|i| values.data()[i].f64())
                .collect();
            rmse(&p, &t)
        }
        (MetricKind::Accuracy, Targets::Classes(labels)) => accuracy(&argmax_channels(output)?, labels),
        (kind, _) => Err(Error::invalid(format!(
            "metric {kind:?} does not fit the labels of task `{}`",
            spec.id
        ))),
    }
}

// ---------------------------------------------------------------- drop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDrop {
    pub task: String,
    pub model: f64,
    pub baseline: f64,
    /// 1 when lower is better, else 0.
    pub l: i32,
    /// Relative drop in percent; positive means worse than the baseline.
    pub drop_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropReport {
    pub tasks: Vec<TaskDrop>,
    /// Mean of the per-task drops, in percent.
    pub delta_m: f64,
}

impl DropReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,model,baseline,l,drop_pct\n");
        for t in &self.tasks {
            let _ = writeln!(s, "{},{},{},{},{}", t.task, t.model, t.baseline, t.l, t.drop_pct);
        }
        let _ = writeln!(s, "delta_m,,,,{}", self.delta_m);
        s
    }
}

/// Average relative drop of `model` against `baseline`.
///
/// Per task the signed relative difference `(−1)^l·(M_m − M_b)/M_b` is
/// positive for an improvement; the reported drop is its negation, so a
/// model worse than its baselines has a positive `delta_m`.
pub fn delta_m(
    model: &BTreeMap<String, f64>,
    baseline: &BTreeMap<String, f64>,
    directions: &BTreeMap<String, Direction>,
) -> Result<DropReport> {
    if model.is_empty() {
        return Err(Error::invalid("no tasks to compare"));
    }
    if model.keys().ne(baseline.keys()) || model.keys().ne(directions.keys()) {
        return Err(Error::invalid(
            "model, baseline and direction maps must name the same tasks",
        ));
    }
    let mut tasks = Vec::with_capacity(model.len());
    for (task, &m) in model {
        let b = baseline[task];
        if b == 0.0 {
            return Err(Error::invalid(format!("baseline of `{task}` is zero")));
        }
        let l = directions[task].exponent();
        let sign = if l == 1 { -1.0 } else { 1.0 };
        let gain = sign * (m - b) / b;
        tasks.push(TaskDrop {
            task: task.clone(),
            model: m,
            baseline: b,
            l,
            drop_pct: if gain == 0.0 { 0.0 } else { -100.0 * gain },
        });
    }
    let delta_m = tasks.iter().map(|t| t.drop_pct).sum::<f64>() / tasks.len() as f64;
    Ok(DropReport { tasks, delta_m })
}

// ---------------------------------------------------------------- RSA

/// `m` flattened gradients of one layer's shared weights for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSampleSet {
    pub task: String,
    pub layer: String,
    /// `[m, d]`.
    pub samples: Tensor<f64>,
}

impl GradientSampleSet {
    pub fn new(task: impl Into<String>, layer: impl Into<String>, samples: Tensor<f64>) -> Result<Self> {
        let (m, _) = samples.dims2("gradient samples")?;
        if m < 2 {
            return Err(Error::invalid("need at least two gradient samples"));
        }
        if !samples.is_finite() {
            return Err(Error::NonFinite("gradient samples"));
        }
        Ok(Self {
            task: task.into(),
            layer: layer.into(),
            samples,
        })
    }
}

/// Gradients of `task`'s loss with respect to `layer`'s shared weights, one
/// row per minibatch. Batch norms run on batch statistics as in training,
/// but no statistic or parameter of `net` changes.
pub fn capture_task_gradients<T: Scalar>(
    net: &Network<T>,
    task: &str,
    layer: &str,
    batches: &[Vec<&MultiTaskSample>],
) -> Result<GradientSampleSet> {
    let entry = net.task(task)?;
    let idx = net.layer_index(layer)?;
    let l = &net.layers()[idx];
    if let BackboneLayer::Plain(b) = l {
        if !b.uses_shared_conv(task)? {
            return Err(Error::invalid(format!(
                "task `{task}` has no shared weights in layer `{layer}` (mode {})",
                entry.mode
            )));
        }
    }
    let weight = l.shared_weight().to_string();
    let id = net.store.id(&weight)?;
    let mut store = net.store.clone();
    let mut rows = Vec::new();
    for batch in batches {
        let x = crate::data::stack_images::<T>(batch)?;
        let tgt = targets::<T>(entry.spec.target, batch)?;
        let mut g = Graph::for_params([id]);
        let xv = g.input(x)?;
        let trace = net.forward(&mut g, task, xv, Mode::Train, false)?;
        let loss = task_loss(&mut g, &entry.spec, trace.output, &tgt)?;
        store.zero_grads();
        g.backward(loss, &mut store)?;
        let grad = store
            .grad(&weight)?
            .ok_or_else(|| Error::Graph(format!("no gradient reached `{weight}`")))?;
        rows.extend(grad.data().iter().map(|v| v.f64()));
    }
    let d = net.store.value(&weight)?.len();
    GradientSampleSet::new(task, layer, Tensor::new([batches.len(), d], rows)?)
}

/// Pearson correlation. Zero variance is an error.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::shape("pearson", format!("{} vs {} values", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("Pearson correlation of a constant vector".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Upper triangle (row-major, `a < b`) of `1 − Pearson(row_a, row_b)`.
pub fn rdm_upper(samples: &Tensor<f64>) -> Result<Vec<f64>> {
    let (m, _) = samples.dims2("rdm")?;
    let mut out = Vec::with_capacity(m * (m - 1) / 2);
    for a in 0..m {
        for b in a + 1..m {
            out.push(1.0 - pearson(samples.row(a), samples.row(b))?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RsaMatrix {
    pub tasks: Vec<String>,
    pub layer: String,
    /// Row-major `P×P`.
    pub values: Vec<f64>,
}

impl RsaMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.tasks.len() + j]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task");
        for t in &self.tasks {
            let _ = write!(s, ",{t}");
        }
        s.push('\n');
        for (i, t) in self.tasks.iter().enumerate() {
            s.push_str(t);
            for j in 0..self.tasks.len() {
                let _ = write!(s, ",{}", self.get(i, j));
            }
            s.push('\n');
        }
        s
    }
}

/// Spearman correlation between the RDMs of every pair of tasks.
pub fn rsa_correlation(sets: &[GradientSampleSet]) -> Result<RsaMatrix> {
    let first = sets.first().ok_or_else(|| Error::invalid("no gradient sets"))?;
    let shape = first.samples.shape().to_vec();
    for s in sets {
        if s.samples.shape() != shape.as_slice() {
            return Err(Error::shape(
                "rsa",
                format!(
                    "task `{}` has samples {:?}, expected {shape:?}",
                    s.task,
                    s.samples.shape()
                ),
            ));
        }
    }
    let rdms = sets
        .iter()
        .map(|s| rdm_upper(&s.samples).map_err(|e| Error::Degenerate(format!("RDM of `{}`: {e}", s.task))))
        .collect::<Result<Vec<_>>>()?;
    let p = sets.len();
    let mut values = vec![1.0; p * p];
    for i in 0..p {
        for j in i + 1..p {
            let r = spearman(&rdms[i], &rdms[j])
                .map_err(|e| Error::Degenerate(format!("`{}` vs `{}`: {e}", sets[i].task, sets[j].task)))?;
            values[i * p + j] = r;
            values[j * p + i] = r;
        }
    }
    Ok(RsaMatrix {
        tasks: sets.iter().map(|s| s.task.clone()).collect(),
        layer: first.layer.clone(),
        values,
    })
}
