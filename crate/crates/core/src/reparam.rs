//! Response initialization of a plain backbone into filter-bank form,
//! conversion of a directly pretrained factored backbone, NFF folding and
//! layer-wise equivalence checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BackboneLayer, ConvBlock, Form, Layout, ModulatorInit, Network, RcmConvLayer};
use crate::linalg::{center_responses, covariance, sym_eig, ResponseMatrix};
use crate::tasks::AdaptationMode;
use crate::tensor::{BatchNorm, Graph, Mode, ParamStore, Scalar, Tensor};

/// Minimum number of response samples per layer.
pub const MIN_RESPONSES: usize = 4096;
/// Response samples per output channel.
pub const RESPONSES_PER_CHANNEL: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Locations {
    /// Enough positions per image for `max(16·c_out, 4096)` samples.
    Auto,
    /// This many uniformly drawn positions per image.
    PerSample(usize),
    /// Every spatial position of every image, in order.
    All,
}

/// Images whose responses define the decomposition.
#[derive(Clone, Debug)]
pub struct ProbeSet<T> {
    /// `[c, h, w]` each.
    pub images: Vec<Tensor<T>>,
    pub locations: Locations,
    pub seed: u64,
}

impl<T: Scalar> ProbeSet<T> {
    pub fn new(images: Vec<Tensor<T>>, seed: u64) -> Self {
        Self {
            images,
            locations: Locations::Auto,
            seed,
        }
    }
}

const PROBE_BATCH: usize = 16;

/// Pre-normalization responses of layer `layer` on the shared path, one
/// column per sampled location, mean-centered.
pub fn collect_responses<T: Scalar>(net: &Network<T>, layer: &str, probe: &ProbeSet<T>) -> Result<ResponseMatrix<T>> {
    let idx = net.layer_index(layer)?;
    let c_out = match &net.layers()[idx] {
        BackboneLayer::Plain(b) => b.spec.c_out,
        BackboneLayer::Rcm(r) => r.spec.c_out,
    };
    if probe.images.is_empty() {
        return Err(Error::invalid("probe set has no images"));
    }
    let dims = probe.images[0].shape().to_vec();
    if dims.len() != 3 || probe.images.iter().any(|i| i.shape() != dims.as_slice()) {
        return Err(Error::shape("probe", "images must share one [c, h, w] shape"));
    }
    let count = probe.images.len();
    let target = (RESPONSES_PER_CHANNEL * c_out).max(MIN_RESPONSES);
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let mut columns: Vec<Vec<T>> = vec![Vec::new(); c_out];
    for chunk in probe.images.chunks(PROBE_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * chunk[0].len());
        for img in chunk {
            data.extend_from_slice(img.data());
        }
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(&dims);
        let mut g = Graph::for_params([]);
        let x = g.input(Tensor::new(shape, data)?)?;
        let (trace, _) = net.backbone(&mut g, None, x, Mode::Eval, false)?;
        let y = g.value(trace[idx].pre_bn);
        let (_, c, h, w) = y.dims4("responses")?;
        let hw = h * w;
        let per = match probe.locations {
            Locations::Auto => target.div_ceil(count),
            Locations::PerSample(k) => k,
            Locations::All => hw,
        };
        for b in 0..chunk.len() {
            for k in 0..per {
                let pos = match probe.locations {
                    Locations::All => k,
                    _ => rng.random_range(0..hw),
                };
                for (ch, col) in columns.iter_mut().enumerate() {
                    col.push(y.data()[(b * c + ch) * hw + pos]);
                }
            }
        }
    }
    let n = columns[0].len();
    if n < c_out {
        return Err(Error::invalid(format!("{n} response samples for {c_out} channels")));
    }
    let flat: Vec<T> = columns.into_iter().flatten().collect();
    center_responses(&Tensor::new([c_out, n], flat)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiOptions {
    /// Number of leading eigenvectors kept; `None` keeps all.
    pub rank: Option<usize>,
    pub nff: bool,
}

impl Default for RiOptions {
    fn default() -> Self {
        Self { rank: None, nff: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDecomposition {
    pub layer: String,
    pub rank: usize,
    /// Eigenvalues of the response covariance, descending.
    pub eigenvalues: Vec<f64>,
    /// `max|ȳ − U·Uᵀ·ȳ|`, folded into the running mean.
    pub bias_shift: f64,
    /// `max|U·Uᵀ·W − W| / max|W|`.
    pub reconstruction: f64,
}

fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.matmul(b)
}

fn copy_bn<T: Scalar>(
    src_store: &ParamStore<T>,
    src: &BatchNorm,
    dst_store: &mut ParamStore<T>,
    dst: &BatchNorm,
    shift: Option<&[T]>,
) -> Result<()> {
    for (a, b) in [
        (src.gamma(), dst.gamma()),
        (src.beta(), dst.beta()),
        (src.running_var(), dst.running_var()),
    ] {
        dst_store.set_value(&b, src_store.value(&a)?.clone())?;
    }
    let mut rm = src_store.value(&src.running_mean())?.clone();
    if let Some(shift) = shift {
        for (r, &s) in rm.data_mut().iter_mut().zip(shift) {
            *r -= s;
        }
    }
    dst_store.set_value(&dst.running_mean(), rm)
}

fn carried_mode(mode: AdaptationMode, task: &str) -> Result<AdaptationMode> {
    match mode {
        AdaptationMode::FreezeEncoder | AdaptationMode::TaskSpecificBN => Ok(mode),
        other => Err(Error::invalid(format!(
            "task `{task}` uses mode `{other}`, which has no counterpart on a filter bank"
        ))),
    }
}

/// Copy heads and carried task state of `src` into the freshly built
/// reparameterized `layers`/`store`.
fn carry_tasks<T: Scalar>(
    src: &Network<T>,
    layers: &mut [RcmConvLayer],
    store: &mut ParamStore<T>,
    bn_sources: &[Vec<(String, BatchNorm)>],
    shifts: &[Option<Vec<T>>],
) -> Result<()> {
    for entry in src.tasks() {
        let id = &entry.spec.id;
        let mode = carried_mode(entry.mode, id)?;
        for (i, layer) in layers.iter_mut().enumerate() {
            layer.add_task(store, id, mode, &ModulatorInit::Basis)?;
            if let (Some(dst), Some((_, src_bn))) =
                (layer.tasks[id].bn.clone(), bn_sources[i].iter().find(|(t, _)| t == id))
            {
                copy_bn(&src.store, src_bn, store, &dst, shifts[i].as_deref())?;
            }
        }
        for n in entry.head.names() {
            store.insert(&n, src.store.value(&n)?.clone(), true)?;
        }
    }
    Ok(())
}

fn plain_blocks<T: Scalar>(net: &Network<T>) -> Result<Vec<&ConvBlock>> {
    if net.form() != Form::Plain {
        return Err(Error::invalid("expected a plain backbone"));
    }
    net.layers()
        .iter()
        .map(|l| match l {
            BackboneLayer::Plain(b) => Ok(b),
            BackboneLayer::Rcm(_) => Err(Error::invalid("expected a plain backbone")),
        })
        .collect()
}

fn task_bns(block: &ConvBlock) -> Vec<(String, BatchNorm)> {
    block
        .tasks
        .iter()
        .filter_map(|(t, s)| s.bn.clone().map(|bn| (t.clone(), bn)))
        .collect()
}

/// Decompose every layer of a pretrained plain network.
///
/// Per layer, with `U` the leading eigenvectors of the response covariance
/// and `W` the flattened weight: the bank is `Uᵀ·W`, the template modulator
/// is `U`, the template bias is `U·Uᵀ·b`, and `ȳ − U·Uᵀ·ȳ` is subtracted
/// from the running means of the following batch norms. Every layer is
/// decomposed from the responses of the original network. Tasks in freeze
/// or task-specific-BN mode are carried over; new RCM tasks start from `U`.
pub fn response_initialize<T: Scalar>(
    net: &Network<T>,
    probe: &ProbeSet<T>,
    options: &RiOptions,
) -> Result<(Network<T>, Vec<LayerDecomposition>)> {
    let blocks = plain_blocks(net)?;
    let mut store = ParamStore::new();
    let mut layers = Vec::with_capacity(blocks.len());
    let mut report = Vec::with_capacity(blocks.len());
    let mut shifts = Vec::with_capacity(blocks.len());
    for b in &blocks {
        let spec = b.spec;
        let c_out = spec.c_out;
        let r = options.rank.unwrap_or(c_out);
        if r == 0 || r > c_out {
            return Err(Error::invalid(format!("rank {r} outside 1..={c_out}")));
        }
        let resp = collect_responses(net, &b.name, probe)?;
        let eig = sym_eig(&covariance(&resp)?)?;
        let u_full = eig.vectors;
        let mut u = Vec::with_capacity(c_out * r);
        for i in 0..c_out {
            u.extend_from_slice(&u_full.data()[i * c_out..i * c_out + r]);
        }
        let u = Tensor::new([c_out, r], u)?;
        let ut = u.transpose2()?;
        let uut = matmul(&u, &ut)?;

        let w = net.store.value(&b.shared.weight)?.reshape([c_out, spec.fan_in()])?;
        let bank = matmul(&ut, &w)?;
        let recon = matmul(&u, &bank)?;
        let w_max = w.max_abs().f64().max(f64::MIN_POSITIVE);
        let reconstruction = recon.max_abs_diff(&w)?.f64() / w_max;

        let b_m = match &b.shared.bias {
            Some(n) => net.store.value(n)?.clone(),
            None => Tensor::zeros([c_out]),
        };
        let bias = matmul(&uut, &b_m.reshape([c_out, 1])?)?.into_reshape([c_out])?;
        let ybar = resp.mean.reshape([c_out, 1])?;
        let shift = ybar.sub(&matmul(&uut, &ybar)?)?.into_reshape([c_out])?;
        let bias_shift = shift.max_abs().f64();
        let scale = resp.mean.max_abs().f64().max(1.0);
        if b.shared_bn.is_none() && bias_shift > 1e-6 * scale {
            return Err(Error::invalid(format!(
                "layer {}: rank-{r} projection leaves a bias of {bias_shift:e} but no batch norm follows",
                b.name
            )));
        }

        let layer = RcmConvLayer::register(
            &mut store,
            b.name.clone(),
            spec,
            options.nff,
            bank.into_reshape([r, spec.c_in, spec.kernel, spec.kernel])?,
            u,
            bias,
        )?;
        if let (Some(src), Some(dst)) = (&b.shared_bn, &layer.bn) {
            copy_bn(&net.store, src, &mut store, dst, Some(shift.data()))?;
        }
        report.push(LayerDecomposition {
            layer: b.name.clone(),
            rank: r,
            eigenvalues: eig.values.data().iter().map(|v| v.f64()).collect(),
            bias_shift,
            reconstruction,
        });
        shifts.push(Some(shift.into_data()));
        layers.push(layer);
    }
    let bn_sources: Vec<_> = blocks.iter().map(|b| task_bns(b)).collect();
    carry_tasks(net, &mut layers, &mut store, &bn_sources, &shifts)?;
    Ok((build(net, options.nff, layers, store)?, report))
}

fn build<T: Scalar>(
    src: &Network<T>,
    nff: bool,
    layers: Vec<RcmConvLayer>,
    store: ParamStore<T>,
) -> Result<Network<T>> {
    let layout = Layout {
        arch: src.layout.arch.clone(),
        form: Form::Reparameterized,
        nff,
        seed: src.layout.seed,
        layers: layers.into_iter().map(BackboneLayer::Rcm).collect(),
        tasks: src.tasks().to_vec(),
    };
    let mut net = Network::from_parts(layout, store);
    net.apply_param_roles()?;
    Ok(net)
}

/// Turn a network pretrained on [`BackboneSpec::factored`] into filter-bank
/// form: each k×k layer becomes a bank and the 1×1 layer after it becomes
/// the template modulator, bias and batch norm. `arch` is the unfactored
/// architecture.
///
/// [`BackboneSpec::factored`]: crate::layers::BackboneSpec::factored
pub fn from_factored<T: Scalar>(net: &Network<T>, arch: &crate::layers::BackboneSpec, nff: bool) -> Result<Network<T>> {
    let blocks = plain_blocks(net)?;
    if net.layout.arch != arch.factored() {
        return Err(Error::invalid(
            "network is not the factored form of the given architecture",
        ));
    }
    let mut store = ParamStore::new();
    let mut layers = Vec::with_capacity(arch.layers.len());
    let mut bn_sources = Vec::new();
    for (i, spec) in arch.layers.iter().enumerate() {
        let (kxk, pw) = (blocks[2 * i], blocks[2 * i + 1]);
        let bank = net.store.value(&kxk.shared.weight)?.clone();
        let basis = net.store.value(&pw.shared.weight)?.reshape([spec.c_out, spec.c_out])?;
        let bias = match &pw.shared.bias {
            Some(n) => net.store.value(n)?.clone(),
            None => Tensor::zeros([spec.c_out]),
        };
        let layer = RcmConvLayer::register(&mut store, format!("layer{i}"), *spec, nff, bank, basis, bias)?;
        if let (Some(src), Some(dst)) = (&pw.shared_bn, &layer.bn) {
            copy_bn(&net.store, src, &mut store, dst, None)?;
        }
        bn_sources.push(task_bns(pw));
        layers.push(layer);
    }
    let shifts = vec![None; layers.len()];
    carry_tasks(net, &mut layers, &mut store, &bn_sources, &shifts)?;
    let mut out = build(net, nff, layers, store)?;
    out.layout.arch = arch.clone();
    Ok(out)
}

/// Fold every `(v, g)` modulator of `task` into a plain weight. Returns the
/// folded `[c_out, rank]` matrices per layer; folding again returns the
/// same matrices.
pub fn fold_nff<T: Scalar>(net: &mut Network<T>, task: &str) -> Result<Vec<Tensor<T>>> {
    net.task(task)?;
    let mut out = Vec::new();
    let mut layers = std::mem::take(&mut net.layout.layers);
    let mut result = Ok(());
    for l in &mut layers {
        if let BackboneLayer::Rcm(r) = l {
            match r.fold_nff(&mut net.store, task) {
                Ok(w) => out.push(w),
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
        }
    }
    net.layout.layers = layers;
    result?;
    if out.is_empty() {
        return Err(Error::invalid("network has no reparameterized layers"));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    /// Max absolute deviation per layer output, then the head output.
    pub layers: Vec<(String, f64)>,
    pub global_max: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Compare two networks layer by layer on `inputs` in eval mode.
pub fn verify_equivalence<T: Scalar>(
    a: &Network<T>,
    b: &Network<T>,
    task: &str,
    inputs: &[Tensor<T>],
    tol: f64,
) -> Result<EquivalenceReport> {
    if a.layers().len() != b.layers().len() {
        return Err(Error::shape(
            "verify",
            format!("{} layers vs {}", a.layers().len(), b.layers().len()),
        ));
    }
    let mut names: Vec<String> = a.layers().iter().map(|l| l.name().to_string()).collect();
    names.push("output".into());
    let mut max = vec![0.0f64; names.len()];
    for x in inputs {
        let ya = a.layer_outputs(task, x)?;
        let yb = b.layer_outputs(task, x)?;
        for (i, (p, q)) in ya.iter().zip(&yb).enumerate() {
            if p.shape() != q.shape() {
                return Err(Error::shape(
                    "verify",
                    format!("{}: {:?} vs {:?}", names[i], p.shape(), q.shape()),
                ));
            }
            max[i] = max[i].max(p.max_abs_diff(q)?.f64());
        }
    }
    let global_max = max.iter().copied().fold(0.0, f64::max);
    Ok(EquivalenceReport {
        layers: names.into_iter().zip(max).collect(),
        global_max,
        tol,
        pass: global_max < tol,
    })
}
