#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcm_core::data::{generate_dataset, MultiTaskSample, SceneConfig};
use rcm_core::layers::{ModulatorInit, RcmConvLayer};
use rcm_core::reparam::{response_initialize, ProbeSet, RiOptions};
use rcm_core::tasks::{train_task, AdaptationMode, TaskSpec, TrainConfig};
use rcm_core::tensor::Var;
use rcm_core::{BackboneSpec, ConvSpec, Graph, Mode, Network, ParamStore, Result, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-1, 1]` pushed at least `gap` away from zero, so
/// kinks (ReLU, |x|) are never straddled by a finite-difference step.
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let x: f64 = rng.random_range(-1.0..1.0);
            x.signum() * (x.abs() + gap)
        })
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

pub type Build = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>>;

/// A scalar function of the parameters in `store`.
pub struct GradCase {
    pub op: &'static str,
    pub store: ParamStore<f64>,
    pub build: Build,
}

fn eval(case: &GradCase, store: &ParamStore<f64>) -> f64 {
    let mut g = Graph::new();
    let loss = (case.build)(&mut g, store).unwrap();
    g.value(loss).data()[0]
}

/// Largest relative error, per parameter tensor, between analytic and
/// central-difference gradients: `max|a − n| / max(max|a|, max|n|, 1e-6)`.
/// The floor keeps exactly-zero gradients from amplifying rounding noise.
pub fn grad_error(case: &GradCase, step: f64) -> f64 {
    let mut store = case.store.clone();
    let mut g = Graph::new();
    let loss = (case.build)(&mut g, &store).unwrap();
    g.backward(loss, &mut store).unwrap();
    let names: Vec<String> = store.sorted_names().into_iter().map(String::from).collect();
    let mut worst = 0.0f64;
    for name in names {
        let analytic = store
            .grad(&name)
            .unwrap()
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(&name).unwrap().shape().to_vec()));
        let base = store.value(&name).unwrap().clone();
        let mut probe = case.store.clone();
        let mut numeric = vec![0.0; base.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = base.clone();
            plus.data_mut()[i] += step;
            probe.set_value(&name, plus).unwrap();
            let fp = eval(case, &probe);
            let mut minus = base.clone();
            minus.data_mut()[i] -= step;
            probe.set_value(&name, minus).unwrap();
            let fm = eval(case, &probe);
            *slot = (fp - fm) / (2.0 * step);
        }
        probe.set_value(&name, base).unwrap();
        let scale = numeric
            .iter()
            .chain(analytic.data())
            .fold(1e-6f64, |m, v| m.max(v.abs()));
        let diff = analytic
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        worst = worst.max(diff / scale);
    }
    worst
}

fn store_of(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(n, t, true).unwrap();
    }
    s
}

/// `sum(y ⊙ r)` for a fixed random `r`, turning any output into a scalar with
/// a non-trivial upstream gradient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let r = Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed ^ 0xabcd));
    let r = g.input(r)?;
    let p = g.mul(y, r)?;
    g.sum(p)
}

/// One randomized instance of every differentiable operation.
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    let mut r = rng(seed);
    let mut cases = Vec::new();

    // conv2d with bias, random stride and padding
    let n = r.random_range(1..3);
    let c_in = r.random_range(1..4);
    let c_out = r.random_range(1..4);
    let k = [1, 2, 3][r.random_range(0..3)];
    let stride = r.random_range(1..3);
    let pad = r.random_range(0..k);
    let h = r.random_range(k.max(3)..6);
    let w = r.random_range(k.max(3)..6);
    cases.push(GradCase {
        op: "conv2d",
        store: store_of(vec![
            ("x", Tensor::uniform([n, c_in, h, w], -1.0, 1.0, &mut r)),
            ("w", Tensor::uniform([c_out, c_in, k, k], -1.0, 1.0, &mut r)),
            ("b", Tensor::uniform([c_out], -1.0, 1.0, &mut r)),
        ]),
        build: Box::new(move |g, s| {
            let (x, wt, b) = (g.param(s, "x")?, g.param(s, "w")?, g.param(s, "b")?);
            let y = g.conv2d(x, wt, Some(b), stride, pad)?;
            project(g, y, seed)
        }),
    });

    // batch norm on batch statistics
    let (n, c, h, w) = (
        r.random_range(1..3),
        r.random_range(1..4),
        r.random_range(2..4),
        r.random_range(2..4),
    );
    cases.push(GradCase {
        op: "batch_norm_train",
        store: store_of(vec![
            ("x", Tensor::uniform([n, c, h, w], -2.0, 2.0, &mut r)),
            ("gamma", Tensor::uniform([c], 0.5, 1.5, &mut r)),
            ("beta", Tensor::uniform([c], -1.0, 1.0, &mut r)),
        ]),
        build: Box::new(move |g, s| {
            let (x, ga, be) = (g.param(s, "x")?, g.param(s, "gamma")?, g.param(s, "beta")?);
            let (y, _) = g.batch_norm_train(x, ga, be, 1e-5)?;
            project(g, y, seed)
        }),
    });

    // batch norm on fixed statistics
    let (n, c, h, w) = (
        r.random_range(1..3),
        r.random_range(1..4),
        r.random_range(1..4),
        r.random_range(1..4),
    );
    let mean: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
    let var: Vec<f64> = (0..c).map(|_| r.random_range(0.2..2.0)).collect();
    cases.push(GradCase {
        op: "batch_norm_eval",
        store: store_of(vec![
            ("x", Tensor::uniform([n, c, h, w], -2.0, 2.0, &mut r)),
            ("gamma", Tensor::uniform([c], 0.5, 1.5, &mut r)),
            ("beta", Tensor::uniform([c], -1.0, 1.0, &mut r)),
        ]),
        build: Box::new(move |g, s| {
            let (x, ga, be) = (g.param(s, "x")?, g.param(s, "gamma")?, g.param(s, "beta")?);
            let y = g.batch_norm_eval(x, ga, be, &mean, &var, 1e-5)?;
            project(g, y, seed)
        }),
    });

    let shape = [
        r.random_range(1..3),
        r.random_range(1..4),
        r.random_range(1..4),
        r.random_range(1..4),
    ];
    cases.push(GradCase {
        op: "relu",
        store: store_of(vec![("x", away_from_zero(&shape, 1e-3, &mut r))]),
        build: Box::new(move |g, s| {
            let x = g.param(s, "x")?;
            let y = g.relu(x)?;
            project(g, y, seed)
        }),
    });

    let shape = [r.random_range(1..4), r.random_range(1..5)];
    cases.push(GradCase {
        op: "add",
        store: store_of(vec![
            ("a", Tensor::uniform(shape, -1.0, 1.0, &mut r)),
            ("b", Tensor::uniform(shape, -1.0, 1.0, &mut r)),
        ]),
        build: Box::new(move |g, s| {
            let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
            let y = g.add(a, b)?;
            project(g, y, seed)
        }),
    });

    cases.push(GradCase {
        op: "mul",
        store: store_of(vec![
            ("a", Tensor::uniform(shape, -1.0, 1.0, &mut r)),
            ("b", Tensor::uniform(shape, -1.0, 1.0, &mut r)),
        ]),
        build: Box::new(move |g, s| {
            let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
            let y = g.mul(a, b)?;
            project(g, y, seed)
        }),
    });

    cases.push(GradCase {
        op: "mul_broadcast",
        store: store_of(vec![
            ("a", Tensor::uniform([shape[0], shape[1] + 1], -1.0, 1.0, &mut r)),
            ("s", Tensor::uniform([1], -1.0, 1.0, &mut r)),
        ]),
        build: Box::new(move |g, s| {
            let (a, b) = (g.param(s, "a")?, g.param(s, "s")?);
            let y = g.mul(a, b)?;
            project(g, y, seed)
        }),
    });

    let factor: f64 = r.random_range(-3.0..3.0);
    cases.push(GradCase {
        op: "scale",
        store: store_of(vec![("x", Tensor::uniform(shape, -1.0, 1.0, &mut r))]),
        build: Box::new(move |g, s| {
            let x = g.param(s, "x")?;
            let y = g.scale(x, factor)?;
            project(g, y, seed)
        }),
    });

    cases.push(GradCase {
        op: "sum",
        store: store_of(vec![("x", Tensor::uniform(shape, -1.0, 1.0, &mut r))]),
        build: Box::new(|g, s| {
            let x = g.param(s, "x")?;
            let sq = g.mul(x, x)?;
            g.sum(sq)
        }),
    });

    cases.push(GradCase {
        op: "mean",
        store: store_of(vec![("x", Tensor::uniform(shape, -1.0, 1.0, &mut r))]),
        build: Box::new(|g, s| {
            let x = g.param(s, "x")?;
            let sq = g.mul(x, x)?;
            g.mean(sq)
        }),
    });

    cases.push(GradCase {
        op: "reshape",
        store: store_of(vec![("x", Tensor::uniform([shape[0], shape[1]], -1.0, 1.0, &mut r))]),
        build: Box::new(move |g, s| {
            let x = g.param(s, "x")?;
            let y = g.reshape(x, &[shape[0] * shape[1], 1, 1, 1])?;
            project(g, y, seed)
        }),
    });

    let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
    cases.push(GradCase {
        op: "matmul",
        store: store_of(vec![
            ("a", Tensor::uniform([m, k], -1.0, 1.0, &mut r)),
            ("b", Tensor::uniform([k, n], -1.0, 1.0, &mut r)),
        ]),
        build: Box::new(move |g, s| {
            let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
            let y = g.matmul(a, b)?;
            project(g, y, seed)
        }),
    });

    let (rows, cols) = (r.random_range(1..5), r.random_range(1..5));
    cases.push(GradCase {
        op: "weight_norm",
        store: store_of(vec![
            ("v", away_from_zero(&[rows, cols], 0.1, &mut r)),
            ("g", Tensor::uniform([rows], -2.0, 2.0, &mut r)),
        ]),
        build: Box::new(move |g, s| {
            let (v, gg) = (g.param(s, "v")?, g.param(s, "g")?);
            let y = g.weight_norm(v, gg)?;
            project(g, y, seed)
        }),
    });

    let shape4 = [
        r.random_range(1..3),
        r.random_range(1..4),
        r.random_range(1..4),
        r.random_range(1..4),
    ];
    cases.push(GradCase {
        op: "global_avg_pool",
        store: store_of(vec![("x", Tensor::uniform(shape4, -1.0, 1.0, &mut r))]),
        build: Box::new(move |g, s| {
            let x = g.param(s, "x")?;
            let y = g.global_avg_pool(x)?;
            project(g, y, seed)
        }),
    });

    let factor = r.random_range(1..4);
    cases.push(GradCase {
        op: "upsample_nearest",
        store: store_of(vec![("x", Tensor::uniform(shape4, -1.0, 1.0, &mut r))]),
        build: Box::new(move |g, s| {
            let x = g.param(s, "x")?;
            let y = g.upsample_nearest(x, factor)?;
            project(g, y, seed)
        }),
    });

    let n_el: usize = shape4.iter().product();
    let labels: Vec<f64> = (0..n_el).map(|_| if r.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
    let target = Tensor::new(shape4.to_vec(), labels).unwrap();
    let mut mask: Vec<bool> = (0..n_el).map(|_| r.random_bool(0.7)).collect();
    mask[0] = true;
    let (pw, nw) = (r.random_range(0.1..1.0), r.random_range(0.1..1.0));
    let masked = r.random_bool(0.5);
    cases.push(GradCase {
        op: "bce_with_logits",
        store: store_of(vec![("z", Tensor::uniform(shape4, -3.0, 3.0, &mut r))]),
        build: Box::new(move |g, s| {
            let z = g.param(s, "z")?;
            g.bce_with_logits(z, &target, pw, nw, masked.then(|| mask.clone()))
        }),
    });

    let (n, c, h, w) = (
        r.random_range(1..3),
        r.random_range(2..5),
        r.random_range(1..4),
        r.random_range(1..4),
    );
    let labels: Vec<usize> = (0..n * h * w).map(|_| r.random_range(0..c)).collect();
    cases.push(GradCase {
        op: "cross_entropy",
        store: store_of(vec![("z", Tensor::uniform([n, c, h, w], -3.0, 3.0, &mut r))]),
        build: Box::new(move |g, s| {
            let z = g.param(s, "z")?;
            g.cross_entropy(z, &labels)
        }),
    });

    let target = Tensor::uniform(shape4, -1.0, 1.0, &mut r);
    let offset = away_from_zero(&shape4, 1e-3, &mut r);
    let pred = target.add(&offset).unwrap();
    let mut mask: Vec<bool> = (0..n_el).map(|_| r.random_bool(0.7)).collect();
    mask[0] = true;
    let masked = r.random_bool(0.5);
    cases.push(GradCase {
        op: "l1",
        store: store_of(vec![("p", pred)]),
        build: Box::new(move |g, s| {
            let p = g.param(s, "p")?;
            g.l1(p, &target, masked.then(|| mask.clone()))
        }),
    });

    cases
}

/// Direct six-loop convolution.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * c_out * oh * ow];
    for bi in 0..n {
        for o in 0..c_out {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((bi * c_in + c) * h + iy as usize) * wd + ix as usize;
                                let wi = ((o * c_in + c) * k + ky) * k + kx;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out[((bi * c_out + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new([n, c_out, oh, ow], out).unwrap()
}

// ---------------------------------------------------------------- networks

pub fn scenes(count: usize, size: usize, seed: u64) -> Vec<MultiTaskSample> {
    generate_dataset(
        &SceneConfig {
            size,
            seed,
            ..SceneConfig::default()
        },
        count,
    )
    .unwrap()
}

/// Small plain network decomposed into filter-bank form with no tasks.
pub fn tiny_rcm_net(seed: u64, data: &[MultiTaskSample]) -> Network<f32> {
    let mut arch = BackboneSpec::simple(3, &[8, 8]);
    arch.layers[1].stride = 2;
    let plain = Network::<f32>::new(arch, seed).unwrap();
    let probe = ProbeSet::new(data.iter().map(|s| s.image.clone()).collect(), seed);
    response_initialize(&plain, &probe, &RiOptions::default()).unwrap().0
}

#[derive(Clone, Copy, Debug)]
pub enum Op {
    Register(usize),
    Train(usize),
    Eval(usize),
}

/// Run a random register/train/eval sequence over three RCM tasks and check,
/// after every operation, that each task's eval outputs are bit-identical to
/// those seen since the last operation naming it. Returns the number of
/// comparisons made.
pub fn isolation_sequence(seed: u64, len: usize) -> std::result::Result<usize, String> {
    let mut r = rng(seed);
    let data = scenes(8, 16, seed);
    let probe_x = rcm_core::data::stack_images::<f32>(&data.iter().collect::<Vec<_>>()).unwrap();
    let mut net = tiny_rcm_net(seed, &data);
    let specs = [TaskSpec::edge(), TaskSpec::saliency(), TaskSpec::semseg()];
    let mut registered = [false; 3];
    let mut reference: [Option<Tensor<f32>>; 3] = [None, None, None];
    let mut comparisons = 0;
    for step in 0..len {
        let t = r.random_range(0..3);
        let op = match r.random_range(0..3) {
            _ if !registered[t] => Op::Register(t),
            0 => Op::Train(t),
            1 => Op::Eval(t),
            _ => Op::Train(t),
        };
        match op {
            Op::Register(t) => {
                net.register_task(specs[t].clone(), AdaptationMode::RCM, &ModulatorInit::Basis)
                    .map_err(|e| e.to_string())?;
                registered[t] = true;
                reference[t] = None;
            }
            Op::Train(t) => {
                let cfg = TrainConfig {
                    epochs: 1,
                    batch_size: 4,
                    base_lr: 0.01,
                    seed: seed + step as u64,
                    ..TrainConfig::default()
                };
                train_task(&mut net, &specs[t].id, &data, &cfg).map_err(|e| e.to_string())?;
                reference[t] = None;
            }
            Op::Eval(_) => {}
        }
        for i in 0..3 {
            if !registered[i] {
                continue;
            }
            let y = net.predict(&specs[i].id, &probe_x).map_err(|e| e.to_string())?;
            match &reference[i] {
                None => reference[i] = Some(y),
                Some(prev) => {
                    comparisons += 1;
                    if !prev.bit_eq(&y) {
                        return Err(format!(
                            "seed {seed} step {step} ({op:?}): task {} changed",
                            specs[i].id
                        ));
                    }
                }
            }
        }
    }
    Ok(comparisons)
}

// ---------------------------------------------------------------- counts

/// Closed forms per layer: weights `k²·c_in·c_out`, bias `c_out`, BN `2·c_out`.
pub fn hand_count(arch: &BackboneSpec, p: usize, mode: AdaptationMode) -> (usize, usize) {
    let (mut shared, mut per_task) = (0, 0);
    for l in &arch.layers {
        let w = l.kernel * l.kernel * l.c_in * l.c_out;
        let b = if l.bias { l.c_out } else { 0 };
        let bn = if l.batch_norm { 2 * l.c_out } else { 0 };
        let (s, t) = match mode {
            AdaptationMode::FreezeEncoder => (w + b + bn, 0),
            AdaptationMode::TaskSpecificBN => (w + b, bn),
            AdaptationMode::TaskSpecificConv => (bn, w + b),
            AdaptationMode::SingleTask => (0, w + b + bn),
            AdaptationMode::RCM => (w, l.c_out * l.c_out + l.c_out + bn),
            AdaptationMode::SeriesRA => (w + b, l.c_out * l.c_out + bn),
            AdaptationMode::ParallelRA => (w + b, l.c_out * l.c_in + bn),
        };
        shared += s;
        per_task += t;
    }
    (shared, shared + p * per_task)
}

/// A single wide layer, a strided stack, and a mix of kernels, biases and
/// missing batch norms.
pub fn architectures() -> Vec<BackboneSpec> {
    let mut strided = BackboneSpec::simple(3, &[16, 32, 32, 64]);
    strided.layers[1].stride = 2;
    strided.layers[3].stride = 2;
    let mut mixed = BackboneSpec {
        in_channels: 3,
        layers: vec![
            ConvSpec::new(3, 8, 5).with_bias(true),
            ConvSpec::new(8, 8, 1),
            ConvSpec::new(8, 12, 3),
        ],
    };
    mixed.layers[1].batch_norm = false;
    vec![
        BackboneSpec {
            in_channels: 64,
            layers: vec![ConvSpec::new(64, 64, 3)],
        },
        strided,
        mixed,
    ]
}

// ---------------------------------------------------------------- NFF

/// Random NFF layer with a given modulator direction and random scales.
/// Returns the forward deviation between the `(v, g)` and folded forms and the
/// worst `| ‖row_i‖ − |g_i| |`.
pub fn nff_fold_errors(seed: u64, c_in: usize, c_out: usize) -> (f64, f64) {
    let mut r = rng(seed);
    let mut store = ParamStore::<f32>::new();
    let mut layer = RcmConvLayer::register(
        &mut store,
        "l".into(),
        ConvSpec::new(c_in, c_out, 3),
        true,
        Tensor::uniform([c_out, c_in, 3, 3], -1.0, 1.0, &mut r),
        Tensor::uniform([c_out, c_out], -1.0, 1.0, &mut r),
        Tensor::uniform([c_out], -0.5, 0.5, &mut r),
    )
    .unwrap();
    let v = away_from_zero(&[c_out, c_out], 0.05, &mut r);
    layer
        .add_task_modulator(&mut store, "a", &ModulatorInit::Given(v))
        .unwrap();
    let g: Vec<f64> = (0..c_out).map(|_| r.random_range(-2.0..2.0)).collect();
    store
        .set_value("l.task.a.mod.g", Tensor::from_f64([c_out], &g).unwrap())
        .unwrap();
    let x = Tensor::<f32>::uniform([1, c_in, 5, 5], -1.0, 1.0, &mut r);
    let run = |layer: &RcmConvLayer, store: &ParamStore<f32>| {
        let mut graph = Graph::new();
        let xv = graph.input(x.clone()).unwrap();
        let out = layer.forward(&mut graph, store, xv, Some("a"), Mode::Eval).unwrap();
        graph.value(out.pre_bn).clone()
    };
    let before = run(&layer, &store);
    let w = layer.fold_nff(&mut store, "a").unwrap();
    let after = run(&layer, &store);
    let norm_err = g
        .iter()
        .enumerate()
        .map(|(i, gi)| (w.row(i).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt() - gi.abs()).abs())
        .fold(0.0, f64::max);
    (before.max_abs_diff(&after).unwrap() as f64, norm_err)
}
