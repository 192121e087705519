mod common;

use common::rng;
use rcm_core::layers::{BackboneLayer, ModulatorInit};
use rcm_core::linalg::{covariance, sym_eig};
use rcm_core::reparam::{
    collect_responses, from_factored, response_initialize, verify_equivalence, Locations, ProbeSet, RiOptions,
};
use rcm_core::tasks::{AdaptationMode, TaskSpec};
use rcm_core::{BackboneSpec, ConvSpec, Graph, Mode, Network, Scalar, Tensor};

fn probe<T: Scalar>(n: usize, size: usize, seed: u64) -> ProbeSet<T> {
    let mut r = rng(seed);
    ProbeSet {
        images: (0..n).map(|_| Tensor::randn([3, size, size], 1.0, &mut r)).collect(),
        locations: Locations::All,
        seed,
    }
}

fn inputs<T: Scalar>(count: usize, size: usize, seed: u64) -> Vec<Tensor<T>> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| Tensor::randn([1, 3, size, size], 1.0, &mut r))
        .collect()
}

fn with_task<T: Scalar>(arch: BackboneSpec, seed: u64) -> Network<T> {
    let mut net = Network::new(arch, seed).unwrap();
    net.register_task(
        TaskSpec::saliency(),
        AdaptationMode::FreezeEncoder,
        &ModulatorInit::Identity,
    )
    .unwrap();
    net
}

fn pre_bn<T: Scalar>(net: &Network<T>, layer: usize, x: &Tensor<T>) -> Tensor<T> {
    let mut g = Graph::for_params([]);
    let xv = g.input(x.clone()).unwrap();
    let (trace, _) = net.backbone(&mut g, None, xv, Mode::Eval, false).unwrap();
    g.value(trace[layer].pre_bn).clone()
}

#[test]
fn small_backbone_decomposition_is_exact_in_f32() {
    let src = with_task::<f32>(BackboneSpec::simple(3, &[8, 8]), 1);
    let (ri, report) = response_initialize(&src, &probe(8, 8, 2), &RiOptions::default()).unwrap();
    assert!(report.iter().all(|d| d.rank == 8 && d.bias_shift < 1e-4));
    let rep = verify_equivalence(&src, &ri, "saliency", &inputs(20, 8, 3), 1e-4).unwrap();
    assert!(rep.pass, "{rep:?}");
    let worst = rep.layers.iter().map(|l| l.1).fold(0.0, f64::max);
    assert_eq!(worst, rep.global_max);
}

#[test]
fn truncated_rank_matches_projection_oracle() {
    let src = with_task::<f64>(BackboneSpec::simple(3, &[8, 6]), 4);
    let p = probe::<f64>(6, 8, 5);
    let rank = 4;
    let opts = RiOptions {
        rank: Some(rank),
        nff: true,
    };
    let (ri, report) = response_initialize(&src, &p, &opts).unwrap();
    assert_eq!(report[0].rank, rank);

    // Oracle: top-`rank` eigenvectors of the same responses, then P = U·Uᵀ.
    let resp = collect_responses(&src, "layer0", &p).unwrap();
    let eig = sym_eig(&covariance(&resp).unwrap()).unwrap();
    let c = 8;
    let mut u = Vec::new();
    for i in 0..c {
        u.extend_from_slice(&eig.vectors.data()[i * c..i * c + rank]);
    }
    let u = Tensor::new([c, rank], u).unwrap();
    let proj = u.matmul(&u.transpose2().unwrap()).unwrap();

    for x in inputs::<f64>(5, 8, 6) {
        let y = pre_bn(&src, 0, &x);
        let got = pre_bn(&ri, 0, &x);
        let hw = 64;
        let cols = y.reshape([c, hw]).unwrap();
        let want = proj.matmul(&cols).unwrap().into_reshape([1, c, 8, 8]).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-4);
        let oracle_dev = y.max_abs_diff(&want).unwrap();
        let dev = y.max_abs_diff(&got).unwrap();
        assert!((dev - oracle_dev).abs() < 1e-4, "{dev} vs {oracle_dev}");
        assert!(oracle_dev > 1e-3, "truncation should lose something");
    }

    // The running mean absorbs ȳ − P·ȳ.
    let ybar = resp.mean.reshape([c, 1]).unwrap();
    let shift = ybar.sub(&proj.matmul(&ybar).unwrap()).unwrap();
    let BackboneLayer::Rcm(layer) = &ri.layers()[0] else {
        panic!()
    };
    let bn = layer.bn.as_ref().unwrap();
    let before = src.store.value("layer0.shared.bn.running_mean").unwrap();
    let after = ri.store.value(&bn.running_mean()).unwrap();
    for i in 0..c {
        assert!((before.data()[i] - shift.data()[i] - after.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn decomposition_is_layer_local() {
    let a = with_task::<f64>(BackboneSpec::simple(3, &[6, 6]), 7);
    let mut b = a.clone();
    let w = Tensor::randn([6, 6, 3, 3], 0.3, &mut rng(8));
    b.store.set_value("layer1.shared.weight", w).unwrap();
    let p = probe(4, 6, 9);
    let (ra, _) = response_initialize(&a, &p, &RiOptions::default()).unwrap();
    let (rb, _) = response_initialize(&b, &p, &RiOptions::default()).unwrap();
    let layer0 = |n: &Network<f64>| -> Vec<Tensor<f64>> {
        n.store
            .sorted_names()
            .into_iter()
            .filter(|k| k.starts_with("layer0."))
            .map(|k| n.store.value(k).unwrap().clone())
            .collect()
    };
    let (la, lb) = (layer0(&ra), layer0(&rb));
    assert!(!la.is_empty());
    assert!(la.iter().zip(&lb).all(|(x, y)| x.bit_eq(y)));
    assert!(!ra
        .store
        .value("layer1.bank.weight")
        .unwrap()
        .bit_eq(rb.store.value("layer1.bank.weight").unwrap()));
}

#[test]
fn probe_order_does_not_change_the_basis() {
    let src = with_task::<f64>(BackboneSpec::simple(3, &[6]), 10);
    let p = probe::<f64>(5, 6, 11);
    let mut shuffled = p.clone();
    shuffled.images.reverse();
    let ua = sym_eig(&covariance(&collect_responses(&src, "layer0", &p).unwrap()).unwrap()).unwrap();
    let ub = sym_eig(&covariance(&collect_responses(&src, "layer0", &shuffled).unwrap()).unwrap()).unwrap();
    assert!(ua.vectors.max_abs_diff(&ub.vectors).unwrap() < 1e-8);
}

#[test]
fn response_matrix_shape_contract() {
    let src = with_task::<f32>(BackboneSpec::simple(3, &[64]), 12);
    let p = ProbeSet::new(probe::<f32>(16, 16, 13).images, 13);
    let r = collect_responses(&src, "layer0", &p).unwrap();
    assert_eq!(r.centered.shape(), [64, 4096]);
    assert_eq!(r.n, 4096);
    assert!(collect_responses(&src, "layer9", &p).is_err());
}

#[test]
fn truncation_without_batch_norm_is_rejected() {
    let mut spec = ConvSpec::new(3, 6, 3);
    spec.batch_norm = false;
    spec.bias = true;
    let arch = BackboneSpec {
        in_channels: 3,
        layers: vec![spec],
    };
    let mut src = with_task::<f64>(arch, 14);
    src.store
        .set_value("layer0.shared.bias", Tensor::full([6], 0.5))
        .unwrap();
    let p = probe(4, 6, 15);
    assert!(response_initialize(
        &src,
        &p,
        &RiOptions {
            rank: Some(3),
            nff: true
        }
    )
    .is_err());
    let (ri, _) = response_initialize(&src, &p, &RiOptions::default()).unwrap();
    assert!(
        verify_equivalence(&src, &ri, "saliency", &inputs(3, 6, 16), 1e-9)
            .unwrap()
            .pass
    );
}

#[test]
fn carried_tasks_and_unsupported_modes() {
    let mut src = with_task::<f64>(BackboneSpec::simple(3, &[6, 6]), 17);
    src.register_task(
        TaskSpec::edge(),
        AdaptationMode::TaskSpecificBN,
        &ModulatorInit::Identity,
    )
    .unwrap();
    let p = probe(4, 6, 18);
    let (ri, _) = response_initialize(&src, &p, &RiOptions::default()).unwrap();
    assert!(
        verify_equivalence(&src, &ri, "edge", &inputs(3, 6, 19), 1e-9)
            .unwrap()
            .pass
    );
    src.register_task(TaskSpec::parts(), AdaptationMode::SingleTask, &ModulatorInit::Identity)
        .unwrap();
    assert!(response_initialize(&src, &p, &RiOptions::default()).is_err());
}

#[test]
fn rcm_task_starts_at_the_decomposed_function() {
    let src = with_task::<f64>(BackboneSpec::simple(3, &[6, 6]), 20);
    let (mut ri, _) = response_initialize(&src, &probe(4, 6, 21), &RiOptions::default()).unwrap();
    ri.register_task(
        TaskSpec::saliency().with_id("sal2"),
        AdaptationMode::RCM,
        &ModulatorInit::Basis,
    )
    .unwrap();
    for x in inputs::<f64>(3, 6, 22) {
        let a = src.layer_outputs("saliency", &x).unwrap();
        let b = ri.layer_outputs("sal2", &x).unwrap();
        // Backbone layers agree; heads differ only through their own init.
        for (p, q) in a.iter().zip(&b).take(2) {
            assert!(p.max_abs_diff(q).unwrap() < 1e-9);
        }
    }
}

#[test]
fn factored_pretraining_converts_exactly() {
    let arch = BackboneSpec::simple(3, &[6, 8]);
    let fact = with_task::<f64>(arch.factored(), 23);
    let rcm = from_factored(&fact, &arch, true).unwrap();
    for x in inputs::<f64>(3, 6, 24) {
        let a = fact.predict("saliency", &x).unwrap();
        let b = rcm.predict("saliency", &x).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
    }
    assert!(from_factored(&fact, &BackboneSpec::simple(3, &[6, 6]), true).is_err());
}
