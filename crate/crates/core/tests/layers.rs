mod common;

use common::rng;
use proptest::prelude::*;
use rand::Rng;
use rcm_core::layers::{ConvBlock, ModulatorInit, RcmConvLayer};
use rcm_core::tasks::AdaptationMode;
use rcm_core::{ConvSpec, Graph, Mode, ParamStore, Scalar, Tensor};

fn bank_layer<T: Scalar>(store: &mut ParamStore<T>, c_in: usize, c_out: usize, nff: bool, seed: u64) -> RcmConvLayer {
    let mut r = rng(seed);
    let spec = ConvSpec::new(c_in, c_out, 3);
    RcmConvLayer::register(
        store,
        "l".into(),
        spec,
        nff,
        Tensor::uniform([c_out, c_in, 3, 3], -1.0, 1.0, &mut r),
        Tensor::uniform([c_out, c_out], -1.0, 1.0, &mut r),
        Tensor::uniform([c_out], -0.5, 0.5, &mut r),
    )
    .unwrap()
}

/// Pre-BN output of `task` (or the template path).
fn rcm_pre_bn<T: Scalar>(layer: &RcmConvLayer, store: &ParamStore<T>, x: &Tensor<T>, task: Option<&str>) -> Tensor<T> {
    let mut g = Graph::new();
    let xv = g.input(x.clone()).unwrap();
    let out = layer.forward(&mut g, store, xv, task, Mode::Eval).unwrap();
    g.value(out.pre_bn).clone()
}

fn rcm_out<T: Scalar>(layer: &RcmConvLayer, store: &ParamStore<T>, x: &Tensor<T>, task: &str) -> Tensor<T> {
    let mut g = Graph::new();
    let xv = g.input(x.clone()).unwrap();
    let out = layer.forward(&mut g, store, xv, Some(task), Mode::Eval).unwrap();
    g.value(out.out).clone()
}

fn plain_conv<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, pad: usize) -> Tensor<T> {
    let mut g = Graph::new();
    let xv = g.input(x.clone()).unwrap();
    let wv = g.input(w.clone()).unwrap();
    let bv = b.map(|b| g.input(b.clone()).unwrap());
    let y = g.conv2d(xv, wv, bv, 1, pad).unwrap();
    g.value(y).clone()
}

#[test]
fn two_stage_forward_equals_composed_convolution() {
    for nff in [false, true] {
        let mut store = ParamStore::<f32>::new();
        let mut layer = bank_layer(&mut store, 5, 8, nff, 1);
        let wt = Tensor::<f64>::uniform([8, 8], -1.0, 1.0, &mut rng(2));
        layer
            .add_task_modulator(&mut store, "a", &ModulatorInit::Given(wt.clone()))
            .unwrap();
        let x = Tensor::<f32>::uniform([2, 5, 6, 6], -1.0, 1.0, &mut rng(3));
        let got = rcm_pre_bn(&layer, &store, &x, Some("a"));

        let ws = store.value(&layer.bank).unwrap().reshape([8, 45]).unwrap();
        let composed = wt
            .cast::<f32>()
            .matmul(&ws)
            .unwrap()
            .into_reshape([8, 5, 3, 3])
            .unwrap();
        let bias = store.value(&layer.bias).unwrap().clone();
        let want = plain_conv(&x, &composed, Some(&bias), 1);
        let dev = got.max_abs_diff(&want).unwrap();
        assert!(dev < 1e-5, "nff={nff}: {dev}");
    }
}

#[test]
fn identity_modulator_reproduces_bank_convolution() {
    let mut store = ParamStore::<f32>::new();
    let mut layer = bank_layer(&mut store, 3, 6, true, 4);
    store.set_value(&layer.bias, Tensor::zeros([6])).unwrap();
    layer
        .add_task_modulator(&mut store, "a", &ModulatorInit::Identity)
        .unwrap();
    let x = Tensor::<f32>::uniform([1, 3, 5, 5], -1.0, 1.0, &mut rng(5));
    let want = plain_conv(&x, store.value(&layer.bank).unwrap(), None, 1);
    assert!(rcm_pre_bn(&layer, &store, &x, Some("a")).max_abs_diff(&want).unwrap() < 1e-6);
}

#[test]
fn distinct_modulators_give_distinct_outputs() {
    let mut store = ParamStore::<f64>::new();
    let mut layer = bank_layer(&mut store, 3, 4, false, 6);
    let mut wb = Tensor::<f64>::identity(4);
    wb.data_mut()[1] = 0.5;
    layer
        .add_task_modulator(&mut store, "a", &ModulatorInit::Identity)
        .unwrap();
    layer
        .add_task_modulator(&mut store, "b", &ModulatorInit::Given(wb))
        .unwrap();
    let x = Tensor::<f64>::uniform([1, 3, 4, 4], -1.0, 1.0, &mut rng(7));
    let ya = rcm_pre_bn(&layer, &store, &x, Some("a"));
    let yb = rcm_pre_bn(&layer, &store, &x, Some("b"));
    let hw = 16;
    // Only channel 0 mixes differently.
    assert!(ya.data()[..hw].iter().zip(&yb.data()[..hw]).any(|(a, b)| a != b));
    assert!(ya.data()[hw..].iter().zip(&yb.data()[hw..]).all(|(a, b)| a == b));
}

#[test]
fn orthogonal_init_gives_unit_scales() {
    let mut store = ParamStore::<f64>::new();
    let mut layer = bank_layer(&mut store, 3, 6, true, 8);
    let m = Tensor::<f64>::uniform([6, 6], -1.0, 1.0, &mut rng(9));
    let sym = m.add(&m.transpose2().unwrap()).unwrap();
    let q = rcm_core::linalg::sym_eig(&sym).unwrap().vectors;
    layer
        .add_task_modulator(&mut store, "a", &ModulatorInit::Given(q))
        .unwrap();
    let g = store.value("l.task.a.mod.g").unwrap();
    assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-5));
}

#[test]
fn adding_a_task_keeps_existing_outputs() {
    let mut store = ParamStore::<f32>::new();
    let mut layer = bank_layer(&mut store, 3, 6, true, 10);
    layer
        .add_task_modulator(&mut store, "a", &ModulatorInit::Basis)
        .unwrap();
    let x = Tensor::<f32>::uniform([2, 3, 5, 5], -1.0, 1.0, &mut rng(11));
    let before = rcm_out(&layer, &store, &x, "a");
    layer
        .add_task_modulator(&mut store, "b", &ModulatorInit::Identity)
        .unwrap();
    assert!(before.bit_eq(&rcm_out(&layer, &store, &x, "a")));
    assert!(layer
        .add_task_modulator(&mut store, "b", &ModulatorInit::Identity)
        .is_err());
}

#[test]
fn modulators_share_no_storage() {
    let mut store = ParamStore::<f32>::new();
    let mut layer = bank_layer(&mut store, 3, 4, true, 12);
    layer
        .add_task_modulator(&mut store, "a", &ModulatorInit::Basis)
        .unwrap();
    layer
        .add_task_modulator(&mut store, "b", &ModulatorInit::Basis)
        .unwrap();
    let names = |t: &str| -> Vec<String> {
        let s = &layer.tasks[t];
        let mut v = s.modulator.as_ref().unwrap().names();
        v.extend(s.bias.clone());
        v.extend(s.bn.as_ref().unwrap().param_names());
        v.extend(s.bn.as_ref().unwrap().buffer_names());
        v
    };
    let (a, b) = (names("a"), names("b"));
    assert!(a.iter().all(|n| !b.contains(n)));
    assert!(a.iter().chain(&b).all(|n| store.contains(n)));
}

#[test]
fn unknown_task_is_an_error() {
    let mut store = ParamStore::<f32>::new();
    let layer = bank_layer(&mut store, 3, 4, true, 13);
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros([1, 3, 3, 3])).unwrap();
    assert!(layer.forward(&mut g, &store, x, Some("nope"), Mode::Eval).is_err());
}

#[test]
fn bank_cannot_be_made_trainable_or_overwritten() {
    let mut store = ParamStore::<f32>::new();
    let layer = bank_layer(&mut store, 3, 4, true, 14);
    assert!(!store.by_name(&layer.bank).unwrap().trainable());
    assert!(store.set_trainable(&layer.bank, true).is_err());
    assert!(store.set_value(&layer.bank, Tensor::zeros([4, 3, 3, 3])).is_err());
}

// ---------------------------------------------------------------- adapters

fn block(store: &mut ParamStore<f64>, spec: ConvSpec, mode: AdaptationMode) -> ConvBlock {
    let mut b = ConvBlock::register(store, "blk".into(), spec, &mut rng(20)).unwrap();
    b.add_task(store, "t", mode).unwrap();
    b
}

fn block_pre_bn(b: &ConvBlock, store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.input(x.clone()).unwrap();
    let out = b.forward(&mut g, store, xv, Some("t"), Mode::Eval, false).unwrap();
    g.value(out.pre_bn).clone()
}

fn adapter_name(b: &ConvBlock) -> String {
    b.tasks["t"].adapter.as_ref().unwrap().weight.clone()
}

#[test]
fn zero_adapter_is_transparent() {
    for mode in [AdaptationMode::SeriesRA, AdaptationMode::ParallelRA] {
        let mut store = ParamStore::new();
        let b = block(&mut store, ConvSpec::new(3, 4, 3), mode);
        let x = Tensor::uniform([2, 3, 5, 5], -1.0, 1.0, &mut rng(21));
        let base = plain_conv(&x, store.value(&b.shared.weight).unwrap(), None, 1);
        assert!(block_pre_bn(&b, &store, &x).bit_eq(&base), "{mode}");
    }
}

#[test]
fn series_adapter_on_identity_base_is_x_plus_ax() {
    let mut store = ParamStore::new();
    let b = block(&mut store, ConvSpec::new(2, 2, 1), AdaptationMode::SeriesRA);
    store
        .set_value(
            &b.shared.weight,
            Tensor::from_f64([2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
    store
        .set_value(
            &adapter_name(&b),
            Tensor::from_f64([2, 2, 1, 1], &[2.0, -1.0, 0.5, 3.0]).unwrap(),
        )
        .unwrap();
    // One pixel, x = (1, 2): A·x = (0, 6.5), so x + A·x = (1, 8.5).
    let x = Tensor::from_f64([1, 2, 1, 1], &[1.0, 2.0]).unwrap();
    assert_eq!(block_pre_bn(&b, &store, &x).data(), &[1.0, 8.5]);
}

#[test]
fn parallel_adapter_with_zero_base_is_the_adapter_path() {
    let mut store = ParamStore::new();
    let spec = ConvSpec::new(3, 4, 3).with_stride(2);
    let b = block(&mut store, spec, AdaptationMode::ParallelRA);
    store.set_value(&b.shared.weight, Tensor::zeros([4, 3, 3, 3])).unwrap();
    let a = Tensor::uniform([4, 3, 1, 1], -1.0, 1.0, &mut rng(22));
    store.set_value(&adapter_name(&b), a.clone()).unwrap();
    let x = Tensor::uniform([1, 3, 6, 6], -1.0, 1.0, &mut rng(23));
    let mut g = Graph::new();
    let (xv, av) = (g.input(x.clone()).unwrap(), g.input(a).unwrap());
    let side = g.conv2d(xv, av, None, 2, 0).unwrap();
    assert!(block_pre_bn(&b, &store, &x).max_abs_diff(g.value(side)).unwrap() < 1e-15);
}

#[test]
fn parallel_adapter_rejects_mismatched_padding() {
    let mut store = ParamStore::<f64>::new();
    let mut spec = ConvSpec::new(3, 4, 3);
    spec.padding = Some(0);
    let mut b = ConvBlock::register(&mut store, "blk".into(), spec, &mut rng(24)).unwrap();
    assert!(b.add_task(&mut store, "t", AdaptationMode::ParallelRA).is_err());
    assert!(b.add_task(&mut store, "s", AdaptationMode::SeriesRA).is_ok());
}

// ---------------------------------------------------------------- properties

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn nff_fold_matches_unfolded_forward(seed in any::<u64>(), c_in in 1usize..5, c_out in 1usize..7) {
        let mut store = ParamStore::<f32>::new();
        let mut layer = bank_layer(&mut store, c_in, c_out, true, seed);
        let mut r = rng(seed ^ 1);
        let v = common::away_from_zero(&[c_out, c_out], 0.05, &mut r);
        layer.add_task_modulator(&mut store, "a", &ModulatorInit::Given(v)).unwrap();
        let g: Vec<f64> = (0..c_out).map(|_| r.random_range(-2.0..2.0)).collect();
        store.set_value("l.task.a.mod.g", Tensor::from_f64([c_out], &g).unwrap()).unwrap();
        let x = Tensor::<f32>::uniform([1, c_in, 4, 4], -1.0, 1.0, &mut r);
        let before = rcm_pre_bn(&layer, &store, &x, Some("a"));
        let w = layer.fold_nff(&mut store, "a").unwrap();
        let after = rcm_pre_bn(&layer, &store, &x, Some("a"));
        prop_assert!(before.max_abs_diff(&after).unwrap() < 1e-5);
        for (i, gi) in g.iter().enumerate() {
            let norm = w.row(i).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!((norm - gi.abs()).abs() < 1e-6);
        }
        prop_assert!(w.bit_eq(&layer.fold_nff(&mut store, "a").unwrap()));
    }

    #[test]
    fn zero_modulator_row_zeroes_its_channel(seed in any::<u64>(), c_out in 2usize..7) {
        let mut store = ParamStore::<f32>::new();
        let mut layer = bank_layer(&mut store, 3, c_out, false, seed);
        store.set_value(&layer.bias, Tensor::zeros([c_out])).unwrap();
        let mut r = rng(seed ^ 2);
        let mut w = Tensor::<f64>::uniform([c_out, c_out], -1.0, 1.0, &mut r);
        let row = r.random_range(0..c_out);
        w.data_mut()[row * c_out..(row + 1) * c_out].fill(0.0);
        layer.add_task_modulator(&mut store, "a", &ModulatorInit::Given(w)).unwrap();
        let x = Tensor::<f32>::uniform([2, 3, 5, 5], -1.0, 1.0, &mut r);
        let y = rcm_pre_bn(&layer, &store, &x, Some("a"));
        let hw = 25;
        for b in 0..2 {
            let start = (b * c_out + row) * hw;
            prop_assert!(y.data()[start..start + hw].iter().all(|&v| v == 0.0));
        }
    }
}
