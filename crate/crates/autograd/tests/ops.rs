//! Value-level semantics: broadcasting, masking exactness, optimizer math,
//! store/binder behavior, and error paths.

use std::collections::BTreeMap;

use framecast_autograd::optim::AdamW;
use framecast_autograd::{
    broadcast_shape, nn, Arr, AutogradError, BindMode, Binder, Graph, ParamStore, TrainMask,
};
use ndarray::prelude::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn broadcast_shape_rules() {
    assert_eq!(broadcast_shape(&[2, 3], &[3]), vec![2, 3]);
    assert_eq!(broadcast_shape(&[4, 1, 5], &[3, 1]), vec![4, 3, 5]);
    assert_eq!(broadcast_shape(&[], &[2, 2]), vec![2, 2]);
    assert_eq!(broadcast_shape(&[1], &[7]), vec![7]);
}

#[test]
#[should_panic(expected = "incompatible broadcast")]
fn broadcast_shape_rejects_mismatch() {
    broadcast_shape(&[2, 3], &[4]);
}

#[test]
fn add_broadcasts_scalar_node() {
    let mut g = Graph::new(false);
    let a = g.constant(ndarray::array![[1.0, 2.0], [3.0, 4.0]].into_dyn());
    let s = g.scalar(10.0);
    let y = g.add(a, s);
    assert_eq!(
        g.value(y).as_slice().unwrap(),
        &[11.0, 12.0, 13.0, 14.0]
    );
}

#[test]
fn softmax_rows_sum_to_one_and_pad_weight_is_zero() {
    let mut g = Graph::new(false);
    let x = g.constant(ndarray::array![[2.0, -1.0, 0.5, f64::NEG_INFINITY]].into_dyn());
    let y = g.softmax_last(x);
    let v = g.value(y);
    let sum: f64 = v.iter().sum();
    assert!((sum - 1.0).abs() < 1e-12);
    assert_eq!(v[[0, 3]], 0.0);
}

#[test]
fn masked_attention_ignores_key_content_exactly() {
    // Two runs differ only in the key/value rows the mask disables; outputs
    // must agree to the last bit.
    let run = |garbage: f64| -> Arr {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::new(false);
        let q = g.constant(framecast_autograd::init::normal(&mut rng, &[1, 2, 8], 1.0));
        let mut kv = framecast_autograd::init::normal(&mut rng, &[1, 4, 8], 1.0);
        kv.slice_mut(s![0usize, 2..4, ..]).fill(garbage);
        let k = g.constant(kv.clone());
        let v = g.constant(kv);
        let mut mask = Array2::<f64>::zeros((1, 4));
        mask[[0, 2]] = f64::NEG_INFINITY;
        mask[[0, 3]] = f64::NEG_INFINITY;
        let y = nn::attention(&mut g, q, k, v, 2, Some(&mask));
        g.value(y).clone()
    };
    let a = run(123.456);
    let b = run(-777.0);
    assert_eq!(
        a.as_slice().unwrap(),
        b.as_slice().unwrap(),
        "masked keys leaked into the output"
    );
}

#[test]
fn linear_matches_manual_matmul() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    nn::register_linear(&mut store, &mut rng, "fc", 3, 2, true);
    let mut g = Graph::new(false);
    let b = Binder::bind(&mut g, &store, BindMode::Infer);
    let x = g.constant(ndarray::array![[1.0, 2.0, 3.0], [0.5, -1.0, 2.0]].into_dyn());
    let y = nn::linear(&mut g, &b, "fc", x).unwrap();

    let w = store.get("fc.w").unwrap();
    let bias = store.get("fc.b").unwrap();
    for r in 0..2 {
        for c in 0..2 {
            let xrow: [f64; 3] = match r {
                0 => [1.0, 2.0, 3.0],
                _ => [0.5, -1.0, 2.0],
            };
            let want: f64 =
                (0..3).map(|k| xrow[k] * w[[k, c]]).sum::<f64>() + bias[[c]];
            assert!((g.value(y)[[r, c]] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn linear_handles_3d_batches() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    nn::register_linear(&mut store, &mut rng, "fc", 4, 6, false);
    let mut g = Graph::new(false);
    let b = Binder::bind(&mut g, &store, BindMode::Infer);
    let x = g.constant(framecast_autograd::init::normal(&mut rng, &[2, 3, 4], 1.0));
    let y = nn::linear(&mut g, &b, "fc", x).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 3, 6]);
}

#[test]
fn sinusoidal_embedding_is_bounded_and_distinct() {
    let e = nn::sinusoidal_embedding(&[0.0, 1.0, 500.0, 999.0], 16);
    assert_eq!(e.shape(), &[4, 16]);
    assert!(e.iter().all(|v| v.abs() <= 1.0));
    let r1 = e.slice(s![1usize, ..]).to_owned();
    let r2 = e.slice(s![2usize, ..]).to_owned();
    assert!((&r1 - &r2).iter().any(|d| d.abs() > 0.1));
    // t = 0 embeds as [sin 0, cos 0] = [0s, 1s].
    for i in 0..8 {
        assert_eq!(e[[0, i]], 0.0);
        assert_eq!(e[[0, 8 + i]], 1.0);
    }
}

#[test]
fn backward_requires_grad_mode() {
    let mut g = Graph::new(false);
    let a = g.leaf(Arr::from_elem(ndarray::IxDyn(&[]), 2.0), true);
    let y = g.mul(a, a);
    match g.backward(y) {
        Err(AutogradError::GradDisabled) => {}
        other => panic!("expected GradDisabled, got {other:?}"),
    }
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::new(true);
    let a = g.leaf(Arr::zeros(ndarray::IxDyn(&[2, 2])), true);
    match g.backward(a) {
        Err(AutogradError::NonScalarRoot(shape)) => assert_eq!(shape, vec![2, 2]),
        other => panic!("expected NonScalarRoot, got {other:?}"),
    }
}

#[test]
fn grad_accumulates_over_shared_nodes() {
    // y = x*x + x  =>  dy/dx = 2x + 1
    let mut g = Graph::new(true);
    let x = g.leaf(Arr::from_elem(ndarray::IxDyn(&[]), 3.0), true);
    let sq = g.mul(x, x);
    let y = g.add(sq, x);
    g.backward(y).unwrap();
    let got = g.grad(x).unwrap().iter().next().copied().unwrap();
    assert!((got - 7.0).abs() < 1e-12);
}

#[test]
fn param_store_basics() {
    let mut store = ParamStore::new();
    store.insert("b.w", Arr::zeros(ndarray::IxDyn(&[2, 2])));
    store.insert("a.w", Arr::zeros(ndarray::IxDyn(&[3])));
    let names: Vec<_> = store.names().cloned().collect();
    assert_eq!(names, vec!["a.w".to_string(), "b.w".to_string()]);
    assert_eq!(store.total_elems(), 7);
    assert!(matches!(
        store.get("missing"),
        Err(AutogradError::UnknownParam(_))
    ));
}

#[test]
#[should_panic(expected = "duplicate parameter")]
fn param_store_rejects_duplicates() {
    let mut store = ParamStore::new();
    store.insert("w", Arr::zeros(ndarray::IxDyn(&[1])));
    store.insert("w", Arr::zeros(ndarray::IxDyn(&[1])));
}

#[test]
fn train_mask_selects_and_counts() {
    let mut store = ParamStore::new();
    store.insert("enc.0.w", Arr::zeros(ndarray::IxDyn(&[4])));
    store.insert("enc.1.w", Arr::zeros(ndarray::IxDyn(&[6])));
    store.insert("dec.0.w", Arr::zeros(ndarray::IxDyn(&[10])));
    let mask = TrainMask::from_predicate(&store, |n| n.starts_with("enc."));
    assert_eq!(mask.len(), 2);
    assert_eq!(mask.trainable_elems(&store), 10);
    assert!(mask.contains("enc.1.w"));
    assert!(!mask.contains("dec.0.w"));
}

#[test]
fn binder_grads_zero_fill_untouched_params() {
    let mut store = ParamStore::new();
    store.insert("used", Arr::from_elem(ndarray::IxDyn(&[2]), 1.5));
    store.insert("unused", Arr::from_elem(ndarray::IxDyn(&[3]), 0.5));
    let mask = TrainMask::all(&store);
    let mut g = Graph::new(true);
    let b = Binder::bind(&mut g, &store, BindMode::Train(&mask));
    let used = b.node("used").unwrap();
    let loss = g.sum_all(used);
    g.backward(loss).unwrap();
    let grads = b.grads(&g, &store, &mask).unwrap();
    assert_eq!(grads["used"].as_slice().unwrap(), &[1.0, 1.0]);
    assert_eq!(grads["unused"].as_slice().unwrap(), &[0.0, 0.0, 0.0]);
}

#[test]
fn infer_mode_records_no_gradients() {
    let mut store = ParamStore::new();
    store.insert("w", Arr::from_elem(ndarray::IxDyn(&[2]), 2.0));
    let mut g = Graph::new(true);
    let b = Binder::bind(&mut g, &store, BindMode::Infer);
    let w = b.node("w").unwrap();
    let loss = g.sum_all(w);
    g.backward(loss).unwrap();
    assert!(g.grad(w).is_none());
}

#[test]
fn adamw_first_step_matches_closed_form() {
    let mut store = ParamStore::new();
    store.insert("p", Arr::from_elem(ndarray::IxDyn(&[1]), 1.0));
    let mut opt = AdamW::new(0.1, 0.01);
    let mut grads = BTreeMap::new();
    grads.insert("p".to_string(), Arr::from_elem(ndarray::IxDyn(&[1]), 0.5));
    opt.step(&mut store, &grads, 1.0).unwrap();
    // First step: m_hat = g, v_hat = g^2, so the adaptive term is
    // g/(|g|+eps) ~ 1 and decay subtracts lr*wd*p.
    let expect = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 1.0);
    let got = store.get("p").unwrap()[[0]];
    assert!((got - expect).abs() < 1e-9, "got {got}, want {expect}");
}

#[test]
fn adamw_warmup_scale_shrinks_update() {
    let run = |scale: f64| {
        let mut store = ParamStore::new();
        store.insert("p", Arr::from_elem(ndarray::IxDyn(&[1]), 1.0));
        let mut opt = AdamW::new(0.1, 0.0);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Arr::from_elem(ndarray::IxDyn(&[1]), 0.5));
        opt.step(&mut store, &grads, scale).unwrap();
        1.0 - store.get("p").unwrap()[[0]]
    };
    let full = run(1.0);
    let tenth = run(0.1);
    assert!((tenth - full * 0.1).abs() < 1e-12);
}

#[test]
fn adamw_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        store.insert(
            "w",
            framecast_autograd::init::he_normal(&mut rng, &[4, 4], 4),
        );
        let mut opt = AdamW::new(1e-3, 0.01);
        for step in 0..20 {
            let g = framecast_autograd::init::normal(&mut rng, &[4, 4], 0.3);
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), g);
            let scale = ((step + 1) as f64 / 10.0).min(1.0);
            opt.step(&mut store, &grads, scale).unwrap();
        }
        store.get("w").unwrap().clone()
    };
    let a = run();
    let b = run();
    assert_eq!(a.as_slice().unwrap(), b.as_slice().unwrap());
}

proptest! {
    #[test]
    fn softmax_always_normalizes(rows in 1usize..4, cols in 1usize..6, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = framecast_autograd::init::normal(&mut rng, &[rows, cols], 3.0);
        let mut g = Graph::new(false);
        let xn = g.constant(x);
        let y = g.softmax_last(xn);
        let v = g.value(y);
        for r in 0..rows {
            let s: f64 = (0..cols).map(|c| v[[r, c]]).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            for c in 0..cols {
                prop_assert!(v[[r, c]] >= 0.0);
            }
        }
    }

    #[test]
    fn broadcast_shape_is_commutative(
        a in proptest::collection::vec(1usize..5, 0..4),
        b in proptest::collection::vec(1usize..5, 0..4),
    ) {
        let compatible = {
            let n = a.len().max(b.len());
            (0..n).all(|i| {
                let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
                let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
                da == db || da == 1 || db == 1
            })
        };
        prop_assume!(compatible);
        prop_assert_eq!(broadcast_shape(&a, &b), broadcast_shape(&b, &a));
    }

    #[test]
    fn group_norm_output_is_normalized(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = framecast_autograd::init::normal(&mut rng, &[1, 4, 5, 5], 2.0);
        let mut g = Graph::new(false);
        let xn = g.constant(x);
        let gamma = g.constant(Arr::from_elem(ndarray::IxDyn(&[4]), 1.0));
        let beta = g.constant(Arr::zeros(ndarray::IxDyn(&[4])));
        let y = g.group_norm(xn, gamma, beta, 2, 1e-8);
        let v = g.value(y);
        // Each group of 2 channels x 25 pixels has ~zero mean, ~unit variance.
        for grp in 0..2 {
            let sl = v.slice(s![0usize, 2 * grp..2 * (grp + 1), .., ..]);
            let m: f64 = sl.iter().sum::<f64>() / 50.0;
            let var: f64 = sl.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 50.0;
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }
}
