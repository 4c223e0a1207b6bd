use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t32(shape: &[usize], data: &[f32]) -> Tensor<f32> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.gen_range(lo..hi)))
}

/// `sum(y * r)` with fixed random weights so that no coordinate of the
/// gradient is trivially symmetric.
fn weighted_sum<T: Real>(g: &mut Graph<'_, T>, y: Var, seed: u64) -> Result<Var, crate::Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rand_tensor::<T>(&mut rng, g.shape(y), 0.5, 1.5);
    let rv = g.leaf(&r, false);
    let p = g.mul(y, rv)?;
    Ok(g.sum(p))
}

#[test]
fn linear_identity_and_zero_weights() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(&t32(&[1, 2], &[1.0, 2.0]), false);
    let eye = g.leaf(&t32(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
    let zb = g.leaf(&t32(&[2], &[0.0, 0.0]), false);
    let y = g.linear(x, eye, Some(zb)).unwrap();
    assert_eq!(g.value(y), &[1.0, 2.0]);

    let zw = g.leaf(&t32(&[2, 2], &[0.0; 4]), false);
    let b = g.leaf(&t32(&[2], &[3.0, 4.0]), false);
    let y = g.linear(x, zw, Some(b)).unwrap();
    assert_eq!(g.value(y), &[3.0, 4.0]);
}

#[test]
fn linear_shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(&Tensor::zeros(vec![2, 3]), false);
    let w = g.leaf(&Tensor::zeros(vec![4, 2]), false);
    let err = g.linear(x, w, None).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

#[test]
fn linear_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor::<f32>(&mut rng, &[3, 4], -1.0, 1.0);
    let w = rand_tensor::<f32>(&mut rng, &[4, 2], -1.0, 1.0);
    let b = rand_tensor::<f32>(&mut rng, &[2], -1.0, 1.0);
    let mut g = Graph::<f32>::new();
    let (xv, wv, bv) = (g.leaf(&x, false), g.leaf(&w, false), g.leaf(&b, false));
    let y = g.linear(xv, wv, Some(bv)).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut acc = b.data()[j] as f64;
            for k in 0..4 {
                acc += x.data()[i * 4 + k] as f64 * w.data()[k * 2 + j] as f64;
            }
            assert!((g.value(y)[i * 2 + j] as f64 - acc).abs() < 1e-6);
        }
    }
}

#[test]
fn matmul_nt_matches_transposed_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor::<f64>(&mut rng, &[3, 5], -1.0, 1.0);
    let b = rand_tensor::<f64>(&mut rng, &[4, 5], -1.0, 1.0);
    let mut g = Graph::<f64>::new();
    let (av, bv) = (g.leaf(&a, false), g.leaf(&b, false));
    let bt = g.transpose(bv).unwrap();
    let y1 = g.matmul(av, bt).unwrap();
    let y2 = g.matmul_nt(av, bv).unwrap();
    for (p, q) in g.value(y1).iter().zip(g.value(y2)) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(&t32(&[2], &[0.0, 0.0]), false);
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y), &[0.5, 0.5]);

    let x = g.leaf(&t32(&[2], &[1000.0, 0.0]), false);
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y), &[1.0, 0.0]);

    let x = g.leaf(&t32(&[3], &[1.0, 2.0, 3.0]), false);
    let y = g.softmax(x, 0).unwrap();
    let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
    for (i, v) in g.value(y).iter().enumerate() {
        assert!((*v as f64 - ((i + 1) as f64).exp() / z).abs() < 1e-7);
    }
}

#[test]
fn softmax_along_inner_axis() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(
        &Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
        false,
    );
    let y = g.softmax(x, 0).unwrap();
    let v = g.value(y);
    for j in 0..3 {
        assert!((v[j] + v[3 + j] - 1.0).abs() < 1e-12);
        assert!((v[3 + j] - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-12);
    }
}

#[test]
fn activations() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(&t32(&[3], &[0.0, -3.0, 3.0]), false);
    let s = g.sigmoid(x);
    let r = g.relu(x);
    assert_eq!(g.value(s)[0], 0.5);
    assert_eq!(&g.value(r)[1..], &[0.0, 3.0]);
}

#[test]
fn sigmoid_gradient_at_one() {
    let x = t32(&[1], &[1.0]);
    let mut g = Graph::<f32>::new();
    let xv = g.leaf(&x, true);
    let s = g.sigmoid(xv);
    let l = g.sum(s);
    let grads = g.backward(l).unwrap();
    let analytic = grads.get(xv).unwrap()[0] as f64;
    let eps = 1e-3;
    let fd = (sigmoid(1.0 + eps) - sigmoid(1.0 - eps)) / (2.0 * eps);
    assert!((analytic - fd).abs() < 1e-3);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f32>::new();
    let ones = g.leaf(&t32(&[2], &[1.0, 1.0]), false);
    let zeros = g.leaf(&t32(&[2], &[0.0, 0.0]), false);
    let x = g.leaf(&t32(&[1, 2], &[4.0, 4.0]), false);
    let y = g.layer_norm(x, ones, zeros).unwrap();
    assert_eq!(g.value(y), &[0.0, 0.0]);
    let x = g.leaf(&t32(&[1, 2], &[1.0, -1.0]), false);
    let y = g.layer_norm(x, ones, zeros).unwrap();
    assert!((g.value(y)[0] - 1.0).abs() < 1e-4 && (g.value(y)[1] + 1.0).abs() < 1e-4);
}

#[test]
fn layer_norm_matches_f64_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor::<f32>(&mut rng, &[2, 8], -2.0, 2.0);
    let gain = rand_tensor::<f32>(&mut rng, &[8], 0.5, 1.5);
    let bias = rand_tensor::<f32>(&mut rng, &[8], -0.5, 0.5);
    let mut g = Graph::<f32>::new();
    let (xv, gv, bv) = (
        g.leaf(&x, false),
        g.leaf(&gain, false),
        g.leaf(&bias, false),
    );
    let y = g.layer_norm(xv, gv, bv).unwrap();
    for r in 0..2 {
        let row: Vec<f64> = x.row(r).iter().map(|&v| v as f64).collect();
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        for j in 0..8 {
            let want = (row[j] - mean) / (var + 1e-5).sqrt() * gain.data()[j] as f64
                + bias.data()[j] as f64;
            assert!((g.value(y)[r * 8 + j] as f64 - want).abs() < 1e-5);
        }
    }
}

fn fmap_4x5(rng: &mut ChaCha8Rng) -> Tensor<f32> {
    rand_tensor(rng, &[4, 5, 3], -1.0, 1.0)
}

#[test]
fn bilinear_grid_identity_padding_and_midpoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let fm = fmap_4x5(&mut rng);
    let mut g = Graph::<f32>::new();
    let f = g.leaf(&fm, false);
    // cell (row 2, col 3) of a 4x5 map
    let p = g.leaf(&t32(&[1, 2], &[3.0 / 4.0, 2.0 / 3.0]), false);
    let s = g.bilinear_sample(f, p).unwrap();
    let cell = &fm.data()[(2 * 5 + 3) * 3..(2 * 5 + 4) * 3];
    for (a, b) in g.value(s).iter().zip(cell) {
        assert!((a - b).abs() < 1e-6);
    }
    let far = g.leaf(&t32(&[1, 2], &[-0.5, -0.5]), false);
    let s = g.bilinear_sample(f, far).unwrap();
    assert!(g.value(s).iter().all(|&v| v == 0.0));

    // midpoint of cells (1,1),(1,2),(2,1),(2,2)
    let mid = g.leaf(&t32(&[1, 2], &[1.5 / 4.0, 1.5 / 3.0]), false);
    let s = g.bilinear_sample(f, mid).unwrap();
    for ch in 0..3 {
        let at = |r: usize, c: usize| fm.data()[(r * 5 + c) * 3 + ch];
        let want = (at(1, 1) + at(1, 2) + at(2, 1) + at(2, 2)) / 4.0;
        assert!((g.value(s)[ch] - want).abs() < 1e-6);
    }
}

#[test]
fn bilinear_all_grid_points_reproduce_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let fm = fmap_4x5(&mut rng);
    let pts: Vec<f32> = (0..4)
        .flat_map(|r| (0..5).flat_map(move |c| [c as f32 / 4.0, r as f32 / 3.0]))
        .collect();
    let mut g = Graph::<f32>::new();
    let f = g.leaf(&fm, false);
    let p = g.leaf(&t32(&[20, 2], &pts), false);
    let s = g.bilinear_sample(f, p).unwrap();
    for (a, b) in g.value(s).iter().zip(fm.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn grad_check_rejects_non_scalar_output() {
    let x = t32(&[2], &[1.0, 2.0]);
    let err = grad_check(
        |g: &mut Graph<'_, f32>, v: &[Var]| Ok(g.relu(v[0])),
        &[x],
        1e-3,
    );
    assert!(matches!(err, Err(crate::Error::Contract(_))));
}

#[test]
fn grad_check_linear_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let inputs = vec![
        rand_tensor::<f32>(&mut rng, &[3, 4], -1.0, 1.0),
        rand_tensor::<f32>(&mut rng, &[4, 2], -1.0, 1.0),
        rand_tensor::<f32>(&mut rng, &[2], -1.0, 1.0),
    ];
    let err = grad_check(
        |g: &mut Graph<'_, f32>, v: &[Var]| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            Ok(g.sum(y))
        },
        &inputs,
        1e-2,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn softmax_sum_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = rand_tensor::<f64>(&mut rng, &[5], -2.0, 2.0);
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(&x, true);
    let y = g.softmax(xv, 0).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(xv).unwrap().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn grad_check_bilinear_off_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let fm = rand_tensor::<f32>(&mut rng, &[4, 5, 3], -1.0, 1.0);
    // keep every point at least 0.2 px away from grid lines
    let pts: Vec<f32> = (0..6)
        .flat_map(|_| {
            let px = rng.gen_range(0..4) as f32 + rng.gen_range(0.2..0.8);
            let py = rng.gen_range(0..3) as f32 + rng.gen_range(0.2..0.8);
            [px / 4.0, py / 3.0]
        })
        .collect();
    let err = grad_check(
        |g: &mut Graph<'_, f32>, v: &[Var]| {
            let s = g.bilinear_sample(v[0], v[1])?;
            weighted_sum(g, s, 1)
        },
        &[fm, t32(&[6, 2], &pts)],
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn shared_input_accumulates_both_consumers() {
    // y = x * x + 3x via two consumers; duplicated-input oracle: dy/dx = 2x + 3
    let x = Tensor::<f64>::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(&x, true);
    let sq = g.mul(xv, xv).unwrap();
    let lin = g.scale(xv, 3.0);
    let y = g.add(sq, lin).unwrap();
    let l = g.sum(y);
    let grads = g.backward(l).unwrap();
    for (gv, xv) in grads.get(xv).unwrap().iter().zip(x.data()) {
        assert!((gv - (2.0 * xv + 3.0)).abs() < 1e-12);
    }

    // oracle: the same function with two independent copies of x
    let mut g2 = Graph::<f64>::new();
    let a = g2.leaf(&x, true);
    let b = g2.leaf(&x, true);
    let c = g2.leaf(&x, true);
    let sq = g2.mul(a, b).unwrap();
    let lin = g2.scale(c, 3.0);
    let y = g2.add(sq, lin).unwrap();
    let l = g2.sum(y);
    let gr = g2.backward(l).unwrap();
    for i in 0..3 {
        let sum = gr.get(a).unwrap()[i] + gr.get(b).unwrap()[i] + gr.get(c).unwrap()[i];
        assert!((sum - grads.get(xv).unwrap()[i]).abs() < 1e-12);
    }
}

#[test]
fn param_gradients_accumulate_across_uses() {
    let mut store = ParamStore::<f64>::new();
    let id = store
        .insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())
        .unwrap();
    let mut g = Graph::with_params(&store);
    let w1 = g.param(id);
    let w2 = g.param(id);
    assert_eq!(w1, w2);
    let p = g.mul(w1, w2).unwrap();
    let l = g.sum(p);
    let grads = g.backward(l).unwrap();
    let pg = g.param_grads(&grads);
    assert_eq!(pg, vec![(id, vec![2.0, 4.0])]);
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut store = ParamStore::<f32>::new();
    let id = store.insert("w", t32(&[2], &[1.0, 2.0])).unwrap();
    store.set_trainable("w", false);
    let mut g = Graph::with_params(&store);
    let w = g.param(id);
    let l = g.sum(w);
    let grads = g.backward(l).unwrap();
    assert!(g.param_grads(&grads).is_empty());
}

#[test]
fn adamw_moves_against_gradient() {
    let mut store = ParamStore::<f32>::new();
    let id = store.insert("w", t32(&[1], &[1.0])).unwrap();
    let mut opt = AdamW::new(
        &store,
        AdamWConfig {
            clip_norm: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        },
    );
    store.get_mut(id).accumulate_grad(&[0.5]).unwrap();
    opt.step(&mut store, |_| 1.0);
    // first Adam step has magnitude lr regardless of gradient scale
    assert!((store.get(id).data()[0] - (1.0 - 1e-3)).abs() < 1e-6);
    assert_eq!(store.get(id).grad().unwrap(), &[0.0]);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_normalizes_large_inputs(v in proptest::collection::vec(-1e4f32..1e4, 1..40)) {
            let n = v.len();
            let mut g = Graph::<f32>::new();
            let x = g.leaf(&Tensor::new(vec![n], v).unwrap(), false);
            let y = g.softmax(x, 0).unwrap();
            let s: f64 = g.value(y).iter().map(|&p| p as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(g.value(y).iter().all(|p| p.is_finite() && *p >= 0.0));
        }
    }
}
