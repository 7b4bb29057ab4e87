use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use safeclick::nn::{mha, mlp, positional_encoding, AttentionVars, MlpVars};
use safeclick::tensor::{grad_check, Tape, Tensor, Var};
use safeclick::Error;

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

#[test]
fn matmul_examples() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
    let b = t.constant(Tensor::from_rows(&[[5.0, 6.0], [7.0, 8.0]]));
    let i = t.constant(Tensor::eye(2));
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    let d = t.matmul(i, a).unwrap();
    assert_eq!(t.value(d).data(), &[1.0, 2.0, 3.0, 4.0]);

    let x = t.constant(Tensor::zeros([2, 3]));
    let y = t.constant(Tensor::zeros([2, 3]));
    match t.matmul(x, y) {
        Err(Error::Shape { lhs, rhs, .. }) => assert_eq!((lhs, rhs), (vec![2, 3], vec![2, 3])),
        other => panic!("expected a shape error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_rows(&[[0.0, 0.0], [1000.0, 1000.0], [0.0, 3f32.ln()]]));
    let s = t.softmax_rows(x).unwrap();
    let v = t.value(s).data();
    assert_eq!(&v[..4], &[0.5, 0.5, 0.5, 0.5]);
    assert!((v[4] - 0.25).abs() < 1e-6 && (v[5] - 0.75).abs() < 1e-6);
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_rows(&[[3.0, 3.0], [1.0, 3.0]]));
    let g = t.constant(Tensor::ones([2]));
    let b = t.constant(Tensor::zeros([2]));
    let y = t.layer_norm(x, g, b, 1e-12).unwrap();
    let v = t.value(y).data();
    assert_eq!(&v[..2], &[0.0, 0.0]);
    assert!((v[2] + 1.0).abs() < 1e-6 && (v[3] - 1.0).abs() < 1e-6);

    let c = t.constant(Tensor::full([1, 2], 7.0));
    let b5 = t.constant(Tensor::full([2], 5.0));
    let y = t.layer_norm(c, g, b5, 1e-5).unwrap();
    assert_eq!(t.value(y).data(), &[5.0, 5.0]);
}

#[test]
fn conv2d_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut t = Tape::new();
    let x = t.constant(rand_tensor(&[5, 5, 3], &mut rng));

    let w0 = t.constant(Tensor::zeros([3, 3, 3, 2]));
    let b0 = t.constant(Tensor::from_rows(&[[0.5, -2.0]]).reshape([2]).unwrap());
    let y = t.conv2d(x, w0, b0, 1, 1).unwrap();
    assert_eq!(t.shape(y), &[5, 5, 2]);
    assert!(t.value(y).data().chunks(2).all(|c| c == [0.5, -2.0]));

    let w1 = t.constant(Tensor::eye(3).reshape([1, 1, 3, 3]).unwrap());
    let z = t.constant(Tensor::zeros([3]));
    let y = t.conv2d(x, w1, z, 1, 0).unwrap();
    assert!(t.value(y).bit_eq(t.value(x)));

    let mut one_hot = Tensor::zeros([5, 5, 1]);
    one_hot.data_mut()[2 * 5 + 2] = 1.0;
    let oh = t.constant(one_hot);
    let wb = t.constant(Tensor::full([3, 3, 1, 1], 0.25));
    let zb = t.constant(Tensor::zeros([1]));
    let y = t.conv2d(oh, wb, zb, 1, 1).unwrap();
    for yy in 0..5 {
        for xx in 0..5 {
            let inside = (1..=3).contains(&yy) && (1..=3).contains(&xx);
            assert_eq!(t.value(y).data()[yy * 5 + xx], if inside { 0.25 } else { 0.0 });
        }
    }

    let bad = t.constant(Tensor::zeros([3, 3, 2, 1]));
    assert!(t.conv2d(x, bad, zb, 1, 1).is_err());
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.variable(Tensor::from_fn([2, 3, 2], |i| i as f32));
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut t = Tape::new();
    let x = t.variable(Tensor::scalar(3.0));
    let sq = t.mul(x, x).unwrap();
    assert_eq!(t.backward(sq).unwrap().get(x).unwrap().item(), 6.0);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (a0, b0) = (rand_tensor(&[2, 3], &mut rng), rand_tensor(&[3, 4], &mut rng));
    let mut t = Tape::new();
    let a = t.variable(a0);
    let b = t.variable(b0.clone());
    let c = t.matmul(a, b).unwrap();
    let l = t.sum(c);
    let ga = t.backward(l).unwrap().get(a).unwrap().clone();
    for i in 0..2 {
        for k in 0..3 {
            let expect: f32 = (0..4).map(|j| b0.at2(k, j)).sum();
            assert!((ga.at2(i, k) - expect).abs() < 1e-6);
        }
    }

    let v = t.variable(Tensor::zeros([2]));
    assert!(matches!(t.backward(v), Err(Error::NonScalarLoss(_))));
}

#[test]
fn grad_check_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[4, 4], &mut rng);
    let sq = |t: &mut Tape, v: &[Var]| {
        let y = t.mul(v[0], v[0])?;
        Ok(t.sum(y))
    };
    assert!(grad_check(sq, &[x.clone()], 1e-3, 1e-3).unwrap().pass);

    let first_col = |t: &mut Tape, v: &[Var]| {
        let s = t.softmax_rows(v[0])?;
        let c = t.slice_cols(s, 0, 1)?;
        Ok(t.sum(c))
    };
    assert!(grad_check(first_col, &[x.clone()], 1e-3, 1e-3).unwrap().pass);

    let wrong = |t: &mut Tape, v: &[Var]| {
        let y = t.map_elementwise(v[0], |a| a * a, |a| 3.0 * a);
        Ok(t.sum(y))
    };
    assert!(!grad_check(wrong, &[x], 1e-3, 1e-3).unwrap().pass);
}

#[test]
fn backward_is_bitwise_repeatable() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tape::new();
        let a = t.variable(rand_tensor(&[6, 5], &mut rng));
        let b = t.variable(rand_tensor(&[5, 7], &mut rng));
        let c = t.matmul(a, b).unwrap();
        let s = t.softmax_rows(c).unwrap();
        let g = t.gelu(s);
        let l = t.sum(g);
        let grads = t.backward(l).unwrap();
        (grads.get(a).unwrap().clone(), grads.get(b).unwrap().clone())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert!(a1.bit_eq(&a2) && b1.bit_eq(&b2));
}

fn attention(t: &mut Tape, c: usize, heads: usize, rng: &mut impl Rng) -> AttentionVars {
    AttentionVars {
        wq: t.variable(rand_tensor(&[c, c], rng)),
        wk: t.variable(rand_tensor(&[c, c], rng)),
        wv: t.variable(rand_tensor(&[c, c], rng)),
        wo: t.variable(rand_tensor(&[c, c], rng)),
        heads,
    }
}

#[test]
fn mha_with_zero_scores_averages_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut t = Tape::new();
    let mut p = attention(&mut t, 4, 2, &mut rng);
    p.wq = t.constant(Tensor::zeros([4, 4]));
    p.wk = t.constant(Tensor::zeros([4, 4]));
    let q = t.constant(rand_tensor(&[3, 4], &mut rng));
    let kv = t.constant(rand_tensor(&[5, 4], &mut rng));
    let out = mha(&mut t, q, kv, kv, &p).unwrap();
    let v = t.matmul(kv, p.wv).unwrap();
    let vo = t.matmul(v, p.wo).unwrap();
    let vo = t.value(vo).clone();
    for i in 0..3 {
        for j in 0..4 {
            let mean: f32 = (0..5).map(|r| vo.at2(r, j)).sum::<f32>() / 5.0;
            assert!((t.value(out).at2(i, j) - mean).abs() < 1e-5);
        }
    }
}

#[test]
fn mha_matches_scalar_hand_computation() {
    let mut t = Tape::new();
    let p = AttentionVars {
        wq: t.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 2.0]])),
        wk: t.constant(Tensor::from_rows(&[[0.5, 1.0], [1.0, 0.0]])),
        wv: t.constant(Tensor::from_rows(&[[1.0, -1.0], [2.0, 0.5]])),
        wo: t.constant(Tensor::eye(2)),
        heads: 1,
    };
    let q = t.constant(Tensor::from_rows(&[[1.0, 1.0]]));
    let kv = t.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
    let out = mha(&mut t, q, kv, kv, &p).unwrap();
    // q' = [1, 2]; keys [0.5, 1], [1, 0]; scores 2.5/√2, 1/√2.
    let (s0, s1) = (2.5f64 / 2f64.sqrt(), 1.0 / 2f64.sqrt());
    let w0 = 1.0 / (1.0 + (s1 - s0).exp());
    let w1 = 1.0 - w0;
    let expect = [w0 * 1.0 + w1 * 2.0, w0 * -1.0 + w1 * 0.5];
    for j in 0..2 {
        assert!((t.value(out).data()[j] as f64 - expect[j]).abs() < 1e-6);
    }
}

#[test]
fn mlp_examples() {
    let mut t = Tape::new();
    let z = |t: &mut Tape, s: &[usize]| t.constant(Tensor::zeros(s.to_vec()));
    let p = MlpVars { w1: z(&mut t, &[3, 6]), b1: z(&mut t, &[6]), w2: z(&mut t, &[6, 3]), b2: z(&mut t, &[3]) };
    let x = t.constant(Tensor::from_fn([4, 3], |i| i as f32 - 5.0));
    let y = mlp(&mut t, x, &p).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));

    let mut eye36 = Tensor::zeros([3, 6]);
    let mut eye63 = Tensor::zeros([6, 3]);
    for i in 0..3 {
        eye36.data_mut()[i * 6 + i] = 1.0;
        eye63.data_mut()[i * 3 + i] = 1.0;
    }
    let p = MlpVars { w1: t.constant(eye36), b1: p.b1, w2: t.constant(eye63), b2: p.b2 };
    let xs = [0.1f32, 0.7, 2.5];
    let x = t.constant(Tensor::from_rows(&[xs]));
    let y = mlp(&mut t, x, &p).unwrap();
    for (j, &v) in xs.iter().enumerate() {
        assert!((t.value(y).data()[j] as f64 - gelu_ref(v as f64)).abs() < 1e-5);
    }
}

#[test]
fn positional_encoding_at_origin() {
    let pe = positional_encoding(&[(0.0, 0.0), (0.3, 0.8), (0.3, 0.8)], 8).unwrap();
    let d = pe.data();
    assert_eq!(&d[..8], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    assert_eq!(&d[8..16], &d[16..24]);
    assert!(positional_encoding(&[(0.1, 0.2)], 7).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed: u64, mag in prop_oneof![Just(1.0f32), Just(100.0), Just(1e4)]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn([rows, cols], |_| rng.gen_range(-mag..mag)));
        let s = t.softmax_rows(x).unwrap();
        for r in t.value(s).data().chunks(cols) {
            prop_assert!(r.iter().all(|&v| v >= 0.0));
            prop_assert!((r.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_is_associative(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new();
        let a = t.constant(rand_tensor(&[4, 4], &mut rng));
        let b = t.constant(rand_tensor(&[4, 4], &mut rng));
        let c = t.constant(rand_tensor(&[4, 4], &mut rng));
        let ab = t.matmul(a, b).unwrap();
        let l = t.matmul(ab, c).unwrap();
        let bc = t.matmul(b, c).unwrap();
        let r = t.matmul(a, bc).unwrap();
        let scale = t.value(l).data().iter().fold(1f32, |m, v| m.max(v.abs()));
        prop_assert!(t.value(l).max_abs_diff(t.value(r)) / scale < 1e-4);
    }

    #[test]
    fn single_query_attention_ignores_key_order(seed: u64, n in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new();
        let p = attention(&mut t, 4, 2, &mut rng);
        let q = t.constant(rand_tensor(&[1, 4], &mut rng));
        let kv0 = rand_tensor(&[n, 4], &mut rng);
        let mut rows: Vec<&[f32]> = kv0.data().chunks(4).collect();
        rows.reverse();
        rows.rotate_left(1);
        let kv1 = Tensor::new([n, 4], rows.concat()).unwrap();
        let a = t.constant(kv0);
        let b = t.constant(kv1);
        let ya = mha(&mut t, q, a, a, &p).unwrap();
        let yb = mha(&mut t, q, b, b, &p).unwrap();
        prop_assert!(t.value(ya).max_abs_diff(t.value(yb)) < 1e-5);
    }

    #[test]
    fn mlp_permutes_with_rows(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new();
        let p = MlpVars {
            w1: t.constant(rand_tensor(&[3, 8], &mut rng)),
            b1: t.constant(rand_tensor(&[8], &mut rng)),
            w2: t.constant(rand_tensor(&[8, 3], &mut rng)),
            b2: t.constant(rand_tensor(&[3], &mut rng)),
        };
        let x0 = rand_tensor(&[4, 3], &mut rng);
        let d = x0.data();
        let x1 = Tensor::new([4, 3], [&d[9..12], &d[0..3], &d[6..9], &d[3..6]].concat()).unwrap();
        let a = t.constant(x0);
        let b = t.constant(x1);
        let ya = mlp(&mut t, a, &p).unwrap();
        let yb = mlp(&mut t, b, &p).unwrap();
        let (ya, yb) = (t.value(ya).data(), t.value(yb).data());
        for (i, j) in [(0, 1), (1, 3), (2, 2), (3, 0)] {
            prop_assert_eq!(&ya[i * 3..i * 3 + 3], &yb[j * 3..j * 3 + 3]);
        }
    }

    #[test]
    fn positional_encoding_is_bounded(x in 0f32..=1.0, y in 0f32..=1.0, half in 1usize..33) {
        let pe = positional_encoding(&[(x, y)], 2 * half).unwrap();
        prop_assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn mha_gradients_on_three_seeds() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> =
            [[3usize, 4], [5, 4], [4, 4], [4, 4], [4, 4], [4, 4]].iter().map(|s| rand_tensor(s, &mut rng)).collect();
        let f = |t: &mut Tape, v: &[Var]| {
            let p = AttentionVars { wq: v[2], wk: v[3], wv: v[4], wo: v[5], heads: 2 };
            let y = mha(t, v[0], v[1], v[1], &p)?;
            let y = t.mul(y, y)?;
            Ok(t.sum(y))
        };
        let r = grad_check(f, &inputs, 1e-3, 1e-3).unwrap();
        assert!(r.pass, "seed {seed}: {r:?}");
    }
}
