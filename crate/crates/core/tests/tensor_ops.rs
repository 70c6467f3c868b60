use polar_layout_core::rng;
use polar_layout_core::tensor::gradcheck::{grad_check, GradCheckConfig};
use polar_layout_core::tensor::{Activation, PairConvention, Tape, Tensor, Var, IGNORE_INDEX};
use polar_layout_core::Error;
use proptest::prelude::*;
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, 99, 0);
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

fn triple_loop(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

#[test]
fn matmul_identity_and_scalar() {
    let mut t = Tape::new();
    let eye = t.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let x = t.constant(random(&[3, 5], 1));
    let y = t.matmul(eye, x).unwrap();
    assert_eq!(t.value(y), t.value(x));

    let a = t.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
    let b = t.constant(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[6.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    for (seed, (m, k, n)) in [(4, 5, 3), (32, 32, 32), (1, 17, 9), (13, 2, 31)].into_iter().enumerate() {
        let a = random(&[m, k], 10 + seed as u64);
        let b = random(&[k, n], 20 + seed as u64);
        let want = triple_loop(m, k, n, a.data(), b.data());
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a), t.constant(b));
        let c = t.matmul(va, vb).unwrap();
        for (x, y) in t.value(c).data().iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[4, 5]));
    match t.matmul(a, b) {
        Err(Error::Shape { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![4, 5]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let cases: [(&[f64], &[f64]); 3] = [
        (&[0.0, 0.0], &[0.5, 0.5]),
        (&[1000.0, 1000.0], &[0.5, 0.5]),
        (&[0.0, 3f64.ln()], &[0.25, 0.75]),
    ];
    for (input, want) in cases {
        let x = t.constant(Tensor::new(vec![2], input.to_vec()).unwrap());
        let y = t.softmax(x).unwrap();
        for (a, b) in t.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{input:?}: {a} vs {b}");
        }
    }
}

#[test]
fn softmax_large_magnitude_is_stable() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![2, 3], vec![1e4, -1e4, 0.0, -1e4, -1e4, -9999.0]).unwrap());
    let y = t.softmax(x).unwrap();
    let v = t.value(y);
    assert!(v.all_finite());
    for r in 0..2 {
        let s: f64 = v.data()[r * 3..r * 3 + 3].iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn masked_softmax_rejects_fully_masked_rows() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[2, 2]));
    let err = t.masked_softmax(x, Some(&[false, false]), 2).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
    let ok = t.masked_softmax(x, Some(&[true, false]), 2).unwrap();
    assert_eq!(t.value(ok).data(), &[1.0, 0.0, 1.0, 0.0]);
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::new();
    let g = t.constant(Tensor::full(&[3], 1.0));
    let b = t.constant(Tensor::zeros(&[3]));
    let x = t.constant(Tensor::new(vec![3], vec![5.0, 5.0, 5.0]).unwrap());
    let y = t.layer_norm(x, g, b, 1e-12).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);

    let g2 = t.constant(Tensor::full(&[2], 1.0));
    let b2 = t.constant(Tensor::zeros(&[2]));
    let x2 = t.constant(Tensor::new(vec![2], vec![-1.0, 1.0]).unwrap());
    let y2 = t.layer_norm(x2, g2, b2, 1e-300).unwrap();
    assert_eq!(t.value(y2).data(), &[-1.0, 1.0]);

    assert!(t.layer_norm(x2, g2, b2, 0.0).is_err());
}

#[test]
fn layer_norm_matches_direct_formula() {
    let x = random(&[4, 7], 3);
    let gain = random(&[7], 4);
    let bias = random(&[7], 5);
    let eps = 1e-5;
    let mut t = Tape::new();
    let (vx, vg, vb) = (t.constant(x.clone()), t.constant(gain.clone()), t.constant(bias.clone()));
    let y = t.layer_norm(vx, vg, vb, eps).unwrap();
    for r in 0..4 {
        let row = &x.data()[r * 7..r * 7 + 7];
        let mean = row.iter().sum::<f64>() / 7.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        for (c, &xc) in row.iter().enumerate() {
            let want = (xc - mean) / (var + eps).sqrt() * gain.data()[c] + bias.data()[c];
            assert!((t.value(y).data()[r * 7 + c] - want).abs() < 1e-10);
        }
    }
}

#[test]
fn gelu_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![3], vec![0.0, 10.0, 1.0]).unwrap());
    let y = t.gelu(x, Activation::Exact);
    let v = t.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 10.0).abs() < 1e-6);
    // x * Phi(x) at 1 with Phi from the error function: 0.5 * (1 + erf(1/sqrt 2))
    assert!((v[2] - 0.841_344_746_068_542_9).abs() < 1e-12);
    assert!((v[2] - 0.841345).abs() < 1e-6);

    let yt = t.gelu(x, Activation::Tanh);
    assert!((t.value(yt).data()[2] - 0.841345).abs() < 1e-3);
}

#[test]
fn embedding_lookup_gathers_and_scatters() {
    let table = random(&[6, 4], 7);
    let ids = [0usize, 3, 3, 5, 1];
    let mut t = Tape::new();
    let vt = t.param(table.clone());
    let rows = t.gather_rows(vt, &ids).unwrap();
    for (r, &id) in ids.iter().enumerate() {
        assert_eq!(&t.value(rows).data()[r * 4..r * 4 + 4], &table.data()[id * 4..id * 4 + 4]);
    }
    let s = t.sum(rows);
    t.backward(s).unwrap();
    let g = t.grad(vt).unwrap();
    // row 3 appears twice, rows 2 and 4 never
    assert_eq!(&g[12..16], &[2.0; 4]);
    assert_eq!(&g[8..12], &[0.0; 4]);
    assert_eq!(&g[0..4], &[1.0; 4]);

    match t.gather_rows(vt, &[6]) {
        Err(Error::Index { id, size }) => assert_eq!((id, size), (6, 6)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn cross_entropy_examples() {
    let mut t = Tape::new();
    let uniform = t.constant(Tensor::zeros(&[2, 7]));
    let l = t.cross_entropy(uniform, &[3, 6], IGNORE_INDEX).unwrap();
    assert!((t.value(l).item() - 7f64.ln()).abs() < 1e-14);

    let mut prev = f64::INFINITY;
    for margin in [1.0, 5.0, 20.0, 60.0] {
        let x = t.constant(Tensor::new(vec![1, 3], vec![0.0, margin, 0.0]).unwrap());
        let l = t.cross_entropy(x, &[1], IGNORE_INDEX).unwrap();
        let v = t.value(l).item();
        assert!(v < prev);
        prev = v;
    }
    assert!(prev < 1e-20);

    let all_ignored = t.cross_entropy(uniform, &[IGNORE_INDEX, IGNORE_INDEX], IGNORE_INDEX).unwrap();
    assert_eq!(t.value(all_ignored).item(), 0.0);
}

#[test]
fn cross_entropy_matches_log_sum_exp_oracle() {
    let logits = random(&[3, 5], 11);
    let targets = [4usize, IGNORE_INDEX, 0];
    let mut want = 0.0;
    let mut count = 0.0;
    for (r, &tg) in targets.iter().enumerate() {
        if tg == IGNORE_INDEX {
            continue;
        }
        let row = &logits.data()[r * 5..r * 5 + 5];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        want += lse - row[tg];
        count += 1.0;
    }
    want /= count;
    let mut t = Tape::new();
    let v = t.constant(logits);
    let l = t.cross_entropy(v, &targets, IGNORE_INDEX).unwrap();
    assert!((t.value(l).item() - want).abs() < 1e-10);
}

#[test]
fn backward_examples() {
    let x = random(&[3, 4], 12);
    let mut t = Tape::new();
    let v = t.param(x.clone());
    let s = t.sum(v);
    t.backward(s).unwrap();
    assert!(t.grad(v).unwrap().iter().all(|&g| g == 1.0));

    let mut t = Tape::new();
    let v = t.param(x.clone());
    let sq = t.mul(v, v).unwrap();
    let s = t.sum(sq);
    let half = t.scale(s, 0.5);
    t.backward(half).unwrap();
    assert_eq!(t.grad(v).unwrap(), x.data());

    // unreachable tensors keep zero gradients
    let mut t = Tape::new();
    let used = t.param(x.clone());
    let unused = t.param(x.clone());
    let s = t.sum(used);
    t.backward(s).unwrap();
    assert!(t.grad(unused).is_none());
    assert!(t.grad_tensor(unused).data().iter().all(|&g| g == 0.0));

    // non-scalar loss
    let mut t = Tape::new();
    let v = t.param(x);
    assert!(matches!(t.backward(v), Err(Error::Contract(_))));
}

#[test]
fn backward_is_linear_in_the_loss() {
    let x = random(&[5], 13);
    let run = |which: u8| {
        let mut t = Tape::new();
        let v = t.param(x.clone());
        let sq = t.mul(v, v).unwrap();
        let l1 = t.sum(sq);
        let g = t.gelu(v, Activation::Exact);
        let l2 = t.sum(g);
        let loss = match which {
            1 => l1,
            2 => l2,
            _ => t.add(l1, l2).unwrap(),
        };
        t.backward(loss).unwrap();
        t.grad(v).unwrap().to_vec()
    };
    let (g1, g2, g12) = (run(1), run(2), run(3));
    for i in 0..5 {
        assert!((g1[i] + g2[i] - g12[i]).abs() < 1e-14);
    }
}

#[test]
fn split_and_merge_heads_are_inverse() {
    let x = random(&[2 * 3, 8], 14);
    let mut t = Tape::new();
    let v = t.param(x.clone());
    let s = t.split_heads(v, 2, 3, 4).unwrap();
    assert_eq!(t.shape(s), &[8, 3, 2]);
    let m = t.merge_heads(s, 2, 3, 4).unwrap();
    assert_eq!(t.value(m), &x);
}

#[test]
fn gather_pairs_conventions() {
    // one batch, one head, seq 2, width 3
    let src = Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]).unwrap();
    let bins = [0usize, 1, 2, 0];
    let mut t = Tape::new();
    let v = t.constant(src);
    let ctx = t.gather_pairs(v, &bins, 1, PairConvention::Context).unwrap();
    // (i,j) reads row j
    assert_eq!(t.value(ctx).data(), &[1.0, 20.0, 3.0, 10.0]);
    let own = t.gather_pairs(v, &bins, 1, PairConvention::Own).unwrap();
    // (i,j) reads row i
    assert_eq!(t.value(own).data(), &[1.0, 2.0, 30.0, 10.0]);
    assert!(matches!(
        t.gather_pairs(v, &[0, 3, 0, 0], 1, PairConvention::Context),
        Err(Error::Index { id: 3, size: 3 })
    ));
}

#[test]
fn dropout_zero_is_identity_and_scales_otherwise() {
    let x = Tensor::full(&[1000], 1.0);
    let mut t = Tape::new();
    let v = t.param(x);
    let mut r = rng::stream(1, rng::domain::DROPOUT, 0);
    assert_eq!(t.dropout(v, 0.0, &mut r).unwrap(), v);
    let d = t.dropout(v, 0.25, &mut r).unwrap();
    let vals = t.value(d).data();
    assert!(vals.iter().all(|&x| x == 0.0 || (x - 4.0 / 3.0).abs() < 1e-15));
    let kept = vals.iter().filter(|&&x| x > 0.0).count();
    assert!((650..850).contains(&kept));
    assert!(t.dropout(v, 1.0, &mut r).is_err());
}

// ---- composed gradient checks ----------------------------------------------

#[derive(Debug, Clone, Copy)]
enum Step {
    Gelu,
    Tanh,
    LayerNorm,
    Softmax,
    MatMul,
    MatMulNt,
    Mul,
    AddBias,
    Scale,
}

fn apply(t: &mut Tape, x: Var, aux: &[Var], step: Step) -> Var {
    match step {
        Step::Gelu => t.gelu(x, Activation::Exact),
        Step::Tanh => t.gelu(x, Activation::Tanh),
        Step::LayerNorm => t.layer_norm(x, aux[1], aux[2], 1e-5).unwrap(),
        Step::Softmax => t.softmax(x).unwrap(),
        Step::MatMul => t.matmul(x, aux[0]).unwrap(),
        Step::MatMulNt => t.matmul_nt(x, aux[0]).unwrap(),
        Step::Mul => t.mul(x, x).unwrap(),
        Step::AddBias => t.add_bias(x, aux[1]).unwrap(),
        Step::Scale => t.scale(x, -1.7),
    }
}

fn step_strategy() -> impl Strategy<Value = Step> {
    prop_oneof![
        Just(Step::Gelu),
        Just(Step::Tanh),
        Just(Step::LayerNorm),
        Just(Step::Softmax),
        Just(Step::MatMul),
        Just(Step::MatMulNt),
        Just(Step::Mul),
        Just(Step::AddBias),
        Just(Step::Scale),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composed_ops_pass_grad_check(steps in proptest::collection::vec(step_strategy(), 1..=4), rows in 1usize..4, d in 2usize..5, seed in 0u64..1000) {
        let mut params = vec![
            ("x".to_string(), random(&[rows, d], seed)),
            ("w".to_string(), random(&[d, d], seed + 1)),
            ("gain".to_string(), random(&[d], seed + 2)),
            ("bias".to_string(), random(&[d], seed + 3)),
            ("probe".to_string(), random(&[rows, d], seed + 4)),
        ];
        let cfg = GradCheckConfig { eps: 1e-5, tol: 1e-5, floor: 1e-4, ..Default::default() };
        let report = grad_check(&mut params, &cfg, |t, v| {
            let mut h = v[0];
            for &s in &steps {
                h = apply(t, h, &v[1..4], s);
            }
            let weighted = t.mul(h, v[4])?;
            Ok(t.sum(weighted))
        }).unwrap();
        prop_assert!(report.passed(), "{:?} {:?}", steps, report.worst());
    }

    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-1e4f64..1e4, 1..24)) {
        let mut t = Tape::new();
        let n = values.len();
        let x = t.constant(Tensor::new(vec![n], values).unwrap());
        let y = t.softmax(x).unwrap();
        let v = t.value(y);
        prop_assert!(v.data().iter().all(|&p| p >= 0.0 && p.is_finite()));
        prop_assert!((v.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn matmul_agrees_with_oracle(m in 1usize..=32, k in 1usize..=32, n in 1usize..=32, seed in 0u64..100) {
        let a = random(&[m, k], seed);
        let b = random(&[k, n], seed + 500);
        let want = triple_loop(m, k, n, a.data(), b.data());
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a), t.constant(b));
        let c = t.matmul(va, vb).unwrap();
        for (x, y) in t.value(c).data().iter().zip(&want) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_building_blocks_pass_grad_check() {
    // batched matmuls, head split/merge, pair gather, masked softmax, cross entropy
    let (batch, seq, heads, d, width) = (2usize, 3usize, 2usize, 4usize, 3usize);
    let bins: Vec<usize> = (0..batch * seq * seq).map(|i| (i * 7 + 1) % width).collect();
    let keep = [true, true, false, true, true, true];
    let mut params = vec![
        ("x".to_string(), random(&[batch * seq, d], 40)),
        ("wq".to_string(), random(&[d, d], 41)),
        ("table".to_string(), random(&[width, d / heads], 42)),
        ("head".to_string(), random(&[d, 5], 43)),
    ];
    for convention in [PairConvention::Context, PairConvention::Own] {
        let cfg = GradCheckConfig::default();
        let report = grad_check(&mut params, &cfg, |t, v| {
            let q = t.matmul(v[0], v[1])?;
            let qh = t.split_heads(q, batch, seq, heads)?;
            let scores = t.matmul_nt(qh, qh)?;
            let flat = t.reshape(qh, &[batch * heads * seq, d / heads])?;
            let qd = t.matmul_nt(flat, v[2])?;
            let qd = t.reshape(qd, &[batch * heads, seq, width])?;
            let bias = t.gather_pairs(qd, &bins, heads, convention)?;
            let s = t.add(scores, bias)?;
            let p = t.masked_softmax(s, Some(&keep), heads * seq)?;
            let o = t.matmul(p, qh)?;
            let merged = t.merge_heads(o, batch, seq, heads)?;
            let logits = t.matmul(merged, v[3])?;
            t.cross_entropy(logits, &[0, 4, IGNORE_INDEX, 2, 2, 1], IGNORE_INDEX)
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }
}
