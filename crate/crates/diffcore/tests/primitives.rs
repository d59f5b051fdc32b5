use diffcore::{
    conv_upsample_block, grad_check, multi_head_attention, AttentionOverride, AttentionParams, AttentionScale,
    ConvParams, DiffError, Graph, Init, ParamId, ParamStore, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero, for checks through |x| or max(0, x).
fn random_off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn store_with(tensors: Vec<(&str, Tensor<f64>)>) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut s = ParamStore::new();
    let mut ids = Vec::new();
    for (name, t) in tensors {
        let id = s.add(name, t.shape(), Init::Zeros).unwrap();
        *s.value_mut(id) = t;
        ids.push(id);
    }
    (s, ids)
}

/// Weighted sum with fixed pseudo-random weights so every output entry matters.
fn readout(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var, DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(g.shape(y), &mut rng);
    let c = g.constant(w);
    let m = g.mul(y, c)?;
    Ok(g.sum(m))
}

fn check_primitive<F>(name: &str, build_store: impl Fn(&mut ChaCha8Rng) -> (ParamStore<f64>, Vec<ParamId>), f: F)
where
    F: for<'a> Fn(&mut Graph<'a, f64>, &[ParamId]) -> Result<Var, DiffError>,
{
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut store, ids) = build_store(&mut rng);
        let report = grad_check(&mut store, EPS, |g| {
            let y = f(g, &ids)?;
            readout(g, y, seed)
        })
        .unwrap();
        assert!(report.coords > 0);
        worst = worst.max(report.max_rel_error);
        assert!(
            report.max_rel_error < TOL,
            "{name} seed {seed}: rel err {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }
    println!("{name}: max rel err over {SEEDS} seeds = {worst:.3e}");
}

fn params(g: &mut Graph<'_, f64>, ids: &[ParamId]) -> Vec<Var> {
    ids.iter().map(|&id| g.param(id)).collect()
}

#[test]
fn linear_with_bias() {
    check_primitive(
        "linear",
        |r| store_with(vec![("x", random(&[5, 4], r)), ("w", random(&[4, 3], r)), ("b", random(&[3], r))]),
        |g, ids| {
            let v = params(g, ids);
            g.linear(v[0], v[1], Some(v[2]))
        },
    );
}

#[test]
fn conv3x3_stride1() {
    check_primitive(
        "conv3x3 s1",
        |r| store_with(vec![("x", random(&[5, 4, 3], r)), ("w", random(&[3, 3, 3, 2], r)), ("b", random(&[2], r))]),
        |g, ids| {
            let v = params(g, ids);
            g.conv2d(v[0], v[1], Some(v[2]), 1)
        },
    );
}

#[test]
fn conv3x3_stride2() {
    check_primitive(
        "conv3x3 s2",
        |r| store_with(vec![("x", random(&[6, 5, 2], r)), ("w", random(&[3, 3, 2, 3], r)), ("b", random(&[3], r))]),
        |g, ids| {
            let v = params(g, ids);
            g.conv2d(v[0], v[1], Some(v[2]), 2)
        },
    );
}

#[test]
fn conv1x1() {
    check_primitive(
        "conv1x1",
        |r| store_with(vec![("x", random(&[3, 4, 3], r)), ("w", random(&[1, 1, 3, 2], r)), ("b", random(&[2], r))]),
        |g, ids| {
            let v = params(g, ids);
            g.conv2d(v[0], v[1], Some(v[2]), 1)
        },
    );
}

#[test]
fn upsample2x() {
    check_primitive(
        "upsample2x",
        |r| store_with(vec![("x", random(&[3, 2, 2], r))]),
        |g, ids| {
            let x = g.param(ids[0]);
            g.upsample2x(x)
        },
    );
}

#[test]
fn layer_norm() {
    check_primitive(
        "layer_norm",
        |r| store_with(vec![("x", random(&[4, 6], r)), ("g", random(&[6], r)), ("b", random(&[6], r))]),
        |g, ids| {
            let v = params(g, ids);
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        },
    );
}

#[test]
fn gelu() {
    check_primitive(
        "gelu",
        |r| store_with(vec![("x", Tensor::from_fn(&[12], |_| r.gen_range(-3.0..3.0)))]),
        |g, ids| {
            let x = g.param(ids[0]);
            Ok(g.gelu(x))
        },
    );
}

#[test]
fn softmax_each_axis() {
    for axis in 0..3 {
        check_primitive(
            "softmax",
            |r| store_with(vec![("x", random(&[3, 4, 2], r))]),
            |g, ids| {
                let x = g.param(ids[0]);
                g.softmax(x, axis)
            },
        );
    }
}

#[test]
fn elementwise_add_sub_mul() {
    check_primitive(
        "add/sub/mul",
        |r| store_with(vec![("a", random(&[3, 3], r)), ("b", random(&[3, 3], r))]),
        |g, ids| {
            let v = params(g, ids);
            let s = g.add(v[0], v[1])?;
            let d = g.sub(v[0], v[1])?;
            g.mul(s, d)
        },
    );
}

#[test]
fn scale_offset_and_sub_scalar() {
    check_primitive(
        "scale/offset/sub_scalar",
        |r| store_with(vec![("x", random(&[5], r)), ("s", random(&[1], r))]),
        |g, ids| {
            let v = params(g, ids);
            let a = g.scale(v[0], -1.7);
            let b = g.offset(a, 0.3);
            g.sub_scalar(b, v[1])
        },
    );
}

#[test]
fn global_average_pool() {
    check_primitive(
        "global_avg_pool",
        |r| store_with(vec![("x", random(&[3, 4, 5], r))]),
        |g, ids| {
            let x = g.param(ids[0]);
            g.global_avg_pool(x)
        },
    );
}

#[test]
fn concat_each_axis() {
    for axis in 0..2 {
        check_primitive(
            "concat",
            |r| {
                let (a, b) = if axis == 0 { ([2, 3], [4, 3]) } else { ([3, 2], [3, 4]) };
                store_with(vec![("a", random(&a, r)), ("b", random(&b, r))])
            },
            |g, ids| {
                let v = params(g, ids);
                g.concat(&v, axis)
            },
        );
    }
}

#[test]
fn reshape_transpose_narrow() {
    check_primitive(
        "reshape/transpose/narrow",
        |r| store_with(vec![("x", random(&[2, 6], r))]),
        |g, ids| {
            let x = g.param(ids[0]);
            let y = g.reshape(x, &[3, 4])?;
            let t = g.transpose(y)?;
            g.narrow(t, 1, 1, 2)
        },
    );
}

#[test]
fn matmul_all_transposes() {
    for ta in [false, true] {
        for tb in [false, true] {
            check_primitive(
                "matmul",
                |r| {
                    let a = if ta { [4, 3] } else { [3, 4] };
                    let b = if tb { [2, 4] } else { [4, 2] };
                    store_with(vec![("a", random(&a, r)), ("b", random(&b, r))])
                },
                |g, ids| {
                    let v = params(g, ids);
                    g.matmul(v[0], v[1], ta, tb)
                },
            );
        }
    }
}

#[test]
fn repeat_rows() {
    check_primitive(
        "repeat_rows",
        |r| store_with(vec![("x", random(&[4], r))]),
        |g, ids| {
            let x = g.param(ids[0]);
            g.repeat_rows(x, 3)
        },
    );
}

#[test]
fn sigmoid_softplus() {
    check_primitive(
        "sigmoid/softplus",
        |r| store_with(vec![("x", Tensor::from_fn(&[10], |_| r.gen_range(-4.0..4.0)))]),
        |g, ids| {
            let x = g.param(ids[0]);
            let s = g.sigmoid(x);
            let p = g.softplus(x);
            g.add(s, p)
        },
    );
}

#[test]
fn relu_abs_away_from_kinks() {
    check_primitive(
        "relu/abs",
        |r| store_with(vec![("x", random_off_kink(&[10], r))]),
        |g, ids| {
            let x = g.param(ids[0]);
            let a = g.relu(x);
            let b = g.abs(x);
            let b = g.scale(b, 0.5);
            g.add(a, b)
        },
    );
}

#[test]
fn pick_min_mean() {
    check_primitive(
        "pick/min_all/mean",
        |r| store_with(vec![("x", random(&[7], r))]),
        |g, ids| {
            let x = g.param(ids[0]);
            let p = g.pick(x, 3)?;
            let m = g.min_all(x)?;
            let a = g.mean(x);
            let pm = g.add(p, m)?;
            g.add(pm, a)
        },
    );
}

fn attention_store(d: usize, heads: usize, seed: u64) -> (ParamStore<f64>, AttentionParams, ParamId) {
    let mut s = ParamStore::new();
    let p = AttentionParams::register(&mut s, "attn", d, heads).unwrap();
    let x = s.add("tokens", &[5, d], Init::FanInUniform { fan_in: 1 }).unwrap();
    s.initialize(seed);
    (s, p, x)
}

#[test]
fn multi_head_attention_gradients() {
    for scale in [AttentionScale::InvSqrtD, AttentionScale::InvD] {
        for seed in 0..SEEDS {
            let (mut s, p, x) = attention_store(8, 2, seed);
            let report = grad_check(&mut s, EPS, |g| {
                let t = g.param(x);
                let out = multi_head_attention(g, t, &p, scale, AttentionOverride::None)?;
                readout(g, out.out, seed)
            })
            .unwrap();
            assert!(report.max_rel_error < TOL, "seed {seed}: {report:?}");
        }
    }
}

#[test]
fn attention_rejects_indivisible_width() {
    let mut s = ParamStore::<f64>::new();
    assert!(matches!(AttentionParams::register(&mut s, "a", 6, 4), Err(DiffError::DimMismatch(_))));
}

#[test]
fn single_token_attention_is_output_projection_of_value() {
    let mut s = ParamStore::<f64>::new();
    let p = AttentionParams::register(&mut s, "attn", 4, 2).unwrap();
    s.initialize(3);
    let mut g = Graph::new(&s);
    let t = g.constant(Tensor::new(&[1, 4], vec![0.3, -0.2, 0.9, 0.1]).unwrap());
    let out = multi_head_attention(&mut g, t, &p, AttentionScale::InvSqrtD, AttentionOverride::None).unwrap();
    for pr in &out.probs {
        assert_eq!(g.value(*pr).data(), &[1.0]);
    }
    let v = p.v.apply(&mut g, t).unwrap();
    let expect = p.out.apply(&mut g, v).unwrap();
    for (a, b) in g.value(out.out).data().iter().zip(g.value(expect).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn two_token_attention_matches_hand_computation() {
    // d = 2, one head, identity projections for Q, K, V and output, no bias.
    let mut s = ParamStore::<f64>::new();
    let p = AttentionParams::register(&mut s, "attn", 2, 1).unwrap();
    s.initialize(0);
    for lin in [p.q, p.k, p.v, p.out] {
        *s.value_mut(lin.w) = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        if let Some(b) = lin.b {
            *s.value_mut(b) = Tensor::zeros(&[2]);
        }
    }
    let x = [[1.0, 0.0], [0.5, 2.0]];
    let mut g = Graph::new(&s);
    let t = g.constant(Tensor::new(&[2, 2], vec![x[0][0], x[0][1], x[1][0], x[1][1]]).unwrap());
    let out = multi_head_attention(&mut g, t, &p, AttentionScale::InvSqrtD, AttentionOverride::None).unwrap();

    // By hand: logits_ij = <x_i, x_j> / sqrt(2), softmax per row, then weights · x.
    let sc = 1.0 / 2f64.sqrt();
    let dot = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
    let mut want = Vec::new();
    for i in 0..2 {
        let l0 = dot(x[i], x[0]) * sc;
        let l1 = dot(x[i], x[1]) * sc;
        let (e0, e1) = (l0.exp(), l1.exp());
        let (w0, w1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        want.push(w0 * x[0][0] + w1 * x[1][0]);
        want.push(w0 * x[0][1] + w1 * x[1][1]);
    }
    for (a, b) in g.value(out.out).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn attention_is_permutation_equivariant() {
    let (s, p, _) = attention_store(8, 2, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tokens = random(&[5, 8], &mut rng);
    let perm = [3usize, 0, 4, 1, 2];
    let permuted = Tensor::from_fn(&[5, 8], |i| tokens.data()[perm[i / 8] * 8 + i % 8]);

    let mut g = Graph::new(&s);
    let a = g.constant(tokens);
    let b = g.constant(permuted);
    let ya = multi_head_attention(&mut g, a, &p, AttentionScale::InvSqrtD, AttentionOverride::None).unwrap().out;
    let yb = multi_head_attention(&mut g, b, &p, AttentionScale::InvSqrtD, AttentionOverride::None).unwrap().out;
    let (ya, yb) = (g.value(ya).data(), g.value(yb).data());
    for i in 0..5 {
        for j in 0..8 {
            assert!((yb[i * 8 + j] - ya[perm[i] * 8 + j]).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_rows_are_distributions() {
    let s = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for axis in 0..3 {
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::from_fn(&[4, 5, 3], |_| rng.gen_range(-20.0..20.0)));
        let y = g.softmax(x, axis).unwrap();
        let v = g.value(y);
        assert!(v.data().iter().all(|&p| p >= 0.0));
        let shape = v.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let total: f64 = (0..shape[axis]).map(|j| v.data()[(o * shape[axis] + j) * inner + i]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn layer_norm_standardizes_each_token() {
    let mut s = ParamStore::<f64>::new();
    let gamma = s.add("g", &[16], Init::Ones).unwrap();
    let beta = s.add("b", &[16], Init::Zeros).unwrap();
    s.initialize(0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new(&s);
    let x = g.constant(Tensor::from_fn(&[6, 16], |_| rng.gen_range(-3.0..5.0)));
    let (gv, bv) = (g.param(gamma), g.param(beta));
    let y = g.layer_norm(x, gv, bv, 1e-12).unwrap();
    for row in g.value(y).data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-8);
    }
}

#[test]
fn conv_upsample_block_shapes() {
    let mut s = ParamStore::<f32>::new();
    let conv = ConvParams::register(&mut s, "blk", 3, 256, 128, 1).unwrap();
    s.initialize(0);
    let mut g = Graph::new(&s);
    let x = g.constant(Tensor::zeros(&[14, 14, 256]));
    let y = conv_upsample_block(&mut g, x, &conv, true).unwrap();
    assert_eq!(g.shape(y), &[28, 28, 128]);
    let bad = g.constant(Tensor::zeros(&[14, 14, 8]));
    assert!(matches!(conv_upsample_block(&mut g, bad, &conv, true), Err(DiffError::DimMismatch(_))));
}

#[test]
fn conv_upsample_block_identity_kernel_duplicates_pixels() {
    let mut s = ParamStore::<f64>::new();
    let conv = ConvParams::register(&mut s, "blk", 3, 1, 1, 1).unwrap();
    s.initialize(0);
    let mut k = Tensor::zeros(&[3, 3, 1, 1]);
    k.data_mut()[4] = 1.0;
    *s.value_mut(conv.w) = k;
    let mut g = Graph::new(&s);
    let x = g.constant(Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = conv_upsample_block(&mut g, x, &conv, false).unwrap();
    let want = [1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.];
    assert_eq!(g.value(y).data(), &want);
}

#[test]
fn conv_upsample_block_gradients() {
    for seed in 0..SEEDS {
        let mut s = ParamStore::<f64>::new();
        let conv = ConvParams::register(&mut s, "blk", 3, 2, 1, 1).unwrap();
        let x = s.add("x", &[4, 4, 2], Init::FanInUniform { fan_in: 1 }).unwrap();
        s.initialize(seed);
        let report = grad_check(&mut s, EPS, |g| {
            let xv = g.param(x);
            let y = conv_upsample_block(g, xv, &conv, true)?;
            readout(g, y, seed)
        })
        .unwrap();
        assert!(report.max_rel_error < TOL, "seed {seed}: {report:?}");
    }
}

#[test]
fn grad_check_is_exact_for_linear_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut s, ids) = store_with(vec![("w", random(&[3, 2], &mut rng))]);
    let x = random(&[4, 3], &mut rng);
    let report = grad_check(&mut s, EPS, |g| {
        let w = g.param(ids[0]);
        let xv = g.constant(x.clone());
        let y = g.linear(xv, w, None)?;
        Ok::<_, DiffError>(g.sum(y))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-9, "{report:?}");
}

#[test]
fn grad_check_constant_objective_is_zero_both_ways() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut s, ids) = store_with(vec![("w", random(&[3], &mut rng))]);
    let report = grad_check(&mut s, EPS, |g| {
        let w = g.param(ids[0]);
        let z = g.scale(w, 0.0);
        let c = g.sum(z);
        Ok::<_, DiffError>(g.offset(c, 4.0))
    })
    .unwrap();
    assert_eq!(report.max_rel_error, 0.0);
}

#[test]
fn grad_check_reports_non_finite_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut s, ids) = store_with(vec![("w", random(&[2], &mut rng))]);
    let err = grad_check(&mut s, EPS, |g| {
        let w = g.param(ids[0]);
        let y = g.scale(w, f64::INFINITY);
        Ok::<_, DiffError>(g.sum(y))
    })
    .unwrap_err();
    assert!(matches!(err, DiffError::NonFiniteValue(_)));
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let (s, p, x) = attention_store(8, 4, 5);
    let run = || {
        let mut g = Graph::new(&s);
        let t = g.param(x);
        let out = multi_head_attention(&mut g, t, &p, AttentionScale::InvSqrtD, AttentionOverride::None).unwrap();
        let l = g.mean(out.out);
        let grads = g.backward(l).unwrap();
        (g.value(out.out).clone(), grads.param(p.q.w).unwrap().clone())
    };
    assert_eq!(run(), run());
}
