use diffcore::{grad_check, Graph, Init, ParamStore, Tensor, Var};
use placement::geometry::*;
use placement::loss::*;
use placement::{Error, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const W: usize = 20;
const H: usize = 16;
const C: usize = 6;
const N: usize = W * H * C;

fn dims() -> ImageDims {
    ImageDims::new(W, H).unwrap()
}

fn gt_at(x: usize, y: usize, z: usize) -> GroundTruth {
    let grid = ScaleGrid::linspace(0.15, 0.9, C).unwrap();
    let idx = GridIndex::new(x, y, z);
    GroundTruth { idx, bbox: box_from_index(idx, &grid, dims(), 1.0) }
}

fn spec() -> MarginSpec {
    MarginSpec { radius_x: 2, radius_y: 3, radius_z: 1, margin: 0.1 }
}

fn flat(x: usize, y: usize, z: usize) -> usize {
    GridIndex::new(x, y, z).flat(dims(), C)
}

fn in_hood(i: usize, gt: &GroundTruth, s: &MarginSpec) -> bool {
    let p = GridIndex::from_flat(i, dims(), C);
    p.x.abs_diff(gt.idx.x) <= s.radius_x && p.y.abs_diff(gt.idx.y) <= s.radius_y && p.z.abs_diff(gt.idx.z) <= s.radius_z
}

/// Evaluates `f` on `data` and returns the loss and its gradient w.r.t. the heatmap.
fn run(data: &[f64], f: impl Fn(&mut Graph<'_, f64>, Var) -> Result<Var>) -> (f64, Vec<f64>) {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let h = g.input(Tensor::new(&[H, W, C], data.to_vec()).unwrap(), true);
    let l = f(&mut g, h).unwrap();
    let v = g.value(l).item();
    let grads = g.backward(l).unwrap();
    let dh = grads.wrt(h).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; N]);
    (v, dh)
}

fn contrastive(data: &[f64], gt: &GroundTruth, red: Reduction) -> f64 {
    let m = margin_matrix(gt, dims(), C, &spec());
    run(data, |g, h| sparse_contrastive(g, h, &m, gt, dims(), C, red)).0
}

fn range(data: &[f64], gt: &GroundTruth) -> f64 {
    run(data, |g, h| range_loss(g, h, gt, dims(), C)).0
}

fn total(data: &[f64], gt: &GroundTruth, red: Reduction) -> f64 {
    let m = margin_matrix(gt, dims(), C, &spec());
    run(data, |g, h| total_loss(g, h, &m, gt, dims(), C, red)).0
}

fn assign(data: &[f64], gt: &GroundTruth, kind: AssignmentKind) -> f64 {
    run(data, |g, h| assignment_loss(g, h, gt, dims(), C, kind)).0
}

const GAUSS: AssignmentKind = AssignmentKind::Gaussian { sigma_xy: 3.0, sigma_z: 1.0 };

#[test]
fn margin_matrix_examples() {
    let gt = gt_at(10, 8, 3);
    let s = spec();
    let m = margin_matrix(&gt, dims(), C, &s);
    assert_eq!(m.len(), N);
    assert_eq!(m[flat(10, 8, 3)], 0.0);
    assert_eq!(m[flat(12, 8, 3)], 0.0);
    assert_eq!(m[flat(13, 8, 3)], 0.1);
    assert_eq!(m[flat(10, 11, 3)], 0.0);
    assert_eq!(m[flat(10, 12, 3)], 0.1);
    assert_eq!(m[flat(10, 8, 5)], 0.1);
    assert_eq!(m.iter().filter(|&&v| v == 0.0).count(), 5 * 7 * 3);
}

#[test]
fn margin_zero_count_is_clipped_at_borders() {
    let s = spec();
    for &(x, y, z) in &[(0, 0, 0), (19, 15, 5), (1, 14, 0), (10, 2, 4)] {
        let gt = gt_at(x, y, z);
        let m = margin_matrix(&gt, dims(), C, &s);
        let mut want = 0;
        for i in 0..N {
            if in_hood(i, &gt, &s) {
                want += 1;
                assert_eq!(m[i], 0.0);
            } else {
                assert_eq!(m[i], 0.1);
            }
        }
        assert_eq!(m.iter().filter(|&&v| v == 0.0).count(), want);
    }
}

fn zero_loss_heatmap(gt: &GroundTruth) -> Vec<f64> {
    let s = spec();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut v: Vec<f64> = (0..N).map(|i| if in_hood(i, gt, &s) { rng.gen_range(0.0..1.0) } else { rng.gen_range(0.0..0.9) }).collect();
    v[gt.idx.flat(dims(), C)] = 1.0;
    v[flat(0, 0, 0)] = 0.0;
    v
}

#[test]
fn zero_loss_construction() {
    let gt = gt_at(9, 9, 2);
    let v = zero_loss_heatmap(&gt);
    assert_eq!(contrastive(&v, &gt, Reduction::Mean), 0.0);
    assert_eq!(range(&v, &gt), 0.0);
    for red in [Reduction::Mean, Reduction::Sum] {
        assert!(total(&v, &gt, red) < 1e-12);
    }
}

#[test]
fn constant_heatmap_pays_margin_everywhere_outside() {
    let gt = gt_at(4, 5, 1);
    let n_out = margin_matrix(&gt, dims(), C, &spec()).iter().filter(|&&v| v > 0.0).count() as f64;
    let v = vec![0.37; N];
    assert!((contrastive(&v, &gt, Reduction::Mean) - 0.1 * n_out / N as f64).abs() < 1e-12);
    assert!((contrastive(&v, &gt, Reduction::Sum) - 0.1 * n_out).abs() < 1e-9);
    // |1 - c| + |c| >= 1
    assert!(total(&v, &gt, Reduction::Mean) >= 1.0);
    assert!(total(&vec![-2.0; N], &gt, Reduction::Mean) > 0.0);
}

#[test]
fn single_violation_costs_its_hinge() {
    let gt = gt_at(9, 9, 2);
    let mut v = zero_loss_heatmap(&gt);
    v[flat(0, 15, 5)] = 1.2;
    assert!((contrastive(&v, &gt, Reduction::Mean) - 0.3 / N as f64).abs() < 1e-12);
    assert!((contrastive(&v, &gt, Reduction::Sum) - 0.3).abs() < 1e-12);
}

#[test]
fn range_loss_examples() {
    let gt = gt_at(3, 3, 3);
    let mut v = vec![0.5; N];
    v[gt.idx.flat(dims(), C)] = 0.8;
    v[flat(17, 2, 0)] = -0.1;
    assert!((range(&v, &gt) - 0.3).abs() < 1e-12);
}

#[test]
fn range_gradient_reaches_gt_and_first_minimizer() {
    let gt = gt_at(3, 3, 3);
    let mut v = vec![0.5; N];
    v[gt.idx.flat(dims(), C)] = 0.8;
    let (first, second) = (flat(6, 2, 0), flat(17, 9, 4));
    v[first] = -0.1;
    v[second] = -0.1;
    let (_, d) = run(&v, |g, h| range_loss(g, h, &gt, dims(), C));
    assert_eq!(d[gt.idx.flat(dims(), C)], -1.0);
    assert_eq!(d[first], -1.0);
    assert_eq!(d[second], 0.0);
    assert_eq!(d.iter().filter(|&&x| x != 0.0).count(), 2);
}

#[test]
fn total_is_sum_of_parts() {
    let gt = gt_at(12, 4, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let v: Vec<f64> = (0..N).map(|_| rng.gen_range(-1.0..2.0)).collect();
    for red in [Reduction::Mean, Reduction::Sum] {
        let t = total(&v, &gt, red);
        assert_eq!(t, contrastive(&v, &gt, red) + range(&v, &gt));
    }
}

#[test]
fn raising_one_outside_entry_adds_delta_over_n() {
    let gt = gt_at(9, 9, 2);
    let base = zero_loss_heatmap(&gt);
    let target = flat(18, 1, 4);
    let mut v = base.clone();
    v[target] = 0.9;
    let t0 = total(&v, &gt, Reduction::Mean);
    for delta in [1e-3, 0.05, 0.4] {
        let mut u = v.clone();
        u[target] += delta;
        let t1 = total(&u, &gt, Reduction::Mean);
        assert!((t1 - t0 - delta / N as f64).abs() < 1e-12, "delta {delta}");
        let s1 = total(&u, &gt, Reduction::Sum) - total(&v, &gt, Reduction::Sum);
        assert!((s1 - delta).abs() < 1e-12);
    }
}

#[test]
fn contrastive_is_translation_invariant_range_is_not() {
    let gt = gt_at(7, 11, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v: Vec<f64> = (0..N).map(|_| rng.gen_range(0.0..1.0)).collect();
    let shifted: Vec<f64> = v.iter().map(|x| x + 0.75).collect();
    assert!((contrastive(&v, &gt, Reduction::Mean) - contrastive(&shifted, &gt, Reduction::Mean)).abs() < 1e-12);
    assert!((range(&v, &gt) - range(&shifted, &gt)).abs() > 0.1);
}

fn two_peaks(gt: &GroundTruth) -> Vec<f64> {
    let mut v = vec![0.0; N];
    v[gt.idx.flat(dims(), C)] = 1.0;
    v[flat(18, 14, 0)] = 0.85;
    v
}

#[test]
fn multi_peak_heatmap_only_allowed_by_contrastive() {
    let gt = gt_at(2, 2, 5);
    let v = two_peaks(&gt);
    assert_eq!(contrastive(&v, &gt, Reduction::Mean), 0.0);
    assert_eq!(contrastive(&v, &gt, Reduction::Sum), 0.0);
    assert!(assign(&v, &gt, AssignmentKind::Binary) > 0.0);
    assert!(assign(&v, &gt, GAUSS) > 0.0);
}

#[test]
fn gaussian_target_values() {
    let gt = gt_at(10, 8, 3);
    let t = gaussian_target(&gt, dims(), C, 3.0, 1.0);
    assert_eq!(t[gt.idx.flat(dims(), C)], 1.0);
    assert!((t[flat(13, 8, 3)] - (-0.5f64).exp()).abs() < 1e-15);
    assert!((t[flat(10, 8, 4)] - (-0.5f64).exp()).abs() < 1e-15);
    assert!(t.iter().all(|&v| v > 0.0 && v <= 1.0));
}

#[test]
fn gaussian_sigma_must_be_positive() {
    let gt = gt_at(1, 1, 1);
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let h = g.input(Tensor::zeros(&[H, W, C]), true);
    let bad = AssignmentKind::Gaussian { sigma_xy: 0.0, sigma_z: 1.0 };
    assert!(assignment_loss(&mut g, h, &gt, dims(), C, bad).is_err());
}

#[test]
fn shape_mismatch_is_reported() {
    let gt = gt_at(1, 1, 1);
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let h = g.input(Tensor::zeros(&[H, W, C + 1]), true);
    let m = margin_matrix(&gt, dims(), C, &spec());
    assert!(matches!(sparse_contrastive(&mut g, h, &m, &gt, dims(), C, Reduction::Mean), Err(Error::ShapeMismatch(_))));
    let h2 = g.input(Tensor::zeros(&[H, W, C]), true);
    assert!(matches!(sparse_contrastive(&mut g, h2, &m[1..], &gt, dims(), C, Reduction::Mean), Err(Error::ShapeMismatch(_))));
}

#[test]
fn binary_loss_is_minimized_by_the_one_hot() {
    let gt = gt_at(5, 6, 2);
    let mut v = vec![0.0; N];
    let mut loss = f64::INFINITY;
    for _ in 0..3000 {
        let (l, d) = run(&v, |g, h| assignment_loss(g, h, &gt, dims(), C, AssignmentKind::Binary));
        loss = l;
        if loss < 1e-3 {
            break;
        }
        for (x, dx) in v.iter_mut().zip(&d) {
            *x -= 4.0 * N as f64 * dx;
        }
    }
    assert!(loss < 1e-3, "loss {loss}");
    let at_gt = v[gt.idx.flat(dims(), C)];
    assert!(at_gt > 0.0);
    assert!(v.iter().enumerate().all(|(i, &x)| i == gt.idx.flat(dims(), C) || x < 0.0));
}

/// Heatmap values at least `gap` away from every hinge and absolute-value kink.
fn smooth_point(seed: u64, gt: &GroundTruth, gap: f64) -> Vec<f64> {
    let m = margin_matrix(gt, dims(), C, &spec());
    let gi = gt.idx.flat(dims(), C);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v: Vec<f64> = (0..N).map(|_| rng.gen_range(-0.5..1.5)).collect();
        let hg = v[gi];
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        let ok = (1.0 - hg).abs() > gap
            && sorted[0].abs() > gap
            && sorted[1] - sorted[0] > gap
            && v.iter().zip(&m).enumerate().all(|(i, (x, mm))| i == gi || (x - hg + mm).abs() > gap);
        if ok {
            return v;
        }
    }
}

fn check_heatmap_loss(seed: u64, f: impl for<'a> Fn(&mut Graph<'a, f64>, Var) -> Result<Var>) -> f64 {
    let gt = gt_at(4 + (seed as usize % 12), 3 + (seed as usize % 10), seed as usize % C);
    // small heatmap keeps finite differences cheap
    let v = smooth_point(seed, &gt, 1e-3);
    let mut store = ParamStore::<f64>::new();
    let id = store.add("h", &[H, W, C], Init::Zeros).unwrap();
    store.value_mut(id).data_mut().copy_from_slice(&v);
    let report = grad_check(&mut store, 1e-5, |g: &mut Graph<'_, f64>| -> Result<Var> {
        let h = g.param(id);
        f(g, h)
    })
    .unwrap();
    report.max_rel_error
}

#[test]
fn losses_pass_gradient_checks() {
    for seed in 0..20u64 {
        let gt = gt_at(4 + (seed as usize % 12), 3 + (seed as usize % 10), seed as usize % C);
        let m = margin_matrix(&gt, dims(), C, &spec());
        for red in [Reduction::Mean, Reduction::Sum] {
            let e = check_heatmap_loss(seed, |g, h| total_loss(g, h, &m, &gt, dims(), C, red));
            assert!(e < 1e-4, "total {red:?} seed {seed}: {e}");
        }
        let e = check_heatmap_loss(seed, |g, h| assignment_loss(g, h, &gt, dims(), C, AssignmentKind::Binary));
        assert!(e < 1e-4, "binary seed {seed}: {e}");
        let e = check_heatmap_loss(seed, |g, h| assignment_loss(g, h, &gt, dims(), C, GAUSS));
        assert!(e < 1e-4, "gaussian seed {seed}: {e}");
    }
}

#[test]
fn registry_builds_working_objectives() {
    let reg = ObjectiveRegistry::<f64>::default();
    let gt = gt_at(9, 9, 2);
    let v = zero_loss_heatmap(&gt);
    let cfg = LossConfig { radius_x: Some(2), radius_y: Some(3), radius_z: 1, ..LossConfig::default() };
    let obj = reg.create(&cfg, dims()).unwrap();
    assert_eq!(obj.output_kind(), OutputKind::Heatmap);
    let t = Target { gt: &gt, dims: dims(), c: C };
    let (l, _) = run(&v, |g, h| obj.loss(g, h, &t));
    assert!(l < 1e-12);

    let gauss = reg.create(&LossConfig { kind: GAUSSIAN.into(), sigma_xy: Some(3.0), sigma_z: 1.0, ..LossConfig::default() }, dims()).unwrap();
    let (l, _) = run(&v, |g, h| gauss.loss(g, h, &t));
    assert_eq!(l, assign(&v, &gt, GAUSS));
}

#[test]
fn regression_objective_is_zero_at_target() {
    let reg = ObjectiveRegistry::<f64>::default();
    let obj = reg.create(&LossConfig { kind: REGRESSION.into(), ..LossConfig::default() }, dims()).unwrap();
    assert_eq!(obj.output_kind(), OutputKind::Box);
    let gt = gt_at(9, 9, 2);
    let want = regression_target(&gt, dims());
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let out = g.input(Tensor::new(&[4], vec![want[0], want[1], want[2], 0.7]).unwrap(), true);
    let t = Target { gt: &gt, dims: dims(), c: C };
    let l = obj.loss(&mut g, out, &t).unwrap();
    assert!(g.value(l).item().abs() < 1e-15);
    assert_eq!(want, [9.0 / W as f64, 9.0 / H as f64, scale_of_box(&gt.bbox, dims())]);
}

#[test]
fn loss_config_json_round_trip() {
    let cfg = LossConfig { kind: BINARY.into(), reduction: Reduction::Mean, radius_x: Some(4), ..LossConfig::default() };
    let s = serde_json::to_string(&cfg).unwrap();
    assert!(s.contains("\"reduction\":\"mean\""));
    assert_eq!(serde_json::from_str::<LossConfig>(&s).unwrap(), cfg);
    assert!(LossConfig { margin: -0.1, ..LossConfig::default() }.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn contrastive_zero_iff_dominated(seed in any::<u64>(), gx in 0usize..W, gy in 0usize..H, gz in 0usize..C) {
        let gt = gt_at(gx, gy, gz);
        let m = margin_matrix(&gt, dims(), C, &spec());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hg = rng.gen_range(0.0..1.0);
        // half the cases dominated, half with a random violation
        let violate = rng.gen_bool(0.5);
        let mut v: Vec<f64> = m.iter().map(|mm| hg - mm - rng.gen_range(0.0..0.5)).collect();
        let gi = gt.idx.flat(dims(), C);
        v[gi] = hg;
        if violate {
            let j = (gi + rng.gen_range(1..N)) % N;
            v[j] = hg - m[j] + rng.gen_range(1e-6..0.5);
        }
        let dominated = v.iter().zip(&m).all(|(x, mm)| *x <= hg - mm);
        prop_assert_eq!(dominated, !violate);
        let l = contrastive(&v, &gt, Reduction::Mean);
        prop_assert_eq!(l == 0.0, dominated);
    }
}

