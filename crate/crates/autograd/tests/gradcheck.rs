//! Finite-difference checks for every differentiable op, plus a handful of
//! exact-value forward tests.

use ndarray::{arr1, arr2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use morsel_autograd::fd::grad_check;
use morsel_autograd::{bilinear_sample, Graph};

const TOL: f64 = 1e-6;
const EPS: f64 = 1e-5;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0))
}

#[test]
fn add_mul_div_broadcast_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = randn(&[3, 4], &mut rng);
    let b = randn(&[4], &mut rng);
    let c = randn(&[3, 1], &mut rng).mapv(|v| v + 2.5); // keep divisor away from 0
    grad_check(
        |g, l| {
            let s = g.add(l[0], l[1]);
            let m = g.mul(s, l[0]);
            let d = g.div(m, l[2]);
            g.sum_all(d)
        },
        &[a, b, c],
        EPS,
    )
    .assert_rel_below(TOL);
}

#[test]
fn affine_sub_sqrt_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = randn(&[2, 5], &mut rng).mapv(|v| v * v + 0.5);
    let b = randn(&[2, 5], &mut rng);
    grad_check(
        |g, l| {
            let s = g.sqrt(l[0]);
            let t = g.affine(s, 1.7, -0.3);
            let u = g.sub(t, l[1]);
            let sq = g.mul(u, u);
            g.mean_all(sq)
        },
        &[a, b],
        EPS,
    )
    .assert_rel_below(TOL);
}

#[test]
fn matmul_bmm_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = randn(&[4, 3], &mut rng);
    let b = randn(&[3, 5], &mut rng);
    grad_check(
        |g, l| {
            let y = g.matmul(l[0], l[1]);
            let y2 = g.mul(y, y);
            g.sum_all(y2)
        },
        &[a, b],
        EPS,
    )
    .assert_rel_below(TOL);

    let a = randn(&[2, 3, 4], &mut rng);
    let b = randn(&[2, 4, 2], &mut rng);
    grad_check(
        |g, l| {
            let y = g.bmm(l[0], l[1]);
            g.sum_all(y)
        },
        &[a, b],
        EPS,
    )
    .assert_rel_below(TOL);
}

#[test]
fn permute_reshape_concat_select_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = randn(&[2, 3, 4], &mut rng);
    let b = randn(&[2, 3, 4], &mut rng);
    grad_check(
        |g, l| {
            let p = g.permute(l[0], &[2, 0, 1]);
            let r = g.reshape(p, &[4, 6]);
            let pb = g.permute(l[1], &[2, 0, 1]);
            let rb = g.reshape(pb, &[4, 6]);
            let cat = g.concat(&[r, rb], 0);
            let sel = g.select_rows(cat, &[0, 3, 3, 7]);
            let sq = g.mul(sel, sel);
            g.mean_all(sq)
        },
        &[a, b],
        EPS,
    )
    .assert_rel_below(TOL);
}

#[test]
fn softmax_rows_sum_to_one_and_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = randn(&[3, 7], &mut rng).mapv(|v| 3.0 * v);
    let mut g = Graph::new();
    let x = g.leaf(a.clone());
    let y = g.softmax(x, 1);
    for row in g.value(y).rows() {
        let s: f64 = row.sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    grad_check(
        |g, l| {
            let y = g.softmax(l[0], 1);
            let w = g.mul(y, l[1]);
            g.sum_all(w)
        },
        &[a, randn(&[3, 7], &mut rng)],
        EPS,
    )
    .assert_rel_below(TOL);
}

#[test]
fn layer_norm_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = randn(&[4, 6], &mut rng);
    let gamma = randn(&[6], &mut rng).mapv(|v| v + 1.5);
    let beta = randn(&[6], &mut rng);
    let probe = randn(&[4, 6], &mut rng);
    grad_check(
        |g, l| {
            let y = g.layer_norm(l[0], l[1], l[2], 1, 1e-6);
            let w = g.mul(y, l[3]);
            g.sum_all(w)
        },
        &[x, gamma, beta, probe],
        EPS,
    )
    .assert_rel_below(1e-5);
}

#[test]
fn layer_norm_over_middle_axis_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randn(&[2, 5, 3], &mut rng);
    let gamma = randn(&[5], &mut rng).mapv(|v| v + 1.2);
    let beta = randn(&[5], &mut rng);
    grad_check(
        |g, l| {
            let y = g.layer_norm(l[0], l[1], l[2], 1, 1e-6);
            let sq = g.mul(y, y);
            g.mean_all(sq)
        },
        &[x, gamma, beta],
        EPS,
    )
    .assert_rel_below(1e-5);
}

#[test]
fn gelu_relu_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // Keep ReLU inputs away from the kink at 0.
    let x = randn(&[3, 5], &mut rng).mapv(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    grad_check(
        |g, l| {
            let y = g.gelu(l[0]);
            let z = g.relu(y);
            let sq = g.mul(z, z);
            g.sum_all(sq)
        },
        &[x],
        EPS,
    )
    .assert_rel_below(TOL);
}

#[test]
fn cross_entropy_matches_analytic_uniform() {
    let mut g = Graph::new();
    let logits = g.constant(ArrayD::zeros(IxDyn(&[4, 8192])));
    let loss = g.cross_entropy_mean(logits, &[0, 5, 100, 8191]);
    assert!((g.scalar(loss) - (8192f64).ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits = randn(&[5, 7], &mut rng);
    grad_check(
        |g, l| g.cross_entropy_mean(l[0], &[2, 0, 6, 3, 3]),
        &[logits],
        EPS,
    )
    .assert_rel_below(TOL);
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(arr1(&[1.0, 2.0]).into_dyn());
    let d = g.detach(x);
    let y = g.mul(d, d);
    let loss = g.sum_all(y);
    g.backward(loss);
    assert!(g.grad(x).is_none());
}

#[test]
fn straight_through_passes_identity_gradient() {
    // q = x + detach(c - x) has value c but gradient of x.
    let mut g = Graph::new();
    let x = g.leaf(arr1(&[0.3, -0.4]).into_dyn());
    let c = g.constant(arr1(&[1.0, 1.0]).into_dyn());
    let diff = g.sub(c, x);
    let st = g.detach(diff);
    let q = g.add(x, st);
    for &v in g.value(q).iter() {
        assert!((v - 1.0).abs() < 1e-12);
    }
    let s = g.sum_all(q);
    g.backward(s);
    assert_eq!(g.grad(x).unwrap().as_slice().unwrap(), &[1.0, 1.0]);
}

#[test]
fn conv2d_grads_with_groups_stride_pad() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = randn(&[2, 4, 5, 5], &mut rng);
    let w = randn(&[6, 2, 3, 3], &mut rng); // groups=2
    grad_check(
        |g, l| {
            let y = g.conv2d(l[0], l[1], 2, 2, 1);
            let sq = g.mul(y, y);
            g.sum_all(sq)
        },
        &[x, w],
        EPS,
    )
    .assert_rel_below(TOL);
}

#[test]
fn depthwise_conv_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn(&[1, 3, 4, 4], &mut rng);
    let w = randn(&[3, 1, 3, 3], &mut rng); // groups = channels
    grad_check(
        |g, l| {
            let y = g.conv2d(l[0], l[1], 3, 1, 1);
            g.sum_all(y)
        },
        &[x, w],
        EPS,
    )
    .assert_rel_below(TOL);
}

#[test]
fn conv_transpose2d_grads_and_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = randn(&[2, 3, 4, 4], &mut rng);
    let w = randn(&[3, 5, 2, 2], &mut rng);
    {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let wn = g.constant(w.clone());
        let y = g.conv_transpose2d(xn, wn, 2);
        assert_eq!(g.shape(y), &[2, 5, 8, 8]);
    }
    grad_check(
        |g, l| {
            let y = g.conv_transpose2d(l[0], l[1], 2);
            let sq = g.mul(y, y);
            g.sum_all(sq)
        },
        &[x, w],
        EPS,
    )
    .assert_rel_below(TOL);
}

#[test]
fn pooling_and_resize_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = randn(&[1, 2, 6, 6], &mut rng);
    grad_check(
        |g, l| {
            let p = g.avg_pool2d(l[0], 2, 2);
            let a = g.adaptive_avg_pool2d(p, 2, 2);
            let r = g.resize_bilinear(a, 5, 5);
            let sq = g.mul(r, r);
            g.sum_all(sq)
        },
        &[x],
        EPS,
    )
    .assert_rel_below(TOL);
}

#[test]
fn adaptive_pool_upscale_grads() {
    // Output larger than input: bins repeat pixels.
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = randn(&[1, 2, 2, 2], &mut rng);
    grad_check(
        |g, l| {
            let a = g.adaptive_avg_pool2d(l[0], 6, 6);
            g.sum_all(a)
        },
        &[x],
        EPS,
    )
    .assert_rel_below(TOL);
}

#[test]
fn bilinear_sample_exact_cases() {
    let plane = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
    assert_eq!(bilinear_sample(plane.view(), 0.0, 1.0), 2.0);
    assert_eq!(bilinear_sample(plane.view(), 0.5, 0.5), 2.5);
    assert_eq!(bilinear_sample(plane.view(), -5.0, -5.0), 0.0);
    // Halfway off the top edge: only the in-range row contributes.
    assert!((bilinear_sample(plane.view(), -0.5, 0.0) - 0.5).abs() < 1e-12);
}

#[test]
fn deform_sample_grads_off_lattice() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let groups = 2;
    let x = randn(&[1, 4, 5, 5], &mut rng);
    // Keep offsets strictly off the integer lattice so bilinear kinks are avoided.
    let off = ArrayD::from_shape_simple_fn(IxDyn(&[1, 2 * groups * 9, 5, 5]), || {
        let v: f64 = rng.gen_range(-0.8..0.8);
        if v.fract().abs() < 0.05 {
            v + 0.17
        } else {
            v
        }
    });
    let m = randn(&[1, groups * 9, 5, 5], &mut rng).mapv(|v| 0.1 + v * 0.05);
    let probe = randn(&[1, 4, 5, 5], &mut rng);
    grad_check(
        |g, l| {
            let y = g.deform_sample(l[0], l[1], l[2], groups);
            let w = g.mul(y, l[3]);
            g.sum_all(w)
        },
        &[x, off, m, probe],
        EPS,
    )
    .assert_rel_below(1e-5);
}

#[test]
fn shared_parameter_accumulates_one_gradient() {
    use morsel_autograd::param::zeros;
    use morsel_autograd::ParamStore;
    let mut ps = ParamStore::new();
    let w = ps.register("w", {
        let mut a = zeros(&[2]);
        a[[0]] = 2.0;
        a[[1]] = -1.0;
        a
    });
    let mut g = Graph::new();
    let n1 = g.param(&ps, w);
    let n2 = g.param(&ps, w);
    assert_eq!(n1, n2);
    let y = g.mul(n1, n2); // w^2
    let loss = g.sum_all(y);
    g.backward(loss);
    let grads = g.param_grads();
    assert_eq!(grads.len(), 1);
    assert_eq!(grads[0].1.as_slice().unwrap(), &[4.0, -2.0]); // d(w^2)/dw = 2w
}
