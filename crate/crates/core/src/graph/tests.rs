use super::*;
use crate::oracles::{finite_diff_grad, reference_conv, reference_conv_transpose, GradCheckReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn randt(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 1.0).unwrap();
    let numel: usize = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..numel).map(|_| dist.sample(&mut rng)).collect()).unwrap()
}

/// Finite-difference check of `build` (leaf -> scalar loss) at `x0`.
fn fd_check(name: &str, x0: &Tensor<f64>, tol: f64, build: impl Fn(&mut Graph<f64>, Var) -> Var) {
    let mut g = Graph::new();
    let x = g.leaf(x0.clone(), true);
    let loss = build(&mut g, x);
    g.backward(loss).unwrap();
    let analytic = g.grad(x).expect("leaf grad populated").to_f64_vec();
    let numeric = finite_diff_grad(
        &mut |t| {
            let mut g = Graph::new();
            let x = g.leaf(t.clone(), false);
            let loss = build(&mut g, x);
            Ok(g.value(loss).item())
        },
        x0,
        1e-4,
    )
    .unwrap();
    let report = GradCheckReport::compare(name, &analytic, numeric.data());
    assert!(report.max_rel_err < tol, "{report}");
}

// ---- conv2d ----

#[test]
fn conv_ones_sums_window() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).data()[0], 9.0);
}

#[test]
fn conv_identity_kernel_passes_input_through() {
    let x0 = randt(&[2, 3, 5, 4], 11);
    let mut g = Graph::<f64>::new();
    let x = g.constant(x0.clone());
    let mut wdata = vec![0.0; 3 * 3];
    for c in 0..3 {
        wdata[c * 3 + c] = 1.0; // weight[o][i] = delta(o,i), k=1
    }
    let w = g.constant(Tensor::from_vec(vec![3, 3, 1, 1], wdata).unwrap());
    let b = g.constant(Tensor::zeros(&[3]));
    let y = g.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(g.value(y), &x0);
}

#[test]
fn conv_matches_loop_oracle_over_stride_padding_grid() {
    for (si, &stride) in [1usize, 2].iter().enumerate() {
        for (pi, &padding) in [0usize, 1].iter().enumerate() {
            let seed = 100 + (si * 2 + pi) as u64;
            let x0 = randt(&[2, 3, 8, 8], seed);
            let w0 = randt(&[4, 3, 3, 3], seed + 50);
            let b0 = randt(&[4], seed + 90);
            let mut g = Graph::<f64>::new();
            let x = g.constant(x0.clone());
            let w = g.constant(w0.clone());
            let b = g.constant(b0.clone());
            let y = g.conv2d(x, w, b, stride, padding).unwrap();
            let want = reference_conv(&x0, &w0, &b0, stride, padding);
            assert_eq!(g.value(y).shape(), want.shape(), "s={stride} p={padding}");
            for (a, e) in g.value(y).data().iter().zip(want.data()) {
                assert!((a - e).abs() < 1e-5, "s={stride} p={padding}: {a} vs {e}");
            }
        }
    }
}

#[test]
fn conv_shape_mismatch_names_dimension() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 4, 8, 8]));
    let w = g.constant(Tensor::zeros(&[2, 3, 3, 3]));
    let b = g.constant(Tensor::zeros(&[2]));
    let err = g.conv2d(x, w, b, 1, 1).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("input channels (4)") && msg.contains("(3)"), "{msg}");
}

#[test]
fn conv_gradients_match_finite_differences() {
    let x0 = randt(&[2, 2, 6, 6], 7);
    let w0 = randt(&[3, 2, 3, 3], 8);
    let b0 = randt(&[3], 9);
    // w.r.t. input
    fd_check("conv2d/input", &x0, 1e-6, |g, x| {
        let w = g.constant(w0.clone());
        let b = g.constant(b0.clone());
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        let sq = g.square(y);
        g.sum(sq)
    });
    // w.r.t. weight
    fd_check("conv2d/weight", &w0, 1e-6, |g, w| {
        let x = g.constant(x0.clone());
        let b = g.constant(b0.clone());
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        let sq = g.square(y);
        g.sum(sq)
    });
    // w.r.t. bias
    fd_check("conv2d/bias", &b0, 1e-6, |g, b| {
        let x = g.constant(x0.clone());
        let w = g.constant(w0.clone());
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        let sq = g.square(y);
        g.sum(sq)
    });
}

// ---- conv2d_transpose ----

#[test]
fn conv_transpose_broadcasts_single_value() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[1, 1, 1, 1], 2.5));
    let w = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d_transpose(x, w, b, 2, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 2.5));
}

#[test]
fn conv_transpose_output_size_formula() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(randt(&[1, 2, 5, 5], 3));
    let w = g.constant(randt(&[2, 3, 4, 4], 4));
    let b = g.constant(Tensor::zeros(&[3]));
    let y = g.conv2d_transpose(x, w, b, 2, 1).unwrap();
    // (5-1)*2 - 2*1 + 4 = 10
    assert_eq!(g.value(y).shape(), &[1, 3, 10, 10]);
}

#[test]
fn conv_transpose_matches_scatter_oracle() {
    let x0 = randt(&[2, 3, 5, 5], 21);
    let w0 = randt(&[3, 2, 3, 3], 22);
    let b0 = randt(&[2], 23);
    for stride in [1usize, 2] {
        for padding in [0usize, 1] {
            let mut g = Graph::<f64>::new();
            let x = g.constant(x0.clone());
            let w = g.constant(w0.clone());
            let b = g.constant(b0.clone());
            let y = g.conv2d_transpose(x, w, b, stride, padding).unwrap();
            let want = reference_conv_transpose(&x0, &w0, &b0, stride, padding);
            assert_eq!(g.value(y).shape(), want.shape());
            for (a, e) in g.value(y).data().iter().zip(want.data()) {
                assert!((a - e).abs() < 1e-10, "s={stride} p={padding}");
            }
        }
    }
}

#[test]
fn conv_adjoint_identity() {
    // <conv(a, W), b> == <a, conv_transpose(b, W)> with zero biases, on
    // geometries where (H + 2p - K) is divisible by the stride so both maps
    // share the same domain. (That divisibility is why the stride-2 layers
    // in the models use 4x4 kernels.)
    for (seed, k, stride, padding) in [(1u64, 4usize, 2usize, 1usize), (2, 3, 1, 1), (3, 4, 2, 1)] {
        let a0 = randt(&[2, 3, 8, 8], seed);
        let w0 = randt(&[4, 3, k, k], seed + 10);
        let oh = (8 + 2 * padding - k) / stride + 1;
        let b0 = randt(&[2, 4, oh, oh], seed + 20);

        let mut g = Graph::<f64>::new();
        let a = g.constant(a0.clone());
        let w = g.constant(w0.clone());
        let zb_fwd = g.constant(Tensor::zeros(&[4]));
        let conv_a = g.conv2d(a, w, zb_fwd, stride, padding).unwrap();
        let lhs: f64 = g
            .value(conv_a)
            .data()
            .iter()
            .zip(b0.data())
            .map(|(x, y)| x * y)
            .sum();

        // w [4,3,k,k] reinterpreted as a transposed-conv weight [in=4, out=3]
        let b = g.constant(b0.clone());
        let zb_bwd = g.constant(Tensor::zeros(&[3]));
        let back = g.conv2d_transpose(b, w, zb_bwd, stride, padding).unwrap();
        assert_eq!(g.value(back).shape(), a0.shape());
        let rhs: f64 = g
            .value(back)
            .data()
            .iter()
            .zip(a0.data())
            .map(|(x, y)| x * y)
            .sum();
        assert!(
            (lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0),
            "k={k} s={stride} p={padding}: {lhs} vs {rhs}"
        );
    }
}

#[test]
fn conv_input_gradient_equals_transpose_oracle() {
    // d/dx <conv(x,W), c> == conv_transpose-scatter of c with W.
    let x0 = randt(&[1, 2, 6, 6], 31);
    let w0 = randt(&[3, 2, 3, 3], 32);
    let c0 = randt(&[1, 3, 6, 6], 33); // stride 1, padding 1 keeps size
    let mut g = Graph::<f64>::new();
    let x = g.leaf(x0, true);
    let w = g.constant(w0.clone());
    let b = g.constant(Tensor::zeros(&[3]));
    let y = g.conv2d(x, w, b, 1, 1).unwrap();
    let c = g.constant(c0.clone());
    let prod = g.mul(y, c).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    let got = g.grad(x).unwrap();
    let want = reference_conv_transpose(&c0, &w0, &Tensor::zeros(&[2]), 1, 1);
    assert_eq!(got.shape(), want.shape());
    for (a, e) in got.data().iter().zip(want.data()) {
        assert!((a - e).abs() < 1e-5);
    }
}

#[test]
fn conv_transpose_gradients_match_finite_differences() {
    let x0 = randt(&[2, 3, 4, 4], 41);
    let w0 = randt(&[3, 2, 4, 4], 42);
    let b0 = randt(&[2], 43);
    fd_check("convT/input", &x0, 1e-6, |g, x| {
        let w = g.constant(w0.clone());
        let b = g.constant(b0.clone());
        let y = g.conv2d_transpose(x, w, b, 2, 1).unwrap();
        let sq = g.square(y);
        g.sum(sq)
    });
    fd_check("convT/weight", &w0, 1e-6, |g, w| {
        let x = g.constant(x0.clone());
        let b = g.constant(b0.clone());
        let y = g.conv2d_transpose(x, w, b, 2, 1).unwrap();
        let sq = g.square(y);
        g.sum(sq)
    });
    fd_check("convT/bias", &b0, 1e-6, |g, b| {
        let x = g.constant(x0.clone());
        let w = g.constant(w0.clone());
        let y = g.conv2d_transpose(x, w, b, 2, 1).unwrap();
        let sq = g.square(y);
        g.sum(sq)
    });
}

// ---- batchnorm ----

#[test]
fn batchnorm_train_standardizes() {
    let x0 = randt(&[4, 3, 5, 5], 51);
    let mut g = Graph::<f64>::new();
    let x = g.constant(x0);
    let gamma = g.constant(Tensor::full(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    let mut rm = Tensor::zeros(&[3]);
    let mut rv = Tensor::full(&[3], 1.0);
    let y = g
        .batchnorm2d(x, gamma, beta, &mut rm, &mut rv, true, 0.1, 1e-5)
        .unwrap();
    let out = g.value(y);
    let (n, c, h, w) = out.dims4().unwrap();
    let plane = h * w;
    for ch in 0..c {
        let mut mean = 0.0;
        let mut var = 0.0;
        for ni in 0..n {
            for &v in &out.data()[(ni * c + ch) * plane..(ni * c + ch + 1) * plane] {
                mean += v;
            }
        }
        mean /= (n * plane) as f64;
        for ni in 0..n {
            for &v in &out.data()[(ni * c + ch) * plane..(ni * c + ch + 1) * plane] {
                var += (v - mean) * (v - mean);
            }
        }
        var /= (n * plane) as f64;
        assert!(mean.abs() < 1e-5, "channel {ch} mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "channel {ch} var {var}");
    }
    // running stats moved off their init values
    assert!(rm.data().iter().any(|&v| v != 0.0));
    assert!(rv.data().iter().any(|&v| v != 1.0));
}

#[test]
fn batchnorm_affine_on_standardized_input() {
    // batch entries -1 and +1 per position: batch mean 0, biased var 1
    let x0 = Tensor::from_vec(vec![2, 1, 2, 2], vec![-1.0f64, -1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
    let mut g = Graph::new();
    let x = g.constant(x0.clone());
    let gamma = g.constant(Tensor::full(&[1], 2.0));
    let beta = g.constant(Tensor::full(&[1], 3.0));
    let mut rm = Tensor::zeros(&[1]);
    let mut rv = Tensor::full(&[1], 1.0);
    let y = g
        .batchnorm2d(x, gamma, beta, &mut rm, &mut rv, true, 0.1, 1e-5)
        .unwrap();
    for (o, i) in g.value(y).data().iter().zip(x0.data()) {
        assert!((o - (2.0 * i + 3.0)).abs() < 1e-4, "{o} vs {}", 2.0 * i + 3.0);
    }
}

#[test]
fn batchnorm_eval_uses_running_stats() {
    let x0 = randt(&[2, 2, 3, 3], 52);
    let mut g = Graph::<f64>::new();
    let x = g.constant(x0.clone());
    let gamma = g.constant(Tensor::full(&[2], 1.0));
    let beta = g.constant(Tensor::zeros(&[2]));
    let mut rm = Tensor::from_vec(vec![2], vec![0.5, -0.5]).unwrap();
    let mut rv = Tensor::from_vec(vec![2], vec![4.0, 0.25]).unwrap();
    let y = g
        .batchnorm2d(x, gamma, beta, &mut rm, &mut rv, false, 0.1, 1e-5)
        .unwrap();
    // eval mode must not touch the running stats
    assert_eq!(rm.data(), &[0.5, -0.5]);
    assert_eq!(rv.data(), &[4.0, 0.25]);
    let istd0 = 1.0 / (4.0f64 + 1e-5).sqrt();
    let got = g.value(y).data()[0];
    let want = (x0.data()[0] - 0.5) * istd0;
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let x0 = randt(&[3, 2, 4, 4], 53);
    let g0 = randt(&[2], 54).map(|v| v * 0.1 + 1.0);
    let b0 = randt(&[2], 55);
    let run = |g: &mut Graph<f64>, x: Var, gamma: Var, beta: Var| -> Var {
        let mut rm = Tensor::zeros(&[2]);
        let mut rv = Tensor::full(&[2], 1.0);
        let y = g
            .batchnorm2d(x, gamma, beta, &mut rm, &mut rv, true, 0.1, 1e-5)
            .unwrap();
        let w = g.constant(randt(&[3, 2, 4, 4], 56));
        let p = g.mul(y, w).unwrap();
        g.sum(p)
    };
    fd_check("batchnorm/input", &x0, 1e-3, |g, x| {
        let gamma = g.constant(g0.clone());
        let beta = g.constant(b0.clone());
        run(g, x, gamma, beta)
    });
    fd_check("batchnorm/gamma", &g0, 1e-3, |g, gamma| {
        let x = g.constant(x0.clone());
        let beta = g.constant(b0.clone());
        run(g, x, gamma, beta)
    });
    fd_check("batchnorm/beta", &b0, 1e-3, |g, beta| {
        let x = g.constant(x0.clone());
        let gamma = g.constant(g0.clone());
        run(g, x, gamma, beta)
    });
}

// ---- activations and elementwise ----

#[test]
fn leaky_relu_definition() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = g.leaky_relu(x, 0.2).unwrap();
    assert_eq!(g.value(y).data(), &[-0.2, 0.0, 2.0]);
}

#[test]
fn leaky_relu_zero_slope_is_relu() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_vec(vec![4], vec![-3.0, -0.5, 0.5, 3.0]).unwrap());
    let y = g.leaky_relu(x, 0.0).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.5, 3.0]);
}

#[test]
fn leaky_relu_rejects_bad_slope() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::scalar(1.0));
    assert!(g.leaky_relu(x, 1.0).is_err());
    assert!(g.leaky_relu(x, -0.1).is_err());
}

#[test]
fn leaky_relu_gradient_away_from_zero() {
    let x0 = Tensor::from_vec(vec![4], vec![-2.0f64, -0.7, 0.9, 1.8]).unwrap();
    fd_check("leaky_relu", &x0, 1e-6, |g, x| {
        let y = g.leaky_relu(x, 0.2).unwrap();
        let sq = g.square(y);
        g.sum(sq)
    });
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let x0 = randt(&[2, 3], 61).map(|v| v + 3.0); // keep abs() away from 0
    fd_check("abs", &x0, 1e-6, |g, x| {
        let y = g.abs(x);
        g.sum(y)
    });
    fd_check("square+mean", &x0, 1e-6, |g, x| {
        let y = g.square(x);
        g.mean(y)
    });
    fd_check("tanh", &x0, 1e-6, |g, x| {
        let y = g.tanh(x);
        let sq = g.square(y);
        g.sum(sq)
    });
    fd_check("mul_scalar+add_scalar", &x0, 1e-6, |g, x| {
        let y = g.mul_scalar(x, 2.5);
        let z = g.add_scalar(y, -1.0);
        let sq = g.square(z);
        g.sum(sq)
    });
    let y0 = randt(&[2, 3], 62);
    fd_check("mul+sub", &x0, 1e-6, |g, x| {
        let y = g.constant(y0.clone());
        let d = g.sub(x, y).unwrap();
        let p = g.mul(d, x).unwrap();
        g.sum(p)
    });
}

#[test]
fn structural_op_gradients() {
    let x0 = randt(&[2, 2, 4, 4], 63);
    fd_check("downsample2x", &x0, 1e-6, |g, x| {
        let y = g.downsample2x(x).unwrap();
        let sq = g.square(y);
        g.sum(sq)
    });
    fd_check("global_avg_pool", &x0, 1e-6, |g, x| {
        let y = g.global_avg_pool(x).unwrap();
        let sq = g.square(y);
        g.sum(sq)
    });
    fd_check("concat_channels", &x0, 1e-6, |g, x| {
        let other = g.constant(randt(&[2, 1, 4, 4], 64));
        let y = g.concat_channels(&[x, other]).unwrap();
        let sq = g.square(y);
        g.sum(sq)
    });
    fd_check("reshape", &x0, 1e-6, |g, x| {
        let y = g.reshape(x, &[4, 16]).unwrap();
        let sq = g.square(y);
        g.sum(sq)
    });
}

// ---- backward contract ----

#[test]
fn backward_linear_case() {
    // loss = sum(w * x) => dloss/dw = x
    let x0 = Tensor::from_vec(vec![3], vec![1.5f64, -2.0, 0.5]).unwrap();
    let w0 = Tensor::from_vec(vec![3], vec![0.1f64, 0.2, 0.3]).unwrap();
    let mut g = Graph::new();
    let w = g.leaf(w0, true);
    let x = g.constant(x0.clone());
    let p = g.mul(w, x).unwrap();
    let loss = g.sum(p);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), x0.data());
}

#[test]
fn backward_quadratic_case() {
    // loss = sum(w^2) at w=3 => grad 6
    let mut g = Graph::<f64>::new();
    let w = g.leaf(Tensor::scalar(3.0), true);
    let sq = g.square(w);
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[6.0]);
}

#[test]
fn backward_accumulates_exactly() {
    let mut g = Graph::<f64>::new();
    let w = g.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap(), true);
    let sq = g.square(w);
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    let first = g.grad(w).unwrap().clone();
    g.backward(loss).unwrap();
    let second = g.grad(w).unwrap();
    for (a, b) in first.data().iter().zip(second.data()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f32>::new();
    let w = g.leaf(Tensor::zeros(&[2, 2]), true);
    let err = g.backward(w).unwrap_err();
    assert!(matches!(err, Error::NonScalarLoss { .. }));
}

#[test]
fn frozen_leaf_gets_no_gradient() {
    let mut g = Graph::<f64>::new();
    let w = g.leaf(Tensor::scalar(3.0), false);
    let sq = g.square(w);
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert!(g.grad(w).is_none());
}

// ---- dropout ----

#[test]
fn dropout_zero_rate_is_identity() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[8], 1.5));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y = g.dropout(x, 0.0, &mut rng).unwrap();
    assert_eq!(x, y);
}

#[test]
fn dropout_seeded_masks_are_reproducible() {
    let run = |seed: u64| {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[64], 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = g.dropout(x, 0.5, &mut rng).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn dropout_rejects_bad_rate() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::scalar(1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(g.dropout(x, 1.0, &mut rng).is_err());
    assert!(g.dropout(x, -0.5, &mut rng).is_err());
}

#[test]
fn dropout_gradient_is_mask() {
    let x0 = randt(&[32], 71);
    fd_check("dropout", &x0, 1e-6, |g, x| {
        let mut rng = ChaCha8Rng::seed_from_u64(9); // same mask every call
        let y = g.dropout(x, 0.5, &mut rng).unwrap();
        let sq = g.square(y);
        g.sum(sq)
    });
}
