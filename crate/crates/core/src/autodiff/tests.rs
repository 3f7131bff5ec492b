use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check_fn, RelError};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(Tensor::randn(&shape, &mut rng(seed)));
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

fn assert_grad(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let rep = check_fn(inputs, f, 1e-5, 1e-5, RelError::UnitFloor).unwrap();
    assert!(rep.passed(), "max rel err {} failures {:?}", rep.max_rel_err, &rep.failures[..rep.failures.len().min(5)]);
}

#[test]
fn conv_identity_kernel() {
    let mut g = Graph::inference();
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, -2.0, 3.5, 4.0]));
    let w = g.constant(Tensor::ones(&[1, 1, 1, 1]));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn conv_center_sum() {
    let mut g = Graph::inference();
    let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    let v = g.value(y);
    assert_eq!(v.shape(), &[1, 1, 3, 3]);
    // direct summation: centre sees all nine ones, corners four
    assert_eq!(v.data()[4], 9.0);
    assert_eq!(v.data()[0], 4.0);
    assert_eq!(v.data()[1], 6.0);
}

#[test]
fn conv_shape_error_names_dims() {
    let mut g = Graph::inference();
    let x = g.constant(Tensor::ones(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::ones(&[3, 5, 3, 3]));
    let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
    assert!(matches!(err, Error::Shape(ref m) if m.contains("2 channels")), "{err}");
}

#[test]
fn conv_strided_output_extent() {
    let mut g = Graph::inference();
    let x = g.constant(Tensor::ones(&[2, 1, 9, 8]));
    let w = g.constant(Tensor::ones(&[4, 1, 3, 3]));
    let y = g.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[2, 4, 5, 4]);
}

#[test]
fn grad_conv2d() {
    let mut r = rng(1);
    let inputs = [
        Tensor::randn(&[2, 2, 5, 4], &mut r),
        Tensor::randn(&[3, 2, 3, 3], &mut r),
        Tensor::randn(&[3], &mut r),
    ];
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        assert_grad(&inputs, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            probe(g, y, 11)
        });
    }
}

#[test]
fn conv_gradient_max_rel_below_1e6() {
    let mut r = rng(2);
    let inputs = [Tensor::randn(&[1, 2, 4, 4], &mut r), Tensor::randn(&[2, 2, 3, 3], &mut r)];
    let rep = check_fn(
        &inputs,
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, 1, 1)?;
            probe(g, y, 3)
        },
        1e-5,
        1e-6,
        RelError::UnitFloor,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{}", rep.max_rel_err);
}

#[test]
fn grad_conv_transpose2d() {
    let mut r = rng(3);
    let inputs = [
        Tensor::randn(&[2, 3, 3, 2], &mut r),
        Tensor::randn(&[3, 2, 2, 2], &mut r),
        Tensor::randn(&[2], &mut r),
    ];
    assert_grad(&inputs, |g, v| {
        let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2)?;
        assert_eq!(g.shape(y), &[2, 2, 6, 4]);
        probe(g, y, 4)
    });
}

#[test]
fn flip_definition_and_involution() {
    let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let v = flip_tensor(&x, FlipAxis::Vertical).unwrap();
    assert_eq!(v.data(), &[3.0, 4.0, 1.0, 2.0]);
    let h = flip_tensor(&x, FlipAxis::Horizontal).unwrap();
    assert_eq!(h.data(), &[2.0, 1.0, 4.0, 3.0]);
    let r = Tensor::randn(&[2, 3, 5, 4], &mut rng(5));
    for axis in [FlipAxis::Vertical, FlipAxis::Horizontal] {
        let twice = flip_tensor(&flip_tensor(&r, axis).unwrap(), axis).unwrap();
        assert_eq!(twice, r);
    }
}

#[test]
fn flip_rejects_non_4d() {
    let mut g = Graph::inference();
    let x = g.constant(Tensor::ones(&[2, 2]));
    assert!(matches!(g.flip(x, FlipAxis::Vertical), Err(Error::Shape(_))));
}

#[test]
fn grad_flips() {
    let inputs = [Tensor::randn(&[2, 2, 3, 4], &mut rng(6))];
    for axis in [FlipAxis::Vertical, FlipAxis::Horizontal] {
        assert_grad(&inputs, |g, v| {
            let y = g.flip(v[0], axis)?;
            probe(g, y, 7)
        });
    }
}

#[test]
fn layer_norm_values() {
    let mut g = Graph::inference();
    let gamma = g.constant(Tensor::ones(&[2]));
    let beta = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(t(&[1, 1, 2], &[1.0, 3.0]));
    let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
    let d = g.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);

    let gamma4 = g.constant(Tensor::ones(&[4]));
    let beta4 = g.constant(Tensor::zeros(&[4]));
    let c = g.constant(Tensor::full(&[2, 3, 4], 2.0));
    let y = g.layer_norm(c, gamma4, beta4, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    assert!(matches!(g.layer_norm(c, gamma4, beta4, 0.0), Err(Error::Config(_))));
}

#[test]
fn grad_layer_norm() {
    let mut r = rng(8);
    let inputs = [
        Tensor::randn(&[2, 3, 5], &mut r),
        Tensor::randn(&[5], &mut r),
        Tensor::randn(&[5], &mut r),
    ];
    assert_grad(&inputs, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        probe(g, y, 9)
    });
}

#[test]
fn grad_linear_and_matmul() {
    let mut r = rng(10);
    let inputs = [
        Tensor::randn(&[2, 3, 4], &mut r),
        Tensor::randn(&[5, 4], &mut r),
        Tensor::randn(&[5], &mut r),
    ];
    assert_grad(&inputs, |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        probe(g, y, 12)
    });
    let inputs = [Tensor::randn(&[3, 4], &mut r), Tensor::randn(&[4, 2], &mut r)];
    assert_grad(&inputs, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        probe(g, y, 13)
    });
}

#[test]
fn grad_depthwise_conv1d() {
    let mut r = rng(14);
    let inputs = [
        Tensor::randn(&[2, 6, 3], &mut r),
        Tensor::randn(&[3, 3], &mut r),
        Tensor::randn(&[3], &mut r),
    ];
    assert_grad(&inputs, |g, v| {
        let y = g.dwconv1d(v[0], v[1], Some(v[2]))?;
        probe(g, y, 15)
    });
}

#[test]
fn grad_elementwise_and_unary() {
    let mut r = rng(16);
    let inputs = [Tensor::randn(&[3, 4], &mut r), Tensor::randn(&[3, 4], &mut r)];
    assert_grad(&inputs, |g, v| {
        let a = g.add(v[0], v[1])?;
        let m = g.mul(a, v[1])?;
        let s = g.sub(m, v[0])?;
        let s = g.scale(s, 0.7);
        let s = g.add_scalar(s, 0.3);
        probe(g, s, 17)
    });
    for kind in [Unary::Sigmoid, Unary::Silu, Unary::Gelu, Unary::Softplus, Unary::Exp, Unary::Tanh, Unary::Square] {
        assert_grad(&inputs[..1], |g, v| {
            let y = g.unary(v[0], kind);
            probe(g, y, 18)
        });
    }
    let pos = [Tensor::rand_uniform(&[3, 4], 0.5, 2.0, &mut r)];
    assert_grad(&pos, |g, v| {
        let y = g.sqrt(v[0]);
        probe(g, y, 19)
    });
}

#[test]
fn grad_reductions() {
    let mut r = rng(20);
    let inputs = [Tensor::randn(&[2, 3, 4], &mut r)];
    for axis in 0..3 {
        assert_grad(&inputs, |g, v| {
            let y = g.mean_axis(v[0], axis)?;
            probe(g, y, 21)
        });
        assert_grad(&inputs, |g, v| {
            let y = g.max_axis(v[0], axis)?;
            probe(g, y, 22)
        });
    }
    assert_grad(&inputs, |g, v| {
        let y = g.mean_all(v[0]);
        let z = g.sum_all(v[0]);
        let s = g.add(y, z)?;
        Ok(g.square(s))
    });
}

#[test]
fn max_ties_pick_lowest_index() {
    let mut g = Graph::train();
    let x = g.leaf(t(&[1, 3, 1, 1], &[2.0, 2.0, 1.0]));
    let m = g.max_axis(x, 1).unwrap();
    let s = g.sum_all(m);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
}

#[test]
fn grad_layout_ops() {
    let mut r = rng(23);
    let inputs = [Tensor::randn(&[2, 3, 2, 4], &mut r), Tensor::randn(&[2, 1, 2, 4], &mut r)];
    assert_grad(&inputs, |g, v| {
        let c = g.concat(&[v[0], v[1]], 1)?;
        let s = g.slice(c, 1, 1, 3)?;
        let q = g.to_seq(s)?;
        let back = g.from_seq(q, 2, 4)?;
        let m = g.mul_broadcast(back, v[1])?;
        let r = g.reshape(m, &[2, 24])?;
        probe(g, r, 24)
    });
    let img = [Tensor::randn(&[1, 2, 4, 6], &mut r)];
    assert_grad(&img, |g, v| {
        let d = g.downsample2(v[0])?;
        let u = g.upsample_nearest2(d)?;
        let u2 = g.upsample_nearest2(v[0])?;
        let a = probe(g, u, 25)?;
        let b = probe(g, u2, 26)?;
        g.add(a, b)
    });
}

#[test]
fn to_seq_is_row_major() {
    let mut g = Graph::inference();
    // channel 0: 0..4, channel 1: 10..14 on a 2×2 grid
    let x = g.constant(t(&[1, 2, 2, 2], &[0.0, 1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0]));
    let s = g.to_seq(x).unwrap();
    assert_eq!(g.shape(s), &[1, 4, 2]);
    assert_eq!(g.value(s).data(), &[0.0, 10.0, 1.0, 11.0, 2.0, 12.0, 3.0, 13.0]);
}

#[test]
fn grad_unit_normalize() {
    let inputs = [Tensor::randn(&[2, 3, 2, 2], &mut rng(27))];
    assert_grad(&inputs, |g, v| {
        let y = g.unit_normalize(v[0], 1e-10)?;
        probe(g, y, 28)
    });
}

#[test]
fn grad_selective_scan_kernel() {
    let mut r = rng(29);
    let (b, l, d, n) = (2, 5, 3, 4);
    let inputs = [
        Tensor::randn(&[b, l, d], &mut r),
        Tensor::rand_uniform(&[b, l, d], 0.05, 0.6, &mut r),
        Tensor::rand_uniform(&[d, n], -1.5, -0.1, &mut r),
        Tensor::randn(&[b, l, n], &mut r),
        Tensor::randn(&[b, l, n], &mut r),
        Tensor::randn(&[d], &mut r),
    ];
    for mode in [ScanMode::Sequential, ScanMode::Chunked(2)] {
        assert_grad(&inputs, |g, v| {
            g.set_scan_mode(mode);
            let y = g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5])?;
            probe(g, y, 30)
        });
    }
}

#[test]
fn backward_sum_and_square() {
    let mut g = Graph::train();
    let x = g.leaf(Tensor::randn(&[2, 3], &mut rng(31)));
    let s = g.sum_all(x);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));

    let mut g = Graph::train();
    let x = g.leaf(t(&[2], &[2.0, -3.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum_all(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4.0, -6.0]);
}

#[test]
fn backward_contracts() {
    let mut g = Graph::train();
    let x = g.leaf(Tensor::ones(&[3]));
    let y = g.scale(x, 2.0);
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    let s = g.sum_all(y);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::Contract(_))));
    g.zero_grad();
    g.backward(s).unwrap();

    let mut g = Graph::train();
    let c = g.constant(Tensor::ones(&[3]));
    let s = g.sum_all(c);
    assert!(matches!(g.backward(s), Err(Error::Contract(_))));

    let mut g = Graph::inference();
    let x = g.leaf(Tensor::ones(&[3]));
    let s = g.sum_all(x);
    assert!(matches!(g.backward(s), Err(Error::Contract(_))));
}

#[test]
fn reductions_are_deterministic() {
    let x = Tensor::randn(&[4, 16, 16], &mut rng(32));
    let run = || {
        let mut g = Graph::inference();
        let v = g.constant(x.clone());
        let m = g.mean_axis(v, 1).unwrap();
        let s = g.sum_all(m);
        g.value(s).item().unwrap().to_bits()
    };
    assert_eq!(run(), run());
}

#[test]
fn fault_injection_changes_gradient() {
    let mut g = Graph::train();
    g.inject_fault(Some(OpKind::Unary(Unary::Sigmoid)));
    let x = g.leaf(t(&[1], &[0.3]));
    let y = g.sigmoid(x);
    let s = g.sum_all(y);
    g.backward(s).unwrap();
    let s0 = sigmoid(0.3);
    assert!((g.grad(x).unwrap()[0] - 1.5 * s0 * (1.0 - s0)).abs() < 1e-15);
}
