use dgagan_core::gradcheck::finite_difference_check;
use dgagan_core::{ConvGeometry, Error, Graph, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn lcg(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed;
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

#[test]
fn tensor_rejects_inconsistent_length() {
    assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
    assert_eq!(Tensor::zeros(&[2, 3, 4]).numel(), 24);
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2], &[1.0, 2.0]));
    let b = g.constant(t(&[2], &[3.0, 4.0]));
    let s = g.add(a, b).unwrap();
    assert_eq!(g.value(s).data(), &[4.0, 6.0]);
    let m = g.mul_scalar(a, 1.0).unwrap();
    assert_eq!(g.value(m).data(), g.value(a).data());

    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[-0.5, 0.25]));
    let y = g.abs(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.25]);
    let loss = g.sum(y).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[-1.0, 1.0]);

    let fd = finite_difference_check(
        |g, x| {
            let a = g.abs(x)?;
            g.sum(a)
        },
        &t(&[2], &[-0.5, 0.25]),
        1e-5,
    )
    .unwrap();
    assert!(fd.max_relative_error < 1e-9);
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let a = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let ia = g.matmul(i, a).unwrap();
    assert_eq!(g.value(ia), g.value(a));

    let l = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let r = g.constant(t(&[2, 1], &[1.0, 1.0]));
    let p = g.matmul(l, r).unwrap();
    assert_eq!(g.value(p).shape(), &[2, 1]);
    assert_eq!(g.value(p).data(), &[3.0, 7.0]);
    assert!(g.matmul(l, a).is_ok());
    assert!(g.matmul(a, l).is_err());
}

#[test]
fn matmul_sum_gradient_is_row_sums_of_b() {
    let b = t(&[3, 2], &[1.0, -2.0, 0.5, 4.0, 3.0, 1.5]);
    let mut g = Graph::new();
    let a = g.leaf(Tensor::from_vec(lcg(6, 3)).reshape(&[2, 3]).unwrap());
    let bv = g.constant(b.clone());
    let p = g.matmul(a, bv).unwrap();
    let loss = g.sum(p).unwrap();
    let grads = g.backward(loss).unwrap();
    let row_sums: Vec<f64> = b.data().chunks(2).map(|r| r.iter().sum()).collect();
    let ga = grads.get(a).unwrap();
    for row in ga.data().chunks(3) {
        for (x, y) in row.iter().zip(&row_sums) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn conv3d_identity_kernel_and_its_backward() {
    let x = Tensor::from_vec(lcg(2 * 27, 5)).reshape(&[2, 3, 3, 3]).unwrap();
    let mut k = Tensor::zeros(&[2, 2, 1, 1, 1]);
    k.data_mut()[0] = 1.0;
    k.data_mut()[3] = 1.0;
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let kv = g.constant(k);
    let y = g.conv3d(xv, kv, ConvGeometry::UNIT).unwrap();
    assert_eq!(g.value(y), &x);
    let w = g.constant(Tensor::from_vec(lcg(54, 9)).reshape(&[2, 3, 3, 3]).unwrap());
    let weighted = g.mul(y, w).unwrap();
    let loss = g.sum(weighted).unwrap();
    let upstream = g.value(w).clone();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(xv).unwrap(), &upstream);
}

#[test]
fn conv3d_dilation_underflow_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[1, 4, 4, 4]));
    let k = g.constant(Tensor::ones(&[1, 1, 3, 3, 3]));
    let geom = ConvGeometry {
        stride: [1; 3],
        dilation: [2; 3],
        padding: [0; 3],
    };
    assert!(matches!(g.conv3d(x, k, geom), Err(Error::ExtentUnderflow { .. })));
}

#[test]
fn conv3d_output_extent_formula() {
    for (input, pad, dil, stride, k) in [(9, 1, 1, 2, 3), (16, 4, 4, 1, 3), (8, 1, 1, 2, 4), (7, 0, 2, 1, 3)] {
        let geom = ConvGeometry {
            stride: [stride; 3],
            dilation: [dil; 3],
            padding: [pad; 3],
        };
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, input, input, input]));
        let kv = g.constant(Tensor::ones(&[1, 1, k, k, k]));
        let y = g.conv3d(x, kv, geom).unwrap();
        let expected = (input + 2 * pad - dil * (k - 1) - 1) / stride + 1;
        assert_eq!(g.shape(y), &[1, expected, expected, expected]);
    }
}

#[test]
fn conv3d_dilation_two_matches_finite_differences() {
    let x = Tensor::from_vec(lcg(2 * 216, 11)).reshape(&[2, 6, 6, 6]).unwrap();
    let k = Tensor::from_vec(lcg(3 * 2 * 27, 12)).reshape(&[3, 2, 3, 3, 3]).unwrap();
    let w = Tensor::from_vec(lcg(3 * 216, 13)).reshape(&[3, 6, 6, 6]).unwrap();
    let geom = ConvGeometry::same(3, 2);
    let fd = finite_difference_check(
        |g, xv| {
            let kv = g.constant(k.clone());
            let y = g.conv3d(xv, kv, geom)?;
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv)?;
            g.sum(p)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(fd.max_relative_error <= 1e-4, "{}", fd.max_relative_error);
    let fd = finite_difference_check(
        |g, kv| {
            let xv = g.constant(x.clone());
            let y = g.conv3d(xv, kv, geom)?;
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv)?;
            g.sum(p)
        },
        &k,
        1e-5,
    )
    .unwrap();
    assert!(fd.max_relative_error <= 1e-4, "{}", fd.max_relative_error);
}

#[test]
fn global_avg_pool_examples() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[1, 2, 2, 2], 0.7));
    let p = g.global_avg_pool(c).unwrap();
    assert!((g.value(p).data()[0] - 0.7).abs() < 1e-15);

    let x = g.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(p).data(), &[2.5]);
    let loss = g.sum(p).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.25));
}

#[test]
fn activation_examples() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2], &[-1.0, 2.0]));
    let r = g.relu(a).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 2.0]);
    let z = g.constant(Tensor::scalar(0.0));
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.value(s).item().unwrap(), 0.5);
    let e = g.constant(Tensor::full(&[2, 4], 3.0));
    let sm = g.softmax(e, 1).unwrap();
    assert!(g.value(sm).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[0.0, 1.0, -1.0]));
    let r = g.relu(x).unwrap();
    let loss = g.sum(r).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(lcg(60, 21)).scale(20.0).reshape(&[3, 4, 5]).unwrap());
    for axis in 0..3 {
        let s = g.softmax(x, axis).unwrap();
        let v = g.value(s).clone();
        assert!(v.data().iter().all(|&p| p >= 0.0));
        let shape = v.shape().to_vec();
        let strides = [shape[1] * shape[2], shape[2], 1];
        for i in 0..v.numel() {
            let coord = [i / strides[0], (i / strides[1]) % shape[1], i % shape[2]];
            if coord[axis] != 0 {
                continue;
            }
            let total: f64 = (0..shape[axis]).map(|j| v.data()[i + j * strides[axis]]).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[0.3, -2.0, 5.0]));
    let loss = g.sum(x).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1.0, -2.0]));
    let sq = g.square(x).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0]);
}

#[test]
fn constants_never_receive_gradients() {
    let mut g = Graph::new();
    let c = g.constant(t(&[2], &[1.0, 2.0]));
    let x = g.leaf(t(&[2], &[3.0, 4.0]));
    let p = g.mul(c, x).unwrap();
    let loss = g.sum(p).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap().shape(), &[2]);
}

#[test]
fn backward_requires_scalar_and_single_use() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    let loss = g.sum(x).unwrap();
    g.backward(loss).unwrap();
    assert!(matches!(g.backward(loss), Err(Error::StaleGraph)));
}

#[test]
fn gradient_of_sum_of_losses_is_sum_of_gradients() {
    let at = Tensor::from_vec(lcg(8, 31));
    let grad_of = |which: u8| {
        let mut g = Graph::new();
        let x = g.leaf(at.clone());
        let sq = g.square(x).unwrap();
        let l1 = g.sum(sq).unwrap();
        let th = g.tanh(x).unwrap();
        let l2 = g.mean(th).unwrap();
        let loss = match which {
            0 => l1,
            1 => l2,
            _ => g.add(l1, l2).unwrap(),
        };
        g.backward(loss).unwrap().take(x).unwrap()
    };
    let (a, b, both) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..at.numel() {
        assert!((a.data()[i] + b.data()[i] - both.data()[i]).abs() < 1e-14);
    }
}

#[test]
fn composite_conv_relu_gap_matches_finite_differences() {
    let x = Tensor::from_vec(lcg(2 * 125, 41)).reshape(&[2, 5, 5, 5]).unwrap();
    let k = Tensor::from_vec(lcg(3 * 2 * 27, 42)).reshape(&[3, 2, 3, 3, 3]).unwrap();
    let fd = finite_difference_check(
        |g, kv| {
            let xv = g.constant(x.clone());
            let y = g.conv3d(xv, kv, ConvGeometry::same(3, 1))?;
            let r = g.relu(y)?;
            let p = g.global_avg_pool(r)?;
            let sq = g.square(p)?;
            g.sum(sq)
        },
        &k,
        1e-5,
    )
    .unwrap();
    assert!(fd.max_relative_error <= 1e-4, "{}", fd.max_relative_error);
}

#[test]
fn finite_difference_check_examples() {
    let lin = finite_difference_check(|g, x| g.sum(x), &Tensor::from_vec(lcg(5, 1)), 1e-5).unwrap();
    assert!(lin.max_relative_error < 1e-9);
    let sq = finite_difference_check(
        |g, x| {
            let s = g.square(x)?;
            g.sum(s)
        },
        &t(&[3], &[1.0, 2.0, 3.0]),
        1e-5,
    )
    .unwrap();
    assert!(sq.max_relative_error <= 1e-6);
    assert_eq!(sq.analytic, vec![2.0, 4.0, 6.0]);
}

#[test]
fn gradient_suite_passes() {
    let results = dgagan_core::gradcheck::run_suite(7).unwrap();
    assert_eq!(results.len(), dgagan_core::gradcheck::suite_names().len());
    for r in &results {
        assert_eq!(r.points, dgagan_core::gradcheck::SUITE_POINTS);
        assert!(r.passed(), "{} {}", r.name, r.max_relative_error);
    }
}
