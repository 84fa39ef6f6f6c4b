use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Weighted sum with fixed pseudo-random weights so every output coordinate
/// contributes to the gradient with a distinct factor.
fn probe(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = Tensor::from_fn(shape, |i| ((i * 7919 % 13) as f64 - 6.0) / 5.0 + 0.05);
    let wv = tape.constant(w);
    let m = tape.mul(y, wv)?;
    tape.sum(m)
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let i2 = tape.constant(Tensor::eye(2));
    let id = tape.matmul(i2, i2).unwrap();
    assert_eq!(tape.value(id), &Tensor::eye(2));

    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &t(&[2, 1], &[3.0, 7.0]));

    let bad = tape.constant(Tensor::ones([3, 1]));
    assert!(matches!(tape.matmul(a, bad), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn matmul_broadcasts_batch_prefix() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(av, bv).unwrap();
    assert_eq!(tape.shape(c), &[2, 3, 2]);
    for z in 0..2 {
        for i in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..4).map(|k| a.at(&[z, i, k]) * b.at(&[k, j])).sum();
                assert!((tape.value(c).at(&[z, i, j]) - want).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn matmul_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let r = grad_check_many(
        |tape, v| {
            let c = tape.matmul(v[0], v[1])?;
            probe(tape, c)
        },
        &[a, b],
        1e-5,
        None,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn conv2d_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[1, 3, 3]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let k = tape.constant(Tensor::ones([1, 1, 1, 1]));
    let y = tape.conv2d(xv, k, 1, 0).unwrap();
    assert_eq!(tape.value(y), &x);

    let ones = tape.constant(Tensor::ones([1, 3, 3]));
    let k3 = tape.constant(Tensor::ones([1, 1, 3, 3]));
    let y = tape.conv2d(ones, k3, 1, 1).unwrap();
    let yv = tape.value(y);
    assert_eq!(yv.shape(), &[1, 3, 3]);
    assert_eq!(yv.at(&[0, 1, 1]), 9.0);
    assert_eq!(yv.at(&[0, 0, 0]), 4.0);
    assert_eq!(yv.at(&[0, 0, 1]), 6.0);

    let strided = tape.conv2d(ones, k3, 2, 1).unwrap();
    assert_eq!(tape.shape(strided), &[1, 2, 2]);
    assert!(matches!(tape.conv2d(ones, k3, 0, 1), Err(Error::InvalidParam(_))));
    let wrong_c = tape.constant(Tensor::ones([1, 2, 3, 3]));
    assert!(matches!(tape.conv2d(ones, wrong_c, 1, 1), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn conv2d_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&mut rng, &[2, 5, 5]);
    let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    for (stride, pad) in [(1, 1), (2, 0), (2, 2)] {
        let r = grad_check_many(
            |tape, v| {
                let y = tape.conv2d(v[0], v[1], stride, pad)?;
                probe(tape, y)
            },
            &[x.clone(), k.clone()],
            1e-5,
            None,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "stride {stride} pad {pad}: {r:?}");
    }
}

#[test]
fn linear_examples_and_grad() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let w = tape.constant(Tensor::eye(2));
    let y = tape.linear(x, w, None).unwrap();
    assert_eq!(tape.value(y), &t(&[1, 2], &[1.0, 2.0]));

    let x = tape.constant(t(&[2], &[1.0, 2.0]));
    let w = tape.constant(t(&[1, 2], &[1.0, 1.0]));
    let b = tape.constant(t(&[1], &[0.5]));
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y), &t(&[1], &[3.5]));

    let w_bad = tape.constant(Tensor::ones([1, 3]));
    assert!(tape.linear(x, w_bad, None).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inputs = [rand_tensor(&mut rng, &[4, 6]), rand_tensor(&mut rng, &[3, 6]), rand_tensor(&mut rng, &[3])];
    let r = grad_check_many(
        |tape, v| {
            let y = tape.linear(v[0], v[1], Some(v[2]))?;
            probe(tape, y)
        },
        &inputs,
        1e-5,
        None,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.constant(t(&[2], &[2f64.ln(), 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] - 2.0 / 3.0).abs() < 1e-15 && (v[1] - 1.0 / 3.0).abs() < 1e-15);

    let a = tape.constant(Tensor::full([3], 5.0));
    let b = tape.constant(Tensor::zeros([3]));
    let (ya, yb) = (tape.softmax(a, 0).unwrap(), tape.softmax(b, 0).unwrap());
    assert_eq!(tape.value(ya), tape.value(yb));
    assert!(tape.softmax(a, 1).is_err());
}

#[test]
fn softmax_grad_along_inner_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    for axis in 0..3 {
        let e = grad_check(
            |tape, v| {
                let y = tape.softmax(v, axis)?;
                probe(tape, y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-6, "axis {axis}: {e}");
    }
}

#[test]
fn sigmoid_examples_and_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = rand_tensor(&mut rng, &[2, 3]);
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros([1]));
    let s = tape.sigmoid(z).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5]);
    let xv = tape.constant(x.clone());
    let nx = tape.scale(xv, -1.0).unwrap();
    let (a, b) = (tape.sigmoid(xv).unwrap(), tape.sigmoid(nx).unwrap());
    for (p, q) in tape.value(a).data().iter().zip(tape.value(b).data()) {
        assert!((p + q - 1.0).abs() < 1e-15);
    }
    let e = grad_check(
        |tape, v| {
            let y = tape.sigmoid(v)?;
            probe(tape, y)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(e < 1e-6, "{e}");
}

#[test]
fn layer_norm_examples_and_grad() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::ones([3]));
    let b = tape.constant(Tensor::zeros([3]));
    let c = tape.constant(Tensor::full([3], 4.2));
    let y = tape.layer_norm(c, g, b, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-12));

    let g2 = tape.constant(Tensor::ones([2]));
    let b2 = tape.constant(Tensor::zeros([2]));
    let x = tape.constant(t(&[2], &[1.0, 3.0]));
    let y = tape.layer_norm(x, g2, b2, 1e-12).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] + 1.0).abs() < 1e-10 && (v[1] - 1.0).abs() < 1e-10);
    assert!(tape.layer_norm(x, g, b, 1e-5).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let inputs = [rand_tensor(&mut rng, &[2, 4]), rand_tensor(&mut rng, &[4]), rand_tensor(&mut rng, &[4])];
    let r = grad_check_many(
        |tape, v| {
            let y = tape.layer_norm(v[0], v[1], v[2], 1e-5)?;
            probe(tape, y)
        },
        &inputs,
        1e-5,
        None,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}

#[test]
fn gelu_examples_and_grad() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, 6.0, -6.0]));
    let y = tape.gelu(x).unwrap();
    let v = tape.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 6.0).abs() < 1e-3);
    assert!(v[2].abs() < 1e-3);

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_tensor(&mut rng, &[3, 3]).map(|v| 3.0 * v);
    let e = grad_check(
        |tape, v| {
            let y = tape.gelu(v)?;
            probe(tape, y)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(e < 1e-4, "{e}");
}

#[test]
fn pooling_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let a = tape.pool_spatial(x, PoolMode::Avg).unwrap();
    let m = tape.pool_spatial(x, PoolMode::Max).unwrap();
    assert_eq!(tape.value(a), &t(&[1, 1, 1], &[2.5]));
    assert_eq!(tape.value(m), &t(&[1, 1, 1], &[4.0]));

    let c = tape.constant(Tensor::full([2, 3, 3], 1.5));
    for mode in [PoolMode::Avg, PoolMode::Max] {
        let p = tape.pool_spatial(c, mode).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| v == 1.5));
    }

    let two = tape.constant(t(&[2, 1, 1], &[1.0, 3.0]));
    let a = tape.pool_channel(two, PoolMode::Avg).unwrap();
    let m = tape.pool_channel(two, PoolMode::Max).unwrap();
    assert_eq!(tape.value(a).data(), &[2.0]);
    assert_eq!(tape.value(m).data(), &[3.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let one = rand_tensor(&mut rng, &[1, 4, 5]);
    let ov = tape.constant(one.clone());
    for mode in [PoolMode::Avg, PoolMode::Max] {
        let p = tape.pool_channel(ov, mode).unwrap();
        assert_eq!(tape.shape(p), &[1, 4, 5]);
        assert_eq!(tape.value(p).data(), one.data());
    }
}

#[test]
fn pooling_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = rand_tensor(&mut rng, &[3, 4, 4]);
    for mode in [PoolMode::Avg, PoolMode::Max] {
        let e = grad_check(
            |tape, v| {
                let a = tape.pool_spatial(v, mode)?;
                let b = tape.pool_channel(v, mode)?;
                let (pa, pb) = (probe(tape, a)?, probe(tape, b)?);
                tape.add(pa, pb)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-6, "{mode:?}: {e}");
    }
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    // A second call recomputes rather than accumulating.
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);

    assert!(matches!(tape.backward(sq), Err(Error::NotScalar(_))));
    let mut other = Tape::new();
    let foreign = other.param(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(foreign), Err(Error::NoTape)));
    assert!(matches!(tape.sum(foreign), Err(Error::NoTape)));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let c = tape.constant(t(&[2], &[3.0, 4.0]));
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
    assert!(tape.grad(c).is_none());
}

#[test]
fn grad_check_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = rand_tensor(&mut rng, &[5]);
    let lin = grad_check(|tape, v| probe(tape, v), &x, 1e-5).unwrap();
    assert!(lin < 1e-9, "{lin}");

    let sig = grad_check(
        |tape, v| {
            let y = tape.sigmoid(v)?;
            tape.sum(y)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(sig < 1e-6, "{sig}");

    let logits = rand_tensor(&mut rng, &[4, 5]).map(|v| 2.0 * v);
    let ce = grad_check(|tape, v| tape.cross_entropy(v, &[0, 3, 4, 1]), &logits, 1e-5).unwrap();
    assert!(ce < 1e-5, "{ce}");

    assert!(matches!(grad_check(|tape, v| tape.sum(v), &x, 1e-2), Err(Error::InvalidParam(_))));
    let nan = grad_check(
        |tape, v| {
            let z = tape.constant(Tensor::zeros([5]));
            let d = tape.div(v, z)?;
            let d = tape.mul(d, z)?;
            tape.sum(d)
        },
        &x,
        1e-5,
    );
    assert!(matches!(nan, Err(Error::NonFinite(_))));
}

#[test]
fn remaining_ops_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[3, 1]).map(|v| v + 2.0);
    let r = grad_check_many(
        |tape, v| {
            let s = tape.add(v[0], v[1])?;
            let d = tape.sub(s, v[1])?;
            let q = tape.div(d, v[1])?;
            let m = tape.mul(q, v[1])?;
            let p = tape.permute(m, &[2, 0, 1])?;
            let c = tape.concat(&[p, p], 1)?;
            let sa = tape.sum_axis(c, 2)?;
            let r = tape.relu(sa)?;
            let sh = tape.add_scalar(r, 0.3)?;
            let rs = tape.reshape(sh, &[16])?;
            probe(tape, rs)
        },
        &[a, b],
        1e-5,
        None,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");

    let x = rand_tensor(&mut rng, &[6]);
    let targets = [0.0, 1.0, 0.2, 0.9, 1.0, 0.0];
    let weights = [1.0, 0.0, 2.0, 1.0, 1.0, 0.5];
    let e = grad_check(
        |tape, v| {
            let s = tape.scale(v, 3.0)?;
            let l1 = tape.bce_with_logits(s, &targets)?;
            let l2 = tape.smooth_l1(s, &targets, &weights, 1.0)?;
            tape.add(l1, l2)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(e < 1e-6, "{e}");
}

#[test]
fn reindex_zero_fill_and_bounds() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
    let y = tape.reindex(x, &[4], vec![2, ZERO_FILL, 0, 2].into()).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 0.0, 1.0, 3.0]);
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 2.0]);
    assert!(tape.reindex(x, &[1], vec![7].into()).is_err());
}
