use super::gradcheck::{check_grad, finite_diff_grad, worst_violation, ATOL, RTOL};
use super::{ComputeGraph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], scale: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

#[test]
fn matmul_identity_left() {
    let eye = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let b = Tensor::from_vec(&[3, 3], (0..9).map(|i| i as f32 * 0.7 - 2.0).collect()).unwrap();
    let y = eye.matmul(&b).unwrap();
    assert_eq!(y.to_vec(), b.to_vec());
    let y2 = b.matmul(&eye).unwrap();
    assert_eq!(y2.to_vec(), b.to_vec());
}

#[test]
fn matmul_small_case() {
    let a = Tensor::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
    let b = Tensor::from_vec(&[2, 1], vec![5., 6.]).unwrap();
    let y = a.matmul(&b).unwrap();
    assert_eq!(y.shape(), vec![2, 1]);
    assert_eq!(y.to_vec(), vec![17., 39.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[4, 2]);
    let err = a.matmul(&b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let a = rand_tensor(&[3, 4], 1.0, &mut rng);
        let b = rand_tensor(&[4, 2], 1.0, &mut rng);
        // d(sum(A·B))/dA
        let worst = check_grad(&mut |t| Ok(t.matmul(&b)?.sum()), &a, 1e-3).unwrap();
        assert!(worst <= 1.0, "violation {worst}");
        // d(sum(A·B))/dB
        let worst = check_grad(&mut |t| Ok(a.matmul(t)?.sum()), &b, 1e-3).unwrap();
        assert!(worst <= 1.0, "violation {worst}");
    }
}

#[test]
fn softmax_uniform_on_equal_inputs() {
    let x = Tensor::from_vec(&[3], vec![0., 0., 0.]).unwrap();
    let y = x.softmax(0).unwrap();
    for v in y.to_vec() {
        assert!((v - 1.0 / 3.0).abs() < 1e-6);
    }
}

#[test]
fn softmax_is_overflow_safe() {
    let x = Tensor::from_vec(&[2], vec![1000.0, 0.0]).unwrap();
    let y = x.softmax(0).unwrap();
    let v = y.to_vec();
    assert!(v.iter().all(|x| x.is_finite()));
    assert!((v[0] - 1.0).abs() < 1e-6 && v[1] < 1e-6);
}

#[test]
fn softmax_direct_values() {
    let x = Tensor::from_vec(&[3], vec![1., 2., 3.]).unwrap();
    let y = x.softmax(0).unwrap().to_vec();
    let expect = [0.0900, 0.2447, 0.6652];
    for (a, e) in y.iter().zip(expect) {
        assert!((a - e).abs() < 1e-4, "{a} vs {e}");
    }
}

#[test]
fn softmax_middle_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[2, 5, 3], 2.0, &mut rng);
    let y = x.softmax(1).unwrap();
    let d = y.to_vec();
    for o in 0..2 {
        for i in 0..3 {
            let s: f32 = (0..5).map(|l| d[o * 15 + l * 3 + i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let x = Tensor::from_vec(&[2, 3], vec![5., -1., 0.5, 2., 2., 2.])
        .unwrap()
        .with_requires_grad();
    x.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
}

#[test]
fn backward_of_elementwise_square() {
    let x = Tensor::from_vec(&[2], vec![1., 2.]).unwrap().with_requires_grad();
    x.mul(&x).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2., 4.]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let x = Tensor::from_vec(&[2], vec![1., 2.]).unwrap().with_requires_grad();
    let y = x.mul(&x).unwrap();
    assert!(y.backward().is_err());
}

#[test]
fn repeated_backward_accumulates() {
    let x = Tensor::from_vec(&[2], vec![1., 2.]).unwrap().with_requires_grad();
    let loss = x.mul(&x).unwrap().sum();
    loss.backward().unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![4., 8.]);
    x.zero_grad();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2., 4.]);
}

#[test]
fn composed_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..5 {
        let _ = seed;
        // 1e-2-scale inputs through a mixed chain of ops.
        let x = rand_tensor(&[4, 4], 1e-2, &mut rng);
        let w = rand_tensor(&[4, 4], 1.0, &mut rng);
        let mut f = |t: &Tensor| -> crate::Result<Tensor> {
            let h = t.matmul(&w)?.gelu();
            let s = h.softmax(1)?;
            Ok(h.mul(&s)?.add(&h)?.mean().scale(3.0))
        };
        let leaf = x.detach().with_requires_grad();
        let loss = f(&leaf).unwrap();
        loss.backward().unwrap();
        let analytic = leaf.grad().unwrap();
        let numeric = finite_diff_grad(&mut |t| Ok(f(t).unwrap().item()), &x, 1e-3).unwrap();
        let worst = worst_violation(&analytic, &numeric, 1e-3, 1e-5);
        assert!(worst <= 1.0, "violation {worst}");
    }
}

#[test]
fn graph_visits_shared_nodes_once() {
    let x = Tensor::from_vec(&[2], vec![1., 2.]).unwrap().with_requires_grad();
    let a = x.scale(2.0);
    let b = a.mul(&a).unwrap(); // diamond: `a` consumed twice
    let loss = b.sum();
    let graph = ComputeGraph::from_root(&loss);
    let mut ids: Vec<u64> = graph.nodes().iter().map(|t| t.id()).collect();
    let before = ids.len();
    ids.dedup();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(before, ids.len(), "graph repeated a node");
    // d/dx sum((2x)^2) = 8x
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![8., 16.]);
}

#[test]
fn concat_narrow_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&[2, 3, 2, 2], 1.0, &mut rng);
    let b = rand_tensor(&[2, 1, 2, 2], 1.0, &mut rng);
    let c = Tensor::concat(&[&a, &b], 1).unwrap();
    assert_eq!(c.shape(), vec![2, 4, 2, 2]);
    assert_eq!(c.narrow(1, 0, 3).unwrap().to_vec(), a.to_vec());
    assert_eq!(c.narrow(1, 3, 1).unwrap().to_vec(), b.to_vec());
    // concat of a single tensor is the identity
    let single = Tensor::concat(&[&a], 1).unwrap();
    assert_eq!(single.to_vec(), a.to_vec());
}

#[test]
fn concat_backward_splits_gradient() {
    let a = Tensor::from_vec(&[1, 2], vec![1., 2.]).unwrap().with_requires_grad();
    let b = Tensor::from_vec(&[1, 1], vec![3.]).unwrap().with_requires_grad();
    let c = Tensor::concat(&[&a, &b], 1).unwrap();
    c.mul(&c).unwrap().sum().backward().unwrap();
    assert_eq!(a.grad().unwrap(), vec![2., 4.]);
    assert_eq!(b.grad().unwrap(), vec![6.]);
}

#[test]
fn permute_round_trip_and_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&[2, 3, 4], 1.0, &mut rng);
    let p = x.permute(&[2, 0, 1]).unwrap();
    assert_eq!(p.shape(), vec![4, 2, 3]);
    let back = p.permute(&[1, 2, 0]).unwrap();
    assert_eq!(back.to_vec(), x.to_vec());
    let worst = check_grad(&mut |t| Ok(t.permute(&[2, 0, 1])?.gelu().sum()), &x, 1e-2).unwrap();
    assert!(worst <= 1.0, "violation {worst}");
}

#[test]
fn flip_w_involution_and_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_tensor(&[1, 2, 3, 4], 1.0, &mut rng);
    assert_eq!(x.flip_w().flip_w().to_vec(), x.to_vec());
    let worst = check_grad(&mut |t| Ok(t.flip_w().mul(t)?.sum()), &x, 1e-3).unwrap();
    assert!(worst <= 1.0, "violation {worst}");
}

#[test]
fn bmm_matches_per_batch_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a = rand_tensor(&[3, 2, 4], 1.0, &mut rng);
    let b = rand_tensor(&[3, 4, 5], 1.0, &mut rng);
    let y = a.bmm(&b).unwrap();
    for i in 0..3 {
        let ai = a.narrow(0, i, 1).unwrap().reshape(&[2, 4]).unwrap();
        let bi = b.narrow(0, i, 1).unwrap().reshape(&[4, 5]).unwrap();
        let yi = ai.matmul(&bi).unwrap();
        assert_eq!(y.narrow(0, i, 1).unwrap().to_vec(), yi.to_vec());
    }
    let worst = check_grad(&mut |t| Ok(t.bmm(&b)?.mean()), &a, 1e-2).unwrap();
    assert!(worst <= 1.0, "violation {worst}");
}

#[test]
fn softmax_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..5 {
        let x = rand_tensor(&[3, 4], 1.0, &mut rng);
        let w = rand_tensor(&[3, 4], 1.0, &mut rng);
        let worst =
            check_grad(&mut |t| Ok(t.softmax(1)?.mul(&w)?.sum()), &x, 1e-3).unwrap();
        assert!(worst <= 1.0, "violation {worst}");
    }
}

#[test]
fn nonfinite_detection_names_op() {
    let x = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap().with_requires_grad();
    let bad = Tensor::from_vec(&[2], vec![f32::NAN, 1.0]).unwrap();
    let y = x.add(&bad).unwrap().sum();
    let graph = ComputeGraph::from_root(&y);
    let (label, _) = graph.first_nonfinite().unwrap();
    assert_eq!(label, "leaf");
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-1e4f32..1e4, 1..24)) {
        let n = vals.len();
        let x = Tensor::from_vec(&[n], vals).unwrap();
        let y = x.softmax(0).unwrap().to_vec();
        prop_assert!(y.iter().all(|&v| (0.0..=1.0 + 1e-6).contains(&v)));
        let sum: f32 = y.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-5, "sum {sum}");
    }

    #[test]
    fn matmul_identity_is_exact(m in 1usize..6, k in 1usize..6, seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&[m, k], 10.0, &mut rng);
        let mut eye = vec![0.0f32; k * k];
        for i in 0..k { eye[i * k + i] = 1.0; }
        let i_k = Tensor::from_vec(&[k, k], eye).unwrap();
        prop_assert_eq!(a.matmul(&i_k).unwrap().to_vec(), a.to_vec());
    }
}
