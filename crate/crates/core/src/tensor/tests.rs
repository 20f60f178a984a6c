use super::*;
use crate::gradcheck::{self, random_tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t4(shape: [usize; 4], data: Vec<f64>) -> Tensor {
    Tensor::new(&shape, data).unwrap()
}

fn identity_stats(c: usize) -> ChannelStats {
    ChannelStats::identity(c)
}

#[test]
fn conv2d_sum_of_ones() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0).unwrap());
    let w = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0).unwrap());
    let b = tape.constant(Tensor::zeros(&[1]).unwrap());
    let y = tape.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
    assert_eq!(tape.value(y).data(), &[4.0; 4]);
}

#[test]
fn conv2d_identity_kernel_with_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = random_tensor(&mut rng, &[2, 1, 5, 4], -3.0, 3.0);
    let mut kernel = vec![0.0; 9];
    kernel[4] = 1.0;
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let w = tape.constant(t4([1, 1, 3, 3], kernel));
    let b = tape.constant(Tensor::zeros(&[1]).unwrap());
    let y = tape.conv2d(x, w, b, 1, 1).unwrap();
    assert_eq!(tape.value(y).data(), input.data());
}

#[test]
fn conv2d_shape_errors_name_dimension() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]).unwrap());
    let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]).unwrap());
    let b = tape.constant(Tensor::zeros(&[1]).unwrap());
    let err = tape.conv2d(x, w, b, 1, 1).unwrap_err();
    assert!(matches!(err, TensorError::ShapeMismatch { dim: "C", .. }), "{err}");

    let w = tape.constant(Tensor::zeros(&[1, 2, 3, 3]).unwrap());
    let err = tape.conv2d(x, w, b, 2, 0).unwrap_err();
    assert!(matches!(err, TensorError::Divisibility { .. }), "{err}");
}

#[test]
fn maxpool_takes_window_max() {
    let mut tape = Tape::new();
    let x = tape.leaf(t4([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]), true);
    let y = tape.maxpool2x(x).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn maxpool_constant_input_and_first_maximizer() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[1, 2, 4, 4], 2.5).unwrap(), true);
    let y = tape.maxpool2x(x).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 2, 2]);
    assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap();
    // ties resolve to the top-left element of each window
    assert_eq!(g[0], 1.0);
    assert_eq!(g[1], 0.0);
    assert_eq!(g[4], 0.0);
    assert_eq!(g.iter().sum::<f64>(), 8.0);
}

#[test]
fn maxpool_gradient_is_one_hot_per_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = random_tensor(&mut rng, &[2, 3, 6, 8], -1.0, 1.0);
    let mut tape = Tape::new();
    let x = tape.leaf(input, true);
    let y = tape.maxpool2x(x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap();
    for plane in 0..6 {
        for wy in 0..3 {
            for wx in 0..4 {
                let base = plane * 48 + 2 * wy * 8 + 2 * wx;
                let window = [g[base], g[base + 1], g[base + 8], g[base + 9]];
                assert_eq!(window.iter().filter(|&&v| v == 1.0).count(), 1);
                assert_eq!(window.iter().sum::<f64>(), 1.0);
            }
        }
    }
}

#[test]
fn maxpool_rejects_odd_extent() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 3, 4]).unwrap());
    assert!(matches!(
        tape.maxpool2x(x).unwrap_err(),
        TensorError::Divisibility { what: "H", .. }
    ));
}

#[test]
fn upsample_replicates_blocks() {
    let mut tape = Tape::new();
    let x = tape.constant(t4([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let y = tape.upsample_nearest2x(x).unwrap();
    assert_eq!(
        tape.value(y).data(),
        &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
    );
    let total: f64 = tape.value(y).data().iter().sum();
    assert_eq!(total, 4.0 * 10.0);
}

#[test]
fn batchnorm_constant_channel_maps_to_beta() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2, 1, 3, 3], 7.0).unwrap());
    let g = tape.constant(Tensor::full(&[1], 1.0).unwrap());
    let b = tape.constant(Tensor::zeros(&[1]).unwrap());
    let (y, stats) = tape.batchnorm2d(x, g, b, &identity_stats(1), BnMode::Train).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![7.0]);
    assert_eq!(stats.var, vec![0.0]);
}

#[test]
fn batchnorm_train_output_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let input = random_tensor(&mut rng, &[3, 2, 4, 5], -4.0, 9.0);
    let gamma = [1.7, 0.4];
    let beta = [-0.3, 2.0];
    let mut tape = Tape::new();
    let x = tape.constant(input);
    let g = tape.constant(Tensor::new(&[2], gamma.to_vec()).unwrap());
    let b = tape.constant(Tensor::new(&[2], beta.to_vec()).unwrap());
    let (y, stats) = tape.batchnorm2d(x, g, b, &identity_stats(2), BnMode::Train).unwrap();
    let stats = stats.unwrap();
    let out = tape.value(y).data();
    for c in 0..2 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|n| out[(n * 2 + c) * 20..][..20].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / 60.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 60.0;
        assert!((mean - beta[c]).abs() < 1e-12);
        // eps shrinks the variance by var / (var + eps)
        let expected = gamma[c] * gamma[c] * stats.var[c] / (stats.var[c] + BN_EPS);
        assert!((var - expected).abs() < 1e-12, "{var} vs {expected}");
        assert!((var - gamma[c] * gamma[c]).abs() < 1e-4);
    }
}

#[test]
fn batchnorm_eval_uses_running_stats() {
    let mut tape = Tape::new();
    let x = tape.constant(t4([1, 1, 1, 2], vec![1.0, 3.0]));
    let g = tape.constant(Tensor::full(&[1], 2.0).unwrap());
    let b = tape.constant(Tensor::full(&[1], 0.5).unwrap());
    let running = ChannelStats {
        mean: vec![1.0],
        var: vec![4.0],
    };
    let (y, stats) = tape.batchnorm2d(x, g, b, &running, BnMode::Eval).unwrap();
    assert!(stats.is_none());
    let inv = 1.0 / (4.0 + BN_EPS).sqrt();
    assert_eq!(tape.value(y).data(), &[0.5, 2.0 * 2.0 * inv + 0.5]);
}

#[test]
fn running_stats_momentum() {
    let mut running = ChannelStats::identity(1);
    running.update(&ChannelStats {
        mean: vec![10.0],
        var: vec![3.0],
    });
    assert!((running.mean[0] - 1.0).abs() < 1e-15);
    assert!((running.var[0] - 1.2).abs() < 1e-15);
}

#[test]
fn batchnorm_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 2, 2]).unwrap());
    let g = tape.constant(Tensor::zeros(&[3]).unwrap());
    let b = tape.constant(Tensor::zeros(&[2]).unwrap());
    let err = tape.batchnorm2d(x, g, b, &identity_stats(2), BnMode::Train).unwrap_err();
    assert!(matches!(err, TensorError::ShapeMismatch { dim: "gamma", .. }));
}

#[test]
fn activations() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5]);
}

#[test]
fn sigmoid_stays_open_interval_at_extremes() {
    for x in [-1000.0, -50.0, 40.0, 1000.0] {
        let s = sigmoid(x);
        assert!(s > 0.0 && s < 1.0, "{x} -> {s}");
    }
}

#[test]
fn concat_preserves_order_and_slices_back() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
    let mut tape = Tape::new();
    let va = tape.constant(a.clone());
    let vb = tape.constant(b.clone());
    let y = tape.concat_channels(&[va, vb]).unwrap();
    assert_eq!(tape.shape(y), &[2, 5, 3, 3]);
    assert_eq!(tape.value(y).slice_channels(0, 2).unwrap(), a);
    assert_eq!(tape.value(y).slice_channels(2, 3).unwrap(), b);

    let single = tape.concat_channels(&[va]).unwrap();
    assert_eq!(tape.value(single).data(), a.data());
}

#[test]
fn concat_spatial_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[1, 1, 2, 2]).unwrap());
    let b = tape.constant(Tensor::zeros(&[1, 1, 2, 4]).unwrap());
    assert!(matches!(
        tape.concat_channels(&[a, b]).unwrap_err(),
        TensorError::ShapeMismatch { dim: "W", .. }
    ));
}

#[test]
fn add_and_gradients() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
    let b = tape.leaf(Tensor::new(&[2], vec![3.0, 4.0]).unwrap(), true);
    let z = tape.constant(Tensor::zeros(&[2]).unwrap());
    let y = tape.add(a, b).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0, 6.0]);
    let same = tape.add(a, z).unwrap();
    assert_eq!(tape.value(same).data(), &[1.0, 2.0]);
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0]);
    assert_eq!(tape.grad(b).unwrap(), &[1.0, 1.0]);

    let c = tape.constant(Tensor::zeros(&[3]).unwrap());
    assert!(tape.add(a, c).is_err());
}

#[test]
fn channel_scale_identity_and_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let input = random_tensor(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let ones = tape.constant(Tensor::full(&[3], 1.0).unwrap());
    let zeros = tape.constant(Tensor::zeros(&[3]).unwrap());
    let y1 = tape.channel_scale(x, ones).unwrap();
    let y0 = tape.channel_scale(x, zeros).unwrap();
    assert_eq!(tape.value(y1).data(), input.data());
    assert!(tape.value(y0).data().iter().all(|&v| v == 0.0));
    let bad = tape.constant(Tensor::zeros(&[2]).unwrap());
    assert!(tape.channel_scale(x, bad).is_err());
}

#[test]
fn channel_group_sum_examples() {
    let planes = [1.0, 2.0, 3.0, 4.0];
    let data: Vec<f64> = planes.iter().flat_map(|&v| [v; 4]).collect();
    let mut tape = Tape::new();
    let x = tape.constant(t4([1, 4, 2, 2], data));
    let y = tape.channel_group_sum(x, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[3., 3., 3., 3., 7., 7., 7., 7.]);
    let full = tape.channel_group_sum(x, 4).unwrap();
    assert_eq!(tape.value(full).data(), &[10.0; 4]);
    assert!(matches!(
        tape.channel_group_sum(x, 3).unwrap_err(),
        TensorError::Divisibility { .. }
    ));
}

#[test]
fn global_avg_pool_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(t4([1, 2, 2, 2], vec![1., 3., 5., 7., 2., 2., 2., 2.]), true);
    let y = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.shape(y), &[1, 2]);
    assert_eq!(tape.value(y).data(), &[4.0, 2.0]);
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.25));
}

#[test]
fn bce_examples() {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::scalar(0.5));
    let y = tape.constant(Tensor::scalar(1.0));
    let l = tape.bce_loss(p, y, BCE_CLAMP_EPS).unwrap();
    assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

    let one = tape.constant(Tensor::scalar(1.0));
    let l = tape.bce_loss(one, y, BCE_CLAMP_EPS).unwrap();
    let v = tape.value(l).data()[0];
    assert!((0.0..=2.0 * BCE_CLAMP_EPS).contains(&v));

    let other = tape.constant(Tensor::zeros(&[2]).unwrap());
    assert!(tape.bce_loss(p, other, BCE_CLAMP_EPS).is_err());
}

#[test]
fn mae_examples() {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(&[2], vec![0.75, 0.25]).unwrap());
    let y = tape.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
    let l = tape.mae_loss(p, y).unwrap();
    assert_eq!(tape.value(l).data(), &[0.25]);
    let l0 = tape.mae_loss(p, p).unwrap();
    assert_eq!(tape.value(l0).data(), &[0.0]);
}

#[test]
fn backward_simple_cases() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);

    // repeated backward after zeroing is bit-identical
    let first = tape.grad(x).unwrap().to_vec();
    tape.zero_grad();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &first[..]);
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[3]).unwrap(), true);
    assert_eq!(tape.backward(x).unwrap_err(), TensorError::NotScalar { numel: 3 });
}

#[test]
fn detached_values_do_not_propagate() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
    let d = tape.detach(x);
    let y = tape.add(x, d).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    assert!(tape.grad(d).is_none());
}

#[test]
fn tape_records_in_topological_order() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[1, 2, 2, 2], vec![1.0; 8]).unwrap(), true);
    let y = tape.relu(x).unwrap();
    let z = tape.channel_group_sum(y, 2).unwrap();
    let s = tape.sum(z).unwrap();
    for v in [y, z, s] {
        assert!(tape.op(v).inputs().iter().all(|i| i.index() < v.index()));
    }
    assert_eq!(tape.op(z).kind(), "channel_group_sum");
}

#[test]
fn every_primitive_passes_finite_differences() {
    let reports = gradcheck::primitive_suite(2024).unwrap();
    assert!(reports.len() >= 17);
    for r in &reports {
        assert!(r.passed(), "{r}");
    }
}

fn arb_planes() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..4, 1usize..4, prop::sample::select(vec![1usize, 2, 4]))
        .prop_flat_map(|(n, groups, k)| {
            let c = groups * k;
            (Just(n), Just(k), prop::collection::vec(-1e3f64..1e3, n * c * 4))
        })
        .prop_map(|(n, k, data)| (n, k, data))
}

proptest! {
    #[test]
    fn group_sum_preserves_total((n, k, data) in arb_planes()) {
        let c = data.len() / (n * 4);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[n, c, 2, 2], data.clone()).unwrap());
        let y = tape.channel_group_sum(x, k).unwrap();
        // same additions in the same order: group members, then groups
        let mut expected = 0.0;
        for b in 0..n {
            for z in 0..c / k {
                for p in 0..4 {
                    let mut s = 0.0;
                    for i in 0..k {
                        s += data[(b * c + z * k + i) * 4 + p];
                    }
                    expected += s;
                }
            }
        }
        let mut total = 0.0;
        for b in 0..n {
            for z in 0..c / k {
                for p in 0..4 {
                    total += tape.value(y).data()[(b * (c / k) + z) * 4 + p];
                }
            }
        }
        prop_assert_eq!(total.to_bits(), expected.to_bits());
        let direct: f64 = data.iter().sum();
        prop_assert!((total - direct).abs() <= 1e-9 * data.iter().map(|v| v.abs()).sum::<f64>().max(1.0));
    }

    #[test]
    fn activation_ranges(xs in prop::collection::vec(-800f64..800.0, 1..64)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[xs.len()], xs).unwrap());
        let s = tape.sigmoid(x).unwrap();
        let r = tape.relu(x).unwrap();
        prop_assert!(tape.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
        prop_assert!(tape.value(r).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn forward_ops_are_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let x = tape.constant(random_tensor(&mut rng, &[2, 3, 8, 8], -1.0, 1.0));
            let w = tape.constant(random_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0));
            let b = tape.constant(random_tensor(&mut rng, &[4], -1.0, 1.0));
            let y = tape.conv2d(x, w, b, 1, 1).unwrap();
            let p = tape.maxpool2x(y).unwrap();
            let u = tape.upsample_nearest2x(p).unwrap();
            tape.value(u).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
