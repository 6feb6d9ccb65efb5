use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_params, rel_err};
use super::*;

fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Builds `f`, reduces with fixed random weights, and checks every param
/// gradient against central differences.
fn check(
    seed: u64,
    build: impl Fn(&mut ParamStore<f64>, &mut ChaCha8Rng) -> Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let f = build(&mut store, &mut rng);
    let probe = {
        let mut g = Graph::new(true);
        let out = f(&mut g, &store);
        rand_tensor(g.shape(out), &mut rng)
    };
    let loss = |store: &ParamStore<f64>| {
        let mut g = Graph::new(true);
        let out = f(&mut g, store);
        g.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut g = Graph::new(true);
    let out = f(&mut g, &store);
    g.backward(vec![(out, probe.clone())]);
    store.zero_grads();
    g.accumulate_param_grads(&mut store);
    let report = check_params(&mut store, 1e-5, 1, loss);
    assert!(report.checked > 0);
    assert!(report.passed(1e-5), "{report:?}");
}

fn glorot(store: &mut ParamStore<f64>, name: &str, shape: [usize; 4], rng: &mut ChaCha8Rng) -> ParamId {
    store.add(name, Collection::Unet, shape, Init::Glorot { fan_in: 4, fan_out: 4 }, rng)
}

#[test]
fn conv_gradients() {
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
        check(stride as u64 * 10 + k as u64, move |store, rng| {
            let x = glorot(store, "x", [2, 3, 6, 6], rng);
            let w = glorot(store, "w", [4, 3, k, k], rng);
            let b = glorot(store, "b", [4, 1, 1, 1], rng);
            Box::new(move |g, s| {
                let (x, w, b) = (g.param(s, x), g.param(s, w), g.param(s, b));
                g.conv2d(x, w, Some(b), stride, pad)
            })
        });
    }
}

#[test]
fn dense_and_reshape_gradients() {
    check(1, |store, rng| {
        let x = glorot(store, "x", [3, 2, 2, 2], rng);
        let w = glorot(store, "w", [8, 5, 1, 1], rng);
        let b = glorot(store, "b", [5, 1, 1, 1], rng);
        Box::new(move |g, s| {
            let (x, w, b) = (g.param(s, x), g.param(s, w), g.param(s, b));
            let y = g.dense(x, w, b);
            let t = g.tanh(y);
            g.reshape(t, [3, 5, 1, 1])
        })
    });
}

#[test]
fn pointwise_ops_gradients() {
    check(2, |store, rng| {
        let a = glorot(store, "a", [2, 3, 4, 4], rng);
        let b = glorot(store, "b", [2, 3, 4, 4], rng);
        let m = glorot(store, "m", [2, 1, 4, 4], rng);
        Box::new(move |g, s| {
            let (a, b, m) = (g.param(s, a), g.param(s, b), g.param(s, m));
            let sa = g.sigmoid(a);
            let tb = g.tanh(b);
            let p = g.mul(sa, tb);
            let sum = g.add(p, a);
            let sc = g.scale(sum, 1.7);
            let r = g.relu(sc);
            g.mul_plane(r, m)
        })
    });
}

#[test]
fn pooling_and_resampling_gradients() {
    check(3, |store, rng| {
        let a = glorot(store, "a", [2, 3, 4, 4], rng);
        Box::new(move |g, s| {
            let a = g.param(s, a);
            let p = g.max_pool2(a);
            let u = g.upsample(p, 2);
            let mx = g.channel_max(a);
            let mn = g.channel_mean(a);
            let c = g.concat(&[u, mx, mn]);
            g.slice_channels(c, 1, 4)
        })
    });
}

#[test]
fn batch_norm_gradients() {
    check(4, |store, rng| {
        let x = glorot(store, "x", [3, 2, 3, 3], rng);
        let gamma = glorot(store, "gamma", [2, 1, 1, 1], rng);
        let beta = glorot(store, "beta", [2, 1, 1, 1], rng);
        Box::new(move |g, s| {
            let (x, gm, bt) = (g.param(s, x), g.param(s, gamma), g.param(s, beta));
            g.batch_norm(x, gm, bt, 1e-5).0
        })
    });
    check(5, |store, rng| {
        let x = glorot(store, "x", [3, 2, 3, 3], rng);
        let gamma = glorot(store, "gamma", [2, 1, 1, 1], rng);
        let beta = glorot(store, "beta", [2, 1, 1, 1], rng);
        Box::new(move |g, s| {
            let (x, gm, bt) = (g.param(s, x), g.param(s, gamma), g.param(s, beta));
            g.channel_affine(x, gm, bt, &[0.2, -0.1], &[1.5, 0.7], 1e-5)
        })
    });
}

#[test]
fn batch_norm_normalizes_per_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = Graph::<f64>::new(true);
    let x = g.input(rand_tensor([4, 3, 5, 5], &mut rng).map(|v| 3.0 * v + 2.0));
    let one = g.input(Tensor::full([3, 1, 1, 1], 1.0));
    let zero = g.input(Tensor::zeros([3, 1, 1, 1]));
    let (y, stats) = g.batch_norm(x, one, zero, 1e-5);
    assert!(stats.mean.iter().all(|m| (m - 2.0).abs() < 0.6));
    let yv = g.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|b| (0..25).map(move |p| (b, p)))
            .map(|(b, p)| yv.sample(b)[c * 25 + p])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn shared_param_gradients_accumulate() {
    check(7, |store, rng| {
        let a = glorot(store, "a", [1, 2, 2, 2], rng);
        Box::new(move |g, s| {
            let x = g.param(s, a);
            let again = g.param(s, a);
            g.mul(x, again)
        })
    });
}

#[test]
fn dropout_is_identity_in_eval_and_scaled_in_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let t = Tensor::full([1, 1, 50, 50], 1.0f64);
    let mut g = Graph::new(false);
    let x = g.input(t.clone());
    let y = g.dropout(x, 0.2, &mut rng);
    assert_eq!(g.value(y), &t);

    let mut g = Graph::new(true);
    let x = g.input(t);
    let y = g.dropout(x, 0.2, &mut rng);
    let vals = g.value(y).data();
    assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-12));
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    assert!((mean - 1.0).abs() < 0.06, "{mean}");
}

#[test]
fn untracked_inputs_receive_no_gradient() {
    let mut g = Graph::<f64>::new(true);
    let x = g.input(Tensor::full([1, 1, 2, 2], 2.0));
    let v = g.variable(Tensor::full([1, 1, 2, 2], 3.0));
    let y = g.mul(x, v);
    g.backward(vec![(y, Tensor::full([1, 1, 2, 2], 1.0))]);
    assert!(g.grad(x).is_none());
    assert_eq!(g.grad(v).unwrap().data(), &[2.0; 4]);
}

#[test]
fn rel_err_floor() {
    assert_eq!(rel_err(0.0, 0.0), 0.0);
    assert!(rel_err(1.0, 1.0001) < 1e-3);
    assert!(rel_err(1.0, 2.0) > 0.4);
}
