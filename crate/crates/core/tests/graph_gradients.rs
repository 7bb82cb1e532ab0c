//! Every graph op's backward pass checked against central differences.

use std::sync::Arc;

use bttf_core::graph::{Graph, Var};
use bttf_core::rng::{rng_from_seed, standard_normal};
use bttf_core::Tensor;

fn randn(seed: u64, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), standard_normal(&mut rng_from_seed(seed), n).into_iter().map(|v| v * scale).collect())
}

/// Builds `f` on fresh graphs and compares analytic and numeric gradients for every input.
fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let h = 1e-6;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.tensor(vars[k]);
        for i in 0..t.len() {
            let eval = |delta: f64| {
                let mut ins = inputs.clone();
                ins[k].data_mut()[i] += delta;
                let mut g = Graph::new();
                let vs: Vec<Var> = ins.into_iter().map(|t| g.param(t)).collect();
                let o = f(&mut g, &vs);
                g.value(o).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (1e-6 + a.abs().max(numeric.abs()));
            assert!(
                err < 1e-4 || (a - numeric).abs() < 1e-7,
                "input {k} coord {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

/// Contracts an arbitrary tensor to a scalar with fixed random weights.
fn probe(g: &mut Graph, x: Var, seed: u64) -> Var {
    let shape = g.shape(x).to_vec();
    let w = g.constant(randn(seed, &shape, 1.0));
    let m = g.mul(x, w);
    g.sum(m)
}

#[test]
fn elementwise_ops() {
    let a = randn(1, &[2, 3], 1.0);
    let b = randn(2, &[2, 3], 1.0);
    check(vec![a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1]);
        let d = g.sub(s, v[1]);
        let m = g.mul(d, v[1]);
        let l = g.lincomb(m, 0.3, v[0], -1.7);
        let sc = g.scale(l, 2.5);
        probe(g, sc, 9)
    });
    check(vec![a.clone()], |g, v| {
        let s = g.silu(v[0]);
        let t = g.sigmoid(s);
        probe(g, t, 10)
    });
    // keep away from the clamp kinks
    let c = Tensor::new(vec![4], vec![-0.4, 0.3, 0.6, 1.3]);
    check(vec![c], |g, v| {
        let t = g.clamp01(v[0]);
        probe(g, t, 11)
    });
}

#[test]
fn conv_ops() {
    for k in [1, 3] {
        let x = randn(3, &[2, 3, 4, 5], 1.0);
        let w = randn(4, &[2, 3, k, k], 0.5);
        let b = randn(5, &[2], 0.5);
        check(vec![x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]));
            probe(g, y, 12)
        });
    }
    let x = randn(6, &[4, 3, 2, 3], 1.0);
    let w = randn(7, &[2, 3, 3], 0.5);
    let b = randn(8, &[2], 0.5);
    check(vec![x, w, b], |g, v| {
        let y = g.temporal_conv(v[0], v[1], Some(v[2]));
        probe(g, y, 13)
    });
}

#[test]
fn resampling_ops() {
    let x = randn(14, &[2, 2, 4, 4], 1.0);
    check(vec![x.clone()], |g, v| {
        let p = g.avg_pool2(v[0]);
        let u = g.upsample2(p);
        let s = g.pixel_unshuffle(u, 2);
        let r = g.pixel_shuffle(s, 2);
        let q = g.mul(r, v[0]);
        probe(g, q, 15)
    });
    let y = randn(16, &[3, 1, 4, 4], 1.0);
    check(vec![x, y], |g, v| {
        let xs = g.slice_frames(v[0], 1, 1);
        let ys = g.slice_frames(v[1], 0, 1);
        let c = g.concat_channels(&[xs, ys, xs]);
        let rep = g.repeat_frame(v[1], 2);
        let rp = g.global_avg_pool(rep);
        let s = probe(g, rp, 17);
        let t = probe(g, c, 18);
        g.add(s, t)
    });
}

#[test]
fn broadcast_ops() {
    let x = randn(19, &[2, 3, 2, 2], 1.0);
    let cv = randn(20, &[3], 1.0);
    let fc = randn(21, &[2, 3], 1.0);
    let s = randn(22, &[1], 1.0);
    let table = randn(23, &[4, 3], 1.0);
    check(vec![x, cv, fc, s, table], |g, v| {
        let a = g.add_channel_vec(v[0], v[1]);
        let m = g.mul_channel_vec(a, v[1]);
        let f = g.add_frame_channel(m, v[2]);
        let sc = g.mul_scalar(f, v[3]);
        let row = g.row(v[4], 2);
        let r2 = g.mul_channel_vec(sc, row);
        probe(g, r2, 24)
    });
}

#[test]
fn heads_and_losses() {
    let x = randn(25, &[5], 1.0);
    let w = randn(26, &[4, 5], 0.5);
    let b = randn(27, &[4], 0.5);
    for target in 0..4 {
        check(vec![x.clone(), w.clone(), b.clone()], |g, v| {
            let l = g.linear(v[0], v[1], v[2]);
            g.cross_entropy(l, target)
        });
    }
    let a = randn(28, &[2, 3, 2, 2], 1.0);
    let bb = randn(29, &[2, 3, 2, 2], 1.0);
    check(vec![a.clone(), bb.clone()], |g, v| {
        let l1 = g.l1_sum(v[0], v[1]);
        let m = g.mse_mean(v[0], v[1]);
        g.lincomb(l1, 1.0, m, 3.0)
    });
    let reference = Arc::new(bttf_core::bttf::gram_matrices(bb.data(), [2, 3, 2, 2]));
    check(vec![a], move |g, v| g.style_loss(v[0], reference.clone()));
}

#[test]
fn vjp_seed_and_untracked_inputs() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]));
    let c = g.constant(Tensor::new(vec![3], vec![4.0, 5.0, 6.0]));
    let y = g.mul(x, c);
    let grads = g.backward_with(y, vec![1.0, 0.0, -1.0]);
    assert_eq!(grads.get(x).unwrap(), &[4.0, 0.0, -6.0]);
    assert!(grads.get(c).is_none());
}

#[test]
fn cross_entropy_values_and_floor() {
    let mut g = Graph::new();
    let uniform = g.param(Tensor::new(vec![4], vec![0.0; 4]));
    let l = g.cross_entropy(uniform, 1);
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

    let p = [0.7f64, 0.1, 0.1, 0.1];
    let logits = g.param(Tensor::new(vec![4], p.iter().map(|v| v.ln()).collect()));
    let l = g.cross_entropy(logits, 0);
    assert!((g.value(l).item() - 0.356_674_943_938_732_4).abs() < 1e-12);

    let extreme = g.param(Tensor::new(vec![2], vec![0.0, 200.0]));
    let l = g.cross_entropy(extreme, 0);
    assert!((g.value(l).item() - (-(1e-12f64).ln())).abs() < 1e-9);
    // Under the floor the gradient still pulls toward the target.
    let grads = g.backward(l);
    let d = grads.tensor(extreme);
    assert!((d.data()[0] + 1.0).abs() < 1e-12 && (d.data()[1] - 1.0).abs() < 1e-12);
}
