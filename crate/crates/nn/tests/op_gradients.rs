//! Central finite-difference checks for every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sourceaware_nn::{Conv3dSpec, Graph, ParamId, ParamStore, Tensor, TransformerBlock, Var};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces any node to a scalar with fixed random weights so every output
/// coordinate contributes to the gradient.
fn weighted_sum(g: &mut Graph<'_>, v: Var, seed: u64) -> Var {
    let t = g.value(v).clone();
    let n = t.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat = g.reshape(v, &[1, n]);
    let w = g.input(random_tensor(&mut rng, &[n, 1]));
    g.matmul(flat, w)
}

fn check<F>(store: &mut ParamStore, f: F)
where
    F: Fn(&mut Graph<'_>) -> Var,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g);
        g.backward(loss)
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let h = 1e-6;
    for id in ids {
        let n = store.value(id).len();
        for j in 0..n {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + h;
            let fp = {
                let mut g = Graph::new(store);
                let l = f(&mut g);
                g.scalar(l)
            };
            store.value_mut(id).data_mut()[j] = orig - h;
            let fm = {
                let mut g = Graph::new(store);
                let l = f(&mut g);
                g.scalar(l)
            };
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.get(id).map(|t| t.data()[j]).unwrap_or(0.0);
            let diff = (a - numeric).abs();
            let err = diff / a.abs().max(numeric.abs()).max(1e-12);
            assert!(
                err < 1e-5 || diff < 1e-8,
                "param {} coord {j}: analytic {a} numeric {numeric}",
                store.get(id).name
            );
        }
    }
}

#[test]
fn matmul_variants_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let a = store.add("a", "g", random_tensor(&mut rng, &[3, 4]));
    let b = store.add("b", "g", random_tensor(&mut rng, &[4, 5]));
    let c = store.add("c", "g", random_tensor(&mut rng, &[2, 5]));
    let bias = store.add("bias", "g", random_tensor(&mut rng, &[2]));
    let gain = store.add("gain", "g", random_tensor(&mut rng, &[2]));
    check(&mut store, |g| {
        let (a, b, c, bias, gain) = (g.param(a), g.param(b), g.param(c), g.param(bias), g.param(gain));
        let ab = g.matmul(a, b);
        let abc = g.matmul_nt(ab, c);
        let abc = g.add_row(abc, bias);
        let abc = g.mul_row(abc, gain);
        weighted_sum(g, abc, 7)
    });
}

#[test]
fn nonlinearities_and_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let x = store.add("x", "g", random_tensor(&mut rng, &[3, 6]));
    check(&mut store, |g| {
        let x = g.param(x);
        let a = g.gelu(x);
        let b = g.softmax_rows(x);
        let c = g.layer_norm_rows(x, 1e-5);
        let d = g.scale(c, 0.7);
        let s = g.add(a, b);
        let s = g.add(s, d);
        let m = g.mean_rows(s);
        let left = g.slice_cols(s, 1, 3);
        let right = g.slice_cols(s, 4, 2);
        let cat = g.concat_cols(&[left, right]);
        let m = g.slice_cols(m, 0, 5);
        let stacked = g.concat_rows(&[cat, m]);
        weighted_sum(g, stacked, 11)
    });
}

#[test]
fn relu_away_from_kink() {
    let mut store = ParamStore::new();
    let x = store.add(
        "x",
        "g",
        Tensor::from_vec(&[2, 3], vec![0.5, -0.4, 1.2, -2.0, 0.3, 0.9]).unwrap(),
    );
    check(&mut store, |g| {
        let x = g.param(x);
        let r = g.relu(x);
        weighted_sum(g, r, 3)
    });
}

#[test]
fn conv3d_stride_and_padding() {
    for (stride, kernel) in [(1, 3), (2, 3), (2, 1), (1, 1)] {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + stride as u64 * 7 + kernel as u64);
        let mut store = ParamStore::new();
        let x = store.add("x", "g", random_tensor(&mut rng, &[2, 4, 5, 6]));
        let w = store.add("w", "g", random_tensor(&mut rng, &[3, 2, kernel, kernel, kernel]));
        let b = store.add("b", "g", random_tensor(&mut rng, &[3]));
        let spec = Conv3dSpec { stride, pad: kernel / 2 };
        check(&mut store, |g| {
            let (x, w, b) = (g.param(x), g.param(w), g.param(b));
            let y = g.conv3d(x, w, spec);
            let y = g.add_channel(y, b);
            let p = g.global_avg_pool(y);
            let flat = g.reshape(y, &[1, g.value(y).len()]);
            let both = g.concat_cols(&[p, flat]);
            weighted_sum(g, both, 5)
        });
    }
}

#[test]
fn conv3d_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = random_tensor(&mut rng, &[2, 5, 4, 6]);
    let w = random_tensor(&mut rng, &[3, 2, 3, 3, 3]);
    for stride in [1usize, 2] {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let wv = g.input(w.clone());
        let y = g.conv3d(xv, wv, Conv3dSpec { stride, pad: 1 });
        let out = g.value(y).clone();
        let s = out.shape().to_vec();
        for o in 0..s[0] {
            for od in 0..s[1] {
                for oh in 0..s[2] {
                    for ow in 0..s[3] {
                        let mut acc = 0.0;
                        for c in 0..2 {
                            for kd in 0..3 {
                                for kh in 0..3 {
                                    for kw in 0..3 {
                                        let id = (od * stride + kd) as isize - 1;
                                        let ih = (oh * stride + kh) as isize - 1;
                                        let iw = (ow * stride + kw) as isize - 1;
                                        if id < 0 || ih < 0 || iw < 0 || id >= 5 || ih >= 4 || iw >= 6 {
                                            continue;
                                        }
                                        let xi = ((c * 5 + id as usize) * 4 + ih as usize) * 6 + iw as usize;
                                        let wi = (((o * 2 + c) * 3 + kd) * 3 + kh) * 3 + kw;
                                        acc += x.data()[xi] * w.data()[wi];
                                    }
                                }
                            }
                        }
                        let got = out.data()[((o * s[1] + od) * s[2] + oh) * s[3] + ow];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let z = store.add("z", "g", random_tensor(&mut rng, &[1, 4]));
    check(&mut store, |g| {
        let z = g.param(z);
        g.cross_entropy(z, 2)
    });
    let mut store = ParamStore::new();
    let z = store.add("z", "g", random_tensor(&mut rng, &[5, 2]));
    check(&mut store, |g| {
        let z = g.param(z);
        let p = g.softmax_rows(z);
        let mean = g.mean_rows(p);
        g.nll_prob(mean, 1, 1e-12)
    });
}

#[test]
fn transformer_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let block = TransformerBlock::new(&mut store, "blk", "ctx", 8, 2, 16, &mut rng);
    let x = random_tensor(&mut rng, &[5, 8]);
    check(&mut store, |g| {
        let xv = g.input(x.clone());
        let y = block.forward(g, xv);
        weighted_sum(g, y, 9)
    });
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let a = store.add("a", "g", random_tensor(&mut rng, &[2, 3]));
    let b = store.add("b", "g", random_tensor(&mut rng, &[3, 2]));
    store.set_trainable(a, false);
    let mut g = Graph::new(&store);
    let (av, bv) = (g.param(a), g.param(b));
    let y = g.matmul(av, bv);
    let m = g.mean_rows(y);
    let loss = g.cross_entropy(m, 0);
    let grads = g.backward(loss);
    assert!(grads.get(a).is_none());
    assert!(grads.get(b).is_some());
}
