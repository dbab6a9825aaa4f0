//! Finite-difference checks for every op in the tape.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::Graph;
use super::layers::*;
use super::params::{xavier, Adam, ParamStore};

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

/// Central-difference gradient of `f` w.r.t. every trainable param in `ps`,
/// compared elementwise against the analytic gradient. Returns max rel err.
fn grad_check<F>(ps: &mut ParamStore, f: F) -> f64
where
    F: Fn(&mut Graph) -> usize,
{
    let analytic = {
        let mut g = Graph::new(ps);
        let loss = f(&mut g);
        g.backward(loss)
    };
    let h = 1e-6;
    let mut max_rel = 0.0f64;
    let param_ids: Vec<_> = ps.iter().map(|(p, _, _)| p).collect();
    for p in param_ids {
        let dim = ps.value(p).dim();
        for i in 0..dim.0 {
            for j in 0..dim.1 {
                let orig = ps.value(p)[[i, j]];
                ps.value_mut(p)[[i, j]] = orig + h;
                let up = {
                    let mut g = Graph::new(ps);
                    let l = f(&mut g);
                    g.scalar(l)
                };
                ps.value_mut(p)[[i, j]] = orig - h;
                let down = {
                    let mut g = Graph::new(ps);
                    let l = f(&mut g);
                    g.scalar(l)
                };
                ps.value_mut(p)[[i, j]] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = analytic.get(p).map(|g| g[[i, j]]).unwrap_or(0.0);
                let denom = an.abs().max(fd.abs()).max(1e-4);
                max_rel = max_rel.max((an - fd).abs() / denom);
            }
        }
    }
    max_rel
}

#[test]
fn grad_elementwise_and_broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamStore::new();
    let a = ps.add("a", rand_mat(&mut rng, 3, 4), true);
    let b = ps.add("b", rand_mat(&mut rng, 3, 4), true);
    let row = ps.add("row", rand_mat(&mut rng, 1, 4), true);
    let col = ps.add("col", rand_mat(&mut rng, 3, 1), true);

    let err = grad_check(&mut ps, |g| {
        let a = g.param(a);
        let b = g.param(b);
        let row = g.param(row);
        let col = g.param(col);
        let x = g.add(a, b);
        let x = g.add_row(x, row);
        let x = g.add_col(x, col);
        let x = g.mul(x, b);
        let x = g.mul_row(x, row);
        let x = g.mul_col(x, col);
        let x = g.sub(x, a);
        let x = g.scale(x, 1.7);
        let x = g.add_scalar(x, 0.3);
        let x = g.square(x);
        g.mean_all(x)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn grad_matmul_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamStore::new();
    let a = ps.add("a", rand_mat(&mut rng, 3, 5), true);
    let b = ps.add("b", rand_mat(&mut rng, 5, 4), true);
    let c = ps.add("c", rand_mat(&mut rng, 2, 4), true);

    let err = grad_check(&mut ps, |g| {
        let a = g.param(a);
        let b = g.param(b);
        let c = g.param(c);
        let ab = g.matmul(a, b); // 3x4
        let abc = g.matmul_tb(ab, c); // 3x2
        let sq = g.square(abc);
        g.sum_all(sq)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn grad_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamStore::new();
    let a = ps.add("a", rand_mat(&mut rng, 6, 4), true);
    let b = ps.add("b", rand_mat(&mut rng, 2, 4), true);

    let err = grad_check(&mut ps, |g| {
        let a = g.param(a);
        let b = g.param(b);
        let top = g.slice_rows(a, 0, 3);
        let cols = g.slice_cols(top, 1, 3);
        let both = g.concat_rows(&[cols, cols]);
        let wide = g.concat_cols(&[both, both]);
        let gathered = g.gather_rows(a, &[0, 0, 5, 2]);
        let pooled = g.mean_pool_rows(gathered, 2);
        let up = g.upsample_rows(pooled, 3);
        let m1 = g.mean_all(wide);
        let s1 = g.sum_all(up);
        let bmean = g.mean_rows(b);
        let bsum = g.sum_rows(bmean);
        let b2 = g.mean_all(bsum);
        let t = g.add(m1, s1);
        g.add(t, b2)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn grad_nonlinearities() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ps = ParamStore::new();
    let a = ps.add("a", rand_mat(&mut rng, 4, 5), true);

    let err = grad_check(&mut ps, |g| {
        let a = g.param(a);
        let sm = g.softmax(a);
        let e = g.exp(a);
        let pos = g.add_scalar(e, 0.1);
        let l = g.ln(pos);
        let t = g.tanh(a);
        let ge = g.gelu(a);
        let n = g.normalize_rows(a, 1e-5);
        let s1 = g.mean_all(sm);
        let s2 = g.mean_all(l);
        let s3 = g.mean_all(t);
        let s4 = g.mean_all(ge);
        let s5 = g.mean_all(n);
        let x = g.add(s1, s2);
        let x = g.add(x, s3);
        let x = g.add(x, s4);
        g.add(x, s5)
    });
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn grad_clamp_passes_only_interior() {
    let mut ps = ParamStore::new();
    let vals = Array2::from_shape_vec((1, 4), vec![-2.0, 0.3, 0.7, 2.5]).unwrap();
    let a = ps.add("a", vals, true);
    let err = grad_check(&mut ps, |g| {
        let a = g.param(a);
        let c = g.clamp(a, 0.0, 1.0);
        let m = g.clamp_min(a, -1.0);
        let s = g.mean_all(c);
        let s2 = g.mean_all(m);
        g.add(s, s2)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn grad_conv1d() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (kernel, stride, pad, len) in [(3usize, 1usize, 1usize, 8usize), (2, 2, 0, 8)] {
        let mut ps = ParamStore::new();
        let x = ps.add("x", rand_mat(&mut rng, len, 3), true);
        let w = ps.add("w", rand_mat(&mut rng, kernel * 3, 2), true);
        let b = ps.add("b", rand_mat(&mut rng, 1, 2), true);
        let err = grad_check(&mut ps, |g| {
            let x = g.param(x);
            let w = g.param(w);
            let b = g.param(b);
            let y = g.conv1d(x, w, b, kernel, stride, pad);
            let sq = g.square(y);
            g.mean_all(sq)
        });
        assert!(err < 1e-6, "conv k={kernel} s={stride}: rel err {err}");
    }
}

#[test]
fn grad_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ps = ParamStore::new();
    let logits = ps.add("logits", rand_mat(&mut rng, 5, 7), true);
    let targets = vec![0usize, 3, 6, 2, 2];
    let err = grad_check(&mut ps, |g| {
        let l = g.param(logits);
        g.cross_entropy(l, &targets)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn detach_blocks_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ps = ParamStore::new();
    let a = ps.add("a", rand_mat(&mut rng, 2, 2), true);
    let mut g = Graph::new(&ps);
    let an = g.param(a);
    let d = g.detach(an);
    let sq = g.square(d);
    let loss = g.mean_all(sq);
    let grads = g.backward(loss);
    assert!(grads.get(a).is_none());
}

#[test]
fn straight_through_forwards_target_and_routes_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ps = ParamStore::new();
    let a = ps.add("a", rand_mat(&mut rng, 2, 3), true);
    let target = rand_mat(&mut rng, 2, 3);
    let mut g = Graph::new(&ps);
    let an = g.param(a);
    let st = g.straight_through(an, &target);
    assert_eq!(g.value(st), &target);
    let sum = g.sum_all(st);
    let grads = g.backward(sum);
    // d(sum)/da = 1 everywhere: gradient passes through unchanged.
    assert_eq!(grads.get(a).unwrap(), &Array2::from_elem((2, 3), 1.0));
}

#[test]
fn grad_attention_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ps = ParamStore::new();
    let x = ps.add("x", rand_mat(&mut rng, 5, 8), true);
    let mem = ps.add("mem", rand_mat(&mut rng, 3, 6), true);
    let attn = MultiHeadAttention::new(&mut ps, &mut rng, "mha", 8, 6, 2);
    let err = grad_check(&mut ps, |g| {
        let x = g.param(x);
        let mem = g.param(mem);
        let y = attn.forward(g, x, mem);
        let sq = g.square(y);
        g.mean_all(sq)
    });
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn grad_transformer_stack() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut ps = ParamStore::new();
    let x = ps.add("x", rand_mat(&mut rng, 4, 8), true);
    let mem = ps.add("mem", rand_mat(&mut rng, 6, 4), true);
    let layer = DecoderLayer::new(&mut ps, &mut rng, "dec", 8, 4, 16, 2);
    let err = grad_check(&mut ps, |g| {
        let x = g.param(x);
        let mem = g.param(mem);
        let y = layer.forward(g, x, mem);
        let sq = g.square(y);
        g.mean_all(sq)
    });
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn adam_reduces_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ps = ParamStore::new();
    let w = ps.add("w", xavier(&mut rng, 4, 4), true);
    let target = rand_mat(&mut rng, 4, 4);
    let mut adam = Adam::new(ps.len());
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..200 {
        let (loss_val, grads) = {
            let mut g = Graph::new(&ps);
            let wn = g.param(w);
            let t = g.input(target.clone());
            let loss = g.mse(wn, t);
            (g.scalar(loss), g.backward(loss))
        };
        first.get_or_insert(loss_val);
        last = loss_val;
        adam.step(&mut ps, &grads, 0.05);
    }
    assert!(last < first.unwrap() * 0.01, "{last} vs {first:?}");
}

#[test]
fn frozen_params_do_not_move() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut ps = ParamStore::new();
    let w = ps.add("frozen.w", xavier(&mut rng, 3, 3), true);
    ps.freeze_prefix("frozen");
    let before = ps.hash_prefix("frozen");
    let mut adam = Adam::new(ps.len());
    for _ in 0..5 {
        let grads = {
            let mut g = Graph::new(&ps);
            let wn = g.param(w);
            let sq = g.square(wn);
            let loss = g.mean_all(sq);
            g.backward(loss)
        };
        adam.step(&mut ps, &grads, 0.1);
    }
    assert_eq!(ps.hash_prefix("frozen"), before);
}

#[test]
fn positional_encoding_is_periodic() {
    let pe = periodic_positional_encoding(16, 8);
    // One full period over the clip: extending to t = len reproduces t = 0.
    for i in 0..4 {
        let freq = (i + 1) as f64;
        let phase = 2.0 * std::f64::consts::PI * freq;
        assert!((phase.sin() - pe[[0, 2 * i]]).abs() < 1e-12);
    }
    assert_eq!(pe.dim(), (16, 8));
}
