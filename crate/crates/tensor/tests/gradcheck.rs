//! Central finite-difference checks of every differentiable op at f64.

use lpdt_tensor::{Graph, Tensor, Var};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

/// Builds `sum(op(inputs) ⊙ w)` for a fixed random `w`, so every output
/// element contributes to the scalar being differentiated.
fn scalar_loss<F>(g: &mut Graph<f64>, inputs: &[Tensor<f64>], weight_seed: u64, build: &F) -> (Var, Vec<Var>)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(g, &vars);
    let mut rng = StdRng::seed_from_u64(weight_seed);
    let w = Tensor::randn(g.shape(out), 1.0, &mut rng);
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    (g.sum_all(prod), vars)
}

fn check<F>(name: &str, seed: u64, inputs: Vec<Tensor<f64>>, build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let (loss, vars) = scalar_loss(&mut g, &inputs, seed ^ 0xabc, &build);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v).unwrap()).collect();

    let eval = |inputs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let (l, _) = scalar_loss(&mut g, inputs, seed ^ 0xabc, &build);
        g.value(l).item()
    };
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic[i].data()[j];
            let err = (a - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
            assert!(err < TOL, "{name} seed {seed}: input {i}[{j}] analytic {a} vs fd {fd}");
        }
    }
    assert!(worst.is_finite());
}

fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut StdRng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r)
}

#[test]
fn matmul_grad() {
    for s in 0..SEEDS {
        let mut r = rng(s);
        let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
        check("matmul", s, vec![randn(&[m, k], &mut r), randn(&[k, n], &mut r)], |g, v| g.matmul(v[0], v[1]).unwrap());
    }
}

#[test]
fn batch_matmul_grad() {
    for s in 0..SEEDS {
        let mut r = rng(s);
        let (b, m, k, n) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
        let trans = s % 2 == 0;
        let rhs = if trans { randn(&[b, n, k], &mut r) } else { randn(&[b, k, n], &mut r) };
        check("batch_matmul", s, vec![randn(&[b, m, k], &mut r), rhs], move |g, v| {
            g.batch_matmul(v[0], v[1], trans).unwrap()
        });
    }
}

#[test]
fn elementwise_binary_grads() {
    for s in 0..SEEDS {
        let mut r = rng(s);
        let shape = [r.random_range(1..4), r.random_range(1..4)];
        let (a, b) = (randn(&shape, &mut r), randn(&shape, &mut r));
        check("add", s, vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap());
        check("sub", s, vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap());
        check("mul", s, vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap());
        check("square", s, vec![a.clone()], |g, v| g.mul(v[0], v[0]).unwrap());
        let bias = randn(&[shape[1]], &mut r);
        check("add_row", s, vec![a.clone(), bias], |g, v| g.add_row(v[0], v[1]).unwrap());
    }
}

#[test]
fn elementwise_unary_grads() {
    for s in 0..SEEDS {
        let mut r = rng(s);
        let x = randn(&[r.random_range(1..4), r.random_range(1..5)], &mut r);
        check("scale", s, vec![x.clone()], |g, v| g.scale(v[0], -1.7));
        check("relu", s, vec![x.clone()], |g, v| g.relu(v[0]));
        check("gelu", s, vec![x.clone()], |g, v| g.gelu(v[0]));
        check("tanh", s, vec![x.clone()], |g, v| g.tanh(v[0]));
        check("l2_normalize", s, vec![x.clone()], |g, v| g.l2_normalize(v[0]).unwrap());
        check("dropout", s, vec![x.clone()], move |g, v| {
            let mut dr = StdRng::seed_from_u64(s);
            g.dropout(v[0], 0.3, &mut dr).unwrap()
        });
    }
}

#[test]
fn softmax_grads() {
    for s in 0..SEEDS {
        let mut r = rng(s);
        let shape = [r.random_range(1..4), r.random_range(1..4), r.random_range(1..4)];
        let axis = (s % 3) as usize;
        check("softmax", s, vec![randn(&shape, &mut r)], move |g, v| g.softmax(v[0], axis).unwrap());
        let rows = [r.random_range(1..4), r.random_range(2..5)];
        check("log_softmax", s, vec![randn(&rows, &mut r)], |g, v| g.log_softmax(v[0], None).unwrap());
        let mask: Vec<bool> = (0..rows[0] * rows[1]).map(|i| i % rows[1] != 0).collect();
        check("log_softmax_masked", s, vec![randn(&rows, &mut r)], move |g, v| {
            g.log_softmax(v[0], Some(mask.clone())).unwrap()
        });
    }
}

#[test]
fn causal_softmax_grads() {
    for s in 0..SEEDS {
        let mut r = rng(s);
        let (groups, t) = (r.random_range(1..3), r.random_range(1..5));
        let x = randn(&[groups, t, t], &mut r);
        check("causal_softmax", s, vec![x.clone()], |g, v| g.causal_softmax(v[0], None).unwrap());
        let keys: Vec<bool> = (0..groups * t).map(|i| i % t != 0 || t == 1).collect();
        check("causal_softmax_keys", s, vec![x], move |g, v| g.causal_softmax(v[0], Some(&keys)).unwrap());
    }
}

#[test]
fn layer_norm_grad() {
    for s in 0..SEEDS {
        let mut r = rng(s);
        let (rows, cols) = (r.random_range(1..4), r.random_range(2..6));
        check(
            "layer_norm",
            s,
            vec![randn(&[rows, cols], &mut r), randn(&[cols], &mut r), randn(&[cols], &mut r)],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
        );
    }
}

#[test]
fn shape_op_grads() {
    for s in 0..SEEDS {
        let mut r = rng(s);
        let (a, b, c) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
        let x = randn(&[a, b, c], &mut r);
        check("reshape", s, vec![x.clone()], move |g, v| g.reshape(v[0], &[a * b, c]).unwrap());
        check("permute", s, vec![x.clone()], |g, v| g.permute(v[0], &[2, 0, 1]).unwrap());
        check("sum_axis", s, vec![x.clone()], move |g, v| g.sum_axis(v[0], (s % 3) as usize).unwrap());
        check("mean_axis", s, vec![x.clone()], move |g, v| g.mean_axis(v[0], 1).unwrap());
        check("sum_all", s, vec![x.clone()], |g, v| g.sum_all(v[0]));
        check("mean_all", s, vec![x.clone()], |g, v| g.mean_all(v[0]).unwrap());

        let table = randn(&[a + 1, c], &mut r);
        let idx: Vec<usize> = (0..5).map(|_| r.random_range(0..a + 1)).collect();
        check("gather_rows", s, vec![table.clone()], move |g, v| g.gather_rows(v[0], &idx).unwrap());
        let other = randn(&[b, c], &mut r);
        check("concat_rows", s, vec![table.clone(), other], |g, v| g.concat_rows(&[v[0], v[1], v[0]]).unwrap());
        let pick: Vec<usize> = (0..a + 1).map(|_| r.random_range(0..c)).collect();
        check("pick_per_row", s, vec![table], move |g, v| g.pick_per_row(v[0], &pick).unwrap());
    }
}

#[test]
fn composite_attention_grad() {
    // A single-head attention block assembled from primitives.
    for s in 0..SEEDS {
        let mut r = rng(s);
        let (t, d) = (r.random_range(1..5), r.random_range(1..4));
        let inputs = vec![randn(&[t, d], &mut r), randn(&[d, d], &mut r), randn(&[d, d], &mut r), randn(&[d, d], &mut r)];
        check("attention", s, inputs, move |g, v| {
            let q = g.matmul(v[0], v[1]).unwrap();
            let k = g.matmul(v[0], v[2]).unwrap();
            let val = g.matmul(v[0], v[3]).unwrap();
            let q = g.reshape(q, &[1, t, d]).unwrap();
            let k = g.reshape(k, &[1, t, d]).unwrap();
            let val = g.reshape(val, &[1, t, d]).unwrap();
            let scores = g.batch_matmul(q, k, true).unwrap();
            let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
            let p = g.causal_softmax(scores, None).unwrap();
            g.batch_matmul(p, val, false).unwrap()
        });
    }
}
