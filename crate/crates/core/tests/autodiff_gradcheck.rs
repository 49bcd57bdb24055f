//! Every primitive against central finite differences, plus linearity and
//! determinism of the backward pass.

use cclx_core::autodiff::{Graph, NodeId};
use cclx_core::gradcheck::{numeric_gradients, within, DEFAULT_STEP};
use cclx_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: usize = 100;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

type Build = dyn Fn(&mut Graph, &[NodeId]) -> NodeId;

/// Reduces the op output to a scalar with fixed random weights so every
/// output element contributes a distinct amount.
fn scalarize(g: &mut Graph, out: NodeId, weights: &Tensor) -> NodeId {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w);
    g.sum_all(p)
}

fn output_shape(build: &Build, inputs: &[Tensor]) -> Vec<usize> {
    let mut g = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &ids);
    g.shape(out).to_vec()
}

fn check(name: &str, build: &Build, inputs: Vec<Tensor>, rng: &mut ChaCha8Rng) {
    let wshape = output_shape(build, &inputs);
    let weights = random(rng, &wshape, -1.0, 1.0);
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let ids: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &ids);
        let root = scalarize(&mut g, out, &weights);
        g.value(root).item()
    };
    let mut g = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &ids);
    let root = scalarize(&mut g, out, &weights);
    let grads = g.backward(root).unwrap();
    let numeric = numeric_gradients(&eval, &inputs, DEFAULT_STEP);
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).unwrap();
        for (i, (&a, &n)) in analytic.data().iter().zip(numeric[k].data()).enumerate() {
            assert!(within(a, n, 1e-4, 1e-6), "{name}: input {k} entry {i}: analytic {a} numeric {n}");
        }
    }
}

fn run(name: &str, build: &Build, shapes: &[&[usize]], lo: f64, hi: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..TRIALS {
        let inputs = shapes.iter().map(|s| random(&mut rng, s, lo, hi)).collect();
        check(name, build, inputs, &mut rng);
    }
}

#[test]
fn matmul_shared_rhs() {
    run("matmul", &|g, x| g.matmul(x[0], x[1]), &[&[2, 3, 4], &[4, 5]], -1.0, 1.0, 1);
}

#[test]
fn matmul_batched() {
    run("bmm", &|g, x| g.matmul(x[0], x[1]), &[&[2, 3, 4], &[2, 4, 2]], -1.0, 1.0, 2);
}

#[test]
fn broadcast_add() {
    run("add", &|g, x| g.add(x[0], x[1]), &[&[2, 3, 4], &[4]], -1.0, 1.0, 3);
    run("add-col", &|g, x| g.add(x[0], x[1]), &[&[3, 4], &[3, 1]], -1.0, 1.0, 4);
}

#[test]
fn elementwise() {
    run("eadd", &|g, x| g.elem_add(x[0], x[1]), &[&[3, 4], &[3, 4]], -1.0, 1.0, 5);
    run("sub", &|g, x| g.sub(x[0], x[1]), &[&[3, 4], &[3, 4]], -1.0, 1.0, 6);
    run("mul", &|g, x| g.mul(x[0], x[1]), &[&[3, 4], &[3, 4]], -1.0, 1.0, 7);
    run("mul-bcast", &|g, x| g.mul(x[0], x[1]), &[&[3, 4], &[3, 1]], -1.0, 1.0, 8);
    run("sub-bcast", &|g, x| g.sub(x[0], x[1]), &[&[2, 3, 4], &[2, 3, 1]], -1.0, 1.0, 9);
}

#[test]
fn scale_exp_log() {
    run("scale", &|g, x| g.scale(x[0], -2.5), &[&[5]], -1.0, 1.0, 10);
    run("exp", &|g, x| g.exp(x[0]), &[&[2, 5]], -2.0, 2.0, 11);
    run("log", &|g, x| g.log(x[0]), &[&[2, 5]], 0.5, 3.0, 12);
}

#[test]
fn softmax_last_axis() {
    run("softmax", &|g, x| g.softmax(x[0]), &[&[2, 3, 5]], -3.0, 3.0, 13);
}

#[test]
fn layer_norm() {
    run("layer-norm", &|g, x| g.layer_norm(x[0], x[1], x[2], 1e-5), &[&[2, 3, 6], &[6], &[6]], -2.0, 2.0, 14);
}

#[test]
fn gelu() {
    run("gelu", &|g, x| g.gelu(x[0]), &[&[4, 6]], -3.0, 3.0, 15);
}

#[test]
fn embedding_lookup() {
    let ids = [3usize, 0, 3, 1, 2, 0];
    run("embedding", &move |g, x| g.embedding(x[0], &ids, &[2, 3]), &[&[4, 5]], -1.0, 1.0, 16);
}

#[test]
fn slice_and_concat() {
    run("slice", &|g, x| g.slice(x[0], 1, 1, 3), &[&[2, 4, 3]], -1.0, 1.0, 17);
    run("slice-last", &|g, x| g.slice(x[0], 2, 0, 2), &[&[2, 4, 3]], -1.0, 1.0, 18);
    run("concat", &|g, x| g.concat(&[x[0], x[1]], 2), &[&[2, 3, 2], &[2, 3, 4]], -1.0, 1.0, 19);
    run("concat-0", &|g, x| g.concat(&[x[0], x[1]], 0), &[&[1, 3], &[2, 3]], -1.0, 1.0, 20);
}

#[test]
fn reductions() {
    run("sum", &|g, x| g.sum(x[0], 1), &[&[2, 3, 4]], -1.0, 1.0, 21);
    run("mean", &|g, x| g.mean(x[0], 2), &[&[2, 3, 4]], -1.0, 1.0, 22);
    run("sum-keep", &|g, x| g.sum_keepdim(x[0], 0), &[&[2, 3, 4]], -1.0, 1.0, 32);
    run("mean-keep", &|g, x| g.mean_keepdim(x[0], 1), &[&[2, 3, 4]], -1.0, 1.0, 33);
}

#[test]
fn transpose() {
    run("transpose", &|g, x| g.transpose(x[0]), &[&[2, 3, 4]], -1.0, 1.0, 23);
}

#[test]
fn masked_fill() {
    let mask: Vec<bool> = (0..12).map(|i| i % 3 == 1).collect();
    run("masked-fill", &move |g, x| g.masked_fill(x[0], &mask, -7.0), &[&[3, 4]], -1.0, 1.0, 24);
    // Masked scores feeding a softmax, the attention pattern.
    let causal: Vec<bool> = (0..9).map(|i| (i % 3) > (i / 3)).collect();
    run(
        "masked-softmax",
        &move |g, x| {
            let m = g.masked_fill(x[0], &causal, -1e9);
            g.softmax(m)
        },
        &[&[3, 3]],
        -2.0,
        2.0,
        25,
    );
}

#[test]
fn composites() {
    run("log-softmax", &|g, x| g.log_softmax(x[0]), &[&[3, 5]], -4.0, 4.0, 26);
    run("cosine-matrix", &|g, x| g.cosine_matrix(x[0], x[1]), &[&[3, 4], &[2, 4]], -1.0, 1.0, 27);
    run("cosine", &|g, x| g.cosine_similarity(x[0], x[1]), &[&[6], &[6]], -1.0, 1.0, 28);
}

#[test]
fn random_composite_five_parameters() {
    // tanh-free smooth composite over five scalars.
    let build: &Build = &|g, x| {
        let a = g.mul(x[0], x[1]);
        let b = g.exp(x[2]);
        let c = g.elem_add(a, b);
        let d = g.mul(c, x[3]);
        let e = g.gelu(x[4]);
        let f = g.sub(d, e);
        g.mul(f, f)
    };
    run("composite", build, &[&[1], &[1], &[1], &[1], &[1]], -1.0, 1.0, 29);
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for _ in 0..TRIALS {
        let x = random(&mut rng, &[3, 4], -1.0, 1.0);
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let grad_of = |coef_f: f64, coef_g: f64| {
            let mut g = Graph::new();
            let leaf = g.leaf(x.clone());
            let e = g.exp(leaf);
            let f = g.sum_all(e);
            let s = g.softmax(leaf);
            let sq = g.mul(s, leaf);
            let h = g.sum_all(sq);
            let fa = g.scale(f, coef_f);
            let hb = g.scale(h, coef_g);
            let root = g.elem_add(fa, hb);
            g.backward(root).unwrap().get(leaf).unwrap().clone()
        };
        let combined = grad_of(a, b);
        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        for i in 0..combined.numel() {
            let want = a * gf.data()[i] + b * gg.data()[i];
            assert!((combined.data()[i] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = random(&mut rng, &[4, 8], -1.0, 1.0);
    let w = random(&mut rng, &[8, 8], -1.0, 1.0);
    let once = || {
        let mut g = Graph::new();
        let (a, b) = (g.leaf(x.clone()), g.leaf(w.clone()));
        let m = g.matmul(a, b);
        let s = g.log_softmax(m);
        let r = g.sum_all(s);
        let grads = g.backward(r).unwrap();
        (g.value(r).item().to_bits(), grads.get(b).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(once(), once());
}
