//! Helpers shared by integration test targets.

#![allow(dead_code)]

/// Bidirectional InfoNCE written out term by term.
pub fn contrastive_oracle(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    let t = a.len();
    let cos = |x: &[f64], y: &[f64]| {
        let mut dot = 0.0;
        let mut nx = 0.0;
        let mut ny = 0.0;
        for k in 0..x.len() {
            dot += x[k] * y[k];
            nx += x[k] * x[k];
            ny += y[k] * y[k];
        }
        dot / (nx.sqrt() * ny.sqrt())
    };
    let mut total = 0.0;
    for i in 0..t {
        let mut den_ab = 0.0;
        let mut den_ba = 0.0;
        for j in 0..t {
            den_ab += (cos(&a[i], &b[j]) / tau).exp();
            den_ba += (cos(&b[i], &a[j]) / tau).exp();
        }
        let pos = (cos(&a[i], &b[i]) / tau).exp();
        total += -(pos / den_ab).ln() - (pos / den_ba).ln();
    }
    total / t as f64
}

/// Graph-built contrastive loss on plain rows.
pub fn contrastive_graph(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    use cclx_core::autodiff::Graph;
    use cclx_core::Tensor;
    let d = a[0].len();
    let flat = |xs: &[Vec<f64>]| Tensor::new(vec![xs.len(), d], xs.concat()).unwrap();
    let mut g = Graph::new();
    let na = g.constant(flat(a));
    let nb = g.constant(flat(b));
    let l = cclx_core::objectives::contrastive_loss(&mut g, na, nb, tau).unwrap();
    g.value(l).item()
}
