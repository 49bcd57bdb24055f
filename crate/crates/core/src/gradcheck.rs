//! Central finite differences, used as an independent oracle for the tape.
//!
//! Nothing here touches the backward pass: a function is only ever evaluated
//! forward at perturbed inputs.

use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error with an absolute floor: `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// True when `|a - n| <= max(rel * max(|a|, |n|), abs_floor)`.
pub fn within(analytic: f64, numeric: f64, rel: f64, abs_floor: f64) -> bool {
    (analytic - numeric).abs() <= (rel * analytic.abs().max(numeric.abs())).max(abs_floor)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for one coordinate of one input.
pub fn partial<F>(f: &F, inputs: &[Tensor], which: usize, index: usize, h: f64) -> f64
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut xs = inputs.to_vec();
    let x0 = xs[which].data()[index];
    xs[which].data_mut()[index] = x0 + h;
    let up = f(&xs);
    xs[which].data_mut()[index] = x0 - h;
    let down = f(&xs);
    (up - down) / (2.0 * h)
}

/// Full numeric gradient of `f` with respect to every input.
pub fn numeric_gradients<F>(f: &F, inputs: &[Tensor], h: f64) -> Vec<Tensor>
where
    F: Fn(&[Tensor]) -> f64,
{
    inputs
        .iter()
        .enumerate()
        .map(|(w, t)| {
            let data = (0..t.numel()).map(|i| partial(f, inputs, w, i, h)).collect();
            Tensor::new(t.shape().to_vec(), data).expect("same shape as input")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let f = |xs: &[Tensor]| xs[0].data().iter().map(|v| v * v).sum::<f64>();
        let g = numeric_gradients(&f, &[Tensor::vector(vec![1.0, -2.0])], DEFAULT_STEP);
        assert!((g[0].data()[0] - 2.0).abs() < 1e-8);
        assert!((g[0].data()[1] + 4.0).abs() < 1e-8);
    }

    #[test]
    fn floor_applies_near_zero() {
        assert!(relative_error(1e-9, 2e-9, 1e-6) < 1e-2);
        assert!((relative_error(1.0, 1.1, 1e-6) - 0.1 / 1.1).abs() < 1e-12);
    }
}
