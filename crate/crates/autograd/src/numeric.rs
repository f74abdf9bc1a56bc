//! Finite-difference gradient estimates, used as test oracles.

use crate::tensor::Tensor;

/// Central-difference gradient of `f` at `params`, coordinate by coordinate.
pub fn central_difference(
    params: &[Tensor<f64>],
    h: f64,
    mut f: impl FnMut(&[Tensor<f64>]) -> f64,
) -> Vec<Tensor<f64>> {
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Tensor::zeros(params[pi].shape());
        for j in 0..params[pi].len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let up = f(&work);
            work[pi].data_mut()[j] = orig - h;
            let down = f(&work);
            work[pi].data_mut()[j] = orig;
            g.data_mut()[j] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let p = vec![Tensor::from_vec(&[2], vec![1.5, -2.0]).unwrap()];
        let g = central_difference(&p, 1e-4, |ps| {
            ps[0].data().iter().map(|v| v * v).sum::<f64>()
        });
        assert!((g[0].data()[0] - 3.0).abs() < 1e-8);
        assert!((g[0].data()[1] + 4.0).abs() < 1e-8);
    }
}
