//! Central finite differences, the reference the tape is checked against.
//! Slow by construction: two loss evaluations per scalar parameter.

use crate::autodiff::NamedTensors;

pub const DEFAULT_EPS: f64 = 1e-5;

/// `(f(p + eps) - f(p - eps)) / 2 eps` for every scalar of every tensor.
pub fn finite_difference_grad<F>(mut f: F, params: &NamedTensors, eps: f64) -> NamedTensors
where
    F: FnMut(&NamedTensors) -> f64,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut work = params.clone();
    let mut grads = params.zeros_like();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.get(name).map_or(0, |t| t.len());
        for i in 0..n {
            let orig = params.get(name).unwrap().data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let up = f(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let down = f(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            grads.get_mut(name).unwrap().data_mut()[i] = (up - down) / (2.0 * eps);
        }
    }
    grads
}

/// Largest `|a - n| / max(1, |a|, |n|)` over all shared scalars. A name
/// present on only one side counts as an infinite error.
pub fn max_relative_error(analytic: &NamedTensors, numeric: &NamedTensors) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, a) in analytic.iter() {
        let Some(n) = numeric.get(name) else {
            return f64::INFINITY;
        };
        for (&ga, &gn) in a.data().iter().zip(n.data()) {
            let denom = 1f64.max(ga.abs()).max(gn.abs());
            worst = worst.max((ga - gn).abs() / denom);
        }
    }
    if numeric.names().any(|n| !analytic.contains(n)) {
        return f64::INFINITY;
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one(name: &str, v: f64) -> NamedTensors {
        let mut p = NamedTensors::new();
        p.insert(name, Tensor::vector(vec![v]).unwrap());
        p
    }

    #[test]
    fn square_and_relu() {
        let g = finite_difference_grad(|p| p.get("x").unwrap().data()[0].powi(2), &one("x", 3.0), DEFAULT_EPS);
        assert!((g.get("x").unwrap().data()[0] - 6.0).abs() < 1e-9);

        let g = finite_difference_grad(|p| p.get("x").unwrap().data()[0].max(0.0), &one("x", 1.0), DEFAULT_EPS);
        assert!((g.get("x").unwrap().data()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn relative_error_handles_missing_names() {
        assert_eq!(max_relative_error(&one("a", 1.0), &one("a", 1.0)), 0.0);
        assert!(max_relative_error(&one("a", 1.0), &one("b", 1.0)).is_infinite());
    }
}
