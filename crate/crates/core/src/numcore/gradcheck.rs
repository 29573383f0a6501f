//! Finite-difference verification of reverse-mode gradients (64-bit only).

use super::{Array, Graph, Var};

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Maximum relative error between backward gradients and central differences,
/// over every coordinate of `point`.
pub fn grad_check<F>(f: F, point: &Array<f64>, eps: f64) -> f64
where
    F: Fn(&mut Graph<f64>, Var) -> Var,
{
    let coords: Vec<usize> = (0..point.numel()).collect();
    grad_check_coords(f, point, &coords, eps)
}

/// As [`grad_check`], restricted to the listed flat coordinates.
pub fn grad_check_coords<F>(f: F, point: &Array<f64>, coords: &[usize], eps: f64) -> f64
where
    F: Fn(&mut Graph<f64>, Var) -> Var,
{
    let eval = |p: &Array<f64>| {
        let mut g = Graph::new();
        let x = g.constant(p.clone());
        let y = f(&mut g, x);
        g.scalar(y)
    };
    let mut g = Graph::new();
    let x = g.input(point.clone());
    let y = f(&mut g, x);
    let analytic = g
        .backward(y)
        .expect("grad_check target must be a finite scalar")
        .wrt(x)
        .unwrap_or_else(|| Array::zeros(point.shape()));
    let mut worst: f64 = 0.0;
    for &c in coords {
        let mut plus = point.clone();
        plus.data_mut()[c] += eps;
        let mut minus = point.clone();
        minus.data_mut()[c] -= eps;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[c], numeric));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_passes() {
        // f(x) = x^T A x with a fixed non-symmetric A
        let a = Array::new(&[3, 3], vec![2.0, 0.5, -1.0, 0.3, 1.5, 0.2, -0.4, 0.1, 3.0]).unwrap();
        let point = Array::new(&[3, 1], vec![0.7, -1.2, 0.4]).unwrap();
        let err = grad_check(
            |g, x| {
                let am = g.constant(a.clone());
                let ax = g.matmul(am, x);
                let p = g.mul(x, ax);
                g.sum(p)
            },
            &point,
            1e-4,
        );
        assert!(err < 1e-7, "quadratic form error {err}");
    }

    #[test]
    fn focal_loss_at_even_odds_passes() {
        let point = Array::new(&[2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let targets = [1.0, 0.0, 0.0, 1.0];
        let err = grad_check(|g, x| g.sigmoid_focal(x, &targets, 0.25, 2.0), &point, 1e-4);
        assert!(err < 1e-6, "focal error {err}");
    }
}
