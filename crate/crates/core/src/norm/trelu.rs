//! Translated ReLU: `y = max(x, t)` with a learnable per-feature threshold.

use crate::linalg::Matrix;

pub fn trelu_forward(x: &Matrix, thresholds: &[f64]) -> Matrix {
    assert_eq!(thresholds.len(), x.rows(), "one threshold per feature");
    let mut out = x.clone();
    for (r, &t) in thresholds.iter().enumerate() {
        out.row_mut(r).iter_mut().for_each(|v| *v = v.max(t));
    }
    out
}

/// Returns `(∂L/∂x, ∂L/∂t)`. The gradient flows to `x` where `x > t` and to
/// the threshold everywhere else.
pub fn trelu_backward(x: &Matrix, thresholds: &[f64], grad: &Matrix) -> (Matrix, Vec<f64>) {
    assert_eq!(x.shape(), grad.shape(), "gradient shape mismatch");
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    let mut dt = vec![0.0; x.rows()];
    for (r, &t) in thresholds.iter().enumerate() {
        for ((o, &xv), &g) in dx.row_mut(r).iter_mut().zip(x.row(r)).zip(grad.row(r)) {
            if xv > t {
                *o = g;
            } else {
                dt[r] += g;
            }
        }
    }
    (dx, dt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_threshold_is_relu() {
        let x = Matrix::from_rows(&[[-1.0, 0.5, 2.0]]);
        assert_eq!(trelu_forward(&x, &[0.0]), Matrix::from_rows(&[[0.0, 0.5, 2.0]]));
    }

    #[test]
    fn above_threshold_is_identity() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let g = Matrix::from_rows(&[[0.1, 0.2], [0.3, 0.4]]);
        assert_eq!(trelu_forward(&x, &[0.5, 0.5]), x);
        let (dx, dt) = trelu_backward(&x, &[0.5, 0.5], &g);
        assert_eq!(dx, g);
        assert_eq!(dt, vec![0.0, 0.0]);
    }

    #[test]
    fn mixed_case_matches_finite_differences() {
        let x = Matrix::from_rows(&[[-1.0, 2.0]]);
        let t = 0.5;
        assert_eq!(trelu_forward(&x, &[t]), Matrix::from_rows(&[[0.5, 2.0]]));
        let (dx, dt) = trelu_backward(&x, &[t], &Matrix::from_rows(&[[1.0, 1.0]]));
        assert_eq!(dx, Matrix::from_rows(&[[0.0, 1.0]]));
        assert_eq!(dt, vec![1.0]);

        // Scalarized loss L = Σ y away from the kinks.
        let loss = |x: &Matrix, t: f64| trelu_forward(x, &[t]).as_slice().iter().sum::<f64>();
        let h = 1e-6;
        let num_dt = (loss(&x, t + h) - loss(&x, t - h)) / (2.0 * h);
        assert!((num_dt - 1.0).abs() < 1e-9);
        for c in 0..2 {
            let mut xp = x.clone();
            xp[(0, c)] += h;
            let mut xm = x.clone();
            xm[(0, c)] -= h;
            let num = (loss(&xp, t) - loss(&xm, t)) / (2.0 * h);
            assert!((num - dx[(0, c)]).abs() < 1e-9);
        }
    }
}
