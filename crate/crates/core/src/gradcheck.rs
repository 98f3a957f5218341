//! Finite-difference gradient checking.

use ndarray::Array2;

/// Central finite differences of a scalar function of a matrix.
pub fn central_diff(x0: &Array2<f64>, h: f64, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(x0.dim());
    let mut x = x0.clone();
    for idx in 0..x0.len() {
        let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
        let orig = x[[r, c]];
        x[[r, c]] = orig + h;
        let fp = f(&x);
        x[[r, c]] = orig - h;
        let fm = f(&x);
        x[[r, c]] = orig;
        out[[r, c]] = (fp - fm) / (2.0 * h);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` with a tiny floor on the denominator.
pub fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let na = a.mapv(|v| v * v).sum().sqrt();
    let nb = b.mapv(|v| v * v).sum().sqrt();
    diff / na.max(nb).max(1e-12)
}
