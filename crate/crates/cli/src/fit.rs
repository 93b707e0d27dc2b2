//! Small least-squares helpers for scenario checks.

/// Coefficient of determination of `y` against the prediction `yhat`.
pub fn r_squared(y: &[f64], yhat: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

/// Fits `y = k·basis` through the origin; returns `(k, R²)`.
pub fn fit_scale(basis: &[f64], y: &[f64]) -> (f64, f64) {
    let sxy: f64 = basis.iter().zip(y).map(|(b, v)| b * v).sum();
    let sxx: f64 = basis.iter().map(|b| b * b).sum();
    let k = sxy / sxx;
    let pred: Vec<f64> = basis.iter().map(|b| k * b).collect();
    (k, r_squared(y, &pred))
}

/// Fits `y = k·sin(x − x0)`; returns `(k, x0, R²)`.
pub fn fit_shifted_sine(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    // y = a·sin x + b·cos x with a = k cos x0, b = −k sin x0
    let (mut ss, mut sc, mut cc, mut sy, mut cy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&xi, &yi) in x.iter().zip(y) {
        let (s, c) = xi.sin_cos();
        ss += s * s;
        sc += s * c;
        cc += c * c;
        sy += s * yi;
        cy += c * yi;
    }
    let det = ss * cc - sc * sc;
    let a = (sy * cc - cy * sc) / det;
    let b = (cy * ss - sy * sc) / det;
    // sign of k follows a, which keeps x0 within ±π/2
    let k = a.hypot(b) * a.signum();
    let x0 = (-b / k).atan2(a / k);
    let pred: Vec<f64> = x.iter().map(|xi| a * xi.sin() + b * xi.cos()).collect();
    (k, x0, r_squared(y, &pred))
}

/// Population standard deviation.
pub fn std_pop(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_shift_for_either_sign() {
        let x: Vec<f64> = (0..41).map(|i| -0.4 + 0.02 * i as f64).collect();
        for k in [2.5, -0.7] {
            let y: Vec<f64> = x.iter().map(|v| k * (v - 3e-3f64).sin()).collect();
            let (kf, x0, r2) = fit_shifted_sine(&x, &y);
            assert!((kf - k).abs() < 1e-12, "{kf}");
            assert!((x0 - 3e-3).abs() < 1e-12, "{x0}");
            assert!((r2 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_fit_exact() {
        let b = [0.0, 0.5, 1.0, 0.5];
        let y = [0.0, 1.5, 3.0, 1.5];
        let (k, r2) = fit_scale(&b, &y);
        assert!((k - 3.0).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
    }
}
