//! Weighted least-squares line fit for convergence orders.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// From the weights, taken as inverse variances.
    pub slope_se: f64,
    pub r_squared: f64,
    /// Weighted residual sum of squares.
    pub chi2: f64,
    pub points: usize,
}

/// Fits `y = intercept + slope·x` minimizing `Σ w (y - ŷ)²`.
pub fn weighted_fit(x: &[f64], y: &[f64], w: &[f64]) -> Result<SlopeFit> {
    let n = x.len();
    if n < 2 || y.len() != n || w.len() != n {
        return Err(Error::InvalidParameter {
            name: "fit",
            reason: format!("need ≥ 2 matching points, got {n}/{}/{}", y.len(), w.len()),
        });
    }
    if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidParameter {
            name: "fit",
            reason: "weights must be positive and finite".into(),
        });
    }
    let sw: f64 = w.iter().sum();
    let xm = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let ym = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for i in 0..n {
        let (dx, dy) = (x[i] - xm, y[i] - ym);
        sxx += w[i] * dx * dx;
        sxy += w[i] * dx * dy;
        syy += w[i] * dy * dy;
    }
    if !(sxx > 0.0) {
        return Err(Error::InvalidParameter {
            name: "fit",
            reason: "abscissae are not distinct".into(),
        });
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let chi2: f64 = (0..n)
        .map(|i| w[i] * (y[i] - intercept - slope * x[i]).powi(2))
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - chi2 / syy } else { 1.0 };
    Ok(SlopeFit {
        slope,
        intercept,
        slope_se: (1.0 / sxx).sqrt(),
        r_squared,
        chi2,
        points: n,
    })
}

/// Log-log fit of `|e|` against `h`, weighting by `(|e|/se)²` from the
/// delta method. Zero `se` entries get unit weight.
pub fn log_log_fit(h: &[f64], e: &[f64], se: &[f64]) -> Result<SlopeFit> {
    let x: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = e.iter().map(|v| v.abs().ln()).collect();
    let w: Vec<f64> = e
        .iter()
        .zip(se)
        .map(|(e, s)| if *s > 0.0 { (e / s).powi(2) } else { 1.0 })
        .collect();
    weighted_fit(&x, &y, &w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn recovers_synthetic_orders() {
        let h = [0.8, 0.4, 0.2, 0.1];
        for p in [0.5, 1.0, 2.0] {
            let e: Vec<f64> = h.iter().map(|v: &f64| 0.3 * v.powf(p)).collect();
            let se: Vec<f64> = e.iter().map(|v| 0.1 * v).collect();
            let fit = log_log_fit(&h, &e, &se).unwrap();
            assert!((fit.slope - p).abs() < 1e-10);
            assert!(fit.chi2 < 1e-20);
        }
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(weighted_fit(&[1.0], &[1.0], &[1.0]).is_err());
        assert!(weighted_fit(&[1.0, 1.0], &[1.0, 2.0], &[1.0, 1.0]).is_err());
        assert!(weighted_fit(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn exact_lines_are_recovered(
            a in -5.0f64..5.0,
            b in -3.0f64..3.0,
            w in proptest::collection::vec(0.1f64..10.0, 5),
        ) {
            let x = [0.0, 0.5, 1.5, 2.0, 3.0];
            let y: Vec<f64> = x.iter().map(|v| a + b * v).collect();
            let fit = weighted_fit(&x, &y, &w).unwrap();
            prop_assert!((fit.slope - b).abs() < 1e-9);
            prop_assert!((fit.intercept - a).abs() < 1e-9);
        }
    }
}
