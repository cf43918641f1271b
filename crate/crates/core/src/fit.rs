//! Small least-squares helpers used by the experiment drivers.

use crate::error::{Error, Result};

/// Ordinary least-squares line through `(x, y)` points: `(slope, intercept)`.
pub fn linear_fit(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::DegenerateFit(format!(
            "need at least two points, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if !(sxx > 0.0) || !sxy.is_finite() {
        return Err(Error::DegenerateFit("abscissae are all equal".into()));
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Fits `y = c · x^p` by a straight line in log–log space and returns `p`.
/// All values must be strictly positive.
pub fn power_law_exponent(points: &[(f64, f64)]) -> Result<f64> {
    if points.iter().any(|&(x, y)| !(x > 0.0) || !(y > 0.0)) {
        return Err(Error::DegenerateFit(
            "power-law fit needs strictly positive data".into(),
        ));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    Ok(linear_fit(&logs)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_and_power_law() {
        let (s, c) = linear_fit(&[(0.0, 1.0), (1.0, 3.0), (2.0, 5.0)]).unwrap();
        assert!((s - 2.0).abs() < 1e-14 && (c - 1.0).abs() < 1e-14);
        let p = power_law_exponent(&[(1.0, 2.0), (2.0, 16.0), (4.0, 128.0)]).unwrap();
        assert!((p - 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(linear_fit(&[(1.0, 1.0)]).is_err());
        assert!(linear_fit(&[(1.0, 1.0), (1.0, 2.0)]).is_err());
        assert!(power_law_exponent(&[(1.0, 0.0), (2.0, 1.0)]).is_err());
    }
}
