/// Weighted least-squares line `y = intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard errors from the residual scatter; `None` with two points.
    pub slope_se: Option<f64>,
    pub intercept_se: Option<f64>,
    pub residual_sd: Option<f64>,
}

impl LineFit {
    pub fn at(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

/// Returns `None` when fewer than two points carry weight or all `x` coincide.
pub fn weighted_line(xs: &[f64], ys: &[f64], ws: &[f64]) -> Option<LineFit> {
    let n = xs.iter().zip(ws).filter(|(_, &w)| w > 0.0).count();
    if n < 2 {
        return None;
    }
    let sw: f64 = ws.iter().sum();
    let mx = xs.iter().zip(ws).map(|(x, w)| x * w).sum::<f64>() / sw;
    let my = ys.iter().zip(ws).map(|(y, w)| y * w).sum::<f64>() / sw;
    let sxx: f64 = xs.iter().zip(ws).map(|(x, w)| w * (x - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = xs
        .iter()
        .zip(ys)
        .zip(ws)
        .map(|((x, y), w)| w * (x - mx) * (y - my))
        .sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;

    let (slope_se, intercept_se, residual_sd) = if n > 2 {
        let ssr: f64 = xs
            .iter()
            .zip(ys)
            .zip(ws)
            .map(|((x, y), w)| w * (y - intercept - slope * x).powi(2))
            .sum();
        // weights rescaled to sum to the number of points
        let s2 = ssr / (n - 2) as f64 * n as f64 / sw;
        let sxx_n = sxx * n as f64 / sw;
        (
            Some((s2 / sxx_n).sqrt()),
            Some((s2 * (1.0 / n as f64 + mx * mx / sxx_n)).sqrt()),
            Some(s2.sqrt()),
        )
    } else {
        (None, None, None)
    };
    Some(LineFit {
        slope,
        intercept,
        slope_se,
        intercept_se,
        residual_sd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 - 0.5 * x).collect();
        let fit = weighted_line(&xs, &ys, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-14);
        assert!((fit.intercept - 2.0).abs() < 1e-14);
        assert!(fit.slope_se.unwrap() < 1e-12);
    }

    #[test]
    fn unweighted_standard_errors() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ys = [1.1, 1.9, 3.2, 3.9, 5.1];
        let fit = weighted_line(&xs, &ys, &[1.0; 5]).unwrap();
        // x̄ = 3, ȳ = 3.04, Sxy = 10, Sxx = 10
        assert!((fit.slope - 1.0).abs() < 1e-12);
        assert!((fit.intercept - 0.04).abs() < 1e-12);
        let ssr: f64 = xs.iter().zip(ys).map(|(x, y)| (y - 0.04 - x).powi(2)).sum();
        let se = (ssr / 3.0 / 10.0f64).sqrt();
        assert!((fit.slope_se.unwrap() - se).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(weighted_line(&[1.0], &[1.0], &[1.0]).is_none());
        assert!(weighted_line(&[1.0, 1.0], &[1.0, 2.0], &[1.0, 1.0]).is_none());
        let two = weighted_line(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 1.0]).unwrap();
        assert!(two.slope_se.is_none());
    }
}
