//! Box-bounded Nelder–Mead simplex descent.

#[derive(Debug, Clone, Copy)]
pub(crate) struct NmOptions {
    pub max_evals: usize,
    /// Relative spread of objective values across the simplex.
    pub f_tol: f64,
    /// Largest vertex distance from the best vertex (max norm).
    pub x_tol: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct NmOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

fn clamp(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, &l), &h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(l, h);
    }
}

fn along(from: &[f64], to: &[f64], t: f64) -> Vec<f64> {
    from.iter().zip(to).map(|(a, b)| a + t * (b - a)).collect()
}

/// Minimizes `f` starting from `x0`; the initial simplex extends `step[i]`
/// along each axis. Non-finite objective values are treated as `+∞`.
pub(crate) fn nelder_mead<F>(
    mut f: F,
    x0: &[f64],
    step: &[f64],
    lo: &[f64],
    hi: &[f64],
    opts: NmOptions,
) -> NmOutcome
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let mut start = x0.to_vec();
    clamp(&mut start, lo, hi);
    let mut pts: Vec<Vec<f64>> = vec![start.clone()];
    for i in 0..n {
        let mut p = start.clone();
        p[i] += step[i];
        clamp(&mut p, lo, hi);
        if p[i] == start[i] {
            p[i] -= step[i];
            clamp(&mut p, lo, hi);
        }
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| eval(p, &mut evals)).collect();

    loop {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();

        let f_best = vals[0];
        let f_worst = vals[n];
        let spread_f = f_worst - f_best;
        let spread_x = pts[1..]
            .iter()
            .flat_map(|p| p.iter().zip(&pts[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        // a simplex at rounding resolution cannot improve, even if summation
        // noise keeps the objective spread above tolerance
        let scale = pts[0].iter().fold(1.0f64, |a, v| a.max(v.abs()));
        let collapsed = spread_x <= 8.0 * f64::EPSILON * scale;
        if f_best.is_finite()
            && spread_x <= opts.x_tol
            && (spread_f <= opts.f_tol * (f_best.abs() + 1e-300) || collapsed)
        {
            return NmOutcome {
                x: pts.swap_remove(0),
                f: f_best,
                evals,
                converged: true,
            };
        }
        if evals >= opts.max_evals {
            return NmOutcome {
                x: pts.swap_remove(0),
                f: f_best,
                evals,
                converged: false,
            };
        }

        let mut centroid = vec![0.0; n];
        for p in &pts[..n] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / n as f64;
            }
        }
        let worst = pts[n].clone();

        let mut reflected = along(&centroid, &worst, -1.0);
        clamp(&mut reflected, lo, hi);
        let f_r = eval(&reflected, &mut evals);

        if f_r < vals[0] {
            let mut expanded = along(&centroid, &worst, -2.0);
            clamp(&mut expanded, lo, hi);
            let f_e = eval(&expanded, &mut evals);
            if f_e < f_r {
                pts[n] = expanded;
                vals[n] = f_e;
            } else {
                pts[n] = reflected;
                vals[n] = f_r;
            }
            continue;
        }
        if f_r < vals[n - 1] {
            pts[n] = reflected;
            vals[n] = f_r;
            continue;
        }
        let (contracted, accept_below) = if f_r < vals[n] {
            (along(&centroid, &reflected, 0.5), f_r)
        } else {
            (along(&centroid, &worst, 0.5), vals[n])
        };
        let f_c = eval(&contracted, &mut evals);
        if f_c < accept_below || (f_r < vals[n] && f_c <= f_r) {
            pts[n] = contracted;
            vals[n] = f_c;
            continue;
        }
        // shrink toward the best vertex
        let best = pts[0].clone();
        for i in 1..=n {
            pts[i] = along(&best, &pts[i], 0.5);
            vals[i] = eval(&pts[i], &mut evals);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const OPTS: NmOptions = NmOptions {
        max_evals: 20_000,
        f_tol: 1e-12,
        x_tol: 1e-9,
    };

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let out = nelder_mead(
            f,
            &[-1.2, 1.0],
            &[0.5, 0.5],
            &[-5.0, -5.0],
            &[5.0, 5.0],
            OPTS,
        );
        assert!(out.converged);
        assert!(
            (out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6,
            "{:?}",
            out.x
        );
    }

    #[test]
    fn respects_bounds() {
        let f = |x: &[f64]| (x[0] + 3.0).powi(2) + (x[1] - 0.5).powi(2) + 1.0;
        let out = nelder_mead(f, &[0.5, 0.0], &[0.3, 0.3], &[0.0, -1.0], &[1.0, 1.0], OPTS);
        assert!(out.x[0] >= 0.0 && out.x[0] < 1e-8);
        assert!((out.x[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_finite_values_avoided() {
        let f = |x: &[f64]| {
            if x[0] < 0.0 {
                f64::NAN
            } else {
                (x[0] - 0.2).powi(2) + 1.0
            }
        };
        let out = nelder_mead(f, &[1.0], &[0.5], &[-10.0], &[10.0], OPTS);
        assert!((out.x[0] - 0.2).abs() < 1e-6);
    }
}
