//! Small unconstrained maximizer used by the inner M-step problems.

/// Outcome of [`maximize_bfgs`].
#[derive(Debug, Clone)]
pub struct Maximum {
    pub x: Vec<f64>,
    pub value: f64,
    /// Objective after each accepted step, starting with the initial value.
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// BFGS ascent with a backtracking Armijo line search.
///
/// `f(x, grad)` returns the objective and writes its gradient. Only steps
/// that do not decrease the objective are accepted, so the returned value
/// is never below `f(x0)`.
pub fn maximize_bfgs<F>(mut f: F, x0: &[f64], max_iter: usize, gtol: f64) -> Maximum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut value = f(&x, &mut g);
    let mut trace = vec![value];
    if n == 0 || !value.is_finite() {
        return Maximum { x, value, trace, converged: n == 0 };
    }
    // inverse Hessian approximation of -f
    let mut hinv = identity(n);
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut converged = false;

    for _ in 0..max_iter {
        let gnorm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gnorm < gtol * (1.0 + value.abs()) {
            converged = true;
            break;
        }
        let mut dir = mat_vec(&hinv, &g);
        let mut slope: f64 = dir.iter().zip(&g).map(|(d, gi)| d * gi).sum();
        if !(slope > 0.0) {
            hinv = identity(n);
            dir = g.clone();
            slope = g.iter().map(|v| v * v).sum();
        }
        // keep steps bounded in the unconstrained coordinates
        let dmax = dir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut step = if dmax > 5.0 { 5.0 / dmax } else { 1.0 };
        let mut accepted = false;
        for _ in 0..40 {
            for i in 0..n {
                x_new[i] = x[i] + step * dir[i];
            }
            let v = f(&x_new, &mut g_new);
            if v.is_finite() && v >= value + 1e-4 * step * slope {
                accepted = true;
                let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
                // gradient of -f changes by -(g_new - g)
                let y: Vec<f64> = (0..n).map(|i| g[i] - g_new[i]).collect();
                let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
                if sy > 1e-12 {
                    bfgs_update(&mut hinv, &s, &y, sy);
                }
                x.copy_from_slice(&x_new);
                g.copy_from_slice(&g_new);
                value = v;
                trace.push(value);
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // no ascent along the gradient at machine precision: stationary
            converged = gnorm < 1e-6 * (1.0 + value.abs());
            break;
        }
        if trace.len() >= 2 {
            let prev = trace[trace.len() - 2];
            if (value - prev).abs() <= 1e-14 * (1.0 + value.abs()) {
                converged = true;
                break;
            }
        }
    }
    Maximum { x, value, trace, converged }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let hy = mat_vec(h, y);
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    let rho = 1.0 / sy;
    for i in 0..n {
        for j in 0..n {
            h[i][j] += (1.0 + yhy * rho) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}
