//! Box-constrained L-BFGS used for GP hyperparameter fitting.

/// Minimizes `f` within `[lower, upper]`. `f` returns `None` where the
/// objective is undefined (e.g. a failed factorization); such points are
/// rejected by the line search. Every accepted step strictly decreases `f`.
pub fn minimize_box<F>(mut f: F, x0: &[f64], lower: &[f64], upper: &[f64], max_iter: usize) -> (Vec<f64>, f64)
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    const MEMORY: usize = 8;
    let n = x0.len();
    let clamp = |x: &mut [f64]| {
        for i in 0..n {
            x[i] = x[i].clamp(lower[i], upper[i]);
        }
    };
    let mut x = x0.to_vec();
    clamp(&mut x);
    let Some((mut fx, mut g)) = f(&x) else {
        return (x, f64::INFINITY);
    };
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();

    for _ in 0..max_iter {
        // gradient with components pinned at active bounds zeroed
        let pg: Vec<f64> = (0..n)
            .map(|i| {
                if (x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0) {
                    0.0
                } else {
                    g[i]
                }
            })
            .collect();
        let gnorm = pg.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < 1e-8 {
            break;
        }
        let mut dir = two_loop(&pg, &s_hist, &y_hist);
        for v in dir.iter_mut() {
            *v = -*v;
        }
        let slope: f64 = dir.iter().zip(&pg).map(|(d, g)| d * g).sum();
        if !(slope < 0.0) {
            s_hist.clear();
            y_hist.clear();
            dir = pg.iter().map(|v| -v).collect();
        }
        let mut step = if s_hist.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..30 {
            let mut trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            clamp(&mut trial);
            if let Some((ft, gt)) = f(&trial) {
                let decrease: f64 = g.iter().zip(trial.iter().zip(&x)).map(|(g, (t, a))| g * (t - a)).sum();
                if ft.is_finite() && ft <= fx + 1e-4 * decrease.min(0.0) && ft < fx {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            if s_hist.len() == MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
        let improvement = fx - fnew;
        x = xn;
        fx = fnew;
        g = gn;
        if improvement < 1e-9 * (1.0 + fx.abs()) {
            break;
        }
    }
    (x, fx)
}

fn two_loop(g: &[f64], s_hist: &[Vec<f64>], y_hist: &[Vec<f64>]) -> Vec<f64> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut q = g.to_vec();
    let m = s_hist.len();
    let mut alpha = vec![0.0; m];
    for i in (0..m).rev() {
        let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
        alpha[i] = rho * dot(&s_hist[i], &q);
        for (qj, yj) in q.iter_mut().zip(&y_hist[i]) {
            *qj -= alpha[i] * yj;
        }
    }
    if m > 0 {
        let gamma = dot(&s_hist[m - 1], &y_hist[m - 1]) / dot(&y_hist[m - 1], &y_hist[m - 1]);
        for v in q.iter_mut() {
            *v *= gamma;
        }
    }
    for i in 0..m {
        let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
        let beta = rho * dot(&y_hist[i], &q);
        for (qj, sj) in q.iter_mut().zip(&s_hist[i]) {
            *qj += (alpha[i] - beta) * sj;
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock_minimum() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Some((v, g))
        };
        let (x, v) = minimize_box(f, &[-1.2, 1.0], &[-5.0, -5.0], &[5.0, 5.0], 500);
        assert!(v < 1e-10, "{v}");
        assert!((x[0] - 1.0).abs() < 1e-4 && (x[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn respects_bounds() {
        let f = |x: &[f64]| Some(((x[0] - 3.0).powi(2), vec![2.0 * (x[0] - 3.0)]));
        let (x, _) = minimize_box(f, &[0.0], &[-1.0], &[1.0], 100);
        assert!((x[0] - 1.0).abs() < 1e-12);
    }
}
