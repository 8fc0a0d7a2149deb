//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

/// Closed-form bridge covariance for `g = p(tt − t)` and prior
/// `[[m, −k√(mn)], [−k√(mn), n]]` (note the sign on the off-diagonal).
pub fn closed_form_cov(t: f64, p: f64, tt: f64, m: f64, n: f64, k: f64) -> (f64, f64, f64) {
    let l = (1.0 - t).ln();
    let q = 6.0 * tt * tt + 3.0 * tt + 1.0;
    let km = k * (m * n).sqrt();
    let p2 = p * p;
    let xx = (t - 1.0).powi(2)
        * (30.0 * m * (t.powi(3) - 3.0 * t * t + 3.0 * t + 3.0).powi(2)
            - 60.0 * p2 * (t - 1.0).powi(3) * l
            - t * (60.0 * km * (t.powi(5) - 6.0 * t.powi(4) + 15.0 * t.powi(3) - 15.0 * t * t + 9.0)
                - 30.0 * n * t * (t * t - 3.0 * t + 3.0).powi(2)
                + p2 * (t.powi(5) * q - 6.0 * t.powi(4) * q + 15.0 * t.powi(3) * q
                    - 10.0 * t * t * (9.0 * tt * tt + 11.0)
                    + 150.0 * t
                    - 60.0)))
        / 270.0;
    let xv = (1.0 / 270.0 - t / 270.0)
        * (30.0 * km * (8.0 * t.powi(6) - 48.0 * t.powi(5) + 120.0 * t.powi(4) - 135.0 * t.powi(3) + 45.0 * t * t + 27.0 * t - 9.0)
            + 150.0 * p2 * (t - 1.0).powi(3) * l
            + t * (-120.0 * m * (t.powi(5) - 6.0 * t.powi(4) + 15.0 * t.powi(3) - 15.0 * t * t + 9.0)
                - 30.0 * n * (4.0 * t.powi(5) - 24.0 * t.powi(4) + 60.0 * t.powi(3) - 75.0 * t * t + 45.0 * t - 9.0)
                + p2 * (4.0 * t.powi(5) * q - 24.0 * t.powi(4) * q + 60.0 * t.powi(3) * q
                    - 5.0 * t * t * (81.0 * tt * tt + 18.0 * tt + 55.0)
                    + 15.0 * t * (9.0 * tt * tt + 25.0)
                    - 150.0)));
    let vv = n * (-4.0 * t.powi(3) + 12.0 * t * t - 12.0 * t + 3.0).powi(2) / 9.0
        - 8.0 * p2 * (t - 1.0).powi(3) * l / 9.0
        + t * (-120.0 * km * (4.0 * t.powi(5) - 24.0 * t.powi(4) + 60.0 * t.powi(3) - 75.0 * t * t + 45.0 * t - 9.0)
            + 240.0 * m * t * (t * t - 3.0 * t + 3.0).powi(2)
            + p2 * (-8.0 * t.powi(5) * q + 48.0 * t.powi(4) * q - 120.0 * t.powi(3) * q
                + 5.0 * t * t * (180.0 * tt * tt + 72.0 * tt + 53.0)
                - 15.0 * t * (36.0 * tt * tt + 9.0 * tt + 20.0)
                + 135.0 * tt * tt
                + 120.0))
            / 135.0;
    (xx, xv, vv)
}

/// Mean ODE `dμx = μv, dμv = 4(x1 − μx)/(1−t)² − 4μv/(1−t)` by fixed-step RK4,
/// returning `(t, μx, μv)` at every step.
pub fn mean_ode_rk4(x1: f64, t_end: f64, h: f64) -> Vec<(f64, f64, f64)> {
    let f = |t: f64, y: [f64; 2]| {
        let u = 1.0 - t;
        [y[1], 4.0 * (x1 - y[0]) / (u * u) - 4.0 * y[1] / u]
    };
    let mut y = [0.0, 0.0];
    let mut t = 0.0;
    let mut out = vec![(t, y[0], y[1])];
    let steps = (t_end / h).round() as usize;
    for _ in 0..steps {
        let k1 = f(t, y);
        let k2 = f(t + h / 2.0, [y[0] + h / 2.0 * k1[0], y[1] + h / 2.0 * k1[1]]);
        let k3 = f(t + h / 2.0, [y[0] + h / 2.0 * k2[0], y[1] + h / 2.0 * k2[1]]);
        let k4 = f(t + h, [y[0] + h * k3[0], y[1] + h * k3[1]]);
        for i in 0..2 {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        t += h;
        out.push((t, y[0], y[1]));
    }
    out
}

/// Adaptive Simpson quadrature to an absolute tolerance.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Explicit inverse of a lower-triangular 2×2 factor `[[a, 0], [b, c]]`.
pub fn lower_inverse(a: f64, b: f64, c: f64) -> [[f64; 2]; 2] {
    [[1.0 / a, 0.0], [-b / (a * c), 1.0 / c]]
}

/// Sample mean and population variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v)
}
