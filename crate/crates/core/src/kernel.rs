//! Analytic phase-space kernel.
//!
//! Everything the bridge, training and samplers need about the conditional
//! process `dx = v dt, dv = F dt + g(t) dW` pinned at `x1` when `t = 1`:
//! diffusion schedule, control gain, Lyapunov closed forms, transition
//! matrix, mean coefficients, covariance, Cholesky factors and time grids.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::error::{AgmError, Result};
use crate::io::Columnar;

pub type Mat2 = [[f64; 2]; 2];

/// Kernel evaluations reject `t >= 1 - SINGULAR_MARGIN`.
pub const SINGULAR_MARGIN: f64 = 1e-9;
/// Largest covariance integration step.
pub const COV_STEP: f64 = 1e-4;
/// Covariance steps shrink to this fraction of the remaining time near t = 1.
pub const COV_STEP_FRACTION: f64 = 0.002;
/// Absolute determinant floor for `cholesky2`.
pub const PSD_FLOOR: f64 = 1e-12;
/// Determinant floor of the kernel table, relative to `Sxx·Svv`.
pub const TABLE_DET_FLOOR: f64 = 1e-30;

fn check_time(t: f64) -> Result<()> {
    if t.is_nan() || t >= 1.0 - SINGULAR_MARGIN {
        return Err(AgmError::SingularTime { t });
    }
    if t < 0.0 {
        return Err(AgmError::config(format!("time {t} is negative")));
    }
    Ok(())
}

/// Which force the network regresses and the sampler integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Sde,
    Ode,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Sde => "sde",
            Mode::Ode => "ode",
        })
    }
}

impl FromStr for Mode {
    type Err = AgmError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sde" => Ok(Mode::Sde),
            "ode" => Ok(Mode::Ode),
            other => Err(AgmError::config(format!("unknown mode {other:?} (expected sde|ode)"))),
        }
    }
}

/// `g(t) = p·(tt − t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionSchedule {
    pub p: f64,
    pub tt: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        DiffusionSchedule { p: 3.0, tt: 1.0 }
    }
}

impl DiffusionSchedule {
    pub fn new(p: f64, tt: f64) -> Result<Self> {
        if !(p.is_finite() && p > 0.0) {
            return Err(AgmError::config(format!("schedule scale p={p} must be positive")));
        }
        if !(tt.is_finite() && tt > 0.0) {
            return Err(AgmError::config(format!("schedule offset tt={tt} must be positive")));
        }
        Ok(DiffusionSchedule { p, tt })
    }

    #[inline]
    pub fn g(&self, t: f64) -> f64 {
        self.p * (self.tt - t)
    }
}

pub fn g_schedule(sched: &DiffusionSchedule, t: f64) -> f64 {
    sched.g(t)
}

/// `g(t)²·P₁₁(t) = 4/(1−t)`, independent of the schedule.
pub fn combined_gain(t: f64) -> Result<f64> {
    check_time(t)?;
    Ok(4.0 / (1.0 - t))
}

pub fn p11(sched: &DiffusionSchedule, t: f64) -> Result<f64> {
    p11_with_g(sched.g(t), t)
}

/// `P₁₁ = −4/(g²(t−1))` for a given diffusion value.
pub fn p11_with_g(g: f64, t: f64) -> Result<f64> {
    check_time(t)?;
    if g <= 0.0 {
        return Err(AgmError::ZeroDiffusion { t });
    }
    Ok(-4.0 / (g * g * (t - 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovSolution {
    pub t: f64,
    pub omega: f64,
    pub g: f64,
    pub p: Mat2,
    /// `None` where `P` is singular (the terminal time with `ω = 0`).
    pub pinv: Option<Mat2>,
}

/// Closed-form solution of `dP/dt = AP + PAᵀ − ggᵀ`, `A = [[0,1],[0,0]]`,
/// with terminal value `P(1) = diag(0, ω)` and constant diffusion `g`.
pub fn lyapunov_solution(t: f64, omega: f64, g: f64) -> Result<LyapunovSolution> {
    if !(0.0..=1.0).contains(&t) {
        return Err(AgmError::config(format!("lyapunov time {t} outside [0, 1]")));
    }
    if !(omega >= 0.0 && omega.is_finite()) {
        return Err(AgmError::config(format!("omega={omega} must be non-negative")));
    }
    if !(g > 0.0 && g.is_finite()) {
        return Err(AgmError::config(format!("g={g} must be positive")));
    }
    let s = t - 1.0;
    let g2 = g * g;
    let p00 = omega * s * s - g2 * s * s * s / 3.0;
    let p01 = omega * s - g2 * s * s / 2.0;
    let p11 = -g2 * s + omega;
    let p = [[p00, p01], [p01, p11]];

    let denom = g2 * (-4.0 * omega + g2 * s) * s;
    let pinv = if denom != 0.0 && s != 0.0 {
        let c = 1.0 / denom;
        let i00 = c * 12.0 * (omega - g2 * s) / (s * s);
        let i01 = c * 6.0 * (-2.0 * omega + g2 * s) / s;
        let i11 = c * (12.0 * omega - 4.0 * g2 * s);
        Some([[i00, i01], [i01, i11]])
    } else {
        None
    };
    Ok(LyapunovSolution { t, omega, g, p, pinv })
}

/// State transition of the free dynamics: `Φ(t, s) = [[1, t−s], [0, 1]]`.
pub fn transition(t: f64, s: f64) -> Mat2 {
    [[1.0, t - s], [0.0, 1.0]]
}

pub fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

/// Mean coefficients with a centred prior: `μ_t = x1·(mx, mv)`.
pub fn mean_coeffs(t: f64) -> (f64, f64) {
    let mx = t * t * (t * t - 4.0 * t + 6.0) / 3.0;
    let mv = 4.0 * t * (t * t - 3.0 * t + 3.0) / 3.0;
    (mx, mv)
}

/// Prior covariance of `(x₀, v₀)` per coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sigma0 {
    pub xx: f64,
    pub xv: f64,
    pub vv: f64,
}

impl Default for Sigma0 {
    fn default() -> Self {
        Sigma0 { xx: 1.0, xv: -0.2, vv: 1.0 }
    }
}

impl Sigma0 {
    /// `[[1, k], [k, 1]]`.
    pub fn from_k(k: f64) -> Result<Self> {
        Self::general(k, 1.0, 1.0)
    }

    /// `[[m, k√(mn)], [k√(mn), n]]`.
    pub fn general(k: f64, m: f64, n: f64) -> Result<Self> {
        if !(m > 0.0 && n > 0.0 && m.is_finite() && n.is_finite()) {
            return Err(AgmError::config(format!("prior variances m={m}, n={n} must be positive")));
        }
        if !(k.abs() < 1.0) {
            return Err(AgmError::config(format!("prior correlation k={k} must lie in (-1, 1)")));
        }
        Ok(Sigma0 { xx: m, xv: k * (m * n).sqrt(), vv: n })
    }

    pub fn det(&self) -> f64 {
        self.xx * self.vv - self.xv * self.xv
    }

    /// Lower Cholesky factor `[[a, 0], [b, c]]` as `(a, b, c)`.
    pub fn factor(&self) -> (f64, f64, f64) {
        let a = self.xx.sqrt();
        (a, self.xv / a, (self.det() / self.xx).sqrt())
    }
}

/// One covariance block with its determinant carried separately.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cov2 {
    pub sxx: f64,
    pub sxv: f64,
    pub svv: f64,
    pub det: f64,
}

impl Cov2 {
    pub fn eigenvalues(&self) -> [f64; 2] {
        sym_eigenvalues(self.sxx, self.sxv, self.svv)
    }
}

fn sym_eigenvalues(a: f64, b: f64, c: f64) -> [f64; 2] {
    let m = 0.5 * (a + c);
    let r = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    [m - r, m + r]
}

type CovState = [f64; 4];

/// Right-hand side for `(Sxx, Sxv, Svv, det Σ)`.
fn cov_rhs(sched: &DiffusionSchedule, t: f64, y: &CovState) -> CovState {
    let r = 1.0 / (1.0 - t);
    let a = -4.0 * r * r;
    let b = -4.0 * r;
    let g = sched.g(t);
    let g2 = g * g;
    let [sxx, sxv, svv, det] = *y;
    [
        2.0 * sxv,
        svv + a * sxx + b * sxv,
        2.0 * (a * sxv + b * svv) + g2,
        2.0 * b * det + g2 * sxx,
    ]
}

fn rk4(sched: &DiffusionSchedule, t: f64, y: &CovState, h: f64) -> CovState {
    let add = |y: &CovState, k: &CovState, s: f64| -> CovState {
        [y[0] + s * k[0], y[1] + s * k[1], y[2] + s * k[2], y[3] + s * k[3]]
    };
    let k1 = cov_rhs(sched, t, y);
    let k2 = cov_rhs(sched, t + 0.5 * h, &add(y, &k1, 0.5 * h));
    let k3 = cov_rhs(sched, t + 0.5 * h, &add(y, &k2, 0.5 * h));
    let k4 = cov_rhs(sched, t + h, &add(y, &k3, h));
    let mut out = *y;
    for i in 0..4 {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

fn graded_step(t: f64) -> f64 {
    COV_STEP.min(COV_STEP_FRACTION * (1.0 - t))
}

fn initial_state(sigma0: &Sigma0) -> CovState {
    [sigma0.xx, sigma0.xv, sigma0.vv, sigma0.det()]
}

fn check_pd(t: f64, y: &CovState) -> Result<()> {
    if !(y[0] > 0.0 && y[3] > 0.0 && y.iter().all(|v| v.is_finite())) {
        return Err(AgmError::NotPositiveDefinite {
            t: Some(t),
            eigenvalues: sym_eigenvalues(y[0], y[1], y[2]),
        });
    }
    Ok(())
}

/// Bridge covariance per coordinate at time `t`, integrated from `Σ₀` with RK4.
pub fn covariance(t: f64, sigma0: &Sigma0, sched: &DiffusionSchedule) -> Result<Cov2> {
    check_time(t)?;
    let mut y = initial_state(sigma0);
    let mut s = 0.0;
    while s < t {
        let h = graded_step(s).min(t - s);
        y = rk4(sched, s, &y, h);
        s = if t - (s + h) < 1e-15 { t } else { s + h };
    }
    check_pd(t, &y)?;
    Ok(Cov2 { sxx: y[0], sxv: y[1], svv: y[2], det: y[3] })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cholesky2 {
    pub lxx: f64,
    pub lxv: f64,
    pub lvv: f64,
    /// Set when the determinant was clamped up to the floor.
    pub degenerate: bool,
}

/// Lower Cholesky factor of `[[Sxx, Sxv], [Sxv, Svv]]`.
pub fn cholesky2(sxx: f64, sxv: f64, svv: f64) -> Result<Cholesky2> {
    let det = sxx * svv - sxv * sxv;
    cholesky_with_det(sxx, sxv, det, PSD_FLOOR, svv)
}

fn cholesky_with_det(sxx: f64, sxv: f64, det: f64, floor: f64, svv: f64) -> Result<Cholesky2> {
    if !(sxx > 0.0) || !det.is_finite() || det < -floor {
        return Err(AgmError::NotPositiveDefinite {
            t: None,
            eigenvalues: sym_eigenvalues(sxx, sxv, svv),
        });
    }
    let degenerate = det < floor;
    if degenerate {
        log::warn!("near-singular covariance (det {det:e}); clamping to {floor:e}");
    }
    let d = det.max(floor);
    let lxx = sxx.sqrt();
    Ok(Cholesky2 { lxx, lxv: sxv / lxx, lvv: (d / sxx).sqrt(), degenerate })
}

/// `ℓ = √(Sxx / det Σ)`, so that `∇_v log p = −ℓ·ε₁`.
pub fn score_scale(sxx: f64, sxv: f64, svv: f64) -> Result<f64> {
    let det = sxx * svv - sxv * sxv;
    if !(det > 0.0 && sxx > 0.0) {
        return Err(AgmError::SingularCovariance { det });
    }
    Ok((sxx / det).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub n: usize,
    pub kappa: f64,
    pub t0: f64,
    pub tn: f64,
    pub ts: Vec<f64>,
}

/// `t_i = ((N−i)/N·t0^(1/κ) + i/N·tN^(1/κ))^κ`.
pub fn time_grid(n: usize, kappa: f64, t0: f64, tn: f64) -> Result<TimeGrid> {
    if n == 0 {
        return Err(AgmError::config("time grid needs at least one step"));
    }
    if !(kappa >= 1.0 && kappa.is_finite()) {
        return Err(AgmError::config(format!("grid exponent kappa={kappa} must be >= 1")));
    }
    if !(t0 >= 0.0 && t0 < tn && tn < 1.0 - SINGULAR_MARGIN) {
        return Err(AgmError::config(format!("grid bounds need 0 <= t0 < tN < 1, got t0={t0}, tN={tn}")));
    }
    let a = t0.powf(1.0 / kappa);
    let b = tn.powf(1.0 / kappa);
    let nf = n as f64;
    let mut ts: Vec<f64> = (0..=n)
        .map(|i| {
            let i = i as f64;
            ((nf - i) / nf * a + i / nf * b).powf(kappa)
        })
        .collect();
    ts[0] = t0;
    ts[n] = tn;
    if ts.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(AgmError::config("time grid is not strictly increasing"));
    }
    Ok(TimeGrid { n, kappa, t0, tn, ts })
}

impl TimeGrid {
    pub fn step(&self, i: usize) -> f64 {
        self.ts[i + 1] - self.ts[i]
    }
}

/// Every per-time quantity used downstream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelPoint {
    pub t: f64,
    pub g: f64,
    pub p11: f64,
    /// `g²P₁₁ = 4/(1−t)`.
    pub gain: f64,
    pub mx: f64,
    pub mv: f64,
    pub sxx: f64,
    pub sxv: f64,
    pub svv: f64,
    pub det: f64,
    pub lxx: f64,
    pub lxv: f64,
    pub lvv: f64,
    pub ell: f64,
    pub z_sde: f64,
    pub z_ode: f64,
    pub degenerate: bool,
}

impl KernelPoint {
    pub fn z(&self, mode: Mode) -> f64 {
        match mode {
            Mode::Sde => self.z_sde,
            Mode::Ode => self.z_ode,
        }
    }

    /// Coefficient of ε₀ in the control noise term, `Lxx/(1−t) + Lxv`.
    pub fn zeta_hat(&self) -> f64 {
        self.lxx / (1.0 - self.t) + self.lxv
    }
}

/// Scalar normalizers `(z_sde, z_ode)`: the per-coordinate standard deviation
/// of the force targets when `x1` has standard deviation `sigma_data`.
pub fn normalizers(t: f64, g: f64, lxx: f64, lxv: f64, lvv: f64, sigma_data: f64) -> (f64, f64) {
    let u = 1.0 - t;
    let gain = 4.0 / u;
    let data = 4.0 * u * u * sigma_data;
    let zh = lxx / u + lxv;
    let ell = 1.0 / lvv;
    let z_sde = (data * data + gain * gain * (zh * zh + lvv * lvv)).sqrt();
    let e1 = gain * lvv - 0.5 * g * g * ell;
    let z_ode = (data * data + (gain * zh).powi(2) + e1 * e1).sqrt();
    (z_sde, z_ode)
}

/// Dense, immutable cache of the covariance ODE solution on `[0, 1 − 1e−9]`
/// with cubic Hermite interpolation between RK4 nodes.
#[derive(Debug, Clone)]
pub struct KernelTable {
    sched: DiffusionSchedule,
    sigma0: Sigma0,
    sigma_data: f64,
    nodes: Vec<f64>,
    ys: Vec<CovState>,
    dys: Vec<CovState>,
}

pub const KERNEL_COLUMNS: [&str; 14] = [
    "t", "g", "P11", "mx", "mv", "Sxx", "Sxv", "Svv", "Lxx", "Lxv", "Lvv", "ell", "z_sde", "z_ode",
];

impl KernelTable {
    pub fn build(sched: DiffusionSchedule, sigma0: Sigma0, sigma_data: f64) -> Result<Self> {
        if sched.tt < 1.0 {
            return Err(AgmError::config(format!(
                "schedule offset tt={} must be >= 1 so that g stays positive before t = 1",
                sched.tt
            )));
        }
        if !(sigma_data > 0.0 && sigma_data.is_finite()) {
            return Err(AgmError::config(format!("sigma_data={sigma_data} must be positive")));
        }
        if !(sigma0.xx > 0.0 && sigma0.det() > 0.0) {
            return Err(AgmError::config("prior covariance must be positive definite"));
        }
        let end = 1.0 - SINGULAR_MARGIN;
        let mut t = 0.0;
        let mut y = initial_state(&sigma0);
        let mut nodes = vec![t];
        let mut ys = vec![y];
        let mut dys = vec![cov_rhs(&sched, t, &y)];
        while t < end {
            let h = graded_step(t).min(end - t);
            y = rk4(&sched, t, &y, h);
            t = if end - (t + h) < 1e-15 { end } else { t + h };
            check_pd(t, &y)?;
            nodes.push(t);
            ys.push(y);
            dys.push(cov_rhs(&sched, t, &y));
        }
        Ok(KernelTable { sched, sigma0, sigma_data, nodes, ys, dys })
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.sched
    }

    pub fn sigma0(&self) -> &Sigma0 {
        &self.sigma0
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Interpolated `(Sxx, Sxv, Svv, det)`.
    pub fn covariance(&self, t: f64) -> Result<Cov2> {
        check_time(t)?;
        let i = match self.nodes.binary_search_by(|n| n.partial_cmp(&t).unwrap()) {
            Ok(i) => {
                let y = self.ys[i];
                return Ok(Cov2 { sxx: y[0], sxv: y[1], svv: y[2], det: y[3] });
            }
            Err(i) => i - 1,
        };
        let (t0, t1) = (self.nodes[i], self.nodes[i + 1]);
        let h = t1 - t0;
        let s = (t - t0) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let (y0, y1, d0, d1) = (&self.ys[i], &self.ys[i + 1], &self.dys[i], &self.dys[i + 1]);
        let c = |k: usize| h00 * y0[k] + h10 * h * d0[k] + h01 * y1[k] + h11 * h * d1[k];
        Ok(Cov2 { sxx: c(0), sxv: c(1), svv: c(2), det: c(3) })
    }

    pub fn at(&self, t: f64) -> Result<KernelPoint> {
        let cov = self.covariance(t)?;
        let g = self.sched.g(t);
        let gain = 4.0 / (1.0 - t);
        let (mx, mv) = mean_coeffs(t);
        // The determinant is integrated directly and stays accurate far below
        // any absolute threshold, so the floor only guards against underflow.
        let floor = TABLE_DET_FLOOR * cov.sxx * cov.svv;
        let ch = cholesky_with_det(cov.sxx, cov.sxv, cov.det, floor, cov.svv).map_err(|e| match e {
            AgmError::NotPositiveDefinite { eigenvalues, .. } => {
                AgmError::NotPositiveDefinite { t: Some(t), eigenvalues }
            }
            e => e,
        })?;
        let (z_sde, z_ode) = normalizers(t, g, ch.lxx, ch.lxv, ch.lvv, self.sigma_data);
        Ok(KernelPoint {
            t,
            g,
            p11: gain / (g * g),
            gain,
            mx,
            mv,
            sxx: cov.sxx,
            sxv: cov.sxv,
            svv: cov.svv,
            det: cov.det.max(floor),
            lxx: ch.lxx,
            lxv: ch.lxv,
            lvv: ch.lvv,
            ell: 1.0 / ch.lvv,
            z_sde,
            z_ode,
            degenerate: ch.degenerate,
        })
    }

    pub fn at_grid(&self, grid: &TimeGrid) -> Result<Vec<KernelPoint>> {
        grid.ts.iter().map(|&t| self.at(t)).collect()
    }

    /// Columnar dump of the table at the given times.
    pub fn to_columnar(&self, ts: &[f64]) -> Result<Columnar> {
        let mut c = Columnar::new(&KERNEL_COLUMNS)
            .with_meta("p", self.sched.p)
            .with_meta("tt", self.sched.tt)
            .with_meta("sigma0_xx", self.sigma0.xx)
            .with_meta("sigma0_xv", self.sigma0.xv)
            .with_meta("sigma0_vv", self.sigma0.vv)
            .with_meta("sigma_data", self.sigma_data);
        for &t in ts {
            let k = self.at(t)?;
            c.push_row(vec![
                k.t, k.g, k.p11, k.mx, k.mv, k.sxx, k.sxv, k.svv, k.lxx, k.lxv, k.lvv, k.ell, k.z_sde,
                k.z_ode,
            ])?;
        }
        Ok(c)
    }

    pub fn export<W: Write>(&self, ts: &[f64], w: W) -> Result<()> {
        self.to_columnar(ts)?.write_to(w)
    }

    /// Read back an exported table as rows of kernel points.
    pub fn import<R: BufRead>(r: R) -> Result<Vec<KernelPoint>> {
        let c = Columnar::read_from(r)?;
        let idx: Vec<usize> = KERNEL_COLUMNS
            .iter()
            .map(|name| {
                c.column_index(name).ok_or_else(|| AgmError::Parse {
                    line: 0,
                    msg: format!("kernel table lacks column {name}"),
                })
            })
            .collect::<Result<_>>()?;
        Ok(c.rows
            .iter()
            .map(|r| {
                let v = |k: usize| r[idx[k]];
                let (sxx, sxv, svv) = (v(5), v(6), v(7));
                KernelPoint {
                    t: v(0),
                    g: v(1),
                    p11: v(2),
                    gain: 4.0 / (1.0 - v(0)),
                    mx: v(3),
                    mv: v(4),
                    sxx,
                    sxv,
                    svv,
                    det: v(10) * v(10) * sxx,
                    lxx: v(8),
                    lxv: v(9),
                    lvv: v(10),
                    ell: v(11),
                    z_sde: v(12),
                    z_ode: v(13),
                    degenerate: false,
                }
            })
            .collect())
    }
}
