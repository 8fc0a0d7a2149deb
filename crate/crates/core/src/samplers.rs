//! Generation-time integrators: multistep exponential integrator (ODE),
//! symmetric splitting (SDE), sampling-hop reconstruction and conditioning.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bridge::{Mode, PhaseBatch};
use crate::error::{AgmError, Result};
use crate::io::Columnar;
use crate::kernel::{time_grid, KernelPoint, KernelTable, Sigma0, TimeGrid};
use crate::model::{ForceNet, Real};
use crate::quadrature::GaussLegendre;

/// Quadrature nodes per grid interval.
pub const EI_NODES: usize = 16;
/// Largest span of `log(1−τ)` covered by one quadrature panel.
pub const EI_PANEL_LOG: f64 = 0.5;
/// Smallest admissible magnitude of the ODE hop denominator.
pub const HOP_FLOOR: f64 = 1e-8;

/// Anything that yields normalized force estimates `s = F/z` for a batch.
pub trait ForceField {
    fn dim(&self) -> usize;
    fn eval(&self, states: &PhaseBatch, k: &KernelPoint, mode: Mode) -> Result<Vec<f64>>;
}

impl<T: Real> ForceField for ForceNet<T> {
    fn dim(&self) -> usize {
        self.features.d
    }

    fn eval(&self, states: &PhaseBatch, k: &KernelPoint, mode: Mode) -> Result<Vec<f64>> {
        if mode != self.mode {
            return Err(AgmError::Config(format!("network was trained for {} but the plan samples {mode}", self.mode)));
        }
        ForceNet::eval(self, states, std::slice::from_ref(k))
    }
}

/// The exact conditional force for known endpoints, recovering `(ε₀, ε₁)`
/// from the state. `x1` holds either one row shared by every chain or one
/// row per chain.
#[derive(Debug, Clone)]
pub struct ExactForce {
    pub d: usize,
    pub x1: Vec<f64>,
}

impl ExactForce {
    pub fn new(d: usize, x1: Vec<f64>) -> Self {
        ExactForce { d, x1 }
    }

    fn target(&self, i: usize) -> &[f64] {
        if self.x1.len() == self.d {
            &self.x1
        } else {
            &self.x1[i * self.d..(i + 1) * self.d]
        }
    }

    /// Unnormalized force for every chain.
    pub fn force(&self, states: &PhaseBatch, k: &KernelPoint, mode: Mode) -> Result<Vec<f64>> {
        if states.d != self.d || (self.x1.len() != self.d && self.x1.len() != states.n * self.d) {
            return Err(AgmError::Shape("exact force targets do not match the batch".into()));
        }
        let u = 1.0 - k.t;
        let score = match mode {
            Mode::Sde => 0.0,
            Mode::Ode => 0.5 * k.g * k.g * k.ell,
        };
        let mut out = vec![0.0; states.n * self.d];
        for i in 0..states.n {
            let x1 = self.target(i);
            for j in 0..self.d {
                let p = i * self.d + j;
                let (x, v) = (states.x[p], states.v[p]);
                let e0 = (x - k.mx * x1[j]) / k.lxx;
                let e1 = (v - k.mv * x1[j] - k.lxv * e0) / k.lvv;
                out[p] = k.gain * ((x1[j] - x) / u - v) + score * e1;
            }
        }
        Ok(out)
    }
}

impl ForceField for ExactForce {
    fn dim(&self) -> usize {
        self.d
    }

    fn eval(&self, states: &PhaseBatch, k: &KernelPoint, mode: Mode) -> Result<Vec<f64>> {
        let z = k.z(mode);
        Ok(self.force(states, k, mode)?.into_iter().map(|f| f / z).collect())
    }
}

/// The marginal force for an isotropic Gaussian-mixture data distribution.
///
/// Every force is linear in the endpoint, so the marginal is the exact force
/// evaluated at the posterior mean `E[x₁ | x, v]`, which is closed form here.
#[derive(Debug, Clone)]
pub struct MixtureForce {
    pub d: usize,
    /// Row-major component means.
    pub centers: Vec<f64>,
    pub weights: Vec<f64>,
    pub std: f64,
}

impl MixtureForce {
    pub fn new(d: usize, centers: Vec<f64>, weights: Vec<f64>, std: f64) -> Result<Self> {
        if d == 0 || centers.len() != d * weights.len() || weights.is_empty() || !(std >= 0.0) || weights.iter().any(|w| !(*w > 0.0)) {
            return Err(AgmError::Config("mixture needs matching centres, positive weights and std".into()));
        }
        Ok(MixtureForce { d, centers, weights, std })
    }

    /// `E[x₁ | x, v]` for every chain.
    pub fn posterior_mean(&self, states: &PhaseBatch, k: &KernelPoint) -> Result<Vec<f64>> {
        if states.d != self.d {
            return Err(AgmError::Shape("mixture dimension does not match the batch".into()));
        }
        let s2 = self.std * self.std;
        let (cxx, cxv, cvv) = (k.sxx + k.mx * k.mx * s2, k.sxv + k.mx * k.mv * s2, k.svv + k.mv * k.mv * s2);
        let det = cxx * cvv - cxv * cxv;
        if !(det > 0.0) {
            return Err(AgmError::NonFinite(format!("mixture marginal is singular at t={}", k.t)));
        }
        let (ixx, ixv, ivv) = (cvv / det, -cxv / det, cxx / det);
        let (hx, hv) = (s2 * (k.mx * ixx + k.mv * ixv), s2 * (k.mx * ixv + k.mv * ivv));
        let d = self.d;
        let m = self.weights.len();
        let mut out = vec![0.0; states.n * d];
        let mut logp = vec![0.0; m];
        for i in 0..states.n {
            let (x, v) = (&states.x[i * d..(i + 1) * d], &states.v[i * d..(i + 1) * d]);
            for c in 0..m {
                let mu = &self.centers[c * d..(c + 1) * d];
                let q: f64 = (0..d)
                    .map(|j| {
                        let (rx, rv) = (x[j] - k.mx * mu[j], v[j] - k.mv * mu[j]);
                        rx * rx * ixx + 2.0 * rx * rv * ixv + rv * rv * ivv
                    })
                    .sum();
                logp[c] = self.weights[c].ln() - 0.5 * q;
            }
            let top = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logp.iter().map(|l| (l - top).exp()).sum();
            let row = &mut out[i * d..(i + 1) * d];
            for c in 0..m {
                let r = (logp[c] - top).exp() / total;
                let mu = &self.centers[c * d..(c + 1) * d];
                for j in 0..d {
                    row[j] += r * (mu[j] + hx * (x[j] - k.mx * mu[j]) + hv * (v[j] - k.mv * mu[j]));
                }
            }
        }
        Ok(out)
    }

    /// Unnormalized marginal force for every chain.
    pub fn force(&self, states: &PhaseBatch, k: &KernelPoint, mode: Mode) -> Result<Vec<f64>> {
        ExactForce::new(self.d, self.posterior_mean(states, k)?).force(states, k, mode)
    }
}

impl ForceField for MixtureForce {
    fn dim(&self) -> usize {
        self.d
    }

    fn eval(&self, states: &PhaseBatch, k: &KernelPoint, mode: Mode) -> Result<Vec<f64>> {
        let z = k.z(mode);
        Ok(self.force(states, k, mode)?.into_iter().map(|f| f / z).collect())
    }
}

/// Wraps a closure `(states, kernel point, mode) -> s` as a force field.
pub struct FnForce<F> {
    pub d: usize,
    pub f: F,
}

impl<F: Fn(&PhaseBatch, &KernelPoint, Mode) -> Vec<f64>> ForceField for FnForce<F> {
    fn dim(&self) -> usize {
        self.d
    }

    fn eval(&self, states: &PhaseBatch, k: &KernelPoint, mode: Mode) -> Result<Vec<f64>> {
        Ok((self.f)(states, k, mode))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    /// Velocity mixing coefficient ξ ∈ [0, 1].
    pub xi: f64,
    /// Guidance length `c`: velocities are resampled while `t ≤ c`.
    pub guidance: f64,
    /// Conditioning point (one row, `d` values).
    pub target: Vec<f64>,
    /// Inpainting mask; `1` marks coordinates taken from `target`.
    pub mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerPlan {
    pub grid: TimeGrid,
    pub mode: Mode,
    /// Multistep order `w` of the exponential integrator.
    pub order: usize,
    /// Grid index at which to stop and reconstruct; defaults to the last.
    pub hop: Option<usize>,
    pub conditional: Option<Conditioning>,
    /// Number of chains whose trajectories are recorded.
    pub record: usize,
}

impl SamplerPlan {
    pub fn new(grid: TimeGrid, mode: Mode) -> Self {
        SamplerPlan { grid, mode, order: 2, hop: None, conditional: None, record: 0 }
    }

    /// Terminal time used for a given evaluation budget.
    pub fn default_tn(nfe: usize) -> f64 {
        match nfe {
            0..=5 => 0.5,
            6..=10 => 0.7,
            _ => 0.999,
        }
    }

    /// Quadratic grid with `nfe − 1` intervals; every grid point costs one evaluation.
    pub fn for_nfe(nfe: usize, mode: Mode, tn: Option<f64>) -> Result<Self> {
        if nfe == 0 {
            return Err(AgmError::Config("NFE must be at least 1".into()));
        }
        let tn = tn.unwrap_or_else(|| Self::default_tn(nfe));
        let grid = time_grid((nfe - 1).max(1), 2.0, 1e-5, tn)?;
        let mut plan = SamplerPlan::new(grid, mode);
        if nfe == 1 {
            plan.hop = Some(0);
        }
        Ok(plan)
    }

    pub fn hop_index(&self) -> usize {
        self.hop.unwrap_or(self.grid.n)
    }

    pub fn nfe(&self) -> usize {
        self.hop_index() + 1
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if !(1..=3).contains(&self.order) {
            return Err(AgmError::Config(format!("multistep order {} must be 1, 2 or 3", self.order)));
        }
        if self.hop_index() > self.grid.n {
            return Err(AgmError::Config(format!("hop index {} beyond grid of {} steps", self.hop_index(), self.grid.n)));
        }
        if let Some(c) = &self.conditional {
            if !(0.0..=1.0).contains(&c.xi) {
                return Err(AgmError::Config(format!("mixing coefficient xi={} outside [0, 1]", c.xi)));
            }
            if !(0.0..=self.grid.tn).contains(&c.guidance) {
                return Err(AgmError::Config(format!("guidance length c={} outside [0, tN]", c.guidance)));
            }
            if c.target.len() != d {
                return Err(AgmError::Shape(format!("conditioning point has {} values, data has {d}", c.target.len())));
            }
            if let Some(m) = &c.mask {
                if m.len() != d || m.iter().any(|&a| a != 0.0 && a != 1.0) {
                    return Err(AgmError::Config("mask must hold d entries that are 0 or 1".into()));
                }
            }
        }
        Ok(())
    }
}

fn lagrange(tau: f64, nodes: &[f64], j: usize) -> f64 {
    nodes
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != j)
        .map(|(_, &tk)| (tau - tk) / (nodes[j] - tk))
        .product()
}

/// Exponential-integrator weights `(c_pos, c_vel)` for history slot `j`
/// (the evaluation at `t_{i−j}`) on step `i`, with an arbitrary weight `z`.
pub fn ei_coeffs_with<Z: FnMut(f64) -> Result<f64>>(grid: &TimeGrid, i: usize, j: usize, w: usize, mut z: Z) -> Result<(f64, f64)> {
    if i >= grid.n {
        return Err(AgmError::Config(format!("step {i} beyond grid of {} steps", grid.n)));
    }
    let q = w.min(i + 1);
    if j >= q {
        return Err(AgmError::Config(format!("history slot {j} unavailable at step {i} with order {w}")));
    }
    let nodes: Vec<f64> = (0..q).map(|k| grid.ts[i - k]).collect();
    for a in 0..q {
        for b in a + 1..q {
            if nodes[a] == nodes[b] {
                return Err(AgmError::Config("repeated grid times in multistep history".into()));
            }
        }
    }
    let (a, b) = (grid.ts[i], grid.ts[i + 1]);
    let gl = GaussLegendre::new(EI_NODES);
    // The weight grows like 1/(1−τ); panels equally spaced in log(1−τ) keep it smooth.
    let (la, lb) = ((1.0 - a).ln(), (1.0 - b).ln());
    let panels = ((la - lb) / EI_PANEL_LOG).ceil().max(1.0) as usize;
    let (mut cp, mut cv) = (0.0, 0.0);
    for p in 0..panels {
        let lo = 1.0 - (la + (lb - la) * p as f64 / panels as f64).exp();
        let hi = if p + 1 == panels { b } else { 1.0 - (la + (lb - la) * (p + 1) as f64 / panels as f64).exp() };
        let lo = if p == 0 { a } else { lo };
        for (tau, wt) in gl.mapped(lo, hi) {
            let m = lagrange(tau, &nodes, j) * z(tau)?;
            cp += wt * (b - tau) * m;
            cv += wt * m;
        }
    }
    Ok((cp, cv))
}

pub fn ei_coeffs(grid: &TimeGrid, i: usize, j: usize, w: usize, table: &KernelTable, mode: Mode) -> Result<(f64, f64)> {
    ei_coeffs_with(grid, i, j, w, |tau| Ok(table.at(tau)?.z(mode)))
}

/// All coefficients for a grid: `coeffs[i][j]`.
pub fn ei_table(grid: &TimeGrid, w: usize, table: &KernelTable, mode: Mode) -> Result<Vec<Vec<(f64, f64)>>> {
    (0..grid.n)
        .map(|i| (0..w.min(i + 1)).map(|j| ei_coeffs(grid, i, j, w, table, mode)).collect())
        .collect()
}

/// `x ← x + δv + Σ c_pos·s_j`, `v ← v + Σ c_vel·s_j`; `history[j]` is the
/// evaluation at `t_{i−j}`.
pub fn ei_step(state: &mut PhaseBatch, history: &[&[f64]], coeffs: &[(f64, f64)], delta: f64) {
    assert_eq!(history.len(), coeffs.len());
    for p in 0..state.x.len() {
        let mut dx = delta * state.v[p];
        let mut dv = 0.0;
        for (s, &(cp, cv)) in history.iter().zip(coeffs) {
            dx += cp * s[p];
            dv += cv * s[p];
        }
        state.x[p] += dx;
        state.v[p] += dv;
    }
}

/// Exact free transport over `[a, b]` plus the matching correlated noise
/// with covariance `∫ [(b−s)², (b−s); (b−s), 1]·g(s)² ds`.
pub fn sss_half<G: Fn(f64) -> f64, R: Rng + ?Sized>(state: &mut PhaseBatch, a: f64, b: f64, g: &G, rng: &mut R) {
    let gl = GaussLegendre::new(8);
    let (mut qxx, mut qxv, mut qvv) = (0.0, 0.0, 0.0);
    for (s, w) in gl.mapped(a, b) {
        let g2 = g(s) * g(s);
        let r = b - s;
        qxx += w * r * r * g2;
        qxv += w * r * g2;
        qvv += w * g2;
    }
    let h = b - a;
    let (lxx, lxv, lvv) = if qxx > 0.0 {
        let lxx = qxx.sqrt();
        (lxx, qxv / lxx, (qvv - qxv * qxv / qxx).max(0.0).sqrt())
    } else {
        (0.0, 0.0, qvv.max(0.0).sqrt())
    };
    let noisy = qvv > 0.0;
    for p in 0..state.x.len() {
        state.x[p] += h * state.v[p];
        if noisy {
            let e0: f64 = StandardNormal.sample(rng);
            let e1: f64 = StandardNormal.sample(rng);
            state.x[p] += lxx * e0;
            state.v[p] += lxv * e0 + lvv * e1;
        }
    }
}

/// Strang splitting: half transport with noise, force kick `v += F·δ`
/// using the force at the midpoint state, half transport with noise.
/// Returns the midpoint force.
pub fn sss_step<G, R, F>(state: &mut PhaseBatch, t: f64, delta: f64, g: &G, rng: &mut R, mut force: F) -> Result<Vec<f64>>
where
    G: Fn(f64) -> f64,
    R: Rng + ?Sized,
    F: FnMut(&PhaseBatch, f64) -> Result<Vec<f64>>,
{
    let mid = t + 0.5 * delta;
    sss_half(state, t, mid, g, rng);
    let f = force(state, mid)?;
    for (v, fp) in state.v.iter_mut().zip(&f) {
        *v += fp * delta;
    }
    sss_half(state, mid, t + delta, g, rng);
    if !state.is_finite() {
        return Err(AgmError::NonFinite(format!("state after splitting step at t={t}")));
    }
    Ok(f)
}

/// Reconstruct the data estimate `x̃₁` from a force evaluation at time `k.t`.
pub fn sampling_hop(states: &PhaseBatch, force: &[f64], k: &KernelPoint, mode: Mode) -> Result<Vec<f64>> {
    let u = 1.0 - k.t;
    match mode {
        Mode::Sde => Ok((0..states.x.len())
            .map(|p| states.x[p] + u * (force[p] / k.gain + states.v[p]))
            .collect()),
        Mode::Ode => {
            let zeta = k.lvv - k.ell / (2.0 * k.p11);
            let beta = zeta / k.lvv;
            let alpha = (k.zeta_hat() - beta * k.lxv) / k.lxx;
            let denom = 4.0 * u * u + k.gain * (alpha * k.mx + beta * k.mv);
            if !(denom.abs() >= HOP_FLOOR) {
                return Err(AgmError::HopUnavailable { t: k.t, denominator: denom });
            }
            Ok((0..states.x.len())
                .map(|p| (force[p] + k.gain * (alpha * states.x[p] + beta * states.v[p])) / denom)
                .collect())
        }
    }
}

/// Prior draw with velocity mixed toward `x_cond`:
/// `v₀ ← (1−ξ)v₀ + ξ(x_cond − x₀)/(1−t₀)` on the coordinates selected by `mask`.
pub fn conditional_init<R: Rng + ?Sized>(
    n: usize,
    x_cond: &[f64],
    xi: f64,
    t0: f64,
    mask: Option<&[f64]>,
    sigma0: &Sigma0,
    rng: &mut R,
) -> PhaseBatch {
    let d = x_cond.len();
    let mut b = prior(n, d, sigma0, rng);
    for i in 0..n {
        for j in 0..d {
            if mask.is_some_and(|m| m[j] == 0.0) {
                continue;
            }
            let p = i * d + j;
            b.v[p] = (1.0 - xi) * b.v[p] + xi * (x_cond[j] - b.x[p]) / (1.0 - t0);
        }
    }
    b
}

/// `n` independent draws of `(x₀, v₀) ~ N(0, Σ₀)` per coordinate.
pub fn prior<R: Rng + ?Sized>(n: usize, d: usize, sigma0: &Sigma0, rng: &mut R) -> PhaseBatch {
    let (a, b, c) = sigma0.factor();
    let mut out = PhaseBatch::zeros(n, d);
    for p in 0..n * d {
        let e0: f64 = StandardNormal.sample(rng);
        let e1: f64 = StandardNormal.sample(rng);
        out.x[p] = a * e0;
        out.v[p] = b * e0 + c * e1;
    }
    out
}

/// Resample velocities from `v | x` under the bridge pinned at `x_target`.
/// `x_target` holds one shared row or one row per chain.
pub fn dyn_v_guidance<R: Rng + ?Sized>(states: &mut PhaseBatch, x_target: &[f64], k: &KernelPoint, rng: &mut R) -> Result<()> {
    if !(k.sxx > 0.0) {
        return Err(AgmError::SingularCovariance { det: k.det });
    }
    let d = states.d;
    let shared = x_target.len() == d;
    if !shared && x_target.len() != states.n * d {
        return Err(AgmError::Shape("guidance target does not match the batch".into()));
    }
    let slope = k.sxv / k.sxx;
    // Conditional standard deviation √(Svv − Sxv²/Sxx) equals Lvv.
    let sd = (k.det / k.sxx).sqrt();
    for p in 0..states.x.len() {
        let x1 = if shared { x_target[p % d] } else { x_target[p] };
        let mean = k.mv * x1 + slope * (states.x[p] - k.mx * x1);
        let e: f64 = StandardNormal.sample(rng);
        states.v[p] = mean + sd * e;
    }
    Ok(())
}

/// `mask ⊙ x_known + (1 − mask) ⊙ x̃₁`, row by row.
pub fn inpaint_hop(x_tilde: &[f64], x_known: &[f64], mask: &[f64]) -> Result<Vec<f64>> {
    let d = mask.len();
    if d == 0 || x_tilde.len() % d != 0 || (x_known.len() != d && x_known.len() != x_tilde.len()) {
        return Err(AgmError::Shape("inpainting inputs disagree in shape".into()));
    }
    Ok(x_tilde
        .iter()
        .enumerate()
        .map(|(p, &xt)| {
            let j = p % d;
            let known = if x_known.len() == d { x_known[j] } else { x_known[p] };
            mask[j] * known + (1.0 - mask[j]) * xt
        })
        .collect())
}

/// One force evaluation along recorded chains.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub t: f64,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub force: Vec<f64>,
    pub xhat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub chains: usize,
    pub d: usize,
    pub steps: Vec<TrajectoryStep>,
    /// Reconstructed samples of the recorded chains.
    pub final_sample: Vec<f64>,
}

impl TrajectoryRecord {
    fn new(chains: usize, d: usize) -> Self {
        TrajectoryRecord { chains, d, steps: Vec::new(), final_sample: Vec::new() }
    }

    fn push(&mut self, t: f64, states: &PhaseBatch, force: &[f64], xhat: &[f64]) {
        let m = self.chains * self.d;
        self.steps.push(TrajectoryStep {
            t,
            x: states.x[..m].to_vec(),
            v: states.v[..m].to_vec(),
            force: force[..m].to_vec(),
            xhat: xhat[..m].to_vec(),
        });
    }

    /// Position path of one chain, one row of `d` values per step.
    pub fn path(&self, chain: usize) -> Vec<Vec<f64>> {
        let r = chain * self.d..(chain + 1) * self.d;
        self.steps.iter().map(|s| s.x[r.clone()].to_vec()).collect()
    }

    /// Long format: chain, step, t, x_j, v_j, F_j, xhat_j.
    pub fn to_columnar(&self) -> Columnar {
        let mut cols: Vec<String> = vec!["chain".into(), "step".into(), "t".into()];
        for prefix in ["x", "v", "F", "xhat"] {
            cols.extend((0..self.d).map(|j| format!("{prefix}_{j}")));
        }
        let mut c = Columnar::new(&cols);
        for chain in 0..self.chains {
            let r = chain * self.d..(chain + 1) * self.d;
            for (k, s) in self.steps.iter().enumerate() {
                let mut row = vec![chain as f64, k as f64, s.t];
                for block in [&s.x, &s.v, &s.force, &s.xhat] {
                    row.extend_from_slice(&block[r.clone()]);
                }
                c.rows.push(row);
            }
        }
        c
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// Reconstructed `x̂₁`, row-major `n × d`.
    pub samples: Vec<f64>,
    /// Phase state at the hop time.
    pub state: PhaseBatch,
    pub nfe: usize,
    pub record: Option<TrajectoryRecord>,
}

/// Generate `n` samples following `plan`.
pub fn sample<F: ForceField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    plan: &SamplerPlan,
    table: &KernelTable,
    rng: &mut R,
    n: usize,
) -> Result<SampleOutput> {
    let d = field.dim();
    plan.validate(d)?;
    let grid = &plan.grid;
    let mode = plan.mode;
    let hop = plan.hop_index();
    let cond = plan.conditional.as_ref();
    let mut state = match cond {
        Some(c) => conditional_init(n, &c.target, c.xi, grid.t0, c.mask.as_deref(), table.sigma0(), rng),
        None => prior(n, d, table.sigma0(), rng),
    };
    let rec_chains = plan.record.min(n);
    let mut record = (rec_chains > 0).then(|| TrajectoryRecord::new(rec_chains, d));
    let mut nfe = 0;
    // Latest reconstruction, the μ source for inpainting guidance.
    let mut latest_xhat: Option<Vec<f64>> = None;

    let guide = |state: &mut PhaseBatch, k: &KernelPoint, latest: &Option<Vec<f64>>, rng: &mut R| -> Result<()> {
        if let Some(c) = cond {
            if k.t <= c.guidance {
                let target = match (&c.mask, latest) {
                    (Some(m), Some(xh)) => inpaint_hop(xh, &c.target, m)?,
                    (Some(m), None) => inpaint_hop(&vec![0.0; d], &c.target, m)?,
                    (None, _) => c.target.clone(),
                };
                dyn_v_guidance(state, &target, k, rng)?;
            }
        }
        Ok(())
    };

    match mode {
        Mode::Ode => {
            let coeffs = ei_table(grid, plan.order, table, mode)?;
            let mut history: VecDeque<Vec<f64>> = VecDeque::with_capacity(plan.order);
            for i in 0..hop {
                let k = table.at(grid.ts[i])?;
                guide(&mut state, &k, &latest_xhat, rng)?;
                let s = field.eval(&state, &k, mode)?;
                nfe += 1;
                if record.is_some() || cond.is_some_and(|c| c.mask.is_some()) {
                    let f: Vec<f64> = s.iter().map(|a| a * k.z_ode).collect();
                    let xh = sampling_hop(&state, &f, &k, mode)?;
                    if let Some(r) = record.as_mut() {
                        r.push(k.t, &state, &f, &xh);
                    }
                    latest_xhat = Some(xh);
                }
                history.push_front(s);
                history.truncate(plan.order);
                let hist: Vec<&[f64]> = history.iter().map(Vec::as_slice).collect();
                ei_step(&mut state, &hist, &coeffs[i][..hist.len()], grid.step(i));
                if !state.is_finite() {
                    return Err(AgmError::NonFinite(format!("state after integrator step {i}")));
                }
            }
        }
        Mode::Sde => {
            let sched = *table.schedule();
            let g = move |t: f64| sched.g(t);
            for i in 0..hop {
                let k0 = table.at(grid.ts[i])?;
                guide(&mut state, &k0, &latest_xhat, rng)?;
                let mut last: Option<(KernelPoint, PhaseBatch)> = None;
                let need_mid = record.is_some() || cond.is_some_and(|c| c.mask.is_some());
                let f = sss_step(&mut state, grid.ts[i], grid.step(i), &g, rng, |m, t| {
                    let k = table.at(t)?;
                    let s = field.eval(m, &k, mode)?;
                    if need_mid {
                        last = Some((k, m.clone()));
                    }
                    Ok(s.into_iter().map(|a| a * k.z_sde).collect())
                })?;
                nfe += 1;
                if let Some((k, mid)) = last {
                    let xh = sampling_hop(&mid, &f, &k, mode)?;
                    if let Some(r) = record.as_mut() {
                        r.push(k.t, &mid, &f, &xh);
                    }
                    latest_xhat = Some(xh);
                }
            }
        }
    }

    let k = table.at(grid.ts[hop])?;
    guide(&mut state, &k, &latest_xhat, rng)?;
    let s = field.eval(&state, &k, mode)?;
    nfe += 1;
    let f: Vec<f64> = s.iter().map(|a| a * k.z(mode)).collect();
    let mut samples = sampling_hop(&state, &f, &k, mode)?;
    if let Some(r) = record.as_mut() {
        r.push(k.t, &state, &f, &samples);
    }
    if let Some(Conditioning { mask: Some(m), target, .. }) = cond {
        samples = inpaint_hop(&samples, target, m)?;
    }
    if let Some(r) = record.as_mut() {
        r.final_sample = samples[..rec_chains * d].to_vec();
    }
    if samples.iter().any(|a| !a.is_finite()) {
        return Err(AgmError::NonFinite("reconstructed samples".into()));
    }
    Ok(SampleOutput { samples, state, nfe, record })
}
