//! Training-side bridge mathematics: optimal control, reparameterized pair
//! draws, SDE/ODE force targets, normalizers and the weighted loss.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{AgmError, Result};
use crate::io::Columnar;
use crate::kernel::{combined_gain, normalizers, KernelPoint, KernelTable};
pub use crate::kernel::Mode;
pub use crate::model::training_loss;

/// Position and velocity of one chain, `d` coordinates each.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl PhaseState {
    pub fn new(x: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if x.len() != v.len() {
            return Err(AgmError::Shape(format!("x has {} coordinates, v has {}", x.len(), v.len())));
        }
        if x.iter().chain(&v).any(|a| !a.is_finite()) {
            return Err(AgmError::NonFinite("phase state".into()));
        }
        Ok(PhaseState { x, v })
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

/// `n` chains of dimension `d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseBatch {
    pub n: usize,
    pub d: usize,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl PhaseBatch {
    pub fn zeros(n: usize, d: usize) -> Self {
        PhaseBatch { n, d, x: vec![0.0; n * d], v: vec![0.0; n * d] }
    }

    pub fn from_states(states: &[PhaseState]) -> Result<Self> {
        let d = states.first().map_or(0, PhaseState::dim);
        let mut b = PhaseBatch::zeros(states.len(), d);
        for (i, s) in states.iter().enumerate() {
            if s.dim() != d {
                return Err(AgmError::Shape("phase states of mixed dimension".into()));
            }
            b.x[i * d..(i + 1) * d].copy_from_slice(&s.x);
            b.v[i * d..(i + 1) * d].copy_from_slice(&s.v);
        }
        Ok(b)
    }

    pub fn state(&self, i: usize) -> PhaseState {
        let r = i * self.d..(i + 1) * self.d;
        PhaseState { x: self.x[r.clone()].to_vec(), v: self.v[r].to_vec() }
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.v).all(|a| a.is_finite())
    }
}

/// `a* = (4/(1−t))·((x1 − x)/(1−t) − v)` coordinate-wise into `out`.
pub fn optimal_control_into(x: &[f64], v: &[f64], x1: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
    let gain = combined_gain(t)?;
    let u = 1.0 - t;
    for i in 0..out.len() {
        out[i] = gain * ((x1[i] - x[i]) / u - v[i]);
    }
    Ok(())
}

pub fn optimal_control(m: &PhaseState, x1: &[f64], t: f64) -> Result<Vec<f64>> {
    if x1.len() != m.dim() {
        return Err(AgmError::Shape(format!("x1 has {} coordinates, state has {}", x1.len(), m.dim())));
    }
    let mut out = vec![0.0; m.dim()];
    optimal_control_into(&m.x, &m.v, x1, t, &mut out)?;
    Ok(out)
}

/// `m = μ_t + L_t ε` with `μ_t = x1·(mx, mv)`.
pub fn reparameterize(x1: &[f64], eps0: &[f64], eps1: &[f64], k: &KernelPoint) -> PhaseState {
    let x = x1.iter().zip(eps0).map(|(a, e)| k.mx * a + k.lxx * e).collect();
    let v = x1
        .iter()
        .zip(eps0)
        .zip(eps1)
        .map(|((a, e0), e1)| k.mv * a + k.lxv * e0 + k.lvv * e1)
        .collect();
    PhaseState { x, v }
}

/// Control written in terms of `(x1, ε₀, ε₁)`:
/// `4(1−t)²x1 − g²P₁₁·((Lxx/(1−t) + Lxv)ε₀ + Lvv·ε₁)`.
pub fn force_target_sde(x1: &[f64], eps0: &[f64], eps1: &[f64], k: &KernelPoint) -> Vec<f64> {
    let u = 1.0 - k.t;
    let data = 4.0 * u * u;
    let zh = k.zeta_hat();
    x1.iter()
        .zip(eps0)
        .zip(eps1)
        .map(|((a, e0), e1)| data * a - k.gain * (zh * e0 + k.lvv * e1))
        .collect()
}

/// Probability-flow force: the SDE target plus `½g²ℓ·ε₁`.
pub fn force_target_ode(x1: &[f64], eps0: &[f64], eps1: &[f64], k: &KernelPoint) -> Vec<f64> {
    let c = 0.5 * k.g * k.g * k.ell;
    force_target_sde(x1, eps0, eps1, k)
        .into_iter()
        .zip(eps1)
        .map(|(f, e1)| f + c * e1)
        .collect()
}

pub fn force_target(mode: Mode, x1: &[f64], eps0: &[f64], eps1: &[f64], k: &KernelPoint) -> Vec<f64> {
    match mode {
        Mode::Sde => force_target_sde(x1, eps0, eps1, k),
        Mode::Ode => force_target_ode(x1, eps0, eps1, k),
    }
}

/// Scalar force normalizer at `t` for a dataset with standard deviation `sigma_data`.
pub fn normalizer(t: f64, table: &KernelTable, sigma_data: f64, mode: Mode) -> Result<f64> {
    if !(sigma_data > 0.0) {
        return Err(AgmError::Config(format!("sigma_data={sigma_data} must be positive")));
    }
    let k = table.at(t)?;
    let (zs, zo) = normalizers(t, k.g, k.lxx, k.lxv, k.lvv, sigma_data);
    let z = match mode {
        Mode::Sde => zs,
        Mode::Ode => zo,
    };
    if !(z > 0.0 && z.is_finite()) {
        return Err(AgmError::NonFinite(format!("normalizer at t={t}")));
    }
    Ok(z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDraw {
    pub x1: Vec<f64>,
    pub t: f64,
    pub m: PhaseState,
    pub eps0: Vec<f64>,
    pub eps1: Vec<f64>,
    pub target_sde: Vec<f64>,
    pub target_ode: Vec<f64>,
}

fn normals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn sample_pair<R: Rng + ?Sized>(x1: &[f64], t: f64, table: &KernelTable, rng: &mut R) -> Result<TrainingDraw> {
    let k = table.at(t)?;
    let eps0 = normals(rng, x1.len());
    let eps1 = normals(rng, x1.len());
    Ok(draw_from_noise(x1, &eps0, &eps1, &k))
}

pub fn draw_from_noise(x1: &[f64], eps0: &[f64], eps1: &[f64], k: &KernelPoint) -> TrainingDraw {
    TrainingDraw {
        x1: x1.to_vec(),
        t: k.t,
        m: reparameterize(x1, eps0, eps1, k),
        eps0: eps0.to_vec(),
        eps1: eps1.to_vec(),
        target_sde: force_target_sde(x1, eps0, eps1, k),
        target_ode: force_target_ode(x1, eps0, eps1, k),
    }
}

/// Loss weighting `λ(t) = 1/(1−t)` with targets divided by `z_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub mode: Mode,
    pub sigma_data: f64,
}

impl LossWeights {
    pub fn lambda(&self, t: f64) -> f64 {
        1.0 / (1.0 - t)
    }
}

/// A minibatch of reparameterized draws ready for regression.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub n: usize,
    pub d: usize,
    pub mode: Mode,
    pub t: Vec<f64>,
    pub kernel: Vec<KernelPoint>,
    pub x1: Vec<f64>,
    pub states: PhaseBatch,
    pub eps0: Vec<f64>,
    pub eps1: Vec<f64>,
    /// Unnormalized force targets for `mode`.
    pub target: Vec<f64>,
}

impl TrainingBatch {
    /// Draw `t ~ U[t0, tN]` and noise for every data row in `x1` (row-major, `d` columns).
    pub fn sample<R: Rng + ?Sized>(
        x1: &[f64],
        d: usize,
        table: &KernelTable,
        mode: Mode,
        t_range: (f64, f64),
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 || x1.len() % d != 0 || x1.is_empty() {
            return Err(AgmError::Shape(format!("{} values do not form rows of width {d}", x1.len())));
        }
        let (t0, tn) = t_range;
        if !(t0 < tn) {
            return Err(AgmError::Config(format!("time range [{t0}, {tn}] is empty")));
        }
        let n = x1.len() / d;
        let ut = Uniform::new(t0, tn).map_err(|e| AgmError::Config(e.to_string()))?;
        let t: Vec<f64> = (0..n).map(|_| ut.sample(rng)).collect();
        let eps0 = normals(rng, n * d);
        let eps1 = normals(rng, n * d);
        Self::from_noise(x1, d, table, mode, t, eps0, eps1)
    }

    pub fn from_noise(
        x1: &[f64],
        d: usize,
        table: &KernelTable,
        mode: Mode,
        t: Vec<f64>,
        eps0: Vec<f64>,
        eps1: Vec<f64>,
    ) -> Result<Self> {
        let n = t.len();
        if x1.len() != n * d || eps0.len() != n * d || eps1.len() != n * d {
            return Err(AgmError::Shape("training batch components disagree in size".into()));
        }
        let kernel = t.iter().map(|&t| table.at(t)).collect::<Result<Vec<_>>>()?;
        let mut states = PhaseBatch::zeros(n, d);
        let mut target = vec![0.0; n * d];
        for i in 0..n {
            let r = i * d..(i + 1) * d;
            let k = &kernel[i];
            let m = reparameterize(&x1[r.clone()], &eps0[r.clone()], &eps1[r.clone()], k);
            states.x[r.clone()].copy_from_slice(&m.x);
            states.v[r.clone()].copy_from_slice(&m.v);
            let f = force_target(mode, &x1[r.clone()], &eps0[r.clone()], &eps1[r.clone()], k);
            target[r].copy_from_slice(&f);
        }
        Ok(TrainingBatch { n, d, mode, t, kernel, x1: x1.to_vec(), states, eps0, eps1, target })
    }

    /// Regression labels `F/z`, row-major.
    pub fn labels(&self) -> Vec<f64> {
        let mut y = self.target.clone();
        for i in 0..self.n {
            let z = self.kernel[i].z(self.mode);
            for a in &mut y[i * self.d..(i + 1) * self.d] {
                *a /= z;
            }
        }
        y
    }

    pub fn draw(&self, i: usize) -> TrainingDraw {
        let r = i * self.d..(i + 1) * self.d;
        draw_from_noise(&self.x1[r.clone()], &self.eps0[r.clone()], &self.eps1[r], &self.kernel[i])
    }

    pub fn to_columnar(&self) -> Columnar {
        let mut cols = vec!["t".to_string()];
        for prefix in ["x1", "x", "v", "F"] {
            cols.extend((0..self.d).map(|j| format!("{prefix}_{j}")));
        }
        cols.push("z".into());
        let mut c = Columnar::new(&cols).with_meta("mode", self.mode).with_meta("dim", self.d);
        for i in 0..self.n {
            let r = i * self.d..(i + 1) * self.d;
            let mut row = vec![self.t[i]];
            row.extend_from_slice(&self.x1[r.clone()]);
            row.extend_from_slice(&self.states.x[r.clone()]);
            row.extend_from_slice(&self.states.v[r.clone()]);
            row.extend_from_slice(&self.target[r]);
            row.push(self.kernel[i].z(self.mode));
            c.rows.push(row);
        }
        c
    }
}
