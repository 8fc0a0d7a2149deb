//! Force network `s_θ(m, t)`: a dense SiLU network with hand-written
//! reverse mode, AdamW, parameter EMA, the training loop and checkpoints.

use std::fmt::{Debug, Display};
use std::io::{BufRead, Write};
use std::ops::{AddAssign, MulAssign, Neg, SubAssign};

use ndarray::{linalg::general_mat_mul, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, LinalgScalar, ScalarOperand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bridge::{LossWeights, Mode, PhaseBatch, TrainingBatch};
use crate::datasets::ToyDataset;
use crate::error::{AgmError, Result};
use crate::kernel::{KernelPoint, KernelTable};

/// Floating-point element type of a network.
pub trait Real:
    LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Neg<Output = Self>
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
{
    const NAME: &'static str;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_real {
    ($t:ty, $name:literal) => {
        impl Real for $t {
            const NAME: &'static str = $name;
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}
impl_real!(f32, "f32");
impl_real!(f64, "f64");

/// Input encoding `[x·cx, v·cv, log(1−t)/7, sin(πkt), cos(πkt)]`.
///
/// With `precondition` the position and velocity are divided by their
/// marginal standard deviations `√(m²σ² + S)` and multiplied by `σ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureMap {
    pub d: usize,
    pub n_freq: usize,
    pub precondition: bool,
    pub sigma_data: f64,
}

impl FeatureMap {
    pub fn input_dim(&self) -> usize {
        2 * self.d + 1 + 2 * self.n_freq
    }

    fn scales(&self, k: &KernelPoint) -> (f64, f64) {
        if !self.precondition {
            return (1.0, 1.0);
        }
        let s2 = self.sigma_data * self.sigma_data;
        (
            1.0 / (k.mx * k.mx * s2 + k.sxx).sqrt(),
            1.0 / (k.mv * k.mv * s2 + k.svv).sqrt(),
        )
    }

    pub fn encode_row<T: Real>(&self, x: &[f64], v: &[f64], k: &KernelPoint, out: &mut [T]) {
        let d = self.d;
        let (cx, cv) = self.scales(k);
        for j in 0..d {
            out[j] = T::from_f64(x[j] * cx);
            out[d + j] = T::from_f64(v[j] * cv);
        }
        out[2 * d] = T::from_f64((1.0 - k.t).ln() / 7.0);
        let base = 2 * d + 1;
        for f in 0..self.n_freq {
            let w = std::f64::consts::PI * (f + 1) as f64 * k.t;
            out[base + f] = T::from_f64(w.sin());
            out[base + self.n_freq + f] = T::from_f64(w.cos());
        }
    }

    /// Encode a batch where row `i` sits at time `kernel[i].t`.
    pub fn encode<T: Real>(&self, states: &PhaseBatch, kernel: &[KernelPoint]) -> Array2<T> {
        let w = self.input_dim();
        let mut out = Array2::from_elem((states.n, w), T::from_f64(0.0));
        for i in 0..states.n {
            let r = i * self.d..(i + 1) * self.d;
            let k = if kernel.len() == 1 { &kernel[0] } else { &kernel[i] };
            let row = out.row_mut(i).into_slice().expect("rows are contiguous");
            self.encode_row(&states.x[r.clone()], &states.v[r], k, row);
        }
        out
    }
}

/// Dense network with SiLU hidden activations and a linear head.
///
/// Parameters live in one flat vector; layer `l` stores its weight as an
/// `in × out` row-major block followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    widths: Vec<usize>,
    params: Vec<T>,
}

pub struct ForwardCache<T> {
    /// Input of every layer.
    acts: Vec<Array2<T>>,
    /// Pre-activations and their sigmoids for hidden layers.
    pre: Vec<Array2<T>>,
    sig: Vec<Array2<T>>,
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl<T: Real> Mlp<T> {
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(AgmError::Config(format!("invalid layer widths {widths:?}")));
        }
        Ok(Mlp { widths: widths.to_vec(), params: vec![T::from_f64(0.0); param_count(widths)] })
    }

    /// Uniform `±1/√fan_in` initialization for weights and biases.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        let mut off = 0;
        for w in widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for p in &mut net.params[off..off + w[0] * w[1] + w[1]] {
                *p = T::from_f64(rng.random_range(-bound..bound));
            }
            off += w[0] * w[1] + w[1];
        }
        Ok(net)
    }

    pub fn from_params(widths: &[usize], params: Vec<T>) -> Result<Self> {
        let net = Self::zeros(widths)?;
        if params.len() != net.params.len() {
            return Err(AgmError::Shape(format!(
                "{} parameters given, widths {widths:?} need {}",
                params.len(),
                net.params.len()
            )));
        }
        Ok(Mlp { widths: widths.to_vec(), params })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn offset(&self, l: usize) -> usize {
        param_count(&self.widths[..=l])
    }

    fn layer(&self, l: usize) -> (ArrayView2<'_, T>, ArrayView1<'_, T>) {
        let (i, o) = (self.widths[l], self.widths[l + 1]);
        let off = self.offset(l);
        let w = ArrayView2::from_shape((i, o), &self.params[off..off + i * o]).expect("layer shape");
        let b = ArrayView1::from(&self.params[off + i * o..off + i * o + o]);
        (w, b)
    }

    pub fn forward(&self, input: &Array2<T>) -> Result<Array2<T>> {
        Ok(self.forward_cached(input.clone())?.0)
    }

    pub fn forward_cached(&self, input: Array2<T>) -> Result<(Array2<T>, ForwardCache<T>)> {
        if input.ncols() != self.widths[0] {
            return Err(AgmError::Shape(format!(
                "input has {} features, network expects {}",
                input.ncols(),
                self.widths[0]
            )));
        }
        let n_layers = self.n_layers();
        let mut cache = ForwardCache { acts: Vec::with_capacity(n_layers), pre: Vec::new(), sig: Vec::new() };
        let mut a = input;
        let one = T::from_f64(1.0);
        for l in 0..n_layers {
            let (w, b) = self.layer(l);
            let mut z = Array2::from_elem((a.nrows(), w.ncols()), T::from_f64(0.0));
            z += &b;
            general_mat_mul(one, &a, &w, one, &mut z);
            if !z.iter().all(|v| v.is_finite()) {
                return Err(AgmError::NonFinite(format!("network layer {l}")));
            }
            cache.acts.push(a);
            if l + 1 == n_layers {
                return Ok((z, cache));
            }
            let s = z.mapv(|v| one / (one + (-v).exp()));
            a = &z * &s;
            cache.pre.push(z);
            cache.sig.push(s);
        }
        unreachable!("network has at least one layer")
    }

    /// Gradient of a scalar loss with respect to all parameters, given its
    /// gradient with respect to the network output.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_out: &Array2<T>) -> Vec<T> {
        let zero = T::from_f64(0.0);
        let one = T::from_f64(1.0);
        let mut grads = vec![zero; self.params.len()];
        let mut delta = grad_out.clone();
        for l in (0..self.n_layers()).rev() {
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            let off = self.offset(l);
            {
                let (gw, gb) = grads[off..off + i * o + o].split_at_mut(i * o);
                let mut gw = ArrayViewMut2::from_shape((i, o), gw).expect("layer shape");
                general_mat_mul(one, &cache.acts[l].t(), &delta, zero, &mut gw);
                for (g, s) in gb.iter_mut().zip(delta.sum_axis(Axis(0))) {
                    *g = s;
                }
            }
            if l == 0 {
                break;
            }
            let (w, _) = self.layer(l);
            let mut da = Array2::from_elem((delta.nrows(), i), zero);
            general_mat_mul(one, &delta, &w.t(), zero, &mut da);
            // d/dz [z·σ(z)] = σ(z)·(1 + z·(1 − σ(z)))
            let z = &cache.pre[l - 1];
            let s = &cache.sig[l - 1];
            ndarray::Zip::from(&mut da).and(z).and(s).for_each(|g, &z, &s| {
                *g = *g * s * (one + z * (one - s));
            });
            delta = da;
        }
        grads
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp { widths: self.widths.clone(), params: self.params.iter().map(|p| U::from_f64(p.to_f64())).collect() }
    }
}

/// Network plus its input encoding and the force family it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceNet<T> {
    pub mlp: Mlp<T>,
    pub features: FeatureMap,
    pub mode: Mode,
}

impl<T: Real> ForceNet<T> {
    pub fn new<R: Rng + ?Sized>(features: FeatureMap, hidden: &[usize], mode: Mode, rng: &mut R) -> Result<Self> {
        let mut widths = vec![features.input_dim()];
        widths.extend_from_slice(hidden);
        widths.push(features.d);
        Ok(ForceNet { mlp: Mlp::init(&widths, rng)?, features, mode })
    }

    /// Normalized force estimates `s_θ`, row-major `n × d`.
    pub fn eval(&self, states: &PhaseBatch, kernel: &[KernelPoint]) -> Result<Vec<f64>> {
        if states.d != self.features.d {
            return Err(AgmError::Shape(format!("state dimension {} but network expects {}", states.d, self.features.d)));
        }
        let input = self.features.encode::<T>(states, kernel);
        let out = self.mlp.forward(&input)?;
        Ok(out.iter().map(|v| v.to_f64()).collect())
    }
}

/// `mean_i λ(t_i)·‖s_θ(m_i, t_i) − F_i/z_i‖²` and its parameter gradient.
pub fn training_loss<T: Real>(net: &ForceNet<T>, batch: &TrainingBatch, weights: &LossWeights) -> Result<(f64, Vec<T>)> {
    if batch.n == 0 {
        return Err(AgmError::Shape("empty training batch".into()));
    }
    if batch.mode != weights.mode || net.mode != weights.mode {
        return Err(AgmError::Config("loss, batch and network disagree on the force mode".into()));
    }
    let input = net.features.encode::<T>(&batch.states, &batch.kernel);
    let (out, cache) = net.mlp.forward_cached(input)?;
    let labels = batch.labels();
    let d = batch.d;
    let n = batch.n as f64;
    let mut grad = Array2::from_elem((batch.n, d), T::from_f64(0.0));
    let mut loss = 0.0;
    for i in 0..batch.n {
        let lam = weights.lambda(batch.t[i]);
        for j in 0..d {
            let r = out[[i, j]].to_f64() - labels[i * d + j];
            loss += lam * r * r;
            grad[[i, j]] = T::from_f64(2.0 * lam * r / n);
        }
    }
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(AgmError::NonFinite("training loss".into()));
    }
    Ok((loss, net.mlp.backward(&cache, &grad)))
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(n: usize, weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: vec![T::from_f64(0.0); n], v: vec![T::from_f64(0.0); n], step: 0 }
    }

    pub fn update(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (c1, c2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let decay = T::from_f64(1.0 - lr * self.weight_decay);
        let step = T::from_f64(lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(self.eps);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + c1 * g;
            self.v[i] = b2 * self.v[i] + c2 * g * g;
            params[i] = params[i] * decay - step * self.m[i] / ((self.v[i] * inv_bc2).sqrt() + eps);
        }
    }
}

/// Exponential moving average of parameters, starting from `θ₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema<T> {
    pub decay: f64,
    pub shadow: Vec<T>,
}

impl<T: Real> Ema<T> {
    pub fn new(decay: f64, params: &[T]) -> Self {
        Ema { decay, shadow: params.to_vec() }
    }

    pub fn update(&mut self, params: &[T]) {
        let d = T::from_f64(self.decay);
        let c = T::from_f64(1.0 - self.decay);
        for (s, &p) in self.shadow.iter_mut().zip(params) {
            *s = d * *s + c * p;
        }
    }
}

/// Linear warmup followed by optional cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
    pub cosine: bool,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        let warm = if self.warmup == 0 { 1.0 } else { ((step + 1) as f64 / self.warmup as f64).min(1.0) };
        let decay = if self.cosine && self.total > 0 {
            let f = step.min(self.total) as f64 / self.total as f64;
            0.5 * (1.0 + (std::f64::consts::PI * f).cos())
        } else {
            1.0
        };
        self.base * warm * decay
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub cosine: bool,
    pub ema_decay: f64,
    pub hidden: Vec<usize>,
    pub n_freq: usize,
    pub precondition: bool,
    pub mode: Mode,
    pub t0: f64,
    pub tn: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 50_000,
            batch_size: 1024,
            lr: 1e-3,
            weight_decay: 1e-4,
            warmup: 5_000,
            cosine: true,
            ema_decay: 0.9999,
            hidden: vec![128, 128, 128],
            n_freq: 8,
            precondition: true,
            mode: Mode::Ode,
            t0: 1e-5,
            tn: 0.999,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AgmError::Config(m));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad(format!("EMA decay {} must lie in (0, 1)", self.ema_decay));
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if !(0.0 <= self.t0 && self.t0 < self.tn && self.tn < 1.0) {
            return bad(format!("training times need 0 <= t0 < tN < 1, got [{}, {}]", self.t0, self.tn));
        }
        Ok(())
    }
}

/// Everything needed to continue or sample from a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub net: ForceNet<T>,
    pub ema: Ema<T>,
    pub opt: AdamW<T>,
    pub step: usize,
    pub seed: u64,
    pub rng_word_pos: u128,
    /// Per-step loss values recorded in this session.
    pub losses: Vec<f64>,
}

impl<T: Real> TrainState<T> {
    pub fn fresh(features: FeatureMap, cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = ForceNet::new(features, &cfg.hidden, cfg.mode, &mut rng)?;
        let n = net.mlp.n_params();
        Ok(TrainState {
            ema: Ema::new(cfg.ema_decay, net.mlp.params()),
            opt: AdamW::new(n, cfg.weight_decay),
            net,
            step: 0,
            seed: cfg.seed,
            rng_word_pos: rng.get_word_pos(),
            losses: Vec::new(),
        })
    }

    pub fn ema_net(&self) -> ForceNet<T> {
        let mut net = self.net.clone();
        net.mlp.params_mut().copy_from_slice(&self.ema.shadow);
        net
    }
}

/// Run the regression until `cfg.iterations` total steps, resuming from
/// `state` when given. `on_step(step, loss)` is called after every update;
/// returning `false` stops early with a resumable state.
pub fn train<T: Real>(
    data: &ToyDataset,
    table: &KernelTable,
    cfg: &TrainConfig,
    state: Option<TrainState<T>>,
    mut on_step: impl FnMut(usize, f64) -> bool,
) -> Result<TrainState<T>> {
    cfg.validate()?;
    let features = FeatureMap { d: data.dim(), n_freq: cfg.n_freq, precondition: cfg.precondition, sigma_data: table.sigma_data() };
    let mut st = match state {
        Some(s) => {
            if s.net.features != features || s.net.mode != cfg.mode {
                return Err(AgmError::Config("checkpoint does not match the training configuration".into()));
            }
            s
        }
        None => TrainState::fresh(features, cfg)?,
    };
    st.losses.clear();
    let mut rng = ChaCha8Rng::seed_from_u64(st.seed);
    rng.set_word_pos(st.rng_word_pos);
    let weights = LossWeights { mode: cfg.mode, sigma_data: table.sigma_data() };
    let lr = LrSchedule { base: cfg.lr, warmup: cfg.warmup, total: cfg.iterations, cosine: cfg.cosine };
    while st.step < cfg.iterations {
        let x1 = data.sample(cfg.batch_size, &mut rng);
        let batch = TrainingBatch::sample(&x1, data.dim(), table, cfg.mode, (cfg.t0, cfg.tn), &mut rng)?;
        let (loss, grads) = training_loss(&st.net, &batch, &weights)?;
        if !(loss < 1e6) {
            return Err(AgmError::Diverged { step: st.step, loss });
        }
        st.opt.update(st.net.mlp.params_mut(), &grads, lr.at(st.step));
        st.ema.update(st.net.mlp.params());
        st.step += 1;
        st.losses.push(loss);
        if !on_step(st.step, loss) {
            break;
        }
    }
    st.rng_word_pos = rng.get_word_pos();
    Ok(st)
}

const CHECKPOINT_MAGIC: &str = "agm-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Text checkpoint: header `key value` lines, then named parameter blocks.
/// Extra provenance (config hash, seed, ...) travels in `meta`.
pub fn write_checkpoint<T: Real, W: Write>(st: &TrainState<T>, meta: &[(String, String)], mut w: W) -> Result<()> {
    let f = &st.net.features;
    writeln!(w, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
    for (k, v) in meta {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(AgmError::Config(format!("checkpoint metadata {k:?} is not a single token line")));
        }
        writeln!(w, "meta.{k} {v}")?;
    }
    writeln!(w, "precision {}", T::NAME)?;
    writeln!(w, "mode {}", st.net.mode)?;
    writeln!(w, "dim {}", f.d)?;
    writeln!(w, "n_freq {}", f.n_freq)?;
    writeln!(w, "precondition {}", f.precondition as u8)?;
    writeln!(w, "sigma_data {}", f.sigma_data)?;
    let widths: Vec<String> = st.net.mlp.widths().iter().map(|w| w.to_string()).collect();
    writeln!(w, "widths {}", widths.join(" "))?;
    writeln!(w, "step {}", st.step)?;
    writeln!(w, "seed {}", st.seed)?;
    writeln!(w, "rng_word_pos {}", st.rng_word_pos)?;
    writeln!(w, "ema_decay {}", st.ema.decay)?;
    writeln!(w, "weight_decay {}", st.opt.weight_decay)?;
    writeln!(w, "adam_step {}", st.opt.step)?;
    for (name, block) in [("params", st.net.mlp.params()), ("ema", &st.ema.shadow[..]), ("adam_m", &st.opt.m[..]), ("adam_v", &st.opt.v[..])] {
        writeln!(w, "[{name}] {}", block.len())?;
        for chunk in block.chunks(8) {
            let line: Vec<String> = chunk.iter().map(|p| p.to_string()).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Checkpoint contents with parameters converted to `T`.
pub struct LoadedCheckpoint<T> {
    pub state: TrainState<T>,
    pub meta: Vec<(String, String)>,
    pub precision: String,
}

pub fn read_checkpoint<T: Real, R: BufRead>(r: R) -> Result<LoadedCheckpoint<T>> {
    let perr = |line: usize, msg: String| AgmError::Parse { line, msg };
    let mut lines = r.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| perr(1, "empty checkpoint".into()))?;
    let first = first?;
    let mut it = first.split_whitespace();
    if it.next() != Some(CHECKPOINT_MAGIC) {
        return Err(perr(1, "not a checkpoint file".into()));
    }
    let version: u32 = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| perr(1, "missing version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(perr(1, format!("unsupported checkpoint version {version}")));
    }
    let mut header: Vec<(String, String)> = Vec::new();
    let mut meta = Vec::new();
    let mut blocks: Vec<(String, Vec<T>)> = Vec::new();
    let mut current: Option<(String, usize, Vec<T>)> = None;
    for (i, line) in lines {
        let line = line?;
        let ln = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('[') {
            if let Some((name, want, vals)) = current.take() {
                if vals.len() != want {
                    return Err(perr(ln, format!("block {name} has {} values, expected {want}", vals.len())));
                }
                blocks.push((name, vals));
            }
            let (name, count) = rest.split_once(']').ok_or_else(|| perr(ln, "bad block header".into()))?;
            let count: usize = count.trim().parse().map_err(|_| perr(ln, "bad block length".into()))?;
            current = Some((name.to_string(), count, Vec::with_capacity(count)));
            continue;
        }
        if let Some((_, _, vals)) = current.as_mut() {
            for tok in trimmed.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| perr(ln, format!("bad number {tok:?}")))?;
                vals.push(T::from_f64(v));
            }
            continue;
        }
        let (k, v) = trimmed.split_once(' ').ok_or_else(|| perr(ln, "expected `key value`".into()))?;
        match k.strip_prefix("meta.") {
            Some(mk) => meta.push((mk.to_string(), v.to_string())),
            None => header.push((k.to_string(), v.trim().to_string())),
        }
    }
    if let Some((name, want, vals)) = current.take() {
        if vals.len() != want {
            return Err(perr(0, format!("block {name} has {} values, expected {want}", vals.len())));
        }
        blocks.push((name, vals));
    }
    let get = |k: &str| -> Result<&str> {
        header.iter().find(|(hk, _)| hk == k).map(|(_, v)| v.as_str()).ok_or_else(|| perr(0, format!("missing field {k}")))
    };
    fn num<F: std::str::FromStr>(s: &str, k: &str) -> Result<F> {
        s.parse().map_err(|_| AgmError::Parse { line: 0, msg: format!("bad value for {k}: {s:?}") })
    }
    let mut block = |name: &str| -> Result<Vec<T>> {
        let i = blocks.iter().position(|(n, _)| n == name).ok_or_else(|| perr(0, format!("missing block {name}")))?;
        Ok(blocks.swap_remove(i).1)
    };
    let params = block("params")?;
    let ema = block("ema")?;
    let adam_m = block("adam_m")?;
    let adam_v = block("adam_v")?;
    let widths: Vec<usize> = get("widths")?.split_whitespace().map(|w| num(w, "widths")).collect::<Result<_>>()?;
    let features = FeatureMap {
        d: num(get("dim")?, "dim")?,
        n_freq: num(get("n_freq")?, "n_freq")?,
        precondition: get("precondition")? == "1",
        sigma_data: num(get("sigma_data")?, "sigma_data")?,
    };
    if widths.first() != Some(&features.input_dim()) || widths.last() != Some(&features.d) {
        return Err(perr(0, "widths do not match the feature map".into()));
    }
    let mlp = Mlp::from_params(&widths, params)?;
    let n = mlp.n_params();
    if ema.len() != n || adam_m.len() != n || adam_v.len() != n {
        return Err(perr(0, "parameter blocks differ in length".into()));
    }
    let state = TrainState {
        net: ForceNet { mlp, features, mode: get("mode")?.parse()? },
        ema: Ema { decay: num(get("ema_decay")?, "ema_decay")?, shadow: ema },
        opt: AdamW { m: adam_m, v: adam_v, step: num(get("adam_step")?, "adam_step")?, ..AdamW::new(0, num(get("weight_decay")?, "weight_decay")?) },
        step: num(get("step")?, "step")?,
        seed: num(get("seed")?, "seed")?,
        rng_word_pos: num(get("rng_word_pos")?, "rng_word_pos")?,
        losses: Vec::new(),
    };
    Ok(LoadedCheckpoint { state, meta, precision: get("precision")?.to_string() })
}
