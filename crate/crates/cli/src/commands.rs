//! Subcommand implementations. Every file written here carries the config
//! hash and seed.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use agm_core::eval::{append_ledger, energy_distance, occupancy_divergence, path_straightness};
use agm_core::io::Columnar;
use agm_core::model::{read_checkpoint, train, write_checkpoint, ForceNet, TrainState};
use agm_core::samplers::sample;
use agm_core::{AgmError, DiffusionSchedule, EvalReport, KernelTable, Result, Sigma0};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::plot;

pub const CHECKPOINT: &str = "checkpoint.txt";
pub const LOSS: &str = "loss.tsv";
pub const SAMPLES: &str = "samples.tsv";
pub const TRAJECTORIES: &str = "trajectories.tsv";
pub const LEDGER: &str = "ledger.tsv";

/// Smoothing factor of the loss curve's exponential moving average.
const LOSS_SMOOTHING: f64 = 0.01;
const PROGRESS_EVERY: usize = 1000;

/// Streams for the evaluation reference draws, kept apart from the sampler's.
const TRUTH_STREAM: u64 = 1;
const BASELINE_STREAM: u64 = 2;

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub plot: bool,
}

impl Context {
    fn hash(&self) -> String {
        self.cfg.hash()
    }

    fn provenance(&self) -> Result<String> {
        Ok(format!("config_hash={} seed={}", self.hash(), self.cfg.seed()?))
    }

    fn stamp(&self, c: Columnar) -> Result<Columnar> {
        Ok(c.with_meta("config_hash", self.hash()).with_meta("seed", self.cfg.seed()?))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_text(&self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, text)?;
        log::info!("wrote {}", p.display());
        Ok(p)
    }

    fn write_columnar(&self, name: &str, c: &Columnar) -> Result<PathBuf> {
        let p = self.path(name);
        c.write_to(BufWriter::new(File::create(&p)?))?;
        log::info!("wrote {}", p.display());
        Ok(p)
    }

    fn write_config(&self) -> Result<()> {
        let text = format!("# config_hash={}\n# seed={}\n{}", self.hash(), self.cfg.seed()?, self.cfg.to_text());
        self.write_text("config.txt", &text)?;
        Ok(())
    }
}

fn read_columnar(path: &Path) -> Result<Columnar> {
    Columnar::read_from(BufReader::new(File::open(path)?))
}

fn kv(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}: {v}\n")).collect()
}

fn meta_get<'a>(meta: &'a [(String, String)], key: &str) -> Option<&'a str> {
    meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

pub fn cmd_train(ctx: &Context, resume: bool) -> Result<()> {
    let r = ctx.cfg.resolve()?;
    let data = r.dataset()?;
    let table = r.table(data.sigma_data())?;
    log::debug!("worker cap {}; training runs on one thread", r.threads);
    let ckpt_path = ctx.path(CHECKPOINT);
    let (state, mut curve) = if resume {
        let loaded = read_checkpoint::<f32, _>(BufReader::new(File::open(&ckpt_path)?))?;
        if meta_get(&loaded.meta, "config_hash") != Some(ctx.hash().as_str()) {
            log::warn!("resuming a checkpoint written under a different configuration");
        }
        log::info!("resuming from step {}", loaded.state.step);
        let curve = match read_columnar(&ctx.path(LOSS)) {
            Ok(c) => c.rows.into_iter().filter(|row| (row[0] as usize) <= loaded.state.step).collect(),
            Err(_) => Vec::new(),
        };
        (Some(loaded.state), curve)
    } else {
        (None, Vec::new())
    };
    let mut smooth = curve.last().map(|row: &Vec<f64>| row[2]);
    let start = Instant::now();
    let st: TrainState<f32> = train(&data, &table, &r.train, state, |step, loss| {
        let s = match smooth {
            Some(prev) => prev + LOSS_SMOOTHING * (loss - prev),
            None => loss,
        };
        smooth = Some(s);
        curve.push(vec![step as f64, loss, s]);
        if step % PROGRESS_EVERY == 0 {
            log::info!("step {step}: loss {loss:.4} (smoothed {s:.4})");
        }
        true
    })?;
    let wall = start.elapsed().as_secs_f64();

    let meta: Vec<(String, String)> = [
        ("config_hash", ctx.hash()),
        ("seed", r.seed.to_string()),
        ("schedule_p", r.schedule.p.to_string()),
        ("schedule_tt", r.schedule.tt.to_string()),
        ("prior_k", r.prior_k.to_string()),
        ("dataset", r.dataset.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let mut w = BufWriter::new(File::create(&ckpt_path)?);
    write_checkpoint(&st, &meta, &mut w)?;
    w.flush()?;
    log::info!("wrote {}", ckpt_path.display());

    let mut loss = ctx.stamp(Columnar::new(&["step", "loss", "smoothed"]))?;
    loss.rows = curve;
    ctx.write_columnar(LOSS, &loss)?;
    ctx.write_config()?;
    ctx.write_text(
        "train_report.txt",
        &kv(&[
            ("config_hash", ctx.hash()),
            ("seed", r.seed.to_string()),
            ("steps", st.step.to_string()),
            ("parameters", st.net.mlp.n_params().to_string()),
            ("final_smoothed_loss", smooth.map(|s| format!("{s:.6}")).unwrap_or_else(|| "missing".into())),
            ("wall_time_s", format!("{wall:.3}")),
        ]),
    )?;
    if ctx.plot {
        let series = vec![
            ("loss".to_string(), loss.rows.iter().map(|row| (row[0], row[1])).collect()),
            ("smoothed".to_string(), loss.rows.iter().map(|row| (row[0], row[2])).collect()),
        ];
        ctx.write_text("loss.svg", &plot::lines(&series, "training loss", &ctx.provenance()?))?;
    }
    Ok(())
}

/// Kernel settings recorded in a checkpoint, falling back to the configuration.
fn checkpoint_kernel(meta: &[(String, String)], cfg_sched: DiffusionSchedule, cfg_k: f64) -> Result<(DiffusionSchedule, Sigma0)> {
    let num = |key: &str, fallback: f64| -> Result<f64> {
        match meta_get(meta, key) {
            Some(v) => v.parse().map_err(|_| AgmError::Config(format!("checkpoint metadata {key}={v:?} is not a number"))),
            None => Ok(fallback),
        }
    };
    let (p, tt, k) = (num("schedule_p", cfg_sched.p)?, num("schedule_tt", cfg_sched.tt)?, num("prior_k", cfg_k)?);
    if p != cfg_sched.p || tt != cfg_sched.tt || k != cfg_k {
        log::warn!("checkpoint was trained with p={p}, tt={tt}, k={k}; sampling with those instead of the configuration");
    }
    Ok((DiffusionSchedule::new(p, tt)?, Sigma0::from_k(k)?))
}

pub fn cmd_sample(ctx: &Context, checkpoint: Option<&Path>) -> Result<()> {
    let r = ctx.cfg.resolve()?;
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| ctx.path(CHECKPOINT));
    let loaded = read_checkpoint::<f32, _>(BufReader::new(File::open(&path)?))?;
    let net: ForceNet<f32> = loaded.state.ema_net();
    if net.mode != r.plan.mode {
        return Err(AgmError::Config(format!("checkpoint was trained for {} but sampler.mode is {}", net.mode, r.plan.mode)));
    }
    let (sched, sigma0) = checkpoint_kernel(&loaded.meta, r.schedule, r.prior_k)?;
    let table = KernelTable::build(sched, sigma0, net.features.sigma_data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
    let start = Instant::now();
    let out = sample(&net, &r.plan, &table, &mut rng, r.n_samples)?;
    let wall = start.elapsed().as_secs_f64();
    let d = net.features.d;

    let cols: Vec<String> = (0..d).map(|j| format!("x_{j}")).collect();
    let mut c = ctx.stamp(Columnar::new(&cols))?.with_meta("nfe", out.nfe).with_meta("mode", r.plan.mode);
    c.rows = out.samples.chunks_exact(d).map(<[f64]>::to_vec).collect();
    ctx.write_columnar(SAMPLES, &c)?;
    if let Some(rec) = &out.record {
        ctx.write_columnar(TRAJECTORIES, &ctx.stamp(rec.to_columnar())?)?;
    }
    ctx.write_config()?;
    let grid = &r.plan.grid;
    ctx.write_text(
        "sample_report.txt",
        &kv(&[
            ("config_hash", ctx.hash()),
            ("seed", r.seed.to_string()),
            ("mode", r.plan.mode.to_string()),
            ("nfe", out.nfe.to_string()),
            ("n_samples", r.n_samples.to_string()),
            ("hop_time", grid.ts[r.plan.hop_index()].to_string()),
            ("checkpoint", path.display().to_string()),
            ("wall_time_s", format!("{wall:.3}")),
        ]),
    )?;
    if ctx.plot && d == 2 {
        ctx.write_text("samples.svg", &plot::scatter(&out.samples, &format!("samples, NFE {}", out.nfe), &ctx.provenance()?))?;
    }
    log::info!("{} samples with {} evaluations in {wall:.2}s", r.n_samples, out.nfe);
    Ok(())
}

/// Row-major points from the `x_j` columns of a samples file.
fn points(c: &Columnar) -> Result<(Vec<f64>, usize)> {
    let idx: Vec<usize> = (0..).map_while(|j| c.column_index(&format!("x_{j}"))).collect();
    if idx.is_empty() {
        return Err(AgmError::Shape("samples file has no x_0 column".into()));
    }
    let pts = c.rows.iter().flat_map(|row| idx.iter().map(|&j| row[j])).collect();
    Ok((pts, idx.len()))
}

/// Per-chain position paths from a trajectory file.
fn trajectory_paths(c: &Columnar) -> Result<Vec<Vec<Vec<f64>>>> {
    let chain = c.column_index("chain").ok_or_else(|| AgmError::Shape("trajectory file has no chain column".into()))?;
    let xs: Vec<usize> = (0..).map_while(|j| c.column_index(&format!("x_{j}"))).collect();
    let mut paths: Vec<Vec<Vec<f64>>> = Vec::new();
    for row in &c.rows {
        let k = row[chain] as usize;
        if paths.len() <= k {
            paths.resize(k + 1, Vec::new());
        }
        paths[k].push(xs.iter().map(|&j| row[j]).collect());
    }
    Ok(paths)
}

pub struct EvalArgs<'a> {
    pub samples: Option<&'a Path>,
    pub trajectories: Option<&'a Path>,
    /// Compare against this file instead of fresh dataset draws.
    pub reference: Option<&'a Path>,
    pub ledger: Option<&'a Path>,
    pub label: &'a str,
}

pub fn cmd_eval(ctx: &Context, args: &EvalArgs) -> Result<EvalReport> {
    let r = ctx.cfg.resolve()?;
    let data = r.dataset()?;
    let samples_path = args.samples.map(Path::to_path_buf).unwrap_or_else(|| ctx.path(SAMPLES));
    let c = read_columnar(&samples_path)?;
    let (pts, d) = points(&c)?;
    if d != data.dim() {
        return Err(AgmError::Shape(format!("samples have {d} dimensions, dataset {} has {}", r.dataset, data.dim())));
    }
    let n = pts.len() / d;
    if n == 0 {
        return Err(AgmError::Shape("samples file has no rows".into()));
    }
    let start = Instant::now();
    let draw = |stream: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
        rng.set_stream(stream);
        data.sample(n, &mut rng)
    };
    let truth = match args.reference {
        Some(p) => {
            let (pts, rd) = points(&read_columnar(p)?)?;
            if rd != d {
                return Err(AgmError::Shape(format!("reference has {rd} dimensions, samples have {d}")));
            }
            pts
        }
        None => draw(TRUTH_STREAM),
    };
    let ed = energy_distance(&pts, &truth, d)?;
    let baseline = energy_distance(&draw(BASELINE_STREAM), &draw(TRUTH_STREAM), d)?;
    let occupancy = data.occupancy(&pts);
    let traj = match args.trajectories {
        Some(p) => Some(p.to_path_buf()),
        None => Some(ctx.path(TRAJECTORIES)).filter(|p| args.samples.is_none() && p.exists()),
    };
    let straightness = match traj {
        Some(p) => {
            let paths = trajectory_paths(&read_columnar(&p)?)?;
            let vals: Vec<f64> = paths.iter().filter_map(|p| path_straightness(p)).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        }
        None => None,
    };
    let report = EvalReport {
        label: args.label.to_string(),
        config_hash: c.meta_value("config_hash").map(str::to_string).unwrap_or_else(|| ctx.hash()),
        seed: r.seed,
        n_samples: n,
        energy_distance: ed,
        baseline: Some(baseline),
        occupancy_divergence: (!occupancy.is_empty()).then(|| occupancy_divergence(&occupancy)),
        occupancy,
        straightness,
        moment_max_z: None,
        nfe: c.meta_value("nfe").and_then(|v| v.parse().ok()),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    ctx.write_text("eval_report.txt", &report.to_kv())?;
    let ledger = args.ledger.map(Path::to_path_buf).unwrap_or_else(|| ctx.path(LEDGER));
    if append_ledger(&ledger, &report)? {
        log::info!("updated {}", ledger.display());
    }
    if ctx.plot && d == 2 {
        let title = format!("samples vs reference, energy distance {ed:.3e}");
        ctx.write_text("eval.svg", &plot::scatter(&pts, &title, &ctx.provenance()?))?;
    }
    println!("{}", report.to_kv().trim_end());
    Ok(report)
}

/// Standard deviation of `x₀ + v₀`, the uncontrolled position at `t = 1`.
pub fn terminal_std(k: f64) -> Result<f64> {
    let s = Sigma0::from_k(k)?;
    Ok((s.xx + 2.0 * s.xv + s.vv).sqrt())
}

pub fn cmd_inspect(ctx: &Context, ks: &[f64]) -> Result<()> {
    let r = ctx.cfg.resolve()?;
    let data = r.dataset()?;
    let table = KernelTable::build(r.schedule, r.sigma0, data.sigma_data())?;
    let ts = &r.plan.grid.ts;
    let kernel = ctx.stamp(table.to_columnar(ts)?)?;
    ctx.write_columnar("kernel.tsv", &kernel)?;
    let mut sweep = ctx.stamp(Columnar::new(&["k", "terminal_std"]))?;
    for &k in ks {
        sweep.push_row(vec![k, terminal_std(k)?])?;
    }
    ctx.write_columnar("terminal_std.tsv", &sweep)?;
    let pts = data.sample(r.n_samples, &mut ChaCha8Rng::seed_from_u64(r.seed));
    let mut dump = ctx.stamp(Columnar::new(&["x_0", "x_1"]))?.with_meta("dataset", r.dataset).with_meta("sigma_data", data.sigma_data());
    dump.rows = pts.chunks_exact(2).map(<[f64]>::to_vec).collect();
    ctx.write_columnar("data.tsv", &dump)?;
    ctx.write_config()?;
    if ctx.plot {
        let col = |name: &str| kernel.column(name).expect("kernel column");
        let t = col("t");
        let series: Vec<(String, Vec<(f64, f64)>)> = ["Sxx", "Sxv", "Svv"]
            .iter()
            .map(|name| (name.to_string(), t.iter().copied().zip(col(name)).collect()))
            .collect();
        ctx.write_text("kernel.svg", &plot::lines(&series, "covariance over the grid", &ctx.provenance()?))?;
        let curve = vec![("std".to_string(), sweep.rows.iter().map(|row| (row[0], row[1])).collect())];
        ctx.write_text("terminal_std.svg", &plot::lines(&curve, "terminal std vs k", &ctx.provenance()?))?;
        ctx.write_text("data.svg", &plot::scatter(&pts, &format!("{} reference sample", r.dataset), &ctx.provenance()?))?;
    }
    Ok(())
}
