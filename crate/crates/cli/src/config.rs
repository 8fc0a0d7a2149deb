//! Sectioned `key = value` run configuration with command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use agm_core::datasets::{DatasetKind, ToyDataset};
use agm_core::model::TrainConfig;
use agm_core::samplers::{Conditioning, SamplerPlan};
use agm_core::kernel::time_grid;
use agm_core::{AgmError, DiffusionSchedule, KernelTable, Mode, Result, Sigma0};
use sha2::{Digest, Sha256};

/// Every recognised key with its default, in file order.
const DEFAULTS: &[(&str, &str)] = &[
    ("data.dataset", "mog"),
    ("data.seed", "0"),
    ("schedule.p", "3"),
    ("schedule.tt", "1"),
    ("prior.k", "-0.2"),
    ("grid.nfe", "20"),
    ("grid.kappa", "2"),
    ("grid.t0", "1e-5"),
    ("grid.tn", "auto"),
    ("sampler.mode", "ode"),
    ("sampler.order", "2"),
    ("sampler.hop", "auto"),
    ("sampler.samples", "10000"),
    ("sampler.record", "0"),
    ("conditional.xi", "off"),
    ("conditional.c", "0.25"),
    ("conditional.target", ""),
    ("conditional.mask", ""),
    ("train.iterations", "50000"),
    ("train.batch", "1024"),
    ("train.lr", "1e-3"),
    ("train.weight_decay", "1e-4"),
    ("train.warmup", "5000"),
    ("train.cosine", "true"),
    ("train.ema", "0.9999"),
    ("train.hidden", "128,128,128"),
    ("train.n_freq", "8"),
    ("train.precondition", "true"),
    ("train.t0", "1e-5"),
    ("train.tn", "0.999"),
    ("run.seed", "0"),
    ("run.threads", "1"),
    ("run.out_dir", ""),
];

/// Keys that never change numeric output and so stay out of the hash.
const UNHASHED: &[&str] = &["run.threads", "run.out_dir"];

pub const OUT_DIR_ENV: &str = "AGM_OUT_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)?;
            cfg.merge_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| AgmError::Config(format!("override {o:?} is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| AgmError::Parse { line: i + 1, msg: format!("expected key = value, got {raw:?}") })?;
            let key = if section.is_empty() { k.trim().to_string() } else { format!("{section}.{}", k.trim()) };
            self.set(&key, v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(AgmError::Config(format!("unknown configuration key {key:?}"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("configuration key {key} has no default"))
    }

    /// Sectioned text with every key, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (k, _) in DEFAULTS {
            let (section, name) = k.split_once('.').expect("keys are sectioned");
            if section != current {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{name} = {}\n", self.get(k)));
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of the numeric configuration.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, _) in DEFAULTS {
            if !UNHASHED.contains(k) {
                h.update(format!("{k}={}\n", self.get(k)).as_bytes());
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse().map_err(|_| AgmError::Config(format!("{key} = {v:?} is not a valid value")))
    }

    fn parse_bool(&self, key: &str) -> Result<bool> {
        match self.get(key).to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(AgmError::Config(format!("{key} = {v:?} is not a boolean"))),
        }
    }

    fn parse_list(&self, key: &str) -> Result<Vec<f64>> {
        let v = self.get(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',').map(|s| s.trim().parse().map_err(|_| AgmError::Config(format!("{key} = {v:?} is not a number list")))).collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("run.seed")
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        let v = self.get("run.out_dir");
        if !v.is_empty() {
            return PathBuf::from(v);
        }
        std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("agm_out"))
    }

    /// Typed, validated view of the configuration.
    pub fn resolve(&self) -> Result<Resolved> {
        let mode: Mode = self.get("sampler.mode").parse()?;
        let dataset: DatasetKind = self.get("data.dataset").parse()?;
        let schedule = DiffusionSchedule::new(self.parse("schedule.p")?, self.parse("schedule.tt")?)?;
        let k: f64 = self.parse("prior.k")?;
        let sigma0 = Sigma0::from_k(k)?;
        let nfe: usize = self.parse("grid.nfe")?;
        if nfe == 0 {
            return Err(AgmError::Config("grid.nfe must be at least 1".into()));
        }
        let tn = match self.get("grid.tn") {
            "auto" => SamplerPlan::default_tn(nfe),
            _ => self.parse("grid.tn")?,
        };
        let hop = match self.get("sampler.hop") {
            "auto" => None,
            _ => Some(self.parse("sampler.hop")?),
        };
        let hidden: Vec<usize> = self
            .get("train.hidden")
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| AgmError::Config(format!("train.hidden = {:?} is not a width list", self.get("train.hidden")))))
            .collect::<Result<_>>()?;
        let train = TrainConfig {
            iterations: self.parse("train.iterations")?,
            batch_size: self.parse("train.batch")?,
            lr: self.parse("train.lr")?,
            weight_decay: self.parse("train.weight_decay")?,
            warmup: self.parse("train.warmup")?,
            cosine: self.parse_bool("train.cosine")?,
            ema_decay: self.parse("train.ema")?,
            hidden,
            n_freq: self.parse("train.n_freq")?,
            precondition: self.parse_bool("train.precondition")?,
            mode,
            t0: self.parse("train.t0")?,
            tn: self.parse("train.tn")?,
            seed: self.seed()?,
        };
        train.validate()?;
        let conditional = match self.get("conditional.xi") {
            "off" | "" => None,
            _ => {
                let target = self.parse_list("conditional.target")?;
                let mask = self.parse_list("conditional.mask")?;
                Some(Conditioning {
                    xi: self.parse("conditional.xi")?,
                    guidance: self.parse("conditional.c")?,
                    target,
                    mask: if mask.is_empty() { None } else { Some(mask) },
                })
            }
        };
        let threads: usize = self.parse("run.threads")?;
        if threads == 0 {
            return Err(AgmError::Config("run.threads must be at least 1".into()));
        }
        let kappa: f64 = self.parse("grid.kappa")?;
        let t0: f64 = self.parse("grid.t0")?;
        // Every grid point costs one evaluation, the last one feeding the hop.
        let grid = time_grid((nfe - 1).max(1), kappa, t0, tn)?;
        let mut plan = SamplerPlan::new(grid, mode);
        plan.order = self.parse("sampler.order")?;
        plan.hop = hop.or(if nfe == 1 { Some(0) } else { None });
        plan.conditional = conditional;
        plan.record = self.parse("sampler.record")?;
        plan.validate(2)?;
        Ok(Resolved {
            dataset,
            data_seed: self.parse("data.seed")?,
            schedule,
            prior_k: k,
            sigma0,
            plan,
            n_samples: self.parse("sampler.samples")?,
            train,
            seed: self.seed()?,
            threads,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Resolved {
    pub dataset: DatasetKind,
    pub data_seed: u64,
    pub schedule: DiffusionSchedule,
    pub prior_k: f64,
    pub sigma0: Sigma0,
    pub plan: SamplerPlan,
    pub n_samples: usize,
    pub train: TrainConfig,
    pub seed: u64,
    pub threads: usize,
}

impl Resolved {
    pub fn dataset(&self) -> Result<ToyDataset> {
        ToyDataset::new(self.dataset, self.data_seed)
    }

    pub fn table(&self, sigma_data: f64) -> Result<KernelTable> {
        KernelTable::build(self.schedule, self.sigma0, sigma_data)
    }
}
