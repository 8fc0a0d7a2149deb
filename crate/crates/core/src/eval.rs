//! Sample-quality statistics: energy distance, mode occupancy, trajectory
//! straightness and moment audits against the analytic kernel.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use crate::bridge::PhaseBatch;
use crate::error::{AgmError, Result};
use crate::kernel::KernelPoint;
use crate::samplers::TrajectoryRecord;

fn check_samples(a: &[f64], b: &[f64], d: usize) -> Result<(usize, usize)> {
    if d == 0 || a.len() % d != 0 || b.len() % d != 0 {
        return Err(AgmError::Shape(format!("sample lengths {} and {} are not multiples of d={d}", a.len(), b.len())));
    }
    let (n, m) = (a.len() / d, b.len() / d);
    if n < 2 || m < 2 {
        return Err(AgmError::Config(format!("energy distance needs at least two points per sample, got {n} and {m}")));
    }
    Ok((n, m))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Sum of pairwise distances between rows; the diagonal contributes zero.
fn cross_sum(a: &[f64], b: &[f64], d: usize) -> f64 {
    let mut total = 0.0;
    for ra in a.chunks_exact(d) {
        let mut row = 0.0;
        for rb in b.chunks_exact(d) {
            row += dist(ra, rb);
        }
        total += row;
    }
    total
}

fn within_sum(a: &[f64], d: usize) -> f64 {
    // Same summation order as the cross term, so identical samples cancel exactly.
    cross_sum(a, a, d)
}

/// Energy distance between the empirical measures of `a` and `b` (rows of
/// `d` values). Nonnegative, symmetric, and exactly zero when `a == b`.
pub fn energy_distance(a: &[f64], b: &[f64], d: usize) -> Result<f64> {
    let (n, m) = check_samples(a, b, d)?;
    let (nf, mf) = (n as f64, m as f64);
    let ab = cross_sum(a, b, d) / (nf * mf);
    let aa = within_sum(a, d) / (nf * nf);
    let bb = within_sum(b, d) / (mf * mf);
    Ok((2.0 * ab - aa - bb).max(0.0))
}

/// Unbiased variant: within-sample means exclude the diagonal. May be
/// slightly negative for samples from one distribution.
pub fn energy_distance_unbiased(a: &[f64], b: &[f64], d: usize) -> Result<f64> {
    let (n, m) = check_samples(a, b, d)?;
    let (nf, mf) = (n as f64, m as f64);
    let ab = cross_sum(a, b, d) / (nf * mf);
    let aa = within_sum(a, d) / (nf * (nf - 1.0));
    let bb = within_sum(b, d) / (mf * (mf - 1.0));
    Ok(2.0 * ab - aa - bb)
}

/// Total-variation distance between an occupancy histogram and the uniform one.
pub fn occupancy_divergence(occupancy: &[f64]) -> f64 {
    let k = occupancy.len() as f64;
    0.5 * occupancy.iter().map(|o| (o - 1.0 / k).abs()).sum::<f64>()
}

/// Largest distance of a path from the segment joining its endpoints,
/// relative to the segment length. `None` for a zero-length chord.
pub fn path_straightness(path: &[Vec<f64>]) -> Option<f64> {
    let (first, last) = (path.first()?, path.last()?);
    let chord: Vec<f64> = last.iter().zip(first).map(|(b, a)| b - a).collect();
    let len2: f64 = chord.iter().map(|c| c * c).sum();
    if !(len2 > 0.0) {
        return None;
    }
    let mut worst: f64 = 0.0;
    for p in path {
        let rel: Vec<f64> = p.iter().zip(first).map(|(x, a)| x - a).collect();
        let s = (rel.iter().zip(&chord).map(|(r, c)| r * c).sum::<f64>() / len2).clamp(0.0, 1.0);
        let dev: f64 = rel.iter().zip(&chord).map(|(r, c)| (r - s * c) * (r - s * c)).sum::<f64>().sqrt();
        worst = worst.max(dev);
    }
    Some(worst / len2.sqrt())
}

/// Mean straightness over recorded chains that have a nonzero chord.
pub fn straightness(record: &TrajectoryRecord) -> Result<Option<f64>> {
    if record.steps.len() < 3 {
        return Err(AgmError::Config(format!("straightness needs at least 3 recorded states, got {}", record.steps.len())));
    }
    let vals: Vec<f64> = (0..record.chains).filter_map(|c| path_straightness(&record.path(c))).collect();
    if vals.is_empty() {
        return Ok(None);
    }
    Ok(Some(vals.iter().sum::<f64>() / vals.len() as f64))
}

/// z-scores of empirical phase-state moments against the kernel, per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAudit {
    pub t: f64,
    pub n: usize,
    pub mean_x: Vec<f64>,
    pub mean_v: Vec<f64>,
    pub sxx: Vec<f64>,
    pub sxv: Vec<f64>,
    pub svv: Vec<f64>,
}

impl MomentAudit {
    pub fn max_abs(&self) -> f64 {
        [&self.mean_x, &self.mean_v, &self.sxx, &self.sxv, &self.svv]
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0f64, |a, z| a.max(z.abs()))
    }
}

/// Compare draws of `(x_t, v_t)` pinned at `x1` (one row) with the kernel
/// mean `(mx·x1, mv·x1)` and covariance `Σ_t`, using Gaussian standard errors.
pub fn moment_audit(states: &PhaseBatch, x1: &[f64], k: &KernelPoint) -> Result<MomentAudit> {
    let (n, d) = (states.n, states.d);
    if x1.len() != d {
        return Err(AgmError::Shape(format!("endpoint has {} values, states have {d}", x1.len())));
    }
    if n < 2 {
        return Err(AgmError::Config("moment audit needs at least two draws".into()));
    }
    let nf = n as f64;
    let mut out = MomentAudit { t: k.t, n, mean_x: vec![], mean_v: vec![], sxx: vec![], sxv: vec![], svv: vec![] };
    for j in 0..d {
        let xs = states.x.iter().skip(j).step_by(d);
        let vs = states.v.iter().skip(j).step_by(d);
        let mx = xs.clone().sum::<f64>() / nf;
        let mv = vs.clone().sum::<f64>() / nf;
        let (mut cxx, mut cxv, mut cvv) = (0.0, 0.0, 0.0);
        for (x, v) in xs.zip(vs) {
            cxx += (x - mx) * (x - mx);
            cxv += (x - mx) * (v - mv);
            cvv += (v - mv) * (v - mv);
        }
        let (cxx, cxv, cvv) = (cxx / (nf - 1.0), cxv / (nf - 1.0), cvv / (nf - 1.0));
        out.mean_x.push((mx - k.mx * x1[j]) / (k.sxx / nf).sqrt());
        out.mean_v.push((mv - k.mv * x1[j]) / (k.svv / nf).sqrt());
        out.sxx.push((cxx - k.sxx) / (2.0 * k.sxx * k.sxx / nf).sqrt());
        out.sxv.push((cxv - k.sxv) / ((k.sxx * k.svv + k.sxv * k.sxv) / nf).sqrt());
        out.svv.push((cvv - k.svv) / (2.0 * k.svv * k.svv / nf).sqrt());
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub config_hash: String,
    pub seed: u64,
    pub n_samples: usize,
    pub energy_distance: f64,
    /// Reference-vs-reference energy distance at the same sample size.
    pub baseline: Option<f64>,
    pub occupancy: Vec<f64>,
    pub occupancy_divergence: Option<f64>,
    pub straightness: Option<f64>,
    pub moment_max_z: Option<f64>,
    pub nfe: Option<usize>,
    pub wall_time_s: f64,
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_else(|| "missing".into())
}

impl EvalReport {
    pub fn min_occupancy(&self) -> Option<f64> {
        self.occupancy.iter().copied().reduce(f64::min)
    }

    /// `key: value` lines.
    pub fn to_kv(&self) -> String {
        let occ: Vec<String> = self.occupancy.iter().map(|o| format!("{o:.6}")).collect();
        let mut s = String::new();
        for (k, v) in [
            ("label", self.label.clone()),
            ("config_hash", self.config_hash.clone()),
            ("seed", self.seed.to_string()),
            ("n_samples", self.n_samples.to_string()),
            ("energy_distance", format!("{:.6e}", self.energy_distance)),
            ("baseline", opt(&self.baseline.map(|b| format!("{b:.6e}")))),
            ("occupancy", if occ.is_empty() { "missing".into() } else { occ.join(",") }),
            ("min_occupancy", opt(&self.min_occupancy().map(|o| format!("{o:.6}")))),
            ("occupancy_divergence", opt(&self.occupancy_divergence.map(|o| format!("{o:.6}")))),
            ("straightness", opt(&self.straightness.map(|o| format!("{o:.6}")))),
            ("moment_max_z", opt(&self.moment_max_z.map(|o| format!("{o:.4}")))),
            ("nfe", opt(&self.nfe)),
            ("wall_time_s", format!("{:.3}", self.wall_time_s)),
        ] {
            s.push_str(&format!("{k}: {v}\n"));
        }
        s
    }

    /// Row key used for idempotent ledger appends.
    pub fn ledger_key(&self) -> String {
        format!("{}\t{}\t{}", self.config_hash, self.seed, self.label)
    }

    /// Tab-separated ledger row; wall time is left out so reruns match.
    pub fn ledger_row(&self) -> String {
        format!(
            "{}\t{}\t{:.6e}\t{}\t{}\t{}\t{}",
            self.ledger_key(),
            self.n_samples,
            self.energy_distance,
            opt(&self.baseline.map(|b| format!("{b:.6e}"))),
            opt(&self.min_occupancy().map(|o| format!("{o:.6}"))),
            opt(&self.straightness.map(|o| format!("{o:.6}"))),
            opt(&self.nfe),
        )
    }
}

pub const LEDGER_HEADER: &str = "config_hash\tseed\tlabel\tn_samples\tenergy_distance\tbaseline\tmin_occupancy\tstraightness\tnfe";

/// Append the report to a tab-separated ledger, replacing any row with the
/// same key. Returns `true` when the file changed.
pub fn append_ledger(path: &Path, report: &EvalReport) -> Result<bool> {
    let key = report.ledger_key();
    let row = report.ledger_row();
    let existing = match fs::read_to_string(path) {
        Ok(s) => Some(s),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    let Some(text) = existing else {
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{LEDGER_HEADER}")?;
        writeln!(f, "{row}")?;
        return Ok(true);
    };
    let prefix = format!("{key}\t");
    let mut found = false;
    let mut changed = false;
    let mut lines: Vec<String> = Vec::new();
    for line in text.lines() {
        if line.starts_with(&prefix) {
            found = true;
            changed |= line != row;
            lines.push(row.clone());
        } else {
            lines.push(line.to_string());
        }
    }
    if !found {
        lines.push(row);
        changed = true;
    }
    if changed {
        fs::write(path, lines.join("\n") + "\n")?;
    }
    Ok(changed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples_have_zero_distance() {
        let a = [0.0, 1.0, 2.0, -1.0, 0.5, 0.5];
        assert_eq!(energy_distance(&a, &a, 2).unwrap(), 0.0);
        assert!(energy_distance_unbiased(&a, &a, 2).unwrap() < 0.0);
    }

    #[test]
    fn symmetric_and_permutation_invariant() {
        let a = [0.0, 1.0, 3.0, 0.2];
        let b = [2.0, -1.0, 0.5];
        let ab = energy_distance(&a, &b, 1).unwrap();
        assert!((ab - energy_distance(&b, &a, 1).unwrap()).abs() < 1e-15);
        let p = [3.0, 0.0, 0.2, 1.0];
        assert!((ab - energy_distance(&p, &b, 1).unwrap()).abs() < 1e-15);
        assert!(ab > 0.0);
    }

    #[test]
    fn two_point_example() {
        // every cross distance is 1; the within-a pairs contribute 2·2/4.
        let a = [0.0, 2.0];
        let b = [1.0, 1.0];
        let want = 2.0 * 1.0 - 2.0 * 2.0 / 4.0 - 0.0;
        assert!((energy_distance(&a, &b, 1).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn input_errors() {
        assert!(energy_distance(&[1.0], &[1.0, 2.0], 1).is_err());
        assert!(energy_distance(&[1.0, 2.0, 3.0], &[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn straight_and_semicircle() {
        let line: Vec<Vec<f64>> = (0..11).map(|i| vec![i as f64 * 0.1, 2.0 * i as f64 * 0.1]).collect();
        assert!(path_straightness(&line).unwrap() < 1e-12);
        let arc: Vec<Vec<f64>> = (0..=200)
            .map(|i| {
                let a = std::f64::consts::PI * (1.0 - i as f64 / 200.0);
                vec![a.cos(), a.sin()]
            })
            .collect();
        assert!((path_straightness(&arc).unwrap() - 0.5).abs() < 1e-12);
        assert!(path_straightness(&[vec![1.0], vec![2.0], vec![1.0]]).is_none());
    }

    #[test]
    fn uniform_occupancy_has_no_divergence() {
        assert_eq!(occupancy_divergence(&[0.25; 4]), 0.0);
        assert!((occupancy_divergence(&[1.0, 0.0, 0.0, 0.0]) - 0.75).abs() < 1e-15);
    }
}
