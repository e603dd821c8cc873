//! Ground truth for `rho` and `pi`: the Kalman–Bucy filter for the linear
//! model and a large Dirac-particle (bootstrap) filter for everything else.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::filter::{run_filter, FilterConfig, Recording};
use crate::gaussmix::normal_expect;
use crate::models::{Model, TestFunction};
use crate::paths::{fmt17, ObservationPath, RngStream, TimeGrid, PARTICLE_STREAM_BASE};
use crate::{Error, Result};

/// Gaussian posterior moments on the grid plus `log rho_t(1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentPath {
    pub grid: TimeGrid,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub log_rho1: Vec<f64>,
}

impl MomentPath {
    /// `rho_t(phi) = rho_t(1) E_{N(m_t, P_t)}[phi]` at every grid time.
    pub fn rho(&self, phi: &TestFunction) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.variance)
            .zip(&self.log_rho1)
            .map(|((m, p), l)| l.exp() * normal_expect(*m, *p, phi))
            .collect()
    }

    pub fn pi(&self, phi: &TestFunction) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.variance)
            .map(|(m, p)| normal_expect(*m, *p, phi))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "t,m,P,log_rho1")?;
        for k in 0..self.mean.len() {
            writeln!(
                w,
                "{},{},{},{}",
                fmt17(self.grid.time(k)),
                fmt17(self.mean[k]),
                fmt17(self.variance[k]),
                fmt17(self.log_rho1[k])
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

fn linear_params(model: &Model) -> Result<(f64, f64, f64)> {
    model
        .linear_parameters()
        .ok_or_else(|| Error::OracleRequiresLinear(model.name.clone()))
}

/// Exact filter for the linear model on the observation grid.
///
/// Uses the same time discretisation as the particle filters: at step `k` the
/// Gaussian prior for `X_k` is multiplied by the likelihood
/// `exp(gamma x dY_k - gamma^2 x^2 dt / 2)` and then pushed through the Euler
/// transition `x -> (1 - theta dt) x + sigma0 sqrt(dt) Z`. Both operations
/// are exact on Gaussians, so the only difference from a particle filter on
/// the same grid is Monte Carlo error. The scheme is a consistent
/// discretisation of
/// `dm = -theta m dt + gamma P (dY - gamma m dt)`,
/// `dP/dt = -2 theta P + sigma0^2 - gamma^2 P^2`,
/// `d log rho(1) = gamma m dY - gamma^2 m^2 dt / 2`.
pub fn kalman_bucy(model: &Model, obs: &ObservationPath) -> Result<MomentPath> {
    let (theta, sigma0, gamma) = linear_params(model)?;
    let grid = *obs.grid();
    let dt = grid.dt();
    let n = grid.steps() + 1;
    let (mut mean, mut variance, mut log_rho1) =
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut m = model.initial_mean;
    let mut p = model.initial_stddev * model.initial_stddev;
    let mut l = 0.0;
    let c = gamma * gamma * dt;
    let decay = 1.0 - theta * dt;
    for &dy in obs.increments() {
        mean.push(m);
        variance.push(p);
        log_rho1.push(l);
        let b = gamma * dy;
        let s = 1.0 + c * p;
        l += -0.5 * s.ln() + (m * b - 0.5 * c * m * m + 0.5 * p * b * b) / s;
        let m_post = m + p * (b - c * m) / s;
        let p_post = p / s;
        m = decay * m_post;
        p = decay * decay * p_post + sigma0 * sigma0 * dt;
    }
    mean.push(m);
    variance.push(p);
    log_rho1.push(l);
    Ok(MomentPath {
        grid,
        mean,
        variance,
        log_rho1,
    })
}

/// Forward-Euler integration of the Kalman–Bucy equations, for comparison with
/// [`kalman_bucy`].
pub fn kalman_bucy_euler(model: &Model, obs: &ObservationPath) -> Result<MomentPath> {
    let (theta, sigma0, gamma) = linear_params(model)?;
    let grid = *obs.grid();
    let dt = grid.dt();
    let mut m = model.initial_mean;
    let mut p = model.initial_stddev * model.initial_stddev;
    let mut l = 0.0;
    let mut out = MomentPath {
        grid,
        mean: vec![m],
        variance: vec![p],
        log_rho1: vec![l],
    };
    for &dy in obs.increments() {
        l += gamma * m * dy - 0.5 * gamma * gamma * m * m * dt;
        let dm = -theta * m * dt + gamma * p * (dy - gamma * m * dt);
        p += (-2.0 * theta * p + sigma0 * sigma0 - gamma * gamma * p * p) * dt;
        m += dm;
        out.mean.push(m);
        out.variance.push(p);
        out.log_rho1.push(l);
    }
    Ok(out)
}

/// Positive root of `-2 theta P + sigma0^2 - gamma^2 P^2 = 0`.
pub fn riccati_fixed_point(theta: f64, sigma0: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        return sigma0 * sigma0 / (2.0 * theta);
    }
    let g2 = gamma * gamma;
    (-theta + (theta * theta + g2 * sigma0 * sigma0).sqrt()) / g2
}

/// Exact `rho_t(phi)` for the linear model at every grid time.
pub fn rho_reference(model: &Model, obs: &ObservationPath, phi: &TestFunction) -> Result<Vec<f64>> {
    Ok(kalman_bucy(model, obs)?.rho(phi))
}

/// Settings for [`bootstrap_oracle`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BootstrapSettings {
    /// Total particle count across all islands.
    pub particles: usize,
    /// Independent sub-filters the particles are split into.
    pub islands: usize,
    pub seed: u64,
    pub stride: usize,
}

impl BootstrapSettings {
    pub fn new(particles: usize, seed: u64) -> Self {
        BootstrapSettings {
            particles,
            islands: 20,
            seed,
            stride: 1,
        }
    }
}

/// Estimates of `rho(phi)` and `pi(phi)` with standard errors at recorded times.
#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapEstimate {
    pub names: Vec<String>,
    pub steps: Vec<usize>,
    pub times: Vec<f64>,
    /// `[time][function]`
    pub rho: Vec<Vec<f64>>,
    pub rho_stderr: Vec<Vec<f64>>,
    pub pi: Vec<Vec<f64>>,
    pub pi_stderr: Vec<Vec<f64>>,
    pub rho_one: Vec<f64>,
    pub particles: usize,
    pub islands: usize,
}

impl BootstrapEstimate {
    pub fn terminal_pi(&self, j: usize) -> (f64, f64) {
        let k = self.times.len() - 1;
        (self.pi[k][j], self.pi_stderr[k][j])
    }

    pub fn terminal_rho(&self, j: usize) -> (f64, f64) {
        let k = self.times.len() - 1;
        (self.rho[k][j], self.rho_stderr[k][j])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        write!(w, "t,rho_1")?;
        for name in &self.names {
            write!(w, ",rho_{name},pi_{name}")?;
        }
        writeln!(w)?;
        for k in 0..self.times.len() {
            write!(w, "{},{}", fmt17(self.times[k]), fmt17(self.rho_one[k]))?;
            for j in 0..self.names.len() {
                write!(w, ",{},{}", fmt17(self.rho[k][j]), fmt17(self.pi[k][j]))?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let k = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / k;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

/// Dirac-particle filter used as numerical ground truth.
///
/// The particles are split into `islands` independent bootstrap filters
/// (alpha = 0, same delta-periodic multinomial corrections). Since each
/// island's `rho` is unbiased, the pooled estimate is their average,
/// `pi = sum rho_i(phi) / sum rho_i(1)`, and the spread across islands gives
/// the standard errors (delta method for the ratio).
pub fn bootstrap_oracle(
    model: &Model,
    obs: &ObservationPath,
    phis: &[TestFunction],
    settings: BootstrapSettings,
) -> Result<BootstrapEstimate> {
    let islands = settings.islands.max(1);
    if settings.particles < islands {
        return Err(Error::InvalidConfig(format!(
            "{} particles cannot fill {islands} islands",
            settings.particles
        )));
    }
    let per_island = settings.particles / islands;
    let cfg = FilterConfig::bootstrap(per_island, *obs.grid())?;
    let recording = Recording {
        stride: settings.stride,
        particle_dumps: false,
    };
    let runs = (0..islands)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(settings.seed, PARTICLE_STREAM_BASE + i as u64).generator();
            run_filter(&cfg, model, obs, phis, &mut rng, recording)
        })
        .collect::<Result<Vec<_>>>()?;

    let records = runs[0].snapshots.len();
    let mut est = BootstrapEstimate {
        names: runs[0].names.clone(),
        steps: runs[0].snapshots.iter().map(|s| s.step).collect(),
        times: runs[0].snapshots.iter().map(|s| s.time).collect(),
        rho: Vec::with_capacity(records),
        rho_stderr: Vec::with_capacity(records),
        pi: Vec::with_capacity(records),
        pi_stderr: Vec::with_capacity(records),
        rho_one: Vec::with_capacity(records),
        particles: per_island * islands,
        islands,
    };
    for k in 0..records {
        let ones: Vec<f64> = runs.iter().map(|r| r.snapshots[k].rho_one).collect();
        let (one_mean, _) = mean_and_stderr(&ones);
        est.rho_one.push(one_mean);
        let (mut rho, mut rho_se, mut pi, mut pi_se) = (vec![], vec![], vec![], vec![]);
        for j in 0..phis.len() {
            let vals: Vec<f64> = runs.iter().map(|r| r.snapshots[k].rho[j]).collect();
            let (rm, rs) = mean_and_stderr(&vals);
            let ratio = rm / one_mean;
            let linearised: Vec<f64> = vals
                .iter()
                .zip(&ones)
                .map(|(v, o)| (v - ratio * o) / one_mean)
                .collect();
            let (_, ps) = mean_and_stderr(&linearised);
            rho.push(rm);
            rho_se.push(rs);
            pi.push(ratio);
            pi_se.push(ps);
        }
        est.rho.push(rho);
        est.rho_stderr.push(rho_se);
        est.pi.push(pi);
        est.pi_stderr.push(pi_se);
    }
    Ok(est)
}

/// Bootstrap oracle results cached on disk, keyed by model, observation
/// content hash, particle count and seed.
#[derive(Clone, Debug)]
pub struct OracleCache {
    dir: PathBuf,
}

impl OracleCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        OracleCache { dir: dir.into() }
    }

    pub fn path_for(&self, model: &Model, obs: &ObservationPath, settings: &BootstrapSettings) -> PathBuf {
        self.dir.join(format!(
            "oracle_{}_{}_{}_{}_{}.csv",
            model.name,
            &obs.content_hash()[..16],
            settings.particles,
            settings.islands,
            settings.seed
        ))
    }

    /// Terminal `rho(phi)` for each function, computing and storing the
    /// bootstrap run on a miss. The file holds the full recorded trajectory.
    pub fn terminal_rho(
        &self,
        model: &Model,
        obs: &ObservationPath,
        phis: &[TestFunction],
        settings: BootstrapSettings,
    ) -> Result<Vec<f64>> {
        let path = self.path_for(model, obs, &settings);
        let names: Vec<String> = phis.iter().map(|p| p.name()).collect();
        if path.exists() {
            if let Some(values) = read_terminal_rho(&path, &names)? {
                return Ok(values);
            }
        }
        let est = bootstrap_oracle(model, obs, phis, settings)?;
        fs::create_dir_all(&self.dir)?;
        est.write_csv(&path)?;
        Ok((0..phis.len()).map(|j| est.terminal_rho(j).0).collect())
    }
}

/// `None` when the cached file lacks one of the requested columns.
fn read_terminal_rho(path: &Path, names: &[String]) -> Result<Option<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let bad = |reason: &str| Error::Csv {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty file"))?.split(',').collect();
    let last: Vec<&str> = lines
        .rfind(|l| !l.trim().is_empty())
        .ok_or_else(|| bad("no rows"))?
        .split(',')
        .collect();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let col = format!("rho_{name}");
        let Some(i) = header.iter().position(|h| *h == col) else {
            return Ok(None);
        };
        let v = last
            .get(i)
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| bad("unparsable value"))?;
        out.push(v);
    }
    Ok(Some(out))
}
