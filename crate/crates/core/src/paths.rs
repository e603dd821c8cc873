//! Time grids, seeded random streams, and simulated signal/observation paths.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::models::Model;
use crate::{Error, Result};

/// Generator behind every [`RngStream`].
pub type SimRng = ChaCha8Rng;

pub const SIGNAL_STREAM: u64 = 0;
pub const OBSERVATION_STREAM: u64 = 1;
/// Replica `r` draws its particle randomness from stream `PARTICLE_STREAM_BASE + r`.
pub const PARTICLE_STREAM_BASE: u64 = 2;

/// A reproducible random stream identified by `(master_seed, stream_id)`.
///
/// Streams with the same master seed but different ids are independent
/// ChaCha8 streams over the same key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        RngStream {
            master_seed,
            stream_id,
        }
    }

    pub fn generator(&self) -> SimRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

#[inline]
pub(crate) fn std_normal(rng: &mut SimRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Equidistant grid on `[0, horizon]` with step `dt`; corrections happen every
/// `delta`, which spans a whole number of steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    dt: f64,
    horizon: f64,
    delta: f64,
    steps: usize,
    substeps: usize,
}

fn whole_ratio(num: f64, den: f64, what: &str) -> Result<usize> {
    let ratio = num / den;
    let rounded = ratio.round();
    if rounded < 1.0 || (ratio - rounded).abs() > 1e-9 * rounded {
        return Err(Error::InvalidGrid(format!(
            "{what} is not an integer multiple ({ratio})"
        )));
    }
    Ok(rounded as usize)
}

impl TimeGrid {
    pub fn new(dt: f64, horizon: f64, delta: f64) -> Result<Self> {
        for (name, v) in [("dt", dt), ("T", horizon), ("delta", delta)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidGrid(format!("{name} must be positive, got {v}")));
            }
        }
        let substeps = whole_ratio(delta, dt, "delta / dt")?;
        let intervals = whole_ratio(horizon, delta, "T / delta")?;
        if substeps < 10 {
            return Err(Error::InvalidGrid(format!(
                "dt = {dt} must be at most delta / 10 = {}",
                delta / 10.0
            )));
        }
        Ok(TimeGrid {
            dt,
            horizon,
            delta,
            steps: substeps * intervals,
            substeps,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Number of `dt` steps on `[0, T]`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of `dt` steps per correction interval.
    pub fn substeps(&self) -> usize {
        self.substeps
    }

    pub fn intervals(&self) -> usize {
        self.steps / self.substeps
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    pub fn is_correction_step(&self, step: usize) -> bool {
        step > 0 && step % self.substeps == 0
    }

    /// Same `dt` and step count; `delta` may differ.
    pub fn same_discretization(&self, other: &TimeGrid) -> bool {
        self.steps == other.steps && (self.dt - other.dt).abs() <= 1e-12 * self.dt
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignalPath {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
}

/// Observation increments `dY` and the running sum `Y` with `Y[0] = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationPath {
    grid: TimeGrid,
    increments: Vec<f64>,
    cumulative: Vec<f64>,
}

impl ObservationPath {
    /// Builds the path from increments; `cumulative` is their running sum, so
    /// `cumulative[k+1] - cumulative[k]` matches `increments[k]` up to one
    /// rounding of `cumulative[k+1]`.
    pub fn from_increments(grid: TimeGrid, increments: Vec<f64>) -> Result<Self> {
        if increments.len() != grid.steps() {
            return Err(Error::GridMismatch(format!(
                "{} increments for {} steps",
                increments.len(),
                grid.steps()
            )));
        }
        let mut cumulative = Vec::with_capacity(increments.len() + 1);
        let mut y = 0.0f64;
        cumulative.push(y);
        for d in &increments {
            y += d;
            cumulative.push(y);
        }
        Ok(ObservationPath {
            grid,
            increments,
            cumulative,
        })
    }

    /// Pure Brownian increments, i.e. an observation path under the reference
    /// measure where `Y` is independent of the signal.
    pub fn reference_measure(grid: TimeGrid, rng: RngStream) -> Self {
        let mut g = rng.generator();
        let sq = grid.dt().sqrt();
        let inc = (0..grid.steps()).map(|_| sq * std_normal(&mut g)).collect();
        ObservationPath::from_increments(grid, inc).expect("length matches grid")
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    /// Same increments on a grid with a different correction interval.
    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        let grid = TimeGrid::new(self.grid.dt(), self.grid.horizon(), delta)?;
        Ok(ObservationPath {
            grid,
            ..self.clone()
        })
    }

    /// Sums consecutive blocks of `factor` increments onto a grid with step
    /// `factor * dt`.
    pub fn coarsen(&self, factor: usize, delta: f64) -> Result<Self> {
        if factor == 0 || self.increments.len() % factor != 0 {
            return Err(Error::InvalidGrid(format!("cannot coarsen by {factor}")));
        }
        let grid = TimeGrid::new(self.grid.dt() * factor as f64, self.grid.horizon(), delta)?;
        let inc = self
            .increments
            .chunks(factor)
            .map(|c| c.iter().sum())
            .collect();
        ObservationPath::from_increments(grid, inc)
    }

    /// SHA-256 over the grid and increment bit patterns, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.grid.dt().to_le_bytes());
        h.update(self.grid.horizon().to_le_bytes());
        for d in &self.increments {
            h.update(d.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Euler–Maruyama path of `dX = f(X) dt + sigma(X) dB` started from the model's
/// initial law.
pub fn simulate_signal(model: &Model, grid: &TimeGrid, rng: RngStream) -> SignalPath {
    let mut g = rng.generator();
    let dt = grid.dt();
    let sq = dt.sqrt();
    let mut values = Vec::with_capacity(grid.steps() + 1);
    let mut x = model.initial_mean + model.initial_stddev * std_normal(&mut g);
    values.push(x);
    for _ in 0..grid.steps() {
        x += model.drift(x) * dt + model.diffusion(x) * sq * std_normal(&mut g);
        values.push(x);
    }
    SignalPath {
        grid: *grid,
        values,
    }
}

/// `dY[k] = h(X[k]) dt + sqrt(dt) zeta_k` with noise drawn from `rng`.
pub fn simulate_observation(
    model: &Model,
    signal: &SignalPath,
    rng: RngStream,
) -> ObservationPath {
    let mut g = rng.generator();
    let sq = signal.grid.dt().sqrt();
    let noise: Vec<f64> = (0..signal.grid.steps())
        .map(|_| sq * std_normal(&mut g))
        .collect();
    observation_with_noise(model, signal, &noise).expect("noise length matches grid")
}

/// `dY[k] = h(X[k]) dt + noise[k]` for caller-supplied noise increments.
pub fn observation_with_noise(
    model: &Model,
    signal: &SignalPath,
    noise: &[f64],
) -> Result<ObservationPath> {
    let dt = signal.grid.dt();
    if noise.len() != signal.grid.steps() {
        return Err(Error::GridMismatch(format!(
            "{} noise increments for {} steps",
            noise.len(),
            signal.grid.steps()
        )));
    }
    let inc = signal
        .values
        .iter()
        .zip(noise)
        .map(|(&x, &w)| model.sensor(x) * dt + w)
        .collect();
    ObservationPath::from_increments(signal.grid, inc)
}

/// Signal and observation from the conventional streams of `master_seed`.
pub fn simulate_pair(model: &Model, grid: &TimeGrid, master_seed: u64) -> (SignalPath, ObservationPath) {
    let signal = simulate_signal(model, grid, RngStream::new(master_seed, SIGNAL_STREAM));
    let obs = simulate_observation(model, &signal, RngStream::new(master_seed, OBSERVATION_STREAM));
    (signal, obs)
}

/// Formats with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_signal_csv(path: &Path, signal: &SignalPath) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "t,X")?;
    for (k, x) in signal.values.iter().enumerate() {
        writeln!(w, "{},{}", fmt17(signal.grid.time(k)), fmt17(*x))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_observation_csv(path: &Path, obs: &ObservationPath) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "t,dY,Y")?;
    for k in 0..=obs.grid.steps() {
        // the increment on row k is dY over [t_k, t_{k+1}); the last row has none
        let dy = obs.increments.get(k).map(|d| fmt17(*d)).unwrap_or_default();
        writeln!(w, "{},{},{}", fmt17(obs.grid.time(k)), dy, fmt17(obs.cumulative[k]))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_observation_csv`]; `delta` supplies the
/// correction interval, which the file does not carry.
pub fn read_observation_csv(path: &Path, delta: f64) -> Result<ObservationPath> {
    let text = fs::read_to_string(path)?;
    let bad = |reason: String| Error::Csv {
        path: path.display().to_string(),
        reason,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "t,dY,Y" => {}
        other => return Err(bad(format!("unexpected header {other:?}"))),
    }
    let mut times = Vec::new();
    let mut incs = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(bad(format!("row {} has {} columns", i + 1, cols.len())));
        }
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("row {}: {e}", i + 1)));
        times.push(parse(cols[0])?);
        if !cols[1].trim().is_empty() {
            incs.push(parse(cols[1])?);
        }
    }
    if times.len() < 2 || incs.len() + 1 != times.len() {
        return Err(bad("need one increment per step".into()));
    }
    let dt = times[1] - times[0];
    let horizon = *times.last().unwrap();
    let steps = incs.len();
    let dt = if (horizon / steps as f64 - dt).abs() <= 1e-9 * dt {
        horizon / steps as f64
    } else {
        return Err(bad("time column is not equidistant".into()));
    };
    let grid = TimeGrid::new(dt, horizon, delta)?;
    ObservationPath::from_increments(grid, incs)
}
