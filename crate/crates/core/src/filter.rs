//! The Gaussian mixture particle filter.
//!
//! Each particle carries an unnormalised weight `a_j` (stored as its log), a
//! Gaussian mean `v_j` and a variance `omega_j`. Between corrections the triple
//! evolves by
//!
//! ```text
//! log a_j += h(v_j) dY - h(v_j)^2 dt / 2
//! v_j     += f(v_j) dt + sqrt(1 - alpha) sigma(v_j) dV_j
//! omega_j += alpha sigma(v_j)^2 dt
//! ```
//!
//! with `alpha = n^-eps`. Every `delta` the population is replaced by `n`
//! offspring: each parent draws `X_j ~ N(v_j, omega_j)`, offspring counts are
//! multinomial in the normalised weights, and every offspring restarts with
//! weight one and variance `alpha * beta`. The mean weight before each
//! correction is folded into the scalar `xi`, so that `rho = xi * pi`
//! approximates the unnormalised conditional distribution.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::gaussmix::{normal_expect, normalize_log_weights, GaussianMeasure, WeightedMixture};
use crate::models::{Model, TestFunction};
use crate::paths::{fmt17, std_normal, ObservationPath, SimRng, TimeGrid};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterConfig {
    n: usize,
    epsilon: Option<f64>,
    alpha: f64,
    beta: f64,
    grid: TimeGrid,
}

impl FilterConfig {
    /// `n >= 2` particles, Gaussianity exponent `eps` in `(0, 1]`, smoothing
    /// parameter `beta > 0`.
    pub fn new(n: usize, epsilon: f64, beta: f64, grid: TimeGrid) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidConfig(format!("n = {n}, need at least 2")));
        }
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::InvalidConfig(format!("epsilon = {epsilon} outside (0, 1]")));
        }
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidConfig(format!("beta = {beta} must be positive")));
        }
        Ok(FilterConfig {
            n,
            epsilon: Some(epsilon),
            alpha: (n as f64).powf(-epsilon),
            beta,
            grid,
        })
    }

    /// Explicit `alpha` in `[0, 1]`. `alpha = 0` gives Dirac particles (the
    /// classical bootstrap filter), `alpha = 1` deterministic means.
    pub fn with_alpha(n: usize, alpha: f64, beta: f64, grid: TimeGrid) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfig("n = 0".into()));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidConfig(format!("alpha = {alpha} outside [0, 1]")));
        }
        if !(beta > 0.0) {
            return Err(Error::InvalidConfig(format!("beta = {beta} must be positive")));
        }
        Ok(FilterConfig {
            n,
            epsilon: None,
            alpha,
            beta,
            grid,
        })
    }

    /// Dirac-particle filter with `n` particles.
    pub fn bootstrap(n: usize, grid: TimeGrid) -> Result<Self> {
        Self::with_alpha(n, 0.0, 1.0, grid)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn epsilon(&self) -> Option<f64> {
        self.epsilon
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Variance every particle starts an interval with.
    pub fn reset_variance(&self) -> f64 {
        self.alpha * self.beta
    }

    /// Upper end of the variance band between corrections,
    /// `alpha (beta + sup sigma^2 delta)`.
    pub fn max_variance(&self, model: &Model) -> f64 {
        self.alpha * (self.beta + model.diffusion_sq_sup() * self.grid.delta())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Particle {
    pub log_weight: f64,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Clone, Debug)]
pub struct FilterState {
    particles: Vec<Particle>,
    log_xi: f64,
    interval_index: usize,
    step: usize,
    time: f64,
    correction_pending: bool,
}

/// Weighted sums needed for `pi(phi)` and `rho(phi)`: `pi = sum / total`,
/// `rho = exp(log_scale) * sum / n`.
struct WeightedSums {
    weights: Vec<f64>,
    total: f64,
    log_scale: f64,
}

impl FilterState {
    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn log_xi(&self) -> f64 {
        self.log_xi
    }

    pub fn interval_index(&self) -> usize {
        self.interval_index
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn correction_pending(&self) -> bool {
        self.correction_pending
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        let logs: Vec<f64> = self.particles.iter().map(|p| p.log_weight).collect();
        normalize_log_weights(&logs)
    }

    pub fn mixture(&self) -> WeightedMixture {
        let logs: Vec<f64> = self.particles.iter().map(|p| p.log_weight).collect();
        let measures: Vec<GaussianMeasure> = self
            .particles
            .iter()
            .map(|p| GaussianMeasure::new(p.mean, p.variance).expect("variances stay non-negative"))
            .collect();
        WeightedMixture::from_log_weights(&logs, &measures).expect("log weights normalise")
    }

    fn weighted_sums(&self) -> WeightedSums {
        let max = self
            .particles
            .iter()
            .map(|p| p.log_weight)
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = self
            .particles
            .iter()
            .map(|p| (p.log_weight - max).exp())
            .collect();
        let total = weights.iter().sum();
        WeightedSums {
            weights,
            total,
            log_scale: self.log_xi + max,
        }
    }

    /// `log rho(1) = log xi + log((1/n) sum_j a_j)`.
    pub fn log_rho_one(&self) -> f64 {
        let s = self.weighted_sums();
        s.log_scale + (s.total / self.particles.len() as f64).ln()
    }

    pub fn rho_one(&self) -> f64 {
        self.log_rho_one().exp()
    }

    /// `pi(phi) = sum_j abar_j E_{N(v_j, omega_j)}[phi]`.
    pub fn pi(&self, phi: &TestFunction) -> f64 {
        self.evaluate(phi).0
    }

    /// `rho(phi) = xi (1/n) sum_j a_j E_{N(v_j, omega_j)}[phi]`.
    pub fn rho(&self, phi: &TestFunction) -> f64 {
        self.evaluate(phi).1
    }

    /// `(pi(phi), rho(phi))` from one pass over the particles.
    pub fn evaluate(&self, phi: &TestFunction) -> (f64, f64) {
        let s = self.weighted_sums();
        let sum: f64 = self
            .particles
            .iter()
            .zip(&s.weights)
            .map(|(p, w)| w * normal_expect(p.mean, p.variance, phi))
            .sum();
        let n = self.particles.len() as f64;
        (sum / s.total, s.log_scale.exp() * sum / n)
    }
}

/// Equal weights, means drawn from the model's initial law, variances
/// `alpha * beta`, `xi = 1`.
pub fn init_filter(cfg: &FilterConfig, model: &Model, rng: &mut SimRng) -> FilterState {
    let var0 = cfg.reset_variance();
    let particles = (0..cfg.n)
        .map(|_| Particle {
            log_weight: 0.0,
            mean: model.initial_mean + model.initial_stddev * std_normal(rng),
            variance: var0,
        })
        .collect();
    FilterState {
        particles,
        log_xi: 0.0,
        interval_index: 0,
        step: 0,
        time: 0.0,
        correction_pending: false,
    }
}

/// Advances every particle by one `dt` step driven by the increment `dy`.
pub fn evolve_substep(
    state: &mut FilterState,
    dy: f64,
    cfg: &FilterConfig,
    model: &Model,
    rng: &mut SimRng,
) -> Result<()> {
    if state.correction_pending {
        return Err(Error::CorrectionPending { step: state.step });
    }
    if state.step >= cfg.grid.steps() {
        return Err(Error::GridMismatch(format!(
            "step {} beyond horizon of {} steps",
            state.step,
            cfg.grid.steps()
        )));
    }
    let dt = cfg.grid.dt();
    let mean_noise = (1.0 - cfg.alpha).sqrt() * dt.sqrt();
    let var_rate = cfg.alpha * dt;
    for p in &mut state.particles {
        let v = p.mean;
        let h = model.sensor(v);
        let s = model.diffusion(v);
        p.log_weight += h * dy - 0.5 * h * h * dt;
        let zeta = std_normal(rng);
        p.mean = v + model.drift(v) * dt + mean_noise * s * zeta;
        p.variance += var_rate * s * s;
    }
    state.step += 1;
    state.time = cfg.grid.time(state.step);
    state.correction_pending = cfg.grid.is_correction_step(state.step);
    Ok(())
}

/// Offspring counts `o ~ Multinomial(n; weights)`.
///
/// Draws `n` sorted uniforms from normalised exponential spacings and
/// merges them against the cumulative weights in one pass.
pub fn multinomial_offspring(weights: &[f64], n: usize, rng: &mut SimRng) -> Result<Vec<usize>> {
    if weights.is_empty() {
        return Err(Error::InvalidWeights("no weights".into()));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidWeights(format!("weight {w} is negative or not finite")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidWeights(format!("weights sum to {total}")));
    }
    let mut counts = vec![0usize; weights.len()];
    if n == 0 {
        return Ok(counts);
    }
    // E_1..E_{n+1} i.i.d. Exp(1); partial sums / total are sorted uniforms.
    let spacings: Vec<f64> = (0..=n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let scale = 1.0 / spacings.iter().sum::<f64>();
    let last_positive = weights.iter().rposition(|w| *w > 0.0).expect("weights sum to one");
    let mut j = 0;
    let mut upper = weights[0];
    let mut u = 0.0;
    for e in &spacings[..n] {
        u += e * scale;
        while u >= upper && j < last_positive {
            j += 1;
            upper += weights[j];
        }
        counts[j] += 1;
    }
    Ok(counts)
}

/// Multinomial branching at the end of a correction interval.
pub fn correct(state: &mut FilterState, cfg: &FilterConfig, rng: &mut SimRng) -> Result<()> {
    if !state.correction_pending {
        return Err(Error::NotCorrectionTime { step: state.step });
    }
    let n = state.particles.len();
    let max = state
        .particles
        .iter()
        .map(|p| p.log_weight)
        .fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = state.particles.iter().map(|p| (p.log_weight - max).exp()).sum();
    state.log_xi += max + (total / n as f64).ln();

    let weights = state.normalized_weights();
    let parents: Vec<f64> = state
        .particles
        .iter()
        .map(|p| p.mean + p.variance.sqrt() * std_normal(rng))
        .collect();
    let counts = multinomial_offspring(&weights, cfg.n, rng)?;
    let var0 = cfg.reset_variance();
    state.particles.clear();
    for (x, &c) in parents.iter().zip(&counts) {
        for _ in 0..c {
            state.particles.push(Particle {
                log_weight: 0.0,
                mean: *x,
                variance: var0,
            });
        }
    }
    state.interval_index += 1;
    state.correction_pending = false;
    Ok(())
}

/// What [`run_filter`] records.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Recording {
    /// Snapshot every `stride` steps; the terminal step is always recorded.
    pub stride: usize,
    /// Keep the whole population just before each correction.
    pub particle_dumps: bool,
}

impl Default for Recording {
    fn default() -> Self {
        Recording {
            stride: 1,
            particle_dumps: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub time: f64,
    pub interval: usize,
    pub rho_one: f64,
    pub pi: Vec<f64>,
    pub rho: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleDump {
    pub time: f64,
    pub interval: usize,
    pub particles: Vec<Particle>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterTrajectory {
    pub names: Vec<String>,
    pub snapshots: Vec<Snapshot>,
    pub dumps: Vec<ParticleDump>,
}

impl FilterTrajectory {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("trajectory records the initial state")
    }

    pub fn snapshot_at_step(&self, step: usize) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| s.step == step)
    }

    /// Columns `t, interval, rho_1`, then `pi_<name>, rho_<name>` per function.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        write!(w, "t,interval,rho_1")?;
        for name in &self.names {
            write!(w, ",pi_{name},rho_{name}")?;
        }
        writeln!(w)?;
        for s in &self.snapshots {
            write!(w, "{},{},{}", fmt17(s.time), s.interval, fmt17(s.rho_one))?;
            for (p, r) in s.pi.iter().zip(&s.rho) {
                write!(w, ",{},{}", fmt17(*p), fmt17(*r))?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn snapshot(state: &FilterState, phis: &[TestFunction]) -> Snapshot {
    let (pi, rho) = phis.iter().map(|phi| state.evaluate(phi)).unzip();
    Snapshot {
        step: state.step,
        time: state.time,
        interval: state.interval_index,
        rho_one: state.rho_one(),
        pi,
        rho,
    }
}

/// Runs the filter over the whole observation path.
///
/// Snapshots are taken after the correction at a correction time, so the
/// terminal snapshot reflects the population after the last branching.
pub fn run_filter(
    cfg: &FilterConfig,
    model: &Model,
    obs: &ObservationPath,
    phis: &[TestFunction],
    rng: &mut SimRng,
    recording: Recording,
) -> Result<FilterTrajectory> {
    let (trajectory, _) = run_filter_with_state(cfg, model, obs, phis, rng, recording)?;
    Ok(trajectory)
}

/// [`run_filter`] that also hands back the terminal state.
pub fn run_filter_with_state(
    cfg: &FilterConfig,
    model: &Model,
    obs: &ObservationPath,
    phis: &[TestFunction],
    rng: &mut SimRng,
    recording: Recording,
) -> Result<(FilterTrajectory, FilterState)> {
    if !obs.grid().same_discretization(&cfg.grid) {
        return Err(Error::GridMismatch(format!(
            "observation dt = {} over {} steps, filter dt = {} over {} steps",
            obs.grid().dt(),
            obs.grid().steps(),
            cfg.grid.dt(),
            cfg.grid.steps()
        )));
    }
    let stride = recording.stride.max(1);
    let steps = cfg.grid.steps();
    let mut state = init_filter(cfg, model, rng);
    let mut trajectory = FilterTrajectory {
        names: phis.iter().map(|p| p.name()).collect(),
        snapshots: vec![snapshot(&state, phis)],
        dumps: Vec::new(),
    };
    for &dy in obs.increments() {
        evolve_substep(&mut state, dy, cfg, model, rng)?;
        if state.correction_pending {
            if recording.particle_dumps {
                trajectory.dumps.push(ParticleDump {
                    time: state.time,
                    interval: state.interval_index,
                    particles: state.particles.clone(),
                });
            }
            correct(&mut state, cfg, rng)?;
        }
        if state.step % stride == 0 || state.step == steps {
            trajectory.snapshots.push(snapshot(&state, phis));
        }
    }
    Ok((trajectory, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussmix::gauss_expect;
    use crate::paths::{simulate_pair, RngStream};
    use approx::assert_relative_eq;

    fn grid() -> TimeGrid {
        TimeGrid::new(1e-3, 1.0, 0.05).unwrap()
    }

    fn rng(id: u64) -> SimRng {
        RngStream::new(77, id).generator()
    }

    #[test]
    fn config_validation() {
        let cfg = FilterConfig::new(100, 0.5, 1.0, grid()).unwrap();
        assert_relative_eq!(cfg.alpha(), 0.1, max_relative = 1e-15);
        assert!(FilterConfig::new(1, 0.5, 1.0, grid()).is_err());
        assert!(FilterConfig::new(10, 0.0, 1.0, grid()).is_err());
        assert!(FilterConfig::new(10, 1.5, 1.0, grid()).is_err());
        assert!(FilterConfig::new(10, 0.5, 0.0, grid()).is_err());
        assert!(FilterConfig::with_alpha(10, 1.2, 1.0, grid()).is_err());
    }

    #[test]
    fn init_examples() {
        let model = Model::builtin("linear_ou").unwrap();
        let cfg = FilterConfig::new(100, 0.5, 1.0, grid()).unwrap();
        let state = init_filter(&cfg, &model, &mut rng(0));
        assert_eq!(state.particles().len(), 100);
        assert!(state.particles().iter().all(|p| p.log_weight == 0.0));
        assert!(state.particles().iter().all(|p| (p.variance - 0.1).abs() < 1e-15));
        assert_eq!(state.pi(&TestFunction::one()), 1.0);
        assert_eq!(state.rho_one(), 1.0);

        let point = model.with_initial_law(0.25, 0.0);
        let state = init_filter(&cfg, &point, &mut rng(0));
        assert!(state.particles().iter().all(|p| p.mean == 0.25));
    }

    #[test]
    fn substep_without_sensor_keeps_weights() {
        let model = Model::linear_ou(1.0, 1.0, 0.0);
        let cfg = FilterConfig::new(20, 0.5, 1.0, grid()).unwrap();
        let mut r = rng(1);
        let mut state = init_filter(&cfg, &model, &mut r);
        for _ in 0..30 {
            evolve_substep(&mut state, 0.3, &cfg, &model, &mut r).unwrap();
        }
        assert!(state.particles().iter().all(|p| p.log_weight == 0.0));
    }

    #[test]
    fn substep_without_diffusion_is_deterministic_euler() {
        let model = Model::linear_ou(2.0, 0.0, 1.0);
        let cfg = FilterConfig::new(16, 0.5, 1.0, grid()).unwrap();
        let mut r = rng(2);
        let mut state = init_filter(&cfg, &model, &mut r);
        let before: Vec<f64> = state.particles().iter().map(|p| p.mean).collect();
        for _ in 0..10 {
            evolve_substep(&mut state, 0.01, &cfg, &model, &mut r).unwrap();
        }
        for (p, v0) in state.particles().iter().zip(before) {
            assert_eq!(p.variance, cfg.reset_variance());
            assert_relative_eq!(p.mean, v0 * (1.0 - 2.0 * 1e-3f64).powi(10), max_relative = 1e-14);
        }
    }

    #[test]
    fn alpha_one_removes_mean_noise() {
        let model = Model::linear_ou(1.0, 1.0, 1.0);
        let cfg = FilterConfig::with_alpha(8, 1.0, 1.0, grid()).unwrap();
        let mut r = rng(3);
        let mut state = init_filter(&cfg, &model, &mut r);
        let before: Vec<f64> = state.particles().iter().map(|p| p.mean).collect();
        evolve_substep(&mut state, 0.0, &cfg, &model, &mut r).unwrap();
        for (p, v0) in state.particles().iter().zip(before) {
            assert_eq!(p.mean, v0 - v0 * 1e-3);
            assert_relative_eq!(p.variance, 1.0 + 1e-3, max_relative = 1e-14);
        }
    }

    #[test]
    fn multinomial_examples() {
        let mut r = rng(4);
        assert_eq!(multinomial_offspring(&[1.0, 0.0, 0.0], 5, &mut r).unwrap(), vec![5, 0, 0]);
        assert_eq!(multinomial_offspring(&[0.0, 0.0, 1.0], 5, &mut r).unwrap(), vec![0, 0, 5]);
        assert!(matches!(
            multinomial_offspring(&[1.2, -0.2], 5, &mut r),
            Err(Error::InvalidWeights(_))
        ));
        assert!(multinomial_offspring(&[0.5, 0.4], 5, &mut r).is_err());
        for n in [1, 2, 7, 100] {
            let c = multinomial_offspring(&[0.1, 0.0, 0.6, 0.3], n, &mut r).unwrap();
            assert_eq!(c.iter().sum::<usize>(), n);
            assert_eq!(c[1], 0);
        }
    }

    #[test]
    fn multinomial_marginals() {
        let n = 400_000;
        let counts = multinomial_offspring(&[0.25; 4], n, &mut rng(5)).unwrap();
        let sd = (0.25f64 * 0.75 / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 5.0 * sd);
        }
    }

    #[test]
    fn multinomial_matches_categorical_means() {
        // Average counts over many draws against n * p.
        let p = [0.05, 0.5, 0.15, 0.3];
        let (n, draws) = (10, 20_000);
        let mut r = rng(6);
        let mut sums = [0.0; 4];
        for _ in 0..draws {
            for (s, c) in sums.iter_mut().zip(multinomial_offspring(&p, n, &mut r).unwrap()) {
                *s += c as f64;
            }
        }
        for (s, pj) in sums.iter().zip(p) {
            let mean = s / draws as f64;
            let sd = (n as f64 * pj * (1.0 - pj) / draws as f64).sqrt();
            assert!((mean - n as f64 * pj).abs() < 5.0 * sd, "{mean} vs {}", n as f64 * pj);
        }
    }

    #[test]
    fn correction_requires_boundary() {
        let model = Model::builtin("bounded_sine").unwrap();
        let cfg = FilterConfig::new(10, 0.5, 1.0, grid()).unwrap();
        let mut r = rng(7);
        let mut state = init_filter(&cfg, &model, &mut r);
        assert!(matches!(correct(&mut state, &cfg, &mut r), Err(Error::NotCorrectionTime { .. })));
        for _ in 0..50 {
            evolve_substep(&mut state, 0.01, &cfg, &model, &mut r).unwrap();
        }
        assert!(state.correction_pending());
        assert!(matches!(
            evolve_substep(&mut state, 0.0, &cfg, &model, &mut r),
            Err(Error::CorrectionPending { .. })
        ));
        let rho_before = state.rho_one();
        correct(&mut state, &cfg, &mut r).unwrap();
        assert_eq!(state.particles().len(), 10);
        assert_eq!(state.interval_index(), 1);
        assert_relative_eq!(state.rho_one(), rho_before, max_relative = 1e-12);
        assert!(state.particles().iter().all(|p| p.log_weight == 0.0 && p.variance == cfg.reset_variance()));
    }

    #[test]
    fn equal_weight_dirac_correction_resamples_means() {
        let cfg = FilterConfig::with_alpha(6, 0.0, 1.0, grid()).unwrap();
        let mut state = FilterState {
            particles: (0..6)
                .map(|j| Particle { log_weight: 0.4, mean: j as f64, variance: 0.0 })
                .collect(),
            log_xi: 0.0,
            interval_index: 0,
            step: 50,
            time: 0.05,
            correction_pending: true,
        };
        correct(&mut state, &cfg, &mut rng(8)).unwrap();
        assert_relative_eq!(state.log_xi(), 0.4, max_relative = 1e-14);
        assert!(state.particles().iter().all(|p| p.mean.fract() == 0.0 && (0.0..6.0).contains(&p.mean)));
    }

    #[test]
    fn single_particle_always_survives() {
        let cfg = FilterConfig::with_alpha(1, 0.3, 1.0, grid()).unwrap();
        let mut state = FilterState {
            particles: vec![Particle { log_weight: -0.7, mean: 2.0, variance: 0.5 }],
            log_xi: 0.1,
            interval_index: 3,
            step: 200,
            time: 0.2,
            correction_pending: true,
        };
        correct(&mut state, &cfg, &mut rng(9)).unwrap();
        assert_eq!(state.particles().len(), 1);
        assert_relative_eq!(state.log_xi(), 0.1 - 0.7, max_relative = 1e-14);
        assert_eq!(state.particles()[0].variance, 0.3);
    }

    #[test]
    fn correction_preserves_conditional_expectation() {
        // Offspring of parent j are N(X_j, alpha beta) with X_j ~ N(v_j, omega_j),
        // so E[pi after] = sum_j abar_j E_{N(v_j, omega_j + alpha beta)}[phi].
        let cfg = FilterConfig::with_alpha(5, 0.2, 1.0, grid()).unwrap();
        let frozen = vec![
            Particle { log_weight: 0.3, mean: -1.0, variance: 0.25 },
            Particle { log_weight: -0.2, mean: 0.0, variance: 0.3 },
            Particle { log_weight: 1.1, mean: 0.5, variance: 0.21 },
            Particle { log_weight: 0.0, mean: 2.0, variance: 0.4 },
            Particle { log_weight: -1.5, mean: 3.0, variance: 0.22 },
        ];
        let template = FilterState {
            particles: frozen.clone(),
            log_xi: 0.0,
            interval_index: 0,
            step: 50,
            time: 0.05,
            correction_pending: true,
        };
        let weights = template.normalized_weights();
        for phi in [TestFunction::Sin, TestFunction::Monomial(2)] {
            let expected: f64 = frozen
                .iter()
                .zip(&weights)
                .map(|(p, w)| w * gauss_expect(&GaussianMeasure::new(p.mean, p.variance + 0.2).unwrap(), &phi))
                .sum();
            let mut r = rng(10);
            let trials = 10_000;
            let samples: Vec<f64> = (0..trials)
                .map(|_| {
                    let mut s = template.clone();
                    correct(&mut s, &cfg, &mut r).unwrap();
                    s.pi(&phi)
                })
                .collect();
            let mean = samples.iter().sum::<f64>() / trials as f64;
            let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
            let se = (var / trials as f64).sqrt();
            assert!((mean - expected).abs() < 4.0 * se, "{}: {mean} vs {expected} (se {se})", phi.name());
        }
    }

    #[test]
    fn no_sensor_means_no_information() {
        let model = Model::linear_ou(1.0, 1.0, 0.0);
        let cfg = FilterConfig::new(50, 0.5, 1.0, grid()).unwrap();
        let (_, obs) = simulate_pair(&model, &grid(), 3);
        let traj = run_filter(&cfg, &model, &obs, &[TestFunction::Monomial(1)], &mut rng(11), Recording::default()).unwrap();
        assert_eq!(traj.snapshots.len(), 1001);
        assert!(traj.snapshots.iter().all(|s| s.rho_one == 1.0));
    }

    #[test]
    fn deterministic_flow_is_tracked() {
        let model = Model::linear_ou(1.0, 0.0, 1.0).with_initial_law(2.0, 0.0);
        let cfg = FilterConfig::with_alpha(10, 0.0, 1.0, grid()).unwrap();
        let (_, obs) = simulate_pair(&model, &grid(), 4);
        let phi = TestFunction::Monomial(1);
        let traj = run_filter(&cfg, &model, &obs, &[phi], &mut rng(12), Recording { stride: 100, particle_dumps: false }).unwrap();
        for s in &traj.snapshots {
            let exact = 2.0 * (-s.time).exp();
            assert!((s.pi[0] - exact).abs() < 2e-3 * 2.0 * s.time.max(1e-3), "t={} {} vs {exact}", s.time, s.pi[0]);
        }
    }

    #[test]
    fn population_and_variance_band_hold_along_run() {
        let model = Model::builtin("bounded_sine").unwrap();
        let cfg = FilterConfig::new(64, 0.5, 1.0, grid()).unwrap();
        let (_, obs) = simulate_pair(&model, &grid(), 5);
        let mut r = rng(13);
        let mut state = init_filter(&cfg, &model, &mut r);
        let (lo, hi) = (cfg.reset_variance(), cfg.max_variance(&model));
        for &dy in obs.increments() {
            evolve_substep(&mut state, dy, &cfg, &model, &mut r).unwrap();
            for p in state.particles() {
                assert!(p.variance >= lo && p.variance <= hi * (1.0 + 1e-12));
                assert!(p.log_weight.exp() > 0.0);
            }
            if state.correction_pending() {
                correct(&mut state, &cfg, &mut r).unwrap();
                assert_eq!(state.particles().len(), 64);
            }
        }
        assert_eq!(state.interval_index(), 20);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let model = Model::builtin("linear_ou").unwrap();
        let cfg = FilterConfig::new(10, 0.5, 1.0, grid()).unwrap();
        let other = TimeGrid::new(2e-3, 1.0, 0.05).unwrap();
        let (_, obs) = simulate_pair(&model, &other, 1);
        assert!(matches!(
            run_filter(&cfg, &model, &obs, &[], &mut rng(0), Recording::default()),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn trajectory_csv_layout() {
        let model = Model::builtin("linear_ou").unwrap();
        let cfg = FilterConfig::new(10, 0.5, 1.0, grid()).unwrap();
        let (_, obs) = simulate_pair(&model, &grid(), 1);
        let phis = [TestFunction::Monomial(1), TestFunction::Sin];
        let traj = run_filter(&cfg, &model, &obs, &phis, &mut rng(0), Recording { stride: 250, particle_dumps: true }).unwrap();
        assert_eq!(traj.snapshots.len(), 5);
        assert_eq!(traj.dumps.len(), 20);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("traj.csv");
        traj.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,interval,rho_1,pi_x,rho_x,pi_sin,rho_sin");
        assert_eq!(text.lines().count(), 6);
    }
}
