//! Recalibrated errors, the discrete Zakai defect, and the gap between the
//! mixture and its component means.

use std::sync::Arc;

use crate::filter::{FilterConfig, FilterState, FilterTrajectory};
use crate::gaussmix::{mixture_expect, point_mass_expect};
use crate::models::{Model, TestFunction};
use crate::oracles::kalman_bucy;
use crate::paths::ObservationPath;
use crate::{Error, Result};

/// `n^eps (rho_n - rho)` together with its normalised counterpart
/// `n^eps (pi_n - pi)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RescaledError {
    pub n: usize,
    pub epsilon: f64,
    pub phi: String,
    pub t: f64,
    pub value: f64,
    pub normalized_value: f64,
}

impl RescaledError {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        epsilon: f64,
        phi: &TestFunction,
        t: f64,
        rho_n: f64,
        rho_ref: f64,
        pi_n: f64,
        pi_ref: f64,
    ) -> Self {
        RescaledError {
            n,
            epsilon,
            phi: phi.name(),
            t,
            value: rescaled_error(n, epsilon, rho_n, rho_ref),
            normalized_value: rescaled_error(n, epsilon, pi_n, pi_ref),
        }
    }
}

pub fn rescaled_error(n: usize, epsilon: f64, rho_n: f64, rho_ref: f64) -> f64 {
    (n as f64).powf(epsilon) * (rho_n - rho_ref)
}

/// Right-hand side of
/// `pi_n(phi) - pi(phi) = [rho_n(phi) - rho(phi)] / rho(1) - pi_n(phi) [rho_n(1) - rho(1)] / rho(1)`.
pub fn normalized_error_decomposition(
    pi_n: f64,
    rho_n_phi: f64,
    rho_n_one: f64,
    rho_phi: f64,
    rho_one: f64,
) -> f64 {
    (rho_n_phi - rho_phi) / rho_one - pi_n * (rho_n_one - rho_one) / rho_one
}

/// `[phi, A phi, h phi]`, the functions a trajectory must record for
/// [`zakai_residual`].
pub fn zakai_functions(model: &Arc<Model>, phi: &TestFunction) -> [TestFunction; 3] {
    [
        phi.clone(),
        TestFunction::generator_of(model, phi.clone()),
        TestFunction::sensor_times(model, phi.clone()),
    ]
}

/// `max_K |rho_K(phi) - rho_0(phi) - sum_{k<K} rho_k(A phi) dt - sum_{k<K} rho_k(h phi) dY_k|`
/// using left-point (Itô) sums.
pub fn zakai_defect(rho_phi: &[f64], rho_a_phi: &[f64], rho_h_phi: &[f64], increments: &[f64], dt: f64) -> f64 {
    let steps = increments.len();
    assert!(rho_phi.len() == steps + 1 && rho_a_phi.len() >= steps && rho_h_phi.len() >= steps);
    let mut integral = 0.0;
    let mut worst: f64 = 0.0;
    for k in 0..steps {
        integral += rho_a_phi[k] * dt + rho_h_phi[k] * increments[k];
        worst = worst.max((rho_phi[k + 1] - rho_phi[0] - integral).abs());
    }
    worst
}

/// Discrete Zakai defect of a filter trajectory recorded at every step.
pub fn zakai_residual(
    traj: &FilterTrajectory,
    phi: &TestFunction,
    model: &Arc<Model>,
    obs: &ObservationPath,
) -> Result<f64> {
    let [f, a, h] = zakai_functions(model, phi);
    let column = |g: &TestFunction| {
        traj.column(&g.name())
            .ok_or_else(|| Error::MissingFunctional(g.name()))
    };
    let (cf, ca, ch) = (column(&f)?, column(&a)?, column(&h)?);
    let steps = obs.grid().steps();
    if traj.snapshots.len() != steps + 1
        || traj.snapshots.iter().enumerate().any(|(k, s)| s.step != k)
    {
        return Err(Error::GridMismatch(
            "trajectory must be recorded at every step of the observation grid".into(),
        ));
    }
    let pick = |c: usize| traj.snapshots.iter().map(|s| s.rho[c]).collect::<Vec<f64>>();
    Ok(zakai_defect(&pick(cf), &pick(ca), &pick(ch), obs.increments(), obs.grid().dt()))
}

/// Discrete Zakai defect of the exact linear `rho`.
pub fn zakai_residual_reference(model: &Arc<Model>, obs: &ObservationPath, phi: &TestFunction) -> Result<f64> {
    let kb = kalman_bucy(model, obs)?;
    let [f, a, h] = zakai_functions(model, phi);
    Ok(zakai_defect(&kb.rho(&f), &kb.rho(&a), &kb.rho(&h), obs.increments(), obs.grid().dt()))
}

/// `|pi_n(phi) - sum_j abar_j phi(v_j)|`.
pub fn variance_contribution_gap(state: &FilterState, phi: &TestFunction) -> f64 {
    let mix = state.mixture();
    (mixture_expect(&mix, phi) - point_mass_expect(&mix, phi)).abs()
}

/// `0.5 sup|phi''| alpha (beta + sup sigma^2 delta)`, when `sup|phi''|` is known.
pub fn gap_bound(cfg: &FilterConfig, model: &Model, phi: &TestFunction) -> Option<f64> {
    phi.second_derivative_sup()
        .map(|s| 0.5 * s * cfg.max_variance(model))
}
