//! Filtering models (drift, diffusion, sensor, initial law) and the catalog of
//! smooth test functions they are integrated against.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::sync::Arc;

use crate::{Error, Result};

/// Highest derivative order available for drift and diffusion.
pub const COEFFICIENT_ORDER: usize = 6;
/// Highest derivative order available for the sensor function.
pub const SENSOR_ORDER: usize = 2;
/// Highest derivative order of the catalog test functions.
pub const TEST_FUNCTION_ORDER: usize = 6;

/// Names accepted by [`Model::builtin`].
pub const BUILTIN_MODELS: [&str; 2] = ["linear_ou", "bounded_sine"];
/// Names accepted by [`TestFunction::from_name`].
pub const TEST_FUNCTION_CATALOG: [&str; 6] = ["one", "x", "x2", "sin", "tanh", "bump"];

#[derive(Clone, Debug, PartialEq)]
pub enum Dynamics {
    /// `f(x) = -theta x`, `sigma(x) = sigma0`, `h(x) = gamma x`.
    LinearOu { theta: f64, sigma0: f64, gamma: f64 },
    /// `f(x) = sin x`, `sigma(x) = 0.5 (2 + cos x)`, `h(x) = tanh x`.
    BoundedSine,
}

/// A one-dimensional signal/observation model together with a Gaussian
/// initial law `N(initial_mean, initial_stddev^2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub name: String,
    pub dynamics: Dynamics,
    pub initial_mean: f64,
    pub initial_stddev: f64,
}

impl Model {
    pub fn builtin(name: &str) -> Result<Model> {
        match name {
            // started in its stationary law N(0, 1/2)
            "linear_ou" => Ok(Model::linear_ou(1.0, 1.0, 1.0)
                .with_initial_law(0.0, std::f64::consts::FRAC_1_SQRT_2)),
            "bounded_sine" => Ok(Model {
                name: "bounded_sine".into(),
                dynamics: Dynamics::BoundedSine,
                initial_mean: 1.0,
                initial_stddev: 1.0,
            }),
            other => Err(Error::UnknownModel(other.to_string())),
        }
    }

    pub fn linear_ou(theta: f64, sigma0: f64, gamma: f64) -> Model {
        Model {
            name: "linear_ou".into(),
            dynamics: Dynamics::LinearOu {
                theta,
                sigma0,
                gamma,
            },
            initial_mean: 1.0,
            initial_stddev: 1.0,
        }
    }

    pub fn with_initial_law(mut self, mean: f64, stddev: f64) -> Model {
        self.initial_mean = mean;
        self.initial_stddev = stddev;
        self
    }

    /// `(theta, sigma0, gamma)` when the model is linear-Gaussian.
    pub fn linear_parameters(&self) -> Option<(f64, f64, f64)> {
        match self.dynamics {
            Dynamics::LinearOu {
                theta,
                sigma0,
                gamma,
            } => Some((theta, sigma0, gamma)),
            Dynamics::BoundedSine => None,
        }
    }

    #[inline]
    pub fn drift(&self, x: f64) -> f64 {
        match self.dynamics {
            Dynamics::LinearOu { theta, .. } => -theta * x,
            Dynamics::BoundedSine => x.sin(),
        }
    }

    #[inline]
    pub fn diffusion(&self, x: f64) -> f64 {
        match self.dynamics {
            Dynamics::LinearOu { sigma0, .. } => sigma0,
            Dynamics::BoundedSine => 0.5 * (2.0 + x.cos()),
        }
    }

    #[inline]
    pub fn sensor(&self, x: f64) -> f64 {
        match self.dynamics {
            Dynamics::LinearOu { gamma, .. } => gamma * x,
            Dynamics::BoundedSine => x.tanh(),
        }
    }

    /// k-th derivative of the drift, `k <= COEFFICIENT_ORDER`.
    pub fn drift_derivative(&self, k: usize, x: f64) -> f64 {
        assert!(k <= COEFFICIENT_ORDER, "drift derivative order {k}");
        match self.dynamics {
            Dynamics::LinearOu { theta, .. } => match k {
                0 => -theta * x,
                1 => -theta,
                _ => 0.0,
            },
            Dynamics::BoundedSine => sin_derivative(k, x),
        }
    }

    /// k-th derivative of the diffusion coefficient, `k <= COEFFICIENT_ORDER`.
    pub fn diffusion_derivative(&self, k: usize, x: f64) -> f64 {
        assert!(k <= COEFFICIENT_ORDER, "diffusion derivative order {k}");
        match self.dynamics {
            Dynamics::LinearOu { sigma0, .. } => {
                if k == 0 {
                    sigma0
                } else {
                    0.0
                }
            }
            Dynamics::BoundedSine => {
                if k == 0 {
                    self.diffusion(x)
                } else {
                    0.5 * cos_derivative(k, x)
                }
            }
        }
    }

    /// k-th derivative of the sensor function, `k <= SENSOR_ORDER`.
    pub fn sensor_derivative(&self, k: usize, x: f64) -> f64 {
        assert!(k <= SENSOR_ORDER, "sensor derivative order {k}");
        match self.dynamics {
            Dynamics::LinearOu { gamma, .. } => match k {
                0 => gamma * x,
                1 => gamma,
                _ => 0.0,
            },
            Dynamics::BoundedSine => tanh_derivative(k, x),
        }
    }

    /// k-th derivative of `a = sigma^2 / 2`, by the Leibniz rule.
    pub fn half_sq_diffusion_derivative(&self, k: usize, x: f64) -> f64 {
        let mut acc = 0.0;
        for l in 0..=k {
            acc += binomial(k, l)
                * self.diffusion_derivative(l, x)
                * self.diffusion_derivative(k - l, x);
        }
        0.5 * acc
    }

    /// `sup |h|` when the sensor is bounded.
    pub fn sensor_bound(&self) -> Option<f64> {
        match self.dynamics {
            Dynamics::LinearOu { gamma, .. } if gamma == 0.0 => Some(0.0),
            Dynamics::LinearOu { .. } => None,
            Dynamics::BoundedSine => Some(1.0),
        }
    }

    /// `sup sigma(x)^2` over the real line.
    pub fn diffusion_sq_sup(&self) -> f64 {
        match self.dynamics {
            Dynamics::LinearOu { sigma0, .. } => sigma0 * sigma0,
            Dynamics::BoundedSine => 2.25,
        }
    }
}

/// `A phi(x) = f(x) phi'(x) + 0.5 sigma(x)^2 phi''(x)`.
pub fn generator_apply(model: &Model, phi: &TestFunction, x: f64) -> Result<f64> {
    phi.require_order(2)?;
    let s = model.diffusion(x);
    Ok(model.drift(x) * phi.derivative(1, x) + 0.5 * s * s * phi.derivative(2, x))
}

/// A smooth scalar test function with analytic derivatives.
///
/// Catalog members carry derivatives through order six. `Generator` and
/// `SensorProduct` build `A phi` and `h phi` from a model and an inner function,
/// with derivatives assembled by the Leibniz rule, so they lose smoothness
/// relative to the inner function.
#[derive(Clone, Debug)]
pub enum TestFunction {
    Constant(f64),
    Monomial(u32),
    Sin,
    Tanh,
    GaussBump,
    Linear(Vec<(f64, TestFunction)>),
    Generator(Arc<Model>, Box<TestFunction>),
    SensorProduct(Arc<Model>, Box<TestFunction>),
}

impl TestFunction {
    pub fn from_name(name: &str) -> Result<TestFunction> {
        match name {
            "one" => Ok(TestFunction::Constant(1.0)),
            "x" => Ok(TestFunction::Monomial(1)),
            "x2" => Ok(TestFunction::Monomial(2)),
            "sin" => Ok(TestFunction::Sin),
            "tanh" => Ok(TestFunction::Tanh),
            "bump" => Ok(TestFunction::GaussBump),
            other => Err(Error::UnknownTestFunction(other.to_string())),
        }
    }

    pub fn one() -> TestFunction {
        TestFunction::Constant(1.0)
    }

    /// `A phi` for the given model.
    pub fn generator_of(model: &Arc<Model>, inner: TestFunction) -> TestFunction {
        TestFunction::Generator(Arc::clone(model), Box::new(inner))
    }

    /// `h phi` for the given model.
    pub fn sensor_times(model: &Arc<Model>, inner: TestFunction) -> TestFunction {
        TestFunction::SensorProduct(Arc::clone(model), Box::new(inner))
    }

    pub fn name(&self) -> String {
        match self {
            TestFunction::Constant(c) if *c == 1.0 => "one".into(),
            TestFunction::Constant(c) => format!("const{c}"),
            TestFunction::Monomial(1) => "x".into(),
            TestFunction::Monomial(p) => format!("x{p}"),
            TestFunction::Sin => "sin".into(),
            TestFunction::Tanh => "tanh".into(),
            TestFunction::GaussBump => "bump".into(),
            TestFunction::Linear(parts) => {
                let terms: Vec<String> = parts
                    .iter()
                    .map(|(c, f)| format!("{c}*{}", f.name()))
                    .collect();
                format!("lin({})", terms.join("+"))
            }
            TestFunction::Generator(_, inner) => format!("A_{}", inner.name()),
            TestFunction::SensorProduct(_, inner) => format!("h_{}", inner.name()),
        }
    }

    /// Highest derivative order available.
    pub fn max_order(&self) -> usize {
        match self {
            TestFunction::Constant(_)
            | TestFunction::Monomial(_)
            | TestFunction::Sin
            | TestFunction::Tanh
            | TestFunction::GaussBump => TEST_FUNCTION_ORDER,
            TestFunction::Linear(parts) => parts
                .iter()
                .map(|(_, f)| f.max_order())
                .min()
                .unwrap_or(TEST_FUNCTION_ORDER),
            TestFunction::Generator(_, inner) => inner.max_order().saturating_sub(2),
            TestFunction::SensorProduct(_, inner) => inner.max_order().min(SENSOR_ORDER),
        }
    }

    pub fn require_order(&self, required: usize) -> Result<()> {
        let available = self.max_order();
        if available < required {
            return Err(Error::InsufficientSmoothness {
                name: self.name(),
                available,
                required,
            });
        }
        Ok(())
    }

    /// Polynomial degree, when the function is a polynomial.
    pub fn degree(&self) -> Option<u32> {
        match self {
            TestFunction::Constant(_) => Some(0),
            TestFunction::Monomial(p) => Some(*p),
            TestFunction::Sin | TestFunction::Tanh | TestFunction::GaussBump => None,
            TestFunction::Linear(parts) => parts
                .iter()
                .map(|(_, f)| f.degree())
                .try_fold(0, |acc, d| d.map(|d| acc.max(d))),
            TestFunction::Generator(model, inner) => match model.dynamics {
                Dynamics::LinearOu { .. } => inner.degree(),
                Dynamics::BoundedSine => None,
            },
            TestFunction::SensorProduct(model, inner) => match model.dynamics {
                Dynamics::LinearOu { .. } => inner.degree().map(|d| d + 1),
                Dynamics::BoundedSine => None,
            },
        }
    }

    pub fn is_polynomial(&self) -> bool {
        self.degree().is_some()
    }

    /// `sup |phi''|` when known in closed form.
    pub fn second_derivative_sup(&self) -> Option<f64> {
        match self {
            TestFunction::Constant(_) => Some(0.0),
            TestFunction::Monomial(0) | TestFunction::Monomial(1) => Some(0.0),
            TestFunction::Monomial(2) => Some(2.0),
            TestFunction::Monomial(_) => None,
            TestFunction::Sin => Some(1.0),
            // tanh'' = -2 t (1 - t^2), maximal at t = 1/sqrt(3)
            TestFunction::Tanh => Some(4.0 / (3.0 * 3f64.sqrt())),
            // (x^2 - 1) exp(-x^2/2), maximal at x = 0
            TestFunction::GaussBump => Some(1.0),
            TestFunction::Linear(parts) => parts
                .iter()
                .map(|(c, f)| f.second_derivative_sup().map(|s| c.abs() * s))
                .sum(),
            TestFunction::Generator(..) | TestFunction::SensorProduct(..) => None,
        }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            TestFunction::Constant(c) => *c,
            TestFunction::Monomial(p) => x.powi(*p as i32),
            TestFunction::Sin => x.sin(),
            TestFunction::Tanh => x.tanh(),
            TestFunction::GaussBump => (-0.5 * x * x).exp(),
            _ => self.derivative(0, x),
        }
    }

    /// k-th derivative at `x`. Panics if `k > self.max_order()`.
    pub fn derivative(&self, k: usize, x: f64) -> f64 {
        assert!(
            k <= self.max_order(),
            "{} has no derivative of order {k}",
            self.name()
        );
        match self {
            TestFunction::Constant(c) => {
                if k == 0 {
                    *c
                } else {
                    0.0
                }
            }
            TestFunction::Monomial(p) => monomial_derivative(*p, k, x),
            TestFunction::Sin => sin_derivative(k, x),
            TestFunction::Tanh => tanh_derivative(k, x),
            TestFunction::GaussBump => {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                sign * hermite_he(k, x) * (-0.5 * x * x).exp()
            }
            TestFunction::Linear(parts) => {
                parts.iter().map(|(c, f)| c * f.derivative(k, x)).sum()
            }
            TestFunction::Generator(model, inner) => {
                // (f phi')^(k) + (a phi'')^(k)
                let mut acc = 0.0;
                for i in 0..=k {
                    let c = binomial(k, i);
                    acc += c * model.drift_derivative(i, x) * inner.derivative(k - i + 1, x);
                    acc += c
                        * model.half_sq_diffusion_derivative(i, x)
                        * inner.derivative(k - i + 2, x);
                }
                acc
            }
            TestFunction::SensorProduct(model, inner) => (0..=k)
                .map(|i| {
                    binomial(k, i) * model.sensor_derivative(i, x) * inner.derivative(k - i, x)
                })
                .sum(),
        }
    }
}

impl fmt::Display for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

pub(crate) fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

fn monomial_derivative(p: u32, k: usize, x: f64) -> f64 {
    if k as u32 > p {
        return 0.0;
    }
    let falling: f64 = (0..k as u32).map(|i| (p - i) as f64).product();
    falling * x.powi((p - k as u32) as i32)
}

fn sin_derivative(k: usize, x: f64) -> f64 {
    (x + k as f64 * FRAC_PI_2).sin()
}

fn cos_derivative(k: usize, x: f64) -> f64 {
    (x + k as f64 * FRAC_PI_2).cos()
}

/// Derivatives of tanh written as polynomials in `t = tanh x`:
/// `P_0 = t`, `P_{k+1}(t) = P_k'(t) (1 - t^2)`.
fn tanh_derivative(k: usize, x: f64) -> f64 {
    let mut coeffs = [0.0f64; 9];
    coeffs[1] = 1.0;
    for _ in 0..k {
        let mut deriv = [0.0f64; 9];
        for i in 1..9 {
            deriv[i - 1] = i as f64 * coeffs[i];
        }
        let mut next = [0.0f64; 9];
        for i in 0..9 {
            if deriv[i] == 0.0 {
                continue;
            }
            next[i] += deriv[i];
            if i + 2 < 9 {
                next[i + 2] -= deriv[i];
            }
        }
        coeffs = next;
    }
    let t = x.tanh();
    coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
}

/// Probabilists' Hermite polynomial `He_k`.
fn hermite_he(k: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    if k == 0 {
        return prev;
    }
    for j in 1..k {
        let next = x * cur - j as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn probe_grid() -> impl Iterator<Item = f64> {
        (-50..=50).map(|i| i as f64 * 0.1)
    }

    /// Fourth-order central difference of `g`.
    fn fd(g: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (-g(x + 2.0 * h) + 8.0 * g(x + h) - 8.0 * g(x - h) + g(x - 2.0 * h)) / (12.0 * h)
    }

    fn close(analytic: f64, numeric: f64) -> bool {
        (analytic - numeric).abs() <= 1e-5 * analytic.abs().max(1.0)
    }

    #[test]
    fn builtin_values() {
        let ou = Model::builtin("linear_ou").unwrap();
        assert_eq!(ou.drift(2.0), -2.0);
        let sine = Model::builtin("bounded_sine").unwrap();
        assert_eq!(sine.sensor(0.0), 0.0);
        for x in probe_grid() {
            let s = sine.diffusion(x);
            assert!((0.5..=1.5).contains(&s));
            assert!(sine.sensor(x).abs() <= sine.sensor_bound().unwrap());
            assert!(s * s <= sine.diffusion_sq_sup());
        }
        assert!(matches!(
            Model::builtin("lorenz"),
            Err(Error::UnknownModel(name)) if name == "lorenz"
        ));
    }

    #[test]
    fn model_derivatives_match_finite_differences() {
        let h = 1e-3;
        for name in BUILTIN_MODELS {
            let m = Model::builtin(name).unwrap();
            for x in probe_grid() {
                for k in 0..COEFFICIENT_ORDER {
                    let a = m.drift_derivative(k + 1, x);
                    let n = fd(|y| m.drift_derivative(k, y), x, h);
                    assert!(close(a, n), "{name} drift order {} at {x}", k + 1);
                    let a = m.diffusion_derivative(k + 1, x);
                    let n = fd(|y| m.diffusion_derivative(k, y), x, h);
                    assert!(close(a, n), "{name} diffusion order {} at {x}", k + 1);
                }
                for k in 0..SENSOR_ORDER {
                    let a = m.sensor_derivative(k + 1, x);
                    let n = fd(|y| m.sensor_derivative(k, y), x, h);
                    assert!(close(a, n), "{name} sensor order {} at {x}", k + 1);
                }
            }
        }
    }

    #[test]
    fn catalog_derivatives_match_finite_differences() {
        let h = 1e-3;
        for name in TEST_FUNCTION_CATALOG {
            let phi = TestFunction::from_name(name).unwrap();
            assert_eq!(phi.name(), name);
            for x in probe_grid() {
                for k in 0..TEST_FUNCTION_ORDER {
                    let a = phi.derivative(k + 1, x);
                    let n = fd(|y| phi.derivative(k, y), x, h);
                    assert!(close(a, n), "{name} order {} at {x}: {a} vs {n}", k + 1);
                }
            }
        }
    }

    #[test]
    fn derived_functions_match_finite_differences() {
        let h = 1e-3;
        for name in BUILTIN_MODELS {
            let m = Arc::new(Model::builtin(name).unwrap());
            for inner in ["x2", "sin", "bump"] {
                let inner = TestFunction::from_name(inner).unwrap();
                for phi in [
                    TestFunction::generator_of(&m, inner.clone()),
                    TestFunction::sensor_times(&m, inner.clone()),
                ] {
                    for x in probe_grid() {
                        for k in 0..phi.max_order() {
                            let a = phi.derivative(k + 1, x);
                            let n = fd(|y| phi.derivative(k, y), x, h);
                            assert!(close(a, n), "{} order {} at {x}", phi.name(), k + 1);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn catalog_is_bounded_on_probe_interval() {
        for name in ["one", "sin", "tanh", "bump"] {
            let phi = TestFunction::from_name(name).unwrap();
            assert!(probe_grid().all(|x| phi.eval(x).abs() <= 1.0));
        }
    }

    #[test]
    fn second_derivative_sup_dominates_grid() {
        for name in TEST_FUNCTION_CATALOG {
            let phi = TestFunction::from_name(name).unwrap();
            let sup = phi.second_derivative_sup().unwrap();
            let grid_max = (-500..=500)
                .map(|i| phi.derivative(2, i as f64 * 0.01).abs())
                .fold(0.0, f64::max);
            assert!(grid_max <= sup + 1e-12, "{name}");
            assert!(grid_max >= 0.99 * sup, "{name}");
        }
    }

    #[test]
    fn generator_examples() {
        let ou = Model::builtin("linear_ou").unwrap();
        let one = TestFunction::one();
        assert_eq!(generator_apply(&ou, &one, 0.3).unwrap(), 0.0);
        let x2 = TestFunction::Monomial(2);
        assert_relative_eq!(generator_apply(&ou, &x2, 1.0).unwrap(), -1.0);
        let x = TestFunction::Monomial(1);
        for v in [-2.0, 0.5, 3.0] {
            assert_relative_eq!(generator_apply(&ou, &x, v).unwrap(), -v);
        }
        let too_rough = TestFunction::generator_of(
            &Arc::new(ou.clone()),
            TestFunction::generator_of(&Arc::new(ou.clone()), TestFunction::generator_of(&Arc::new(ou), x2)),
        );
        assert!(too_rough.max_order() == 0);
        assert!(matches!(
            generator_apply(&Model::builtin("linear_ou").unwrap(), &too_rough, 0.0),
            Err(Error::InsufficientSmoothness { .. })
        ));
    }

    #[test]
    fn generator_variant_matches_generator_apply() {
        for name in BUILTIN_MODELS {
            let m = Arc::new(Model::builtin(name).unwrap());
            let phi = TestFunction::Tanh;
            let a_phi = TestFunction::generator_of(&m, phi.clone());
            for x in probe_grid() {
                assert_relative_eq!(
                    a_phi.eval(x),
                    generator_apply(&m, &phi, x).unwrap(),
                    max_relative = 1e-14,
                    epsilon = 1e-15
                );
            }
        }
    }

    #[test]
    fn generator_is_linear() {
        let m = Model::builtin("bounded_sine").unwrap();
        let (a, b) = (0.7, -2.3);
        let combo = TestFunction::Linear(vec![(a, TestFunction::Sin), (b, TestFunction::GaussBump)]);
        for x in probe_grid() {
            let lhs = generator_apply(&m, &combo, x).unwrap();
            let rhs = a * generator_apply(&m, &TestFunction::Sin, x).unwrap()
                + b * generator_apply(&m, &TestFunction::GaussBump, x).unwrap();
            assert!((lhs - rhs).abs() <= 1e-14 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn polynomial_degrees() {
        let ou = Arc::new(Model::builtin("linear_ou").unwrap());
        let sine = Arc::new(Model::builtin("bounded_sine").unwrap());
        assert_eq!(TestFunction::Monomial(2).degree(), Some(2));
        assert_eq!(TestFunction::sensor_times(&ou, TestFunction::Monomial(2)).degree(), Some(3));
        assert_eq!(TestFunction::generator_of(&ou, TestFunction::Monomial(2)).degree(), Some(2));
        assert!(!TestFunction::generator_of(&sine, TestFunction::Monomial(2)).is_polynomial());
        assert!(!TestFunction::Sin.is_polynomial());
    }
}
