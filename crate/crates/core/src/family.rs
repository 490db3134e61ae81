//! Exponential-family outcomes with canonical links and unit dispersion.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{sigmoid, softplus, Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Gaussian,
    Poisson,
    Bernoulli,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Poisson => "poisson",
            Family::Bernoulli => "bernoulli",
        }
    }

    /// Log-partition function Λ(η).
    pub fn cumulant(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => 0.5 * eta * eta,
            Family::Poisson => eta.exp(),
            Family::Bernoulli => softplus(eta),
        }
    }

    /// Inverse link g⁻¹(η) = Λ′(η).
    pub fn mean_from_natural(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => eta,
            Family::Poisson => eta.exp(),
            Family::Bernoulli => sigmoid(eta),
        }
    }

    /// Canonical link g(µ).
    pub fn natural_from_mean(self, mu: f64) -> Result<f64> {
        match self {
            Family::Gaussian if mu.is_finite() => Ok(mu),
            Family::Poisson if mu > 0.0 && mu.is_finite() => Ok(mu.ln()),
            Family::Bernoulli if mu > 0.0 && mu < 1.0 => Ok((mu / (1.0 - mu)).ln()),
            _ => Err(Error::domain(
                "link",
                format!("mean {mu} outside the {} domain", self.name()),
            )),
        }
    }

    /// Λ″(η), the variance function on the natural scale.
    pub fn variance_from_natural(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Poisson => eta.exp(),
            Family::Bernoulli => {
                let p = sigmoid(eta);
                p * (1.0 - p)
            }
        }
    }

    pub fn check_outcome(self, row: usize, y: f64) -> Result<()> {
        let ok = match self {
            Family::Gaussian => y.is_finite(),
            Family::Poisson => y.is_finite() && y >= 0.0,
            Family::Bernoulli => y == 0.0 || y == 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::OutcomeDomain {
                family: self.name(),
                row,
                value: y,
            })
        }
    }

    pub fn check_outcomes(self, y: &[f64]) -> Result<()> {
        y.iter().enumerate().try_for_each(|(i, &v)| self.check_outcome(i, v))
    }

    /// Per-sample negative log-likelihood Λ(η) − yη.
    pub fn nll(self, eta: f64, y: f64) -> Result<f64> {
        self.check_outcome(0, y)?;
        Ok(self.cumulant(eta) - y * eta)
    }

    /// Λ applied element-wise on the tape.
    pub fn cumulant_on(self, tape: &mut Tape, eta: &Tensor) -> Result<Tensor> {
        match self {
            Family::Gaussian => {
                let sq = tape.square(eta)?;
                tape.scale(&sq, 0.5)
            }
            Family::Poisson => tape.exp(eta),
            Family::Bernoulli => tape.softplus(eta),
        }
    }

    /// g⁻¹ applied element-wise on the tape.
    pub fn mean_on(self, tape: &mut Tape, eta: &Tensor) -> Result<Tensor> {
        match self {
            Family::Gaussian => Ok(eta.clone()),
            Family::Poisson => tape.exp(eta),
            Family::Bernoulli => tape.sigmoid(eta),
        }
    }

    /// Element-wise Λ(η) − yη on the tape; `y` broadcasts against `eta`.
    pub fn nll_on(self, tape: &mut Tape, eta: &Tensor, y: &Tensor) -> Result<Tensor> {
        let lam = self.cumulant_on(tape, eta)?;
        let lin = tape.mul(eta, y)?;
        tape.sub(&lam, &lin)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" => Ok(Family::Gaussian),
            "poisson" => Ok(Family::Poisson),
            "bernoulli" => Ok(Family::Bernoulli),
            other => Err(Error::InvalidParameter(format!("unknown family `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ALL: [Family; 3] = [Family::Gaussian, Family::Poisson, Family::Bernoulli];

    #[test]
    fn cumulant_values() {
        assert_eq!(Family::Poisson.cumulant(0.0), 1.0);
        assert_eq!(Family::Gaussian.cumulant(2.0), 2.0);
        assert!((Family::Bernoulli.cumulant(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(Family::Bernoulli.cumulant(800.0).is_finite());
    }

    #[test]
    fn inverse_link_values() {
        assert!((Family::Poisson.mean_from_natural(1.0) - std::f64::consts::E).abs() < 1e-15);
        assert_eq!(Family::Gaussian.mean_from_natural(-3.5), -3.5);
        assert_eq!(Family::Bernoulli.mean_from_natural(0.0), 0.5);
    }

    #[test]
    fn link_values_and_domain() {
        assert_eq!(Family::Poisson.natural_from_mean(1.0).unwrap(), 0.0);
        assert_eq!(Family::Bernoulli.natural_from_mean(0.5).unwrap(), 0.0);
        assert!(Family::Poisson.natural_from_mean(0.0).is_err());
        assert!(Family::Bernoulli.natural_from_mean(1.0).is_err());
        assert!(Family::Gaussian.natural_from_mean(f64::NAN).is_err());
    }

    #[test]
    fn nll_values_and_domain() {
        assert_eq!(Family::Poisson.nll(0.0, 2.0).unwrap(), 1.0);
        assert!(matches!(
            Family::Poisson.nll(0.0, -1.0),
            Err(Error::OutcomeDomain { .. })
        ));
        assert!(Family::Bernoulli.nll(0.0, 0.5).is_err());
        for eta in [-2.0, 0.0, 0.7, 3.0] {
            let y = 1.3;
            let diff = Family::Gaussian.nll(eta, y).unwrap() - 0.5 * (eta - y) * (eta - y);
            assert!((diff + 0.5 * y * y).abs() < 1e-12);
        }
    }

    #[test]
    fn cumulant_derivative_is_inverse_link() {
        let h = 1e-6;
        for f in ALL {
            for k in 0..=200 {
                let eta = -10.0 + 0.1 * k as f64;
                let num = (f.cumulant(eta + h) - f.cumulant(eta - h)) / (2.0 * h);
                let exact = f.mean_from_natural(eta);
                let tol = 1e-6 * exact.abs().max(1.0);
                assert!((num - exact).abs() < tol, "{f} at {eta}: {num} vs {exact}");
            }
        }
    }

    #[test]
    fn parse_names() {
        assert_eq!("Poisson".parse::<Family>().unwrap(), Family::Poisson);
        assert!("gamma".parse::<Family>().is_err());
    }

    proptest! {
        #[test]
        fn nll_is_convex(eta in -10.0f64..10.0, h in 1e-3f64..1.0, y in 0.0f64..20.0) {
            for f in [Family::Gaussian, Family::Poisson] {
                let second = f.nll(eta - h, y).unwrap() - 2.0 * f.nll(eta, y).unwrap() + f.nll(eta + h, y).unwrap();
                prop_assert!(second >= -1e-12 * (1.0 + f.cumulant(eta + h).abs()));
            }
        }

        #[test]
        fn link_round_trip(mu in 1e-6f64..1e3, p in 1e-6f64..(1.0 - 1e-6)) {
            let g = Family::Poisson.natural_from_mean(mu).unwrap();
            prop_assert!((Family::Poisson.mean_from_natural(g) - mu).abs() <= 1e-12 * mu.max(1.0));
            let g = Family::Bernoulli.natural_from_mean(p).unwrap();
            prop_assert!((Family::Bernoulli.mean_from_natural(g) - p).abs() < 1e-12);
        }

        #[test]
        fn inverse_link_increasing(a in -20.0f64..20.0, d in 1e-3f64..5.0) {
            for f in ALL {
                prop_assert!(f.mean_from_natural(a + d) > f.mean_from_natural(a));
            }
        }
    }
}
