//! Observables `f` whose expectations `E^x[f(X_t)]` are observed.

use crate::coefficients::PiecewiseAnalyticFn;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// The function applied to the process state: a monomial `s^k` or a custom
/// piecewise polynomial (used e.g. for bounded initial data).
#[derive(Debug, Clone, PartialEq)]
pub enum Observable<R> {
    Monomial(u32),
    Piecewise(PiecewiseAnalyticFn<R>),
}

impl<R: Real> Observable<R> {
    pub fn identity() -> Self {
        Observable::Monomial(1)
    }

    pub fn square() -> Self {
        Observable::Monomial(2)
    }

    pub fn value(&self, s: R) -> R {
        match self {
            Observable::Monomial(k) => s.powi(*k as i32),
            Observable::Piecewise(f) => f.value(s),
        }
    }

    /// First or second derivative.
    pub fn deriv(&self, s: R, order: u8) -> Result<R> {
        match self {
            Observable::Monomial(k) => {
                let k = *k as i32;
                match order {
                    1 => Ok(if k == 0 {
                        R::zero()
                    } else {
                        R::from_i32(k).unwrap() * s.powi(k - 1)
                    }),
                    2 => Ok(if k <= 1 {
                        R::zero()
                    } else {
                        R::from_i32(k * (k - 1)).unwrap() * s.powi(k - 2)
                    }),
                    _ => Err(Error::Usage(format!(
                        "derivative order must be 1 or 2, got {order}"
                    ))),
                }
            }
            Observable::Piecewise(f) => Ok(f.eval_deriv(s, order)?.value),
        }
    }

    /// Stable label used in CSV output: `s`, `s^2`, ..., or `custom`.
    pub fn label(&self) -> String {
        match self {
            Observable::Monomial(1) => "s".into(),
            Observable::Monomial(k) => format!("s^{k}"),
            Observable::Piecewise(_) => "custom".into(),
        }
    }

    pub fn from_label(label: &str) -> Result<Self> {
        if label == "s" {
            return Ok(Observable::Monomial(1));
        }
        if let Some(k) = label.strip_prefix("s^") {
            let k: u32 = k
                .parse()
                .map_err(|_| Error::Parse(format!("bad observable '{label}'")))?;
            return Ok(Observable::Monomial(k));
        }
        Err(Error::Parse(format!(
            "unknown observable '{label}' (expected 's' or 's^k')"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_values_and_derivatives() {
        let f = Observable::<f64>::square();
        assert_eq!(f.value(3.0), 9.0);
        assert_eq!(f.deriv(3.0, 1).unwrap(), 6.0);
        assert_eq!(f.deriv(-1.0, 2).unwrap(), 2.0);
        let g = Observable::<f64>::identity();
        assert_eq!(g.deriv(5.0, 1).unwrap(), 1.0);
        assert_eq!(g.deriv(5.0, 2).unwrap(), 0.0);
    }

    #[test]
    fn labels_round_trip() {
        for f in [Observable::<f64>::identity(), Observable::Monomial(2), Observable::Monomial(4)] {
            assert_eq!(Observable::from_label(&f.label()).unwrap(), f);
        }
        assert!(Observable::<f64>::from_label("cos").is_err());
    }
}
