//! Built-in model gallery: Ornstein-Uhlenbeck, Wright-Fisher and geometric
//! Brownian motion.

use crate::coefficients::{PiecewiseAnalyticFn, SdeModel};
use crate::error::{Error, Result};
use crate::scalar::Real;
use std::collections::BTreeMap;

/// Ornstein-Uhlenbeck: `b(x) = theta (mu - x)`, `sigma(x) = sigma`.
pub fn ou<R: Real>(theta: R, mu: R, sigma: R, work_interval: (R, R)) -> Result<SdeModel<R>> {
    let drift = PiecewiseAnalyticFn::polynomial(vec![theta * mu, -theta], R::one());
    let diffusion = PiecewiseAnalyticFn::constant(sigma);
    SdeModel::new(drift, diffusion, work_interval)
}

/// Wright-Fisher gene frequency diffusion:
/// `b(x) = x (m1 - (m1 x + m2 (1 - x)))`, `sigma(x) = sqrt(x (1 - x) / Ne)`.
///
/// The diffusion is neither Lipschitz nor positive at `x = 0, 1`, which the
/// uniqueness assumptions exclude, so the model is restricted to
/// `[margin, 1 - margin]` and `sigma` is represented by a piecewise
/// polynomial fit on that interval.
pub fn wright_fisher<R: Real>(m1: R, m2: R, ne: R, margin: R) -> Result<SdeModel<R>> {
    if !(margin > R::zero() && margin < R::c(0.5)) {
        return Err(Error::Usage("wright_fisher margin must be in (0, 0.5)".into()));
    }
    if !(ne > R::zero()) {
        return Err(Error::Usage("wright_fisher Ne must be positive".into()));
    }
    // b(x) = (m1 - m2) x (1 - x)
    let d = m1 - m2;
    let drift = PiecewiseAnalyticFn::polynomial(vec![R::zero(), d, -d], R::one());
    let lo = margin;
    let hi = R::one() - margin;
    let n_pieces = 10usize;
    let cuts: Vec<R> = (0..=n_pieces)
        .map(|i| lo + (hi - lo) * R::from_usize(i).unwrap() / R::from_usize(n_pieces).unwrap())
        .collect();
    let diffusion =
        PiecewiseAnalyticFn::fit(|x: R| (x * (R::one() - x) / ne).sqrt(), &cuts, 6)?;
    SdeModel::new(drift, diffusion, (lo, hi))
}

/// Geometric Brownian motion: `b(x) = alpha x`, `sigma(x) = beta x`.
pub fn gbm<R: Real>(alpha: R, beta: R, work_interval: (R, R)) -> Result<SdeModel<R>> {
    if !(work_interval.0 > R::zero()) {
        return Err(Error::Usage(
            "gbm work_interval must stay strictly positive".into(),
        ));
    }
    let drift = PiecewiseAnalyticFn::polynomial(vec![R::zero(), alpha], R::one());
    let diffusion = PiecewiseAnalyticFn::polynomial(vec![R::zero(), beta], R::one());
    SdeModel::new(drift, diffusion, work_interval)
}

/// Descriptor for the CLI `models` listing.
pub struct GalleryEntry {
    pub name: &'static str,
    pub summary: &'static str,
    pub form: &'static str,
    pub params: &'static [(&'static str, f64)],
}

pub const ENTRIES: &[GalleryEntry] = &[
    GalleryEntry {
        name: "ou",
        summary: "Ornstein-Uhlenbeck mean-reverting process",
        form: "b(x) = theta (mu - x), sigma(x) = sigma (constant)",
        params: &[
            ("theta", 1.0),
            ("mu", 0.5),
            ("sigma", 0.2),
            ("work_min", -4.0),
            ("work_max", 4.0),
        ],
    },
    GalleryEntry {
        name: "wright_fisher",
        summary: "Wright-Fisher gene frequency diffusion (restricted to [margin, 1-margin])",
        form: "b(x) = x (m1 - (m1 x + m2 (1 - x))), sigma(x) = sqrt(x (1 - x) / ne)",
        params: &[("m1", 0.5), ("m2", 0.3), ("ne", 1.0), ("margin", 0.05)],
    },
    GalleryEntry {
        name: "gbm",
        summary: "Geometric Brownian motion",
        form: "b(x) = alpha x, sigma(x) = beta x",
        params: &[
            ("alpha", 0.1),
            ("beta", 0.2),
            ("work_min", 0.1),
            ("work_max", 3.5),
        ],
    },
];

pub fn entry(name: &str) -> Option<&'static GalleryEntry> {
    ENTRIES.iter().find(|e| e.name == name)
}

/// Builds a gallery model from a name and parameter overrides; unspecified
/// parameters take their defaults, unknown ones are rejected.
pub fn build<R: Real>(name: &str, overrides: &BTreeMap<String, f64>) -> Result<SdeModel<R>> {
    let entry = entry(name)
        .ok_or_else(|| Error::Usage(format!("unknown gallery model '{name}'")))?;
    for key in overrides.keys() {
        if !entry.params.iter().any(|(p, _)| p == key) {
            return Err(Error::Usage(format!(
                "model '{name}' has no parameter '{key}'"
            )));
        }
    }
    let get = |key: &str| -> R {
        let default = entry
            .params
            .iter()
            .find(|(p, _)| *p == key)
            .map(|(_, d)| *d)
            .unwrap();
        R::c(overrides.get(key).copied().unwrap_or(default))
    };
    match name {
        "ou" => ou(
            get("theta"),
            get("mu"),
            get("sigma"),
            (get("work_min"), get("work_max")),
        ),
        "wright_fisher" => wright_fisher(get("m1"), get("m2"), get("ne"), get("margin")),
        "gbm" => gbm(get("alpha"), get("beta"), (get("work_min"), get("work_max"))),
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ou_drift_and_sigma() {
        let m = ou::<f64>(1.0, 0.5, 0.2, (-4.0, 4.0)).unwrap();
        assert!((m.drift.value(0.0) - 0.5).abs() < 1e-15);
        assert!((m.drift.value(2.0) + 1.5).abs() < 1e-15);
        assert_eq!(m.diffusion.value(1.0), 0.2);
    }

    #[test]
    fn wright_fisher_sigma_at_half() {
        // sigma(0.5) = sqrt(0.5 * 0.5 / 1) = 0.5 with Ne = 1.
        let m = wright_fisher::<f64>(0.5, 0.3, 1.0, 0.05).unwrap();
        assert!((m.diffusion.value(0.5) - 0.5).abs() < 1e-8);
        assert!((m.drift.value(0.5) - 0.2 * 0.25).abs() < 1e-15);
        assert_eq!(m.work_interval, (0.05, 0.95));
    }

    #[test]
    fn gbm_coefficients() {
        let m = gbm::<f64>(0.1, 0.2, (0.1, 3.5)).unwrap();
        assert!((m.drift.value(1.0) - 0.1).abs() < 1e-15);
        assert!((m.diffusion.value(1.5) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn build_applies_defaults_and_rejects_unknown() {
        let mut params = BTreeMap::new();
        let m: SdeModel<f64> = build("ou", &params).unwrap();
        assert!((m.drift.value(0.0) - 0.5).abs() < 1e-15);
        params.insert("bogus".into(), 1.0);
        assert!(build::<f64>("ou", &params).is_err());
        assert!(build::<f64>("nosuch", &BTreeMap::new()).is_err());
    }
}
