//! Observation sets: sampled values of `E^x[f(X_t)]` (and variants) on a
//! small window `(0, epsilon) x omega`, from PDE fields or Monte Carlo.

use crate::coefficients::SdeModel;
use crate::error::{Error, Result};
use crate::fk_pde::SolutionField;
use crate::observable::Observable;
use crate::rng::CounterRng;
use crate::scalar::Real;
use crate::sde_sim::{self, csv_err};
use std::io::Write;

/// Which observation set is materialized.
#[derive(Debug, Clone, PartialEq)]
pub enum ObsKind<R> {
    /// General observable `E^x[f(X_t)]` on the window.
    F,
    /// Monomial observable `E^x[(X_t)^k]`.
    K(u32),
    /// Variance `V^x[X_t] = E^x[X_t^2] - (E^x[X_t])^2`.
    V,
    /// Pointwise value and x-derivative at a single `x0`.
    Prime(R),
}

impl<R: Real> ObsKind<R> {
    pub fn label(&self) -> String {
        match self {
            ObsKind::F => "O_f".into(),
            ObsKind::K(k) => format!("O_k{k}"),
            ObsKind::V => "O_v".into(),
            ObsKind::Prime(_) => "O_prime".into(),
        }
    }
}

/// Sampling window and lattice density.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationConfig<R> {
    /// End of the open time window `(0, epsilon)`.
    pub epsilon: R,
    /// Open spatial window `omega`.
    pub omega: (R, R),
    pub n_t: usize,
    pub n_x: usize,
    pub kind: ObsKind<R>,
}

impl<R: Real> ObservationConfig<R> {
    pub fn new(epsilon: R, omega: (R, R), n_t: usize, n_x: usize, kind: ObsKind<R>) -> Result<Self> {
        if !(epsilon > R::zero()) {
            return Err(Error::Usage("epsilon must be positive".into()));
        }
        if !(omega.1 > omega.0) {
            return Err(Error::Usage("omega must be a nonempty interval".into()));
        }
        if n_t == 0 || n_x == 0 {
            return Err(Error::Usage("lattice counts must be positive".into()));
        }
        if let ObsKind::Prime(x0) = &kind {
            if !x0.is_finite() {
                return Err(Error::Usage("O_prime x0 must be finite".into()));
            }
        }
        Ok(ObservationConfig {
            epsilon,
            omega,
            n_t,
            n_x,
            kind,
        })
    }

    /// Time lattice `(0, epsilon]`, excluding `t = 0`.
    pub fn times(&self) -> Vec<R> {
        (1..=self.n_t)
            .map(|i| {
                self.epsilon * R::from_usize(i).unwrap() / R::from_usize(self.n_t).unwrap()
            })
            .collect()
    }

    /// Spatial lattice, cell midpoints strictly inside omega.
    pub fn xs(&self) -> Vec<R> {
        let width = (self.omega.1 - self.omega.0) / R::from_usize(self.n_x).unwrap();
        (0..self.n_x)
            .map(|j| self.omega.0 + width * (R::from_usize(j).unwrap() + R::c(0.5)))
            .collect()
    }

    fn same_lattice(&self, other: &Self) -> bool {
        self.epsilon == other.epsilon
            && self.omega == other.omega
            && self.n_t == other.n_t
            && self.n_x == other.n_x
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample<R> {
    pub t: R,
    pub x: R,
    pub value: R,
    /// Monte Carlo standard error; 0 for PDE sources.
    pub stderr: R,
    /// Set on the x-derivative rows of `O_prime` sets.
    pub derivative: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Pde,
    MonteCarlo,
}

/// A materialized observation set; samples are stored t-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet<R> {
    pub config: ObservationConfig<R>,
    pub f_label: String,
    pub source: SourceKind,
    pub samples: Vec<Sample<R>>,
}

/// Where observation values come from.
pub enum Source<'a, R: Real> {
    /// A solved field for the configured observable.
    Field(&'a SolutionField<R>),
    /// Fields for `f(s) = s` and `f(s) = s^2`; used for `O_v`.
    VarianceFields {
        mean: &'a SolutionField<R>,
        second: &'a SolutionField<R>,
    },
    /// Monte Carlo estimation with the given sampling budget.
    MonteCarlo {
        model: &'a SdeModel<R>,
        n_paths: usize,
        seed: u64,
        dt_max: R,
        /// Central-difference offset for `O_prime` derivatives.
        h_deriv: R,
    },
}

fn field_observable_for_kind<R: Real>(kind: &ObsKind<R>, f_label: &str) -> Result<()> {
    if let ObsKind::K(k) = kind {
        let expected = Observable::<R>::Monomial(*k).label();
        if f_label != expected {
            return Err(Error::Usage(format!(
                "observation kind {} needs a field for f = {expected}, got {f_label}",
                kind.label()
            )));
        }
    }
    Ok(())
}

/// Materializes an observation set from a PDE field or Monte Carlo source.
pub fn extract<R: Real>(
    source: Source<'_, R>,
    config: &ObservationConfig<R>,
    f: &Observable<R>,
) -> Result<ObservationSet<R>> {
    let times = config.times();
    let xs = config.xs();
    match source {
        Source::Field(field) => {
            field_observable_for_kind(&config.kind, &field.f_label)?;
            match &config.kind {
                ObsKind::V => Err(Error::Usage(
                    "O_v needs Source::VarianceFields with both moment fields".into(),
                )),
                ObsKind::Prime(x0) => {
                    let mut samples = Vec::with_capacity(2 * times.len());
                    for &t in &times {
                        samples.push(Sample {
                            t,
                            x: *x0,
                            value: field.interpolate(t, *x0)?,
                            stderr: R::zero(),
                            derivative: false,
                        });
                    }
                    for &t in &times {
                        samples.push(Sample {
                            t,
                            x: *x0,
                            value: field_x_derivative(field, t, *x0)?,
                            stderr: R::zero(),
                            derivative: true,
                        });
                    }
                    Ok(ObservationSet {
                        config: config.clone(),
                        f_label: field.f_label.clone(),
                        source: SourceKind::Pde,
                        samples,
                    })
                }
                _ => {
                    let mut samples = Vec::with_capacity(times.len() * xs.len());
                    for &t in &times {
                        for &x in &xs {
                            samples.push(Sample {
                                t,
                                x,
                                value: field.interpolate(t, x)?,
                                stderr: R::zero(),
                                derivative: false,
                            });
                        }
                    }
                    Ok(ObservationSet {
                        config: config.clone(),
                        f_label: field.f_label.clone(),
                        source: SourceKind::Pde,
                        samples,
                    })
                }
            }
        }
        Source::VarianceFields { mean, second } => {
            if !matches!(config.kind, ObsKind::V) {
                return Err(Error::Usage(
                    "Source::VarianceFields is only valid for kind O_v".into(),
                ));
            }
            if mean.f_label != "s" || second.f_label != "s^2" {
                return Err(Error::Usage(format!(
                    "variance extraction needs fields for s and s^2, got {} and {}",
                    mean.f_label, second.f_label
                )));
            }
            let mut samples = Vec::with_capacity(times.len() * xs.len());
            for &t in &times {
                for &x in &xs {
                    let m1 = mean.interpolate(t, x)?;
                    let m2 = second.interpolate(t, x)?;
                    samples.push(Sample {
                        t,
                        x,
                        value: m2 - m1 * m1,
                        stderr: R::zero(),
                        derivative: false,
                    });
                }
            }
            Ok(ObservationSet {
                config: config.clone(),
                f_label: "variance".into(),
                source: SourceKind::Pde,
                samples,
            })
        }
        Source::MonteCarlo {
            model,
            n_paths,
            seed,
            dt_max,
            h_deriv,
        } => extract_mc(model, config, f, n_paths, seed, dt_max, h_deriv),
    }
}

/// O(h^2) spatial derivative of a field, interpolated to `(t, x)`.
fn field_x_derivative<R: Real>(field: &SolutionField<R>, t: R, x: R) -> Result<R> {
    let g = &field.grid;
    let tau = g.tau();
    let kf = (t / tau).to_f64_lossy().floor() as usize;
    let k = kf.min(g.nt - 1);
    let (du_lo, _) = field.spatial_derivs(k)?;
    let (du_hi, _) = field.spatial_derivs(k + 1)?;
    let wt = (t - g.t(k)) / tau;
    let h = g.h();
    let jf = ((x - g.x_min) / h).to_f64_lossy().floor() as usize;
    let j = jf.min(g.nx - 2);
    let wx = (x - g.x(j)) / h;
    let one = R::one();
    let lo = du_lo[j] * (one - wx) + du_lo[j + 1] * wx;
    let hi = du_hi[j] * (one - wx) + du_hi[j + 1] * wx;
    Ok(lo * (one - wt) + hi * wt)
}

fn extract_mc<R: Real>(
    model: &SdeModel<R>,
    config: &ObservationConfig<R>,
    f: &Observable<R>,
    n_paths: usize,
    seed: u64,
    dt_max: R,
    h_deriv: R,
) -> Result<ObservationSet<R>> {
    let times = config.times();
    let xs = config.xs();
    let rng = CounterRng::new(seed);
    let sub_seed = |i: usize| rng.substream(i as u64).uniform(0, 0).to_bits();
    match &config.kind {
        ObsKind::Prime(x0) => {
            let center =
                sde_sim::mc_moment(model, *x0, &times, f, n_paths, sub_seed(0), dt_max)?;
            let left = sde_sim::mc_moment(
                model,
                *x0 - h_deriv,
                &times,
                f,
                n_paths,
                sub_seed(1),
                dt_max,
            )?;
            let right = sde_sim::mc_moment(
                model,
                *x0 + h_deriv,
                &times,
                f,
                n_paths,
                sub_seed(2),
                dt_max,
            )?;
            let mut samples = Vec::with_capacity(2 * times.len());
            for e in &center {
                samples.push(Sample {
                    t: e.t,
                    x: *x0,
                    value: e.mean,
                    stderr: e.stderr,
                    derivative: false,
                });
            }
            let two_h = R::c(2.0) * h_deriv;
            for i in 0..times.len() {
                let value = (right[i].mean - left[i].mean) / two_h;
                let stderr = (right[i].stderr * right[i].stderr
                    + left[i].stderr * left[i].stderr)
                    .sqrt()
                    / two_h;
                samples.push(Sample {
                    t: times[i],
                    x: *x0,
                    value,
                    stderr,
                    derivative: true,
                });
            }
            Ok(ObservationSet {
                config: config.clone(),
                f_label: f.label(),
                source: SourceKind::MonteCarlo,
                samples,
            })
        }
        kind => {
            // One estimation run per lattice x0, each on its own stream.
            let mut columns = Vec::with_capacity(xs.len());
            for (i, &x0) in xs.iter().enumerate() {
                let ests = match kind {
                    ObsKind::V => {
                        sde_sim::mc_variance(model, x0, &times, n_paths, sub_seed(i), dt_max)?
                    }
                    _ => sde_sim::mc_moment(model, x0, &times, f, n_paths, sub_seed(i), dt_max)?,
                };
                columns.push(ests);
            }
            let mut samples = Vec::with_capacity(times.len() * xs.len());
            for (ti, &t) in times.iter().enumerate() {
                for (xi, &x) in xs.iter().enumerate() {
                    let e = &columns[xi][ti];
                    samples.push(Sample {
                        t,
                        x,
                        value: e.mean,
                        stderr: e.stderr,
                        derivative: false,
                    });
                }
            }
            let f_label = if matches!(kind, ObsKind::V) {
                "variance".into()
            } else {
                f.label()
            };
            Ok(ObservationSet {
                config: config.clone(),
                f_label,
                source: SourceKind::MonteCarlo,
                samples,
            })
        }
    }
}

/// Sup distance over the shared sample lattice; the discrete surrogate for
/// observation-set equality.
pub fn distance<R: Real>(a: &ObservationSet<R>, b: &ObservationSet<R>) -> Result<R> {
    if !a.config.same_lattice(&b.config)
        || a.config.kind != b.config.kind
        || a.f_label != b.f_label
    {
        return Err(Error::Usage(
            "observation sets with mismatched configs cannot be compared".into(),
        ));
    }
    if a.samples.len() != b.samples.len() {
        return Err(Error::Usage("observation sets differ in sample count".into()));
    }
    let mut sup = R::zero();
    for (sa, sb) in a.samples.iter().zip(b.samples.iter()) {
        sup = sup.max((sa.value - sb.value).abs());
    }
    Ok(sup)
}

/// CSV export with header `kind,f,t,x,value,stderr,derivative_flag`.
pub fn write_observation_csv<R: Real, W: Write>(set: &ObservationSet<R>, w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["kind", "f", "t", "x", "value", "stderr", "derivative_flag"])
        .map_err(csv_err)?;
    let kind = set.config.kind.label();
    for s in &set.samples {
        w.write_record([
            kind.clone(),
            set.f_label.clone(),
            format!("{}", s.t),
            format!("{}", s.x),
            format!("{}", s.value),
            format!("{}", s.stderr),
            if s.derivative { "1".into() } else { "0".into() },
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
