//! Coefficient reconstruction from observation sets and distinguishability
//! experiments between candidate models.
//!
//! Short-time methods exploit `d/dt E^x[f(X_t)] |_{t=0} =
//! 1/2 sigma^2(x) f''(x) + b(x) f'(x)`: with `f(s) = s` the slope at `t = 0`
//! is the drift, and with `f(s) = s^2` it is `sigma^2 + 2 x b`. The variance
//! method uses `V^x[X_t] = sigma^2(x) t + O(t^2)`. The joint method fits
//! piecewise-linear coefficient profiles to the observations through the
//! forward PDE solver.

use crate::coefficients::{PiecewiseAnalyticFn, Polynomial, SdeModel};
use crate::error::{Error, Result};
use crate::fk_pde::{solve_fk, Grid1D, SolutionField, SolverOptions};
use crate::observable::Observable;
use crate::observe::{extract, ObsKind, ObservationConfig, ObservationSet, Sample, Source, SourceKind};
use crate::scalar::Real;
use crate::sde_sim::csv_err;
use std::io::Write;

/// Reconstructed coefficient profiles on a set of spatial nodes.
#[derive(Debug, Clone)]
pub struct ReconstructionResult<R> {
    pub method: String,
    pub x_nodes: Vec<R>,
    pub b_hat: Option<Vec<R>>,
    pub sigma_hat: Option<Vec<R>>,
    /// Per-node fit residual (rms over the time lattice, or the global rms
    /// misfit for the joint method).
    pub residuals: Vec<R>,
    /// Per-node flags, empty string when clean.
    pub row_flags: Vec<String>,
    pub diagnostics: Vec<(String, f64)>,
}

impl<R: Real> ReconstructionResult<R> {
    /// Sup-norm deviation of the drift estimate from a reference function.
    pub fn drift_sup_error<F: Fn(R) -> R>(&self, reference: F) -> Option<R> {
        let b = self.b_hat.as_ref()?;
        Some(
            self.x_nodes
                .iter()
                .zip(b.iter())
                .map(|(&x, &v)| (v - reference(x)).abs())
                .fold(R::zero(), R::max),
        )
    }

    pub fn sigma_sup_error<F: Fn(R) -> R>(&self, reference: F) -> Option<R> {
        let s = self.sigma_hat.as_ref()?;
        Some(
            self.x_nodes
                .iter()
                .zip(s.iter())
                .map(|(&x, &v)| (v - reference(x)).abs())
                .fold(R::zero(), R::max),
        )
    }
}

/// CSV export with header `x,b_hat,sigma_hat,residual,flags`.
pub fn write_reconstruction_csv<R: Real, W: Write>(
    result: &ReconstructionResult<R>,
    w: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["x", "b_hat", "sigma_hat", "residual", "flags"])
        .map_err(csv_err)?;
    for (i, &x) in result.x_nodes.iter().enumerate() {
        let b = result
            .b_hat
            .as_ref()
            .map(|v| format!("{}", v[i]))
            .unwrap_or_default();
        let s = result
            .sigma_hat
            .as_ref()
            .map(|v| format!("{}", v[i]))
            .unwrap_or_default();
        let r = result
            .residuals
            .get(i)
            .map(|v| format!("{v}"))
            .unwrap_or_default();
        let f = result.row_flags.get(i).cloned().unwrap_or_default();
        w.write_record([format!("{x}"), b, s, r, f]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Weighted least-squares fit of `y ~ c1 t + c2 t^2` (no intercept: the
/// observable value at `t = 0` is subtracted before fitting). Returns
/// `(c1, c2, weighted rms residual)`.
fn fit_quadratic_slope<R: Real>(ts: &[R], ys: &[R], ws: &[R]) -> Result<(R, R, R)> {
    if ts.len() < 2 {
        return Err(Error::Usage(
            "slope fitting needs at least two time samples".into(),
        ));
    }
    let mut s11 = R::zero();
    let mut s12 = R::zero();
    let mut s22 = R::zero();
    let mut b1 = R::zero();
    let mut b2 = R::zero();
    let mut wsum = R::zero();
    for ((&t, &y), &w) in ts.iter().zip(ys.iter()).zip(ws.iter()) {
        let t2 = t * t;
        s11 += w * t2;
        s12 += w * t2 * t;
        s22 += w * t2 * t2;
        b1 += w * t * y;
        b2 += w * t2 * y;
        wsum += w;
    }
    let det = s11 * s22 - s12 * s12;
    if det.abs() <= R::epsilon() * s11 * s22 {
        return Err(Error::Numerical(
            "degenerate time lattice in slope fit".into(),
        ));
    }
    let c1 = (s22 * b1 - s12 * b2) / det;
    let c2 = (s11 * b2 - s12 * b1) / det;
    let mut rss = R::zero();
    for ((&t, &y), &w) in ts.iter().zip(ys.iter()).zip(ws.iter()) {
        let r = y - c1 * t - c2 * t * t;
        rss += w * r * r;
    }
    Ok((c1, c2, (rss / wsum).sqrt()))
}

/// Groups a lattice observation set into per-x columns of `(t, value,
/// weight)`; weights are inverse-variance for Monte Carlo sources.
fn columns<R: Real>(obs: &ObservationSet<R>) -> Result<Vec<(R, Vec<R>, Vec<R>, Vec<R>)>> {
    if matches!(obs.config.kind, ObsKind::Prime(_)) {
        return Err(Error::Usage(
            "reconstruction needs a lattice observation set, not O_prime".into(),
        ));
    }
    let ts = obs.config.times();
    let xs = obs.config.xs();
    if obs.samples.len() != ts.len() * xs.len() {
        return Err(Error::Data("observation set has missing samples".into()));
    }
    let mut out = Vec::with_capacity(xs.len());
    for (xi, &x) in xs.iter().enumerate() {
        let mut ys = Vec::with_capacity(ts.len());
        let mut ws = Vec::with_capacity(ts.len());
        for (ti, &t) in ts.iter().enumerate() {
            let s = &obs.samples[ti * xs.len() + xi];
            if s.t != t || s.x != x {
                return Err(Error::Data("observation set is not t-major".into()));
            }
            ys.push(s.value);
            ws.push(match obs.source {
                SourceKind::Pde => R::one(),
                SourceKind::MonteCarlo => {
                    let se = s.stderr.max(R::c(1e-12));
                    R::one() / (se * se)
                }
            });
        }
        out.push((x, ts.clone(), ys, ws));
    }
    Ok(out)
}

/// Recovers the drift from observations of `E^x[X_t]` via the slope of
/// `E^x[X_t] - x` at `t = 0`.
pub fn recover_drift_short_time<R: Real>(
    obs: &ObservationSet<R>,
) -> Result<ReconstructionResult<R>> {
    if obs.f_label != "s" {
        return Err(Error::Usage(format!(
            "drift recovery needs observations of f = s, got {}",
            obs.f_label
        )));
    }
    let cols = columns(obs)?;
    let mut x_nodes = Vec::new();
    let mut b_hat = Vec::new();
    let mut residuals = Vec::new();
    for (x, ts, ys, ws) in cols {
        let shifted: Vec<R> = ys.iter().map(|&y| y - x).collect();
        let (c1, _, rms) = fit_quadratic_slope(&ts, &shifted, &ws)?;
        x_nodes.push(x);
        b_hat.push(c1);
        residuals.push(rms);
    }
    let n = x_nodes.len();
    Ok(ReconstructionResult {
        method: "drift_short_time".into(),
        x_nodes,
        b_hat: Some(b_hat),
        sigma_hat: None,
        residuals,
        row_flags: vec![String::new(); n],
        diagnostics: vec![("n_x".into(), n as f64)],
    })
}

/// Recovers drift and diffusion from first- and second-moment observations:
/// the `t = 0` slope of `E^x[X_t^2] - x^2` is `sigma^2(x) + 2 x b(x)`.
pub fn recover_diffusion_short_time<R: Real>(
    obs_m1: &ObservationSet<R>,
    obs_m2: &ObservationSet<R>,
) -> Result<ReconstructionResult<R>> {
    if obs_m2.f_label != "s^2" {
        return Err(Error::Usage(format!(
            "diffusion recovery needs observations of f = s^2, got {}",
            obs_m2.f_label
        )));
    }
    let drift = recover_drift_short_time(obs_m1)?;
    let cols2 = columns(obs_m2)?;
    if cols2.len() != drift.x_nodes.len() {
        return Err(Error::Usage(
            "moment observation sets use different spatial lattices".into(),
        ));
    }
    let b = drift.b_hat.as_ref().unwrap();
    let mut sigma_hat = Vec::new();
    let mut residuals = Vec::new();
    let mut row_flags = Vec::new();
    for (i, (x, ts, ys, ws)) in cols2.into_iter().enumerate() {
        if (x - drift.x_nodes[i]).abs() > R::c(1e-12) {
            return Err(Error::Usage(
                "moment observation sets use different spatial lattices".into(),
            ));
        }
        let shifted: Vec<R> = ys.iter().map(|&y| y - x * x).collect();
        let (c1, _, rms) = fit_quadratic_slope(&ts, &shifted, &ws)?;
        let sigma_sq = c1 - R::c(2.0) * x * b[i];
        if sigma_sq < R::zero() {
            sigma_hat.push(R::zero());
            row_flags.push("sigma_sq_clamped".into());
        } else {
            sigma_hat.push(sigma_sq.sqrt());
            row_flags.push(String::new());
        }
        residuals.push(rms.max(drift.residuals[i]));
    }
    Ok(ReconstructionResult {
        method: "diffusion_short_time".into(),
        x_nodes: drift.x_nodes,
        b_hat: drift.b_hat,
        sigma_hat: Some(sigma_hat),
        residuals,
        row_flags,
        diagnostics: drift.diagnostics,
    })
}

/// Recovers the diffusion alone from variance observations via the slope of
/// `V^x[X_t]` at `t = 0`, which is `sigma^2(x)` independent of the drift.
pub fn recover_diffusion_variance_slope<R: Real>(
    obs_v: &ObservationSet<R>,
) -> Result<ReconstructionResult<R>> {
    if obs_v.f_label != "variance" {
        return Err(Error::Usage(format!(
            "variance-slope recovery needs variance observations, got {}",
            obs_v.f_label
        )));
    }
    let cols = columns(obs_v)?;
    let mut x_nodes = Vec::new();
    let mut sigma_hat = Vec::new();
    let mut residuals = Vec::new();
    let mut row_flags = Vec::new();
    for (x, ts, ys, ws) in cols {
        let (c1, _, rms) = fit_quadratic_slope(&ts, &ys, &ws)?;
        x_nodes.push(x);
        if c1 < R::zero() {
            sigma_hat.push(R::zero());
            row_flags.push("sigma_sq_clamped".into());
        } else {
            sigma_hat.push(c1.sqrt());
            row_flags.push(String::new());
        }
        residuals.push(rms);
    }
    let n = x_nodes.len();
    Ok(ReconstructionResult {
        method: "diffusion_variance_slope".into(),
        x_nodes,
        b_hat: None,
        sigma_hat: Some(sigma_hat),
        residuals,
        row_flags,
        diagnostics: vec![("n_x".into(), n as f64)],
    })
}

/// Settings for the joint PDE-constrained fit.
#[derive(Debug, Clone)]
pub struct JointOptions<R> {
    /// Nodes of the piecewise-linear coefficient profiles (constant tails
    /// beyond the first/last node).
    pub node_xs: Vec<R>,
    pub initial_b: Vec<R>,
    pub initial_sigma: Vec<R>,
    /// Forward solver grid; must cover the observation window.
    pub grid: Grid1D<R>,
    pub work_interval: (R, R),
    pub sigma_floor: R,
    /// Weight on the second-difference roughness penalty.
    pub reg_weight: R,
    pub max_iters: usize,
}

struct JointProblem<'a, R: Real> {
    obs_m1: &'a ObservationSet<R>,
    obs_m2: &'a ObservationSet<R>,
    opts: &'a JointOptions<R>,
    n_nodes: usize,
}

impl<R: Real> JointProblem<'_, R> {
    fn build_model(&self, p: &[R]) -> Result<SdeModel<R>> {
        let n = self.n_nodes;
        let b_vals = p[..n].to_vec();
        let s_vals: Vec<R> = p[n..].iter().map(|&s| s.max(self.opts.sigma_floor)).collect();
        let drift = PiecewiseAnalyticFn::linear_interpolant(&self.opts.node_xs, &b_vals)?;
        let diffusion = PiecewiseAnalyticFn::linear_interpolant(&self.opts.node_xs, &s_vals)?;
        SdeModel::with_sigma_floor(
            drift,
            diffusion,
            self.opts.work_interval,
            self.opts.sigma_floor,
        )
    }

    fn misfit_for(&self, field: &SolutionField<R>, obs: &ObservationSet<R>, f: &Observable<R>) -> Result<R> {
        let pred = extract(Source::Field(field), &obs.config, f)?;
        let mut sum = R::zero();
        for (p, o) in pred.samples.iter().zip(obs.samples.iter()) {
            let w = match obs.source {
                SourceKind::Pde => R::one(),
                SourceKind::MonteCarlo => {
                    let se = o.stderr.max(R::c(1e-12));
                    R::one() / (se * se)
                }
            };
            let d = p.value - o.value;
            sum += w * d * d;
        }
        Ok(sum / R::from_usize(obs.samples.len()).unwrap())
    }

    fn objective(&self, p: &[R]) -> Result<R> {
        let model = self.build_model(p)?;
        let f1 = Observable::identity();
        let f2 = Observable::square();
        let field1 = solve_fk(&model, &f1, &self.opts.grid, &SolverOptions::default())?;
        let field2 = solve_fk(&model, &f2, &self.opts.grid, &SolverOptions::default())?;
        let mut j = self.misfit_for(&field1, self.obs_m1, &f1)?
            + self.misfit_for(&field2, self.obs_m2, &f2)?;
        let n = self.n_nodes;
        let mut rough = R::zero();
        for block in [&p[..n], &p[n..]] {
            for i in 1..n.saturating_sub(1) {
                let d2 = block[i + 1] - R::c(2.0) * block[i] + block[i - 1];
                rough += d2 * d2;
            }
        }
        j += self.opts.reg_weight * rough;
        Ok(j)
    }
}

fn fd_gradient<R: Real>(
    f: &dyn Fn(&[R]) -> Result<R>,
    p: &[R],
    free: &[bool],
) -> Result<Vec<R>> {
    let mut g = vec![R::zero(); p.len()];
    let mut q = p.to_vec();
    for i in 0..p.len() {
        if !free[i] {
            continue;
        }
        let eps = R::c(1e-6) * p[i].abs().max(R::one());
        q[i] = p[i] + eps;
        let fp = f(&q)?;
        q[i] = p[i] - eps;
        let fm = f(&q)?;
        q[i] = p[i];
        g[i] = (fp - fm) / (R::c(2.0) * eps);
    }
    Ok(g)
}

/// BFGS with backtracking line search over the free coordinates.
fn bfgs_minimize<R: Real>(
    f: &dyn Fn(&[R]) -> Result<R>,
    p0: Vec<R>,
    free: &[bool],
    max_iters: usize,
) -> Result<(Vec<R>, R, usize, R)> {
    let n = p0.len();
    let mut p = p0;
    let mut fval = f(&p)?;
    let mut g = fd_gradient(f, &p, free)?;
    // Inverse-Hessian approximation, dense; the problem is tens of
    // parameters, so this stays cheap.
    let mut h: Vec<Vec<R>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i == j { R::one() } else { R::zero() })
                .collect()
        })
        .collect();
    let mut iters = 0;
    for _ in 0..max_iters {
        iters += 1;
        let grad_norm = g.iter().map(|&x| x * x).fold(R::zero(), |a, b| a + b).sqrt();
        if grad_norm < R::c(1e-10) {
            break;
        }
        // d = -H g
        let mut d = vec![R::zero(); n];
        for i in 0..n {
            if !free[i] {
                continue;
            }
            let mut s = R::zero();
            for j in 0..n {
                s += h[i][j] * g[j];
            }
            d[i] = -s;
        }
        let dg: R = d.iter().zip(g.iter()).map(|(&a, &b)| a * b).fold(R::zero(), |a, b| a + b);
        if dg >= R::zero() {
            // Reset to steepest descent if the model lost positive
            // definiteness numerically.
            for i in 0..n {
                d[i] = if free[i] { -g[i] } else { R::zero() };
                for j in 0..n {
                    h[i][j] = if i == j { R::one() } else { R::zero() };
                }
            }
        }
        let dg: R = d.iter().zip(g.iter()).map(|(&a, &b)| a * b).fold(R::zero(), |a, b| a + b);
        let mut alpha = R::one();
        let c1 = R::c(1e-4);
        let mut accepted = false;
        let mut p_new = p.clone();
        let mut f_new = fval;
        for _ in 0..40 {
            for i in 0..n {
                p_new[i] = p[i] + alpha * d[i];
            }
            match f(&p_new) {
                Ok(v) if v <= fval + c1 * alpha * dg => {
                    f_new = v;
                    accepted = true;
                    break;
                }
                _ => alpha *= R::c(0.5),
            }
        }
        if !accepted {
            break;
        }
        let g_new = fd_gradient(f, &p_new, free)?;
        // BFGS inverse update.
        let s: Vec<R> = (0..n).map(|i| p_new[i] - p[i]).collect();
        let y: Vec<R> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let sy: R = s.iter().zip(y.iter()).map(|(&a, &b)| a * b).fold(R::zero(), |a, b| a + b);
        if sy > R::c(1e-14) {
            let rho = R::one() / sy;
            let mut hy = vec![R::zero(); n];
            for i in 0..n {
                for j in 0..n {
                    hy[i] += h[i][j] * y[j];
                }
            }
            let yhy: R = y.iter().zip(hy.iter()).map(|(&a, &b)| a * b).fold(R::zero(), |a, b| a + b);
            for i in 0..n {
                for j in 0..n {
                    h[i][j] += (rho * rho * yhy + rho) * s[i] * s[j]
                        - rho * (hy[i] * s[j] + s[i] * hy[j]);
                }
            }
        }
        let improved = (fval - f_new).abs() <= R::c(1e-14) * fval.abs().max(R::one());
        p = p_new;
        fval = f_new;
        g = g_new;
        if improved {
            break;
        }
    }
    let grad_norm = g.iter().map(|&x| x * x).fold(R::zero(), |a, b| a + b).sqrt();
    Ok((p, fval, iters, grad_norm))
}

/// Jointly fits piecewise-linear drift and diffusion profiles to first- and
/// second-moment observation sets through the forward PDE solver.
pub fn recover_joint_global<R: Real>(
    obs_m1: &ObservationSet<R>,
    obs_m2: &ObservationSet<R>,
    opts: &JointOptions<R>,
) -> Result<ReconstructionResult<R>> {
    let n = opts.node_xs.len();
    if n < 2 {
        return Err(Error::Usage("joint recovery needs at least two nodes".into()));
    }
    if opts.initial_b.len() != n || opts.initial_sigma.len() != n {
        return Err(Error::Usage(
            "initial coefficient vectors must match node count".into(),
        ));
    }
    if obs_m1.f_label != "s" || obs_m2.f_label != "s^2" {
        return Err(Error::Usage(
            "joint recovery needs observation sets for f = s and f = s^2".into(),
        ));
    }
    let problem = JointProblem {
        obs_m1,
        obs_m2,
        opts,
        n_nodes: n,
    };
    let mut p0: Vec<R> = opts.initial_b.clone();
    p0.extend(opts.initial_sigma.iter().map(|&s| s.max(opts.sigma_floor)));
    let obj = |p: &[R]| problem.objective(p);

    // Freeze parameters the observations barely react to (nodes outside the
    // window): their diagonal Gauss-Newton sensitivity is negligible and
    // keeping them active only lets the regularizer drag them around.
    let j0 = obj(&p0)?;
    let mut sens = vec![R::zero(); p0.len()];
    {
        let mut q = p0.clone();
        for i in 0..p0.len() {
            let eps = R::c(1e-4) * p0[i].abs().max(R::one());
            q[i] = p0[i] + eps;
            let jp = obj(&q)?;
            q[i] = p0[i] - eps;
            let jm = obj(&q)?;
            q[i] = p0[i];
            sens[i] = ((jp - j0).abs() + (jm - j0).abs()) / eps;
        }
    }
    let max_sens = sens.iter().copied().fold(R::zero(), R::max);
    let free: Vec<bool> = sens.iter().map(|&s| s > R::c(1e-8) * max_sens).collect();
    let n_frozen = free.iter().filter(|&&f| !f).count();

    let (p, j_final, iters, grad_norm) = bfgs_minimize(&obj, p0, &free, opts.max_iters)?;
    let b_hat: Vec<R> = p[..n].to_vec();
    let sigma_hat: Vec<R> = p[n..].iter().map(|&s| s.max(opts.sigma_floor)).collect();
    let rms = j_final.max(R::zero()).sqrt();
    let mut row_flags = vec![String::new(); n];
    for i in 0..n {
        if !free[i] || !free[n + i] {
            row_flags[i] = "frozen".into();
        }
    }
    Ok(ReconstructionResult {
        method: "joint_global".into(),
        x_nodes: opts.node_xs.clone(),
        b_hat: Some(b_hat),
        sigma_hat: Some(sigma_hat),
        residuals: vec![rms; n],
        row_flags,
        diagnostics: vec![
            ("final_misfit".into(), j_final.to_f64_lossy()),
            ("iterations".into(), iters as f64),
            ("grad_norm".into(), grad_norm.to_f64_lossy()),
            ("n_frozen".into(), n_frozen as f64),
        ],
    })
}

/// Adds a localized bump to the drift coefficient.
pub fn perturb_drift<R: Real>(
    model: &SdeModel<R>,
    center: R,
    half_width: R,
    height: R,
) -> Result<SdeModel<R>> {
    let bump = PiecewiseAnalyticFn::bump(center, half_width, height)?;
    let drift = model.drift.add(&bump)?;
    SdeModel::with_sigma_floor(
        drift,
        model.diffusion.clone(),
        model.work_interval,
        model.sigma_floor,
    )
}

fn piece_at<R: Real>(f: &PiecewiseAnalyticFn<R>, x: R) -> Polynomial<R> {
    let idx = f.breakpoints().partition_point(|&b| b <= x);
    f.pieces()[idx].clone()
}

/// Adds a localized bump to `sigma^2` by refitting `sqrt(sigma^2 + bump)` on
/// the bump support; outside the support the original pieces are kept
/// verbatim.
pub fn perturb_sigma_sq<R: Real>(
    model: &SdeModel<R>,
    center: R,
    half_width: R,
    height: R,
) -> Result<SdeModel<R>> {
    let sigma = &model.diffusion;
    let lo = center - half_width;
    let hi = center + half_width;
    let bump = PiecewiseAnalyticFn::bump(center, half_width, height)?;
    let floor_sq = model.sigma_floor * model.sigma_floor;
    let n_sub = 8usize;
    let mut cuts: Vec<R> = (0..=n_sub)
        .map(|i| lo + (hi - lo) * R::from_usize(i).unwrap() / R::from_usize(n_sub).unwrap())
        .collect();
    let tol = (hi - lo) * R::c(1e-9);
    for &b in sigma.breakpoints() {
        if b > lo + tol && b < hi - tol && cuts.iter().all(|&c| (c - b).abs() > tol) {
            cuts.push(b);
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let fitted = PiecewiseAnalyticFn::fit(
        |x: R| {
            let v = sigma.value(x);
            (v * v + bump.value(x)).max(floor_sq).sqrt()
        },
        &cuts,
        8,
    )?;
    // Stitch: original breakpoints and pieces outside the support, fitted
    // pieces inside.
    let mut bps: Vec<R> = sigma
        .breakpoints()
        .iter()
        .copied()
        .filter(|&b| b <= lo + tol || b >= hi - tol)
        .collect();
    bps.extend(cuts.iter().copied());
    bps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    bps.dedup_by(|a, b| (*a - *b).abs() <= tol);
    let mut pieces = Vec::with_capacity(bps.len() + 1);
    for i in 0..=bps.len() {
        let mid = if i == 0 {
            bps[0] - R::one()
        } else if i == bps.len() {
            bps[bps.len() - 1] + R::one()
        } else {
            (bps[i - 1] + bps[i]) * R::c(0.5)
        };
        if mid > lo && mid < hi {
            pieces.push(piece_at(&fitted, mid));
        } else {
            pieces.push(piece_at(sigma, mid));
        }
    }
    let mut min_gap = sigma.min_gap();
    for w in bps.windows(2) {
        min_gap = min_gap.min(w[1] - w[0]);
    }
    let stitched = PiecewiseAnalyticFn::new(bps, pieces, min_gap)?;
    SdeModel::with_sigma_floor(
        model.drift.clone(),
        stitched,
        model.work_interval,
        model.sigma_floor,
    )
}

/// Comparison verdict: the models are told apart by the observation window,
/// or they agree to within solver tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    IdenticalWithinTol,
    Distinguished,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::IdenticalWithinTol => "identical_within_tol",
            Verdict::Distinguished => "distinguished",
        })
    }
}

/// Outcome of comparing two candidate models on an observation window.
#[derive(Debug, Clone)]
pub struct DistinguishabilityReport<R> {
    /// Sup of `|u_a - u_b|` over the observation lattice.
    pub sup_abs_u_diff: R,
    pub threshold: R,
    pub verdict: Verdict,
    /// Grid nodes inside the spatial window.
    pub xs: Vec<R>,
    /// Discrete `d/dt (u_a - u_b)(0, x)` at those nodes.
    pub dt_u0: Vec<R>,
    /// `B(x) f'(x) + Sigma(x) f''(x)` with `B = b_a - b_b`,
    /// `Sigma = (sigma_a^2 - sigma_b^2) / 2`.
    pub predicted: Vec<R>,
    /// Sup deviation between the two columns above.
    pub max_consistency_dev: R,
    /// Per-sample value differences on the lattice, for CSV export.
    pub diff_samples: Vec<Sample<R>>,
    pub kind_label: String,
    pub f_label: String,
}

impl<R: Real> DistinguishabilityReport<R> {
    /// Plain-text summary, one `key: value` per line.
    pub fn is_distinguished(&self) -> bool {
        self.verdict == Verdict::Distinguished
    }

    pub fn report_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("verdict: {}\n", self.verdict));
        s.push_str(&format!("sup_abs_u_diff: {:e}\n", self.sup_abs_u_diff));
        s.push_str(&format!("threshold: {:e}\n", self.threshold));
        s.push_str(&format!(
            "max_consistency_dev: {:e}\n",
            self.max_consistency_dev
        ));
        s.push_str(&format!("n_lattice_samples: {}\n", self.diff_samples.len()));
        s.push_str(&format!("observable: {}\n", self.f_label));
        s
    }

    /// CSV of lattice differences with header `kind,f,t,x,delta`.
    pub fn write_difference_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["kind", "f", "t", "x", "delta"]).map_err(csv_err)?;
        for s in &self.diff_samples {
            w.write_record([
                self.kind_label.clone(),
                self.f_label.clone(),
                format!("{}", s.t),
                format!("{}", s.x),
                format!("{}", s.value),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DistinguishOptions<R> {
    pub grid: Grid1D<R>,
    pub threshold: R,
    pub solver: SolverOptions<R>,
}

impl<R: Real> DistinguishOptions<R> {
    pub fn new(grid: Grid1D<R>) -> Self {
        DistinguishOptions {
            grid,
            threshold: R::c(1e-3),
            solver: SolverOptions::default(),
        }
    }
}

/// Solves both models for the same observable, compares their observation
/// sets on the window, and checks the measured `t = 0` slope of the
/// difference against the coefficient-difference prediction.
pub fn distinguishability_test<R: Real>(
    model_a: &SdeModel<R>,
    model_b: &SdeModel<R>,
    f: &Observable<R>,
    config: &ObservationConfig<R>,
    opts: &DistinguishOptions<R>,
) -> Result<DistinguishabilityReport<R>> {
    let field_a = solve_fk(model_a, f, &opts.grid, &opts.solver)?;
    let field_b = solve_fk(model_b, f, &opts.grid, &opts.solver)?;
    let set_a = extract(Source::Field(&field_a), config, f)?;
    let set_b = extract(Source::Field(&field_b), config, f)?;
    let mut sup = R::zero();
    let mut diff_samples = Vec::with_capacity(set_a.samples.len());
    for (sa, sb) in set_a.samples.iter().zip(set_b.samples.iter()) {
        let d = sa.value - sb.value;
        sup = sup.max(d.abs());
        diff_samples.push(Sample {
            t: sa.t,
            x: sa.x,
            value: d,
            stderr: R::zero(),
            derivative: sa.derivative,
        });
    }
    let dt_a = field_a.time_deriv_at_zero()?;
    let dt_b = field_b.time_deriv_at_zero()?;
    let (omega_lo, omega_hi) = config.omega;
    let mut xs = Vec::new();
    let mut dt_u0 = Vec::new();
    let mut predicted = Vec::new();
    let mut max_dev = R::zero();
    let half = R::c(0.5);
    for j in 0..opts.grid.nx {
        let x = opts.grid.x(j);
        if x <= omega_lo || x >= omega_hi {
            continue;
        }
        let measured = dt_a[j] - dt_b[j];
        let big_b = model_a.drift.value(x) - model_b.drift.value(x);
        let sa = model_a.diffusion.value(x);
        let sb = model_b.diffusion.value(x);
        let big_sigma = half * (sa * sa - sb * sb);
        let pred = big_b * f.deriv(x, 1)? + big_sigma * f.deriv(x, 2)?;
        max_dev = max_dev.max((measured - pred).abs());
        xs.push(x);
        dt_u0.push(measured);
        predicted.push(pred);
    }
    Ok(DistinguishabilityReport {
        sup_abs_u_diff: sup,
        threshold: opts.threshold,
        verdict: if sup > opts.threshold {
            Verdict::Distinguished
        } else {
            Verdict::IdenticalWithinTol
        },
        xs,
        dt_u0,
        predicted,
        max_consistency_dev: max_dev,
        diff_samples,
        kind_label: config.kind.label(),
        f_label: f.label(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery;

    fn solve_obs(
        model: &SdeModel<f64>,
        f: &Observable<f64>,
        kind: ObsKind<f64>,
        n_x: usize,
    ) -> ObservationSet<f64> {
        let grid = Grid1D::new(-4.0, 4.0, 401, 0.1, 200).unwrap();
        let field = solve_fk(model, f, &grid, &SolverOptions::default()).unwrap();
        let cfg = ObservationConfig::new(0.1, (-0.5, 0.5), 20, n_x, kind).unwrap();
        extract(Source::Field(&field), &cfg, f).unwrap()
    }

    #[test]
    fn quadratic_slope_fit_is_exact_on_polynomials() {
        let ts: Vec<f64> = (1..=10).map(|i| 0.01 * i as f64).collect();
        let ys: Vec<f64> = ts.iter().map(|t| 3.0 * t + 5.0 * t * t).collect();
        let ws = vec![1.0; ts.len()];
        let (c1, c2, rms) = fit_quadratic_slope(&ts, &ys, &ws).unwrap();
        assert!((c1 - 3.0).abs() < 1e-10);
        assert!((c2 - 5.0).abs() < 1e-9);
        assert!(rms < 1e-12);
    }

    #[test]
    fn drift_recovery_matches_ou_drift() {
        let model = gallery::ou(1.0, 0.5, 0.2, (-4.0, 4.0)).unwrap();
        let obs = solve_obs(&model, &Observable::identity(), ObsKind::K(1), 20);
        let rec = recover_drift_short_time(&obs).unwrap();
        let err = rec.drift_sup_error(|x| 1.0 * (0.5 - x)).unwrap();
        assert!(err <= 0.01, "drift sup error {err}");
    }

    #[test]
    fn zero_drift_recovered_exactly() {
        let model = SdeModel::new(
            PiecewiseAnalyticFn::constant(0.0),
            PiecewiseAnalyticFn::constant(1.0),
            (-4.0, 4.0),
        )
        .unwrap();
        let obs = solve_obs(&model, &Observable::identity(), ObsKind::K(1), 20);
        let rec = recover_drift_short_time(&obs).unwrap();
        let err = rec.drift_sup_error(|_| 0.0).unwrap();
        assert!(err <= 1e-6, "zero drift error {err}");
    }

    #[test]
    fn diffusion_recovery_constant_sigma() {
        let model = gallery::ou(1.0, 0.5, 0.2, (-4.0, 4.0)).unwrap();
        // n_x = 25 keeps the lattice on grid nodes so interpolation is exact.
        let m1 = solve_obs(&model, &Observable::identity(), ObsKind::K(1), 25);
        let m2 = solve_obs(&model, &Observable::square(), ObsKind::K(2), 25);
        let rec = recover_diffusion_short_time(&m1, &m2).unwrap();
        let err = rec.sigma_sup_error(|_| 0.2).unwrap();
        assert!(err <= 0.01, "sigma sup error {err}");
        assert!(rec.row_flags.iter().all(|f| f.is_empty()));
    }

    #[test]
    fn variance_slope_recovery_constant_sigma() {
        let model = gallery::ou(1.0, 0.5, 0.2, (-4.0, 4.0)).unwrap();
        let grid = Grid1D::new(-4.0, 4.0, 401, 0.1, 200).unwrap();
        let mean = solve_fk(&model, &Observable::identity(), &grid, &SolverOptions::default())
            .unwrap();
        let second =
            solve_fk(&model, &Observable::square(), &grid, &SolverOptions::default()).unwrap();
        let cfg = ObservationConfig::new(0.1, (-0.5, 0.5), 20, 25, ObsKind::V).unwrap();
        let obs = extract(
            Source::VarianceFields {
                mean: &mean,
                second: &second,
            },
            &cfg,
            &Observable::identity(),
        )
        .unwrap();
        let rec = recover_diffusion_variance_slope(&obs).unwrap();
        let err = rec.sigma_sup_error(|_| 0.2).unwrap();
        assert!(err <= 0.01, "variance-slope sigma error {err}");
    }

    #[test]
    fn joint_recovery_improves_a_perturbed_start() {
        let model = gallery::ou(1.0, 0.5, 0.2, (-4.0, 4.0)).unwrap();
        let grid = Grid1D::new(-1.0, 1.0, 101, 0.1, 40).unwrap();
        let field1 =
            solve_fk(&model, &Observable::identity(), &grid, &SolverOptions::default()).unwrap();
        let field2 =
            solve_fk(&model, &Observable::square(), &grid, &SolverOptions::default()).unwrap();
        let cfg1 = ObservationConfig::new(0.1, (-0.5, 0.5), 10, 10, ObsKind::K(1)).unwrap();
        let cfg2 = ObservationConfig::new(0.1, (-0.5, 0.5), 10, 10, ObsKind::K(2)).unwrap();
        let m1 = extract(Source::Field(&field1), &cfg1, &Observable::identity()).unwrap();
        let m2 = extract(Source::Field(&field2), &cfg2, &Observable::square()).unwrap();
        let node_xs: Vec<f64> = (0..7).map(|i| -0.6 + 0.2 * i as f64).collect();
        let opts = JointOptions {
            node_xs: node_xs.clone(),
            initial_b: node_xs.iter().map(|x| 0.5 - x + 0.1).collect(),
            initial_sigma: vec![0.25; 7],
            grid,
            work_interval: (-1.0, 1.0),
            sigma_floor: 1e-6,
            reg_weight: 1e-8,
            max_iters: 60,
        };
        let rec = recover_joint_global(&m1, &m2, &opts).unwrap();
        // Nodes outside the observation window are weakly determined;
        // judge the fit on the window interior.
        let b = rec.b_hat.as_ref().unwrap();
        let s = rec.sigma_hat.as_ref().unwrap();
        let mut berr: f64 = 0.0;
        let mut serr: f64 = 0.0;
        for (i, &x) in rec.x_nodes.iter().enumerate() {
            if x.abs() < 0.5 {
                berr = berr.max((b[i] - (0.5 - x)).abs());
                serr = serr.max((s[i] - 0.2).abs());
            }
        }
        assert!(berr <= 0.05, "joint drift error {berr}");
        assert!(serr <= 0.02, "joint sigma error {serr}");
    }

    #[test]
    fn perturb_sigma_sq_matches_target_inside_and_original_outside() {
        let model = gallery::ou(1.0, 0.5, 0.2, (-4.0, 4.0)).unwrap();
        let pert = perturb_sigma_sq(&model, 0.0, 0.2, 0.1).unwrap();
        for i in 0..=40 {
            let x = -0.25 + 0.0125 * i as f64;
            let bump = if x.abs() < 0.2 {
                let r = x / 0.2;
                0.1 * (1.0 - r * r).powi(2)
            } else {
                0.0
            };
            let target = (0.2f64 * 0.2 + bump).sqrt();
            assert!(
                (pert.diffusion.value(x) - target).abs() < 1e-6,
                "x = {x}: {} vs {target}",
                pert.diffusion.value(x)
            );
        }
        assert_eq!(pert.diffusion.value(1.5), 0.2);
        assert_eq!(pert.diffusion.value(-3.0), 0.2);
    }

    #[test]
    fn identical_models_are_not_distinguished() {
        let model = gallery::ou(1.0, 0.5, 0.2, (-4.0, 4.0)).unwrap();
        let grid = Grid1D::new(-4.0, 4.0, 401, 0.1, 200).unwrap();
        let cfg = ObservationConfig::new(0.1, (-0.5, 0.5), 20, 20, ObsKind::K(1)).unwrap();
        let rep = distinguishability_test(
            &model,
            &model.clone(),
            &Observable::identity(),
            &cfg,
            &DistinguishOptions::new(grid),
        )
        .unwrap();
        assert!(rep.sup_abs_u_diff <= 1e-12);
        assert_eq!(rep.verdict, Verdict::IdenticalWithinTol);
    }

    #[test]
    fn drift_bump_is_distinguished_and_slope_consistent() {
        let model = gallery::ou::<f64>(1.0, 0.5, 0.2, (-4.0, 4.0)).unwrap();
        let pert = perturb_drift(&model, 0.0, 0.2, 0.1).unwrap();
        let grid = Grid1D::new(-4.0, 4.0, 401, 0.1, 200).unwrap();
        let cfg = ObservationConfig::new(0.1, (-0.5, 0.5), 20, 20, ObsKind::K(1)).unwrap();
        let rep = distinguishability_test(
            &pert,
            &model,
            &Observable::identity(),
            &cfg,
            &DistinguishOptions::new(grid),
        )
        .unwrap();
        assert!(rep.is_distinguished(), "sup {}", rep.sup_abs_u_diff);
        assert!(rep.sup_abs_u_diff > 1e-3);
        assert!(
            rep.max_consistency_dev <= 1e-3,
            "consistency dev {}",
            rep.max_consistency_dev
        );
        // With f = s the prediction is the drift difference itself.
        for (x, p) in rep.xs.iter().zip(rep.predicted.iter()) {
            let r = x / 0.2;
            let bump = if x.abs() < 0.2 { 0.1 * (1.0 - r * r).powi(2) } else { 0.0 };
            assert!((p - bump).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma_bump_is_distinguished_with_square_observable() {
        let model = gallery::ou(1.0, 0.5, 0.2, (-4.0, 4.0)).unwrap();
        let pert = perturb_sigma_sq(&model, 0.0, 0.2, 0.1).unwrap();
        let grid = Grid1D::new(-4.0, 4.0, 401, 0.1, 200).unwrap();
        let cfg = ObservationConfig::new(0.1, (-0.5, 0.5), 20, 20, ObsKind::K(2)).unwrap();
        let rep = distinguishability_test(
            &pert,
            &model,
            &Observable::square(),
            &cfg,
            &DistinguishOptions::new(grid),
        )
        .unwrap();
        assert!(rep.is_distinguished(), "sup {}", rep.sup_abs_u_diff);
        assert!(
            rep.max_consistency_dev <= 1e-3,
            "consistency dev {}",
            rep.max_consistency_dev
        );
    }

    #[test]
    fn reconstruction_csv_has_expected_header() {
        let rec = ReconstructionResult::<f64> {
            method: "drift_short_time".into(),
            x_nodes: vec![0.0, 0.5],
            b_hat: Some(vec![0.5, 0.0]),
            sigma_hat: None,
            residuals: vec![1e-6, 2e-6],
            row_flags: vec![String::new(), "sigma_sq_clamped".into()],
            diagnostics: vec![],
        };
        let mut buf = Vec::new();
        write_reconstruction_csv(&rec, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x,b_hat,sigma_hat,residual,flags");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].contains("sigma_sq_clamped"));
    }
}
