//! Backward Kolmogorov (Feynman-Kac) solver:
//! `du/dt = 1/2 sigma^2(x) u_xx + b(x) u_x`, `u(0, x) = f(x)`,
//! discretized with Crank-Nicolson in time and second-order differences in
//! space on the truncated work interval.
//!
//! In monotone mode the first-derivative stencil switches to upwind at
//! nodes where `|b| h > sigma^2`, which keeps the spatial operator an
//! M-matrix and preserves the discrete maximum principle.

use crate::coefficients::SdeModel;
use crate::error::{Error, Result};
use crate::linalg::solve_tridiagonal;
use crate::observable::Observable;
use crate::scalar::Real;
use std::io::{Read, Write};
use std::sync::Arc;

/// Uniform space-time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid1D<R> {
    pub x_min: R,
    pub x_max: R,
    pub nx: usize,
    pub t_max: R,
    pub nt: usize,
}

impl<R: Real> Grid1D<R> {
    pub fn new(x_min: R, x_max: R, nx: usize, t_max: R, nt: usize) -> Result<Self> {
        if nx < 3 {
            return Err(Error::Usage("nx must be at least 3".into()));
        }
        if nt < 1 {
            return Err(Error::Usage("nt must be at least 1".into()));
        }
        if !(x_max > x_min) || !(t_max > R::zero()) {
            return Err(Error::Usage("grid extents must be positive".into()));
        }
        Ok(Grid1D {
            x_min,
            x_max,
            nx,
            t_max,
            nt,
        })
    }

    pub fn h(&self) -> R {
        (self.x_max - self.x_min) / R::from_usize(self.nx - 1).unwrap()
    }

    pub fn tau(&self) -> R {
        self.t_max / R::from_usize(self.nt).unwrap()
    }

    pub fn x(&self, j: usize) -> R {
        self.x_min + self.h() * R::from_usize(j).unwrap()
    }

    pub fn t(&self, k: usize) -> R {
        self.tau() * R::from_usize(k).unwrap()
    }

    pub fn xs(&self) -> Vec<R> {
        (0..self.nx).map(|j| self.x(j)).collect()
    }
}

/// Boundary condition at the truncation edges.
#[derive(Clone)]
pub enum BoundaryCondition<R> {
    /// Second-order extrapolation `u_xx = 0` at both ends (default); exact
    /// for affine far-field behavior.
    ZeroCurvature,
    /// Pin boundary values to `g(t, x)`; used with closed-form oracles.
    Dirichlet(Arc<dyn Fn(R, R) -> R + Send + Sync>),
}

impl<R> std::fmt::Debug for BoundaryCondition<R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BoundaryCondition::ZeroCurvature => f.write_str("ZeroCurvature"),
            BoundaryCondition::Dirichlet(_) => f.write_str("Dirichlet(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverOptions<R> {
    pub boundary: BoundaryCondition<R>,
    /// Switch to upwind first differences where `|b| h > sigma^2`.
    pub monotone: bool,
}

impl<R> Default for SolverOptions<R> {
    fn default() -> Self {
        SolverOptions {
            boundary: BoundaryCondition::ZeroCurvature,
            monotone: true,
        }
    }
}

/// Discretized `u(t, x)` with provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionField<R> {
    pub grid: Grid1D<R>,
    /// Row-major `(nt + 1) x nx`: `u[k * nx + j]`.
    pub u: Vec<R>,
    pub f_label: String,
    pub model_fingerprint: String,
}

impl<R: Real> SolutionField<R> {
    pub fn value(&self, t_index: usize, j: usize) -> R {
        self.u[t_index * self.grid.nx + j]
    }

    pub fn row(&self, t_index: usize) -> &[R] {
        &self.u[t_index * self.grid.nx..(t_index + 1) * self.grid.nx]
    }

    /// Bilinear interpolation inside the grid rectangle.
    pub fn interpolate(&self, t: R, x: R) -> Result<R> {
        let g = &self.grid;
        let slack = R::epsilon() * R::c(64.0);
        let t_slack = slack * g.t_max.max(R::one());
        let x_slack = slack * (g.x_max - g.x_min).max(R::one());
        if t < -t_slack || t > g.t_max + t_slack || x < g.x_min - x_slack || x > g.x_max + x_slack
        {
            return Err(Error::Usage(format!(
                "interpolation point (t={t}, x={x}) outside field coverage"
            )));
        }
        let t = t.max(R::zero()).min(g.t_max);
        let x = x.max(g.x_min).min(g.x_max);
        let tau = g.tau();
        let h = g.h();
        let kf = (t / tau).to_f64_lossy().floor() as usize;
        let k = kf.min(g.nt - 1).min(g.nt);
        let jf = ((x - g.x_min) / h).to_f64_lossy().floor() as usize;
        let j = jf.min(g.nx - 2);
        let wt = (t - g.t(k)) / tau;
        let wx = (x - g.x(j)) / h;
        let one = R::one();
        Ok(self.value(k, j) * (one - wt) * (one - wx)
            + self.value(k, j + 1) * (one - wt) * wx
            + self.value(k + 1, j) * wt * (one - wx)
            + self.value(k + 1, j + 1) * wt * wx)
    }

    /// Centered O(h^2) first and second differences at one time level;
    /// one-sided O(h^2) stencils at the edges.
    pub fn spatial_derivs(&self, t_index: usize) -> Result<(Vec<R>, Vec<R>)> {
        if t_index > self.grid.nt {
            return Err(Error::Usage(format!("t_index {t_index} out of range")));
        }
        let u = self.row(t_index);
        let nx = self.grid.nx;
        let h = self.grid.h();
        let h2 = h * h;
        let two = R::c(2.0);
        let mut du = vec![R::zero(); nx];
        let mut d2u = vec![R::zero(); nx];
        for j in 1..nx - 1 {
            du[j] = (u[j + 1] - u[j - 1]) / (two * h);
            d2u[j] = (u[j + 1] - two * u[j] + u[j - 1]) / h2;
        }
        du[0] = (-R::c(3.0) * u[0] + R::c(4.0) * u[1] - u[2]) / (two * h);
        du[nx - 1] = (R::c(3.0) * u[nx - 1] - R::c(4.0) * u[nx - 2] + u[nx - 3]) / (two * h);
        if nx >= 4 {
            d2u[0] =
                (two * u[0] - R::c(5.0) * u[1] + R::c(4.0) * u[2] - u[3]) / h2;
            d2u[nx - 1] = (two * u[nx - 1] - R::c(5.0) * u[nx - 2] + R::c(4.0) * u[nx - 3]
                - u[nx - 4])
                / h2;
        } else {
            d2u[0] = (u[0] - two * u[1] + u[2]) / h2;
            d2u[nx - 1] = d2u[0];
        }
        Ok((du, d2u))
    }

    /// One-sided O(tau^2) estimate of `du/dt(0, x_j)` per node.
    pub fn time_deriv_at_zero(&self) -> Result<Vec<R>> {
        if self.grid.nt < 2 {
            return Err(Error::Usage(
                "time_deriv_at_zero needs at least 2 time steps".into(),
            ));
        }
        let tau = self.grid.tau();
        let two = R::c(2.0);
        Ok((0..self.grid.nx)
            .map(|j| {
                (-R::c(3.0) * self.value(0, j) + R::c(4.0) * self.value(1, j)
                    - self.value(2, j))
                    / (two * tau)
            })
            .collect())
    }

    /// Binary dump: fixed header plus row-major little-endian f64 payload.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"FKFIELD1")?;
        w.write_all(&self.grid.x_min.to_f64_lossy().to_le_bytes())?;
        w.write_all(&self.grid.x_max.to_f64_lossy().to_le_bytes())?;
        w.write_all(&(self.grid.nx as u64).to_le_bytes())?;
        w.write_all(&self.grid.t_max.to_f64_lossy().to_le_bytes())?;
        w.write_all(&(self.grid.nt as u64).to_le_bytes())?;
        for s in [&self.f_label, &self.model_fingerprint] {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s.as_bytes())?;
        }
        for v in &self.u {
            w.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<Rd: Read>(mut r: Rd) -> Result<Self> {
        fn read_f64<Rd: Read>(r: &mut Rd) -> Result<f64> {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            Ok(f64::from_le_bytes(buf))
        }
        fn read_u64<Rd: Read>(r: &mut Rd) -> Result<u64> {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            Ok(u64::from_le_bytes(buf))
        }
        fn read_string<Rd: Read>(r: &mut Rd) -> Result<String> {
            let mut len = [0u8; 4];
            r.read_exact(&mut len)?;
            let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
            r.read_exact(&mut buf)?;
            String::from_utf8(buf).map_err(|_| Error::Parse("bad utf-8 in field dump".into()))
        }
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != b"FKFIELD1" {
            return Err(Error::Parse("bad field dump magic".into()));
        }
        let x_min = read_f64(&mut r)?;
        let x_max = read_f64(&mut r)?;
        let nx = read_u64(&mut r)? as usize;
        let t_max = read_f64(&mut r)?;
        let nt = read_u64(&mut r)? as usize;
        let f_label = read_string(&mut r)?;
        let model_fingerprint = read_string(&mut r)?;
        let grid = Grid1D::new(R::c(x_min), R::c(x_max), nx, R::c(t_max), nt)?;
        let mut u = Vec::with_capacity((nt + 1) * nx);
        for _ in 0..(nt + 1) * nx {
            u.push(R::c(read_f64(&mut r)?));
        }
        Ok(SolutionField {
            grid,
            u,
            f_label,
            model_fingerprint,
        })
    }

    /// CSV export with header `t,x,u`, t-major row order.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["t", "x", "u"]).map_err(crate::sde_sim::csv_err)?;
        for k in 0..=self.grid.nt {
            for j in 0..self.grid.nx {
                w.write_record([
                    format!("{}", self.grid.t(k)),
                    format!("{}", self.grid.x(j)),
                    format!("{}", self.value(k, j)),
                ])
                .map_err(crate::sde_sim::csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Solves the backward Kolmogorov equation for `E^x[f(X_t)]` on the grid.
pub fn solve_fk<R: Real>(
    model: &SdeModel<R>,
    f: &Observable<R>,
    grid: &Grid1D<R>,
    opts: &SolverOptions<R>,
) -> Result<SolutionField<R>> {
    let slack = R::epsilon() * R::c(64.0) * (model.work_interval.1 - model.work_interval.0);
    if grid.x_min < model.work_interval.0 - slack || grid.x_max > model.work_interval.1 + slack {
        return Err(Error::Usage(format!(
            "grid [{}, {}] exceeds model work interval [{}, {}]",
            grid.x_min, grid.x_max, model.work_interval.0, model.work_interval.1
        )));
    }
    let nx = grid.nx;
    let h = grid.h();
    let tau = grid.tau();
    let half = R::c(0.5);
    let two = R::c(2.0);

    // Spatial operator A as tridiagonal bands.
    let mut al = vec![R::zero(); nx];
    let mut ad = vec![R::zero(); nx];
    let mut au = vec![R::zero(); nx];
    let mut sigma_sq = vec![R::zero(); nx];
    let mut drift = vec![R::zero(); nx];
    for j in 0..nx {
        let x = grid.x(j);
        let s = model.diffusion.value(x);
        if !(s >= model.sigma_floor) {
            return Err(Error::Config(format!(
                "diffusion {s} below sigma_floor at grid node x = {x}"
            )));
        }
        sigma_sq[j] = s * s;
        drift[j] = model.drift.value(x);
    }
    for j in 1..nx - 1 {
        let a = half * sigma_sq[j];
        let b = drift[j];
        al[j] += a / (h * h);
        ad[j] -= two * a / (h * h);
        au[j] += a / (h * h);
        let peclet_violated = b.abs() * h > sigma_sq[j];
        if peclet_violated && !opts.monotone {
            return Err(Error::Config(format!(
                "Peclet violation at x = {} (|b| h = {} > sigma^2 = {}) with upwinding \
                 disabled; enable monotone mode or refine the grid",
                grid.x(j),
                b.abs() * h,
                sigma_sq[j]
            )));
        }
        if peclet_violated {
            if b >= R::zero() {
                ad[j] -= b / h;
                au[j] += b / h;
            } else {
                ad[j] += b / h;
                al[j] -= b / h;
            }
        } else {
            al[j] -= b / (two * h);
            au[j] += b / (two * h);
        }
    }
    let dirichlet = match &opts.boundary {
        BoundaryCondition::Dirichlet(g) => Some(g.clone()),
        BoundaryCondition::ZeroCurvature => None,
    };
    if dirichlet.is_none() {
        // Zero-curvature ghost elimination turns the boundary rows into pure
        // one-sided convection. In monotone mode an outflow row would break
        // the M-matrix sign pattern; those rows are frozen instead.
        let b0 = drift[0];
        if !opts.monotone || b0 >= R::zero() {
            ad[0] -= b0 / h;
            au[0] += b0 / h;
        }
        let bn = drift[nx - 1];
        if !opts.monotone || bn <= R::zero() {
            ad[nx - 1] += bn / h;
            al[nx - 1] -= bn / h;
        }
    }

    // Crank-Nicolson: (I - tau/2 A) u^{n+1} = (I + tau/2 A) u^n.
    let mut ll = vec![R::zero(); nx];
    let mut ld = vec![R::zero(); nx];
    let mut lu = vec![R::zero(); nx];
    for j in 0..nx {
        ll[j] = -half * tau * al[j];
        ld[j] = R::one() - half * tau * ad[j];
        lu[j] = -half * tau * au[j];
    }
    if dirichlet.is_some() {
        ll[0] = R::zero();
        ld[0] = R::one();
        lu[0] = R::zero();
        ll[nx - 1] = R::zero();
        ld[nx - 1] = R::one();
        lu[nx - 1] = R::zero();
    }

    let mut u = Vec::with_capacity((grid.nt + 1) * nx);
    for j in 0..nx {
        u.push(f.value(grid.x(j)));
    }
    let mut rhs = vec![R::zero(); nx];
    for k in 0..grid.nt {
        let prev = &u[k * nx..(k + 1) * nx];
        for j in 0..nx {
            let mut acc = prev[j] + half * tau * ad[j] * prev[j];
            if j > 0 {
                acc += half * tau * al[j] * prev[j - 1];
            }
            if j + 1 < nx {
                acc += half * tau * au[j] * prev[j + 1];
            }
            rhs[j] = acc;
        }
        if let Some(g) = &dirichlet {
            let t_next = grid.t(k + 1);
            rhs[0] = g(t_next, grid.x_min);
            rhs[nx - 1] = g(t_next, grid.x_max);
        }
        let next = solve_tridiagonal(&ll, &ld, &lu, &rhs)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite solution values at time step {}",
                k + 1
            )));
        }
        u.extend_from_slice(&next);
    }
    Ok(SolutionField {
        grid: grid.clone(),
        u,
        f_label: f.label(),
        model_fingerprint: model.fingerprint(),
    })
}
