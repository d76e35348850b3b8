//! Piecewise polynomial coefficient functions and the SDE model built from
//! them.
//!
//! A [`PiecewiseAnalyticFn`] is a Lipschitz function given by polynomial
//! pieces on half-open intervals `[k_j, k_{j+1})` between strictly
//! increasing breakpoints, with the first/last piece extended to the
//! unbounded tails. Pieces are capped-degree polynomials in the global
//! monomial basis, so evaluation and differentiation are exact.

use crate::error::{Error, Result};
use crate::scalar::Real;
use sha2::{Digest, Sha256};

/// Default cap on polynomial piece degree.
pub const DEFAULT_DEGREE_CAP: usize = 8;

/// Default lower bound enforced on diffusion coefficients.
pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-6;

/// Dense polynomial in the monomial basis: `c0 + c1 x + c2 x^2 + ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial<R> {
    coeffs: Vec<R>,
}

impl<R: Real> Polynomial<R> {
    pub fn new(mut coeffs: Vec<R>) -> Self {
        if coeffs.is_empty() {
            coeffs.push(R::zero());
        }
        Polynomial { coeffs }
    }

    pub fn constant(c: R) -> Self {
        Polynomial { coeffs: vec![c] }
    }

    pub fn coeffs(&self) -> &[R] {
        &self.coeffs
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    pub fn value(&self, x: R) -> R {
        let mut acc = R::zero();
        for &c in self.coeffs.iter().rev() {
            acc = acc * x + c;
        }
        acc
    }

    pub fn derivative(&self) -> Polynomial<R> {
        if self.coeffs.len() <= 1 {
            return Polynomial::constant(R::zero());
        }
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, &c)| c * R::from_usize(k).unwrap())
            .collect();
        Polynomial::new(coeffs)
    }

    pub fn add(&self, other: &Polynomial<R>) -> Polynomial<R> {
        let n = self.coeffs.len().max(other.coeffs.len());
        let mut coeffs = vec![R::zero(); n];
        for (i, &c) in self.coeffs.iter().enumerate() {
            coeffs[i] += c;
        }
        for (i, &c) in other.coeffs.iter().enumerate() {
            coeffs[i] += c;
        }
        Polynomial::new(coeffs)
    }
}

/// Result of a derivative evaluation; `at_breakpoint` is set when `x` hit a
/// breakpoint exactly and the right piece was used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivEval<R> {
    pub value: R,
    pub at_breakpoint: bool,
}

/// Member of the coefficient class: Lipschitz, piecewise polynomial.
///
/// `pieces.len() == breakpoints.len() + 1`; piece `j` is active on
/// `[breakpoints[j-1], breakpoints[j])`, with piece 0 covering the left
/// tail and the last piece the right tail.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseAnalyticFn<R> {
    breakpoints: Vec<R>,
    pieces: Vec<Polynomial<R>>,
    min_gap: R,
}

impl<R: Real> PiecewiseAnalyticFn<R> {
    pub fn new(breakpoints: Vec<R>, pieces: Vec<Polynomial<R>>, min_gap: R) -> Result<Self> {
        Self::with_degree_cap(breakpoints, pieces, min_gap, DEFAULT_DEGREE_CAP)
    }

    pub fn with_degree_cap(
        breakpoints: Vec<R>,
        pieces: Vec<Polynomial<R>>,
        min_gap: R,
        degree_cap: usize,
    ) -> Result<Self> {
        if pieces.len() != breakpoints.len() + 1 {
            return Err(Error::Usage(format!(
                "{} breakpoints require {} pieces, got {}",
                breakpoints.len(),
                breakpoints.len() + 1,
                pieces.len()
            )));
        }
        if !(min_gap > R::zero()) {
            return Err(Error::Usage("min_gap must be positive".into()));
        }
        for w in breakpoints.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::Usage(
                    "breakpoints must be strictly increasing".into(),
                ));
            }
        }
        if breakpoints.iter().any(|k| !k.is_finite()) {
            return Err(Error::Usage("breakpoints must be finite".into()));
        }
        for p in &pieces {
            if p.degree() > degree_cap {
                return Err(Error::Usage(format!(
                    "piece degree {} exceeds cap {}",
                    p.degree(),
                    degree_cap
                )));
            }
            if p.coeffs().iter().any(|c| !c.is_finite()) {
                return Err(Error::Usage("piece coefficients must be finite".into()));
            }
        }
        Ok(PiecewiseAnalyticFn {
            breakpoints,
            pieces,
            min_gap,
        })
    }

    /// A single polynomial on all of the real line.
    pub fn polynomial(coeffs: Vec<R>, min_gap: R) -> Self {
        PiecewiseAnalyticFn {
            breakpoints: Vec::new(),
            pieces: vec![Polynomial::new(coeffs)],
            min_gap,
        }
    }

    pub fn constant(c: R) -> Self {
        Self::polynomial(vec![c], R::one())
    }

    /// Piecewise-linear interpolant through `(xs[i], ys[i])`, extended by
    /// constants outside the node range.
    pub fn linear_interpolant(xs: &[R], ys: &[R]) -> Result<Self> {
        if xs.len() != ys.len() || xs.len() < 2 {
            return Err(Error::Usage(
                "linear interpolant needs at least two matching nodes".into(),
            ));
        }
        let mut pieces = Vec::with_capacity(xs.len() + 1);
        pieces.push(Polynomial::constant(ys[0]));
        for i in 0..xs.len() - 1 {
            let slope = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]);
            // y_i + slope (x - x_i)
            pieces.push(Polynomial::new(vec![ys[i] - slope * xs[i], slope]));
        }
        pieces.push(Polynomial::constant(ys[xs.len() - 1]));
        let min_gap = xs
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(R::infinity(), R::min)
            * R::c(0.5);
        Self::new(xs.to_vec(), pieces, min_gap)
    }

    /// Compactly supported C^1 bump `h (1 - ((x-c)/w)^2)^2` on
    /// `[c - w, c + w]`, zero outside.
    pub fn bump(center: R, half_width: R, height: R) -> Result<Self> {
        if !(half_width > R::zero()) {
            return Err(Error::Usage("bump half_width must be positive".into()));
        }
        // Expand h (1 - u^2)^2 with u = (x - c)/w into the global basis.
        let w2 = half_width * half_width;
        let a = -center; // x + a = x - c
        let two = R::c(2.0);
        // (x - c)^2 = x^2 + 2a x + a^2 ; (x - c)^4 coefficients via squaring.
        let q = [a * a, two * a, R::one()];
        let mut quart = [R::zero(); 5];
        for (i, &qi) in q.iter().enumerate() {
            for (j, &qj) in q.iter().enumerate() {
                quart[i + j] += qi * qj;
            }
        }
        let w4 = w2 * w2;
        let mut coeffs = vec![R::zero(); 5];
        coeffs[0] = height;
        for i in 0..3 {
            coeffs[i] -= two * height * q[i] / w2;
        }
        for i in 0..5 {
            coeffs[i] += height * quart[i] / w4;
        }
        let zero = Polynomial::constant(R::zero());
        Self::new(
            vec![center - half_width, center + half_width],
            vec![zero.clone(), Polynomial::new(coeffs), zero],
            half_width,
        )
    }

    /// Interpolates `f` by polynomial pieces of the given degree between the
    /// supplied cut points (Chebyshev-Lobatto nodes per piece, so adjacent
    /// pieces share their endpoint values). Tails extend the edge pieces.
    pub fn fit<F: Fn(R) -> R>(f: F, cuts: &[R], degree: usize) -> Result<Self> {
        if cuts.len() < 2 {
            return Err(Error::Usage("fit needs at least two cut points".into()));
        }
        if degree == 0 || degree > DEFAULT_DEGREE_CAP {
            return Err(Error::Usage(format!(
                "fit degree must be in 1..={DEFAULT_DEGREE_CAP}"
            )));
        }
        for w in cuts.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::Usage("cut points must be strictly increasing".into()));
            }
        }
        let cut_values: Vec<R> = cuts.iter().map(|&c| f(c)).collect();
        let mut pieces = Vec::with_capacity(cuts.len() + 1);
        let pi = R::c(std::f64::consts::PI);
        let nd = R::from_usize(degree).unwrap();
        for i in 0..cuts.len() - 1 {
            let (lo, hi) = (cuts[i], cuts[i + 1]);
            let mid = (lo + hi) * R::c(0.5);
            let half = (hi - lo) * R::c(0.5);
            // Lobatto nodes in the centered variable xi = x - mid.
            let mut nodes = Vec::with_capacity(degree + 1);
            let mut values = Vec::with_capacity(degree + 1);
            for k in 0..=degree {
                let theta = pi * R::from_usize(k).unwrap() / nd;
                let xi = -half * theta.cos();
                nodes.push(xi);
                if k == 0 {
                    values.push(cut_values[i]);
                } else if k == degree {
                    values.push(cut_values[i + 1]);
                } else {
                    values.push(f(mid + xi));
                }
            }
            let mut vander = Vec::with_capacity(degree + 1);
            for &xi in &nodes {
                let mut row = Vec::with_capacity(degree + 1);
                let mut p = R::one();
                for _ in 0..=degree {
                    row.push(p);
                    p *= xi;
                }
                vander.push(row);
            }
            let local = crate::linalg::solve_dense(vander, values)?;
            pieces.push(shift_basis(&local, mid));
        }
        // Tails reuse the edge pieces.
        pieces.insert(0, pieces[0].clone());
        pieces.push(pieces[pieces.len() - 1].clone());
        let min_gap = cuts
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(R::infinity(), R::min)
            * R::c(0.5);
        Self::new(cuts.to_vec(), pieces, min_gap)
    }

    pub fn breakpoints(&self) -> &[R] {
        &self.breakpoints
    }

    pub fn pieces(&self) -> &[Polynomial<R>] {
        &self.pieces
    }

    pub fn min_gap(&self) -> R {
        self.min_gap
    }

    /// Index of the piece active at `x` (half-open intervals `[k, k')`).
    fn piece_index(&self, x: R) -> usize {
        // partition_point: first breakpoint strictly greater than x.
        let mut lo = 0usize;
        let mut hi = self.breakpoints.len();
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.breakpoints[mid] <= x {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Evaluation without the finiteness check; callers must pass finite `x`.
    pub fn value(&self, x: R) -> R {
        self.pieces[self.piece_index(x)].value(x)
    }

    pub fn eval(&self, x: R) -> Result<R> {
        if !x.is_finite() {
            return Err(Error::Domain(format!("eval at non-finite x = {x}")));
        }
        Ok(self.value(x))
    }

    /// Derivative of the active piece; at a breakpoint the right piece is
    /// used and the result flagged.
    pub fn eval_deriv(&self, x: R, order: u8) -> Result<DerivEval<R>> {
        if order == 0 || order > 2 {
            return Err(Error::Usage(format!(
                "derivative order must be 1 or 2, got {order}"
            )));
        }
        if !x.is_finite() {
            return Err(Error::Domain(format!("eval_deriv at non-finite x = {x}")));
        }
        let idx = self.piece_index(x);
        let at_breakpoint = idx > 0 && self.breakpoints[idx - 1] == x;
        let mut p = self.pieces[idx].derivative();
        if order == 2 {
            p = p.derivative();
        }
        Ok(DerivEval {
            value: p.value(x),
            at_breakpoint,
        })
    }

    /// Pointwise sum; breakpoints are merged.
    pub fn add(&self, other: &PiecewiseAnalyticFn<R>) -> Result<Self> {
        let mut cuts: Vec<R> = self
            .breakpoints
            .iter()
            .chain(other.breakpoints.iter())
            .copied()
            .collect();
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup();
        let mut pieces = Vec::with_capacity(cuts.len() + 1);
        for i in 0..=cuts.len() {
            // A probe point inside the i-th merged interval.
            let probe = if cuts.is_empty() {
                R::zero()
            } else if i == 0 {
                cuts[0] - R::one()
            } else if i == cuts.len() {
                cuts[cuts.len() - 1]
            } else {
                (cuts[i - 1] + cuts[i]) * R::c(0.5)
            };
            let pa = &self.pieces[self.piece_index(probe)];
            let pb = &other.pieces[other.piece_index(probe)];
            pieces.push(pa.add(pb));
        }
        let min_gap = if cuts.len() < 2 {
            self.min_gap.min(other.min_gap)
        } else {
            cuts.windows(2)
                .map(|w| w[1] - w[0])
                .fold(R::infinity(), R::min)
                .min(self.min_gap.min(other.min_gap))
        };
        PiecewiseAnalyticFn::with_degree_cap(cuts, pieces, min_gap, DEFAULT_DEGREE_CAP)
    }

    /// Checks the class invariants and reports the Lipschitz constant on
    /// `interval`.
    pub fn validate(&self, interval: (R, R)) -> ValidationReport<R> {
        let mut gap_violations = Vec::new();
        for (i, w) in self.breakpoints.windows(2).enumerate() {
            let gap = w[1] - w[0];
            if gap < self.min_gap {
                gap_violations.push(GapViolation {
                    index: i,
                    left: w[0],
                    right: w[1],
                    gap,
                });
            }
        }
        let mut continuity_defects = Vec::new();
        // Evaluation of a monomial-basis polynomial at `k` is accurate to
        // about eps * sum_j |c_j| |k|^j, so the continuity tolerance has to
        // scale with that conditioning measure, not the function value.
        let cond = |p: &Polynomial<R>, k: R| {
            let mut s = R::zero();
            let mut pw = R::one();
            for &c in p.coeffs() {
                s += c.abs() * pw;
                pw *= k.abs();
            }
            s
        };
        for (i, &k) in self.breakpoints.iter().enumerate() {
            let left = self.pieces[i].value(k);
            let right = self.pieces[i + 1].value(k);
            let scale = cond(&self.pieces[i], k).max(cond(&self.pieces[i + 1], k));
            let jump = (left - right).abs();
            let tol = R::epsilon() * R::c(64.0) * scale.max(R::one());
            if jump > tol {
                continuity_defects.push(ContinuityDefect {
                    breakpoint: k,
                    jump,
                });
            }
        }
        ValidationReport {
            gap_violations,
            continuity_defects,
            lipschitz_constant: self.lipschitz_constant(interval),
        }
    }

    /// Sampled estimate of `sup |psi'|` over `interval`.
    pub fn lipschitz_constant(&self, interval: (R, R)) -> R {
        let (a, b) = interval;
        let n = 1024usize;
        let mut best = R::zero();
        for i in 0..=n {
            let x = a + (b - a) * R::from_usize(i).unwrap() / R::from_usize(n).unwrap();
            let idx = self.piece_index(x);
            best = best.max(self.pieces[idx].derivative().value(x).abs());
        }
        // Also probe just left of each interior breakpoint.
        for (i, &k) in self.breakpoints.iter().enumerate() {
            if k > a && k <= b {
                best = best.max(self.pieces[i].derivative().value(k).abs());
            }
        }
        best
    }

    /// One line per piece: `breakpoint_left coeff0 coeff1 ...`, preceded by
    /// a `# min_gap` header. The first piece's left edge is `-inf`.
    pub fn to_text(&self) -> String {
        let mut out = format!("# min_gap {}\n", self.min_gap);
        for (i, p) in self.pieces.iter().enumerate() {
            let left = if i == 0 {
                "-inf".to_string()
            } else {
                format!("{}", self.breakpoints[i - 1])
            };
            out.push_str(&left);
            for c in p.coeffs() {
                out.push(' ');
                out.push_str(&format!("{c}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut min_gap = R::c(1e-6);
        let mut breakpoints = Vec::new();
        let mut pieces = Vec::new();
        let mut first = true;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let mut it = rest.split_whitespace();
                if it.next() == Some("min_gap") {
                    let v = it
                        .next()
                        .ok_or_else(|| Error::Parse("min_gap header missing value".into()))?;
                    min_gap = parse_scalar(v)?;
                }
                continue;
            }
            let mut it = line.split_whitespace();
            let left = it
                .next()
                .ok_or_else(|| Error::Parse("empty piece line".into()))?;
            if first {
                if left != "-inf" {
                    return Err(Error::Parse(
                        "first piece must start with '-inf'".into(),
                    ));
                }
            } else {
                breakpoints.push(parse_scalar(left)?);
            }
            first = false;
            let coeffs: Result<Vec<R>> = it.map(parse_scalar).collect();
            pieces.push(Polynomial::new(coeffs?));
        }
        if pieces.is_empty() {
            return Err(Error::Parse("no pieces found".into()));
        }
        Self::new(breakpoints, pieces, min_gap)
    }
}

fn parse_scalar<R: Real>(s: &str) -> Result<R> {
    let v: f64 = s
        .parse()
        .map_err(|_| Error::Parse(format!("bad number '{s}'")))?;
    Ok(R::c(v))
}

/// Expands `sum a_j (x - mid)^j` into the global monomial basis via Horner
/// in the polynomial ring: `p <- p * (x - mid) + a_j`.
fn shift_basis<R: Real>(local: &[R], mid: R) -> Polynomial<R> {
    let n = local.len();
    let mut coeffs = vec![R::zero(); n];
    for &a in local.iter().rev() {
        let mut next = vec![R::zero(); n];
        for i in 0..n {
            if coeffs[i] != R::zero() {
                if i + 1 < n {
                    next[i + 1] += coeffs[i];
                }
                next[i] -= mid * coeffs[i];
            }
        }
        next[0] += a;
        coeffs = next;
    }
    Polynomial::new(coeffs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapViolation<R> {
    pub index: usize,
    pub left: R,
    pub right: R,
    pub gap: R,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuityDefect<R> {
    pub breakpoint: R,
    pub jump: R,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport<R> {
    pub gap_violations: Vec<GapViolation<R>>,
    pub continuity_defects: Vec<ContinuityDefect<R>>,
    pub lipschitz_constant: R,
}

impl<R: Real> ValidationReport<R> {
    pub fn is_valid(&self) -> bool {
        self.gap_violations.is_empty() && self.continuity_defects.is_empty()
    }
}

/// A drift/diffusion pair with the truncation interval the numerics use.
#[derive(Debug, Clone, PartialEq)]
pub struct SdeModel<R> {
    pub drift: PiecewiseAnalyticFn<R>,
    pub diffusion: PiecewiseAnalyticFn<R>,
    pub work_interval: (R, R),
    pub sigma_floor: R,
}

impl<R: Real> SdeModel<R> {
    pub fn new(
        drift: PiecewiseAnalyticFn<R>,
        diffusion: PiecewiseAnalyticFn<R>,
        work_interval: (R, R),
    ) -> Result<Self> {
        Self::with_sigma_floor(drift, diffusion, work_interval, R::c(DEFAULT_SIGMA_FLOOR))
    }

    pub fn with_sigma_floor(
        drift: PiecewiseAnalyticFn<R>,
        diffusion: PiecewiseAnalyticFn<R>,
        work_interval: (R, R),
        sigma_floor: R,
    ) -> Result<Self> {
        if !(work_interval.1 > work_interval.0) {
            return Err(Error::Usage("work_interval must be nonempty".into()));
        }
        if !(sigma_floor > R::zero()) {
            return Err(Error::Usage("sigma_floor must be positive".into()));
        }
        let model = SdeModel {
            drift,
            diffusion,
            work_interval,
            sigma_floor,
        };
        model.check_sigma_positive()?;
        Ok(model)
    }

    /// Sampled check of `sigma >= sigma_floor` over the work interval.
    fn check_sigma_positive(&self) -> Result<()> {
        let (a, b) = self.work_interval;
        let n = 2048usize;
        for i in 0..=n {
            let x = a + (b - a) * R::from_usize(i).unwrap() / R::from_usize(n).unwrap();
            let s = self.diffusion.value(x);
            if !(s >= self.sigma_floor) {
                return Err(Error::Usage(format!(
                    "diffusion {s} below sigma_floor {} at x = {x}",
                    self.sigma_floor
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: R) -> bool {
        x >= self.work_interval.0 && x <= self.work_interval.1
    }

    pub fn to_text(&self) -> String {
        format!(
            "work_interval {} {}\nsigma_floor {}\n[drift]\n{}[diffusion]\n{}",
            self.work_interval.0,
            self.work_interval.1,
            self.sigma_floor,
            self.drift.to_text(),
            self.diffusion.to_text()
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut work_interval = None;
        let mut sigma_floor = R::c(DEFAULT_SIGMA_FLOOR);
        let mut drift_text = String::new();
        let mut diffusion_text = String::new();
        let mut section = 0u8;
        for line in text.lines() {
            let t = line.trim();
            if t == "[drift]" {
                section = 1;
                continue;
            }
            if t == "[diffusion]" {
                section = 2;
                continue;
            }
            match section {
                0 => {
                    let mut it = t.split_whitespace();
                    match it.next() {
                        Some("work_interval") => {
                            let a = parse_scalar(it.next().ok_or_else(|| {
                                Error::Parse("work_interval missing values".into())
                            })?)?;
                            let b = parse_scalar(it.next().ok_or_else(|| {
                                Error::Parse("work_interval missing values".into())
                            })?)?;
                            work_interval = Some((a, b));
                        }
                        Some("sigma_floor") => {
                            sigma_floor = parse_scalar(it.next().ok_or_else(|| {
                                Error::Parse("sigma_floor missing value".into())
                            })?)?;
                        }
                        _ => {}
                    }
                }
                1 => {
                    drift_text.push_str(line);
                    drift_text.push('\n');
                }
                _ => {
                    diffusion_text.push_str(line);
                    diffusion_text.push('\n');
                }
            }
        }
        let work_interval = work_interval
            .ok_or_else(|| Error::Parse("model text missing work_interval".into()))?;
        Self::with_sigma_floor(
            PiecewiseAnalyticFn::from_text(&drift_text)?,
            PiecewiseAnalyticFn::from_text(&diffusion_text)?,
            work_interval,
            sigma_floor,
        )
    }

    /// SHA-256 of the text serialization; used to stamp solution fields.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_text().as_bytes());
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}
