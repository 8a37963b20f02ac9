//! Vector fields on Euclidean charts and their flows.
//!
//! Points are plain `f64` slices. Some coordinates may be periodic (angles);
//! [`VectorFieldSpec::difference`] and [`VectorFieldSpec::distance`] take the
//! shortest arc on those, everything else is Euclidean.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type FieldFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
pub type JacobianFn = dyn Fn(&[f64], &mut DMatrix<f64>) + Send + Sync;
pub type ScalarFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("state escaped the chart at t = {time} (norm {norm:e})")]
    Divergence { time: f64, norm: f64 },
    #[error("step budget of {0} steps exhausted")]
    StepBudget(usize),
    #[error("invalid time span [{0}, {1}]")]
    BadSpan(f64, f64),
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("time {t} outside trajectory range [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },
    #[error("point has dimension {got}, field expects {expected}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordKind {
    Linear,
    Angle { period: f64 },
}

/// A scalar first integral `Q` with a Lipschitz bound.
#[derive(Clone)]
pub struct ConservedQuantity {
    pub name: String,
    func: Arc<ScalarFn>,
    pub lipschitz: f64,
    /// Radius of the ball about the origin on which `Q` is invariant.
    /// `None` means invariant everywhere.
    pub valid_radius: Option<f64>,
}

impl ConservedQuantity {
    pub fn new(
        name: impl Into<String>,
        lipschitz: f64,
        func: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            func: Arc::new(func),
            lipschitz,
            valid_radius: None,
        }
    }

    pub fn valid_within(mut self, radius: f64) -> Self {
        self.valid_radius = Some(radius);
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.func)(x)
    }
}

impl fmt::Debug for ConservedQuantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConservedQuantity")
            .field("name", &self.name)
            .field("lipschitz", &self.lipschitz)
            .field("valid_radius", &self.valid_radius)
            .finish()
    }
}

/// A flow generator: field, Jacobian, coordinate kinds, optional first integral.
#[derive(Clone)]
pub struct VectorFieldSpec {
    name: String,
    dim: usize,
    coord_kinds: Vec<CoordKind>,
    field: Arc<FieldFn>,
    jacobian: Arc<JacobianFn>,
    conserved: Option<ConservedQuantity>,
}

impl fmt::Debug for VectorFieldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorFieldSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("coord_kinds", &self.coord_kinds)
            .field("conserved", &self.conserved)
            .finish()
    }
}

impl VectorFieldSpec {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        field: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        jacobian: impl Fn(&[f64], &mut DMatrix<f64>) + Send + Sync + 'static,
    ) -> Self {
        assert!(dim > 0, "vector field dimension must be positive");
        Self {
            name: name.into(),
            dim,
            coord_kinds: vec![CoordKind::Linear; dim],
            field: Arc::new(field),
            jacobian: Arc::new(jacobian),
            conserved: None,
        }
    }

    /// `ẋ = A x`.
    pub fn linear(name: impl Into<String>, a: DMatrix<f64>) -> Self {
        assert!(a.is_square());
        let n = a.nrows();
        let a_field = a.clone();
        Self::new(
            name,
            n,
            move |x, out| {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..n).map(|j| a_field[(i, j)] * x[j]).sum();
                }
            },
            move |_, jac| jac.copy_from(&a),
        )
    }

    pub fn with_angle(mut self, coord: usize, period: f64) -> Self {
        assert!(coord < self.dim && period > 0.0);
        self.coord_kinds[coord] = CoordKind::Angle { period };
        self
    }

    pub fn with_conserved(mut self, q: ConservedQuantity) -> Self {
        self.conserved = Some(q);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coord_kinds(&self) -> &[CoordKind] {
        &self.coord_kinds
    }

    pub fn conserved(&self) -> Option<&ConservedQuantity> {
        self.conserved.as_ref()
    }

    pub fn field_into(&self, x: &[f64], out: &mut [f64]) {
        (self.field)(x, out)
    }

    pub fn field(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.field_into(x, &mut out);
        out
    }

    pub fn jacobian_into(&self, x: &[f64], out: &mut DMatrix<f64>) {
        (self.jacobian)(x, out)
    }

    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        self.jacobian_into(x, &mut out);
        out
    }

    pub fn check_dim(&self, x: &[f64]) -> Result<(), FlowError> {
        if x.len() == self.dim {
            Ok(())
        } else {
            Err(FlowError::Dimension {
                expected: self.dim,
                got: x.len(),
            })
        }
    }

    /// `a - b` with angle coordinates reduced to the shortest arc.
    pub fn difference(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(b)
            .zip(&self.coord_kinds)
            .map(|((&ai, &bi), kind)| wrap(ai - bi, *kind))
            .collect()
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.coord_kinds)
            .map(|((&ai, &bi), kind)| wrap(ai - bi, *kind).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Norm over the non-periodic coordinates only.
    pub fn chart_norm(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.coord_kinds)
            .filter(|(_, k)| matches!(k, CoordKind::Linear))
            .map(|(v, _)| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Largest relative deviation between the analytic Jacobian and central
    /// differences of the field, scaled by `1 + row norm`.
    pub fn jacobian_fd_error(&self, x: &[f64], h: f64) -> f64 {
        let n = self.dim;
        let jac = self.jacobian(x);
        let mut worst = 0.0f64;
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        let mut fd = DMatrix::zeros(n, n);
        for j in 0..n {
            xp[j] = x[j] + h;
            xm[j] = x[j] - h;
            self.field_into(&xp, &mut fp);
            self.field_into(&xm, &mut fm);
            for i in 0..n {
                fd[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
            xp[j] = x[j];
            xm[j] = x[j];
        }
        for i in 0..n {
            let row_norm = jac.row(i).norm();
            for j in 0..n {
                worst = worst.max((jac[(i, j)] - fd[(i, j)]).abs() / (1.0 + row_norm));
            }
        }
        worst
    }
}

fn wrap(d: f64, kind: CoordKind) -> f64 {
    match kind {
        CoordKind::Linear => d,
        CoordKind::Angle { period } => d - period * (d / period).round(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorOptions {
    /// Absolute and relative local error tolerance per step.
    pub tol: f64,
    /// Divergence guard on the chart norm of the state.
    pub max_norm: f64,
    pub max_steps: usize,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_norm: 1e6,
            max_steps: 2_000_000,
        }
    }
}

impl IntegratorOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

// Dormand–Prince 5(4) tableau (autonomous fields, so the nodes c_i are unused).
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// Continuous extension.
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Raw output of the stepper: accepted times/states plus five dense-output
/// coefficient vectors per step.
#[derive(Clone, Debug)]
pub(crate) struct DenseSolution {
    pub n: usize,
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    pub coeffs: Vec<f64>,
}

impl DenseSolution {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.n..(k + 1) * self.n]
    }

    pub fn t0(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    fn forward(&self) -> bool {
        self.t_end() >= self.t0()
    }

    fn contains(&self, t: f64) -> bool {
        let (lo, hi) = self.bounds();
        let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
        t >= lo - slack && t <= hi + slack
    }

    pub fn bounds(&self) -> (f64, f64) {
        let (a, b) = (self.t0(), self.t_end());
        (a.min(b), a.max(b))
    }

    fn locate(&self, t: f64) -> usize {
        let steps = self.steps();
        if steps == 0 {
            return 0;
        }
        let k = if self.forward() {
            self.times.partition_point(|&s| s <= t)
        } else {
            self.times.partition_point(|&s| s >= t)
        };
        k.saturating_sub(1).min(steps - 1)
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let n = self.n;
        if self.steps() == 0 {
            out.copy_from_slice(self.state(0));
            return;
        }
        let k = self.locate(t);
        let h = self.times[k + 1] - self.times[k];
        let theta = (t - self.times[k]) / h;
        let base = k * 5 * n;
        let r = &self.coeffs[base..base + 5 * n];
        let omt = 1.0 - theta;
        for i in 0..n {
            out[i] = r[i]
                + theta
                    * (r[n + i]
                        + omt * (r[2 * n + i] + theta * (r[3 * n + i] + omt * r[4 * n + i])));
        }
    }
}

/// Adaptive Dormand–Prince integration of `ẏ = rhs(y)` from `t0` to `t1`.
///
/// `guard` maps a state to the norm checked against `opts.max_norm`.
/// Returns the solution up to the last accepted step and the error that
/// stopped it early, if any.
pub(crate) fn dopri5(
    mut rhs: impl FnMut(&[f64], &mut [f64]),
    guard: impl Fn(&[f64]) -> f64,
    y0: &[f64],
    t0: f64,
    t1: f64,
    opts: &IntegratorOptions,
) -> (DenseSolution, Option<FlowError>) {
    let n = y0.len();
    let mut sol = DenseSolution {
        n,
        times: vec![t0],
        states: y0.to_vec(),
        coeffs: Vec::new(),
    };
    if t1 == t0 {
        return (sol, None);
    }
    let dir = (t1 - t0).signum();
    let span = (t1 - t0).abs();
    let (atol, rtol) = (opts.tol, opts.tol);

    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut err = vec![0.0; n];
    rhs(&y, &mut k1);

    let scale = |y: &[f64], i: usize| atol + rtol * y[i].abs();
    let d0 = (0..n)
        .map(|i| (y[i] / scale(&y, i)).powi(2))
        .sum::<f64>()
        .sqrt()
        / (n as f64).sqrt();
    let d1 = (0..n)
        .map(|i| (k1[i] / scale(&y, i)).powi(2))
        .sum::<f64>()
        .sqrt()
        / (n as f64).sqrt();
    let mut h = if d0 < 1e-5 || d1 < 1e-5 {
        1e-4
    } else {
        0.01 * d0 / d1
    };
    h = h.min(span).max(1e-12 * span);

    let mut t = t0;
    let mut steps = 0usize;
    let mut last_rejected = false;
    loop {
        if steps >= opts.max_steps {
            return (sol, Some(FlowError::StepBudget(opts.max_steps)));
        }
        steps += 1;
        let remaining = (t1 - t).abs();
        let mut last = false;
        if h >= remaining * (1.0 - 1e-12) {
            h = remaining;
            last = true;
        }
        let hs = dir * h;

        for i in 0..n {
            ytmp[i] = y[i] + hs * A21 * k1[i];
        }
        rhs(&ytmp, &mut k2);
        for i in 0..n {
            ytmp[i] = y[i] + hs * (A31 * k1[i] + A32 * k2[i]);
        }
        rhs(&ytmp, &mut k3);
        for i in 0..n {
            ytmp[i] = y[i] + hs * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        rhs(&ytmp, &mut k4);
        for i in 0..n {
            ytmp[i] = y[i] + hs * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        rhs(&ytmp, &mut k5);
        for i in 0..n {
            ytmp[i] =
                y[i] + hs * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        rhs(&ytmp, &mut k6);
        for i in 0..n {
            ynew[i] =
                y[i] + hs * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        rhs(&ynew, &mut k7);
        for i in 0..n {
            err[i] =
                hs * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
        let mut e2 = 0.0;
        for i in 0..n {
            let sc = atol + rtol * y[i].abs().max(ynew[i].abs());
            e2 += (err[i] / sc).powi(2);
        }
        let enorm = (e2 / n as f64).sqrt();
        if !enorm.is_finite() {
            return (
                sol,
                Some(FlowError::Divergence {
                    time: t,
                    norm: f64::INFINITY,
                }),
            );
        }

        if enorm <= 1.0 {
            // dense output coefficients
            let base = sol.coeffs.len();
            sol.coeffs.resize(base + 5 * n, 0.0);
            let r = &mut sol.coeffs[base..];
            for i in 0..n {
                let ydiff = ynew[i] - y[i];
                let bspl = hs * k1[i] - ydiff;
                r[i] = y[i];
                r[n + i] = ydiff;
                r[2 * n + i] = bspl;
                r[3 * n + i] = ydiff - hs * k7[i] - bspl;
                r[4 * n + i] = hs
                    * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
            }
            t = if last { t1 } else { t + hs };
            std::mem::swap(&mut y, &mut ynew);
            std::mem::swap(&mut k1, &mut k7);
            sol.times.push(t);
            sol.states.extend_from_slice(&y);

            let norm = guard(&y);
            if !norm.is_finite() || norm > opts.max_norm {
                return (sol, Some(FlowError::Divergence { time: t, norm }));
            }
            if last {
                return (sol, None);
            }
            let mut fac = 0.9 * enorm.powf(-0.2);
            fac = fac.clamp(0.2, 10.0);
            if last_rejected {
                fac = fac.min(1.0);
            }
            h *= fac;
            last_rejected = false;
        } else {
            let fac = (0.9 * enorm.powf(-0.2)).max(0.2);
            h *= fac;
            last_rejected = true;
            if h < 1e-14 * (1.0 + t.abs()) {
                return (
                    sol,
                    Some(FlowError::Divergence {
                        time: t,
                        norm: guard(&y),
                    }),
                );
            }
        }
    }
}

/// A dense-output solution of the flow starting at `x0`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    spec: VectorFieldSpec,
    x0: Vec<f64>,
    sol: DenseSolution,
    tol: f64,
}

impl Trajectory {
    pub fn spec(&self) -> &VectorFieldSpec {
        &self.spec
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    /// Accepted step times, in integration order.
    pub fn times(&self) -> &[f64] {
        &self.sol.times
    }

    pub fn state(&self, k: usize) -> &[f64] {
        self.sol.state(k)
    }

    pub fn steps(&self) -> usize {
        self.sol.steps()
    }

    /// Covered time interval `(lo, hi)`.
    pub fn bounds(&self) -> (f64, f64) {
        self.sol.bounds()
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>, FlowError> {
        let mut out = vec![0.0; self.x0.len()];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<(), FlowError> {
        if !self.sol.contains(t) {
            let (lo, hi) = self.bounds();
            return Err(FlowError::OutOfRange { t, lo, hi });
        }
        if t == self.sol.t0() {
            out.copy_from_slice(&self.x0);
            return Ok(());
        }
        self.sol.eval_into(t, out);
        Ok(())
    }
}

fn validate(
    spec: &VectorFieldSpec,
    x0: &[f64],
    t0: f64,
    t1: f64,
    tol: f64,
) -> Result<(), FlowError> {
    spec.check_dim(x0)?;
    if !t0.is_finite() || !t1.is_finite() {
        return Err(FlowError::BadSpan(t0, t1));
    }
    if !(tol > 0.0) {
        return Err(FlowError::BadTolerance(tol));
    }
    Ok(())
}

/// Integrate the flow over `t_span = (t0, t1)`; `t1 < t0` integrates backward.
pub fn integrate(
    spec: &VectorFieldSpec,
    x0: &[f64],
    t_span: (f64, f64),
    opts: &IntegratorOptions,
) -> Result<Trajectory, FlowError> {
    let (traj, err) = integrate_until_escape(spec, x0, t_span, opts)?;
    match err {
        Some(e) => Err(e),
        None => Ok(traj),
    }
}

/// Like [`integrate`], but keeps the part of the trajectory computed before
/// the divergence guard (or step budget) stopped it.
pub fn integrate_until_escape(
    spec: &VectorFieldSpec,
    x0: &[f64],
    t_span: (f64, f64),
    opts: &IntegratorOptions,
) -> Result<(Trajectory, Option<FlowError>), FlowError> {
    let (t0, t1) = t_span;
    validate(spec, x0, t0, t1, opts.tol)?;
    let (sol, err) = dopri5(
        |y, out| spec.field_into(y, out),
        |y| spec.chart_norm(y),
        x0,
        t0,
        t1,
        opts,
    );
    Ok((
        Trajectory {
            spec: spec.clone(),
            x0: x0.to_vec(),
            sol,
            tol: opts.tol,
        },
        err,
    ))
}

/// `X_t(x)`; negative `t` flows backward.
pub fn flow_at(
    spec: &VectorFieldSpec,
    x: &[f64],
    t: f64,
    opts: &IntegratorOptions,
) -> Result<Vec<f64>, FlowError> {
    validate(spec, x, 0.0, t, opts.tol)?;
    if t == 0.0 {
        return Ok(x.to_vec());
    }
    let (sol, err) = dopri5(
        |y, out| spec.field_into(y, out),
        |y| spec.chart_norm(y),
        x,
        0.0,
        t,
        opts,
    );
    match err {
        Some(e) => Err(e),
        None => Ok(sol.state(sol.steps()).to_vec()),
    }
}

/// `(X_t(x), D_x X_t)` from the variational equation `V̇ = DX(X_s(x)) V`.
pub fn flow_with_tangent(
    spec: &VectorFieldSpec,
    x: &[f64],
    t: f64,
    opts: &IntegratorOptions,
) -> Result<(Vec<f64>, DMatrix<f64>), FlowError> {
    validate(spec, x, 0.0, t, opts.tol)?;
    let n = spec.dim();
    if t == 0.0 {
        return Ok((x.to_vec(), DMatrix::identity(n, n)));
    }
    let mut y0 = x.to_vec();
    let id = DMatrix::<f64>::identity(n, n);
    y0.extend_from_slice(id.as_slice());
    let mut jac = DMatrix::zeros(n, n);
    let rhs = |y: &[f64], out: &mut [f64]| {
        let (base, var) = y.split_at(n);
        spec.field_into(base, &mut out[..n]);
        spec.jacobian_into(base, &mut jac);
        let dv = &mut out[n..];
        // column-major: V[(i, j)] = var[j * n + i]
        for j in 0..n {
            let col = &var[j * n..(j + 1) * n];
            for i in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += jac[(i, k)] * col[k];
                }
                dv[j * n + i] = s;
            }
        }
    };
    let (sol, err) = dopri5(rhs, |y| spec.chart_norm(&y[..n]), &y0, 0.0, t, opts);
    if let Some(e) = err {
        return Err(e);
    }
    let end = sol.state(sol.steps());
    Ok((
        end[..n].to_vec(),
        DMatrix::from_column_slice(n, n, &end[n..]),
    ))
}

/// `D_x X_t`.
pub fn tangent_flow(
    spec: &VectorFieldSpec,
    x: &[f64],
    t: f64,
    opts: &IntegratorOptions,
) -> Result<DMatrix<f64>, FlowError> {
    flow_with_tangent(spec, x, t, opts).map(|(_, m)| m)
}
