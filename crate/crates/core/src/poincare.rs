//! Normal frames, the linear Poincaré flow, section maps, periodic orbits and
//! hyperbolicity of critical elements.
//!
//! The normal space at a regular point `x` is `N_x = X(x)^⊥`. The linear
//! Poincaré flow `Ψ_t` is the tangent flow followed by orthogonal projection
//! onto `N_{X_t(x)}`; it is represented in orthonormal frames of the normal
//! spaces, so matrices are frame-dependent while their singular values and
//! spectra are not.

use nalgebra::{Complex, DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::flow::{
    flow_at, flow_with_tangent, integrate, FlowError, IntegratorOptions, VectorFieldSpec,
};
use crate::linalg;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoincareError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("point is a singularity (|X(x)| = {norm:e})")]
    Singularity { norm: f64 },
    #[error("no crossing of the target section within [0, {t_max}]")]
    NoCrossing { t_max: f64 },
    #[error("tangential crossing of the section (|X·n|/|X| = {ratio:e})")]
    Tangential { ratio: f64 },
    #[error("point lies {distance} from the section base, outside radius {radius}")]
    OutsideSection { distance: f64, radius: f64 },
    #[error("point is not periodic: |X_T(p) - p| = {residual:e}")]
    NotPeriodic { residual: f64 },
    #[error("point is not a singularity: |X(x)| = {residual:e} after polishing")]
    NotSingularity { residual: f64 },
    #[error("return-map Jacobian is singular (smallest singular value of DP - I = {sigma_min:e}); a multiplier is 1")]
    NewtonSingular { sigma_min: f64 },
    #[error("Newton did not converge in {iterations} iterations (residual {residual:e})")]
    NewtonExhausted { iterations: usize, residual: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PoincareOptions {
    /// `|X(x)|` below this counts as a singularity.
    pub singular_threshold: f64,
    /// Radius of the affine normal discs used as sections.
    pub section_radius: f64,
    /// Minimum `|X·n| / |X|` at a section crossing.
    pub transversality: f64,
    /// Margin below which an eigenvalue or multiplier counts as neutral.
    pub hyperbolic_threshold: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub integrator: IntegratorOptions,
}

impl Default for PoincareOptions {
    fn default() -> Self {
        Self {
            singular_threshold: 1e-10,
            section_radius: 1.0,
            transversality: 1e-6,
            hyperbolic_threshold: 1e-6,
            newton_tol: 1e-9,
            newton_max_iter: 30,
            integrator: IntegratorOptions::with_tol(1e-12),
        }
    }
}

/// Orthonormal basis of `N_x` as the columns of an `n × (n−1)` matrix.
///
/// Gram–Schmidt of the standard basis against `X(x)`, dropping the basis
/// vector most aligned with the field. Deterministic in `x`.
pub fn normal_frame(
    spec: &VectorFieldSpec,
    x: &[f64],
    opts: &PoincareOptions,
) -> Result<DMatrix<f64>, PoincareError> {
    spec.check_dim(x)?;
    let n = spec.dim();
    let f = DVector::from_vec(spec.field(x));
    let norm = f.norm();
    if !(norm > opts.singular_threshold) {
        return Err(PoincareError::Singularity { norm });
    }
    let u = f / norm;
    let pivot = u.iamax();
    let mut basis: Vec<DVector<f64>> = vec![u];
    for j in (0..n).filter(|&j| j != pivot) {
        let mut v = DVector::zeros(n);
        v[j] = 1.0;
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let vn = v.norm();
        basis.push(v / vn);
    }
    let mut frame = DMatrix::zeros(n, n - 1);
    for (c, q) in basis.iter().skip(1).enumerate() {
        frame.set_column(c, q);
    }
    Ok(frame)
}

/// `Ψ_t` at `x` in the frames at `x` and `X_t(x)`.
#[derive(Clone, Debug)]
pub struct LinearPoincare {
    pub matrix: DMatrix<f64>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub frame_start: DMatrix<f64>,
    pub frame_end: DMatrix<f64>,
    /// `|DX_t X(x) − X(X_t x)| / (1 + |X(X_t x)|)`.
    pub direction_residual: f64,
    pub tangent: DMatrix<f64>,
}

pub fn linear_poincare(
    spec: &VectorFieldSpec,
    x: &[f64],
    t: f64,
    opts: &PoincareOptions,
) -> Result<LinearPoincare, PoincareError> {
    let frame_start = normal_frame(spec, x, opts)?;
    let (end, tangent) = flow_with_tangent(spec, x, t, &opts.integrator)?;
    let frame_end = normal_frame(spec, &end, opts)?;
    let matrix = frame_end.transpose() * &tangent * &frame_start;
    let fx = DVector::from_vec(spec.field(x));
    let fy = DVector::from_vec(spec.field(&end));
    let direction_residual = (&tangent * fx - &fy).norm() / (1.0 + fy.norm());
    Ok(LinearPoincare {
        matrix,
        start: x.to_vec(),
        end,
        frame_start,
        frame_end,
        direction_residual,
        tangent,
    })
}

/// Frames along an orbit plus the transitions realizing `Ψ` between them.
#[derive(Clone, Debug)]
pub struct NormalCocycle {
    spec: VectorFieldSpec,
    times: Vec<f64>,
    points: Vec<Vec<f64>>,
    frames: Vec<DMatrix<f64>>,
    transitions: Vec<DMatrix<f64>>,
}

impl NormalCocycle {
    /// Sample the orbit of `x` at `0, dt, …, steps·dt`.
    pub fn along_orbit(
        spec: &VectorFieldSpec,
        x: &[f64],
        dt: f64,
        steps: usize,
        opts: &PoincareOptions,
    ) -> Result<Self, PoincareError> {
        assert!(dt > 0.0 && steps > 0);
        let mut times = vec![0.0];
        let mut points = vec![x.to_vec()];
        let mut frames = vec![normal_frame(spec, x, opts)?];
        let mut transitions = Vec::with_capacity(steps);
        for k in 0..steps {
            let (next, tangent) = flow_with_tangent(spec, &points[k], dt, &opts.integrator)?;
            let frame = normal_frame(spec, &next, opts)?;
            transitions.push(frame.transpose() * tangent * &frames[k]);
            frames.push(frame);
            points.push(next);
            times.push((k + 1) as f64 * dt);
        }
        Ok(Self {
            spec: spec.clone(),
            times,
            points,
            frames,
            transitions,
        })
    }

    pub fn spec(&self) -> &VectorFieldSpec {
        &self.spec
    }

    /// Number of samples (one more than the number of transitions).
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn fiber_dim(&self) -> usize {
        self.spec.dim() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.points[k]
    }

    pub fn frame(&self, k: usize) -> &DMatrix<f64> {
        &self.frames[k]
    }

    pub fn transition(&self, k: usize) -> &DMatrix<f64> {
        &self.transitions[k]
    }

    /// `Ψ` from sample `k0` to sample `k1 ≥ k0`.
    pub fn product(&self, k0: usize, k1: usize) -> DMatrix<f64> {
        assert!(k0 <= k1 && k1 < self.len());
        let d = self.fiber_dim();
        let mut m = DMatrix::identity(d, d);
        for k in k0..k1 {
            m = &self.transitions[k] * m;
        }
        m
    }

    /// Same cocycle expressed in rotated frames `F_k R_k`.
    pub fn with_frames_rotated(&self, rotations: &[DMatrix<f64>]) -> Self {
        assert_eq!(rotations.len(), self.len());
        let frames = self
            .frames
            .iter()
            .zip(rotations)
            .map(|(f, r)| f * r)
            .collect();
        let transitions = self
            .transitions
            .iter()
            .enumerate()
            .map(|(k, p)| rotations[k + 1].transpose() * p * &rotations[k])
            .collect();
        Self {
            spec: self.spec.clone(),
            times: self.times.clone(),
            points: self.points.clone(),
            frames,
            transitions,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SectionCrossing {
    pub image: Vec<f64>,
    pub time: f64,
    /// `τ ∈ (2t/3, 4t/3)` for the hint `t`.
    pub valid: bool,
}

/// First crossing of the flow of `y` through the affine disc at `base`
/// normal to `normal`, searched in `[0.05·t_hint, 2·t_hint]`.
fn cross_section(
    spec: &VectorFieldSpec,
    y: &[f64],
    base: &[f64],
    normal: &DVector<f64>,
    t_hint: f64,
    opts: &PoincareOptions,
) -> Result<SectionCrossing, PoincareError> {
    let t_max = 2.0 * t_hint;
    let traj = integrate(spec, y, (0.0, t_max), &opts.integrator)?;
    let g = |s: f64| -> (f64, Vec<f64>) {
        let p = traj.eval(s).expect("within trajectory range");
        let d = spec.difference(&p, base);
        (d.iter().zip(normal.iter()).map(|(a, b)| a * b).sum(), p)
    };
    let s_start = 0.05 * t_hint;
    // scan accepted steps with interior probes no further apart than t_hint/16
    let mut knots: Vec<f64> = vec![s_start];
    for &tk in traj.times() {
        if tk > s_start {
            knots.push(tk);
        }
    }
    let mut probes = Vec::with_capacity(knots.len() * 4);
    let max_gap = t_hint / 16.0;
    for w in knots.windows(2) {
        let m = ((w[1] - w[0]) / max_gap).ceil().max(4.0) as usize;
        for j in 0..m {
            probes.push(w[0] + (w[1] - w[0]) * j as f64 / m as f64);
        }
    }
    probes.push(t_max);
    let (mut s_prev, mut g_prev) = (probes[0], g(probes[0]).0);
    for &s in &probes[1..] {
        let (gs, p) = g(s);
        if g_prev < 0.0 && gs >= 0.0 {
            let within = spec.distance(&p, base) <= opts.section_radius
                || spec.distance(&g(s_prev).1, base) <= opts.section_radius;
            if within {
                let (mut lo, mut hi) = (s_prev, s);
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    if g(mid).0 < 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo < 1e-15 * (1.0 + hi) {
                        break;
                    }
                }
                let time = 0.5 * (lo + hi);
                let image = traj.eval(time).expect("within trajectory range");
                if spec.distance(&image, base) <= opts.section_radius {
                    let fz = DVector::from_vec(spec.field(&image));
                    let ratio = fz.dot(normal).abs() / fz.norm().max(f64::MIN_POSITIVE);
                    if ratio < opts.transversality {
                        return Err(PoincareError::Tangential { ratio });
                    }
                    return Ok(SectionCrossing {
                        image,
                        time,
                        valid: time > 2.0 * t_hint / 3.0 && time < 4.0 * t_hint / 3.0,
                    });
                }
            }
        }
        s_prev = s;
        g_prev = gs;
    }
    Err(PoincareError::NoCrossing { t_max })
}

fn unit_field(
    spec: &VectorFieldSpec,
    x: &[f64],
    opts: &PoincareOptions,
) -> Result<DVector<f64>, PoincareError> {
    let f = DVector::from_vec(spec.field(x));
    let norm = f.norm();
    if !(norm > opts.singular_threshold) {
        return Err(PoincareError::Singularity { norm });
    }
    Ok(f / norm)
}

/// The Poincaré map `f_{x,t}`: from the section at `x` to the section at
/// `X_t(x)`, applied to `y`.
pub fn section_map(
    spec: &VectorFieldSpec,
    x: &[f64],
    y: &[f64],
    t_hint: f64,
    opts: &PoincareOptions,
) -> Result<SectionCrossing, PoincareError> {
    spec.check_dim(y)?;
    let dist = spec.distance(x, y);
    if dist > opts.section_radius {
        return Err(PoincareError::OutsideSection {
            distance: dist,
            radius: opts.section_radius,
        });
    }
    unit_field(spec, x, opts)?;
    let target = flow_at(spec, x, t_hint, &opts.integrator)?;
    let normal = unit_field(spec, &target, opts)?;
    cross_section(spec, y, &target, &normal, t_hint, opts)
}

/// First return of `y` to the section through `base`.
pub fn first_return(
    spec: &VectorFieldSpec,
    base: &[f64],
    y: &[f64],
    t_hint: f64,
    opts: &PoincareOptions,
) -> Result<SectionCrossing, PoincareError> {
    let normal = unit_field(spec, base, opts)?;
    cross_section(spec, y, base, &normal, t_hint, opts)
}

/// Derivative of the hitting map `y ↦ X_{τ(y)}(y)` onto the hyperplane with
/// unit normal `normal`, in ambient coordinates.
fn hitting_derivative(
    spec: &VectorFieldSpec,
    y: &[f64],
    tau: f64,
    normal: &DVector<f64>,
    opts: &PoincareOptions,
) -> Result<DMatrix<f64>, PoincareError> {
    let (z, tangent) = flow_with_tangent(spec, y, tau, &opts.integrator)?;
    let fz = DVector::from_vec(spec.field(&z));
    let denom = fz.dot(normal);
    let n = spec.dim();
    let proj = DMatrix::identity(n, n) - (&fz * normal.transpose()) / denom;
    Ok(proj * tangent)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PeriodicOrbit {
    pub point: Vec<f64>,
    pub period: f64,
    /// Newton updates performed.
    pub iterations: usize,
    /// `|f(p_k) − p_k|` before each update and at the end.
    pub residuals: Vec<f64>,
}

/// Newton iteration on the first-return map of the section through `x_guess`.
pub fn find_periodic_newton(
    spec: &VectorFieldSpec,
    x_guess: &[f64],
    t_guess: f64,
    opts: &PoincareOptions,
) -> Result<PeriodicOrbit, PoincareError> {
    let frame = normal_frame(spec, x_guess, opts)?;
    let normal = unit_field(spec, x_guess, opts)?;
    let d = frame.ncols();
    let mut w = DVector::zeros(d);
    let mut t_hint = t_guess;
    let mut residuals = Vec::new();
    let point_of = |w: &DVector<f64>| -> Vec<f64> {
        let off = &frame * w;
        x_guess.iter().zip(off.iter()).map(|(a, b)| a + b).collect()
    };
    for iter in 0..=opts.newton_max_iter {
        let y = point_of(&w);
        let cross = first_return(spec, x_guess, &y, t_hint, opts)?;
        let diff = DVector::from_vec(spec.difference(&cross.image, x_guess));
        let pw = frame.transpose() * diff;
        let r = &pw - &w;
        let res = r.norm();
        residuals.push(res);
        t_hint = cross.time;
        if res <= opts.newton_tol {
            return Ok(PeriodicOrbit {
                point: y,
                period: cross.time,
                iterations: iter,
                residuals,
            });
        }
        if iter == opts.newton_max_iter {
            break;
        }
        let dp =
            frame.transpose() * hitting_derivative(spec, &y, cross.time, &normal, opts)? * &frame;
        let a = dp - DMatrix::identity(d, d);
        let sv = a.singular_values();
        let (smin, smax) = (sv.min(), sv.max());
        if smin < 1e-6 * smax.max(1.0) {
            return Err(PoincareError::NewtonSingular { sigma_min: smin });
        }
        let step = a
            .lu()
            .solve(&(-r))
            .ok_or(PoincareError::NewtonSingular { sigma_min: smin })?;
        w += step;
    }
    Err(PoincareError::NewtonExhausted {
        iterations: opts.newton_max_iter,
        residual: *residuals.last().unwrap_or(&f64::NAN),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticalKind {
    Singularity,
    Periodic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Eigenvalue {
    pub re: f64,
    pub im: f64,
}

impl Eigenvalue {
    pub fn modulus(&self) -> f64 {
        self.re.hypot(self.im)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CriticalElementReport {
    pub kind: CriticalKind,
    pub location: Vec<f64>,
    pub period: Option<f64>,
    /// Jacobian eigenvalues (singularity) or Floquet multipliers of `Ψ_T`
    /// (periodic orbit), sorted.
    pub spectrum: Vec<Eigenvalue>,
    /// `|Re λ|` or `||μ| − 1|`, aligned with `spectrum`.
    pub margins: Vec<f64>,
    pub threshold: f64,
    pub hyperbolic: bool,
    /// Number of stable eigenvalues / multipliers.
    pub index: usize,
    /// Stable-manifold dimension counting the orbit direction (periodic only).
    pub index_with_flow_direction: Option<usize>,
}

fn eigen_sorted(m: &DMatrix<f64>, key: impl Fn(&Complex<f64>) -> f64) -> Vec<Eigenvalue> {
    let mut ev: Vec<Complex<f64>> = m.complex_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| {
        key(a)
            .partial_cmp(&key(b))
            .unwrap()
            .then(a.im.partial_cmp(&b.im).unwrap())
    });
    ev.into_iter()
        .map(|c| Eigenvalue { re: c.re, im: c.im })
        .collect()
}

/// Polish a root of the field and classify it by the real parts of the
/// Jacobian eigenvalues.
pub fn classify_singularity(
    spec: &VectorFieldSpec,
    x: &[f64],
    opts: &PoincareOptions,
) -> Result<CriticalElementReport, PoincareError> {
    spec.check_dim(x)?;
    let mut p = DVector::from_column_slice(x);
    for _ in 0..20 {
        let f = DVector::from_vec(spec.field(p.as_slice()));
        if f.norm() < 1e-14 {
            break;
        }
        let jac = spec.jacobian(p.as_slice());
        let step = jac
            .svd(true, true)
            .solve(&f, 1e-12)
            .unwrap_or_else(|_| DVector::zeros(x.len()));
        p -= step;
    }
    let residual = DVector::from_vec(spec.field(p.as_slice())).norm();
    if !(residual <= 1e-8) {
        return Err(PoincareError::NotSingularity { residual });
    }
    let jac = spec.jacobian(p.as_slice());
    let spectrum = eigen_sorted(&jac, |c| c.re);
    let margins: Vec<f64> = spectrum.iter().map(|e| e.re.abs()).collect();
    let hyperbolic = margins.iter().all(|&m| m > opts.hyperbolic_threshold);
    let index = spectrum.iter().filter(|e| e.re < 0.0).count();
    Ok(CriticalElementReport {
        kind: CriticalKind::Singularity,
        location: p.as_slice().to_vec(),
        period: None,
        spectrum,
        margins,
        threshold: opts.hyperbolic_threshold,
        hyperbolic,
        index,
        index_with_flow_direction: None,
    })
}

/// Floquet multipliers of `Ψ_T` at `p` and the hyperbolicity verdict.
pub fn classify_periodic(
    spec: &VectorFieldSpec,
    p: &[f64],
    period: f64,
    opts: &PoincareOptions,
) -> Result<CriticalElementReport, PoincareError> {
    let lp = linear_poincare(spec, p, period, opts)?;
    let residual = spec.distance(&lp.end, p);
    if !(residual <= 1e-8) {
        return Err(PoincareError::NotPeriodic { residual });
    }
    let spectrum = eigen_sorted(&lp.matrix, |c| c.norm());
    let margins: Vec<f64> = spectrum.iter().map(|e| (e.modulus() - 1.0).abs()).collect();
    let hyperbolic = margins.iter().all(|&m| m > opts.hyperbolic_threshold);
    let index = spectrum.iter().filter(|e| e.modulus() < 1.0).count();
    Ok(CriticalElementReport {
        kind: CriticalKind::Periodic,
        location: p.to_vec(),
        period: Some(period),
        spectrum,
        margins,
        threshold: opts.hyperbolic_threshold,
        hyperbolic,
        index,
        index_with_flow_direction: Some(index + 1),
    })
}

/// Frame-invariant check used by tests and reports: largest deviation of
/// `FᵀF` from the identity and of `FᵀX` from zero.
pub fn frame_defect(spec: &VectorFieldSpec, x: &[f64], frame: &DMatrix<f64>) -> f64 {
    let d = frame.ncols();
    let gram = frame.transpose() * frame - DMatrix::identity(d, d);
    let f = DVector::from_vec(spec.field(x));
    let ortho = frame.transpose() * (&f / f.norm());
    gram.amax().max(ortho.amax())
}

/// Spectral norm of `Ψ` restricted to the span of the orthonormal columns `q`.
pub fn restricted_norm(psi: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    linalg::spectral_norm(&(psi * q))
}

/// Conorm (minimum expansion) of `Ψ` restricted to the span of `q`.
pub fn restricted_conorm(psi: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    linalg::conorm(&(psi * q))
}
