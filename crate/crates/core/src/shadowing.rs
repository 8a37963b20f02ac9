//! ε-shadowing of pseudo-orbits by true orbits under reparametrization.
//!
//! A pseudo-orbit is ε-shadowed if some orbit `X_{h(t)}(y)` with an
//! increasing `h`, `h(0) = 0`, stays within ε of the concatenation `x_0 * t`.
//! Reparametrizations here are piecewise linear with bounded slopes.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::flow::{
    flow_at, flow_with_tangent, integrate_until_escape, FlowError, IntegratorOptions, Trajectory,
    VectorFieldSpec,
};
use crate::pseudo_orbit::{ConcatCache, PseudoOrbit, PseudoOrbitError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShadowingError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    PseudoOrbit(#[from] PseudoOrbitError),
    #[error("the vector field `{0}` has no conserved quantity")]
    NoConservedQuantity(String),
    #[error("invalid reparametrization: {0}")]
    BadReparam(String),
    #[error("horizon [{lo}, {hi}] is not inside the covered range of the pseudo-orbit")]
    BadHorizon { lo: f64, hi: f64 },
    #[error("grids need at least 2 points")]
    BadGrid,
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("multiple shooting could not reduce the residual {residual:e}")]
    ShootingFailed { residual: f64 },
    #[error("witness orbit covers [{lo}, {hi}] but [{want_lo}, {want_hi}] is needed")]
    WitnessTooShort {
        lo: f64,
        hi: f64,
        want_lo: f64,
        want_hi: f64,
    },
}

/// Increasing piecewise-linear `h` through `(0, 0)`, extended linearly.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Reparametrization {
    knots: Vec<(f64, f64)>,
}

impl Reparametrization {
    pub fn new(
        knots: Vec<(f64, f64)>,
        slope_min: f64,
        slope_max: f64,
    ) -> Result<Self, ShadowingError> {
        let bad = |m: String| Err(ShadowingError::BadReparam(m));
        if knots.len() < 2 {
            return bad("need at least two knots".into());
        }
        if !knots.iter().any(|&(s, u)| s == 0.0 && u == 0.0) {
            return bad("knots must include (0, 0)".into());
        }
        for w in knots.windows(2) {
            let (ds, du) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            if !(ds > 0.0) || !(du > 0.0) {
                return bad(format!(
                    "knots must be strictly increasing at s = {}",
                    w[0].0
                ));
            }
            let slope = du / ds;
            if slope < slope_min * (1.0 - 1e-9) || slope > slope_max * (1.0 + 1e-9) {
                return bad(format!(
                    "slope {slope} at s = {} outside [{slope_min}, {slope_max}]",
                    w[0].0
                ));
            }
        }
        Ok(Self { knots })
    }

    pub fn identity() -> Self {
        Self {
            knots: vec![(0.0, 0.0), (1.0, 1.0)],
        }
    }

    pub fn linear(slope: f64) -> Result<Self, ShadowingError> {
        if !(slope > 0.0 && slope.is_finite()) {
            return Err(ShadowingError::BadReparam(format!(
                "slope {slope} must be positive"
            )));
        }
        Ok(Self {
            knots: vec![(0.0, 0.0), (1.0, slope)],
        })
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    fn piece(&self, s: f64) -> usize {
        let k = &self.knots;
        match k.partition_point(|&(ks, _)| ks <= s) {
            0 => 0,
            p if p >= k.len() => k.len() - 2,
            p => p - 1,
        }
    }

    pub fn eval(&self, s: f64) -> f64 {
        let j = self.piece(s);
        let (s0, u0) = self.knots[j];
        u0 + self.slope_of(j) * (s - s0)
    }

    fn slope_of(&self, j: usize) -> f64 {
        let (s0, u0) = self.knots[j];
        let (s1, u1) = self.knots[j + 1];
        (u1 - u0) / (s1 - s0)
    }

    /// Slope of the piece containing `s` (right derivative at knots).
    pub fn slope_at(&self, s: f64) -> f64 {
        self.slope_of(self.piece(s))
    }

    pub fn is_identity(&self) -> bool {
        (0..self.knots.len() - 1).all(|j| self.slope_of(j) == 1.0) && self.eval(0.0) == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WitnessNode {
    pub time: f64,
    pub point: Vec<f64>,
}

/// A true orbit, either as `X_u(y)` or by shooting nodes `(u_i, z_i)` with
/// `X_{u − u_i}(z_i)` on `[u_i, u_{i+1}]` (matching up to the Newton residual).
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OrbitWitness {
    Point { y: Vec<f64> },
    Nodes { nodes: Vec<WitnessNode> },
}

impl OrbitWitness {
    /// The orbit relabelled by `u ↦ u + c`.
    pub fn shifted(
        &self,
        spec: &VectorFieldSpec,
        c: f64,
        opts: &IntegratorOptions,
    ) -> Result<Self, ShadowingError> {
        Ok(match self {
            OrbitWitness::Point { y } => OrbitWitness::Point {
                y: flow_at(spec, y, c, opts)?,
            },
            OrbitWitness::Nodes { nodes } => OrbitWitness::Nodes {
                nodes: nodes
                    .iter()
                    .map(|n| WitnessNode {
                        time: n.time - c,
                        point: n.point.clone(),
                    })
                    .collect(),
            },
        })
    }

    /// The orbit's state at `u = 0`.
    pub fn point_at_zero(
        &self,
        spec: &VectorFieldSpec,
        opts: &IntegratorOptions,
    ) -> Result<Vec<f64>, ShadowingError> {
        match self {
            OrbitWitness::Point { y } => Ok(y.clone()),
            OrbitWitness::Nodes { nodes } => {
                let i = nodes.iter().rposition(|n| n.time <= 0.0).unwrap_or(0);
                Ok(flow_at(spec, &nodes[i].point, -nodes[i].time, opts)?)
            }
        }
    }

    /// The orbit's states at the parameters `us`.
    pub fn sample(
        &self,
        spec: &VectorFieldSpec,
        us: &[f64],
        opts: &IntegratorOptions,
    ) -> Result<Vec<Vec<f64>>, ShadowingError> {
        if us.is_empty() {
            return Ok(Vec::new());
        }
        let lo = us.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = us.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let orbit = OrbitEval::new(spec, self, (lo, hi), opts)?;
        us.iter()
            .map(|&u| {
                if orbit.covers(u) {
                    Ok(orbit.eval(u)?)
                } else {
                    Err(FlowError::OutOfRange {
                        t: u,
                        lo: orbit.lo,
                        hi: orbit.hi,
                    }
                    .into())
                }
            })
            .collect()
    }
}

/// Dense evaluation of a witness orbit over a parameter span.
struct OrbitEval {
    starts: Vec<f64>,
    forward: Vec<Trajectory>,
    backward: Option<(f64, Trajectory)>,
    lo: f64,
    hi: f64,
}

impl OrbitEval {
    fn new(
        spec: &VectorFieldSpec,
        w: &OrbitWitness,
        span: (f64, f64),
        opts: &IntegratorOptions,
    ) -> Result<Self, ShadowingError> {
        let (lo, hi) = span;
        let nodes: Vec<(f64, &[f64])> = match w {
            OrbitWitness::Point { y } => vec![(0.0, y.as_slice())],
            OrbitWitness::Nodes { nodes } => {
                nodes.iter().map(|n| (n.time, n.point.as_slice())).collect()
            }
        };
        let mut starts = Vec::new();
        let mut forward = Vec::new();
        let mut cov_hi = nodes[0].0;
        for (i, &(u, z)) in nodes.iter().enumerate() {
            let end = if i + 1 < nodes.len() {
                nodes[i + 1].0
            } else {
                hi.max(u)
            };
            let (traj, err) = integrate_until_escape(spec, z, (0.0, end - u), opts)?;
            cov_hi = u + traj.bounds().1;
            starts.push(u);
            forward.push(traj);
            if err.is_some() {
                break;
            }
        }
        let u0 = nodes[0].0;
        let (backward, cov_lo) = if lo < u0 {
            let (traj, _) = integrate_until_escape(spec, nodes[0].1, (0.0, lo - u0), opts)?;
            let b = u0 + traj.bounds().0;
            (Some((u0, traj)), b)
        } else {
            (None, u0)
        };
        Ok(Self {
            starts,
            forward,
            backward,
            lo: cov_lo,
            hi: cov_hi,
        })
    }

    fn covers(&self, u: f64) -> bool {
        u >= self.lo && u <= self.hi
    }

    fn eval(&self, u: f64) -> Result<Vec<f64>, FlowError> {
        if let Some((u0, b)) = &self.backward {
            if u < *u0 {
                return b.eval(u - u0);
            }
        }
        let i = self.starts.partition_point(|&s| s <= u).saturating_sub(1);
        let local = (u - self.starts[i]).min(self.forward[i].bounds().1);
        self.forward[i].eval(local.max(0.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ShadowOptions {
    pub slope_min: f64,
    pub slope_max: f64,
    pub integrator: IntegratorOptions,
}

impl Default for ShadowOptions {
    fn default() -> Self {
        Self {
            slope_min: 0.1,
            slope_max: 10.0,
            integrator: IntegratorOptions::with_tol(1e-10),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ShadowDistance {
    /// Largest distance seen on the grid.
    pub sampled_max: f64,
    /// Grid maximum inflated by per-interval bounds from `‖X‖` and `‖DX‖`.
    pub upper_bound: f64,
    pub argmax_time: f64,
    pub grid_points: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_horizon(po: &PseudoOrbit, horizon: (f64, f64)) -> Result<(), ShadowingError> {
    let (lo, hi) = po.time_range();
    if !(horizon.0 < horizon.1 && horizon.0 >= lo && horizon.1 <= hi) {
        return Err(ShadowingError::BadHorizon {
            lo: horizon.0,
            hi: horizon.1,
        });
    }
    Ok(())
}

fn distance_with(
    cache: &ConcatCache,
    orbit: &OrbitEval,
    h: &Reparametrization,
    horizon: (f64, f64),
    samples: usize,
) -> Result<ShadowDistance, ShadowingError> {
    let po = cache.pseudo_orbit();
    let spec = po.spec();
    let (a, b) = horizon;
    let samples = samples.max(2);
    let mut grid: Vec<f64> = (0..samples)
        .map(|k| a + (b - a) * k as f64 / (samples - 1) as f64)
        .collect();
    let (i_a, _) = po.locate(a)?;
    let (i_b, _) = po.locate(b)?;
    for i in i_a + 1..=i_b {
        grid.push(po.accumulated_time(i)?);
    }
    grid.extend(h.knots().iter().map(|k| k.0).filter(|&s| s > a && s < b));
    grid.sort_by(|x, y| x.partial_cmp(y).unwrap());
    grid.dedup_by(|x, y| (*x - *y).abs() <= 1e-12 * (1.0 + y.abs()));
    *grid.last_mut().unwrap() = b;
    grid[0] = a;

    let (u_lo, u_hi) = (h.eval(a), h.eval(b));
    if !orbit.covers(u_lo) || !orbit.covers(u_hi) {
        return Err(ShadowingError::WitnessTooShort {
            lo: orbit.lo,
            hi: orbit.hi,
            want_lo: u_lo,
            want_hi: u_hi,
        });
    }
    let orbit_pts: Vec<Vec<f64>> = grid
        .iter()
        .map(|&t| orbit.eval(h.eval(t)))
        .collect::<Result<_, _>>()?;
    let mut jac_max: f64 = 0.0;
    for p in &orbit_pts {
        jac_max = jac_max.max(spec.jacobian(p).norm());
    }
    let jac_max = 1.1 * jac_max;
    let mut out = ShadowDistance {
        sampled_max: 0.0,
        upper_bound: 0.0,
        argmax_time: a,
        grid_points: grid.len(),
    };
    for k in 0..grid.len() - 1 {
        let (t0, t1) = (grid[k], grid[k + 1]);
        let dt = t1 - t0;
        let (i, s_i) = {
            let (i, _) = po.locate(0.5 * (t0 + t1))?;
            (i, po.accumulated_time(i)?)
        };
        let p0 = cache.eval_segment(i, t0 - s_i)?;
        let p1 = cache.eval_segment(i, t1 - s_i)?;
        let (o0, o1) = (&orbit_pts[k], &orbit_pts[k + 1]);
        let d0 = spec.distance(o0, &p0);
        let d1 = spec.distance(o1, &p1);
        for (d, t) in [(d0, t0), (d1, t1)] {
            if d > out.sampled_max || d.is_nan() {
                out.sampled_max = d;
                out.argmax_time = t;
            }
        }
        let slope = h.slope_at(0.5 * (t0 + t1));
        let v_orbit = 1.1 * norm(&spec.field(o0)).max(norm(&spec.field(o1)));
        let v_pseudo = 1.1 * norm(&spec.field(&p0)).max(norm(&spec.field(&p1)));
        let m = d0.max(d1);
        let by_speed = m + (slope * v_orbit + v_pseudo) * dt / 2.0;
        let by_gronwall =
            (m + (slope - 1.0).abs() * v_orbit * dt / 2.0) * (jac_max * dt / 2.0).exp();
        out.upper_bound = out.upper_bound.max(by_speed.min(by_gronwall));
    }
    Ok(out)
}

/// `sup_t d(X_{h(t)}(y), x_0 * t)` over `horizon`, sampled on a grid that
/// contains every segment boundary and knot of `h`, with a per-interval
/// inflation term.
pub fn shadow_distance(
    witness: &OrbitWitness,
    h: &Reparametrization,
    po: &PseudoOrbit,
    horizon: (f64, f64),
    samples: usize,
    opts: &ShadowOptions,
) -> Result<ShadowDistance, ShadowingError> {
    check_horizon(po, horizon)?;
    let cache = ConcatCache::new(po, &opts.integrator)?;
    let orbit = OrbitEval::new(
        po.spec(),
        witness,
        (h.eval(horizon.0), h.eval(horizon.1)),
        &opts.integrator,
    )?;
    distance_with(&cache, &orbit, h, horizon, samples)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BestReparam {
    pub h: Reparametrization,
    /// The witness relabelled so that `h(0) = 0`.
    pub witness: OrbitWitness,
    /// Discrete Fréchet distance of the two sample sequences.
    pub dp_distance: f64,
    pub distance: ShadowDistance,
}

/// Discrete Fréchet coupling with free start and end on the second sequence.
/// Returns the distance and, for each `i` of the first, the matched `j`s.
fn frechet_open(
    p: &[Vec<f64>],
    q: &[Vec<f64>],
    spec: &VectorFieldSpec,
) -> (f64, Vec<(usize, usize)>) {
    let (m, k) = (p.len(), q.len());
    // 0 = diagonal, 1 = advance p, 2 = advance q, 3 = start
    let mut pred = vec![0u8; m * k];
    let mut prev = vec![0.0; k];
    let mut cur = vec![0.0; k];
    for i in 0..m {
        for j in 0..k {
            let d = spec.distance(&p[i], &q[j]);
            // a fresh start on q is never worse for the first p sample
            let (best, from) = if i == 0 {
                (d, 3)
            } else {
                let mut cand = (prev[j], 1u8);
                if j > 0 {
                    if prev[j - 1] <= cand.0 {
                        cand = (prev[j - 1], 0);
                    }
                    if cur[j - 1] < cand.0 {
                        cand = (cur[j - 1], 2);
                    }
                }
                (d.max(cand.0), cand.1)
            };
            cur[j] = best;
            pred[i * k + j] = from;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (mut j, best) =
        prev.iter().enumerate().fold(
            (0, f64::INFINITY),
            |acc, (j, &v)| if v < acc.1 { (j, v) } else { acc },
        );
    let mut i = m - 1;
    let mut path = vec![(i, j)];
    loop {
        match pred[i * k + j] {
            3 => break,
            0 => {
                i -= 1;
                j -= 1;
            }
            1 => i -= 1,
            _ => j -= 1,
        }
        path.push((i, j));
    }
    path.reverse();
    (best, path)
}

#[allow(clippy::too_many_arguments)]
fn best_reparam_with(
    cache: &ConcatCache,
    witness: &OrbitWitness,
    horizon: (f64, f64),
    m: usize,
    k: usize,
    span: Option<(f64, f64)>,
    opts: &ShadowOptions,
    check_samples: usize,
) -> Result<BestReparam, ShadowingError> {
    if m < 2 || k < 2 {
        return Err(ShadowingError::BadGrid);
    }
    let po = cache.pseudo_orbit();
    let spec = po.spec();
    let (a, b) = horizon;
    let len = b - a;
    let span = span.unwrap_or((a - len / 2.0, b + len / 2.0));
    let orbit = OrbitEval::new(spec, witness, span, &opts.integrator)?;
    let (lo, hi) = (span.0.max(orbit.lo), span.1.min(orbit.hi));
    if !(hi > lo) {
        return Err(ShadowingError::WitnessTooShort {
            lo: orbit.lo,
            hi: orbit.hi,
            want_lo: span.0,
            want_hi: span.1,
        });
    }
    let ts: Vec<f64> = (0..m)
        .map(|i| a + len * i as f64 / (m - 1) as f64)
        .collect();
    let us: Vec<f64> = (0..k)
        .map(|j| lo + (hi - lo) * j as f64 / (k - 1) as f64)
        .collect();
    let p: Vec<Vec<f64>> = ts
        .iter()
        .map(|&t| cache.eval(t))
        .collect::<Result<_, _>>()?;
    let q: Vec<Vec<f64>> = us
        .iter()
        .map(|&u| orbit.eval(u))
        .collect::<Result<_, _>>()?;
    let (dp_distance, path) = frechet_open(&p, &q, spec);

    let mut sum = vec![0.0; m];
    let mut cnt = vec![0usize; m];
    for &(i, j) in &path {
        sum[i] += us[j];
        cnt[i] += 1;
    }
    let dt = len / (m - 1) as f64;
    let mut u = Vec::with_capacity(m);
    for i in 0..m {
        let target = sum[i] / cnt[i] as f64;
        let v = if i == 0 {
            target
        } else {
            let prev: f64 = u[i - 1];
            target.clamp(prev + opts.slope_min * dt, prev + opts.slope_max * dt)
        };
        u.push(v);
    }
    // shift so that h(0) = 0
    let raw = Reparametrization {
        knots: ts.iter().copied().zip(u.iter().copied()).collect(),
    };
    let c = raw.eval(0.0);
    let mut knots: Vec<(f64, f64)> = ts.iter().zip(&u).map(|(&t, &v)| (t, v - c)).collect();
    match knots
        .iter()
        .position(|&(t, _)| t.abs() <= 1e-12 * (1.0 + len))
    {
        Some(z) => knots[z] = (0.0, 0.0),
        None => {
            let pos = knots.partition_point(|&(t, _)| t < 0.0);
            knots.insert(pos, (0.0, 0.0));
        }
    }
    let h = Reparametrization::new(knots, opts.slope_min, opts.slope_max)?;
    let shifted = witness.shifted(spec, c, &opts.integrator)?;
    let orbit = OrbitEval::new(spec, &shifted, (h.eval(a), h.eval(b)), &opts.integrator)?;
    let distance = distance_with(cache, &orbit, &h, horizon, check_samples)?;
    Ok(BestReparam {
        h,
        witness: shifted,
        dp_distance,
        distance,
    })
}

/// Best monotone matching of `M` pseudo-orbit samples on `horizon` with `K`
/// orbit samples, turned into a reparametrization and re-measured.
///
/// `span` is the orbit parameter range to sample; it defaults to the horizon
/// widened by half its length on both sides and is cut where the orbit
/// leaves the integrator's range.
pub fn best_reparam(
    witness: &OrbitWitness,
    po: &PseudoOrbit,
    horizon: (f64, f64),
    m: usize,
    k: usize,
    span: Option<(f64, f64)>,
    opts: &ShadowOptions,
) -> Result<BestReparam, ShadowingError> {
    check_horizon(po, horizon)?;
    let cache = ConcatCache::new(po, &opts.integrator)?;
    best_reparam_with(&cache, witness, horizon, m, k, span, opts, 4 * m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Shadowed,
    NotFound,
    Refuted,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Witness {
    /// State of the shadowing orbit at reparametrized time 0.
    pub y: Vec<f64>,
    pub orbit: OrbitWitness,
    pub h: Reparametrization,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RefutationCertificate {
    pub quantity: String,
    pub lipschitz: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// Chain indices attaining the extremes.
    pub argmin_index: i64,
    pub argmax_index: i64,
    pub lower_bound: f64,
    pub epsilon: f64,
    pub valid_radius: Option<f64>,
    pub justification: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SearchStats {
    pub horizon: (f64, f64),
    pub grid_candidates: usize,
    pub local_evaluations: usize,
    pub local_converged: bool,
    pub shooting_iterations: Option<usize>,
    pub shooting_residual: Option<f64>,
    pub best_stage: String,
    pub budget_exhausted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShadowingReport {
    pub verdict: Verdict,
    pub epsilon: f64,
    pub witness: Option<Witness>,
    /// Upper bound on the sup-distance of the best candidate.
    pub achieved_distance: Option<f64>,
    pub sampled_distance: Option<f64>,
    pub lower_bound: Option<f64>,
    pub certificate: Option<RefutationCertificate>,
    pub statistics: Option<SearchStats>,
    pub note: String,
}

impl ShadowingReport {
    /// Upgrade a non-shadowed report to `refuted` when a certificate exists.
    pub fn with_refutation(mut self, cert: Option<RefutationCertificate>) -> Self {
        if let Some(c) = cert {
            if self.verdict != Verdict::Shadowed && c.lower_bound > self.epsilon {
                self.verdict = Verdict::Refuted;
                self.lower_bound = Some(c.lower_bound);
                self.note = format!(
                    "refuted: every orbit and reparametrization stays at distance >= {} from the chain somewhere ({})",
                    c.lower_bound, c.justification
                );
                self.certificate = Some(c);
            }
        }
        self
    }
}

/// Axis-aligned box of candidate initial points.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SeedBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        Self { lo, hi }
    }

    /// Cube of half-width `r` about `center`.
    pub fn around(center: &[f64], r: f64) -> Self {
        Self {
            lo: center.iter().map(|c| c - r).collect(),
            hi: center.iter().map(|c| c + r).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SearchBudget {
    /// Coarse grid size, counting the chain's initial point.
    pub max_candidates: usize,
    pub local_starts: usize,
    pub local_evaluations: usize,
    /// Pseudo-orbit and orbit sample counts for the matching.
    pub dp_samples: usize,
    pub orbit_samples: usize,
    /// Uniform samples of the final distance check (re-checked at 4×).
    pub check_samples: usize,
    /// Run multiple shooting on the chain nodes.
    pub shooting: bool,
    pub shooting_max_iter: usize,
    /// Extra time covered inside a head/tail extension.
    pub settle_time: f64,
}

impl Default for SearchBudget {
    fn default() -> Self {
        Self {
            max_candidates: 1000,
            local_starts: 3,
            local_evaluations: 150,
            dp_samples: 120,
            orbit_samples: 240,
            check_samples: 2000,
            shooting: true,
            shooting_max_iter: 25,
            settle_time: 5.0,
        }
    }
}

/// Time horizon searched for `po`: the body plus `settle` inside each
/// extension.
pub fn search_horizon(po: &PseudoOrbit, settle: f64) -> (f64, f64) {
    let a = if po.head().is_some() { -settle } else { 0.0 };
    let b = po.body_time() + if po.tail().is_some() { settle } else { 0.0 };
    (a, b)
}

fn grid_points(seed: &SeedBox, count: usize) -> Vec<Vec<f64>> {
    let n = seed.lo.len();
    if count == 0 {
        return Vec::new();
    }
    let mut per = (count as f64).powf(1.0 / n as f64).floor().max(1.0) as usize;
    while per.pow(n as u32) > count && per > 1 {
        per -= 1;
    }
    let total = per.pow(n as u32);
    (0..total)
        .map(|mut idx| {
            (0..n)
                .map(|d| {
                    let k = idx % per;
                    idx /= per;
                    if per == 1 {
                        0.5 * (seed.lo[d] + seed.hi[d])
                    } else {
                        seed.lo[d] + (seed.hi[d] - seed.lo[d]) * k as f64 / (per - 1) as f64
                    }
                })
                .collect()
        })
        .collect()
}

struct NelderMeadResult {
    x: Vec<f64>,
    f: f64,
    evals: usize,
    converged: bool,
}

fn nelder_mead(
    f: &dyn Fn(&[f64]) -> f64,
    x0: &[f64],
    step: &[f64],
    max_evals: usize,
    ftol: f64,
) -> NelderMeadResult {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for d in 0..n {
        let mut v = x0.to_vec();
        v[d] += step[d];
        simplex.push(v);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    let mut evals = n + 1;
    let mut converged = false;
    while evals < max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&i, &j| vals[i].total_cmp(&vals[j]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        if (vals[n] - vals[0]).abs() <= ftol * (1.0 + vals[0].abs()) {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|d| simplex[..n].iter().map(|v| v[d]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            (0..n)
                .map(|d| centroid[d] + t * (simplex[n][d] - centroid[d]))
                .collect()
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            evals += 1;
            if fe < fr {
                simplex[n] = xe;
                vals[n] = fe;
            } else {
                simplex[n] = xr;
                vals[n] = fr;
            }
        } else if fr < vals[n - 1] {
            simplex[n] = xr;
            vals[n] = fr;
        } else {
            let (xc, fc) = if fr < vals[n] {
                let x = along(-0.5);
                let v = f(&x);
                (x, v)
            } else {
                let x = along(0.5);
                let v = f(&x);
                (x, v)
            };
            evals += 1;
            if fc < vals[n].min(fr) {
                simplex[n] = xc;
                vals[n] = fc;
            } else {
                for i in 1..=n {
                    simplex[i] = (0..n)
                        .map(|d| simplex[0][d] + 0.5 * (simplex[i][d] - simplex[0][d]))
                        .collect();
                    vals[i] = f(&simplex[i]);
                }
                evals += n;
            }
        }
    }
    let best = (0..=n)
        .min_by(|&i, &j| vals[i].total_cmp(&vals[j]))
        .unwrap();
    NelderMeadResult {
        x: simplex[best].clone(),
        f: vals[best],
        evals,
        converged,
    }
}

/// Segment end points and their tangent maps.
type SegmentImages = (Vec<DVector<f64>>, Vec<DMatrix<f64>>);

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShootingSolution {
    pub witness: OrbitWitness,
    pub iterations: usize,
    pub residual: f64,
}

/// Minimum-norm Newton solution of `X_{t_i}(z_i) = z_{i+1}` for the nodes of
/// `po` over `horizon`, started at the chain points.
pub fn multiple_shooting(
    po: &PseudoOrbit,
    horizon: (f64, f64),
    max_iter: usize,
    opts: &IntegratorOptions,
) -> Result<ShootingSolution, ShadowingError> {
    check_horizon(po, horizon)?;
    let spec = po.spec();
    let n = spec.dim();
    let (i_a, _) = po.locate(horizon.0)?;
    let (i_b, s_b) = po.locate(horizon.1)?;
    // segments i_a..=i_last, nodes i_a..=i_last+1
    let i_last = if s_b == 0.0 && i_b > i_a {
        i_b - 1
    } else {
        i_b
    };
    let segs: Vec<i64> = (i_a..=i_last).collect();
    let nseg = segs.len();
    let durations: Vec<f64> = segs
        .iter()
        .map(|&i| po.entry(i).map(|e| e.duration))
        .collect::<Result<_, _>>()?;
    let mut z: Vec<DVector<f64>> = (i_a..=i_last + 1)
        .map(|i| -> Result<DVector<f64>, ShadowingError> {
            match po.entry(i) {
                Ok(e) => Ok(DVector::from_column_slice(&e.point)),
                // finite chain: last node is the image of the last entry
                Err(_) => {
                    let e = po.entry(i - 1)?;
                    Ok(DVector::from_vec(flow_at(
                        spec, &e.point, e.duration, opts,
                    )?))
                }
            }
        })
        .collect::<Result<_, _>>()?;
    let eval = |z: &[DVector<f64>]| -> Result<SegmentImages, ShadowingError> {
        let res: Vec<(DVector<f64>, DMatrix<f64>)> = (0..nseg)
            .into_par_iter()
            .map(|s| -> Result<_, ShadowingError> {
                let (img, phi) = flow_with_tangent(spec, z[s].as_slice(), durations[s], opts)?;
                let r = DVector::from_vec(spec.difference(&img, z[s + 1].as_slice()));
                Ok((r, phi))
            })
            .collect::<Result<_, _>>()?;
        Ok(res.into_iter().unzip())
    };
    let inf_norm = |r: &[DVector<f64>]| r.iter().map(|v| v.amax()).fold(0.0, f64::max);
    let (mut r, mut phis) = eval(&z)?;
    let mut res = inf_norm(&r);
    let mut iterations = 0;
    while res > 1e-11 && iterations < max_iter {
        iterations += 1;
        // block-tridiagonal J Jᵀ λ = r
        let id = DMatrix::<f64>::identity(n, n);
        let mut dprime: Vec<DMatrix<f64>> = Vec::with_capacity(nseg);
        let mut rhs: Vec<DVector<f64>> = Vec::with_capacity(nseg);
        for s in 0..nseg {
            let mut d = &phis[s] * phis[s].transpose() + &id;
            let mut b = r[s].clone();
            if s > 0 {
                // lower block (s, s−1) = −Φ_s, upper block (s−1, s) = −Φ_sᵀ
                let lower = -&phis[s];
                let prev_inv = dprime[s - 1].clone().cholesky().expect("SPD").inverse();
                let l = &lower * prev_inv;
                d -= &l * (-phis[s].transpose());
                b -= &l * &rhs[s - 1];
            }
            dprime.push(d);
            rhs.push(b);
        }
        let mut lambda = vec![DVector::zeros(n); nseg];
        for s in (0..nseg).rev() {
            let mut b = rhs[s].clone();
            if s + 1 < nseg {
                b -= -phis[s + 1].transpose() * &lambda[s + 1];
            }
            lambda[s] = dprime[s].clone().cholesky().expect("SPD").solve(&b);
        }
        // Δz = −Jᵀλ
        let mut dz = vec![DVector::zeros(n); nseg + 1];
        for s in 0..nseg {
            dz[s] -= phis[s].transpose() * &lambda[s];
            dz[s + 1] += &lambda[s];
        }
        let mut step = 1.0;
        loop {
            let trial: Vec<DVector<f64>> = z.iter().zip(&dz).map(|(a, d)| a + d * step).collect();
            match eval(&trial) {
                Ok((tr, tp)) if inf_norm(&tr) < res || step < 1e-3 => {
                    z = trial;
                    r = tr;
                    phis = tp;
                    res = inf_norm(&r);
                    break;
                }
                _ if step < 1e-3 => return Err(ShadowingError::ShootingFailed { residual: res }),
                _ => step *= 0.5,
            }
        }
    }
    let s0 = po.accumulated_time(i_a)?;
    let mut t = s0;
    let mut nodes = Vec::with_capacity(nseg + 1);
    for (s, zi) in z.iter().enumerate() {
        nodes.push(WitnessNode {
            time: t,
            point: zi.as_slice().to_vec(),
        });
        if s < nseg {
            t += durations[s];
        }
    }
    Ok(ShootingSolution {
        witness: OrbitWitness::Nodes { nodes },
        iterations,
        residual: res,
    })
}

/// Search for a shadowing orbit of `po`.
///
/// Stage one matches orbits of a coarse grid of points in `seed` (plus the
/// chain's initial point) and refines the best few by Nelder–Mead. Stage two
/// solves the chain's multiple-shooting equations by minimum-norm Newton and
/// measures that orbit with `h = id`. The search does not depend on
/// `epsilon`, so a witness at ε is also a witness at every ε′ > ε.
pub fn search_shadowing(
    po: &PseudoOrbit,
    epsilon: f64,
    seed: &SeedBox,
    budget: &SearchBudget,
    opts: &ShadowOptions,
) -> Result<ShadowingReport, ShadowingError> {
    if !(epsilon > 0.0) {
        return Err(ShadowingError::BadEpsilon(epsilon));
    }
    let spec = po.spec();
    if seed.lo.len() != spec.dim() {
        return Err(FlowError::Dimension {
            expected: spec.dim(),
            got: seed.lo.len(),
        }
        .into());
    }
    let horizon = search_horizon(po, budget.settle_time);
    let cache = ConcatCache::new(po, &opts.integrator)?;
    let objective = |y: &[f64]| -> f64 {
        let w = OrbitWitness::Point { y: y.to_vec() };
        best_reparam_with(
            &cache,
            &w,
            horizon,
            budget.dp_samples,
            budget.orbit_samples,
            None,
            opts,
            2,
        )
        .map(|r| r.dp_distance)
        .unwrap_or(f64::INFINITY)
    };

    let x0 = cache.eval(0.0)?;
    let mut cands = vec![x0];
    cands.extend(grid_points(seed, budget.max_candidates.saturating_sub(1)));
    let scores: Vec<f64> = cands.par_iter().map(|y| objective(y)).collect();
    let mut ranked: Vec<usize> = (0..cands.len()).collect();
    ranked.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));

    let per = (cands.len() as f64).powf(1.0 / spec.dim() as f64).max(2.0);
    let step: Vec<f64> = seed
        .lo
        .iter()
        .zip(&seed.hi)
        .map(|(l, h)| ((h - l) / per).max(1e-6))
        .collect();
    let starts: Vec<usize> = ranked
        .iter()
        .copied()
        .filter(|&i| scores[i].is_finite())
        .take(budget.local_starts)
        .collect();
    let locals: Vec<NelderMeadResult> = starts
        .par_iter()
        .map(|&i| {
            nelder_mead(
                &objective,
                &cands[i],
                &step,
                budget.local_evaluations,
                1e-10,
            )
        })
        .collect();
    let local_evaluations: usize = locals.iter().map(|r| r.evals).sum();
    let local_converged = locals.iter().all(|r| r.converged);

    let mut best_point: Option<(Vec<f64>, f64, &'static str)> = ranked
        .first()
        .filter(|&&i| scores[i].is_finite())
        .map(|&i| (cands[i].clone(), scores[i], "grid"));
    for r in &locals {
        if r.f < best_point.as_ref().map_or(f64::INFINITY, |b| b.1) {
            best_point = Some((r.x.clone(), r.f, "local"));
        }
    }

    let mut best: Option<(Witness, ShadowDistance, String)> = None;
    if let Some((y, _, stage)) = best_point {
        let w = OrbitWitness::Point { y };
        if let Ok(r) = best_reparam_with(
            &cache,
            &w,
            horizon,
            budget.dp_samples,
            budget.orbit_samples,
            None,
            opts,
            budget.check_samples,
        ) {
            let y0 = r.witness.point_at_zero(spec, &opts.integrator)?;
            best = Some((
                Witness {
                    y: y0,
                    orbit: r.witness,
                    h: r.h,
                },
                r.distance,
                stage.to_string(),
            ));
        }
    }

    let (mut shooting_iterations, mut shooting_residual) = (None, None);
    if budget.shooting {
        if let Ok(sol) = multiple_shooting(po, horizon, budget.shooting_max_iter, &opts.integrator)
        {
            shooting_iterations = Some(sol.iterations);
            shooting_residual = Some(sol.residual);
            let h = Reparametrization::identity();
            let orbit = OrbitEval::new(spec, &sol.witness, horizon, &opts.integrator)?;
            if let Ok(d) = distance_with(&cache, &orbit, &h, horizon, budget.check_samples) {
                if best
                    .as_ref()
                    .is_none_or(|b| d.upper_bound < b.1.upper_bound)
                {
                    let y0 = sol.witness.point_at_zero(spec, &opts.integrator)?;
                    best = Some((
                        Witness {
                            y: y0,
                            orbit: sol.witness,
                            h,
                        },
                        d,
                        "shooting".into(),
                    ));
                }
            }
        }
    }

    let mut stats = SearchStats {
        horizon,
        grid_candidates: cands.len(),
        local_evaluations,
        local_converged,
        shooting_iterations,
        shooting_residual,
        best_stage: String::new(),
        budget_exhausted: !local_converged,
    };
    let Some((witness, dist, stage)) = best else {
        stats.best_stage = "none".into();
        return Ok(ShadowingReport {
            verdict: Verdict::NotFound,
            epsilon,
            witness: None,
            achieved_distance: None,
            sampled_distance: None,
            lower_bound: None,
            certificate: None,
            statistics: Some(stats),
            note: "not_found: no candidate orbit could be evaluated; this is not a proof that the chain cannot be shadowed".into(),
        });
    };
    stats.best_stage = stage;
    let mut verdict = Verdict::NotFound;
    let mut achieved = dist;
    if dist.upper_bound < epsilon {
        let orbit = OrbitEval::new(
            spec,
            &witness.orbit,
            (witness.h.eval(horizon.0), witness.h.eval(horizon.1)),
            &opts.integrator,
        )?;
        let fine = distance_with(
            &cache,
            &orbit,
            &witness.h,
            horizon,
            4 * budget.check_samples,
        )?;
        achieved = fine;
        if fine.upper_bound < epsilon {
            verdict = Verdict::Shadowed;
        }
    }
    let note = match verdict {
        Verdict::Shadowed => format!(
            "shadowed: the witness orbit stays within {:.3e} < epsilon of the chain on [{}, {}]",
            achieved.upper_bound, horizon.0, horizon.1
        ),
        _ => format!(
            "not_found: best distance {:.3e} >= epsilon; this is not a proof that the chain cannot be shadowed",
            achieved.upper_bound
        ),
    };
    Ok(ShadowingReport {
        verdict,
        epsilon,
        witness: Some(witness),
        achieved_distance: Some(achieved.upper_bound),
        sampled_distance: Some(achieved.sampled_max),
        lower_bound: None,
        certificate: None,
        statistics: Some(stats),
        note,
    })
}

/// Lower bound `(Q_max − Q_min) / (2 L_Q)` on the shadowing distance of any
/// orbit, from a conserved quantity `Q` with Lipschitz constant `L_Q`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConservationBound {
    pub lower_bound: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub argmin_index: i64,
    pub argmax_index: i64,
    /// Why the bound does not apply, if it does not.
    pub inapplicable: Option<String>,
}

fn chain_points(po: &PseudoOrbit) -> Vec<(i64, &[f64])> {
    let mut pts: Vec<(i64, &[f64])> = Vec::new();
    if let Some(h) = po.head() {
        pts.push((-1, &h.point));
    }
    for (i, e) in po.body().iter().enumerate() {
        pts.push((i as i64, &e.point));
    }
    if let Some(t) = po.tail() {
        pts.push((po.len() as i64, &t.point));
    }
    pts
}

pub fn conservation_bound(
    po: &PseudoOrbit,
    epsilon: f64,
) -> Result<ConservationBound, ShadowingError> {
    let spec = po.spec();
    let q = spec
        .conserved()
        .ok_or_else(|| ShadowingError::NoConservedQuantity(spec.name().to_string()))?;
    let pts = chain_points(po);
    let mut out = ConservationBound {
        lower_bound: 0.0,
        q_min: f64::INFINITY,
        q_max: f64::NEG_INFINITY,
        argmin_index: 0,
        argmax_index: 0,
        inapplicable: None,
    };
    for &(i, p) in &pts {
        let v = q.eval(p);
        if v < out.q_min {
            out.q_min = v;
            out.argmin_index = i;
        }
        if v > out.q_max {
            out.q_max = v;
            out.argmax_index = i;
        }
    }
    out.lower_bound = (out.q_max - out.q_min) / (2.0 * q.lipschitz);
    if let Some(r) = q.valid_radius {
        if let Some(&(i, p)) = pts.iter().find(|(_, p)| norm(p) > r - epsilon) {
            out.inapplicable = Some(format!(
                "{} is conserved only within radius {r}; chain point {i} at radius {} leaves no epsilon-margin",
                q.name,
                norm(p)
            ));
        }
    }
    Ok(out)
}

/// A certificate that no orbit ε-shadows `po`, or `None`.
pub fn refute_by_conservation(
    po: &PseudoOrbit,
    epsilon: f64,
) -> Result<Option<RefutationCertificate>, ShadowingError> {
    let b = conservation_bound(po, epsilon)?;
    let q = po
        .spec()
        .conserved()
        .expect("checked by conservation_bound");
    if b.inapplicable.is_some() || !(b.lower_bound > epsilon) {
        return Ok(None);
    }
    Ok(Some(RefutationCertificate {
        quantity: q.name.clone(),
        lipschitz: q.lipschitz,
        q_min: b.q_min,
        q_max: b.q_max,
        argmin_index: b.argmin_index,
        argmax_index: b.argmax_index,
        lower_bound: b.lower_bound,
        epsilon,
        valid_radius: q.valid_radius,
        justification: format!(
            "{} is constant on orbits, the chain visits {} = {} (entry {}) and {} = {} (entry {}), and |{}(a) - {}(b)| <= {} d(a, b), so one of the two entries is at distance >= ({} - {}) / (2 * {}) = {} from any orbit",
            q.name, q.name, b.q_min, b.argmin_index, q.name, b.q_max, b.argmax_index, q.name, q.name,
            q.lipschitz, b.q_max, b.q_min, q.lipschitz, b.lower_bound
        ),
    }))
}
