//! Dominated and hyperbolic splittings of the normal cocycle, quasi-hyperbolic
//! orbit arcs, uniform estimates on periodic orbits, and periodic shadowing
//! of closing arcs.

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::flow::{flow_at, FlowError, VectorFieldSpec};
use crate::linalg::{
    conorm, dominant_subspace, min_principal_angle, orthonormalize, right_singular, spectral_norm,
    subspace_distance,
};
use crate::poincare::{
    find_periodic_newton, linear_poincare, normal_frame, CriticalElementReport, CriticalKind,
    NormalCocycle, PeriodicOrbit, PoincareError, PoincareOptions,
};
use crate::pseudo_orbit::{OrbitEntry, PseudoOrbit, PseudoOrbitError};
use crate::shadowing::{best_reparam, OrbitWitness, ShadowOptions, ShadowingError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplittingError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Poincare(#[from] PoincareError),
    #[error(transparent)]
    Shadowing(#[from] ShadowingError),
    #[error(transparent)]
    PseudoOrbit(#[from] PseudoOrbitError),
    #[error("stable dimension p = {p} must satisfy 1 <= p <= {max}")]
    BadDimension { p: usize, max: usize },
    #[error(
        "quasi-hyperbolic arcs need a normal bundle of dimension >= 2 (ambient dimension {dim})"
    )]
    LowDimension { dim: usize },
    #[error("cocycle too short: {samples} samples, need at least {needed}")]
    TooShort { samples: usize, needed: usize },
    #[error(
        "filtration gap too small at sample {sample}: singular-value ratio {ratio:.4} < {min}"
    )]
    FiltrationGap { ratio: f64, sample: usize, min: f64 },
    #[error("estimated subspaces are not invariant (residual {residual:e})")]
    NotInvariant { residual: f64 },
    #[error("estimated subspaces are not transverse (smallest angle {angle:e})")]
    NotTransverse { angle: f64 },
    #[error("{bundle} bundle is not uniformly hyperbolic: fitted lambda = {lambda:.6}")]
    NotHyperbolic { bundle: &'static str, lambda: f64 },
    #[error("arc length {tau} is shorter than the partition step {step}")]
    ArcTooShort { tau: f64, step: f64 },
    #[error("orbit {index} in the input is not a hyperbolic periodic orbit")]
    NonHyperbolicOrbit { index: usize },
    #[error("{0}")]
    Precondition(String),
    #[error("Newton failed ({source}); {note}")]
    NewtonFailed { source: PoincareError, note: String },
}

/// Minimum singular-value ratio accepted as a filtration gap.
pub const MIN_GAP_RATIO: f64 = 1.2;

/// Per-sample stable/unstable subspaces of a normal cocycle, valid on the
/// interior samples `first..=last`.
#[derive(Clone, Debug)]
pub struct SplittingEstimate {
    cocycle: NormalCocycle,
    p: usize,
    first: usize,
    last: usize,
    stable: Vec<DMatrix<f64>>,
    unstable: Vec<DMatrix<f64>>,
    pub invariance_residual: f64,
    pub min_angle: f64,
    pub gap_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimateSummary {
    pub p: usize,
    pub fiber_dim: usize,
    pub samples: usize,
    pub interior: (usize, usize),
    pub interior_time: (f64, f64),
    pub invariance_residual: f64,
    pub min_angle: f64,
    pub gap_ratio: f64,
}

fn complement(q: &DMatrix<f64>) -> DMatrix<f64> {
    let d = q.nrows();
    let k = d - q.ncols();
    let proj = DMatrix::identity(d, d) - q * q.transpose();
    let (v, _) = right_singular(&proj);
    orthonormalize(&v.columns(0, k).into_owned())
}

/// Generic `k`-dimensional start, fixed in ambient coordinates so the
/// estimate does not depend on the choice of normal frame.
fn generic_start(frame: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let n = frame.nrows();
    let g = DMatrix::from_fn(n, k, |i, j| {
        1.0 / (1.0 + (i + 3 * j) as f64) + if i == j { 1.0 } else { 0.0 }
    });
    orthonormalize(&(frame.transpose() * g))
}

impl SplittingEstimate {
    pub fn cocycle(&self) -> &NormalCocycle {
        &self.cocycle
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Interior sample range where the estimate is valid.
    pub fn interior(&self) -> (usize, usize) {
        (self.first, self.last)
    }

    /// `Δ^s` at sample `k` (orthonormal columns in the cocycle frame).
    pub fn stable(&self, k: usize) -> &DMatrix<f64> {
        &self.stable[k - self.first]
    }

    pub fn unstable(&self, k: usize) -> &DMatrix<f64> {
        &self.unstable[k - self.first]
    }

    pub fn summary(&self) -> EstimateSummary {
        let t = self.cocycle.times();
        EstimateSummary {
            p: self.p,
            fiber_dim: self.cocycle.fiber_dim(),
            samples: self.cocycle.len(),
            interior: (self.first, self.last),
            interior_time: (t[self.first], t[self.last]),
            invariance_residual: self.invariance_residual,
            min_angle: self.min_angle,
            gap_ratio: self.gap_ratio,
        }
    }

    /// Interior sample whose base point is nearest to `x`.
    pub fn nearest_sample(&self, x: &[f64]) -> usize {
        let spec = self.cocycle.spec();
        (self.first..=self.last)
            .min_by(|&a, &b| {
                spec.distance(self.cocycle.point(a), x)
                    .total_cmp(&spec.distance(self.cocycle.point(b), x))
            })
            .expect("non-empty interior")
    }
}

/// Finite-time filtration estimate of a dominated splitting with
/// `dim Δ^s = p`.
///
/// `Δ^u` is pushed forward from the start of the cocycle and `Δ^s` is the
/// orthogonal complement of the most expanded directions of the products
/// ending at the last sample; both are exactly invariant by construction.
/// Samples within `window` (default a quarter of the cocycle) of either end
/// are discarded.
pub fn estimate_splitting(
    cocycle: &NormalCocycle,
    p: usize,
    window: Option<usize>,
) -> Result<SplittingEstimate, SplittingError> {
    let d = cocycle.fiber_dim();
    if p == 0 || p >= d {
        return Err(SplittingError::BadDimension {
            p,
            max: d.saturating_sub(1),
        });
    }
    let m = cocycle.len() - 1;
    let w = window.unwrap_or(m / 4).max(1);
    if m < 2 * w + 1 {
        return Err(SplittingError::TooShort {
            samples: cocycle.len(),
            needed: 2 * w + 2,
        });
    }
    let (first, last) = (w, m - w);
    let ku = d - p;

    // forward sweep for Δ^u
    let mut q = generic_start(cocycle.frame(0), ku);
    let mut unstable = Vec::with_capacity(last - first + 1);
    for k in 0..=last {
        if k >= first {
            unstable.push(q.clone());
        }
        if k < last {
            q = orthonormalize(&(cocycle.transition(k) * &q));
        }
    }
    // backward sweep with transposes: most expanded directions of Ψ(k → m)
    let mut r = generic_start(cocycle.frame(m), ku);
    let mut expanded = vec![DMatrix::zeros(0, 0); last - first + 1];
    for k in (first..m).rev() {
        r = orthonormalize(&(cocycle.transition(k).transpose() * &r));
        if k <= last {
            expanded[k - first] = r.clone();
        }
    }
    let stable: Vec<DMatrix<f64>> = expanded.iter().map(complement).collect();

    let mut residual: f64 = 0.0;
    let mut min_angle = f64::INFINITY;
    for k in first..=last {
        let i = k - first;
        min_angle = min_angle.min(min_principal_angle(&stable[i], &unstable[i]));
        if k < last {
            let ps = orthonormalize(&(cocycle.transition(k) * &stable[i]));
            let pu = orthonormalize(&(cocycle.transition(k) * &unstable[i]));
            residual = residual
                .max(subspace_distance(&ps, &stable[i + 1]))
                .max(subspace_distance(&pu, &unstable[i + 1]));
        }
    }

    // singular-value gap of window-length products
    let stride = (w / 8).max(1);
    let mut gap_ratio = f64::INFINITY;
    for k in (first..=last).step_by(stride) {
        let prod = cocycle.product(k, (k + w).min(m));
        let sv: Vec<f64> = {
            let mut v: Vec<f64> = prod.singular_values().iter().copied().collect();
            v.sort_by(|a, b| b.total_cmp(a));
            v
        };
        let ratio = sv[ku - 1] / sv[ku].max(f64::MIN_POSITIVE);
        if ratio < gap_ratio {
            gap_ratio = ratio;
        }
        if ratio < MIN_GAP_RATIO {
            return Err(SplittingError::FiltrationGap {
                ratio,
                sample: k,
                min: MIN_GAP_RATIO,
            });
        }
    }
    if residual > 1e-3 {
        return Err(SplittingError::NotInvariant { residual });
    }
    if !(min_angle > 1e-6) {
        return Err(SplittingError::NotTransverse { angle: min_angle });
    }
    Ok(SplittingEstimate {
        cocycle: cocycle.clone(),
        p,
        first,
        last,
        stable,
        unstable,
        invariance_residual: residual,
        min_angle,
        gap_ratio,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DominationCheck {
    pub l: f64,
    pub verdict: bool,
    /// Largest `‖Ψ_t|Δ^s(x)‖ · ‖Ψ_{−t}|Δ^u(X_t x)‖` over the samples.
    pub worst_product: f64,
    /// Sample index of `x` and `t` at the worst product.
    pub worst_sample: usize,
    pub worst_time: f64,
    pub pairs: usize,
}

/// Domination inequality over all interior samples `x` and sampled
/// `t ∈ [l, 3l]`.
pub fn check_domination(est: &SplittingEstimate, l: f64) -> DominationCheck {
    let c = &est.cocycle;
    let times = c.times();
    let mut out = DominationCheck {
        l,
        verdict: true,
        worst_product: 0.0,
        worst_sample: est.first,
        worst_time: l,
        pairs: 0,
    };
    for k in est.first..=est.last {
        let mut vs = est.stable(k).clone();
        let mut vu = est.unstable(k).clone();
        for j in k..est.last {
            vs = c.transition(j) * vs;
            vu = c.transition(j) * vu;
            let t = times[j + 1] - times[k];
            if t < l * (1.0 - 1e-12) {
                continue;
            }
            if t > 3.0 * l * (1.0 + 1e-12) {
                break;
            }
            // ‖Ψ_{−t}|Δ^u(X_t x)‖ = 1 / m(Ψ_t|Δ^u(x))
            let prod = spectral_norm(&vs) / conorm(&vu);
            out.pairs += 1;
            if prod > out.worst_product {
                out.worst_product = prod;
                out.worst_sample = k;
                out.worst_time = t;
            }
        }
    }
    out.verdict = out.pairs > 0 && out.worst_product <= 0.5;
    out
}

/// Largest domination product over interior samples for each sampled
/// `t ∈ (0, t_max]`, as `(t, product)` pairs.
pub fn domination_profile(est: &SplittingEstimate, t_max: f64) -> Vec<(f64, f64)> {
    let c = &est.cocycle;
    let times = c.times();
    let mut worst: Vec<(f64, f64)> = Vec::new();
    for k in est.first..=est.last {
        let mut vs = est.stable(k).clone();
        let mut vu = est.unstable(k).clone();
        for (i, j) in (k..est.last).enumerate() {
            vs = c.transition(j) * vs;
            vu = c.transition(j) * vu;
            let t = times[j + 1] - times[k];
            if t > t_max * (1.0 + 1e-12) {
                break;
            }
            let prod = spectral_norm(&vs) / conorm(&vu);
            if i == worst.len() {
                worst.push((t, prod));
            } else if prod > worst[i].1 {
                worst[i].1 = prod;
            }
        }
    }
    worst
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BundleFit {
    pub c: f64,
    pub lambda: f64,
    pub rms_residual: f64,
    pub samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HyperbolicFit {
    pub stable: BundleFit,
    pub unstable: BundleFit,
}

fn fit_line(pts: &[(f64, f64)]) -> BundleFit {
    let n = pts.len() as f64;
    let (st, sy) = pts.iter().fold((0.0, 0.0), |a, &(t, y)| (a.0 + t, a.1 + y));
    let (mt, my) = (st / n, sy / n);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(t, y) in pts {
        sxx += (t - mt) * (t - mt);
        sxy += (t - mt) * (y - my);
    }
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let a = my - b * mt;
    let rms = (pts
        .iter()
        .map(|&(t, y)| (y - a - b * t).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let log_c = pts
        .iter()
        .map(|&(t, y)| y - b * t)
        .fold(f64::NEG_INFINITY, f64::max);
    BundleFit {
        c: log_c.exp(),
        lambda: b.exp(),
        rms_residual: rms,
        samples: pts.len(),
    }
}

/// Fit `‖Ψ_t|Δ^s‖ ≤ Cλ^t` and `‖Ψ_{−t}|Δ^u‖ ≤ Cλ^t` for `t ∈ [1, horizon]`.
///
/// `λ` comes from least squares on the log-norms; `C` is then the smallest
/// constant making the bound hold at every sample. Fails when either `λ` is
/// at least `lambda_max`.
pub fn fit_hyperbolic(
    est: &SplittingEstimate,
    horizon: Option<f64>,
    lambda_max: f64,
) -> Result<HyperbolicFit, SplittingError> {
    let c = &est.cocycle;
    let times = c.times();
    let span = times[est.last] - times[est.first];
    let horizon = horizon.unwrap_or((span / 2.0).min(10.0)).max(1.0);
    let k_stride = ((est.last - est.first) / 40).max(1);
    let mut s_pts = Vec::new();
    let mut u_pts = Vec::new();
    for k in (est.first..=est.last).step_by(k_stride) {
        let mut vs = est.stable(k).clone();
        let mut vu = est.unstable(k).clone();
        let mut taken = 0usize;
        for j in k..est.last {
            vs = c.transition(j) * vs;
            vu = c.transition(j) * vu;
            let t = times[j + 1] - times[k];
            if t < 1.0 - 1e-12 {
                continue;
            }
            if t > horizon + 1e-12 {
                break;
            }
            taken += 1;
            if taken % 4 != 1 {
                continue;
            }
            s_pts.push((t, spectral_norm(&vs).ln()));
            u_pts.push((t, -conorm(&vu).ln()));
        }
    }
    if s_pts.len() < 2 {
        return Err(SplittingError::TooShort {
            samples: c.len(),
            needed: c.len() + 1,
        });
    }
    let stable = fit_line(&s_pts);
    let unstable = fit_line(&u_pts);
    if stable.lambda >= lambda_max {
        return Err(SplittingError::NotHyperbolic {
            bundle: "stable",
            lambda: stable.lambda,
        });
    }
    if unstable.lambda >= lambda_max {
        return Err(SplittingError::NotHyperbolic {
            bundle: "unstable",
            lambda: unstable.lambda,
        });
    }
    Ok(HyperbolicFit { stable, unstable })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuasiHyperbolicCertificate {
    pub x: Vec<f64>,
    pub tau: f64,
    pub eta: f64,
    pub step: f64,
    pub p: usize,
    /// `0 = T_0 < … < T_l = τ`.
    pub partition: Vec<f64>,
    pub log_norm_stable: Vec<f64>,
    pub log_conorm_unstable: Vec<f64>,
    /// Cumulative contraction on `Δ^s`: `−η − (1/T_k) Σ_{j≤k} log‖Ψ|Δ^s‖`.
    pub slack_contraction: Vec<f64>,
    /// Tail expansion on `Δ^u`: `(1/(τ − T_{k−1})) Σ_{j≥k} log m(Ψ|Δ^u) − η`.
    pub slack_expansion: Vec<f64>,
    /// Per-step gap: `−2η − (log‖Ψ|Δ^s‖ − log m(Ψ|Δ^u))`.
    pub slack_gap: Vec<f64>,
    pub min_slack: f64,
    pub verdict: bool,
}

/// Greedy partition of `[0, τ]` in steps of `step`, the remainder merged
/// into the last step.
pub fn greedy_partition(tau: f64, step: f64) -> Result<Vec<f64>, SplittingError> {
    if !(step > 0.0) || !(tau >= step) {
        return Err(SplittingError::ArcTooShort { tau, step });
    }
    let l = ((tau / step) * (1.0 + 1e-12)).floor() as usize;
    let mut part: Vec<f64> = (0..l).map(|i| i as f64 * step).collect();
    part.push(tau);
    Ok(part)
}

/// Subspaces of `est` at the sample nearest to `y`, moved into `y`'s frame.
fn subspaces_at(
    est: &SplittingEstimate,
    y: &[f64],
    frame_y: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = est.nearest_sample(y);
    let fk = est.cocycle.frame(k);
    let map = frame_y.transpose() * fk;
    (
        orthonormalize(&(&map * est.stable(k))),
        orthonormalize(&(&map * est.unstable(k))),
    )
}

/// Evaluate the three quasi-hyperbolicity inequalities on the arc
/// `X_{[0, τ]}(x)` with subspaces taken from `est`.
pub fn check_quasi_hyperbolic(
    spec: &VectorFieldSpec,
    x: &[f64],
    tau: f64,
    est: &SplittingEstimate,
    eta: f64,
    step: f64,
    opts: &PoincareOptions,
) -> Result<QuasiHyperbolicCertificate, SplittingError> {
    let n = spec.dim();
    if n < 3 {
        return Err(SplittingError::LowDimension { dim: n });
    }
    if est.p < 1 || est.p > n - 2 {
        return Err(SplittingError::BadDimension {
            p: est.p,
            max: n - 2,
        });
    }
    let partition = greedy_partition(tau, step)?;
    let l = partition.len() - 1;
    let mut y = x.to_vec();
    let mut log_s = Vec::with_capacity(l);
    let mut log_u = Vec::with_capacity(l);
    for i in 1..=l {
        let frame = normal_frame(spec, &y, opts)?;
        let (qs, qu) = subspaces_at(est, &y, &frame);
        let lp = linear_poincare(spec, &y, partition[i] - partition[i - 1], opts)?;
        log_s.push(spectral_norm(&(&lp.matrix * qs)).ln());
        log_u.push(conorm(&(&lp.matrix * qu)).ln());
        y = lp.end;
    }
    let mut slack_contraction = Vec::with_capacity(l);
    let mut acc = 0.0;
    for k in 1..=l {
        acc += log_s[k - 1];
        slack_contraction.push(-eta - acc / partition[k]);
    }
    let mut slack_expansion = vec![0.0; l];
    let mut acc = 0.0;
    for k in (1..=l).rev() {
        acc += log_u[k - 1];
        slack_expansion[k - 1] = acc / (tau - partition[k - 1]) - eta;
    }
    let slack_gap: Vec<f64> = (0..l).map(|k| -2.0 * eta - (log_s[k] - log_u[k])).collect();
    let min_slack = slack_contraction
        .iter()
        .chain(&slack_expansion)
        .chain(&slack_gap)
        .copied()
        .fold(f64::INFINITY, f64::min);
    Ok(QuasiHyperbolicCertificate {
        x: x.to_vec(),
        tau,
        eta,
        step,
        p: est.p,
        partition,
        log_norm_stable: log_s,
        log_conorm_unstable: log_u,
        slack_contraction,
        slack_expansion,
        slack_gap,
        min_slack,
        verdict: min_slack >= 0.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrbitSlacks {
    pub period: f64,
    /// `min_t (1/t)[log m(Ψ_t|E^u) − log‖Ψ_t|E^s‖] − 2η̃`.
    pub slack_rate: f64,
    /// Multiple of the period used in the partition condition.
    pub multiple: usize,
    pub slack_stable_sum: f64,
    pub slack_unstable_sum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UniformEstimates {
    pub t_tilde: f64,
    pub eta_tilde: f64,
    pub verdict: bool,
    pub min_slack: Option<f64>,
    pub orbits: Vec<OrbitSlacks>,
}

/// Uniform rate and partitioned-sum conditions on hyperbolic periodic orbits.
///
/// `E^s`, `E^u` at the base point are the contracting and expanding
/// invariant subspaces of the linear Poincaré map over one period and are
/// transported along the orbit by `Ψ`.
pub fn uniform_period_estimates(
    spec: &VectorFieldSpec,
    orbits: &[CriticalElementReport],
    t_tilde: f64,
    eta_tilde: f64,
    opts: &PoincareOptions,
) -> Result<UniformEstimates, SplittingError> {
    let mut out = UniformEstimates {
        t_tilde,
        eta_tilde,
        verdict: true,
        min_slack: None,
        orbits: Vec::new(),
    };
    for (index, rep) in orbits.iter().enumerate() {
        let period = match (rep.kind, rep.period) {
            (CriticalKind::Periodic, Some(t)) if rep.hyperbolic => t,
            _ => return Err(SplittingError::NonHyperbolicOrbit { index }),
        };
        let p = &rep.location;
        let d = spec.dim() - 1;
        let s = rep.index;
        if s == 0 || s == d {
            // one bundle is empty; the conditions involving it are vacuous
            return Err(SplittingError::Precondition(format!(
                "orbit {index} has stable count {s} in a {d}-dimensional normal bundle; both E^s and E^u must be non-trivial"
            )));
        }
        let (es0, eu0) = invariant_pair(spec, p, period, s, opts)?;

        // condition (i): E^s, E^u computed at 16 points of the orbit, Ψ_t
        // restricted to them as products of small blocks
        const PIECES: usize = 16;
        let dt = period / PIECES as f64;
        let mut ys = vec![p.clone()];
        let mut steps = Vec::with_capacity(PIECES);
        let mut es = Vec::with_capacity(PIECES + 1);
        let mut eu = Vec::with_capacity(PIECES + 1);
        for i in 0..PIECES {
            let (s_i, u_i) = if i == 0 {
                (es0.clone(), eu0.clone())
            } else {
                invariant_pair(spec, &ys[i], period, s, opts)?
            };
            es.push(s_i);
            eu.push(u_i);
            let lp = linear_poincare(spec, &ys[i], dt, opts)?;
            ys.push(lp.end.clone());
            steps.push(lp.matrix);
        }
        let blocks_s: Vec<DMatrix<f64>> = (0..PIECES)
            .map(|i| es[(i + 1) % PIECES].transpose() * &steps[i] * &es[i])
            .collect();
        let blocks_u: Vec<DMatrix<f64>> = (0..PIECES)
            .map(|i| eu[(i + 1) % PIECES].transpose() * &steps[i] * &eu[i])
            .collect();
        let t_max = (3.0 * period).max(t_tilde);
        let n_lo = ((t_tilde / dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let n_hi = ((t_max / dt) * (1.0 + 1e-12)).floor().max(n_lo as f64) as usize;
        let mut rate_min = f64::INFINITY;
        for j in (0..PIECES).step_by(2) {
            let mut ps = DMatrix::identity(s, s);
            let mut pu = DMatrix::identity(d - s, d - s);
            for n in 1..=n_hi {
                let i = (j + n - 1) % PIECES;
                ps = &blocks_s[i] * ps;
                pu = &blocks_u[i] * pu;
                if n >= n_lo {
                    let t = n as f64 * dt;
                    rate_min = rate_min.min((conorm(&pu).ln() - spectral_norm(&ps).ln()) / t);
                }
            }
        }
        let slack_rate = rate_min - 2.0 * eta_tilde;

        // condition (ii): smallest multiple with m·T ≥ T̃, greedy T̃ partition
        let multiple = ((t_tilde / period) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let total = multiple as f64 * period;
        let part = greedy_partition(total, t_tilde)?;
        let (mut sum_s, mut sum_u) = (0.0, 0.0);
        let (mut y, mut qs, mut qu) = (p.clone(), es0.clone(), eu0.clone());
        for w in part.windows(2) {
            let lp = linear_poincare(spec, &y, w[1] - w[0], opts)?;
            let (ms, mu) = (&lp.matrix * &qs, &lp.matrix * &qu);
            sum_s += spectral_norm(&ms).ln();
            sum_u += conorm(&mu).ln();
            qs = orthonormalize(&ms);
            qu = orthonormalize(&mu);
            y = lp.end;
        }
        let slack_stable_sum = -eta_tilde - sum_s / total;
        let slack_unstable_sum = sum_u / total - eta_tilde;
        let worst = slack_rate.min(slack_stable_sum).min(slack_unstable_sum);
        out.min_slack = Some(out.min_slack.map_or(worst, |m: f64| m.min(worst)));
        out.orbits.push(OrbitSlacks {
            period,
            slack_rate,
            multiple,
            slack_stable_sum,
            slack_unstable_sum,
        });
    }
    out.verdict = out.min_slack.is_none_or(|m| m >= 0.0);
    Ok(out)
}

/// Contracting (dimension `s`) and expanding invariant subspaces of the
/// linear Poincaré map over one period at `y`.
fn invariant_pair(
    spec: &VectorFieldSpec,
    y: &[f64],
    period: f64,
    s: usize,
    opts: &PoincareOptions,
) -> Result<(DMatrix<f64>, DMatrix<f64>), SplittingError> {
    let mono = linear_poincare(spec, y, period, opts)?.matrix;
    let d = mono.nrows();
    let eu = dominant_subspace(&mono, d - s, 500);
    let inv = mono.try_inverse().ok_or_else(|| {
        SplittingError::Precondition("linear Poincaré map over one period is singular".into())
    })?;
    Ok((dominant_subspace(&inv, s, 500), eu))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LiaoShadow {
    pub orbit: PeriodicOrbit,
    pub endpoint_gap: f64,
    /// Upper bound on `sup_t d(X_{g(t)}(p), X_t(x))` over `[0, τ]`.
    pub distance: f64,
}

/// A periodic orbit near a closing quasi-hyperbolic arc, by Newton on the
/// section through the arc's start.
pub fn liao_shadow_periodic(
    spec: &VectorFieldSpec,
    cert: &QuasiHyperbolicCertificate,
    delta: f64,
    opts: &PoincareOptions,
) -> Result<LiaoShadow, SplittingError> {
    if !cert.verdict {
        return Err(SplittingError::Precondition(
            "the arc is not quasi-hyperbolic (certificate verdict is false)".into(),
        ));
    }
    let end = flow_at(spec, &cert.x, cert.tau, &opts.integrator)?;
    let endpoint_gap = spec.distance(&end, &cert.x);
    if !(endpoint_gap < delta) {
        return Err(SplittingError::Precondition(format!(
            "endpoint gap d(X_tau(x), x) = {endpoint_gap:e} is not below delta = {delta}"
        )));
    }
    let orbit = find_periodic_newton(spec, &cert.x, cert.tau, opts).map_err(|source| SplittingError::NewtonFailed {
        source,
        note: "this is not a contradiction: periodic shadowing is only guaranteed for sufficiently small delta".into(),
    })?;
    let arc = PseudoOrbit::new(
        spec,
        delta,
        vec![OrbitEntry::new(cert.x.clone(), cert.tau.max(1.0))],
    )?;
    let witness = OrbitWitness::Point {
        y: orbit.point.clone(),
    };
    let sopts = ShadowOptions {
        integrator: opts.integrator,
        ..ShadowOptions::default()
    };
    let span = (-0.5 * cert.tau, 1.5 * cert.tau);
    let matched = best_reparam(
        &witness,
        &arc,
        (0.0, cert.tau),
        300,
        600,
        Some(span),
        &sopts,
    )?;
    let direct = crate::shadowing::shadow_distance(
        &witness,
        &crate::shadowing::Reparametrization::identity(),
        &arc,
        (0.0, cert.tau),
        1200,
        &sopts,
    )?;
    Ok(LiaoShadow {
        orbit,
        endpoint_gap,
        distance: matched.distance.upper_bound.min(direct.upper_bound),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poincare::classify_periodic;
    use crate::scenarios::{case2_center_cycle, linear_saddle3d, saddle_cycle};
    use proptest::prelude::*;
    use std::f64::consts::{LN_2, PI};

    fn opts() -> PoincareOptions {
        PoincareOptions::default()
    }

    fn cycle_cocycle(dt: f64, steps: usize) -> NormalCocycle {
        NormalCocycle::along_orbit(&saddle_cycle(), &[1.0, 0.0, 0.0], dt, steps, &opts()).unwrap()
    }

    fn axis(frame: &DMatrix<f64>, q: &DMatrix<f64>, i: usize) -> f64 {
        // sine of the angle between span(q) (1-dim) and e_i
        let v = frame * q.column(0);
        (1.0 - v[i] * v[i]).max(0.0).sqrt()
    }

    #[test]
    fn saddle_cycle_splitting() {
        let c = cycle_cocycle(0.05, 400);
        let est = estimate_splitting(&c, 1, None).unwrap();
        assert!(est.invariance_residual < 1e-8);
        let (a, b) = est.interior();
        for k in a..=b {
            // frame at (cos, sin, 0) is (radial, z) up to sign
            let fs = c.frame(k) * est.stable(k);
            let fu = c.frame(k) * est.unstable(k);
            let pt = c.point(k);
            let radial = [pt[0], pt[1], 0.0];
            let cosr = (fs[0] * radial[0] + fs[1] * radial[1]).abs() / radial[0].hypot(radial[1]);
            assert!((1.0 - cosr) < 1e-8);
            assert!((1.0 - fu[2].abs()) < 1e-8);
        }
    }

    #[test]
    fn linear_saddle_axis_splitting() {
        let spec = linear_saddle3d();
        // normal rates -2 and -1: dominated, not hyperbolic
        let c = NormalCocycle::along_orbit(&spec, &[0.0, 0.0, 1e-9], 0.075, 400, &opts()).unwrap();
        let est = estimate_splitting(&c, 1, None).unwrap();
        let (a, b) = est.interior();
        // Δ^u converges like e^{-t} from the start of the cocycle
        assert!(axis(c.frame(a), est.stable(a), 0) < 1e-6);
        assert!(axis(c.frame(a), est.unstable(a), 1) < 1e-2);
        assert!(axis(c.frame(b), est.unstable(b), 1) < 1e-8);
        let dom = check_domination(&est, LN_2 * 1.05);
        assert!(dom.verdict);
        let dom = check_domination(&est, LN_2 * 0.9);
        assert!(!dom.verdict);
        match fit_hyperbolic(&est, Some(3.0), 1.0 - 1e-3) {
            Err(SplittingError::NotHyperbolic {
                bundle: "unstable",
                lambda,
            }) => assert!((lambda - 1f64.exp()).abs() < 1e-3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn center_cycle_dominated_not_hyperbolic() {
        let spec = case2_center_cycle(1.0);
        let c = NormalCocycle::along_orbit(&spec, &[0.0; 3], 0.05, 400, &opts()).unwrap();
        let est = estimate_splitting(&c, 1, None).unwrap();
        assert!(check_domination(&est, LN_2 * 1.05).verdict);
        assert!(matches!(
            fit_hyperbolic(&est, None, 1.0 - 1e-3),
            Err(SplittingError::NotHyperbolic {
                bundle: "unstable",
                ..
            })
        ));
        let cert = check_quasi_hyperbolic(&spec, &[0.0; 3], 10.0, &est, 0.1, 1.0, &opts()).unwrap();
        assert!(!cert.verdict);
        assert!(cert.slack_expansion.iter().all(|&s| s < 0.0));
    }

    #[test]
    fn no_gap_is_rejected() {
        // conformal cocycle: both normal directions contract at the same rate
        let spec = crate::flow::VectorFieldSpec::linear(
            "conformal",
            DMatrix::from_row_slice(3, 3, &[-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0]),
        );
        let c = NormalCocycle::along_orbit(&spec, &[0.0, 0.0, 1e-3], 0.05, 200, &opts()).unwrap();
        assert!(matches!(
            estimate_splitting(&c, 1, None),
            Err(SplittingError::FiltrationGap { .. })
        ));
        assert!(matches!(
            estimate_splitting(&c, 0, None),
            Err(SplittingError::BadDimension { .. })
        ));
        assert!(matches!(
            estimate_splitting(&c, 1, Some(150)),
            Err(SplittingError::TooShort { .. })
        ));
    }

    #[test]
    fn domination_on_cycle() {
        let c = cycle_cocycle(0.01, 2000);
        let est = estimate_splitting(&c, 1, None).unwrap();
        let pass = check_domination(&est, 0.25);
        assert!(pass.verdict);
        assert!((pass.worst_product - (-0.75f64).exp()).abs() < 1e-6);
        let fail = check_domination(&est, 0.2);
        assert!(!fail.verdict);
        assert!((fail.worst_product - (-0.6f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn domination_profile_is_exponential_on_cycle() {
        let c = cycle_cocycle(0.01, 2000);
        let est = estimate_splitting(&c, 1, None).unwrap();
        let prof = domination_profile(&est, 1.0);
        assert_eq!(prof.len(), 100);
        for (t, v) in prof {
            assert!((v - (-3.0 * t).exp()).abs() < 1e-6, "t = {t}: {v}");
        }
    }

    #[test]
    fn partition_bounds() {
        assert_eq!(
            greedy_partition(10.0, 1.0).unwrap(),
            (0..=10).map(|i| i as f64).collect::<Vec<_>>()
        );
        let p = greedy_partition(2.0 * PI, 1.0).unwrap();
        assert_eq!(p.len(), 7);
        assert!(greedy_partition(0.5, 1.0).is_err());
    }

    #[test]
    fn quasi_hyperbolic_on_cycle() {
        let spec = saddle_cycle();
        let c = cycle_cocycle(0.05, 400);
        let est = estimate_splitting(&c, 1, None).unwrap();
        let x = c.point(est.interior().0).to_vec();
        let good = check_quasi_hyperbolic(&spec, &x, 10.0, &est, 0.5, 1.0, &opts()).unwrap();
        assert!(good.verdict);
        for k in 0..10 {
            assert!((good.log_norm_stable[k] + 2.0).abs() < 1e-6);
            assert!((good.log_conorm_unstable[k] - 1.0).abs() < 1e-6);
            assert!((good.slack_gap[k] - 2.0).abs() < 1e-6);
        }
        let bad = check_quasi_hyperbolic(&spec, &x, 10.0, &est, 1.6, 1.0, &opts()).unwrap();
        assert!(!bad.verdict);
        assert!(bad.slack_gap.iter().all(|&s| s < 0.0));
        assert!(check_quasi_hyperbolic(&spec, &x, 0.5, &est, 0.5, 1.0, &opts()).is_err());
    }

    #[test]
    fn uniform_estimates_on_cycle() {
        let spec = saddle_cycle();
        let rep = classify_periodic(&spec, &[1.0, 0.0, 0.0], 2.0 * PI, &opts()).unwrap();
        let u =
            uniform_period_estimates(&spec, std::slice::from_ref(&rep), 1.0, 1.0, &opts()).unwrap();
        assert!(u.verdict);
        assert!((u.orbits[0].slack_rate - 1.0).abs() < 1e-4, "{:?}", u);
        assert!((u.orbits[0].slack_stable_sum - 1.0).abs() < 1e-4);
        assert!((u.orbits[0].slack_unstable_sum).abs() < 1e-4);
        assert!(
            uniform_period_estimates(&spec, &[], 1.0, 1.0, &opts())
                .unwrap()
                .verdict
        );
        let cc = classify_periodic(&case2_center_cycle(1.0), &[0.0; 3], 2.0 * PI, &opts()).unwrap();
        assert!(matches!(
            uniform_period_estimates(&spec, &[rep, cc], 1.0, 1.0, &opts()),
            Err(SplittingError::NonHyperbolicOrbit { index: 1 })
        ));
    }

    #[test]
    fn liao_on_cycle() {
        let spec = saddle_cycle();
        let c = cycle_cocycle(0.05, 400);
        let est = estimate_splitting(&c, 1, None).unwrap();
        let x = [1.001, 0.0, 1e-5];
        let cert = check_quasi_hyperbolic(&spec, &x, 2.0 * PI, &est, 0.5, 1.0, &opts()).unwrap();
        assert!(cert.verdict);
        let res = liao_shadow_periodic(&spec, &cert, 0.01, &opts()).unwrap();
        assert!((res.orbit.period - 2.0 * PI).abs() < 1e-5);
        let p = &res.orbit.point;
        assert!((p[0].hypot(p[1]) - 1.0).abs() < 1e-7 && p[2].abs() < 1e-7);
        assert!(res.distance <= 0.01, "{}", res.distance);

        let far = check_quasi_hyperbolic(
            &spec,
            &[1.001, 0.0, 5e-4],
            2.0 * PI,
            &est,
            0.5,
            1.0,
            &opts(),
        )
        .unwrap();
        assert!(matches!(
            liao_shadow_periodic(&spec, &far, 0.01, &opts()),
            Err(SplittingError::Precondition(_))
        ));
        let bad = check_quasi_hyperbolic(&spec, &x, 2.0 * PI, &est, 1.6, 1.0, &opts()).unwrap();
        assert!(matches!(
            liao_shadow_periodic(&spec, &bad, 0.01, &opts()),
            Err(SplittingError::Precondition(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn domination_is_frame_invariant(angles in proptest::collection::vec(-PI..PI, 201)) {
            let c = cycle_cocycle(0.05, 200);
            let rot: Vec<DMatrix<f64>> = angles
                .iter()
                .map(|&a| DMatrix::from_row_slice(2, 2, &[a.cos(), -a.sin(), a.sin(), a.cos()]))
                .collect();
            let rc = c.with_frames_rotated(&rot);
            let e1 = estimate_splitting(&c, 1, None).unwrap();
            let e2 = estimate_splitting(&rc, 1, None).unwrap();
            let d1 = check_domination(&e1, 0.3);
            let d2 = check_domination(&e2, 0.3);
            prop_assert!((d1.worst_product - d2.worst_product).abs() < 1e-8);
        }

        #[test]
        fn hyperbolic_fit_implies_domination(contraction in 0.5f64..3.0) {
            let spec = crate::flow::VectorFieldSpec::linear(
                "diag",
                DMatrix::from_row_slice(3, 3, &[-contraction, 0.0, 0.0, 0.0, 0.7, 0.0, 0.0, 0.0, 1.0]),
            );
            let c = NormalCocycle::along_orbit(&spec, &[0.0, 0.0, 1e-3], 0.05, 200, &opts()).unwrap();
            let est = estimate_splitting(&c, 1, None).unwrap();
            let fit = fit_hyperbolic(&est, Some(2.0), 1.0 - 1e-3).unwrap();
            let lambda = fit.stable.lambda.max(fit.unstable.lambda);
            let l = ((0.5f64).ln() / lambda.ln() * 1.1).ceil();
            prop_assert!(check_domination(&est, l).verdict);
        }
    }
}
