//! δ-pseudo-orbits: sequences `(x_i, t_i)` with `t_i ≥ 1` and
//! `d(X_{t_i}(x_i), x_{i+1}) < δ`.
//!
//! A chain is a finite body indexed from 0, optionally extended to `−∞` by a
//! constant head and to `+∞` by a constant tail. Extensions must be fixed by
//! their own step (a singularity, or a periodic point flowed by its period).

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::flow::{
    flow_at, integrate, tangent_flow, FlowError, IntegratorOptions, Trajectory, VectorFieldSpec,
};
use crate::poincare::{
    first_return, linear_poincare, normal_frame, PoincareError, PoincareOptions,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PseudoOrbitError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Section(#[from] PoincareError),
    #[error("entry {index} has duration {t}; durations must be ≥ 1")]
    ShortDuration { index: i64, t: f64 },
    #[error("entry {index} has a non-finite coordinate or duration")]
    NonFinite { index: i64 },
    #[error("pseudo-orbit body is empty")]
    Empty,
    #[error("delta must be positive and finite, got {0}")]
    BadDelta(f64),
    #[error("{which} extension is neither a singularity nor periodic with its duration (residual {residual:e})")]
    BadExtension { which: &'static str, residual: f64 },
    #[error("index {0} outside the chain")]
    IndexOutOfRange(i64),
    #[error("time {t} outside the covered range [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Precondition(String),
}

/// One chain element `(x_i, t_i)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrbitEntry {
    pub point: Vec<f64>,
    pub duration: f64,
}

impl OrbitEntry {
    pub fn new(point: Vec<f64>, duration: f64) -> Self {
        Self { point, duration }
    }
}

/// Residual below which an extension counts as fixed by its own step.
const EXTENSION_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct PseudoOrbit {
    spec: VectorFieldSpec,
    delta: f64,
    head: Option<OrbitEntry>,
    body: Vec<OrbitEntry>,
    tail: Option<OrbitEntry>,
}

fn check_entry(spec: &VectorFieldSpec, e: &OrbitEntry, index: i64) -> Result<(), PseudoOrbitError> {
    spec.check_dim(&e.point)?;
    if !e.duration.is_finite() || e.point.iter().any(|v| !v.is_finite()) {
        return Err(PseudoOrbitError::NonFinite { index });
    }
    if !(e.duration >= 1.0) {
        return Err(PseudoOrbitError::ShortDuration {
            index,
            t: e.duration,
        });
    }
    Ok(())
}

impl PseudoOrbit {
    pub fn new(
        spec: &VectorFieldSpec,
        delta: f64,
        body: Vec<OrbitEntry>,
    ) -> Result<Self, PseudoOrbitError> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(PseudoOrbitError::BadDelta(delta));
        }
        if body.is_empty() {
            return Err(PseudoOrbitError::Empty);
        }
        for (i, e) in body.iter().enumerate() {
            check_entry(spec, e, i as i64)?;
        }
        Ok(Self {
            spec: spec.clone(),
            delta,
            head: None,
            body,
            tail: None,
        })
    }

    fn check_extension(&self, e: &OrbitEntry, which: &'static str) -> Result<(), PseudoOrbitError> {
        let f = self.spec.field(&e.point);
        if f.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-10 {
            return Ok(());
        }
        let end = flow_at(
            &self.spec,
            &e.point,
            e.duration,
            &IntegratorOptions::with_tol(1e-11),
        )?;
        let residual = self.spec.distance(&end, &e.point);
        if residual <= EXTENSION_TOL {
            Ok(())
        } else {
            Err(PseudoOrbitError::BadExtension { which, residual })
        }
    }

    /// Extend the chain to `−∞` by repeating `entry`.
    pub fn with_head(mut self, entry: OrbitEntry) -> Result<Self, PseudoOrbitError> {
        check_entry(&self.spec, &entry, -1)?;
        self.check_extension(&entry, "head")?;
        self.head = Some(entry);
        Ok(self)
    }

    /// Extend the chain to `+∞` by repeating `entry`.
    pub fn with_tail(mut self, entry: OrbitEntry) -> Result<Self, PseudoOrbitError> {
        check_entry(&self.spec, &entry, self.body.len() as i64)?;
        self.check_extension(&entry, "tail")?;
        self.tail = Some(entry);
        Ok(self)
    }

    pub fn spec(&self) -> &VectorFieldSpec {
        &self.spec
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn body(&self) -> &[OrbitEntry] {
        &self.body
    }

    pub fn head(&self) -> Option<&OrbitEntry> {
        self.head.as_ref()
    }

    pub fn tail(&self) -> Option<&OrbitEntry> {
        self.tail.as_ref()
    }

    /// Number of body entries.
    pub fn len(&self) -> usize {
        self.body.len()
    }

    pub fn is_empty(&self) -> bool {
        self.body.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.head.is_none() && self.tail.is_none()
    }

    /// Entry `i`; negative indices hit the head, indices `≥ len` the tail.
    pub fn entry(&self, i: i64) -> Result<&OrbitEntry, PseudoOrbitError> {
        let len = self.body.len() as i64;
        if i < 0 {
            self.head
                .as_ref()
                .ok_or(PseudoOrbitError::IndexOutOfRange(i))
        } else if i >= len {
            self.tail
                .as_ref()
                .ok_or(PseudoOrbitError::IndexOutOfRange(i))
        } else {
            Ok(&self.body[i as usize])
        }
    }

    /// Sum of body durations, `S_len`.
    pub fn body_time(&self) -> f64 {
        self.body.iter().map(|e| e.duration).sum()
    }

    /// `S_i`. For a finite chain `i = len` (the end time) is allowed.
    pub fn accumulated_time(&self, i: i64) -> Result<f64, PseudoOrbitError> {
        let len = self.body.len() as i64;
        if i == 0 {
            return Ok(0.0);
        }
        if i < 0 {
            let head = self
                .head
                .as_ref()
                .ok_or(PseudoOrbitError::IndexOutOfRange(i))?;
            return Ok(i as f64 * head.duration);
        }
        if i <= len {
            return Ok(self.body[..i as usize].iter().map(|e| e.duration).sum());
        }
        let tail = self
            .tail
            .as_ref()
            .ok_or(PseudoOrbitError::IndexOutOfRange(i))?;
        Ok(self.body_time() + (i - len) as f64 * tail.duration)
    }

    /// Covered time range of the concatenation (infinite ends for extensions).
    pub fn time_range(&self) -> (f64, f64) {
        let lo = if self.head.is_some() {
            f64::NEG_INFINITY
        } else {
            0.0
        };
        let hi = if self.tail.is_some() {
            f64::INFINITY
        } else {
            self.body_time()
        };
        (lo, hi)
    }

    /// Index `i` with `S_i ≤ t < S_{i+1}` (the last segment is closed for
    /// finite chains) and the offset `t − S_i`.
    pub fn locate(&self, t: f64) -> Result<(i64, f64), PseudoOrbitError> {
        let (lo, hi) = self.time_range();
        if !(t >= lo && t <= hi) || t.is_nan() {
            return Err(PseudoOrbitError::TimeOutOfRange { t, lo, hi });
        }
        if t < 0.0 {
            let d = self.head.as_ref().expect("range checked").duration;
            let i = (t / d).floor();
            let mut s = t - i * d;
            let mut i = i as i64;
            if s >= d {
                // rounding at the boundary
                s -= d;
                i += 1;
            }
            return Ok((i, s.max(0.0)));
        }
        let mut acc = 0.0;
        for (i, e) in self.body.iter().enumerate() {
            if t < acc + e.duration {
                return Ok((i as i64, t - acc));
            }
            acc += e.duration;
        }
        let len = self.body.len() as i64;
        match &self.tail {
            Some(tail) => {
                let k = ((t - acc) / tail.duration).floor();
                Ok((len + k as i64, t - acc - k * tail.duration))
            }
            None => {
                let last = self.body.last().expect("non-empty");
                Ok((len - 1, last.duration.min(t - (acc - last.duration))))
            }
        }
    }

    /// Plain text form: header `n delta`, then rows `i t x_0 … x_{n−1}`.
    /// Row `-1` is the head and row `len` the tail; chains with extensions
    /// carry a `# body <len>` line so the tail row is unambiguous.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{} {}", self.dim(), self.delta).unwrap();
        if !self.is_finite() {
            writeln!(s, "# body {}", self.body.len()).unwrap();
        }
        let mut row = |i: i64, e: &OrbitEntry| {
            write!(s, "{} {}", i, e.duration).unwrap();
            for v in &e.point {
                write!(s, " {}", v).unwrap();
            }
            s.push('\n');
        };
        if let Some(h) = &self.head {
            row(-1, h);
        }
        for (i, e) in self.body.iter().enumerate() {
            row(i as i64, e);
        }
        if let Some(t) = &self.tail {
            row(self.body.len() as i64, t);
        }
        s
    }

    pub fn from_text(spec: &VectorFieldSpec, text: &str) -> Result<Self, PseudoOrbitError> {
        let perr = |line: usize, msg: String| PseudoOrbitError::Parse { line, msg };
        let mut body_len: Option<usize> = None;
        let mut lines = Vec::new();
        for (ln, l) in text.lines().enumerate() {
            let l = l.trim();
            if let Some(c) = l.strip_prefix('#') {
                let c: Vec<&str> = c.split_whitespace().collect();
                if c.len() == 2 && c[0] == "body" {
                    body_len = Some(
                        c[1].parse()
                            .map_err(|e| perr(ln + 1, format!("body length: {e}")))?,
                    );
                }
            } else if !l.is_empty() {
                lines.push((ln + 1, l));
            }
        }
        let mut lines = lines.into_iter();
        let (hl, header) = lines
            .next()
            .ok_or_else(|| perr(1, "missing header".into()))?;
        let hv: Vec<&str> = header.split_whitespace().collect();
        if hv.len() != 2 {
            return Err(perr(hl, "header must be `n delta`".into()));
        }
        let n: usize = hv[0]
            .parse()
            .map_err(|e| perr(hl, format!("dimension: {e}")))?;
        if n != spec.dim() {
            return Err(perr(
                hl,
                format!(
                    "dimension {n} does not match field dimension {}",
                    spec.dim()
                ),
            ));
        }
        let delta: f64 = hv[1].parse().map_err(|e| perr(hl, format!("delta: {e}")))?;
        let mut head = None;
        let mut tail = None;
        let mut body = Vec::new();
        for (ln, l) in lines {
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != n + 2 {
                return Err(perr(
                    ln,
                    format!("expected {} fields, found {}", n + 2, f.len()),
                ));
            }
            let i: i64 = f[0].parse().map_err(|e| perr(ln, format!("index: {e}")))?;
            let t: f64 = f[1]
                .parse()
                .map_err(|e| perr(ln, format!("duration: {e}")))?;
            let point = f[2..]
                .iter()
                .map(|v| v.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| perr(ln, format!("coordinate: {e}")))?;
            let e = OrbitEntry::new(point, t);
            let in_body = body_len.is_none_or(|len| (body.len()) < len);
            if i == -1 && head.is_none() && body.is_empty() {
                head = Some(e);
            } else if i == body.len() as i64 && in_body && tail.is_none() {
                body.push(e);
            } else if i == body.len() as i64 && !in_body && tail.is_none() {
                tail = Some(e);
            } else {
                return Err(perr(ln, format!("unexpected row index {i}")));
            }
        }
        if let Some(len) = body_len {
            if body.len() != len {
                return Err(perr(
                    hl,
                    format!("declared {len} body rows, found {}", body.len()),
                ));
            }
        }
        let mut po = PseudoOrbit::new(spec, delta, body)?;
        if let Some(h) = head {
            po = po.with_head(h)?;
        }
        if let Some(t) = tail {
            po = po.with_tail(t)?;
        }
        Ok(po)
    }
}

/// One gap `d(X_{t_i}(x_i), x_{i+1})`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Gap {
    pub from: i64,
    pub to: i64,
    pub distance: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChainVerification {
    pub delta: f64,
    pub gaps: Vec<Gap>,
    pub max_gap: f64,
    pub verdict: bool,
}

/// Every gap of the chain, including head→head and tail→tail, and the
/// verdict `all gaps < δ`.
pub fn verify_chain(po: &PseudoOrbit, tol: f64) -> ChainVerification {
    let opts = IntegratorOptions::with_tol(tol);
    let len = po.len() as i64;
    let mut pairs: Vec<(i64, i64)> = Vec::new();
    if po.head.is_some() {
        pairs.push((-2, -1));
        pairs.push((-1, 0));
    }
    for i in 0..len - 1 {
        pairs.push((i, i + 1));
    }
    if po.tail.is_some() {
        pairs.push((len - 1, len));
        pairs.push((len, len + 1));
    }
    let gaps: Vec<Gap> = pairs
        .into_iter()
        .map(|(a, b)| {
            let ea = po.entry(a).expect("index in range");
            let eb = po.entry(b).expect("index in range");
            match flow_at(&po.spec, &ea.point, ea.duration, &opts) {
                Ok(end) => Gap {
                    from: a,
                    to: b,
                    distance: Some(po.spec.distance(&end, &eb.point)),
                    failure: None,
                },
                Err(e) => Gap {
                    from: a,
                    to: b,
                    distance: None,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect();
    let max_gap = gaps
        .iter()
        .map(|g| g.distance.unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max);
    let verdict = gaps
        .iter()
        .all(|g| matches!(g.distance, Some(d) if d < po.delta));
    ChainVerification {
        delta: po.delta,
        gaps,
        max_gap,
        verdict,
    }
}

/// `x_0 * t = X_{t − S_i}(x_i)` for `t ∈ [S_i, S_{i+1})`.
pub fn eval_concat(
    po: &PseudoOrbit,
    t: f64,
    opts: &IntegratorOptions,
) -> Result<Vec<f64>, PseudoOrbitError> {
    let (i, s) = po.locate(t)?;
    let e = po.entry(i)?;
    Ok(flow_at(&po.spec, &e.point, s, opts)?)
}

/// Dense trajectories of every distinct segment, for repeated evaluation of
/// the concatenation.
#[derive(Clone, Debug)]
pub struct ConcatCache {
    po: PseudoOrbit,
    head: Option<Trajectory>,
    body: Vec<Trajectory>,
    tail: Option<Trajectory>,
}

impl ConcatCache {
    pub fn new(po: &PseudoOrbit, opts: &IntegratorOptions) -> Result<Self, PseudoOrbitError> {
        let seg = |e: &OrbitEntry| integrate(&po.spec, &e.point, (0.0, e.duration), opts);
        Ok(Self {
            head: po.head.as_ref().map(seg).transpose()?,
            body: po.body.iter().map(seg).collect::<Result<_, _>>()?,
            tail: po.tail.as_ref().map(seg).transpose()?,
            po: po.clone(),
        })
    }

    pub fn pseudo_orbit(&self) -> &PseudoOrbit {
        &self.po
    }

    /// `X_s(x_i)` for `s ∈ [0, t_i]`; evaluating at `s = t_i` gives the
    /// left limit at the segment's end.
    pub fn eval_segment(&self, i: i64, s: f64) -> Result<Vec<f64>, PseudoOrbitError> {
        let len = self.body.len() as i64;
        let traj = if i < 0 {
            self.head.as_ref()
        } else if i >= len {
            self.tail.as_ref()
        } else {
            Some(&self.body[i as usize])
        }
        .ok_or(PseudoOrbitError::IndexOutOfRange(i))?;
        let d = traj.bounds().1;
        Ok(traj.eval(s.clamp(0.0, d))?)
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>, PseudoOrbitError> {
        let (i, s) = self.po.locate(t)?;
        self.eval_segment(i, s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseOptions {
    /// Anchor the chain to the exact orbit `r_i` of `x0`: each point is
    /// `r_i + ξ_i` with `ξ_i` uniform in a ball of radius at most this value,
    /// shrunk until the step perturbation has norm ≤ `noise`. Without it,
    /// chains near a saddle drift off exponentially.
    pub tube: Option<f64>,
    pub integrator: IntegratorOptions,
}

impl Default for NoiseOptions {
    fn default() -> Self {
        Self {
            tube: None,
            integrator: IntegratorOptions::with_tol(1e-10),
        }
    }
}

fn ball_sample(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> Vec<f64> {
    if radius == 0.0 {
        return vec![0.0; n];
    }
    let mut dir: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let norm = dir
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    let r = radius * rng.random::<f64>().powf(1.0 / n as f64);
    for v in &mut dir {
        *v *= r / norm;
    }
    dir
}

/// `x_{i+1} = X_step(x_i) + e_i` with `e_i` uniform in the ball of radius
/// `noise`; the chain declares `δ = noise + 10·tol`.
pub fn generate_noisy(
    spec: &VectorFieldSpec,
    x0: &[f64],
    count: usize,
    step: f64,
    noise: f64,
    seed: u64,
    opts: &NoiseOptions,
) -> Result<PseudoOrbit, PseudoOrbitError> {
    spec.check_dim(x0)?;
    if count == 0 {
        return Err(PseudoOrbitError::Empty);
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(PseudoOrbitError::Precondition(format!(
            "noise must be ≥ 0, got {noise}"
        )));
    }
    let n = spec.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut body = vec![OrbitEntry::new(x0.to_vec(), step)];
    let mut reference = x0.to_vec();
    let mut x = x0.to_vec();
    for _ in 1..count {
        let image = flow_at(spec, &x, step, &opts.integrator)?;
        if opts.tube.is_some() {
            reference = flow_at(spec, &reference, step, &opts.integrator)?;
        }
        x = match opts.tube {
            None => image
                .iter()
                .zip(ball_sample(&mut rng, n, noise))
                .map(|(a, b)| a + b)
                .collect(),
            Some(r) => {
                // anchor to the reference orbit; shrink until the step error fits
                let lip = tangent_flow(spec, &x, step, &opts.integrator)?.norm();
                let mut rho = r.min(noise / (1.0 + 1.1 * lip));
                let mut chosen = None;
                for _ in 0..60 {
                    let xi = ball_sample(&mut rng, n, rho);
                    let cand: Vec<f64> = reference.iter().zip(&xi).map(|(a, b)| a + b).collect();
                    if spec.distance(&cand, &image) <= noise {
                        chosen = Some(cand);
                        break;
                    }
                    rho *= 0.5;
                }
                match chosen {
                    Some(c) => c,
                    None if spec.distance(&reference, &image) <= noise => reference.clone(),
                    None => return Err(PseudoOrbitError::Precondition(
                        "could not anchor the chain to the reference orbit within the noise bound"
                            .into(),
                    )),
                }
            }
        };
        body.push(OrbitEntry::new(x.clone(), step));
    }
    PseudoOrbit::new(spec, noise + 10.0 * opts.integrator.tol, body)
}

/// Chain of singularities `(α_i, 0, …, 0)` with `α_i = i·(ε/2)/n` and
/// `n = ⌈(ε/2)/(0.8·δ)⌉`, extended constantly at both ends.
pub fn case1_chain(
    spec: &VectorFieldSpec,
    epsilon: f64,
    delta: f64,
) -> Result<PseudoOrbit, PseudoOrbitError> {
    if !(delta > 0.0 && delta < epsilon / 2.0) {
        return Err(PseudoOrbitError::Precondition(format!(
            "need 0 < delta < epsilon/2, got delta = {delta}, epsilon = {epsilon}"
        )));
    }
    let half = epsilon / 2.0;
    let steps = (half / (0.8 * delta)).ceil() as usize;
    let dim = spec.dim();
    let body: Vec<OrbitEntry> = (0..=steps)
        .map(|i| {
            let mut p = vec![0.0; dim];
            p[0] = if i == steps {
                half
            } else {
                i as f64 * half / steps as f64
            };
            OrbitEntry::new(p, 1.0)
        })
        .collect();
    for (i, e) in body.iter().enumerate() {
        let f = spec.field(&e.point);
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return Err(PseudoOrbitError::Precondition(format!(
                "chain point {i} is not a singularity of {} (|X| = {norm:e})",
                spec.name()
            )));
        }
    }
    let head = body[0].clone();
    let tail = body[steps].clone();
    PseudoOrbit::new(spec, delta, body)?
        .with_head(head)?
        .with_tail(tail)
}

/// `x_i = p + (i/N)·C^i v` on the section through the periodic point `p`,
/// with `t_i` the first-return time of `x_i`.
///
/// `C` is the linear Poincaré map `Ψ_T(p)`; `v` must be normal to the orbit
/// and lie in a subspace on which `C` is an isometry.
pub fn case2_chain(
    spec: &VectorFieldSpec,
    p: &[f64],
    period: f64,
    v: &[f64],
    steps: usize,
    delta: f64,
    opts: &PoincareOptions,
) -> Result<PseudoOrbit, PseudoOrbitError> {
    spec.check_dim(p)?;
    spec.check_dim(v)?;
    if steps == 0 {
        return Err(PseudoOrbitError::Empty);
    }
    let lp = linear_poincare(spec, p, period, opts)?;
    let closing = spec.distance(&lp.end, p);
    if closing > 1e-6 {
        return Err(PseudoOrbitError::Precondition(format!(
            "p is not periodic with the given period (|X_T(p) - p| = {closing:e})"
        )));
    }
    let frame = normal_frame(spec, p, opts)?;
    let vv = DVector::from_column_slice(v);
    let w = frame.transpose() * &vv;
    if (&frame * &w - &vv).norm() > 1e-9 * (1.0 + vv.norm()) {
        return Err(PseudoOrbitError::Precondition(
            "v is not normal to the orbit at p".into(),
        ));
    }
    let c: &DMatrix<f64> = &lp.matrix;
    let cw = c * &w;
    if (cw.norm() - w.norm()).abs() > 1e-6 * w.norm().max(1e-300)
        || (c.transpose() * &cw - &w).norm() > 1e-6 * w.norm().max(1e-300)
    {
        return Err(PseudoOrbitError::Precondition(
            "v does not lie in a subspace on which the linear Poincaré map is an isometry".into(),
        ));
    }
    let shift = |u: &DVector<f64>, scale: f64| -> Vec<f64> {
        let amb = &frame * u;
        p.iter()
            .zip(amb.iter())
            .map(|(a, b)| a + scale * b)
            .collect()
    };
    let mut body = Vec::with_capacity(steps);
    let mut ci = w.clone();
    for i in 0..steps {
        let x = shift(&ci, i as f64 / steps as f64);
        let ret = first_return(spec, p, &x, period, opts)?;
        if !(ret.time >= 0.9 * period && ret.time <= 1.1 * period) {
            return Err(PseudoOrbitError::Precondition(format!(
                "return time {} of entry {i} outside [0.9T, 1.1T]",
                ret.time
            )));
        }
        body.push(OrbitEntry::new(x, ret.time));
        ci = c * ci;
    }
    let tail_point = shift(&ci, 1.0);
    let tail_time = first_return(spec, p, &tail_point, period, opts)?.time;
    PseudoOrbit::new(spec, delta, body)?
        .with_head(OrbitEntry::new(p.to_vec(), period))?
        .with_tail(OrbitEntry::new(tail_point, tail_time))
}
