//! Built-in test systems with closed-form ground truth.
//!
//! Besides two hyperbolic reference systems (`linear_saddle3d`,
//! `saddle_cycle`) this module provides the local normal forms used to show
//! that non-hyperbolic critical elements break shadowing: a line of
//! singularities (`case1`), a singularity with a rotation block
//! (`case1_rotation`) and a periodic orbit with a neutral Floquet multiplier
//! (`case2_center_cycle`).

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::flow::{ConservedQuantity, FieldFn, JacobianFn, VectorFieldSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("unknown scenario `{0}` (known: {known})", known = builtin_names().join(", "))]
    Unknown(String),
    #[error("scenario `{scenario}` has no parameter `{param}`")]
    UnknownParam { scenario: String, param: String },
    #[error("invalid parameter `{param}` = {value}: {reason}")]
    BadParam {
        param: String,
        value: f64,
        reason: String,
    },
    #[error("nonlinearity is not of higher than quadratic order at the origin (ratio {coarse:e} -> {fine:e})")]
    NonlinearityOrder { coarse: f64, fine: f64 },
}

/// Radial bump: 1 on `|x| ≤ ε/4`, 0 on `|x| ≥ ε`, cubic smoothstep between.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bump {
    epsilon: f64,
}

pub fn bump_beta(epsilon: f64) -> Result<Bump, ScenarioError> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(ScenarioError::BadParam {
            param: "epsilon".into(),
            value: epsilon,
            reason: "must be positive".into(),
        });
    }
    Ok(Bump { epsilon })
}

impl Bump {
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn width(&self) -> f64 {
        0.75 * self.epsilon
    }

    pub fn value(&self, x: f64) -> f64 {
        let a = x.abs();
        let inner = 0.25 * self.epsilon;
        if a <= inner {
            1.0
        } else if a >= self.epsilon {
            0.0
        } else {
            let s = (a - inner) / self.width();
            1.0 - s * s * (3.0 - 2.0 * s)
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let a = x.abs();
        let inner = 0.25 * self.epsilon;
        if a <= inner || a >= self.epsilon {
            0.0
        } else {
            let s = (a - inner) / self.width();
            -6.0 * s * (1.0 - s) / self.width() * x.signum()
        }
    }
}

/// Higher-order term `K` added outside the linear core of the normal forms.
#[derive(Clone, Default)]
pub enum Nonlinearity {
    #[default]
    Zero,
    /// `K(x) = c ‖x‖² x`.
    CubicRadial { coeff: f64 },
    Custom {
        field: Arc<FieldFn>,
        jacobian: Arc<JacobianFn>,
    },
}

impl std::fmt::Debug for Nonlinearity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Zero => write!(f, "Zero"),
            Self::CubicRadial { coeff } => write!(f, "CubicRadial({coeff})"),
            Self::Custom { .. } => write!(f, "Custom"),
        }
    }
}

impl Nonlinearity {
    pub fn is_zero(&self) -> bool {
        matches!(self, Self::Zero) || matches!(self, Self::CubicRadial { coeff } if *coeff == 0.0)
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Self::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            Self::CubicRadial { coeff } => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                for (o, &xi) in out.iter_mut().zip(x) {
                    *o = coeff * r2 * xi;
                }
            }
            Self::Custom { field, .. } => field(x, out),
        }
    }

    fn jacobian(&self, x: &[f64], out: &mut DMatrix<f64>) {
        match self {
            Self::Zero => out.fill(0.0),
            Self::CubicRadial { coeff } => {
                let n = x.len();
                let r2: f64 = x.iter().map(|v| v * v).sum();
                for i in 0..n {
                    for j in 0..n {
                        let delta = if i == j { r2 } else { 0.0 };
                        out[(i, j)] = coeff * (delta + 2.0 * x[i] * x[j]);
                    }
                }
            }
            Self::Custom { jacobian, .. } => jacobian(x, out),
        }
    }

    /// Rejects `K` unless `‖K(x)‖/‖x‖²` shrinks by at least 10× when `‖x‖`
    /// shrinks 100× (numerical proxy for `K(x)/‖x‖² → 0`).
    pub fn check_order(&self, n: usize) -> Result<(), ScenarioError> {
        let ratio = |r: f64| {
            let mut worst = 0.0f64;
            let mut out = vec![0.0; n];
            for dir in probe_directions(n) {
                let x: Vec<f64> = dir.iter().map(|d| d * r).collect();
                self.eval(&x, &mut out);
                let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
                worst = worst.max(norm / (r * r));
            }
            worst
        };
        let coarse = ratio(1e-2);
        let fine = ratio(1e-4);
        if fine <= 0.1 * coarse + 1e-12 {
            Ok(())
        } else {
            Err(ScenarioError::NonlinearityOrder { coarse, fine })
        }
    }
}

fn probe_directions(n: usize) -> Vec<Vec<f64>> {
    let mut dirs = Vec::new();
    for i in 0..n {
        for s in [1.0, -1.0] {
            let mut v = vec![0.0; n];
            v[i] = s;
            dirs.push(v);
        }
    }
    let c = 1.0 / (n as f64).sqrt();
    dirs.push(vec![c; n]);
    dirs.push((0..n).map(|i| if i % 2 == 0 { c } else { -c }).collect());
    dirs
}

/// `ẋ = A x + (1 − β(‖x‖)) K(x)`.
fn cut_off_linear(name: &str, a: DMatrix<f64>, k: Nonlinearity, bump: Bump) -> VectorFieldSpec {
    let n = a.nrows();
    let (a_f, k_f) = (a.clone(), k.clone());
    let field = move |x: &[f64], out: &mut [f64]| {
        let mut kx = vec![0.0; n];
        k_f.eval(x, &mut kx);
        let rho = bump.value(norm(x));
        for i in 0..n {
            out[i] = (0..n).map(|j| a_f[(i, j)] * x[j]).sum::<f64>() + (1.0 - rho) * kx[i];
        }
    };
    let jac = move |x: &[f64], out: &mut DMatrix<f64>| {
        let r = norm(x);
        let rho = bump.value(r);
        let mut dk = DMatrix::zeros(n, n);
        k.jacobian(x, &mut dk);
        let mut kx = vec![0.0; n];
        k.eval(x, &mut kx);
        let dbeta = if r > 0.0 { bump.derivative(r) / r } else { 0.0 };
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] = a[(i, j)] + (1.0 - rho) * dk[(i, j)] - kx[i] * dbeta * x[j];
            }
        }
    };
    VectorFieldSpec::new(name, n, field, jac)
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows() + b.nrows();
    let mut m = DMatrix::zeros(n, n);
    m.view_mut((0, 0), a.shape()).copy_from(a);
    m.view_mut(a.shape(), b.shape()).copy_from(b);
    m
}

/// `ẋ = D x + (1 − ρ(x)) K(x)` with `D = diag(0, B)`; inside the `ε/4` ball
/// the flow is `(y, z) ↦ (y, exp(Bt) z)`.
pub fn case1_field(
    b: DMatrix<f64>,
    k: Nonlinearity,
    epsilon: f64,
) -> Result<VectorFieldSpec, ScenarioError> {
    let bump = bump_beta(epsilon)?;
    assert!(b.is_square(), "B must be square");
    let n = 1 + b.nrows();
    k.check_order(n)?;
    let d = block_diag(&DMatrix::zeros(1, 1), &b);
    let mut q = ConservedQuantity::new("y", 1.0, |x: &[f64]| x[0]);
    if !k.is_zero() {
        q = q.valid_within(0.25 * epsilon);
    }
    Ok(cut_off_linear("case1", d, k, bump).with_conserved(q))
}

/// `ẋ = [[C, 0], [0, B]] x` near the origin with `C = [[0, b], [−b, 0]]`.
pub fn case1_rotation_field(
    rotation: f64,
    b: DMatrix<f64>,
    k: Nonlinearity,
    epsilon: f64,
) -> Result<VectorFieldSpec, ScenarioError> {
    if rotation == 0.0 || !rotation.is_finite() {
        return Err(ScenarioError::BadParam {
            param: "rotation".into(),
            value: rotation,
            reason: "rotation rate must be non-zero".into(),
        });
    }
    let bump = bump_beta(epsilon)?;
    let n = 2 + b.nrows();
    k.check_order(n)?;
    let c = DMatrix::from_row_slice(2, 2, &[0.0, rotation, -rotation, 0.0]);
    let a = block_diag(&c, &b);
    let mut q = ConservedQuantity::new("radius", 1.0, |x: &[f64]| x[0].hypot(x[1]));
    if !k.is_zero() {
        q = q.valid_within(0.25 * epsilon);
    }
    Ok(cut_off_linear("case1_rotation", a, k, bump).with_conserved(q))
}

/// `θ̇ = 1, ẏ = 0, ż = −c z` on `S¹ × R²`: a family of periodic orbits
/// `{y = const, z = 0}` with Floquet multipliers `{1, e^{−2πc}}`.
pub fn case2_center_cycle(contraction: f64) -> VectorFieldSpec {
    VectorFieldSpec::new(
        "case2_center_cycle",
        3,
        move |x, out| {
            out[0] = 1.0;
            out[1] = 0.0;
            out[2] = -contraction * x[2];
        },
        move |_, jac| {
            jac.fill(0.0);
            jac[(2, 2)] = -contraction;
        },
    )
    .with_angle(0, 2.0 * PI)
    .with_conserved(ConservedQuantity::new("y", 1.0, |x: &[f64]| x[1]))
}

/// `ẋ = x(1−r²) − y, ẏ = y(1−r²) + x, ż = z`.
pub fn saddle_cycle() -> VectorFieldSpec {
    VectorFieldSpec::new(
        "saddle_cycle",
        3,
        |p, out| {
            let (x, y, z) = (p[0], p[1], p[2]);
            let g = 1.0 - x * x - y * y;
            out[0] = x * g - y;
            out[1] = y * g + x;
            out[2] = z;
        },
        |p, jac| {
            let (x, y) = (p[0], p[1]);
            let g = 1.0 - x * x - y * y;
            jac.fill(0.0);
            jac[(0, 0)] = g - 2.0 * x * x;
            jac[(0, 1)] = -2.0 * x * y - 1.0;
            jac[(1, 0)] = -2.0 * x * y + 1.0;
            jac[(1, 1)] = g - 2.0 * y * y;
            jac[(2, 2)] = 1.0;
        },
    )
}

/// `ẋ = diag(−2, −1, 1) x`.
pub fn linear_saddle3d() -> VectorFieldSpec {
    let a = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&[-2.0, -1.0, 1.0]));
    VectorFieldSpec::linear("linear_saddle3d", a)
}

/// A known analytic invariant set, used as ground truth for chain recurrence.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InvariantSet {
    Point {
        point: Vec<f64>,
    },
    /// Circle of `radius` about `center` in the plane of coordinates `axes`.
    Circle {
        center: Vec<f64>,
        radius: f64,
        axes: (usize, usize),
    },
    Segment {
        a: Vec<f64>,
        b: Vec<f64>,
    },
}

impl InvariantSet {
    pub fn distance(&self, x: &[f64]) -> f64 {
        match self {
            Self::Point { point } => norm(&sub(x, point)),
            Self::Circle {
                center,
                radius,
                axes,
            } => {
                let d = sub(x, center);
                let planar = d[axes.0].hypot(d[axes.1]);
                let off: f64 = d
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != axes.0 && *i != axes.1)
                    .map(|(_, v)| v * v)
                    .sum();
                ((planar - radius).powi(2) + off).sqrt()
            }
            Self::Segment { a, b } => {
                let ab = sub(b, a);
                let ax = sub(x, a);
                let len2: f64 = ab.iter().map(|v| v * v).sum();
                let s = if len2 > 0.0 {
                    (ax.iter().zip(&ab).map(|(p, q)| p * q).sum::<f64>() / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let proj: Vec<f64> = a.iter().zip(&ab).map(|(ai, d)| ai + s * d).collect();
                norm(&sub(x, &proj))
            }
        }
    }

    /// Minimum distance from the set to an axis-aligned box.
    pub fn distance_to_box(&self, lo: &[f64], hi: &[f64]) -> f64 {
        match self {
            Self::Point { point } => box_distance(point, lo, hi),
            Self::Circle {
                center,
                radius,
                axes,
            } => {
                // distance from the circle to the box: the off-plane gap and
                // the planar annulus gap combine in quadrature
                let off: f64 = (0..lo.len())
                    .filter(|i| i != &axes.0 && i != &axes.1)
                    .map(|i| interval_gap(center[i], lo[i], hi[i]).powi(2))
                    .sum();
                let (i, j) = *axes;
                let near = [
                    center[i].clamp(lo[i], hi[i]) - center[i],
                    center[j].clamp(lo[j], hi[j]) - center[j],
                ];
                let dmin = near[0].hypot(near[1]);
                let far_x = (lo[i] - center[i]).abs().max((hi[i] - center[i]).abs());
                let far_y = (lo[j] - center[j]).abs().max((hi[j] - center[j]).abs());
                let dmax = far_x.hypot(far_y);
                let planar = if *radius < dmin {
                    dmin - radius
                } else if *radius > dmax {
                    radius - dmax
                } else {
                    0.0
                };
                (planar * planar + off).sqrt()
            }
            Self::Segment { a, b } => {
                // sample the segment densely; boxes here are small cells
                let steps = 2000;
                (0..=steps)
                    .map(|k| {
                        let s = k as f64 / steps as f64;
                        let p: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + s * (y - x)).collect();
                        box_distance(&p, lo, hi)
                    })
                    .fold(f64::INFINITY, f64::min)
            }
        }
    }
}

fn interval_gap(v: f64, lo: f64, hi: f64) -> f64 {
    if v < lo {
        lo - v
    } else if v > hi {
        v - hi
    } else {
        0.0
    }
}

fn box_distance(p: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    p.iter()
        .zip(lo.iter().zip(hi))
        .map(|(&v, (&l, &h))| interval_gap(v, l, h).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SingularityFact {
    pub point: Vec<f64>,
    /// `(re, im)` pairs.
    pub eigenvalues: Vec<(f64, f64)>,
    pub hyperbolic: bool,
    pub provenance: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PeriodicFact {
    pub point: Vec<f64>,
    pub period: f64,
    /// Real Floquet multipliers of the linear Poincaré map, sorted ascending.
    pub multipliers: Vec<f64>,
    /// Exponential rates of the normal directions, sorted ascending.
    pub normal_rates: Vec<f64>,
    pub hyperbolic: bool,
    pub provenance: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ScenarioFacts {
    pub singularities: Vec<SingularityFact>,
    pub periodic_orbits: Vec<PeriodicFact>,
    pub conserved: Option<String>,
    /// Analytic chain-recurrent set, when known.
    pub recurrent_sets: Vec<InvariantSet>,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub spec: VectorFieldSpec,
    pub facts: ScenarioFacts,
    pub params: BTreeMap<String, f64>,
}

/// Names accepted by [`builtin`], sorted.
pub fn builtin_names() -> Vec<&'static str> {
    vec![
        "case1",
        "case1_rotation",
        "case2_center_cycle",
        "linear_saddle3d",
        "saddle_cycle",
    ]
}

fn defaults(name: &str) -> Option<Vec<(&'static str, f64)>> {
    Some(match name {
        "case1" => vec![("cubic", 0.0), ("epsilon", 0.4), ("stable", -1.0)],
        "case1_rotation" => vec![
            ("cubic", 0.0),
            ("epsilon", 0.4),
            ("rotation", 1.0),
            ("stable", -1.0),
        ],
        "case2_center_cycle" => vec![("contraction", 1.0)],
        "linear_saddle3d" | "saddle_cycle" => vec![],
        _ => return None,
    })
}

/// Parameter names and default values of a built-in scenario.
pub fn builtin_params(name: &str) -> Result<Vec<(&'static str, f64)>, ScenarioError> {
    defaults(name).ok_or_else(|| ScenarioError::Unknown(name.to_string()))
}

/// Look up a built-in scenario by name, overriding default parameters.
pub fn builtin(name: &str, params: &BTreeMap<String, f64>) -> Result<Scenario, ScenarioError> {
    let defs = builtin_params(name)?;
    let mut p: BTreeMap<String, f64> = defs.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    for (k, v) in params {
        if !p.contains_key(k) {
            return Err(ScenarioError::UnknownParam {
                scenario: name.into(),
                param: k.clone(),
            });
        }
        if !v.is_finite() {
            return Err(ScenarioError::BadParam {
                param: k.clone(),
                value: *v,
                reason: "must be finite".into(),
            });
        }
        p.insert(k.clone(), *v);
    }
    let k_of = |c: f64| {
        if c == 0.0 {
            Nonlinearity::Zero
        } else {
            Nonlinearity::CubicRadial { coeff: c }
        }
    };
    let exact = "analytic: closed-form linear normal form".to_string();
    let (spec, facts) = match name {
        "case1" => {
            let (eps, stable) = (p["epsilon"], p["stable"]);
            let spec = case1_field(DMatrix::from_element(1, 1, stable), k_of(p["cubic"]), eps)?;
            let facts = ScenarioFacts {
                singularities: vec![SingularityFact {
                    point: vec![0.0, 0.0],
                    eigenvalues: sorted_pairs(vec![(0.0, 0.0), (stable, 0.0)]),
                    hyperbolic: false,
                    provenance: exact.clone(),
                }],
                periodic_orbits: vec![],
                conserved: Some("Q(y, z) = y".into()),
                recurrent_sets: vec![InvariantSet::Segment {
                    a: vec![-0.25 * eps, 0.0],
                    b: vec![0.25 * eps, 0.0],
                }],
            };
            (spec, facts)
        }
        "case1_rotation" => {
            let (eps, w, stable) = (p["epsilon"], p["rotation"], p["stable"]);
            let spec = case1_rotation_field(
                w,
                DMatrix::from_element(1, 1, stable),
                k_of(p["cubic"]),
                eps,
            )?;
            let facts = ScenarioFacts {
                singularities: vec![SingularityFact {
                    point: vec![0.0; 3],
                    eigenvalues: sorted_pairs(vec![(0.0, w), (0.0, -w), (stable, 0.0)]),
                    hyperbolic: false,
                    provenance: exact.clone(),
                }],
                periodic_orbits: vec![],
                conserved: Some("Q(y1, y2, z) = sqrt(y1² + y2²)".into()),
                recurrent_sets: vec![],
            };
            (spec, facts)
        }
        "case2_center_cycle" => {
            let c = p["contraction"];
            if !(c > 0.0) {
                return Err(ScenarioError::BadParam {
                    param: "contraction".into(),
                    value: c,
                    reason: "must be positive".into(),
                });
            }
            let spec = case2_center_cycle(c);
            let facts = ScenarioFacts {
                singularities: vec![],
                periodic_orbits: vec![PeriodicFact {
                    point: vec![0.0; 3],
                    period: 2.0 * PI,
                    multipliers: vec![(-2.0 * PI * c).exp(), 1.0],
                    normal_rates: vec![-c, 0.0],
                    hyperbolic: false,
                    provenance: "analytic: product system, y conserved".into(),
                }],
                conserved: Some("Q(θ, y, z) = y".into()),
                recurrent_sets: vec![],
            };
            (spec, facts)
        }
        "saddle_cycle" => {
            let facts = ScenarioFacts {
                singularities: vec![SingularityFact {
                    point: vec![0.0; 3],
                    eigenvalues: sorted_pairs(vec![(1.0, 1.0), (1.0, -1.0), (1.0, 0.0)]),
                    hyperbolic: true,
                    provenance: "analytic: linearization at the origin".into(),
                }],
                periodic_orbits: vec![PeriodicFact {
                    point: vec![1.0, 0.0, 0.0],
                    period: 2.0 * PI,
                    multipliers: vec![(-4.0 * PI).exp(), (2.0 * PI).exp()],
                    normal_rates: vec![-2.0, 1.0],
                    hyperbolic: true,
                    provenance: "analytic: polar form r' = r(1 - r²), θ' = 1, z' = z".into(),
                }],
                conserved: None,
                recurrent_sets: vec![
                    InvariantSet::Point {
                        point: vec![0.0; 3],
                    },
                    InvariantSet::Circle {
                        center: vec![0.0; 3],
                        radius: 1.0,
                        axes: (0, 1),
                    },
                ],
            };
            (saddle_cycle(), facts)
        }
        "linear_saddle3d" => {
            let facts = ScenarioFacts {
                singularities: vec![SingularityFact {
                    point: vec![0.0; 3],
                    eigenvalues: vec![(-2.0, 0.0), (-1.0, 0.0), (1.0, 0.0)],
                    hyperbolic: true,
                    provenance: "analytic: diagonal linear field".into(),
                }],
                periodic_orbits: vec![],
                conserved: None,
                recurrent_sets: vec![InvariantSet::Point {
                    point: vec![0.0; 3],
                }],
            };
            (linear_saddle3d(), facts)
        }
        other => return Err(ScenarioError::Unknown(other.to_string())),
    };
    Ok(Scenario {
        spec,
        facts,
        params: p,
    })
}

fn sorted_pairs(mut v: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{flow_at, IntegratorOptions};

    #[test]
    fn bump_conditions() {
        let eps = 0.4;
        let b = bump_beta(eps).unwrap();
        assert_eq!(b.value(0.0), 1.0);
        assert_eq!(b.value(eps), 0.0);
        assert_eq!(b.value(eps / 4.0), 1.0);
        assert_eq!(b.value(2.0 * eps), 0.0);
        for k in 0..100 {
            let x = -0.5 + k as f64 * 0.01;
            assert_eq!(b.value(x), b.value(-x));
            assert!((0.0..=1.0).contains(&b.value(x)));
        }
        assert!(bump_beta(0.0).is_err());
    }

    #[test]
    fn bump_slope_bound() {
        let eps = 0.4;
        let b = bump_beta(eps).unwrap();
        let max = (0..=10_000)
            .map(|k| b.derivative(-eps + 2.0 * eps * k as f64 / 10_000.0).abs())
            .fold(0.0, f64::max);
        assert!((max - 2.0 / eps).abs() < 1e-6, "{max}");
        // derivative agrees with central differences
        for x in [0.12, 0.2, 0.25, 0.33, -0.2] {
            let h = 1e-7;
            let fd = (b.value(x + h) - b.value(x - h)) / (2.0 * h);
            assert!((fd - b.derivative(x)).abs() < 1e-5);
        }
    }

    #[test]
    fn case1_linear_core() {
        let spec = case1_field(DMatrix::from_element(1, 1, -1.0), Nonlinearity::Zero, 0.4).unwrap();
        let x = flow_at(
            &spec,
            &[0.3, 1.0],
            2.0f64.ln(),
            &IntegratorOptions::with_tol(1e-12),
        )
        .unwrap();
        assert!((x[0] - 0.3).abs() < 1e-9);
        assert!((x[1] - 0.5).abs() < 1e-9);
        for k in 0..=20 {
            let y = -0.1 + 0.01 * k as f64;
            assert_eq!(spec.field(&[y, 0.0]), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn case1_with_nonlinearity_is_exactly_linear_inside_core() {
        let eps = 0.4;
        let lin = case1_field(DMatrix::from_element(1, 1, -1.0), Nonlinearity::Zero, eps).unwrap();
        let cub = case1_field(
            DMatrix::from_element(1, 1, -1.0),
            Nonlinearity::CubicRadial { coeff: 3.0 },
            eps,
        )
        .unwrap();
        for k in 0..50 {
            let a = k as f64 * 0.37;
            let r = 0.099 * (k as f64 / 50.0);
            let x = [r * a.cos(), r * a.sin()];
            assert_eq!(lin.field(&x), cub.field(&x));
        }
        // outside the core the nonlinearity is active
        assert_ne!(lin.field(&[0.3, 0.1]), cub.field(&[0.3, 0.1]));
        assert!(cub.jacobian_fd_error(&[0.2, 0.1], 1e-6) < 1e-5);
        assert_eq!(cub.conserved().unwrap().valid_radius, Some(0.1));
    }

    #[test]
    fn quadratic_nonlinearity_rejected() {
        let quad = Nonlinearity::Custom {
            field: Arc::new(|x: &[f64], out: &mut [f64]| {
                out[0] = x[1] * x[1];
                out[1] = 0.0;
            }),
            jacobian: Arc::new(|x: &[f64], out: &mut DMatrix<f64>| {
                out.fill(0.0);
                out[(0, 1)] = 2.0 * x[1];
            }),
        };
        let err = case1_field(DMatrix::from_element(1, 1, -1.0), quad, 0.4).unwrap_err();
        assert!(matches!(err, ScenarioError::NonlinearityOrder { .. }));
    }

    #[test]
    fn rotation_variant_periodic_points() {
        let spec = case1_rotation_field(
            2.0,
            DMatrix::from_element(1, 1, -1.0),
            Nonlinearity::Zero,
            0.4,
        )
        .unwrap();
        let x = flow_at(
            &spec,
            &[0.05, 0.03, 0.0],
            PI,
            &IntegratorOptions::with_tol(1e-12),
        )
        .unwrap();
        assert!(spec.distance(&x, &[0.05, 0.03, 0.0]) < 1e-9);
        assert!(case1_rotation_field(
            0.0,
            DMatrix::from_element(1, 1, -1.0),
            Nonlinearity::Zero,
            0.4
        )
        .is_err());
    }

    #[test]
    fn builtin_lookup() {
        let none = BTreeMap::new();
        for name in builtin_names() {
            let sc = builtin(name, &none).unwrap();
            assert_eq!(sc.spec.name(), name);
        }
        let err = builtin("unknown", &none).unwrap_err();
        assert!(err.to_string().contains("unknown scenario `unknown`"));
        assert!(err.to_string().contains("saddle_cycle"));
        let mut bad = BTreeMap::new();
        bad.insert("nope".to_string(), 1.0);
        assert!(matches!(
            builtin("case1", &bad),
            Err(ScenarioError::UnknownParam { .. })
        ));
        let mut names = builtin_names();
        names.sort();
        assert_eq!(names, builtin_names());
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let none = BTreeMap::new();
        for name in builtin_names() {
            let spec = builtin(name, &none).unwrap().spec;
            for k in 0..20 {
                let x: Vec<f64> = (0..spec.dim())
                    .map(|i| ((k * 7 + i * 3) as f64 * 0.61).sin() * 0.8)
                    .collect();
                assert!(spec.jacobian_fd_error(&x, 1e-6) < 1e-5, "{name}");
            }
        }
    }

    #[test]
    fn invariant_set_distances() {
        let c = InvariantSet::Circle {
            center: vec![0.0; 3],
            radius: 1.0,
            axes: (0, 1),
        };
        assert!((c.distance(&[2.0, 0.0, 0.0]) - 1.0).abs() < 1e-12);
        assert!((c.distance(&[0.0, 1.0, 0.5]) - 0.5).abs() < 1e-12);
        assert_eq!(c.distance_to_box(&[0.9, -0.1, -0.1], &[1.1, 0.1, 0.1]), 0.0);
        assert!(c.distance_to_box(&[-0.1, -0.1, -0.1], &[0.1, 0.1, 0.1]) > 0.8);
        let s = InvariantSet::Segment {
            a: vec![-1.0, 0.0],
            b: vec![1.0, 0.0],
        };
        assert!((s.distance(&[0.5, 0.2]) - 0.2).abs() < 1e-12);
        assert!((s.distance(&[2.0, 0.0]) - 1.0).abs() < 1e-12);
    }
}
