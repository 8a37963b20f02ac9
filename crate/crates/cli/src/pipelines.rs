//! Pipelines: each parses its keys from `[pipeline]`, runs against a
//! scenario and returns report fields, long-format series and extra files.

use std::f64::consts::PI;

use anyhow::{anyhow, bail, Result};
use serde::Serialize;
use serde_json::{json, Map, Value};

use shadowlab::chain_graph::{
    build_chain_graph, chain_recurrent_cells, is_chain_transitive, ChainGraphOptions, Region,
};
use shadowlab::poincare::{
    classify_periodic, classify_singularity, find_periodic_newton, CriticalKind, NormalCocycle,
};
use shadowlab::pseudo_orbit::{
    case1_chain, case2_chain, generate_noisy, verify_chain, ConcatCache, NoiseOptions,
};
use shadowlab::shadowing::{
    conservation_bound, refute_by_conservation, search_horizon, search_shadowing, SearchBudget,
    SeedBox,
};
use shadowlab::splitting::{
    check_domination, check_quasi_hyperbolic, domination_profile, estimate_splitting,
    fit_hyperbolic, liao_shadow_periodic, uniform_period_estimates, SplittingEstimate,
};
use shadowlab::{
    IntegratorOptions, PoincareOptions, PseudoOrbit, Scenario, ShadowOptions, Verdict,
};

use crate::config::{ConfigError, Params, Range};

/// Pipeline names with one-line descriptions, sorted by name.
pub const PIPELINES: &[(&str, &str)] = &[
    (
        "chain-graph",
        "cell graph of delta-chains on a box grid; chain-recurrent cells and classes",
    ),
    (
        "classify",
        "hyperbolicity of a singularity or periodic orbit",
    ),
    (
        "quasi-hyperbolic",
        "quasi-hyperbolicity of an orbit arc, optionally closed to a periodic orbit",
    ),
    (
        "refute",
        "lower bound on the shadowing distance from a conserved quantity",
    ),
    (
        "shadow-search",
        "search for an orbit epsilon-shadowing a pseudo-orbit",
    ),
    (
        "splitting",
        "dominated splitting along an orbit: domination products and hyperbolic rates",
    ),
];

/// One row of `series.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeriesRow {
    pub series: String,
    pub index: usize,
    pub x: f64,
    pub value: f64,
}

fn row(series: impl Into<String>, index: usize, x: f64, value: f64) -> SeriesRow {
    SeriesRow {
        series: series.into(),
        index,
        x,
        value,
    }
}

#[derive(Clone, Debug, Default)]
pub struct PipelineOutput {
    pub verdict: String,
    /// `false` for analysis-negative verdicts (exit code 2).
    pub positive: bool,
    pub summary: String,
    pub fields: Map<String, Value>,
    pub series: Vec<SeriesRow>,
    /// Extra output files as `(name, contents)`.
    pub files: Vec<(String, String)>,
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![a];
    }
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
enum ChainSettings {
    Case1 {
        delta: f64,
    },
    Case2 {
        base: Vec<f64>,
        period: f64,
        v: Vec<f64>,
        steps: usize,
        delta: Option<f64>,
    },
    Noisy {
        x0: Vec<f64>,
        count: usize,
        step: f64,
        noise: f64,
        tube: Option<f64>,
    },
}

impl ChainSettings {
    fn parse(p: &mut Params, scenario: &str, n: usize) -> Result<Self, ConfigError> {
        let default = match scenario {
            "case1" | "case1_rotation" => "case1",
            "case2_center_cycle" => "case2",
            _ => "noisy",
        };
        let (kind, line) = p.string_opt("chain").unwrap_or((default.into(), 0));
        Ok(match kind.as_str() {
            "case1" => ChainSettings::Case1 {
                delta: p.f64_req("delta", Range::Positive)?,
            },
            "case2" => {
                let mut v = vec![0.0; n];
                if n > 1 {
                    v[1] = 0.2;
                }
                ChainSettings::Case2 {
                    base: p.list_opt("base", Some(n))?.unwrap_or_else(|| vec![0.0; n]),
                    period: p.f64_or("period", 2.0 * PI, Range::Positive)?,
                    v: p.list_opt("v", Some(n))?.unwrap_or(v),
                    steps: p.usize_or("steps", 50, 1)?,
                    delta: p.f64_opt("delta", Range::Positive)?,
                }
            }
            "noisy" => ChainSettings::Noisy {
                x0: p.list_req("x0", Some(n))?,
                count: p.usize_or("count", 50, 2)?,
                step: p.f64_or("step", 1.0, Range::Positive)?,
                noise: p.f64_or("noise", 1e-4, Range::NonNegative)?,
                tube: p.f64_opt("tube", Range::Positive)?,
            },
            other => {
                return Err(p.bad(
                    "chain",
                    line,
                    format!("unknown chain `{other}` (expected case1, case2 or noisy)"),
                ));
            }
        })
    }

    fn build(&self, sc: &Scenario, seed: u64) -> Result<PseudoOrbit> {
        Ok(match self {
            ChainSettings::Case1 { delta } => {
                let eps = sc.params.get("epsilon").ok_or_else(|| {
                    anyhow!("chain = case1 needs a scenario with an `epsilon` parameter")
                })?;
                case1_chain(&sc.spec, *eps, *delta)?
            }
            ChainSettings::Case2 {
                base,
                period,
                v,
                steps,
                delta,
            } => {
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                let delta = delta.unwrap_or(1.05 * norm / *steps as f64);
                case2_chain(
                    &sc.spec,
                    base,
                    *period,
                    v,
                    *steps,
                    delta,
                    &PoincareOptions::default(),
                )?
            }
            ChainSettings::Noisy {
                x0,
                count,
                step,
                noise,
                tube,
            } => {
                let opts = NoiseOptions {
                    tube: *tube,
                    ..NoiseOptions::default()
                };
                generate_noisy(&sc.spec, x0, *count, *step, *noise, seed, &opts)?
            }
        })
    }

    fn describe(&self) -> Value {
        match self {
            ChainSettings::Case1 { delta } => json!({"kind": "case1", "delta": delta}),
            ChainSettings::Case2 {
                base,
                period,
                v,
                steps,
                delta,
            } => {
                json!({"kind": "case2", "base": base, "period": period, "v": v, "steps": steps, "delta": delta})
            }
            ChainSettings::Noisy {
                x0,
                count,
                step,
                noise,
                tube,
            } => {
                json!({"kind": "noisy", "x0": x0, "count": count, "step": step, "noise": noise, "tube": tube})
            }
        }
    }
}

/// Chain description, verification and the `gap` series.
fn chain_fields(settings: &ChainSettings, po: &PseudoOrbit, out: &mut PipelineOutput) {
    let ver = verify_chain(po, 1e-9);
    let mut chain = settings.describe();
    chain["declared_delta"] = json!(po.delta());
    chain["length"] = json!(po.len());
    chain["head"] = json!(po.head().is_some());
    chain["tail"] = json!(po.tail().is_some());
    out.fields.insert("chain".into(), chain);
    out.fields.insert(
        "chain_verification".into(),
        json!({"verdict": ver.verdict, "max_gap": ver.max_gap, "gaps": ver.gaps.len()}),
    );
    for (i, g) in ver.gaps.iter().enumerate() {
        if let Some(d) = g.distance {
            out.series.push(row("gap", i, g.from as f64, d));
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShadowSearch {
    chain: ChainSettings,
    epsilon: f64,
    seed_box: Option<(Vec<f64>, Vec<f64>)>,
    seed_radius: f64,
    budget: SearchBudget,
    shadow: ShadowOptions,
    trace_samples: usize,
}

impl ShadowSearch {
    fn parse(p: &mut Params, scenario: &str, n: usize) -> Result<Self, ConfigError> {
        let chain = ChainSettings::parse(p, scenario, n)?;
        let epsilon = p.f64_req("epsilon", Range::Positive)?;
        let lo = p.list_opt("seed_lo", Some(n))?;
        let hi = p.list_opt("seed_hi", Some(n))?;
        let seed_box = match (lo, hi) {
            (Some(lo), Some(hi)) => {
                if lo.iter().zip(&hi).any(|(a, b)| a > b) {
                    return Err(p.bad(
                        "seed_hi",
                        0,
                        "seed_lo must not exceed seed_hi in any coordinate",
                    ));
                }
                Some((lo, hi))
            }
            (None, None) => None,
            _ => return Err(p.bad("seed_lo", 0, "seed_lo and seed_hi must be given together")),
        };
        let seed_radius = p.f64_or("seed_radius", 0.05, Range::NonNegative)?;
        let d = SearchBudget::default();
        let budget = SearchBudget {
            max_candidates: p.usize_or("candidates", d.max_candidates, 1)?,
            local_starts: p.usize_or("local_starts", d.local_starts, 0)?,
            local_evaluations: p.usize_or("local_evaluations", d.local_evaluations, 0)?,
            dp_samples: p.usize_or("dp_samples", d.dp_samples, 2)?,
            orbit_samples: p.usize_or("orbit_samples", d.orbit_samples, 2)?,
            check_samples: p.usize_or("check_samples", d.check_samples, 2)?,
            shooting: p.bool_or("shooting", d.shooting)?,
            shooting_max_iter: p.usize_or("shooting_max_iter", d.shooting_max_iter, 1)?,
            settle_time: p.f64_or("settle_time", d.settle_time, Range::NonNegative)?,
        };
        let s = ShadowOptions::default();
        let slope_min = p.f64_or("slope_min", s.slope_min, Range::Positive)?;
        let slope_max = p.f64_or("slope_max", s.slope_max, Range::Positive)?;
        if !(slope_min <= 1.0 && 1.0 <= slope_max) {
            return Err(p.bad("slope_min", 0, "need slope_min <= 1 <= slope_max"));
        }
        let tol = p.f64_or("tol", s.integrator.tol, Range::Positive)?;
        Ok(Self {
            chain,
            epsilon,
            seed_box,
            seed_radius,
            budget,
            shadow: ShadowOptions {
                slope_min,
                slope_max,
                integrator: IntegratorOptions::with_tol(tol),
            },
            trace_samples: p.usize_or("trace_samples", 400, 2)?,
        })
    }

    fn run(&self, sc: &Scenario, seed: u64) -> Result<PipelineOutput> {
        let mut out = PipelineOutput::default();
        let po = self.chain.build(sc, seed)?;
        chain_fields(&self.chain, &po, &mut out);
        let seed_box = match &self.seed_box {
            Some((lo, hi)) => SeedBox::new(lo.clone(), hi.clone()),
            None => SeedBox::around(&po.body()[0].point, self.seed_radius),
        };
        let mut rep = search_shadowing(&po, self.epsilon, &seed_box, &self.budget, &self.shadow)?;
        if sc.spec.conserved().is_some() {
            rep = rep.with_refutation(refute_by_conservation(&po, self.epsilon)?);
        }
        out.fields.insert("seed_box".into(), to_value(&seed_box));
        out.fields.insert("budget".into(), to_value(&self.budget));
        out.fields
            .insert("shadow_options".into(), to_value(&self.shadow));
        if let Value::Object(m) = to_value(&rep) {
            out.fields.extend(m);
        }
        if let Some(w) = &rep.witness {
            let (a, b) = search_horizon(&po, self.budget.settle_time);
            let ts = linspace(a, b, self.trace_samples);
            let us: Vec<f64> = ts.iter().map(|&t| w.h.eval(t)).collect();
            let orbit = w.orbit.sample(&sc.spec, &us, &self.shadow.integrator)?;
            let cache = ConcatCache::new(&po, &self.shadow.integrator)?;
            for (i, (&t, y)) in ts.iter().zip(&orbit).enumerate() {
                let x = cache.eval(t)?;
                for k in 0..x.len() {
                    out.series.push(row(format!("chain_x{k}"), i, t, x[k]));
                    out.series.push(row(format!("witness_x{k}"), i, t, y[k]));
                }
                out.series
                    .push(row("distance", i, t, sc.spec.distance(&x, y)));
            }
        }
        out.positive = rep.verdict == Verdict::Shadowed;
        out.verdict = to_value(&rep.verdict)
            .as_str()
            .unwrap_or("unknown")
            .to_string();
        out.summary = match (rep.verdict, rep.achieved_distance, rep.lower_bound) {
            (Verdict::Refuted, _, Some(lb)) => {
                format!("refuted at epsilon = {}: lower bound {lb}", self.epsilon)
            }
            (_, Some(d), _) => format!(
                "{} at epsilon = {}: best distance {d:.6e}",
                out.verdict, self.epsilon
            ),
            _ => format!("{} at epsilon = {}", out.verdict, self.epsilon),
        };
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refute {
    chain: ChainSettings,
    epsilon: f64,
}

impl Refute {
    fn parse(p: &mut Params, scenario: &str, n: usize) -> Result<Self, ConfigError> {
        Ok(Self {
            chain: ChainSettings::parse(p, scenario, n)?,
            epsilon: p.f64_req("epsilon", Range::Positive)?,
        })
    }

    fn run(&self, sc: &Scenario, seed: u64) -> Result<PipelineOutput> {
        let q = sc.spec.conserved().ok_or_else(|| {
            anyhow!(
                "scenario `{}` declares no conserved quantity",
                sc.spec.name()
            )
        })?;
        let mut out = PipelineOutput::default();
        let po = self.chain.build(sc, seed)?;
        chain_fields(&self.chain, &po, &mut out);
        let bound = conservation_bound(&po, self.epsilon)?;
        let cert = refute_by_conservation(&po, self.epsilon)?;
        let refuted = cert.as_ref().is_some_and(|c| c.lower_bound > self.epsilon);
        out.fields.insert("epsilon".into(), json!(self.epsilon));
        out.fields.insert("quantity".into(), json!(q.name));
        if let Value::Object(m) = to_value(&bound) {
            out.fields.extend(m);
        }
        out.fields.insert("certificate".into(), to_value(&cert));
        for (i, e) in po.body().iter().enumerate() {
            out.series.push(row(
                "conserved",
                i,
                po.accumulated_time(i as i64)?,
                q.eval(&e.point),
            ));
        }
        out.positive = !refuted;
        out.verdict = if refuted { "refuted" } else { "inconclusive" }.into();
        out.summary = format!(
            "{}: lower bound {} vs epsilon = {}",
            out.verdict, bound.lower_bound, self.epsilon
        );
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classify {
    point: Vec<f64>,
    period: Option<f64>,
    refine: bool,
    uniform: Option<(f64, f64)>,
    opts: PoincareOptions,
}

fn poincare_options(p: &mut Params) -> Result<PoincareOptions, ConfigError> {
    let d = PoincareOptions::default();
    Ok(PoincareOptions {
        hyperbolic_threshold: p.f64_or("threshold", d.hyperbolic_threshold, Range::Positive)?,
        integrator: IntegratorOptions::with_tol(p.f64_or(
            "tol",
            d.integrator.tol,
            Range::Positive,
        )?),
        ..d
    })
}

impl Classify {
    fn parse(p: &mut Params, n: usize) -> Result<Self, ConfigError> {
        let point = p.list_req("point", Some(n))?;
        let period = p.f64_opt("period", Range::Positive)?;
        let refine = p.bool_or("refine", false)?;
        let t_tilde = p.f64_opt("t_tilde", Range::Positive)?;
        let eta_tilde = p.f64_opt("eta_tilde", Range::Positive)?;
        let uniform = match (t_tilde, eta_tilde) {
            (Some(t), Some(e)) => Some((t, e)),
            (None, None) => None,
            _ => return Err(p.bad("t_tilde", 0, "t_tilde and eta_tilde must be given together")),
        };
        if period.is_none() && (refine || uniform.is_some()) {
            return Err(p.bad(
                "period",
                0,
                "refine, t_tilde and eta_tilde apply to periodic orbits only; set `period`",
            ));
        }
        Ok(Self {
            point,
            period,
            refine,
            uniform,
            opts: poincare_options(p)?,
        })
    }

    fn run(&self, sc: &Scenario) -> Result<PipelineOutput> {
        let spec = &sc.spec;
        let mut out = PipelineOutput::default();
        let rep = match self.period {
            None => classify_singularity(spec, &self.point, &self.opts)?,
            Some(t) => {
                let (x, t) = if self.refine {
                    let orbit = find_periodic_newton(spec, &self.point, t, &self.opts)?;
                    out.fields.insert("newton".into(), to_value(&orbit));
                    (orbit.point, orbit.period)
                } else {
                    (self.point.clone(), t)
                };
                classify_periodic(spec, &x, t, &self.opts)?
            }
        };
        if let Value::Object(m) = to_value(&rep) {
            out.fields.extend(m);
        }
        let alias = match rep.kind {
            CriticalKind::Singularity => "eigenvalues",
            CriticalKind::Periodic => "multipliers",
        };
        out.fields.insert(alias.into(), to_value(&rep.spectrum));
        for (i, e) in rep.spectrum.iter().enumerate() {
            out.series.push(row("spectrum_re", i, i as f64, e.re));
            out.series.push(row("spectrum_im", i, i as f64, e.im));
            out.series
                .push(row("spectrum_modulus", i, i as f64, e.modulus()));
        }
        for (i, m) in rep.margins.iter().enumerate() {
            out.series.push(row("margin", i, i as f64, *m));
        }
        let mut positive = rep.hyperbolic;
        if let Some((t_tilde, eta_tilde)) = self.uniform {
            let u = uniform_period_estimates(
                spec,
                std::slice::from_ref(&rep),
                t_tilde,
                eta_tilde,
                &self.opts,
            )?;
            positive &= u.verdict;
            out.fields.insert("uniform_estimates".into(), to_value(&u));
        }
        out.positive = positive;
        out.verdict = if positive {
            "hyperbolic"
        } else {
            "non_hyperbolic"
        }
        .into();
        let spectrum: Vec<String> = rep
            .spectrum
            .iter()
            .map(|e| {
                if e.im == 0.0 {
                    format!("{:.6}", e.re)
                } else {
                    format!("{:.6}{:+.6}i", e.re, e.im)
                }
            })
            .collect();
        out.summary = format!(
            "{} {}: {alias} [{}]",
            out.verdict,
            to_value(&rep.kind).as_str().unwrap_or(""),
            spectrum.join(", ")
        );
        Ok(out)
    }
}

/// Orbit sampling shared by the splitting pipelines.
#[derive(Clone, Debug, PartialEq)]
struct CocycleSettings {
    point: Vec<f64>,
    dt: f64,
    steps: usize,
    p: usize,
    window: Option<usize>,
    opts: PoincareOptions,
}

impl CocycleSettings {
    fn parse(p: &mut Params, n: usize, dt: f64, steps: usize) -> Result<Self, ConfigError> {
        let s = Self {
            point: p.list_req("point", Some(n))?,
            dt: p.f64_or("dt", dt, Range::Positive)?,
            steps: p.usize_or("steps", steps, 8)?,
            p: p.usize_or("p", 1, 1)?,
            window: p.usize_opt("window", 1)?,
            opts: poincare_options(p)?,
        };
        if s.p + 1 >= n {
            return Err(p.bad(
                "p",
                0,
                format!(
                    "must be at most {} for a {n}-dimensional flow",
                    n.saturating_sub(2)
                ),
            ));
        }
        Ok(s)
    }

    fn estimate(&self, sc: &Scenario) -> Result<SplittingEstimate> {
        let c = NormalCocycle::along_orbit(&sc.spec, &self.point, self.dt, self.steps, &self.opts)?;
        Ok(estimate_splitting(&c, self.p, self.window)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splitting {
    cocycle: CocycleSettings,
    l: Option<f64>,
    profile_t: Option<f64>,
    horizon: Option<f64>,
    lambda_max: f64,
}

impl Splitting {
    fn parse(p: &mut Params, n: usize) -> Result<Self, ConfigError> {
        Ok(Self {
            cocycle: CocycleSettings::parse(p, n, 0.01, 2000)?,
            l: p.f64_opt("l", Range::Positive)?,
            profile_t: p.f64_opt("profile_t", Range::Positive)?,
            horizon: p.f64_opt("horizon", Range::Positive)?,
            lambda_max: p.f64_or("lambda_max", 0.999, Range::Unit)?,
        })
    }

    fn run(&self, sc: &Scenario) -> Result<PipelineOutput> {
        let mut out = PipelineOutput::default();
        let est = self.cocycle.estimate(sc)?;
        out.fields
            .insert("estimate".into(), to_value(&est.summary()));
        let dom = self.l.map(|l| check_domination(&est, l));
        out.fields.insert("domination".into(), to_value(&dom));
        let fit = fit_hyperbolic(&est, self.horizon, self.lambda_max);
        let hyperbolic = fit.is_ok();
        out.fields.insert(
            "hyperbolic_fit".into(),
            match &fit {
                Ok(f) => to_value(f),
                Err(e) => json!({"error": e.to_string()}),
            },
        );
        let t_max = self.profile_t.or(self.l.map(|l| 3.0 * l)).unwrap_or(2.0);
        for (i, (t, v)) in domination_profile(&est, t_max).into_iter().enumerate() {
            out.series.push(row("domination_product", i, t, v));
        }
        out.fields.insert("hyperbolic".into(), json!(hyperbolic));
        out.positive = dom.as_ref().is_none_or(|d| d.verdict);
        out.verdict = match &dom {
            None => "estimated",
            Some(d) if d.verdict => "dominated",
            Some(_) => "not_dominated",
        }
        .into();
        out.summary = match &dom {
            Some(d) => format!(
                "{} at l = {}: worst product {:.6}",
                out.verdict, d.l, d.worst_product
            ),
            None => format!("splitting estimated: gap ratio {:.4}", est.gap_ratio),
        };
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuasiHyperbolic {
    cocycle: CocycleSettings,
    x: Option<Vec<f64>>,
    tau: f64,
    eta: f64,
    step: f64,
    delta: Option<f64>,
}

impl QuasiHyperbolic {
    fn parse(p: &mut Params, n: usize) -> Result<Self, ConfigError> {
        let s = Self {
            cocycle: CocycleSettings::parse(p, n, 0.05, 400)?,
            x: p.list_opt("x", Some(n))?,
            tau: p.f64_req("tau", Range::Positive)?,
            eta: p.f64_req("eta", Range::Positive)?,
            step: p.f64_or("step", 1.0, Range::Positive)?,
            delta: p.f64_opt("delta", Range::Positive)?,
        };
        if s.step > s.tau {
            return Err(p.bad("step", 0, format!("must not exceed tau = {}", s.tau)));
        }
        Ok(s)
    }

    fn run(&self, sc: &Scenario) -> Result<PipelineOutput> {
        let mut out = PipelineOutput::default();
        let est = self.cocycle.estimate(sc)?;
        out.fields
            .insert("estimate".into(), to_value(&est.summary()));
        let x = match &self.x {
            Some(x) => x.clone(),
            None => est.cocycle().point(est.interior().0).to_vec(),
        };
        let opts = &self.cocycle.opts;
        let cert = check_quasi_hyperbolic(&sc.spec, &x, self.tau, &est, self.eta, self.step, opts)?;
        out.fields.insert("certificate".into(), to_value(&cert));
        let ends = &cert.partition[1..];
        for (name, v) in [
            ("log_norm_stable", &cert.log_norm_stable),
            ("log_conorm_unstable", &cert.log_conorm_unstable),
            ("slack_contraction", &cert.slack_contraction),
            ("slack_expansion", &cert.slack_expansion),
            ("slack_gap", &cert.slack_gap),
        ] {
            for (k, (&t, &value)) in ends.iter().zip(v).enumerate() {
                out.series.push(row(name, k, t, value));
            }
        }
        let mut positive = cert.verdict;
        out.verdict = if cert.verdict {
            "quasi_hyperbolic"
        } else {
            "not_quasi_hyperbolic"
        }
        .into();
        out.summary = format!(
            "{} at eta = {}: min slack {:.6}",
            out.verdict, self.eta, cert.min_slack
        );
        if let Some(delta) = self.delta {
            match liao_shadow_periodic(&sc.spec, &cert, delta, opts) {
                Ok(l) => {
                    out.summary += &format!(
                        "; periodic orbit of period {:.8} at distance {:.3e}",
                        l.orbit.period, l.distance
                    );
                    out.fields.insert("periodic_shadow".into(), to_value(&l));
                }
                Err(e) => {
                    positive = false;
                    out.summary += &format!("; no periodic orbit: {e}");
                    out.fields
                        .insert("periodic_shadow".into(), json!({"error": e.to_string()}));
                }
            }
        }
        out.positive = positive;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainGraphSettings {
    region: Region,
    hgrid: f64,
    delta: f64,
    t_max: f64,
    t_samples: usize,
    opts: ChainGraphOptions,
}

impl ChainGraphSettings {
    fn parse(p: &mut Params, n: usize) -> Result<Self, ConfigError> {
        let lo = p.list_req("region_lo", Some(n))?;
        let hi = p.list_req("region_hi", Some(n))?;
        if lo.iter().zip(&hi).any(|(a, b)| a >= b) {
            return Err(p.bad(
                "region_hi",
                0,
                "region_lo must be below region_hi in every coordinate",
            ));
        }
        let d = ChainGraphOptions::default();
        let s = Self {
            region: Region::new(lo, hi),
            hgrid: p.f64_req("hgrid", Range::Positive)?,
            delta: p.f64_req("delta", Range::Positive)?,
            t_max: p.f64_or("t_max", 3.0, Range::Positive)?,
            t_samples: p.usize_or("t_samples", 5, 1)?,
            opts: ChainGraphOptions {
                max_cells: p.usize_or("max_cells", d.max_cells, 1)?,
                integrator: IntegratorOptions::with_tol(p.f64_or(
                    "tol",
                    d.integrator.tol,
                    Range::Positive,
                )?),
            },
        };
        if s.t_max < 1.0 {
            return Err(p.bad("t_max", 0, "must be >= 1"));
        }
        Ok(s)
    }

    fn run(&self, sc: &Scenario) -> Result<PipelineOutput> {
        let mut out = PipelineOutput::default();
        let g = build_chain_graph(
            &sc.spec,
            &self.region,
            self.hgrid,
            self.delta,
            self.t_max,
            self.t_samples,
            &self.opts,
        )?;
        let cr = chain_recurrent_cells(&g);
        let classes: Vec<Value> = g
            .components()
            .iter()
            .enumerate()
            .filter(|(_, c)| g.is_recurrent(c[0]))
            .map(|(id, c)| {
                let centers: Vec<Vec<f64>> = c.iter().map(|&k| g.center(k)).collect();
                let n = centers[0].len();
                let lo: Vec<f64> = (0..n)
                    .map(|j| centers.iter().map(|x| x[j]).fold(f64::INFINITY, f64::min))
                    .collect();
                let hi: Vec<f64> = (0..n)
                    .map(|j| {
                        centers
                            .iter()
                            .map(|x| x[j])
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .collect();
                json!({"component": id, "cells": c.len(), "center_lo": lo, "center_hi": hi})
            })
            .collect();
        for (i, c) in classes.iter().enumerate() {
            out.series.push(row(
                "class_cells",
                i,
                i as f64,
                c["cells"].as_f64().unwrap_or(0.0),
            ));
        }
        let transitive = is_chain_transitive(&g, &cr);
        out.fields.insert("region".into(), to_value(&self.region));
        out.fields.insert("hgrid".into(), json!(self.hgrid));
        out.fields.insert("delta".into(), json!(self.delta));
        out.fields.insert("times".into(), json!(g.times()));
        out.fields.insert("shape".into(), json!(g.shape()));
        out.fields
            .insert("cell_count".into(), json!(g.cell_count()));
        out.fields
            .insert("edge_count".into(), json!(g.edge_count()));
        out.fields.insert("reach".into(), json!(g.reach()));
        out.fields
            .insert("components".into(), json!(g.components().len()));
        out.fields.insert("recurrent_cells".into(), json!(cr.len()));
        out.fields
            .insert("recurrent_classes".into(), Value::Array(classes.clone()));
        out.fields
            .insert("recurrent_set_transitive".into(), json!(transitive));
        out.files.push(("edges.txt".into(), g.edge_list()));
        out.files.push(("cells.csv".into(), g.cells_csv()));
        out.positive = true;
        out.verdict = "computed".into();
        out.summary = format!(
            "{} cells, {} edges, {} chain-recurrent cells in {} classes",
            g.cell_count(),
            g.edge_count(),
            cr.len(),
            classes.len()
        );
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Pipeline {
    ShadowSearch(ShadowSearch),
    Refute(Refute),
    Classify(Classify),
    Splitting(Splitting),
    QuasiHyperbolic(QuasiHyperbolic),
    ChainGraph(ChainGraphSettings),
}

impl Pipeline {
    /// Parse the pipeline's keys; unknown keys are errors.
    pub fn parse(
        name: &str,
        line: usize,
        p: &mut Params,
        scenario: &str,
        dim: usize,
    ) -> Result<Self, ConfigError> {
        let out = match name {
            "shadow-search" => Pipeline::ShadowSearch(ShadowSearch::parse(p, scenario, dim)?),
            "refute" => Pipeline::Refute(Refute::parse(p, scenario, dim)?),
            "classify" => Pipeline::Classify(Classify::parse(p, dim)?),
            "splitting" => Pipeline::Splitting(Splitting::parse(p, dim)?),
            "quasi-hyperbolic" => Pipeline::QuasiHyperbolic(QuasiHyperbolic::parse(p, dim)?),
            "chain-graph" => Pipeline::ChainGraph(ChainGraphSettings::parse(p, dim)?),
            other => {
                let names: Vec<&str> = PIPELINES.iter().map(|(n, _)| *n).collect();
                return Err(p.bad(
                    "name",
                    line,
                    format!(
                        "unknown pipeline `{other}` (expected one of: {})",
                        names.join(", ")
                    ),
                ));
            }
        };
        p.finish()?;
        Ok(out)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Pipeline::ShadowSearch(_) => "shadow-search",
            Pipeline::Refute(_) => "refute",
            Pipeline::Classify(_) => "classify",
            Pipeline::Splitting(_) => "splitting",
            Pipeline::QuasiHyperbolic(_) => "quasi-hyperbolic",
            Pipeline::ChainGraph(_) => "chain-graph",
        }
    }

    pub fn run(&self, sc: &Scenario, seed: u64) -> Result<PipelineOutput> {
        let out = match self {
            Pipeline::ShadowSearch(s) => s.run(sc, seed)?,
            Pipeline::Refute(s) => s.run(sc, seed)?,
            Pipeline::Classify(s) => s.run(sc)?,
            Pipeline::Splitting(s) => s.run(sc)?,
            Pipeline::QuasiHyperbolic(s) => s.run(sc)?,
            Pipeline::ChainGraph(s) => s.run(sc)?,
        };
        if out.verdict.is_empty() {
            bail!("pipeline {} produced no verdict", self.name());
        }
        Ok(out)
    }
}
