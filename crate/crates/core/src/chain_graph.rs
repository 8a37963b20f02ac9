//! Cell discretization of a box and the δ-chain reachability graph between
//! cells, with chain-recurrent cells and chain classes from its strongly
//! connected components.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::flow::{
    integrate_until_escape, CoordKind, FlowError, IntegratorOptions, VectorFieldSpec,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainGraphError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("region has dimension {got}, field has dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("region is empty along axis {axis}")]
    EmptyRegion { axis: usize },
    #[error("{name} must be {requirement}, got {value}")]
    BadParameter {
        name: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error("grid has {count} cells, more than the cap of {cap}")]
    TooManyCells { count: usize, cap: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Region {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Region {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        Self { lo, hi }
    }

    pub fn cube(n: usize, half_width: f64) -> Self {
        Self {
            lo: vec![-half_width; n],
            hi: vec![half_width; n],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ChainGraphOptions {
    pub max_cells: usize,
    pub integrator: IntegratorOptions,
}

impl Default for ChainGraphOptions {
    fn default() -> Self {
        Self {
            max_cells: 250_000,
            integrator: IntegratorOptions::with_tol(1e-8),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ChainGraph {
    region: Region,
    hgrid: f64,
    delta: f64,
    times: Vec<f64>,
    shape: Vec<usize>,
    adjacency: Vec<Vec<usize>>,
    components: Vec<Vec<usize>>,
    component_of: Vec<usize>,
    recurrent: Vec<bool>,
}

impl ChainGraph {
    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn hgrid(&self) -> f64 {
        self.hgrid
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Cells per axis.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn cell_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    /// Edge tolerance `δ + (√n/2)·hgrid`.
    pub fn reach(&self) -> f64 {
        self.delta + 0.5 * (self.shape.len() as f64).sqrt() * self.hgrid
    }

    pub fn center(&self, cell: usize) -> Vec<f64> {
        let mut rem = cell;
        let mut out = vec![0.0; self.shape.len()];
        for axis in (0..self.shape.len()).rev() {
            let j = rem % self.shape[axis];
            rem /= self.shape[axis];
            out[axis] = self.region.lo[axis] + (j as f64 + 0.5) * self.hgrid;
        }
        out
    }

    /// Cell whose closed box contains `x`, if `x` lies in the gridded region.
    pub fn cell_of(&self, x: &[f64]) -> Option<usize> {
        let mut idx = 0;
        for (axis, &n) in self.shape.iter().enumerate() {
            let u = (x[axis] - self.region.lo[axis]) / self.hgrid;
            if !(u >= 0.0 && u <= n as f64) {
                return None;
            }
            idx = idx * n + (u.floor() as usize).min(n - 1);
        }
        Some(idx)
    }

    /// Every cell whose closed box contains `x` (several on cell faces).
    pub fn cells_touching(&self, x: &[f64]) -> Vec<usize> {
        let n = self.shape.len();
        let mut ranges = Vec::with_capacity(n);
        for (axis, &len) in self.shape.iter().enumerate() {
            let u = (x[axis] - self.region.lo[axis]) / self.hgrid;
            let a = (u - 1.0 - 1e-9).ceil().max(0.0);
            let b = (u + 1e-9).floor().min(len as f64 - 1.0);
            if a > b {
                return Vec::new();
            }
            ranges.push((a as usize, b as usize));
        }
        let mut out = Vec::new();
        lattice(&ranges, &self.shape, &mut |c| out.push(c));
        out
    }

    pub fn successors(&self, cell: usize) -> &[usize] {
        &self.adjacency[cell]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].binary_search(&b).is_ok()
    }

    /// Strongly connected components in a deterministic order (sorted by
    /// smallest member), each sorted.
    pub fn components(&self) -> &[Vec<usize>] {
        &self.components
    }

    pub fn component_of(&self, cell: usize) -> usize {
        self.component_of[cell]
    }

    pub fn is_recurrent(&self, cell: usize) -> bool {
        self.recurrent[cell]
    }

    /// `cell_id cell_id` per line.
    pub fn edge_list(&self) -> String {
        let mut s = String::new();
        for (a, succ) in self.adjacency.iter().enumerate() {
            for b in succ {
                let _ = writeln!(s, "{a} {b}");
            }
        }
        s
    }

    /// Cell geometry: `cell_id,c0,…,c{n-1},component,recurrent`.
    pub fn cells_csv(&self) -> String {
        let n = self.shape.len();
        let mut s = String::from("cell_id");
        for i in 0..n {
            let _ = write!(s, ",c{i}");
        }
        s.push_str(",component,recurrent\n");
        for cell in 0..self.cell_count() {
            let _ = write!(s, "{cell}");
            for v in self.center(cell) {
                let _ = write!(s, ",{v}");
            }
            let _ = writeln!(
                s,
                ",{},{}",
                self.component_of[cell], self.recurrent[cell] as u8
            );
        }
        s
    }
}

/// Visit every flat index in the box of per-axis index ranges.
fn lattice(ranges: &[(usize, usize)], shape: &[usize], f: &mut impl FnMut(usize)) {
    fn rec(
        axis: usize,
        acc: usize,
        ranges: &[(usize, usize)],
        shape: &[usize],
        f: &mut impl FnMut(usize),
    ) {
        if axis == ranges.len() {
            f(acc);
            return;
        }
        for j in ranges[axis].0..=ranges[axis].1 {
            rec(axis + 1, acc * shape[axis] + j, ranges, shape, f);
        }
    }
    rec(0, 0, ranges, shape, f);
}

/// Cells `c′` of the grid with `d(x, center(c′)) < reach`.
fn cells_within(
    spec: &VectorFieldSpec,
    x: &[f64],
    reach: f64,
    region: &Region,
    h: f64,
    shape: &[usize],
) -> Vec<usize> {
    let mut ranges = Vec::with_capacity(shape.len());
    for (axis, &len) in shape.iter().enumerate() {
        let r = match spec.coord_kinds()[axis] {
            CoordKind::Angle { .. } => (0, len - 1),
            CoordKind::Linear => {
                let u = (x[axis] - region.lo[axis]) / h - 0.5;
                let a = (u - reach / h).ceil().max(0.0);
                let b = (u + reach / h).floor().min(len as f64 - 1.0);
                if !(a <= b) {
                    return Vec::new();
                }
                (a as usize, b as usize)
            }
        };
        ranges.push(r);
    }
    let mut out = Vec::new();
    let mut center = vec![0.0; shape.len()];
    lattice(&ranges, shape, &mut |c| {
        let mut rem = c;
        for axis in (0..shape.len()).rev() {
            center[axis] = region.lo[axis] + ((rem % shape[axis]) as f64 + 0.5) * h;
            rem /= shape[axis];
        }
        if spec.distance(x, &center) < reach {
            out.push(c);
        }
    });
    out
}

/// Build the δ-chain graph of cells of side `hgrid` covering `region`.
///
/// Edge `c → c′` iff `d(X_t(center c), center c′) < δ + (√n/2)·hgrid` for
/// one of `t_samples` equally spaced times in `[1, t_max]`. Orbits leaving
/// the integrator's range contribute the times reached before escape.
pub fn build_chain_graph(
    spec: &VectorFieldSpec,
    region: &Region,
    hgrid: f64,
    delta: f64,
    t_max: f64,
    t_samples: usize,
    opts: &ChainGraphOptions,
) -> Result<ChainGraph, ChainGraphError> {
    let n = spec.dim();
    if region.lo.len() != n || region.hi.len() != n {
        return Err(ChainGraphError::DimensionMismatch {
            expected: n,
            got: region.lo.len().min(region.hi.len()),
        });
    }
    let positive = |name, value: f64| {
        if value > 0.0 && value.is_finite() {
            Ok(())
        } else {
            Err(ChainGraphError::BadParameter {
                name,
                requirement: "positive and finite",
                value,
            })
        }
    };
    positive("hgrid", hgrid)?;
    positive("delta", delta)?;
    if !(t_max >= 1.0) || !t_max.is_finite() {
        return Err(ChainGraphError::BadParameter {
            name: "t_max",
            requirement: ">= 1",
            value: t_max,
        });
    }
    if t_samples == 0 {
        return Err(ChainGraphError::BadParameter {
            name: "t_samples",
            requirement: ">= 1",
            value: 0.0,
        });
    }
    let mut shape = Vec::with_capacity(n);
    let mut count: usize = 1;
    for axis in 0..n {
        let w = region.hi[axis] - region.lo[axis];
        if !(w > 0.0) {
            return Err(ChainGraphError::EmptyRegion { axis });
        }
        let k = ((w / hgrid) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        shape.push(k);
        count = count.saturating_mul(k);
    }
    if count > opts.max_cells {
        return Err(ChainGraphError::TooManyCells {
            count,
            cap: opts.max_cells,
        });
    }
    let times: Vec<f64> = if t_samples == 1 {
        vec![1.0]
    } else {
        (0..t_samples)
            .map(|i| 1.0 + (t_max - 1.0) * i as f64 / (t_samples - 1) as f64)
            .collect()
    };
    let reach = delta + 0.5 * (n as f64).sqrt() * hgrid;

    let mut proto = ChainGraph {
        region: region.clone(),
        hgrid,
        delta,
        times: times.clone(),
        shape: shape.clone(),
        adjacency: Vec::new(),
        components: Vec::new(),
        component_of: Vec::new(),
        recurrent: Vec::new(),
    };
    let adjacency: Vec<Vec<usize>> = (0..count)
        .into_par_iter()
        .map(|cell| -> Result<Vec<usize>, ChainGraphError> {
            let c = proto.center(cell);
            let (traj, _escape) = integrate_until_escape(spec, &c, (0.0, t_max), &opts.integrator)?;
            let (_, reached) = traj.bounds();
            let mut succ = BTreeSet::new();
            for &t in &times {
                if t > reached {
                    break;
                }
                let y = traj.eval(t)?;
                succ.extend(cells_within(spec, &y, reach, region, hgrid, &shape));
            }
            Ok(succ.into_iter().collect())
        })
        .collect::<Result<_, _>>()?;

    let mut g: DiGraph<(), ()> = DiGraph::with_capacity(count, 0);
    for _ in 0..count {
        g.add_node(());
    }
    for (a, succ) in adjacency.iter().enumerate() {
        for &b in succ {
            g.add_edge(NodeIndex::new(a), NodeIndex::new(b), ());
        }
    }
    let mut components: Vec<Vec<usize>> = tarjan_scc(&g)
        .into_iter()
        .map(|c| {
            let mut v: Vec<usize> = c.into_iter().map(NodeIndex::index).collect();
            v.sort_unstable();
            v
        })
        .collect();
    components.sort_by_key(|c| c[0]);
    let mut component_of = vec![0; count];
    let mut recurrent = vec![false; count];
    for (k, comp) in components.iter().enumerate() {
        let cyclic = comp.len() > 1 || adjacency[comp[0]].binary_search(&comp[0]).is_ok();
        for &c in comp {
            component_of[c] = k;
            recurrent[c] = cyclic;
        }
    }
    proto.adjacency = adjacency;
    proto.components = components;
    proto.component_of = component_of;
    proto.recurrent = recurrent;
    Ok(proto)
}

/// Cells in a strongly connected component that contains a cycle
/// (a self-loop counts).
pub fn chain_recurrent_cells(g: &ChainGraph) -> BTreeSet<usize> {
    (0..g.cell_count()).filter(|&c| g.recurrent[c]).collect()
}

/// Whether `cells` form one strongly connected component of the subgraph
/// they induce. A single cell needs a self-loop; the empty set is not
/// transitive.
pub fn is_chain_transitive(g: &ChainGraph, cells: &BTreeSet<usize>) -> bool {
    let Some(&first) = cells.iter().next() else {
        return false;
    };
    if cells.len() == 1 {
        return g.has_edge(first, first);
    }
    let reach = |forward: bool| {
        let mut seen = BTreeSet::from([first]);
        let mut stack = vec![first];
        while let Some(a) = stack.pop() {
            let next: Vec<usize> = if forward {
                g.adjacency[a]
                    .iter()
                    .copied()
                    .filter(|b| cells.contains(b))
                    .collect()
            } else {
                cells
                    .iter()
                    .copied()
                    .filter(|&b| g.has_edge(b, a))
                    .collect()
            };
            for b in next {
                if seen.insert(b) {
                    stack.push(b);
                }
            }
        }
        seen.len() == cells.len()
    };
    reach(true) && reach(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{case1_field, linear_saddle3d, saddle_cycle, Nonlinearity};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn opts() -> ChainGraphOptions {
        ChainGraphOptions::default()
    }

    #[test]
    fn cell_geometry() {
        let spec = linear_saddle3d();
        let g = build_chain_graph(&spec, &Region::cube(3, 1.0), 0.5, 0.3, 1.0, 1, &opts()).unwrap();
        assert_eq!(g.shape(), &[4, 4, 4]);
        assert_eq!(g.cell_count(), 64);
        for cell in 0..64 {
            assert_eq!(g.cell_of(&g.center(cell)), Some(cell));
        }
        assert_eq!(g.cells_touching(&[0.0, 0.0, 0.0]).len(), 8);
        assert_eq!(g.cells_touching(&[0.1, 0.2, 0.3]).len(), 1);
        assert!(g.cell_of(&[2.0, 0.0, 0.0]).is_none());
        assert_eq!(g.edge_list().lines().count(), g.edge_count());
        assert_eq!(g.cells_csv().lines().count(), 65);
    }

    #[test]
    fn linear_saddle_recurrence_is_origin() {
        let spec = linear_saddle3d();
        let g =
            build_chain_graph(&spec, &Region::cube(3, 1.0), 0.1, 0.05, 3.0, 5, &opts()).unwrap();
        let cr = chain_recurrent_cells(&g);
        let norm = |c: usize| g.center(c).iter().map(|v| v * v).sum::<f64>().sqrt();
        // the 8 cells at the origin always recur; the weak-stable direction
        // (rate -1) admits one more layer of self-looping cells
        let core: BTreeSet<usize> = g.cells_touching(&[0.0; 3]).into_iter().collect();
        assert_eq!(core.len(), 8);
        assert!(core.is_subset(&cr));
        for &c in &cr {
            assert!(norm(c) < g.delta() + 3f64.sqrt() * g.hgrid());
            assert!(g.center(c)[0].abs() < 0.1 && g.center(c)[2].abs() < 0.1);
        }
        assert_eq!(cr.len(), 16);
    }

    #[test]
    fn rejects_bad_input() {
        let spec = linear_saddle3d();
        let r = Region::cube(3, 1.0);
        assert!(matches!(
            build_chain_graph(&spec, &r, 0.001, 0.05, 3.0, 5, &opts()),
            Err(ChainGraphError::TooManyCells { .. })
        ));
        assert!(build_chain_graph(&spec, &r, 0.1, 0.05, 0.5, 5, &opts()).is_err());
        assert!(
            build_chain_graph(&spec, &Region::cube(2, 1.0), 0.1, 0.05, 3.0, 5, &opts()).is_err()
        );
        assert!(build_chain_graph(&spec, &r, -0.1, 0.05, 3.0, 5, &opts()).is_err());
    }

    #[test]
    fn case1_segment_is_one_class() {
        let spec = case1_field(DMatrix::from_element(1, 1, -1.0), Nonlinearity::Zero, 0.4).unwrap();
        let region = Region::new(vec![-0.1, -0.05], vec![0.1, 0.05]);
        let g = build_chain_graph(&spec, &region, 0.02, 0.05, 3.0, 5, &opts()).unwrap();
        let axis: BTreeSet<usize> = (0..g.cell_count())
            .filter(|&c| g.center(c)[1].abs() < 1e-12)
            .collect();
        assert_eq!(axis.len(), 10);
        for &c in &axis {
            assert!(g.has_edge(c, c));
        }
        assert!(is_chain_transitive(&g, &axis));
    }

    #[test]
    fn transitivity_edge_cases() {
        let spec = linear_saddle3d();
        let g =
            build_chain_graph(&spec, &Region::cube(3, 1.0), 0.1, 0.05, 3.0, 5, &opts()).unwrap();
        assert!(!is_chain_transitive(&g, &BTreeSet::new()));
        let origin = g.cell_of(&[0.01, 0.01, 0.01]).unwrap();
        assert!(is_chain_transitive(&g, &BTreeSet::from([origin])));
        let far = g.cell_of(&[0.9, 0.9, 0.9]).unwrap();
        assert!(!is_chain_transitive(&g, &BTreeSet::from([far])));
        assert!(!is_chain_transitive(&g, &BTreeSet::from([origin, far])));
    }

    #[test]
    fn saddle_cycle_classes() {
        let spec = saddle_cycle();
        let region = Region::new(vec![-1.5, -1.5, -0.5], vec![1.5, 1.5, 0.5]);
        let g = build_chain_graph(&spec, &region, 1.0 / 11.0, 0.05, 3.0, 5, &opts()).unwrap();
        let cr = chain_recurrent_cells(&g);
        let circle: BTreeSet<usize> = (0..720)
            .flat_map(|i| {
                let a = i as f64 * std::f64::consts::TAU / 720.0;
                g.cells_touching(&[a.cos(), a.sin(), 0.0])
            })
            .collect();
        let origin: BTreeSet<usize> = g.cells_touching(&[0.0, 0.0, 0.0]).into_iter().collect();
        assert!(circle.is_subset(&cr));
        assert!(origin.is_subset(&cr));
        assert!(is_chain_transitive(&g, &circle));
        let both: BTreeSet<usize> = circle.union(&origin).copied().collect();
        assert!(!is_chain_transitive(&g, &both));
        // recurrent cells stay near the analytic recurrent set {0} ∪ {r = 1, z = 0}
        let slack = g.delta() + (3f64).sqrt() * g.hgrid();
        for &c in &cr {
            let p = g.center(c);
            let r = p[0].hypot(p[1]);
            let to_circle = (r - 1.0).hypot(p[2]);
            let to_origin = (r * r + p[2] * p[2]).sqrt();
            assert!(to_circle.min(to_origin) < slack, "{p:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn edges_monotone_in_delta(d1 in 0.01f64..0.2, extra in 0.0f64..0.2, h in 0.08f64..0.3) {
            let spec = saddle_cycle();
            let region = Region::new(vec![-1.5, -1.5, -0.3], vec![1.5, 1.5, 0.3]);
            let g1 = build_chain_graph(&spec, &region, h, d1, 2.0, 3, &opts()).unwrap();
            let g2 = build_chain_graph(&spec, &region, h, d1 + extra, 2.0, 3, &opts()).unwrap();
            for a in 0..g1.cell_count() {
                for &b in g1.successors(a) {
                    prop_assert!(g2.has_edge(a, b));
                }
            }
            prop_assert!(chain_recurrent_cells(&g1).is_subset(&chain_recurrent_cells(&g2)));
        }
    }
}
